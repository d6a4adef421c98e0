#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "forge/config.hpp"

namespace forge::pipeline {

struct StageRecord {
    std::string name;
    std::map<std::string, std::string> input_hashes;
    std::vector<std::pair<std::string, std::string>> outputs;  // relative path, hash
    uint64_t seed = 0;
    double wall_ms = 0.0;  // informational only, excluded from the content hash
};

struct RunManifest {
    int format_version = 1;
    std::string config_hash;
    std::vector<StageRecord> stages;
    std::string content_hash;  // over config hash + stage records minus wall time
};

const std::vector<std::string>& all_stages();  // dependency order

// Executes the requested stages in dependency order inside run_dir. Inputs
// for a stage must either exist already or be produced earlier in the same
// invocation. Re-running with the same config and seed reproduces every
// artifact bit-exactly.
RunManifest run_pipeline(const config::RunConfig& cfg, const std::filesystem::path& run_dir,
                         std::vector<std::string> stages);

RunManifest load_run_manifest(const std::filesystem::path& run_dir);
std::string manifest_content_hash(const RunManifest& m);

// Per-stage seed: the global seed split by stage name.
uint64_t stage_seed(const config::RunConfig& cfg, const std::string& stage);

}  // namespace forge::pipeline
