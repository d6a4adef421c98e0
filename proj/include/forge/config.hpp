#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "forge/avprpo.hpp"
#include "forge/genbackbone.hpp"
#include "forge/sfcavp.hpp"
#include "forge/synthdata.hpp"

namespace forge::config {

// Single source of truth for one run. Geometry that two modules must agree
// on (segment sizes, spectrogram shape) lives in the dataset section and is
// derived into the encoder/backbone configs at load time.
struct RunConfig {
    uint64_t seed = 1234;
    int threads = 0;

    synth::DatasetConfig dataset;
    int n_clips = 200;
    int holdout_clips = 16;

    cavp::SlowFastConfig encoder;
    cavp::PretrainHyper pretrain;

    gen::BackboneConfig backbone;
    gen::TrainBaseHyper train_base;

    rpo::RPOConfig rpo;
    int rpo_train_clips = 48;
    int eval_sample_steps = 25;

    std::string config_hash;  // hash of the canonical serialized form

    int train_clip_count() const { return n_clips - holdout_clips; }
    void validate() const;
};

RunConfig defaults();

// Strict parse: unknown keys anywhere are rejected, every field is validated
// against its module's invariants, and derived geometry is filled in.
RunConfig from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

nlohmann::json to_json(const RunConfig& cfg);

// Canonical serialized form used for config hashing.
std::string canonical_dump(const RunConfig& cfg);

}  // namespace forge::config
