#pragma once

#include <filesystem>
#include <string>
#include <utility>

#include <json.hpp>

#include "forge/nn.hpp"

namespace forge {

// Versioned parameter snapshot: a JSON header (section tag, config hash,
// arbitrary metadata, name->shape table) followed by a flat little-endian
// float64 blob in header order.
struct CheckpointMeta {
    int format_version = 1;
    std::string section;      // "sfcavp" or "genbackbone"
    std::string config_hash;
    nlohmann::json extra;     // model hyperparameters, freeze mask, ...
};

void save_checkpoint(const std::filesystem::path& path, const nn::ParamStore& params,
                     const CheckpointMeta& meta);

std::pair<nn::ParamStore, CheckpointMeta> load_checkpoint(const std::filesystem::path& path);

// Content hash over parameter names, shapes, and values.
std::string params_hash(const nn::ParamStore& params);

}  // namespace forge
