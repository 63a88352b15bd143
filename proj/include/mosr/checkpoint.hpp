// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: 8-byte magic, little-endian u64 header length, a JSON
// header describing every tensor, then the raw tensor payload as IEEE-754
// doubles. Round-trips bit-exactly.
#pragma once

#include "mosr/tinylm.hpp"

#include "json.hpp"

#include <filesystem>
#include <map>
#include <string>

namespace mosr {

struct LoadedCheckpoint {
    TransformerModel model;
    nlohmann::json meta;
    std::map<std::string, Mat> extra;
};

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     const nlohmann::json& meta = nlohmann::json::object(),
                     const std::map<std::string, Mat>& extra = {});

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace mosr
