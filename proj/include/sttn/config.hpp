#pragma once

#include <string>

#include "sttn/data.hpp"
#include "sttn/model.hpp"

namespace sttn {

// Run description parsed from a 'key = value' config file (# comments).
struct RunConfig {
    ModelConfig model;
    DatasetKind dataset = DatasetKind::mnist_idx;
    std::string data_dir;
    int epochs = 20;
    int batch = 64;
    float lr = 0.005f;
    float weight_decay = 1e-6f;
    uint64_t seed = 1;
    bool augment_pad_crop = false;
    bool augment_hflip = false;
    int threads = 0;  // 0 = deterministic single-thread
};

RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& origin);
std::string config_to_text(const RunConfig& cfg);

}  // namespace sttn
