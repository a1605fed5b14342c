#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sparsekd/common.hpp"

// Flat `key = value` config files with one level of [section] grouping.
// Every run hyperparameter lives here; the canonical serialization (fixed
// key order) is hashed into checkpoints so resumes can verify the config.

namespace sparsekd {

struct ConfigFile {
    // "section.key" -> value; line numbers kept for error messages.
    std::map<std::string, std::string> values;
    std::map<std::string, int> lines;

    bool has(const std::string& key) const { return values.count(key) != 0; }
    const std::string& raw(const std::string& key) const;
};

ConfigFile parse_config_text(const std::string& text, const std::string& origin = "<string>");
ConfigFile parse_config_file(const std::string& path);

struct DistillConfig {
    // run
    std::uint64_t seed = 1;
    std::int64_t epochs = 30;
    std::int64_t warmup_epochs = 5;
    std::int64_t batch = 32;
    std::int64_t checkpoint_every = 0;  // steps; 0 = final checkpoint only
    std::string out_dir;
    // data
    std::string data_dir;
    bool aug_crop = true;
    bool aug_flip = true;
    bool aug_jitter = true;
    // student
    std::int64_t image_size = 64;
    std::vector<std::int64_t> widths = {32, 64, 128, 256};
    std::int64_t blocks = 2;
    std::int64_t head_dim = 64;
    // teacher
    std::string teacher_kind = "toy";  // toy | file
    std::int64_t teacher_patch = 16;
    std::int64_t teacher_dim = 64;
    std::int64_t teacher_depth = 2;
    std::int64_t teacher_heads = 1;
    std::uint64_t teacher_seed = 7;
    std::string teacher_export;  // dir, kind=file only
    // mask
    double mask_ratio = 0.6;
    // queue
    std::int64_t queue_capacity = 512;
    double tau = 0.05;
    std::string sim_mode = "consistent";  // consistent | as-written
    // loss
    double w_sim = 1.0;
    double w_feat = 1.0;
    // optim
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double clip_norm = 5.0;
    bool trust_ratio = false;
    // arms
    bool arm_sparse = true;
    bool arm_unet = true;

    static DistillConfig from_file(const std::string& path);
    static DistillConfig from_config(const ConfigFile& f);
    void validate() const;

    // Deterministic full serialization; equal configs produce equal text.
    std::string canonical_text() const;
    std::uint64_t hash() const;
    // Field-by-field differences ("section.key: a vs b"), for resume errors.
    std::vector<std::string> diff(const DistillConfig& other) const;
};

}  // namespace sparsekd
