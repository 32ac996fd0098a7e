// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace adafm {

enum class Mode { Scratch, FinetuneAll, GPHead, SmallHead, AdaFM, FS };
enum class GpMode { RealOnly, RealAndFake };

Mode mode_from_string(const std::string& s);
const char* mode_to_string(Mode m);

// Every knob of a run. Defaults follow the reference training settings
// (Adam 1e-4 with betas (0, 0.99), batch 16, R1 weight 10) at desk scale.
struct RunConfig {
    // Architecture.
    int resolution = 32;
    int latent_dim = 64;
    int channel_base = 256;
    int blocks_per_group = 1;
    int image_channels = 3;
    int mapping_depth = 8;

    // Mode and partition.
    Mode mode = Mode::AdaFM;
    int gm = 4;
    int dn = 2;

    // Optimisation.
    float lr = 1e-4f;
    float beta1 = 0.0f;
    float beta2 = 0.99f;
    int batch = 16;
    float r1_gamma = 10.0f;
    GpMode gp_mode = GpMode::RealOnly;
    float gp_gamma = 20.0f;  // both-sides penalty weight (extreme-data regime)
    long total_iters = 6000;
    long warmup_iters = -1;  // negative: total_iters / 6

    // Cadence and monitoring.
    int eval_every = 500;
    int snapshot_every = 1000;
    int sample_every = 1000;
    int monitor_window = 100;
    int pfid_samples = 2000;

    std::uint64_t seed = 1;

    // Data / IO.
    std::string data;         // directory, or synth:<domain>:<count>[:<seed>]
    int limit_n = 0;          // 0 keeps the whole corpus
    bool grayscale = false;
    std::string source_ckpt;
    std::string out_dir = "out";

    long effective_warmup() const { return warmup_iters >= 0 ? warmup_iters : total_iters / 6; }
    void validate() const;

    // Key=value serialisation; parsing round-trips exactly.
    std::map<std::string, std::string> to_map() const;
    static RunConfig from_map(const std::map<std::string, std::string>& kv);
    std::string to_text() const;

    // Hash over the shared-backbone architecture keys; transfers require
    // source and target to agree on it.
    std::uint64_t backbone_hash() const;
};

// Flat key=value config file with '#' comments.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> load_config_file(const std::string& path);

}  // namespace adafm
