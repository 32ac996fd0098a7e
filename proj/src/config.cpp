// SPDX-License-Identifier: Apache-2.0
#include "adafm/config.hpp"

#include <fmt/format.h>

#include <fstream>
#include <sstream>

#include "adafm/errors.hpp"
#include "adafm/rng.hpp"

namespace adafm {

Mode mode_from_string(const std::string& s) {
    if (s == "scratch") return Mode::Scratch;
    if (s == "finetune_all") return Mode::FinetuneAll;
    if (s == "gphead") return Mode::GPHead;
    if (s == "smallhead") return Mode::SmallHead;
    if (s == "adafm") return Mode::AdaFM;
    if (s == "fs") return Mode::FS;
    throw ConfigError("unknown mode '" + s +
                      "' (expected scratch|finetune_all|gphead|smallhead|adafm|fs)");
}

const char* mode_to_string(Mode m) {
    switch (m) {
        case Mode::Scratch: return "scratch";
        case Mode::FinetuneAll: return "finetune_all";
        case Mode::GPHead: return "gphead";
        case Mode::SmallHead: return "smallhead";
        case Mode::AdaFM: return "adafm";
        case Mode::FS: return "fs";
    }
    return "?";
}

void RunConfig::validate() const {
    auto positive = [](double v, const char* name) {
        if (!(v > 0)) throw ConfigError(fmt::format("{} must be positive", name));
    };
    if (resolution < 16 || (resolution & (resolution - 1)) != 0)
        throw ConfigError(fmt::format("resolution must be a power of two >= 16, got {}", resolution));
    positive(lr, "lr");
    positive(batch, "batch");
    positive(latent_dim, "latent_dim");
    positive(channel_base, "channel_base");
    positive(blocks_per_group, "blocks_per_group");
    positive(total_iters, "total_iters");
    positive(monitor_window, "monitor_window");
    if (r1_gamma < 0 || gp_gamma < 0) throw ConfigError("penalty weights must be >= 0");
    if (effective_warmup() > total_iters)
        throw ConfigError(fmt::format("warmup_iters ({}) exceeds total_iters ({})",
                                      effective_warmup(), total_iters));
    if (image_channels != 1 && image_channels != 3)
        throw ConfigError("image_channels must be 1 or 3");
    int groups = 0;
    for (int r = 4; r < resolution; r *= 2) ++groups;
    if (channel_base % (1 << groups) != 0)
        throw ConfigError(fmt::format("channel_base {} not divisible by 2^{}", channel_base, groups));
    if (channel_base / (1 << groups) < 2)
        throw ConfigError("channel_base too small for this resolution");
}

std::map<std::string, std::string> RunConfig::to_map() const {
    std::map<std::string, std::string> kv;
    kv["resolution"] = std::to_string(resolution);
    kv["latent_dim"] = std::to_string(latent_dim);
    kv["channel_base"] = std::to_string(channel_base);
    kv["blocks_per_group"] = std::to_string(blocks_per_group);
    kv["image_channels"] = std::to_string(image_channels);
    kv["mapping_depth"] = std::to_string(mapping_depth);
    kv["mode"] = mode_to_string(mode);
    kv["gm"] = std::to_string(gm);
    kv["dn"] = std::to_string(dn);
    kv["lr"] = fmt::format("{}", lr);
    kv["beta1"] = fmt::format("{}", beta1);
    kv["beta2"] = fmt::format("{}", beta2);
    kv["batch"] = std::to_string(batch);
    kv["r1_gamma"] = fmt::format("{}", r1_gamma);
    kv["gp_mode"] = gp_mode == GpMode::RealOnly ? "real_only" : "real_and_fake";
    kv["gp_gamma"] = fmt::format("{}", gp_gamma);
    kv["total_iters"] = std::to_string(total_iters);
    kv["warmup_iters"] = std::to_string(warmup_iters);
    kv["eval_every"] = std::to_string(eval_every);
    kv["snapshot_every"] = std::to_string(snapshot_every);
    kv["sample_every"] = std::to_string(sample_every);
    kv["monitor_window"] = std::to_string(monitor_window);
    kv["pfid_samples"] = std::to_string(pfid_samples);
    kv["seed"] = std::to_string(seed);
    kv["data"] = data;
    kv["limit_n"] = std::to_string(limit_n);
    kv["grayscale"] = grayscale ? "1" : "0";
    kv["source_ckpt"] = source_ckpt;
    kv["out_dir"] = out_dir;
    return kv;
}

namespace {

template <typename T>
void read_kv(const std::map<std::string, std::string>& kv, const std::string& key, T& out) {
    const auto it = kv.find(key);
    if (it == kv.end()) return;
    std::istringstream is(it->second);
    T value{};
    if (!(is >> value)) throw ConfigError("config: cannot parse value for '" + key + "'");
    out = value;
}

void read_kv(const std::map<std::string, std::string>& kv, const std::string& key,
             std::string& out) {
    const auto it = kv.find(key);
    if (it != kv.end()) out = it->second;
}

}  // namespace

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& kv) {
    RunConfig c;
    read_kv(kv, "resolution", c.resolution);
    read_kv(kv, "latent_dim", c.latent_dim);
    read_kv(kv, "channel_base", c.channel_base);
    read_kv(kv, "blocks_per_group", c.blocks_per_group);
    read_kv(kv, "image_channels", c.image_channels);
    read_kv(kv, "mapping_depth", c.mapping_depth);
    if (kv.count("mode")) c.mode = mode_from_string(kv.at("mode"));
    read_kv(kv, "gm", c.gm);
    read_kv(kv, "dn", c.dn);
    read_kv(kv, "lr", c.lr);
    read_kv(kv, "beta1", c.beta1);
    read_kv(kv, "beta2", c.beta2);
    read_kv(kv, "batch", c.batch);
    read_kv(kv, "r1_gamma", c.r1_gamma);
    if (kv.count("gp_mode")) {
        const auto& v = kv.at("gp_mode");
        if (v == "real_only")
            c.gp_mode = GpMode::RealOnly;
        else if (v == "real_and_fake")
            c.gp_mode = GpMode::RealAndFake;
        else
            throw ConfigError("config: gp_mode must be real_only or real_and_fake");
    }
    read_kv(kv, "gp_gamma", c.gp_gamma);
    read_kv(kv, "total_iters", c.total_iters);
    read_kv(kv, "warmup_iters", c.warmup_iters);
    read_kv(kv, "eval_every", c.eval_every);
    read_kv(kv, "snapshot_every", c.snapshot_every);
    read_kv(kv, "sample_every", c.sample_every);
    read_kv(kv, "monitor_window", c.monitor_window);
    read_kv(kv, "pfid_samples", c.pfid_samples);
    read_kv(kv, "seed", c.seed);
    read_kv(kv, "data", c.data);
    read_kv(kv, "limit_n", c.limit_n);
    int gray = c.grayscale ? 1 : 0;
    read_kv(kv, "grayscale", gray);
    c.grayscale = gray != 0;
    read_kv(kv, "source_ckpt", c.source_ckpt);
    read_kv(kv, "out_dir", c.out_dir);
    return c;
}

std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [k, v] : to_map()) out += k + "=" + v + "\n";
    return out;
}

std::uint64_t RunConfig::backbone_hash() const {
    const std::string canon = fmt::format(
        "resolution={};channel_base={};blocks_per_group={};image_channels={}", resolution,
        channel_base, blocks_per_group, image_channels);
    return fnv1a(canon);
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(fmt::format("config line {}: expected key=value, got '{}'", line_no, line));
        std::string key = line.substr(0, eq);
        std::string value = line.substr(eq + 1);
        const auto kend = key.find_last_not_of(" \t");
        key = key.substr(0, kend + 1);
        const auto vstart = value.find_first_not_of(" \t");
        value = vstart == std::string::npos ? "" : value.substr(vstart);
        kv[key] = value;
    }
    return kv;
}

std::map<std::string, std::string> load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

}  // namespace adafm
