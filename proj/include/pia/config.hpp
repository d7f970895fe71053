#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pia/hash.hpp"
#include "pia/synthbench.hpp"
#include "pia/trainer.hpp"

// Flat `key = value` run configuration. Keys match the field names of the
// generator and trainer configs; `#` starts a comment; later assignments win.
namespace pia {

struct RunConfig {
    synth::GenConfig gen;
    train::TrainConfig train;
    std::string data_dir = "data";
    std::string out_dir = "run";
    std::string checkpoint;  // empty: <out_dir>/checkpoint.bin

    std::filesystem::path manifest_path() const { return std::filesystem::path(data_dir) / "manifest.csv"; }
    std::filesystem::path checkpoint_path() const {
        return checkpoint.empty() ? std::filesystem::path(out_dir) / "checkpoint.bin" : std::filesystem::path(checkpoint);
    }
};

namespace config_detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    }
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ConfigError(key + ": integer out of range '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw ConfigError(key + ": expected a number, got '" + v + "'");
    }
    if (used != v.size()) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

template <class T>
Field uint_field(std::string key, T RunConfig::*group, std::size_t T::*member) {
    return {key, [=](const RunConfig& c) { return std::to_string(c.*group.*member); },
            [=](RunConfig& c, const std::string& v) { c.*group.*member = static_cast<std::size_t>(parse_uint(key, v)); }};
}

template <class T>
Field double_field(std::string key, T RunConfig::*group, double T::*member) {
    return {key, [=](const RunConfig& c) { return fmt_double(c.*group.*member); },
            [=](RunConfig& c, const std::string& v) { c.*group.*member = parse_double(key, v); }};
}

inline Field flag_field(std::string key, bool train::AblationFlags::*member) {
    return {key, [=](const RunConfig& c) { return std::string(c.train.ablation.*member ? "true" : "false"); },
            [=](RunConfig& c, const std::string& v) { c.train.ablation.*member = parse_bool(key, v); }};
}

inline Field string_field(std::string key, std::string RunConfig::*member) {
    return {key, [=](const RunConfig& c) { return c.*member; },
            [=](RunConfig& c, const std::string& v) { c.*member = v; }};
}

inline const std::vector<Field>& fields() {
    using G = synth::GenConfig;
    using T = train::TrainConfig;
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back({"seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
                     [](RunConfig& c, const std::string& v) { c.gen.seed = c.train.seed = parse_uint("seed", v); }});
        f.push_back(uint_field("n_identities", &RunConfig::gen, &G::n_identities));
        f.push_back(uint_field("images_per_identity_per_modality", &RunConfig::gen, &G::images_per_identity_per_modality));
        f.push_back(uint_field("image_height", &RunConfig::gen, &G::image_height));
        f.push_back(uint_field("image_width", &RunConfig::gen, &G::image_width));
        f.push_back(uint_field("outfits_per_identity", &RunConfig::gen, &G::outfits_per_identity));
        f.push_back({"clothing_modality_coupling",
                     [](const RunConfig& c) { return std::string(synth::coupling_name(c.gen.clothing_modality_coupling)); },
                     [](RunConfig& c, const std::string& v) { c.gen.clothing_modality_coupling = synth::parse_coupling(v); }});
        f.push_back(double_field("noise_level", &RunConfig::gen, &G::noise_level));
        f.push_back(double_field("split_ratio", &RunConfig::gen, &G::split_ratio));
        f.push_back(double_field("lambda1", &RunConfig::train, &T::lambda1));
        f.push_back(double_field("lambda2", &RunConfig::train, &T::lambda2));
        f.push_back(double_field("tau", &RunConfig::train, &T::tau));
        f.push_back(double_field("alpha", &RunConfig::train, &T::alpha));
        f.push_back(uint_field("ids_per_batch", &RunConfig::train, &T::ids_per_batch));
        f.push_back(uint_field("instances_per_modality", &RunConfig::train, &T::instances_per_modality));
        f.push_back(uint_field("epochs", &RunConfig::train, &T::epochs));
        f.push_back(uint_field("stage2_start_epoch", &RunConfig::train, &T::stage2_start_epoch));
        f.push_back(double_field("base_lr", &RunConfig::train, &T::base_lr));
        f.push_back(double_field("lr_decay_factor", &RunConfig::train, &T::lr_decay_factor));
        f.push_back(uint_field("lr_decay_period_epochs", &RunConfig::train, &T::lr_decay_period_epochs));
        f.push_back({"pooling_mode", [](const RunConfig& c) { return std::string(to_string(c.train.pooling_mode)); },
                     [](RunConfig& c, const std::string& v) { c.train.pooling_mode = parse_pooling_mode(v); }});
        f.push_back(double_field("flip_probability", &RunConfig::train, &T::flip_probability));
        f.push_back(uint_field("attention_kernel", &RunConfig::train, &T::attention_kernel));
        f.push_back(uint_field("eval_every", &RunConfig::train, &T::eval_every));
        f.push_back(flag_field("use_dbdl", &train::AblationFlags::use_dbdl));
        f.push_back(flag_field("use_orth", &train::AblationFlags::use_orth));
        f.push_back(flag_field("use_intra", &train::AblationFlags::use_intra));
        f.push_back(flag_field("use_inter", &train::AblationFlags::use_inter));
        f.push_back(flag_field("progressive", &train::AblationFlags::progressive));
        f.push_back(string_field("data_dir", &RunConfig::data_dir));
        f.push_back(string_field("out_dir", &RunConfig::out_dir));
        f.push_back(string_field("checkpoint", &RunConfig::checkpoint));
        return f;
    }();
    return table;
}

}  // namespace config_detail

/// Command-line spelling of a key: `stage2_start_epoch` -> `stage2-start-epoch`.
inline std::string flag_name(std::string key) {
    for (auto& ch : key) {
        if (ch == '_') ch = '-';
    }
    return key;
}

inline std::vector<std::string> config_keys() {
    std::vector<std::string> out{"ablation"};
    for (const auto& f : config_detail::fields()) out.push_back(f.key);
    return out;
}

/// Applies one assignment. `ablation` is a pseudo-key that sets the five
/// component flags from a named preset. `stage2_start` is accepted for
/// `stage2_start_epoch`.
inline void set_key(RunConfig& cfg, std::string key, const std::string& value) {
    if (key == "stage2_start") key = "stage2_start_epoch";
    if (key == "ablation") {
        cfg.train.ablation = train::AblationFlags::preset(value);
        return;
    }
    for (const auto& f : config_detail::fields()) {
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_key(const RunConfig& cfg, const std::string& key) {
    for (const auto& f : config_detail::fields()) {
        if (f.key == key) return f.get(cfg);
    }
    throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin = "<config>") {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
        }
        const std::string key = config_detail::trim(line.substr(0, eq));
        try {
            set_key(cfg, key, config_detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    apply_config_text(base, ss.str(), path.string());
    return base;
}

/// Every key in a fixed order; feeding this back through apply_config_text
/// reproduces `cfg` exactly (doubles are written with 17 significant digits).
inline std::string resolved_text(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : config_detail::fields()) out += f.key + " = " + f.get(cfg) + "\n";
    return out;
}

inline std::string config_fingerprint(const RunConfig& cfg) { return hex64(fnv1a64(resolved_text(cfg))); }

inline void validate(const RunConfig& cfg) {
    cfg.gen.validate();
    cfg.train.validate();
    if (cfg.gen.images_per_identity_per_modality < cfg.train.instances_per_modality) {
        throw ConfigError("images_per_identity_per_modality (" + std::to_string(cfg.gen.images_per_identity_per_modality) +
                          ") must be >= instances_per_modality (" + std::to_string(cfg.train.instances_per_modality) + ")");
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out << text;
        if (!out) throw IoError("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot publish " + path.string() + ": " + ec.message());
}

/// Model geometry implied by a run configuration.
inline EncoderConfig encoder_config(const RunConfig& cfg) {
    EncoderConfig enc;
    enc.height = cfg.gen.image_height;
    enc.width = cfg.gen.image_width;
    enc.pooling = cfg.train.pooling_mode;
    return enc;
}

}  // namespace pia
