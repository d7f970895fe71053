#pragma once

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pia/checkpoint.hpp"
#include "pia/config.hpp"
#include "pia/evalkit.hpp"
#include "pia/gradsuite.hpp"
#include "pia/image_io.hpp"
#include "pia/model.hpp"
#include "pia/synthbench.hpp"
#include "pia/trainer.hpp"

// `pia` command line: gen-data, train, eval, gradcheck, dump-attention.
// Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error.
namespace pia::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kConfigError = 2, kIoError = 3 };

struct Overrides {
    std::string config_file;
    std::vector<std::pair<std::string, std::string>> assignments;  // in command-line order
};

inline RunConfig resolve(const Overrides& ov, RunConfig base = {}) {
    RunConfig cfg = ov.config_file.empty() ? std::move(base) : load_config_file(ov.config_file, std::move(base));
    for (const auto& [k, v] : ov.assignments) set_key(cfg, k, v);
    return cfg;
}

namespace detail {

inline void add_config_options(CLI::App* sub, Overrides& ov, const std::string& out_key) {
    sub->add_option("--config", ov.config_file, "flat key = value config file");
    sub->add_option_function<std::string>(
        "--out", [&ov, out_key](const std::string& v) { ov.assignments.emplace_back(out_key, v); }, "output directory");
    sub->add_option_function<std::string>(
        "--ablation", [&ov](const std::string& v) { ov.assignments.emplace_back("ablation", v); },
        "component preset: base, dbdl, orth, intra, full, nonprogressive");
    sub->add_option_function<std::string>(
        "--stage2-start", [&ov](const std::string& v) { ov.assignments.emplace_back("stage2_start_epoch", v); },
        "first Stage-II epoch");
    for (const auto& key : config_keys()) {
        if (key == "ablation") continue;
        sub->add_option_function<std::string>(
            "--" + flag_name(key), [&ov, key](const std::string& v) { ov.assignments.emplace_back(key, v); },
            "override `" + key + "`");
    }
}

inline RunConfig config_from_checkpoint(const Checkpoint& ck) {
    RunConfig cfg;
    apply_config_text(cfg, ck.config_text, "checkpoint config");
    return cfg;
}

inline ModelConfig model_config(const RunConfig& cfg) {
    ModelConfig mc;
    mc.encoder = encoder_config(cfg);
    mc.use_dbdl = cfg.train.ablation.use_dbdl;
    mc.attention_kernel = cfg.train.attention_kernel;
    return mc;
}

// Checkpoint config first, then --config and command-line overrides.
inline std::pair<RunConfig, Checkpoint> resolve_with_checkpoint(const Overrides& ov) {
    const RunConfig pre = resolve(ov);
    Checkpoint ck = load_checkpoint(pre.checkpoint_path());
    RunConfig cfg = resolve(ov, config_from_checkpoint(ck));
    cfg.checkpoint = pre.checkpoint_path().string();
    return {std::move(cfg), std::move(ck)};
}

}  // namespace detail

inline int cmd_gen_data(const Overrides& ov, bool overwrite, std::ostream& out) {
    RunConfig cfg = resolve(ov);
    cfg.gen.validate();
    const auto m = synth::generate_dataset(cfg.gen, cfg.data_dir, overwrite);
    write_text_file(std::filesystem::path(cfg.data_dir) / "config.cfg", resolved_text(cfg));
    std::size_t n_train = 0;
    for (const auto& r : m.rows) n_train += r.split == synth::Split::train;
    out << "wrote " << m.rows.size() << " images (" << n_train << " train, " << m.rows.size() - n_train << " test) to "
        << cfg.data_dir << ", fingerprint " << m.fingerprint << "\n";
    return kOk;
}

inline int cmd_train(const Overrides& ov, std::ostream& out) {
    namespace fs = std::filesystem;
    RunConfig cfg = resolve(ov);
    validate(cfg);
    const auto manifest = synth::load_manifest(cfg.manifest_path(), cfg.gen.image_height, cfg.gen.image_width);
    const auto data = train::TrainData::from_manifest(manifest);
    const auto val = eval::load_split(manifest, synth::Split::test);

    fs::create_directories(cfg.out_dir);
    const std::string text = resolved_text(cfg);
    write_text_file(fs::path(cfg.out_dir) / "config.cfg", text);

    train::TrainHooks hooks;
    hooks.on_epoch_end = [&](std::size_t epoch, const PiaModel&, const bpl::PrototypeBank& bank) {
        out << "epoch " << epoch << " stage " << train::stage_name(cfg.train.stage_at(epoch)) << " prototypes "
            << bank.initialized_count() << "\n";
    };
    auto res = train::train(data, val.pixels.empty() ? nullptr : &val, cfg.train, hooks, encoder_config(cfg));

    std::string losses;
    for (const auto& r : res.epoch_log) losses += r.to_json().dump() + "\n";
    write_text_file(fs::path(cfg.out_dir) / "loss_log.jsonl", losses);
    std::string evals;
    for (const auto& e : res.evals) {
        for (const auto* r : {&e.v2i, &e.i2v}) {
            auto j = eval::to_json(*r);
            j["epoch"] = e.epoch;
            evals += j.dump() + "\n";
        }
    }
    write_text_file(fs::path(cfg.out_dir) / "eval_log.jsonl", evals);
    save_checkpoint(cfg.checkpoint_path(), make_checkpoint(res.model, &res.bank, text));

    if (!res.evals.empty()) {
        const auto& e = res.evals.back();
        out << std::fixed << std::setprecision(4) << "final V2I rank1 " << e.v2i.rank_at(1) << " mAP " << e.v2i.map
            << " | I2V rank1 " << e.i2v.rank_at(1) << " mAP " << e.i2v.map << "\n";
    }
    out << "checkpoint " << cfg.checkpoint_path().string() << "\n";
    return kOk;
}

inline int cmd_eval(const Overrides& ov, const std::string& manifest_arg, const std::string& direction,
                    std::ostream& out) {
    namespace fs = std::filesystem;
    auto [cfg, ck] = detail::resolve_with_checkpoint(ov);
    std::vector<eval::Direction> dirs;
    if (direction == "both") {
        dirs = {eval::Direction::v2i, eval::Direction::i2v};
    } else {
        dirs = {eval::parse_direction(direction)};
    }
    const fs::path mpath = manifest_arg.empty() ? cfg.manifest_path() : fs::path(manifest_arg);
    PiaModel model = model_from_checkpoint(ck, detail::model_config(cfg));
    const auto manifest = synth::load_manifest(mpath, cfg.gen.image_height, cfg.gen.image_width);
    const auto test = eval::load_split(manifest, synth::Split::test);
    const auto vis = eval::extract_features(model, test, synth::Modality::V).identity;
    const auto ir = eval::extract_features(model, test, synth::Modality::I).identity;
    fs::create_directories(cfg.out_dir);
    for (auto d : dirs) {
        const auto report = eval::evaluate(eval::build_protocol(vis, ir, d));
        const auto j = eval::to_json(report);
        out << j.dump() << "\n";
        std::string name = eval::direction_name(d);
        for (auto& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        write_text_file(fs::path(cfg.out_dir) / ("eval_" + name + ".json"), j.dump(2) + "\n");
    }
    return kOk;
}

inline int cmd_gradcheck(double tol, const std::string& only, std::size_t configs, std::uint64_t seed,
                         std::ostream& out) {
    auto catalog = gradsuite::catalog();
    if (!only.empty()) {
        std::erase_if(catalog, [&](const gradsuite::Entry& e) { return e.name != only; });
        if (catalog.empty()) throw ConfigError("--only: no gradient-check entry named '" + only + "'");
    }
    bool ok = true;
    out << std::left << std::setw(22) << "entry" << std::setw(9) << "configs" << std::setw(11) << "resampled"
        << std::setw(15) << "max_rel_error" << "status\n";
    for (const auto& e : catalog) {
        const auto r = gradsuite::run_entry(e, configs, tol, seed);
        ok = ok && r.passed();
        out << std::left << std::setw(22) << r.name << std::setw(9) << r.configs << std::setw(11) << r.resamples
            << std::setw(15) << std::scientific << std::setprecision(3) << r.max_rel_error << std::defaultfloat
            << (r.passed() ? "pass" : "FAIL") << "\n";
    }
    out << (ok ? "all entries pass" : "gradient check FAILED") << " at tol " << tol << "\n";
    return ok ? kOk : kCheckFailed;
}

inline int cmd_dump_attention(const Overrides& ov, const std::string& sample, std::ostream& out) {
    namespace fs = std::filesystem;
    auto [cfg, ck] = detail::resolve_with_checkpoint(ov);
    const auto mc = detail::model_config(cfg);
    if (!mc.use_dbdl) throw ConfigError("dump-attention: checkpoint was trained without the attention module");
    PiaModel model = model_from_checkpoint(ck, mc);
    Tensor img = image_io::read_ppm(sample);
    if (img.dim(1) != cfg.gen.image_height || img.dim(2) != cfg.gen.image_width) {
        throw ConfigError("dump-attention: sample is " + std::to_string(img.dim(1)) + "x" + std::to_string(img.dim(2)) +
                          ", model expects " + std::to_string(cfg.gen.image_height) + "x" +
                          std::to_string(cfg.gen.image_width));
    }
    img.shape.insert(img.shape.begin(), 1);
    Tape tape;
    const auto fw = model.forward(tape, std::move(img), Mode::eval);
    const auto& zs = fw.z.shape();
    const Shape map{zs[2], zs[3]};
    fs::create_directories(cfg.out_dir);
    image_io::write_pgm(fs::path(cfg.out_dir) / "m_c.pgm", Tensor(map, fw.masks->m_c.value().data));
    image_io::write_pgm(fs::path(cfg.out_dir) / "m_id.pgm", Tensor(map, fw.masks->m_id.value().data));
    out << "wrote m_c.pgm and m_id.pgm (" << zs[2] << "x" << zs[3] << ", lambda " << model.attention.lambda() << ") to "
        << cfg.out_dir << "\n";
    return kOk;
}

/// Parses and dispatches. Errors are reported on `err` and mapped to exit codes.
inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Cross-modality clothing-change re-identification at desk scale"};
    app.require_subcommand(1);

    Overrides gen_ov, train_ov, eval_ov, attn_ov;
    bool overwrite = false;
    auto* gen = app.add_subcommand("gen-data", "render the synthetic dataset");
    detail::add_config_options(gen, gen_ov, "data_dir");
    gen->add_flag("--overwrite", overwrite, "replace an existing dataset");

    auto* trn = app.add_subcommand("train", "train a model and write checkpoint and logs");
    detail::add_config_options(trn, train_ov, "out_dir");

    std::string manifest, direction = "both";
    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    detail::add_config_options(evl, eval_ov, "out_dir");
    evl->add_option("--manifest", manifest, "dataset manifest (default: <data_dir>/manifest.csv)");
    evl->add_option("--direction", direction, "v2i, i2v or both")->check(CLI::IsMember({"v2i", "i2v", "both", "V2I", "I2V"}));

    double tol = 1e-4;
    std::string only;
    std::size_t configs = 20;
    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every primitive and loss");
    gc->add_option("--tol", tol, "relative error tolerance");
    gc->add_option("--only", only, "check a single catalog entry");
    gc->add_option("--configs", configs, "seeded configurations per entry");
    gc->add_option("--seed", gc_seed, "catalog seed");

    std::string sample;
    auto* att = app.add_subcommand("dump-attention", "write m_c and m_id for one sample as PGM");
    detail::add_config_options(att, attn_ov, "out_dir");
    att->add_option("--sample", sample, "P6 image")->required();

    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return kConfigError;
    }

    try {
        if (*gen) return cmd_gen_data(gen_ov, overwrite, out);
        if (*trn) return cmd_train(train_ov, out);
        if (*evl) return cmd_eval(eval_ov, manifest, direction, out);
        if (*gc) return cmd_gradcheck(tol, only, configs, gc_seed, out);
        if (*att) return cmd_dump_attention(attn_ov, sample, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const AttributeError& e) {
        err << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << "\n";
        return kIoError;
    } catch (const synth::ManifestError& e) {
        err << "I/O error: " << e.what() << "\n";
        return kIoError;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "I/O error: " << e.what() << "\n";
        return kIoError;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kCheckFailed;
    }
    return kConfigError;
}

}  // namespace pia::cli
