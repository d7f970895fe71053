#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pia/bpl.hpp"
#include "pia/dbdl.hpp"
#include "pia/evalkit.hpp"
#include "pia/model.hpp"
#include "pia/rng.hpp"
#include "pia/synthbench.hpp"

// Progressive two-stage optimization: Stage I trains the disentanglement
// objective alone, Stage II adds the prototype losses.
namespace pia::train {

class TrainError : public Error {
public:
    using Error::Error;
};

class MissingGradientError : public Error {
public:
    using Error::Error;
};

class SamplingError : public Error {
public:
    using Error::Error;
};

enum class Stage { I, II };

inline const char* stage_name(Stage s) { return s == Stage::I ? "I" : "II"; }

/// Component switches. All off is the CE-only baseline.
struct AblationFlags {
    bool use_dbdl = true;
    bool use_orth = true;
    bool use_intra = true;
    bool use_inter = true;
    bool progressive = true;

    static AblationFlags preset(const std::string& name) {
        if (name == "base") return {false, false, false, false, true};
        if (name == "dbdl") return {true, false, false, false, true};
        if (name == "orth") return {true, true, false, false, true};
        if (name == "intra") return {true, true, true, false, true};
        if (name == "full") return {true, true, true, true, true};
        if (name == "nonprogressive") return {true, true, true, true, false};
        throw ConfigError("ablation: unknown preset '" + name +
                          "' (expected base, dbdl, orth, intra, full or nonprogressive)");
    }
};

struct TrainConfig {
    double lambda1 = 0.5;
    double lambda2 = 1.5;
    double tau = 1.0 / 16.0;
    double alpha = 0.9;
    std::size_t ids_per_batch = 8;
    std::size_t instances_per_modality = 4;
    std::size_t epochs = 30;
    std::size_t stage2_start_epoch = 18;
    // From-scratch training on the synthetic set needs a far larger step than
    // fine-tuning a pretrained backbone; see reference_schedule() for the 3.5e-4 run.
    double base_lr = 1e-2;
    double lr_decay_factor = 0.1;
    std::size_t lr_decay_period_epochs = 10;
    std::uint64_t seed = 0;
    PoolingMode pooling_mode = PoolingMode::gap_gmp;
    double flip_probability = 0.5;
    std::size_t attention_kernel = 7;
    AblationFlags ablation;
    std::size_t eval_every = 1;  // 0: evaluate after the final epoch only

    void validate() const {
        if (lambda1 < 0 || lambda2 < 0) throw ConfigError("lambda1/lambda2 must be >= 0");
        if (!(tau > 0)) throw ConfigError("tau must be > 0");
        if (alpha < 0 || alpha > 1) throw ConfigError("alpha must lie in [0,1]");
        if (ids_per_batch == 0) throw ConfigError("ids_per_batch must be >= 1");
        if (instances_per_modality == 0) throw ConfigError("instances_per_modality must be >= 1");
        if (stage2_start_epoch > epochs) throw ConfigError("stage2_start_epoch must be <= epochs");
        if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
        if (!(lr_decay_factor > 0)) throw ConfigError("lr_decay_factor must be > 0");
        if (lr_decay_period_epochs == 0) throw ConfigError("lr_decay_period_epochs must be >= 1");
        if (flip_probability < 0 || flip_probability > 1) throw ConfigError("flip_probability must lie in [0,1]");
        if (ablation.use_orth && !ablation.use_dbdl) throw ConfigError("use_orth requires use_dbdl");
    }

    /// The full-length schedule: 90 epochs, switch at 55, decay every 30.
    static TrainConfig reference_schedule() {
        TrainConfig c;
        c.epochs = 90;
        c.stage2_start_epoch = 55;
        c.lr_decay_period_epochs = 30;
        c.base_lr = 3.5e-4;
        return c;
    }

    std::size_t batch_size() const { return 2 * ids_per_batch * instances_per_modality; }
    bool bpl_enabled() const { return ablation.use_intra || ablation.use_inter; }
    std::size_t effective_stage2_start() const { return ablation.progressive ? stage2_start_epoch : 0; }

    Stage stage_at(std::size_t epoch) const {
        return bpl_enabled() && epoch >= effective_stage2_start() ? Stage::II : Stage::I;
    }
};

/// base_lr · decay_factor^floor(epoch / decay_period).
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
    if (epoch >= cfg.epochs) {
        throw ConfigError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
    }
    return cfg.base_lr * std::pow(cfg.lr_decay_factor, static_cast<double>(epoch / cfg.lr_decay_period_epochs));
}

// --------------------------------------------------------------------------
// Loss bookkeeping

/// Per-term values of one objective evaluation. Absent terms were not computed.
struct LossTerms {
    double ce_id = 0.0;
    std::optional<double> ce_clothing;
    std::optional<double> orth;
    std::optional<double> intra_v, intra_i;
    std::optional<double> inter_v, inter_i;

    bool has_bpl() const { return intra_v || intra_i || inter_v || inter_i; }
};

struct LossReport {
    Stage stage = Stage::I;
    std::size_t epoch = 0;
    std::uint64_t iteration = 0;
    LossTerms terms;
    double total = 0.0;

    nlohmann::json to_json() const {
        nlohmann::json j{{"epoch", epoch}, {"iteration", iteration}, {"stage", stage_name(stage)}, {"ce_id", terms.ce_id}};
        const auto put = [&](const char* k, const std::optional<double>& v) {
            if (v) j[k] = *v;
        };
        put("ce_clothing", terms.ce_clothing);
        put("orth", terms.orth);
        put("intra_v", terms.intra_v);
        put("intra_i", terms.intra_i);
        put("inter_v", terms.inter_v);
        put("inter_i", terms.inter_i);
        j["total"] = total;
        return j;
    }

    static LossReport from_json(const nlohmann::json& j) {
        LossReport r;
        r.epoch = j.at("epoch").get<std::size_t>();
        r.iteration = j.at("iteration").get<std::uint64_t>();
        r.stage = j.at("stage").get<std::string>() == "II" ? Stage::II : Stage::I;
        r.terms.ce_id = j.at("ce_id").get<double>();
        const auto get = [&](const char* k, std::optional<double>& v) {
            if (j.contains(k)) v = j.at(k).get<double>();
        };
        get("ce_clothing", r.terms.ce_clothing);
        get("orth", r.terms.orth);
        get("intra_v", r.terms.intra_v);
        get("intra_i", r.terms.intra_i);
        get("inter_v", r.terms.inter_v);
        get("inter_i", r.terms.inter_i);
        r.total = j.at("total").get<double>();
        return r;
    }
};

/// Stage I: L_ce + λ1 L_orth.
/// Stage II: Stage I + L_intra^V + L_intra^I + λ2 (L_inter^V + L_inter^I).
/// The same evaluation order is used for Vars in combine_vars().
inline double combine(Stage stage, const LossTerms& t, const TrainConfig& cfg) {
    if (stage == Stage::I && t.has_bpl()) throw TrainError("stage_loss: prototype terms supplied in Stage I");
    double total = t.ce_id;
    if (t.ce_clothing) total = total + *t.ce_clothing;
    if (t.orth) total = total + cfg.lambda1 * *t.orth;
    if (stage == Stage::II) {
        if (t.intra_v) total = total + *t.intra_v;
        if (t.intra_i) total = total + *t.intra_i;
        if (t.inter_v && t.inter_i) total = total + cfg.lambda2 * (*t.inter_v + *t.inter_i);
    }
    return total;
}

inline LossReport stage_loss(Stage stage, const LossTerms& terms, const TrainConfig& cfg, std::size_t epoch = 0,
                             std::uint64_t iteration = 0) {
    return {stage, epoch, iteration, terms, combine(stage, terms, cfg)};
}

struct LossVars {
    Var ce_id;
    std::optional<Var> ce_clothing, orth, intra_v, intra_i, inter_v, inter_i;

    LossTerms values() const {
        LossTerms t;
        t.ce_id = ce_id.item();
        const auto v = [](const std::optional<Var>& x) -> std::optional<double> {
            if (x) return x->item();
            return std::nullopt;
        };
        t.ce_clothing = v(ce_clothing);
        t.orth = v(orth);
        t.intra_v = v(intra_v);
        t.intra_i = v(intra_i);
        t.inter_v = v(inter_v);
        t.inter_i = v(inter_i);
        return t;
    }
};

inline Var combine_vars(Stage stage, const LossVars& l, const TrainConfig& cfg) {
    if (stage == Stage::I && (l.intra_v || l.intra_i || l.inter_v || l.inter_i)) {
        throw TrainError("stage_loss: prototype terms supplied in Stage I");
    }
    Var total = l.ce_id;
    if (l.ce_clothing) total = ops::add(total, *l.ce_clothing);
    if (l.orth) total = ops::add(total, ops::scale(*l.orth, cfg.lambda1));
    if (stage == Stage::II) {
        if (l.intra_v) total = ops::add(total, *l.intra_v);
        if (l.intra_i) total = ops::add(total, *l.intra_i);
        if (l.inter_v && l.inter_i) total = ops::add(total, ops::scale(ops::add(*l.inter_v, *l.inter_i), cfg.lambda2));
    }
    return total;
}

// --------------------------------------------------------------------------
// Optimizer

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

/// One bias-corrected Adam step (no weight decay) over `params` using their
/// accumulated gradients.
inline void optimizer_step(const std::vector<Tensor*>& params, AdamState& st, double lr) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i]->grad) throw MissingGradientError("optimizer_step: parameter " + std::to_string(i) + " has no gradient");
    }
    if (st.m.empty()) {
        for (auto* p : params) {
            st.m.emplace_back(p->size(), 0.0);
            st.v.emplace_back(p->size(), 0.0);
        }
    }
    if (st.m.size() != params.size()) throw TrainError("optimizer_step: parameter list changed between steps");
    ++st.step;
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->data;
        const auto& g = *params[i]->grad;
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
            v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + st.eps);
        }
    }
}

// --------------------------------------------------------------------------
// Data and sampling

/// In-memory training split with identities and clothing labels remapped to
/// dense ranges.
struct TrainData {
    std::vector<Tensor> pixels;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> clothes;
    std::vector<synth::Modality> modality;
    std::size_t num_ids = 0;
    std::size_t num_clothes = 0;

    static TrainData from_manifest(const synth::Manifest& m) {
        TrainData d;
        std::map<std::size_t, std::size_t> id_map, c_map;
        for (const auto& r : m.rows) {
            if (r.split != synth::Split::train) continue;
            id_map.emplace(r.identity, 0);
            c_map.emplace(r.clothing, 0);
        }
        for (auto& [k, v] : id_map) v = d.num_ids++;
        for (auto& [k, v] : c_map) v = d.num_clothes++;
        for (const auto& r : m.rows) {
            if (r.split != synth::Split::train) continue;
            d.pixels.push_back(m.load_pixels(r));
            d.ids.push_back(id_map[r.identity]);
            d.clothes.push_back(c_map[r.clothing]);
            d.modality.push_back(r.modality);
        }
        if (d.pixels.empty()) throw TrainError("training split is empty");
        return d;
    }
};

struct Batch {
    std::vector<std::size_t> identities;  // P distinct identities
    std::vector<std::size_t> visible;     // P·T sample indices, grouped by identity
    std::vector<std::size_t> infrared;    // same identity order as `visible`
};

/// P identities per batch, T visible and T infrared images each. Per-identity
/// pools are reshuffled every epoch and drawn without replacement; a pool
/// that runs dry mid-epoch starts a fresh shuffled pass.
class BalancedSampler {
public:
    BalancedSampler(const std::vector<std::size_t>& ids, const std::vector<synth::Modality>& modality,
                    std::size_t num_ids, std::size_t p, std::size_t t, std::uint64_t seed)
        : p_(p), t_(t), rng_(seed) {
        pools_.assign(2, std::vector<Pool>(num_ids));
        for (std::size_t i = 0; i < ids.size(); ++i) {
            pools_[modality[i] == synth::Modality::V ? 0 : 1].at(ids[i]).items.push_back(i);
        }
        if (p_ > num_ids) {
            throw SamplingError("ids_per_batch " + std::to_string(p_) + " exceeds the " + std::to_string(num_ids) +
                                " training identities");
        }
        for (std::size_t m = 0; m < 2; ++m) {
            for (std::size_t k = 0; k < num_ids; ++k) {
                if (pools_[m][k].items.size() < t_) {
                    throw SamplingError("identity " + std::to_string(k) + " has " +
                                        std::to_string(pools_[m][k].items.size()) + " " +
                                        (m == 0 ? "visible" : "infrared") + " images, fewer than " + std::to_string(t_));
                }
            }
        }
        start_epoch();
    }

    void start_epoch() {
        for (auto& mod : pools_) {
            for (auto& pool : mod) {
                rng_.shuffle(pool.items);
                pool.cursor = 0;
            }
        }
    }

    Batch next() {
        Batch b;
        std::deque<std::size_t> skipped;
        while (b.identities.size() < p_) {
            if (order_.empty()) {
                std::vector<std::size_t> perm(pools_[0].size());
                for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = k;
                rng_.shuffle(perm);
                order_.insert(order_.end(), perm.begin(), perm.end());
            }
            const std::size_t k = order_.front();
            order_.pop_front();
            if (std::find(b.identities.begin(), b.identities.end(), k) != b.identities.end()) {
                skipped.push_back(k);
                continue;
            }
            b.identities.push_back(k);
        }
        order_.insert(order_.begin(), skipped.begin(), skipped.end());
        for (auto k : b.identities) {
            draw(pools_[0][k], b.visible);
            draw(pools_[1][k], b.infrared);
        }
        return b;
    }

private:
    struct Pool {
        std::vector<std::size_t> items;
        std::size_t cursor = 0;
    };

    void draw(Pool& pool, std::vector<std::size_t>& out) {
        if (pool.cursor + t_ > pool.items.size()) {
            rng_.shuffle(pool.items);
            pool.cursor = 0;
        }
        for (std::size_t j = 0; j < t_; ++j) out.push_back(pool.items[pool.cursor++]);
    }

    std::size_t p_, t_;
    Rng rng_;
    std::vector<std::vector<Pool>> pools_;  // [modality][identity]
    std::deque<std::size_t> order_;
};

inline Tensor hflip(const Tensor& img) {
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out = Tensor::zeros(img.shape);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) out[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
        }
    }
    return out;
}

// --------------------------------------------------------------------------
// Training loop

struct EpochEval {
    std::size_t epoch = 0;
    eval::EvalReport v2i;
    eval::EvalReport i2v;
};

struct TrainResult {
    PiaModel model;
    bpl::PrototypeBank bank;
    std::vector<LossReport> epoch_log;      // per-epoch means
    std::vector<LossReport> iteration_log;  // every iteration
    std::vector<EpochEval> evals;
    // Mean |cos(f, f_c)| on the validation images: [0] before training,
    // [e + 1] after epoch e. Filled when requested and DBDL is on.
    std::vector<double> val_correlation;
};

struct TrainHooks {
    std::function<void(std::size_t epoch, const PiaModel&, const bpl::PrototypeBank&)> on_epoch_end;
    bool track_correlation = false;
};

inline ModelConfig model_config(const TrainConfig& cfg, const TrainData& data, EncoderConfig enc = {}) {
    enc.pooling = cfg.pooling_mode;
    ModelConfig mc;
    mc.encoder = enc;
    mc.use_dbdl = cfg.ablation.use_dbdl;
    mc.attention_kernel = cfg.attention_kernel;
    mc.num_ids = data.num_ids;
    mc.num_clothes = data.num_clothes;
    return mc;
}

/// Runs the full schedule. `val` (the held-out split) feeds per-epoch
/// retrieval reports; pass nullptr to skip evaluation.
inline TrainResult train(const TrainData& data, const eval::LabeledImages* val, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}, EncoderConfig enc = {}) {
    cfg.validate();
    TrainResult res{PiaModel::init(model_config(cfg, data, enc), cfg.seed), {}, {}, {}, {}, {}};
    PiaModel& model = res.model;
    res.bank = bpl::PrototypeBank::create(data.num_ids, model.embedding_dim(), cfg.alpha);
    auto& bank = res.bank;

    BalancedSampler sampler(data.ids, data.modality, data.num_ids, cfg.ids_per_batch, cfg.instances_per_modality,
                            mix_seed(cfg.seed, 0x5a3b1e));
    Rng flip_rng(mix_seed(cfg.seed, 0xf11b));
    AdamState adam;
    const std::vector<Tensor*> params = model.trainable();
    const std::size_t iters = std::max<std::size_t>(1, data.pixels.size() / cfg.batch_size());
    const std::size_t m = cfg.ids_per_batch * cfg.instances_per_modality;
    const bool track_corr = hooks.track_correlation && val && cfg.ablation.use_dbdl;
    if (track_corr) res.val_correlation.push_back(eval::feature_correlation(model, *val));

    std::uint64_t iteration = 0;
    bool stage2_checked = false;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const Stage stage = cfg.stage_at(epoch);
        const double lr = lr_at(epoch, cfg);
        if (epoch > 0) sampler.start_epoch();
        LossReport sum;
        sum.stage = stage;
        sum.epoch = epoch;
        std::map<std::string, double> acc;

        for (std::size_t it = 0; it < iters; ++it, ++iteration) {
            const Batch b = sampler.next();
            std::vector<Tensor> imgs;
            std::vector<std::size_t> y_id, y_c;
            for (const auto* block : {&b.visible, &b.infrared}) {
                for (auto idx : *block) {
                    imgs.push_back(flip_rng.bernoulli(cfg.flip_probability) ? hflip(data.pixels[idx]) : data.pixels[idx]);
                    y_id.push_back(data.ids[idx]);
                    y_c.push_back(data.clothes[idx]);
                }
            }
            for (auto* p : params) p->zero_grad();
            Tape tape;
            auto fw = model.forward(tape, eval::stack_images(imgs, 0, imgs.size()), Mode::train);
            LossVars lv;
            lv.ce_id = dbdl::cross_entropy(fw.f, model.heads.id_head, y_id);
            if (cfg.ablation.use_dbdl) lv.ce_clothing = dbdl::cross_entropy(*fw.f_c, model.heads.clothing_head, y_c);
            if (cfg.ablation.use_orth) lv.orth = dbdl::orthogonality_loss(fw.f, *fw.f_c);

            if (stage == Stage::II) {
                std::vector<std::size_t> rows_v(m), rows_i(m);
                for (std::size_t r = 0; r < m; ++r) {
                    rows_v[r] = r;
                    rows_i[r] = m + r;
                }
                const std::vector<std::size_t> ids_v(y_id.begin(), y_id.begin() + static_cast<std::ptrdiff_t>(m));
                const std::vector<std::size_t> ids_i(y_id.begin() + static_cast<std::ptrdiff_t>(m), y_id.end());
                const std::size_t d = model.embedding_dim();
                const auto& fv = fw.f.value().data;
                bpl::ModalityBatch mb{Tensor({m, d}, std::vector<double>(fv.begin(), fv.begin() + static_cast<std::ptrdiff_t>(m * d))),
                                      Tensor({m, d}, std::vector<double>(fv.begin() + static_cast<std::ptrdiff_t>(m * d), fv.end())),
                                      ids_v, ids_i};
                bpl::init_prototypes(bank, mb);
                bpl::momentum_update(bank, mb);
                Var f_v = ops::gather_rows(fw.f, rows_v);
                Var f_i = ops::gather_rows(fw.f, rows_i);
                const auto scope = bpl::PrototypeScope::initialized_only;
                if (cfg.ablation.use_intra) {
                    auto t = bpl::intra_terms(f_v, ids_v, f_i, ids_i, bank, cfg.tau, scope);
                    lv.intra_v = t.v;
                    lv.intra_i = t.i;
                }
                if (cfg.ablation.use_inter) {
                    auto t = bpl::inter_terms(f_v, ids_v, f_i, ids_i, bank, cfg.tau, scope);
                    lv.inter_v = t.v;
                    lv.inter_i = t.i;
                }
            }

            Var total = combine_vars(stage, lv, cfg);
            LossReport rep = stage_loss(stage, lv.values(), cfg, epoch, iteration);
            rep.total = total.item();
            if (!std::isfinite(rep.total)) {
                throw TrainError("non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
                                 std::to_string(iteration));
            }
            tape.backward(total);
            optimizer_step(params, adam, lr);
            res.iteration_log.push_back(rep);
        }

        // Epoch means; totals are recombined from the mean terms.
        const auto& logs = res.iteration_log;
        const auto first = logs.end() - static_cast<std::ptrdiff_t>(iters);
        const auto mean_of = [&](auto get) -> std::optional<double> {
            double s = 0.0;
            for (auto itr = first; itr != logs.end(); ++itr) {
                const std::optional<double> v = get(*itr);
                if (!v) return std::nullopt;
                s += *v;
            }
            return s / static_cast<double>(iters);
        };
        sum.iteration = iteration;
        sum.terms.ce_id = *mean_of([](const LossReport& r) { return std::optional<double>(r.terms.ce_id); });
        sum.terms.ce_clothing = mean_of([](const LossReport& r) { return r.terms.ce_clothing; });
        sum.terms.orth = mean_of([](const LossReport& r) { return r.terms.orth; });
        sum.terms.intra_v = mean_of([](const LossReport& r) { return r.terms.intra_v; });
        sum.terms.intra_i = mean_of([](const LossReport& r) { return r.terms.intra_i; });
        sum.terms.inter_v = mean_of([](const LossReport& r) { return r.terms.inter_v; });
        sum.terms.inter_i = mean_of([](const LossReport& r) { return r.terms.inter_i; });
        sum.total = combine(stage, sum.terms, cfg);
        res.epoch_log.push_back(sum);

        if (stage == Stage::II && !stage2_checked) {
            if (!bank.fully_initialized()) {
                throw TrainError("prototype bank not fully initialized after the first Stage-II epoch");
            }
            stage2_checked = true;
        }
        if (track_corr) res.val_correlation.push_back(eval::feature_correlation(model, *val));
        const bool last = epoch + 1 == cfg.epochs;
        if (val && (last || (cfg.eval_every && (epoch + 1) % cfg.eval_every == 0))) {
            auto [v2i, i2v] = eval::evaluate_model(model, *val);
            res.evals.push_back({epoch, std::move(v2i), std::move(i2v)});
        }
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model, bank);
    }
    return res;
}

}  // namespace pia::train
