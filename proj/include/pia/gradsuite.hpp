#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pia/bpl.hpp"
#include "pia/dbdl.hpp"
#include "pia/gradcheck.hpp"
#include "pia/model.hpp"
#include "pia/ops.hpp"
#include "pia/rng.hpp"
#include "pia/trainer.hpp"

// Finite-difference catalog over every primitive and every training loss.
// Each entry draws a fresh random configuration per seed.
namespace pia::gradsuite {

struct Case {
    std::vector<std::shared_ptr<Tensor>> params;
    LossBuilder build;

    std::vector<Tensor*> ptrs() const {
        std::vector<Tensor*> out;
        for (const auto& p : params) out.push_back(p.get());
        return out;
    }
};

using CaseFactory = std::function<Case(Rng&)>;

struct Entry {
    std::string name;
    CaseFactory make;
};

inline std::shared_ptr<Tensor> rnd(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = std::make_shared<Tensor>(Tensor::zeros(std::move(s)));
    for (auto& v : t->data) v = rng.uniform(lo, hi);
    return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

inline std::vector<std::size_t> labels(Rng& rng, std::size_t n, std::size_t k) {
    std::vector<std::size_t> out(n);
    for (auto& y : out) y = static_cast<std::size_t>(rng.below(k));
    return out;
}

/// sum(y ⊙ r) for a fixed random r, so every output entry gets a distinct weight.
inline Var project(Tape& t, Var y, const Tensor& r) { return ops::sum(ops::mul(y, t.constant(r))); }

namespace detail {

// One-input elementwise or shape-preserving map, projected to a scalar.
inline Entry unary(std::string name, std::function<Var(Var)> op, double lo = -2.0, double hi = 2.0) {
    return {std::move(name), [op, lo, hi](Rng& rng) {
                const Shape s{pick(rng, 1, 3), pick(rng, 2, 4)};
                auto x = rnd(s, rng, lo, hi);
                Tape probe;
                auto r = rnd(op(probe.constant(*x)).shape(), rng);
                return Case{{x}, [=](Tape& t) { return project(t, op(t.param(*x)), *r); }};
            }};
}

inline Entry binary(std::string name, std::function<Var(Var, Var)> op) {
    return {std::move(name), [op](Rng& rng) {
                const Shape s{pick(rng, 1, 3), pick(rng, 2, 4)};
                auto a = rnd(s, rng);
                auto b = rnd(s, rng);
                Tape probe;
                auto r = rnd(op(probe.constant(*a), probe.constant(*b)).shape(), rng);
                return Case{{a, b}, [=](Tape& t) { return project(t, op(t.param(*a), t.param(*b)), *r); }};
            }};
}

inline Entry map_pool(std::string name, std::function<Var(Var)> op) {
    return {std::move(name), [op](Rng& rng) {
                auto x = rnd({pick(rng, 1, 2), pick(rng, 2, 4), pick(rng, 2, 4), pick(rng, 2, 3)}, rng);
                Tape probe;
                const Shape out = op(probe.constant(*x)).shape();
                auto r = rnd(out, rng);
                return Case{{x}, [=](Tape& t) { return project(t, op(t.param(*x)), *r); }};
            }};
}

inline bpl::PrototypeBank random_bank(Rng& rng, std::size_t k, std::size_t d) {
    auto bank = bpl::PrototypeBank::create(k, d, 0.9);
    for (auto& v : bank.protos_v) v = rng.uniform(-1.0, 1.0);
    for (auto& v : bank.protos_i) v = rng.uniform(-1.0, 1.0);
    bank.initialized_v.assign(k, true);
    bank.initialized_i.assign(k, true);
    return bank;
}

struct ProtoSetup {
    std::shared_ptr<Tensor> fv, fi;
    std::vector<std::size_t> yv, yi;
    std::shared_ptr<bpl::PrototypeBank> bank;
    double tau;
};

inline ProtoSetup proto_setup(Rng& rng) {
    const std::size_t k = pick(rng, 2, 5), d = pick(rng, 2, 4), m = pick(rng, 1, 6);
    const double taus[] = {1.0 / 16.0, 0.1, 0.5, 1.0};
    return {rnd({m, d}, rng), rnd({m, d}, rng), labels(rng, m, k), labels(rng, m, k),
            std::make_shared<bpl::PrototypeBank>(random_bank(rng, k, d)), taus[rng.below(4)]};
}

inline Entry proto_entry(std::string name, bool inter, bool visible_term) {
    return {std::move(name), [=](Rng& rng) {
                const auto s = proto_setup(rng);
                return Case{{s.fv, s.fi}, [=](Tape& t) {
                                const auto terms = inter ? bpl::inter_terms(t.param(*s.fv), s.yv, t.param(*s.fi), s.yi,
                                                                            *s.bank, s.tau)
                                                         : bpl::intra_terms(t.param(*s.fv), s.yv, t.param(*s.fi), s.yi,
                                                                            *s.bank, s.tau);
                                return visible_term ? terms.v : terms.i;
                            }};
            }};
}

struct HeadPair {
    std::shared_ptr<LinearHead> id, clothing;
};

inline HeadPair heads(Rng& rng, std::size_t d, std::size_t k_id, std::size_t k_c) {
    auto mk = [&](std::size_t k) {
        auto h = std::make_shared<LinearHead>();
        h->weight = *rnd({k, d}, rng);
        h->bias = *rnd({k}, rng, -0.2, 0.2);
        return h;
    };
    return {mk(k_id), mk(k_c)};
}

// f, f_c and both heads as parameters, with the weighted stage total on top.
inline Entry stage_entry(std::string name, train::Stage stage) {
    return {std::move(name), [=](Rng& rng) {
                const std::size_t d = pick(rng, 2, 4), k = pick(rng, 2, 4), m = pick(rng, 2, 4);
                auto f = rnd({2 * m, d}, rng);
                auto fc = rnd({2 * m, d}, rng);
                auto hp = heads(rng, d, k, 2 * k);
                const auto y = labels(rng, 2 * m, k);
                const auto yc = labels(rng, 2 * m, 2 * k);
                auto bank = std::make_shared<bpl::PrototypeBank>(random_bank(rng, k, d));
                train::TrainConfig cfg;
                std::vector<std::size_t> rows_v(m), rows_i(m);
                for (std::size_t r = 0; r < m; ++r) {
                    rows_v[r] = r;
                    rows_i[r] = m + r;
                }
                const std::vector<std::size_t> yv(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(m));
                const std::vector<std::size_t> yi(y.begin() + static_cast<std::ptrdiff_t>(m), y.end());
                return Case{{f, fc, std::shared_ptr<Tensor>(hp.id, &hp.id->weight),
                             std::shared_ptr<Tensor>(hp.clothing, &hp.clothing->weight)},
                            [=](Tape& t) {
                                Var fv = t.param(*f);
                                Var fcv = t.param(*fc);
                                train::LossVars lv;
                                lv.ce_id = dbdl::cross_entropy(fv, *hp.id, y);
                                lv.ce_clothing = dbdl::cross_entropy(fcv, *hp.clothing, yc);
                                lv.orth = dbdl::orthogonality_loss(fv, fcv);
                                if (stage == train::Stage::II) {
                                    Var a = ops::gather_rows(fv, rows_v), b = ops::gather_rows(fv, rows_i);
                                    const auto intra = bpl::intra_terms(a, yv, b, yi, *bank, cfg.tau);
                                    const auto inter = bpl::inter_terms(a, yv, b, yi, *bank, cfg.tau);
                                    lv.intra_v = intra.v;
                                    lv.intra_i = intra.i;
                                    lv.inter_v = inter.v;
                                    lv.inter_i = inter.i;
                                }
                                return train::combine_vars(stage, lv, cfg);
                            }};
            }};
}

}  // namespace detail

inline std::vector<Entry> catalog() {
    using namespace detail;
    std::vector<Entry> c;
    c.push_back(unary("relu", ops::relu));
    c.push_back(unary("sigmoid", ops::sigmoid, -4.0, 4.0));
    c.push_back(unary("abs", ops::abs));
    c.push_back(binary("add", ops::add));
    c.push_back(binary("sub", ops::sub));
    c.push_back(binary("mul", ops::mul));
    c.push_back({"mul_scalar", [](Rng& rng) {
                     auto s = rnd({}, rng);
                     auto x = rnd({pick(rng, 1, 3), pick(rng, 2, 4)}, rng);
                     auto r = rnd(x->shape, rng);
                     return Case{{s, x}, [=](Tape& t) { return project(t, ops::mul(t.param(*s), t.param(*x)), *r); }};
                 }});
    c.push_back(unary("scale", [](Var x) { return ops::scale(x, -1.7); }));
    c.push_back(unary("add_scalar", [](Var x) { return ops::add_scalar(x, 0.3); }));
    c.push_back({"conv2d", [](Rng& rng) {
                     const std::size_t ci = pick(rng, 1, 3), co = pick(rng, 1, 3), k = 2 * pick(rng, 0, 1) + 1;
                     const std::size_t stride = pick(rng, 1, 2), pad = pick(rng, 0, k / 2);
                     auto x = rnd({pick(rng, 1, 2), ci, pick(rng, k, 6), pick(rng, k, 5)}, rng);
                     auto w = rnd({co, ci, k, k}, rng);
                     auto b = rnd({co}, rng);
                     Tape probe;
                     const Shape out =
                         ops::conv2d(probe.constant(*x), probe.constant(*w), probe.constant(*b), stride, pad).shape();
                     auto r = rnd(out, rng);
                     return Case{{x, w, b}, [=](Tape& t) {
                                     return project(t, ops::conv2d(t.param(*x), t.param(*w), t.param(*b), stride, pad),
                                                    *r);
                                 }};
                 }});
    c.push_back(map_pool("channel_max_pool", ops::channel_max_pool));
    c.push_back(map_pool("channel_avg_pool", ops::channel_avg_pool));
    c.push_back(map_pool("global_avg_pool", ops::global_avg_pool));
    c.push_back(map_pool("global_max_pool", ops::global_max_pool));
    c.push_back({"concat", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 3), axis = pick(rng, 0, 1);
                     auto a = rnd({n, pick(rng, 1, 3)}, rng);
                     auto b = rnd(axis == 1 ? Shape{n, pick(rng, 1, 3)} : Shape{pick(rng, 1, 3), a->dim(1)}, rng);
                     Tape probe;
                     auto r = rnd(ops::concat({probe.constant(*a), probe.constant(*b)}, axis).shape(), rng);
                     return Case{{a, b}, [=](Tape& t) {
                                     return project(t, ops::concat({t.param(*a), t.param(*b)}, axis), *r);
                                 }};
                 }});
    c.push_back({"spatial_mask", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 2), h = pick(rng, 2, 4), w = pick(rng, 2, 3);
                     auto m = rnd({n, 1, h, w}, rng, 0.0, 1.0);
                     auto z = rnd({n, pick(rng, 1, 3), h, w}, rng);
                     auto r = rnd(z->shape, rng);
                     return Case{{m, z}, [=](Tape& t) {
                                     return project(t, ops::spatial_mask(t.param(*m), t.param(*z)), *r);
                                 }};
                 }});
    c.push_back({"gather_rows", [](Rng& rng) {
                     auto x = rnd({pick(rng, 2, 5), pick(rng, 1, 3)}, rng);
                     const auto rows = labels(rng, pick(rng, 1, 6), x->dim(0));
                     auto r = rnd({rows.size(), x->dim(1)}, rng);
                     return Case{{x}, [=](Tape& t) { return project(t, ops::gather_rows(t.param(*x), rows), *r); }};
                 }});
    c.push_back({"linear", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 4), in = pick(rng, 1, 4), out = pick(rng, 1, 4);
                     auto x = rnd({n, in}, rng);
                     auto w = rnd({out, in}, rng);
                     auto b = rnd({out}, rng);
                     auto r = rnd({n, out}, rng);
                     return Case{{x, w, b}, [=](Tape& t) {
                                     return project(t, ops::linear(t.param(*x), t.param(*w), t.param(*b)), *r);
                                 }};
                 }});
    c.push_back({"batch_norm_train", [](Rng& rng) {
                     const std::size_t n = pick(rng, 2, 5), f = pick(rng, 1, 4);
                     auto x = rnd({n, f}, rng, -2.0, 2.0);
                     auto g = rnd({f}, rng, 0.5, 1.5);
                     auto b = rnd({f}, rng);
                     auto r = rnd({n, f}, rng);
                     return Case{{x, g, b}, [=](Tape& t) {
                                     return project(t, ops::batch_norm(t.param(*x), t.param(*g), t.param(*b), nullptr), *r);
                                 }};
                 }});
    c.push_back({"batch_norm_eval", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 5), f = pick(rng, 1, 4);
                     auto x = rnd({n, f}, rng, -2.0, 2.0);
                     auto g = rnd({f}, rng, 0.5, 1.5);
                     auto b = rnd({f}, rng);
                     auto r = rnd({n, f}, rng);
                     auto stats = std::make_shared<ops::BatchNormStats>(ops::BatchNormStats::init(f));
                     for (auto& v : stats->running_mean.data) v = rng.uniform(-0.5, 0.5);
                     for (auto& v : stats->running_var.data) v = rng.uniform(0.5, 2.0);
                     return Case{{x, g, b}, [=](Tape& t) {
                                     ops::BatchNormStats copy = *stats;
                                     return project(t, ops::batch_norm(t.param(*x), t.param(*g), t.param(*b), &copy,
                                                                       {false, 0.1, 1e-5}),
                                                    *r);
                                 }};
                 }});
    c.push_back(unary("log_softmax", ops::log_softmax, -3.0, 3.0));
    c.push_back(unary("l2_normalize", ops::l2_normalize));
    c.push_back(binary("dot", ops::dot));
    c.push_back(unary("mean", [](Var x) { return ops::mean(x); }));
    c.push_back(unary("sum", [](Var x) { return ops::sum(x); }));
    c.push_back(unary("mean_axis0", [](Var x) { return ops::mean(x, 0); }));
    c.push_back(unary("sum_axis1", [](Var x) { return ops::sum(x, 1); }));

    c.push_back({"clothing_mask", [](Rng& rng) {
                     const std::size_t k = 2 * pick(rng, 0, 1) + 1;
                     auto z = rnd({pick(rng, 1, 2), pick(rng, 2, 4), pick(rng, 2, 4), pick(rng, 2, 3)}, rng, 0.0, 2.0);
                     auto w1 = rnd({1, 2, k, k}, rng);
                     auto b1 = rnd({1}, rng);
                     auto r = rnd({z->dim(0), 1, z->dim(2), z->dim(3)}, rng);
                     return Case{{z, w1, b1}, [=](Tape& t) {
                                     return project(t, dbdl::clothing_mask(t.param(*z), t.param(*w1), t.param(*b1)), *r);
                                 }};
                 }});
    c.push_back({"identity_mask", [](Rng& rng) {
                     auto mc = rnd({pick(rng, 1, 2), 1, pick(rng, 2, 4), pick(rng, 2, 3)}, rng, 0.0, 1.0);
                     auto lr = rnd({}, rng, -2.0, 2.0);
                     auto r = rnd(mc->shape, rng);
                     return Case{{mc, lr}, [=](Tape& t) {
                                     return project(t, dbdl::identity_mask(t.param(*mc), t.param(*lr)).m_id, *r);
                                 }};
                 }});
    c.push_back({"cross_entropy", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 5), d = pick(rng, 1, 4), k = pick(rng, 2, 5);
                     auto f = rnd({n, d}, rng);
                     auto hp = heads(rng, d, k, k);
                     const auto y = labels(rng, n, k);
                     return Case{{f, std::shared_ptr<Tensor>(hp.id, &hp.id->weight),
                                  std::shared_ptr<Tensor>(hp.id, &hp.id->bias)},
                                 [=](Tape& t) { return dbdl::cross_entropy(t.param(*f), *hp.id, y); }};
                 }});
    c.push_back({"orthogonality_loss", [](Rng& rng) {
                     const std::size_t n = pick(rng, 1, 5), d = pick(rng, 2, 5);
                     auto f = rnd({n, d}, rng);
                     auto fc = rnd({n, d}, rng);
                     return Case{{f, fc}, [=](Tape& t) { return dbdl::orthogonality_loss(t.param(*f), t.param(*fc)); }};
                 }});
    c.push_back(proto_entry("intra_v", false, true));
    c.push_back(proto_entry("intra_i", false, false));
    c.push_back(proto_entry("inter_v", true, true));
    c.push_back(proto_entry("inter_i", true, false));
    c.push_back(stage_entry("stage_i_total", train::Stage::I));
    c.push_back(stage_entry("stage_ii_total", train::Stage::II));
    c.push_back({"model_stage_i", [](Rng& rng) {
                     // A miniature encoder so every trainable tensor is checked end to end.
                     ModelConfig mc;
                     mc.encoder.height = 8;
                     mc.encoder.width = 4;
                     mc.encoder.widths = {3, 4};
                     mc.encoder.strides = {2, 1};
                     mc.attention_kernel = 3;
                     mc.num_ids = 2;
                     mc.num_clothes = 4;
                     auto model = std::make_shared<PiaModel>(PiaModel::init(mc, rng.next()));
                     for (auto& nt : model->tensors()) {
                         if (nt.name.find("gamma") != std::string::npos) {
                             for (auto& v : nt.tensor->data) v = rng.uniform(0.5, 1.5);
                         } else if (nt.trainable) {
                             for (auto& v : nt.tensor->data) v += rng.uniform(-0.1, 0.1);
                         }
                     }
                     auto images = rnd({4, 3, 8, 4}, rng, 0.0, 1.0);
                     const std::vector<std::size_t> y{0, 1, 0, 1}, yc{0, 2, 1, 3};
                     std::vector<std::shared_ptr<Tensor>> params;
                     for (auto* p : model->trainable()) params.emplace_back(model, p);
                     return Case{params, [=](Tape& t) {
                                     // Batch statistics are consumed in training mode; restore them
                                     // so repeated evaluations see identical running buffers.
                                     const auto saved = model->encoder.final_bn.stats;
                                     const auto saved_c = model->bn_clothing.stats;
                                     auto fw = model->forward(t, *images, Mode::train);
                                     model->encoder.final_bn.stats = saved;
                                     model->bn_clothing.stats = saved_c;
                                     train::LossVars lv;
                                     lv.ce_id = dbdl::cross_entropy(fw.f, model->heads.id_head, y);
                                     lv.ce_clothing = dbdl::cross_entropy(*fw.f_c, model->heads.clothing_head, yc);
                                     lv.orth = dbdl::orthogonality_loss(fw.f, *fw.f_c);
                                     return train::combine_vars(train::Stage::I, lv, train::TrainConfig{});
                                 }};
                 }});
    return c;
}

struct EntryResult {
    std::string name;
    std::size_t configs = 0;
    std::size_t resamples = 0;  // draws rejected for sitting too close to a kink
    double max_rel_error = 0.0;
    std::size_t failures = 0;

    bool passed() const { return failures == 0; }
};

/// Draws that put a relu/abs/max input within this distance of its kink are
/// redrawn: the central difference straddles the kink there.
inline constexpr double kMinKinkMargin = 1e-3;

/// Nonzero gradient entries smaller than this are redrawn too. The forward
/// carries O(1) roundoff of about 1e-16, so at step 1e-5 the central
/// difference itself is only good to ~1e-11 absolute; a 1e-4 relative check
/// is meaningless below ~1e-7. Saturated softmaxes at τ = 1/16 land there.
inline constexpr double kMinResolvableGradient = 1e-7;

namespace detail {

inline bool below_resolution(const Case& c) {
    auto params = c.ptrs();
    std::vector<bool> saved;
    for (auto* p : params) {
        saved.push_back(p->requires_grad);
        p->requires_grad = true;
        p->zero_grad();
    }
    {
        Tape tape;
        tape.backward(c.build(tape));
    }
    bool tiny = false;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->grad) {
            for (double g : *params[i]->grad) tiny = tiny || (g != 0.0 && std::abs(g) < kMinResolvableGradient);
        }
        params[i]->zero_grad();
        params[i]->requires_grad = saved[i];
    }
    return tiny;
}

}  // namespace detail

inline EntryResult run_entry(const Entry& e, std::size_t configs = 20, double tol = 1e-4, std::uint64_t seed = 0,
                             double step = 1e-5) {
    EntryResult res;
    res.name = e.name;
    Rng rng(mix_seed(seed, fnv1a64(e.name)));
    while (res.configs < configs) {
        Case c = e.make(rng);
        {
            Tape probe;
            c.build(probe);
            if ((probe.kink_margin() < kMinKinkMargin || detail::below_resolution(c)) && res.resamples < 1000 * configs) {
                ++res.resamples;
                continue;
            }
        }
        const auto report = check_gradients(c.build, c.ptrs(), step, tol);
        res.max_rel_error = std::max(res.max_rel_error, report.worst());
        res.failures += report.failures.size();
        ++res.configs;
    }
    return res;
}

}  // namespace pia::gradsuite
