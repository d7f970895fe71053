#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "pia/trainer.hpp"

using namespace pia;
using namespace pia::train;

namespace {

// Small in-memory training split: 16x8 renders, `k` identities, `n` images per modality.
TrainData tiny_data(std::size_t k, std::size_t n, std::uint64_t seed = 3) {
    TrainData d;
    const synth::RenderGeometry geo{16, 8, 0.02};
    for (std::size_t id = 0; id < k; ++id) {
        const auto idf = synth::identity_factor(seed, id);
        for (auto mod : {synth::Modality::V, synth::Modality::I}) {
            const std::size_t outfit = mod == synth::Modality::V ? 0 : 1;
            const auto cf = synth::clothing_factor(seed, id, outfit);
            for (std::size_t j = 0; j < n; ++j) {
                Rng rng(mix_seed(seed, id * 1000 + outfit * 100 + j));
                d.pixels.push_back(synth::render_sample(idf, cf, mod, rng, geo));
                d.ids.push_back(id);
                d.clothes.push_back(id * 2 + outfit);
                d.modality.push_back(mod);
            }
        }
    }
    d.num_ids = k;
    d.num_clothes = 2 * k;
    return d;
}

EncoderConfig tiny_encoder() {
    EncoderConfig e;
    e.height = 16;
    e.width = 8;
    e.widths = {4, 8};
    e.strides = {2, 1};
    return e;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.ids_per_batch = 2;
    c.instances_per_modality = 2;
    c.epochs = 4;
    c.stage2_start_epoch = 2;
    c.lr_decay_period_epochs = 2;
    c.attention_kernel = 3;
    c.seed = 9;
    return c;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

TEST(Sampler, DefaultBatchShape) {
    const auto d = tiny_data(16, 6);
    BalancedSampler s(d.ids, d.modality, d.num_ids, 8, 4, 1);
    for (int i = 0; i < 10; ++i) {
        const auto b = s.next();
        ASSERT_EQ(b.visible.size() + b.infrared.size(), 64u);
        EXPECT_EQ(std::set<std::size_t>(b.identities.begin(), b.identities.end()).size(), 8u);
        std::map<std::size_t, std::pair<int, int>> counts;
        for (auto i : b.visible) {
            EXPECT_EQ(d.modality[i], synth::Modality::V);
            ++counts[d.ids[i]].first;
        }
        for (auto i : b.infrared) {
            EXPECT_EQ(d.modality[i], synth::Modality::I);
            ++counts[d.ids[i]].second;
        }
        ASSERT_EQ(counts.size(), 8u);
        for (const auto& [id, c] : counts) EXPECT_EQ(c, std::make_pair(4, 4));
        // infrared block follows the same identity order as the visible block
        for (std::size_t r = 0; r < 32; ++r) EXPECT_EQ(d.ids[b.visible[r]], d.ids[b.infrared[r]]);
    }
}

TEST(Sampler, MinimalBatch) {
    const auto d = tiny_data(3, 2);
    BalancedSampler s(d.ids, d.modality, d.num_ids, 1, 1, 2);
    const auto b = s.next();
    ASSERT_EQ(b.visible.size(), 1u);
    ASSERT_EQ(b.infrared.size(), 1u);
    EXPECT_EQ(d.ids[b.visible[0]], d.ids[b.infrared[0]]);
}

TEST(Sampler, FixedSeedGivesIdenticalSequences) {
    const auto d = tiny_data(6, 4);
    BalancedSampler a(d.ids, d.modality, d.num_ids, 3, 2, 7), b(d.ids, d.modality, d.num_ids, 3, 2, 7);
    for (int i = 0; i < 20; ++i) {
        const auto x = a.next(), y = b.next();
        EXPECT_EQ(x.visible, y.visible);
        EXPECT_EQ(x.infrared, y.infrared);
        if (i % 5 == 4) {
            a.start_epoch();
            b.start_epoch();
        }
    }
}

TEST(Sampler, NoDuplicateWithinPoolPass) {
    // P = K so every identity is drawn each batch; 12 images with T = 4 is exactly three draws per pass
    const auto d = tiny_data(4, 12);
    BalancedSampler s(d.ids, d.modality, d.num_ids, 4, 4, 3);
    for (int pass = 0; pass < 3; ++pass) {
        std::map<std::size_t, int> seen;
        for (int i = 0; i < 3; ++i) {
            const auto b = s.next();
            for (auto idx : b.visible) ++seen[idx];
            for (auto idx : b.infrared) ++seen[idx];
        }
        EXPECT_EQ(seen.size(), d.pixels.size());
        for (const auto& [idx, c] : seen) EXPECT_EQ(c, 1) << idx;
        s.start_epoch();
    }
}

TEST(Sampler, InsufficientSamplesNamesIdentityAndModality) {
    auto d = tiny_data(3, 4);
    // drop two infrared images of identity 1
    std::vector<std::size_t> ids;
    std::vector<synth::Modality> mods;
    int dropped = 0;
    for (std::size_t i = 0; i < d.ids.size(); ++i) {
        if (d.ids[i] == 1 && d.modality[i] == synth::Modality::I && dropped < 2) {
            ++dropped;
            continue;
        }
        ids.push_back(d.ids[i]);
        mods.push_back(d.modality[i]);
    }
    try {
        BalancedSampler s(ids, mods, 3, 2, 3, 0);
        FAIL() << "expected SamplingError";
    } catch (const SamplingError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("identity 1"), std::string::npos) << msg;
        EXPECT_NE(msg.find("infrared"), std::string::npos) << msg;
    }
    EXPECT_THROW(BalancedSampler(d.ids, d.modality, 3, 4, 1, 0), SamplingError);
}

TEST(StageLoss, WeightedSums) {
    TrainConfig cfg;
    LossTerms t;
    t.ce_id = 1.0;
    t.orth = 0.4;
    EXPECT_NEAR(stage_loss(Stage::I, t, cfg).total, 1.2, 1e-12);
    t.intra_v = 0.25;
    t.intra_i = 0.35;
    t.inter_v = 0.3;
    t.inter_i = 0.5;
    EXPECT_NEAR(stage_loss(Stage::II, t, cfg).total, 3.0, 1e-12);
    EXPECT_THROW(stage_loss(Stage::I, t, cfg), TrainError);

    TrainConfig zero = cfg;
    zero.lambda1 = 0.0;
    LossTerms ce;
    ce.ce_id = 0.7;
    ce.ce_clothing = 0.6;
    ce.orth = 0.9;
    EXPECT_NEAR(stage_loss(Stage::I, ce, zero).total, 1.3, 1e-15);
}

TEST(StageLoss, VarCombinationMatchesScalarCombination) {
    Rng rng(4);
    TrainConfig cfg;
    for (int trial = 0; trial < 50; ++trial) {
        Tape tape;
        LossVars lv;
        lv.ce_id = tape.constant(rng.uniform(0, 3));
        lv.ce_clothing = tape.constant(rng.uniform(0, 3));
        lv.orth = tape.constant(rng.uniform(0, 1));
        const Stage st = trial % 2 ? Stage::II : Stage::I;
        if (st == Stage::II) {
            lv.intra_v = tape.constant(rng.uniform(0, 4));
            lv.intra_i = tape.constant(rng.uniform(0, 4));
            lv.inter_v = tape.constant(rng.uniform(0, 4));
            lv.inter_i = tape.constant(rng.uniform(0, 4));
        }
        EXPECT_TRUE(same_bits(combine_vars(st, lv, cfg).item(), combine(st, lv.values(), cfg)));
    }
}

TEST(LossReport, JsonRoundTripAndAbsentTerms) {
    LossTerms t;
    t.ce_id = 1.5;
    t.ce_clothing = 2.0;
    t.orth = 0.125;
    const auto r = stage_loss(Stage::I, t, TrainConfig{}, 3, 77);
    const auto j = r.to_json();
    EXPECT_FALSE(j.contains("intra_v"));
    EXPECT_FALSE(j.contains("inter_i"));
    const auto back = LossReport::from_json(j);
    EXPECT_EQ(back.epoch, 3u);
    EXPECT_EQ(back.iteration, 77u);
    EXPECT_EQ(back.terms.orth, 0.125);
    EXPECT_FALSE(back.terms.intra_v.has_value());
    EXPECT_EQ(back.total, r.total);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor p({3}, {1.0, -2.0, 0.5}, true);
    p.grad = std::vector<double>(3, 0.0);
    AdamState st;
    for (int i = 0; i < 3; ++i) optimizer_step({&p}, st, 0.1);
    EXPECT_EQ(p.data, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, FirstStepMovesByLr) {
    for (double g : {3.0, -0.02}) {
        Tensor p = Tensor::scalar(1.0, true);
        p.grad = std::vector<double>{g};
        AdamState st;
        optimizer_step({&p}, st, 0.01);
        EXPECT_NEAR(p.item(), 1.0 - 0.01 * (g > 0 ? 1 : -1), 1e-8);
    }
}

TEST(Adam, ThreeStepsMatchOracle) {
    Rng rng(5);
    Tensor p({4}, {0.3, -0.7, 1.1, 0.0}, true);
    std::vector<std::vector<double>> grads(3, std::vector<double>(4));
    for (auto& g : grads)
        for (auto& v : g) v = rng.uniform(-1, 1);
    std::vector<double> x = p.data, m(4, 0.0), v(4, 0.0);
    AdamState st;
    const double lrs[3] = {1e-2, 5e-3, 1e-3};
    for (int s = 0; s < 3; ++s) {
        p.grad = grads[s];
        optimizer_step({&p}, st, lrs[s]);
        const double b1t = std::pow(0.9, s + 1), b2t = std::pow(0.999, s + 1);
        for (std::size_t k = 0; k < 4; ++k) {
            m[k] = 0.9 * m[k] + 0.1 * grads[s][k];
            v[k] = 0.999 * v[k] + 0.001 * grads[s][k] * grads[s][k];
            const double mh = m[k] / (1 - b1t), vh = v[k] / (1 - b2t);
            x[k] -= lrs[s] * mh / (std::sqrt(vh) + 1e-8);
        }
    }
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(p.data[k], x[k], 1e-12);
    EXPECT_EQ(st.step, 3u);
}

TEST(Adam, MissingGradientThrows) {
    Tensor a = Tensor::scalar(1.0, true), b = Tensor::scalar(2.0, true);
    a.grad = std::vector<double>{1.0};
    AdamState st;
    EXPECT_THROW(optimizer_step({&a, &b}, st, 0.1), MissingGradientError);
}

TEST(Schedule, LrAtFollowsStepDecay) {
    const auto cfg = TrainConfig::reference_schedule();
    EXPECT_EQ(cfg.epochs, 90u);
    EXPECT_EQ(cfg.stage2_start_epoch, 55u);
    EXPECT_DOUBLE_EQ(lr_at(0, cfg), 3.5e-4);
    EXPECT_DOUBLE_EQ(lr_at(29, cfg), 3.5e-4);
    EXPECT_DOUBLE_EQ(lr_at(30, cfg), 3.5e-5);
    EXPECT_DOUBLE_EQ(lr_at(89, cfg), 3.5e-6);
    EXPECT_THROW(lr_at(90, cfg), ConfigError);
    TrainConfig desk;
    EXPECT_DOUBLE_EQ(lr_at(9, desk), desk.base_lr);
    EXPECT_DOUBLE_EQ(lr_at(10, desk), desk.base_lr * 0.1);
}

TEST(Schedule, StageAssignment) {
    TrainConfig c;
    EXPECT_EQ(c.stage_at(17), Stage::I);
    EXPECT_EQ(c.stage_at(18), Stage::II);
    c.ablation = AblationFlags::preset("nonprogressive");
    EXPECT_EQ(c.stage_at(0), Stage::II);
    c.ablation = AblationFlags::preset("orth");
    EXPECT_EQ(c.stage_at(29), Stage::I);
    EXPECT_THROW(AblationFlags::preset("everything"), ConfigError);
    TrainConfig bad;
    bad.stage2_start_epoch = 31;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = TrainConfig{};
    bad.ablation.use_dbdl = false;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Hflip, IsAnInvolution) {
    Rng rng(6);
    Tensor img = Tensor::zeros({3, 4, 5});
    for (auto& v : img.data) v = rng.uniform();
    const auto f = hflip(img);
    EXPECT_EQ(f[0], img[4]);
    EXPECT_EQ(hflip(f).data, img.data);
}

TEST(Train, StageDisciplineAndLossBookkeeping) {
    const auto d = tiny_data(4, 4);
    auto cfg = tiny_config();
    std::vector<std::size_t> init_counts;
    std::vector<std::vector<double>> protos;
    TrainHooks hooks;
    hooks.on_epoch_end = [&](std::size_t, const PiaModel&, const bpl::PrototypeBank& b) {
        init_counts.push_back(b.initialized_count());
        protos.push_back(b.protos_v);
    };
    const auto res = train::train(d, nullptr, cfg, hooks, tiny_encoder());
    ASSERT_EQ(res.epoch_log.size(), 4u);
    // Stage I never touches the bank
    EXPECT_EQ(init_counts[0], 0u);
    EXPECT_EQ(init_counts[1], 0u);
    for (double v : protos[1]) EXPECT_EQ(v, 0.0);
    // first Stage-II epoch initializes every prototype of both modalities
    EXPECT_EQ(init_counts[2], 8u);
    EXPECT_TRUE(res.bank.fully_initialized());
    EXPECT_EQ(res.bank.iteration, 2u * (d.pixels.size() / cfg.batch_size()));

    for (const auto& r : res.iteration_log) {
        EXPECT_EQ(r.stage, cfg.stage_at(r.epoch));
        EXPECT_EQ(r.terms.has_bpl(), r.stage == Stage::II);
        EXPECT_NEAR(combine(r.stage, r.terms, cfg), r.total, 1e-12);
        EXPECT_TRUE(std::isfinite(r.total));
    }
    for (const auto& r : res.epoch_log) {
        EXPECT_EQ(r.to_json().contains("intra_v"), r.stage == Stage::II);
        EXPECT_NEAR(combine(r.stage, r.terms, cfg), r.total, 1e-12);
    }
}

TEST(Train, FixedSeedIsBitDeterministic) {
    const auto d = tiny_data(4, 4);
    const auto cfg = tiny_config();
    auto a = train::train(d, nullptr, cfg, {}, tiny_encoder());
    auto b = train::train(d, nullptr, cfg, {}, tiny_encoder());
    ASSERT_EQ(a.iteration_log.size(), b.iteration_log.size());
    for (std::size_t i = 0; i < a.iteration_log.size(); ++i) {
        EXPECT_EQ(a.iteration_log[i].to_json().dump(), b.iteration_log[i].to_json().dump());
    }
    auto ta = a.model.tensors(), tb = b.model.tensors();
    for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].tensor->data, tb[i].tensor->data) << ta[i].name;
    EXPECT_EQ(a.bank.protos_i, b.bank.protos_i);

    auto other = cfg;
    other.seed = 10;
    auto c = train::train(d, nullptr, other, {}, tiny_encoder());
    EXPECT_NE(c.iteration_log.back().total, a.iteration_log.back().total);
}

TEST(Train, DegenerateSchedules) {
    const auto d = tiny_data(4, 4);
    auto never = tiny_config();
    never.stage2_start_epoch = never.epochs;
    const auto r1 = train::train(d, nullptr, never, {}, tiny_encoder());
    for (const auto& r : r1.iteration_log) EXPECT_EQ(r.stage, Stage::I);
    EXPECT_EQ(r1.bank.initialized_count(), 0u);

    auto from_start = tiny_config();
    from_start.stage2_start_epoch = 0;
    const auto r2 = train::train(d, nullptr, from_start, {}, tiny_encoder());
    for (const auto& r : r2.iteration_log) EXPECT_EQ(r.stage, Stage::II);

    auto base = tiny_config();
    base.ablation = AblationFlags::preset("base");
    const auto r3 = train::train(d, nullptr, base, {}, tiny_encoder());
    for (const auto& r : r3.iteration_log) {
        EXPECT_FALSE(r.terms.ce_clothing.has_value());
        EXPECT_FALSE(r.terms.orth.has_value());
        EXPECT_EQ(r.stage, Stage::I);
    }
}

TEST(Train, ValidationReportsAndCorrelationTrace) {
    const auto d = tiny_data(4, 4);
    eval::LabeledImages val;
    const auto vd = tiny_data(6, 3, 77);
    for (std::size_t i = 0; i < vd.pixels.size(); ++i) {
        if (vd.ids[i] < 4) continue;
        val.pixels.push_back(vd.pixels[i]);
        val.ids.push_back(vd.ids[i]);
        val.modality.push_back(vd.modality[i]);
    }
    auto cfg = tiny_config();
    cfg.eval_every = 2;
    TrainHooks hooks;
    hooks.track_correlation = true;
    const auto res = train::train(d, &val, cfg, hooks, tiny_encoder());
    ASSERT_EQ(res.evals.size(), 2u);
    EXPECT_EQ(res.evals[0].epoch, 1u);
    EXPECT_EQ(res.evals[1].epoch, 3u);
    EXPECT_EQ(res.evals[1].v2i.num_query, 6u);
    EXPECT_EQ(res.evals[1].i2v.num_gallery, 6u);
    ASSERT_EQ(res.val_correlation.size(), cfg.epochs + 1);
    for (double c : res.val_correlation) {
        EXPECT_GE(c, 0.0);
        EXPECT_LE(c, 1.0);
    }
}
