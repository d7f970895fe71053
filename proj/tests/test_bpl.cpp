#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "pia/bpl.hpp"
#include "pia/gradcheck.hpp"
#include "pia/rng.hpp"

using namespace pia;
using bpl::Modality;

namespace {

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

bpl::PrototypeBank random_bank(std::size_t k, std::size_t d, Rng& rng) {
    auto b = bpl::PrototypeBank::create(k, d, 0.9);
    for (auto& v : b.protos_v) v = rng.uniform(-1, 1);
    for (auto& v : b.protos_i) v = rng.uniform(-1, 1);
    b.initialized_v.assign(k, true);
    b.initialized_i.assign(k, true);
    return b;
}

// −log softmax over all prototype rows with cosine similarity, straight from the definition.
double nce_oracle(const Tensor& f, const std::vector<std::size_t>& ids, const std::vector<double>& protos,
                  std::size_t k, double tau) {
    const std::size_t m = ids.size(), d = f.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> s(k);
        for (std::size_t j = 0; j < k; ++j) {
            double ab = 0.0, aa = 0.0, bb = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                ab += f[i * d + c] * protos[j * d + c];
                aa += f[i * d + c] * f[i * d + c];
                bb += protos[j * d + c] * protos[j * d + c];
            }
            s[j] = ab / std::sqrt(aa * bb) / tau;
        }
        double z = 0.0;
        for (double v : s) z += std::exp(v);
        total += std::log(z) - s[ids[i]];
    }
    return total / static_cast<double>(m);
}

}  // namespace

TEST(InitPrototypes, SingleFeatureAndSymmetricMean) {
    auto bank = bpl::PrototypeBank::create(3, 2, 0.9);
    bpl::ModalityBatch b{Tensor({2, 2}, {1, 0, 0, 1}), Tensor({1, 2}, {3, 4}), {1, 1}, {2}};
    bpl::init_prototypes(bank, b);
    EXPECT_EQ(bank.protos_v[2], 0.5);
    EXPECT_EQ(bank.protos_v[3], 0.5);
    EXPECT_EQ(bank.protos_i[4], 3.0);
    EXPECT_EQ(bank.protos_i[5], 4.0);
    EXPECT_EQ(bank.initialized_v, (std::vector<bool>{false, true, false}));
    EXPECT_EQ(bank.initialized_i, (std::vector<bool>{false, false, true}));
    EXPECT_EQ(bank.initialized_count(), 2u);
}

TEST(InitPrototypes, MatchesGroupByMeanOracleAndIsLazy) {
    Rng rng(1);
    const std::size_t k = 6, d = 5;
    auto bank = bpl::PrototypeBank::create(k, d, 0.9);
    std::vector<std::size_t> ids{4, 1, 4, 1, 0, 0, 4, 1};
    bpl::ModalityBatch b{random_tensor({8, d}, rng), random_tensor({8, d}, rng), ids, ids};
    bpl::init_prototypes(bank, b);
    for (std::size_t id : {0u, 1u, 4u}) {
        for (std::size_t c = 0; c < d; ++c) {
            double sv = 0.0, si = 0.0;
            int n = 0;
            for (std::size_t r = 0; r < 8; ++r) {
                if (ids[r] != id) continue;
                sv += b.feats_v[r * d + c];
                si += b.feats_i[r * d + c];
                ++n;
            }
            EXPECT_NEAR(bank.protos_v[id * d + c], sv / n, 1e-12);
            EXPECT_NEAR(bank.protos_i[id * d + c], si / n, 1e-12);
        }
    }
    // already-initialized rows are not overwritten by a later init
    const auto before = bank.protos_v;
    bpl::ModalityBatch b2{random_tensor({2, d}, rng), random_tensor({2, d}, rng), {4, 5}, {4, 5}};
    bpl::init_prototypes(bank, b2);
    for (std::size_t c = 0; c < d; ++c) EXPECT_EQ(bank.protos_v[4 * d + c], before[4 * d + c]);
    EXPECT_TRUE(bank.initialized_v[5]);
    EXPECT_FALSE(bank.fully_initialized());
}

TEST(MomentumUpdate, HandCaseAndLimits) {
    bpl::ModalityBatch b{Tensor({1, 2}, {0, 1}), Tensor({1, 2}, {0, 1}), {0}, {0}};
    for (double alpha : {0.9, 1.0, 0.0}) {
        auto bank = bpl::PrototypeBank::create(2, 2, alpha);
        bank.protos_v = {1, 0, 7, 7};
        bank.protos_i = {1, 0, 7, 7};
        bank.initialized_v.assign(2, true);
        bank.initialized_i.assign(2, true);
        bpl::momentum_update(bank, b);
        EXPECT_DOUBLE_EQ(bank.protos_v[0], alpha);
        EXPECT_DOUBLE_EQ(bank.protos_v[1], 1.0 - alpha);
        EXPECT_EQ(bank.protos_v[2], 7.0);
        EXPECT_EQ(bank.iteration, 1u);
    }
}

TEST(MomentumUpdate, ConvexCombinationAndAbsentRowsUntouched) {
    Rng rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 5, d = 4;
        auto bank = random_bank(k, d, rng);
        bank.alpha = rng.uniform();
        const auto old_v = bank.protos_v, old_i = bank.protos_i;
        std::vector<std::size_t> ids{1, 3, 1, 3};
        bpl::ModalityBatch b{random_tensor({4, d}, rng), random_tensor({4, d}, rng), ids, ids};
        bpl::momentum_update(bank, b);
        for (std::size_t id = 0; id < k; ++id) {
            for (std::size_t c = 0; c < d; ++c) {
                const std::size_t at = id * d + c;
                if (id != 1 && id != 3) {
                    EXPECT_EQ(std::memcmp(&bank.protos_v[at], &old_v[at], sizeof(double)), 0);
                    EXPECT_EQ(std::memcmp(&bank.protos_i[at], &old_i[at], sizeof(double)), 0);
                    continue;
                }
                const double mean = (b.feats_v[(id == 1 ? 0 : 1) * d + c] + b.feats_v[(id == 1 ? 2 : 3) * d + c]) / 2;
                EXPECT_GE(bank.protos_v[at], std::min(old_v[at], mean) - 1e-15);
                EXPECT_LE(bank.protos_v[at], std::max(old_v[at], mean) + 1e-15);
            }
        }
    }
}

TEST(MomentumUpdate, GeometricConvergenceToConstantMean) {
    auto bank = bpl::PrototypeBank::create(1, 3, 0.9);
    bank.protos_v = {2.0, -1.0, 0.5};
    bank.protos_i = bank.protos_v;
    bank.initialized_v = bank.initialized_i = {true};
    const std::vector<double> target{0.25, 0.75, -1.5};
    bpl::ModalityBatch b{Tensor({1, 3}, target), Tensor({1, 3}, target), {0}, {0}};
    auto dist = [&] {
        double s = 0.0;
        for (std::size_t c = 0; c < 3; ++c) s += (bank.protos_v[c] - target[c]) * (bank.protos_v[c] - target[c]);
        return std::sqrt(s);
    };
    const double d0 = dist();
    for (int delta = 1; delta <= 50; ++delta) {
        bpl::momentum_update(bank, b);
        EXPECT_NEAR(dist(), std::pow(0.9, delta) * d0, 1e-9) << delta;
    }
    EXPECT_EQ(bank.iteration, 50u);
}

TEST(MomentumUpdate, UninitializedRowThrows) {
    auto bank = bpl::PrototypeBank::create(2, 2, 0.9);
    bpl::ModalityBatch b{Tensor({1, 2}, {0, 1}), Tensor({1, 2}, {0, 1}), {0}, {0}};
    EXPECT_THROW(bpl::momentum_update(bank, b), bpl::UninitializedPrototypeError);
}

TEST(ProtoNce, TwoClassHandCase) {
    auto bank = bpl::PrototypeBank::create(2, 2, 0.9);
    bank.protos_v = {1, 0, 0, 1};
    bank.protos_i = {1, 0, 0, 1};
    bank.initialized_v = bank.initialized_i = {true, true};
    Tape t;
    const auto f = t.constant(Tensor({1, 2}, {1, 0}));
    const double want = std::log(1.0 + std::exp(-1.0));
    EXPECT_NEAR(want, 0.31326, 1e-5);
    const auto intra = bpl::intra_terms(f, {0}, f, {0}, bank, 1.0);
    EXPECT_NEAR(intra.v.item(), want, 1e-15);
    const auto inter = bpl::inter_terms(f, {0}, f, {0}, bank, 1.0);
    EXPECT_NEAR(inter.v.item(), want, 1e-15);
    EXPECT_NEAR(inter.i.item(), want, 1e-15);
}

TEST(ProtoNce, UniformSimilaritiesGiveLogK) {
    auto bank = bpl::PrototypeBank::create(5, 3, 0.9);
    bank.protos_v.assign(15, 1.0);
    bank.protos_i.assign(15, 1.0);
    bank.initialized_v.assign(5, true);
    bank.initialized_i.assign(5, true);
    Tape t;
    const auto f = t.constant(Tensor::full({2, 3}, 1.0));
    const auto terms = bpl::intra_terms(f, {0, 3}, f, {1, 4}, bank, 1.0 / 16);
    EXPECT_NEAR(terms.v.item(), std::log(5.0), 1e-12);
    EXPECT_NEAR(terms.i.item(), std::log(5.0), 1e-12);
}

TEST(ProtoNce, MatchesBruteForceOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t k = 2 + rng.below(4), d = 1 + rng.below(4), m = 1 + rng.below(5);
        const double tau = trial % 2 ? 1.0 / 16 : rng.uniform(0.2, 2.0);
        auto bank = random_bank(k, d, rng);
        const Tensor fv = random_tensor({m, d}, rng), fi = random_tensor({m, d}, rng);
        std::vector<std::size_t> iv(m), ii(m);
        for (auto& v : iv) v = rng.below(k);
        for (auto& v : ii) v = rng.below(k);
        Tape t;
        const auto intra = bpl::intra_terms(t.constant(fv), iv, t.constant(fi), ii, bank, tau);
        const auto inter = bpl::inter_terms(t.constant(fv), iv, t.constant(fi), ii, bank, tau);
        EXPECT_NEAR(intra.v.item(), nce_oracle(fv, iv, bank.protos_v, k, tau), 1e-9);
        EXPECT_NEAR(intra.i.item(), nce_oracle(fi, ii, bank.protos_i, k, tau), 1e-9);
        EXPECT_NEAR(inter.v.item(), nce_oracle(fv, iv, bank.protos_i, k, tau), 1e-9);
        EXPECT_NEAR(inter.i.item(), nce_oracle(fi, ii, bank.protos_v, k, tau), 1e-9);
        for (const Var* v : {&intra.v, &intra.i, &inter.v, &inter.i}) {
            EXPECT_GT(v->item(), 0.0);
            EXPECT_LE(v->item(), 2.0 / tau + std::log(static_cast<double>(k)));
        }
    }
}

TEST(ProtoNce, ClonedBanksMakeInterEqualIntra) {
    Rng rng(4);
    auto bank = random_bank(4, 3, rng);
    bank.protos_i = bank.protos_v;
    const Tensor fv = random_tensor({4, 3}, rng), fi = random_tensor({4, 3}, rng);
    Tape t;
    const std::vector<std::size_t> ids{0, 1, 2, 3};
    EXPECT_EQ(bpl::inter_loss(t.constant(fv), ids, t.constant(fi), ids, bank, 1.0 / 16).item(),
              bpl::intra_loss(t.constant(fv), ids, t.constant(fi), ids, bank, 1.0 / 16).item());
}

TEST(ProtoNce, ModalitySwapSymmetry) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        auto bank = random_bank(4, 3, rng);
        const Tensor fv = random_tensor({3, 3}, rng), fi = random_tensor({3, 3}, rng);
        const std::vector<std::size_t> iv{0, 2, 3}, ii{1, 1, 0};
        const auto sw = bank.swapped();
        Tape t;
        const double a = bpl::intra_loss(t.constant(fv), iv, t.constant(fi), ii, bank, 0.25).item();
        const double b = bpl::intra_loss(t.constant(fi), ii, t.constant(fv), iv, sw, 0.25).item();
        EXPECT_NEAR(a, b, 1e-14);
        const double c = bpl::inter_loss(t.constant(fv), iv, t.constant(fi), ii, bank, 0.25).item();
        const double e = bpl::inter_loss(t.constant(fi), ii, t.constant(fv), iv, sw, 0.25).item();
        EXPECT_NEAR(c, e, 1e-14);
    }
}

TEST(ProtoNce, UninitializedPrototypeHandling) {
    Rng rng(6);
    auto bank = random_bank(3, 2, rng);
    bank.initialized_i[2] = false;
    Tape t;
    const auto f = t.constant(random_tensor({2, 2}, rng));
    EXPECT_THROW(bpl::intra_loss(f, {0, 1}, f, {0, 1}, bank, 0.5), bpl::UninitializedPrototypeError);
    // the scoped form restricts the softmax to initialized rows
    const double scoped =
        bpl::proto_nce(f, {0, 1}, bank, Modality::infrared, 0.5, bpl::PrototypeScope::initialized_only).item();
    auto two = bpl::PrototypeBank::create(2, 2, 0.9);
    two.protos_i.assign(bank.protos_i.begin(), bank.protos_i.begin() + 4);
    two.initialized_i = {true, true};
    EXPECT_NEAR(scoped, bpl::proto_nce(f, {0, 1}, two, Modality::infrared, 0.5).item(), 1e-14);
    EXPECT_THROW(bpl::proto_nce(f, {0, 2}, bank, Modality::infrared, 0.5, bpl::PrototypeScope::initialized_only),
                 bpl::UninitializedPrototypeError);
}

TEST(ProtoNce, FeatureGradientsPassAndBankGetsNone) {
    Rng rng(7);
    auto bank = random_bank(4, 3, rng);
    Tensor fv = random_tensor({4, 3}, rng), fi = random_tensor({4, 3}, rng);
    const std::vector<std::size_t> iv{0, 1, 2, 3}, ii{3, 2, 1, 0};
    const auto build = [&](Tape& t) {
        return ops::add(bpl::intra_loss(t.param(fv), iv, t.param(fi), ii, bank, 0.5),
                        bpl::inter_loss(t.param(fv), iv, t.param(fi), ii, bank, 0.5));
    };
    const auto rep = check_gradients(build, {&fv, &fi});
    EXPECT_TRUE(rep.passed()) << rep.worst();

    // normalized bank rows enter the tape as constants and never get a gradient buffer
    const auto protos_before = bank.protos_v;
    Tape t;
    auto loss = build(t);
    t.backward(loss);
    EXPECT_EQ(bank.protos_v, protos_before);
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t.node(i).kind == Prim::constant && t.node(i).value.shape == Shape{4, 3}) {
            EXPECT_FALSE(t.node(i).requires_grad);
            EXPECT_TRUE(t.node(i).grad.empty());
        }
    }
}

TEST(ProtoNce, BadTemperatureAndShapes) {
    Rng rng(8);
    auto bank = random_bank(3, 2, rng);
    Tape t;
    const auto f = t.constant(random_tensor({2, 2}, rng));
    EXPECT_THROW(bpl::proto_nce(f, {0, 1}, bank, Modality::visible, 0.0), AttributeError);
    EXPECT_THROW(bpl::proto_nce(f, {0}, bank, Modality::visible, 0.5), ShapeError);
    EXPECT_THROW(bpl::PrototypeBank::create(3, 2, 1.5), ConfigError);
}
