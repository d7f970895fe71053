#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "pia/evalkit.hpp"

using namespace pia;
using namespace pia::eval;

namespace {

FeatureSet random_set(std::size_t n, std::size_t d, std::size_t num_ids, Rng& rng) {
    FeatureSet fs;
    fs.dim = d;
    for (std::size_t i = 0; i < n * d; ++i) fs.feats.push_back(rng.uniform(-1, 1));
    for (std::size_t i = 0; i < n; ++i) fs.ids.push_back(rng.below(num_ids));
    return fs;
}

FeatureSet make_set(std::size_t d, std::vector<double> feats, std::vector<std::size_t> ids) {
    FeatureSet fs;
    fs.dim = d;
    fs.feats = std::move(feats);
    fs.ids = std::move(ids);
    return fs;
}

// Position of gallery item j in the ranking, counted by pairwise comparison:
// 1 + items strictly closer + tied items with a smaller index.
std::size_t pairwise_rank(const std::vector<double>& dist, std::size_t j) {
    std::size_t r = 1;
    for (std::size_t k = 0; k < dist.size(); ++k) {
        if (dist[k] < dist[j] || (dist[k] == dist[j] && k < j)) ++r;
    }
    return r;
}

struct Oracle {
    std::vector<double> cmc;
    std::vector<double> ap;
};

Oracle brute_force(const RetrievalSet& set) {
    const std::size_t q = set.query.rows(), g = set.gallery.rows(), d = set.query.dim;
    Oracle o;
    o.cmc.assign(g, 0.0);
    for (std::size_t i = 0; i < q; ++i) {
        std::vector<double> dist(g);
        for (std::size_t j = 0; j < g; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += set.query.row(i)[k] * set.gallery.row(j)[k];
            dist[j] = 1.0 - s;
        }
        std::vector<std::size_t> rel_ranks;
        for (std::size_t j = 0; j < g; ++j) {
            if (set.gallery.ids[j] == set.query.ids[i]) rel_ranks.push_back(pairwise_rank(dist, j));
        }
        const std::size_t first = *std::min_element(rel_ranks.begin(), rel_ranks.end());
        for (std::size_t r = first; r <= g; ++r) o.cmc[r - 1] += 1.0 / static_cast<double>(q);
        double ap = 0.0;
        for (auto rj : rel_ranks) {
            const auto above = std::count_if(rel_ranks.begin(), rel_ranks.end(), [&](std::size_t x) { return x <= rj; });
            ap += static_cast<double>(above) / static_cast<double>(rj);
        }
        o.ap.push_back(ap / static_cast<double>(rel_ranks.size()));
    }
    return o;
}

void check_report_invariants(const EvalReport& rep) {
    ASSERT_FALSE(rep.cmc.empty());
    for (std::size_t r = 1; r < rep.cmc.size(); ++r) EXPECT_GE(rep.cmc[r], rep.cmc[r - 1]);
    EXPECT_NEAR(rep.cmc.back(), 1.0, 1e-12);
    double s = 0.0;
    for (double ap : rep.per_query_ap) {
        EXPECT_GT(ap, 0.0);
        EXPECT_LE(ap, 1.0);
        s += ap;
    }
    EXPECT_NEAR(rep.map, s / static_cast<double>(rep.per_query_ap.size()), 1e-12);
}

}  // namespace

TEST(Rank, ExactMatchRanksFirstAndTiesKeepIndexOrder) {
    RetrievalSet set;
    set.query = make_set(2, {1, 0}, {0});
    set.gallery = make_set(2, {0, 1, 1, 0, 0, 1, 1, 0}, {1, 0, 1, 0});
    const auto ord = rank(set);
    EXPECT_EQ(ord[0], (std::vector<std::size_t>{1, 3, 0, 2}));
}

TEST(Rank, SeededInstanceMatchesPairwiseOracle) {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        auto set = build_protocol(random_set(5, 3, 3, rng), random_set(7, 3, 3, rng), Direction::v2i);
        const auto ord = rank(set);
        const auto dist = distance_matrix(set);
        for (std::size_t i = 0; i < set.query.rows(); ++i) {
            std::vector<double> row(dist.begin() + static_cast<std::ptrdiff_t>(i * 7),
                                    dist.begin() + static_cast<std::ptrdiff_t>((i + 1) * 7));
            for (std::size_t pos = 0; pos < 7; ++pos) EXPECT_EQ(pairwise_rank(row, ord[i][pos]), pos + 1);
        }
    }
}

TEST(Cmc, FirstMatchAtRankTwo) {
    const Orderings ord{{0, 1, 2, 3}};
    const auto cmc = cmc_curve(ord, {5}, {4, 5, 4, 5});
    EXPECT_EQ(cmc, (std::vector<double>{0, 1, 1, 1}));
}

TEST(MeanAp, HandCaseFiveSixths) {
    const Orderings ord{{0, 1, 2, 3}};
    const auto m = mean_ap(ord, {7}, {7, 1, 7, 2});
    EXPECT_NEAR(m.per_query_ap[0], 5.0 / 6.0, 1e-15);
    EXPECT_NEAR(m.map, 0.83333, 1e-5);
    const auto all_first = mean_ap(Orderings{{2, 0, 1}}, {3}, {3, 1, 3});
    EXPECT_NEAR(all_first.map, 1.0, 1e-15);
}

TEST(Evaluate, ExhaustiveOracleSweep) {
    Rng rng(2);
    int checked = 0;
    for (int trial = 0; trial < 400; ++trial) {
        const std::size_t q = 1 + rng.below(4), g = 1 + rng.below(6), k = 1 + rng.below(3);
        auto v = random_set(q, 3, k, rng);
        auto ir = random_set(g, 3, k, rng);
        // quantized features make exact distance ties common
        if (trial % 3 == 0) {
            for (auto& x : v.feats) x = std::round(x);
            for (auto& x : ir.feats) x = std::round(x) + 0.5;
        }
        const auto set = build_protocol(v, ir, Direction::v2i);
        if (set.query.rows() == 0) continue;
        const auto rep = evaluate(set);
        const auto o = brute_force(set);
        ASSERT_EQ(rep.cmc.size(), o.cmc.size());
        for (std::size_t r = 0; r < o.cmc.size(); ++r) EXPECT_NEAR(rep.cmc[r], o.cmc[r], 1e-12);
        ASSERT_EQ(rep.per_query_ap.size(), o.ap.size());
        for (std::size_t i = 0; i < o.ap.size(); ++i) EXPECT_NEAR(rep.per_query_ap[i], o.ap[i], 1e-12);
        check_report_invariants(rep);
        ++checked;
    }
    EXPECT_GT(checked, 200);
}

TEST(Evaluate, GalleryPermutationInvariance) {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        auto set = build_protocol(random_set(6, 4, 3, rng), random_set(9, 4, 3, rng), Direction::v2i);
        if (set.query.rows() == 0) continue;
        const auto base = evaluate(set);
        std::vector<std::size_t> perm(9);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        rng.shuffle(perm);
        RetrievalSet p = set;
        for (std::size_t j = 0; j < 9; ++j) {
            p.gallery.ids[j] = set.gallery.ids[perm[j]];
            std::copy(set.gallery.row(perm[j]), set.gallery.row(perm[j]) + 4, p.gallery.feats.begin() + static_cast<std::ptrdiff_t>(j * 4));
        }
        const auto rep = evaluate(p);
        EXPECT_EQ(rep.cmc, base.cmc);
        EXPECT_EQ(rep.map, base.map);
    }
}

TEST(Evaluate, PositiveRescalingIsBitInvariant) {
    Rng rng(4);
    for (int trial = 0; trial < 30; ++trial) {
        const auto v = random_set(6, 5, 3, rng), ir = random_set(8, 5, 3, rng);
        auto v2 = v, ir2 = ir;
        const double c = rng.uniform(0.1, 10.0);
        for (auto& x : v2.feats) x *= c;
        for (auto& x : ir2.feats) x *= c;
        const auto a = build_protocol(v, ir, Direction::v2i);
        const auto b = build_protocol(v2, ir2, Direction::v2i);
        if (a.query.rows() == 0) continue;
        EXPECT_EQ(rank(a), rank(b));
        const auto ra = evaluate(a), rb = evaluate(b);
        EXPECT_EQ(std::memcmp(ra.cmc.data(), rb.cmc.data(), ra.cmc.size() * sizeof(double)), 0);
        EXPECT_EQ(std::memcmp(&ra.map, &rb.map, sizeof(double)), 0);
    }
}

TEST(Protocol, SingleIdentityIsAlwaysRankOne) {
    Rng rng(5);
    auto v = random_set(4, 3, 1, rng), ir = random_set(5, 3, 1, rng);
    const auto rep = evaluate(build_protocol(v, ir, Direction::v2i));
    EXPECT_EQ(rep.rank_at(1), 1.0);
    EXPECT_EQ(rep.map, 1.0);
}

TEST(Protocol, DirectionsSwapBlocks) {
    Rng rng(6);
    const auto v = random_set(4, 3, 2, rng), ir = random_set(6, 3, 2, rng);
    const auto a = build_protocol(v, ir, Direction::v2i);
    const auto b = build_protocol(v, ir, Direction::i2v);
    if (a.dropped_queries == 0 && b.dropped_queries == 0) {
        EXPECT_EQ(a.query.feats, b.gallery.feats);
        EXPECT_EQ(a.gallery.feats, b.query.feats);
        EXPECT_EQ(a.query.ids, b.gallery.ids);
    }
    EXPECT_EQ(a.query.rows() + a.dropped_queries, 4u);
    EXPECT_EQ(b.query.rows() + b.dropped_queries, 6u);
}

TEST(Protocol, QueriesWithoutMatchesAreDroppedAndCounted) {
    const auto v = make_set(2, {1, 0, 0, 1, 1, 1}, {0, 1, 2});
    const auto ir = make_set(2, {1, 0, 0, 1}, {0, 1});
    const auto set = build_protocol(v, ir, Direction::v2i);
    EXPECT_EQ(set.query.rows(), 2u);
    EXPECT_EQ(set.dropped_queries, 1u);
    EXPECT_EQ(evaluate(set).dropped_queries, 1u);
}

TEST(Protocol, EmptyModalityRejected) {
    Rng rng(7);
    FeatureSet empty;
    empty.dim = 3;
    EXPECT_THROW(build_protocol(empty, random_set(3, 3, 2, rng), Direction::v2i), ConfigError);
    EXPECT_THROW(build_protocol(random_set(3, 3, 2, rng), empty, Direction::i2v), ConfigError);
    EXPECT_THROW(parse_direction("sideways"), ConfigError);
    EXPECT_EQ(parse_direction("I2V"), Direction::i2v);
}

TEST(DistanceStats, HandCasesAndPairwiseOracle) {
    {
        const auto v = make_set(2, {1, 0, 1, 0}, {0, 1});
        const auto set = build_protocol(v, v, Direction::v2i);
        const auto st = distance_stats(set);
        EXPECT_EQ(st.pos_mean, 0.0);
        EXPECT_EQ(st.neg_mean, 0.0);
    }
    {
        const auto set = build_protocol(make_set(2, {1, 0}, {0}), make_set(2, {0.6, 0.8}, {0}), Direction::v2i);
        const auto st = distance_stats(set);
        EXPECT_NEAR(st.pos_mean, 0.4, 1e-15);
        EXPECT_EQ(st.pos_std, 0.0);
    }
    Rng rng(8);
    // two identity clusters around orthogonal directions
    FeatureSet v, ir;
    v.dim = ir.dim = 2;
    for (std::size_t i = 0; i < 6; ++i) {
        const std::size_t id = i % 2;
        for (FeatureSet* fs : {&v, &ir}) {
            fs->feats.push_back((id == 0 ? 1.0 : 0.0) + rng.uniform(-0.1, 0.1));
            fs->feats.push_back((id == 1 ? 1.0 : 0.0) + rng.uniform(-0.1, 0.1));
            fs->ids.push_back(id);
        }
    }
    const auto set = build_protocol(v, ir, Direction::i2v);
    const auto st = distance_stats(set);
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < set.query.rows(); ++i)
        for (std::size_t j = 0; j < set.gallery.rows(); ++j) {
            const double d = 1.0 - (set.query.row(i)[0] * set.gallery.row(j)[0] + set.query.row(i)[1] * set.gallery.row(j)[1]);
            (set.query.ids[i] == set.gallery.ids[j] ? pos : neg).push_back(d);
        }
    auto mean = [](const std::vector<double>& x) {
        double s = 0.0;
        for (double v : x) s += v;
        return s / static_cast<double>(x.size());
    };
    auto sd = [&](const std::vector<double>& x) {
        const double m = mean(x);
        double s = 0.0;
        for (double v : x) s += (v - m) * (v - m);
        return std::sqrt(s / static_cast<double>(x.size()));
    };
    EXPECT_NEAR(st.pos_mean, mean(pos), 1e-12);
    EXPECT_NEAR(st.neg_mean, mean(neg), 1e-12);
    EXPECT_NEAR(st.pos_std, sd(pos), 1e-12);
    EXPECT_NEAR(st.neg_std, sd(neg), 1e-12);
    EXPECT_LT(st.pos_mean, st.neg_mean);
    EXPECT_EQ(st.pos_count, 18u);
    EXPECT_EQ(st.neg_count, 18u);
}

TEST(Report, JsonCarriesEveryField) {
    Rng rng(9);
    const auto rep = evaluate(build_protocol(random_set(6, 3, 2, rng), random_set(6, 3, 2, rng), Direction::i2v));
    const auto j = to_json(rep);
    for (const char* key : {"direction", "rank1", "rank5", "rank10", "rank20", "map", "cmc", "pos_dist_mean",
                            "pos_dist_std", "neg_dist_mean", "neg_dist_std", "num_query", "num_gallery",
                            "dropped_queries"}) {
        EXPECT_TRUE(j.contains(key)) << key;
    }
    EXPECT_EQ(j["direction"], "I2V");
    EXPECT_EQ(j["cmc"].size(), rep.num_gallery);
    // rank-k beyond the gallery size saturates at the last CMC value
    EXPECT_EQ(j["rank20"].get<double>(), rep.cmc.back());
}
