#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "pia/model.hpp"
#include "pia/synthbench.hpp"

// Retrieval evaluation: cosine ranking, CMC, mAP and pair-distance statistics
// under the visible-to-infrared and infrared-to-visible protocols.
namespace pia::eval {

enum class Direction { v2i, i2v };

inline const char* direction_name(Direction d) { return d == Direction::v2i ? "V2I" : "I2V"; }

inline Direction parse_direction(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    if (s == "v2i") return Direction::v2i;
    if (s == "i2v") return Direction::i2v;
    throw ConfigError("direction: expected v2i or i2v, got '" + s + "'");
}

/// Row-major feature matrix with one label per row.
struct FeatureSet {
    std::size_t dim = 0;
    std::vector<double> feats;
    std::vector<std::size_t> ids;

    std::size_t rows() const { return ids.size(); }
    const double* row(std::size_t i) const { return feats.data() + i * dim; }
};

struct RetrievalSet {
    FeatureSet query;
    FeatureSet gallery;
    Direction direction = Direction::v2i;
    std::size_t dropped_queries = 0;
};

inline void normalize_rows(FeatureSet& fs) {
    for (std::size_t i = 0; i < fs.rows(); ++i) {
        double* r = fs.feats.data() + i * fs.dim;
        double sq = 0.0;
        for (std::size_t k = 0; k < fs.dim; ++k) sq += r[k] * r[k];
        const double n = std::max(std::sqrt(sq), ops::kNormFloor);
        for (std::size_t k = 0; k < fs.dim; ++k) r[k] /= n;
    }
}

/// Pairs visible and infrared feature sets according to the direction; rows
/// are L2-normalized, and queries without any gallery match are dropped.
inline RetrievalSet build_protocol(FeatureSet visible, FeatureSet infrared, Direction dir) {
    if (visible.rows() == 0 || infrared.rows() == 0) {
        throw ConfigError(std::string("build_protocol: empty ") + (visible.rows() == 0 ? "visible" : "infrared") +
                          " test modality");
    }
    if (visible.dim != infrared.dim) throw ShapeError("build_protocol: feature widths differ between modalities");
    normalize_rows(visible);
    normalize_rows(infrared);
    RetrievalSet set;
    set.direction = dir;
    FeatureSet q = dir == Direction::v2i ? std::move(visible) : std::move(infrared);
    set.gallery = dir == Direction::v2i ? std::move(infrared) : std::move(visible);
    set.query.dim = q.dim;
    for (std::size_t i = 0; i < q.rows(); ++i) {
        if (std::find(set.gallery.ids.begin(), set.gallery.ids.end(), q.ids[i]) == set.gallery.ids.end()) {
            ++set.dropped_queries;
            continue;
        }
        set.query.ids.push_back(q.ids[i]);
        set.query.feats.insert(set.query.feats.end(), q.row(i), q.row(i) + q.dim);
    }
    return set;
}

inline double cosine_distance(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
    return 1.0 - s;
}

/// Query x gallery cosine distances, row-major.
inline std::vector<double> distance_matrix(const RetrievalSet& set) {
    const std::size_t q = set.query.rows(), g = set.gallery.rows();
    std::vector<double> d(q * g);
    for (std::size_t i = 0; i < q; ++i) {
        for (std::size_t j = 0; j < g; ++j) d[i * g + j] = cosine_distance(set.query.row(i), set.gallery.row(j), set.query.dim);
    }
    return d;
}

using Orderings = std::vector<std::vector<std::size_t>>;

/// Per query, gallery indices by ascending distance; ties keep index order.
inline Orderings rank(const RetrievalSet& set) {
    const auto dist = distance_matrix(set);
    const std::size_t g = set.gallery.rows();
    Orderings out(set.query.rows());
    for (std::size_t i = 0; i < out.size(); ++i) {
        auto& o = out[i];
        o.resize(g);
        std::iota(o.begin(), o.end(), std::size_t{0});
        const double* row = dist.data() + i * g;
        std::stable_sort(o.begin(), o.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    }
    return out;
}

/// cmc[r-1] = fraction of queries whose first correct match is at rank <= r.
inline std::vector<double> cmc_curve(const Orderings& orderings, const std::vector<std::size_t>& query_ids,
                                     const std::vector<std::size_t>& gallery_ids) {
    const std::size_t g = gallery_ids.size();
    std::vector<double> hits(g, 0.0);
    for (std::size_t i = 0; i < orderings.size(); ++i) {
        for (std::size_t r = 0; r < orderings[i].size(); ++r) {
            if (gallery_ids[orderings[i][r]] == query_ids[i]) {
                hits[r] += 1.0;
                break;
            }
        }
    }
    std::vector<double> cmc(g, 0.0);
    double acc = 0.0;
    const double nq = static_cast<double>(orderings.size());
    for (std::size_t r = 0; r < g; ++r) {
        acc += hits[r];
        cmc[r] = nq > 0 ? acc / nq : 0.0;
    }
    return cmc;
}

struct MapResult {
    double map = 0.0;
    std::vector<double> per_query_ap;
};

/// AP = mean over relevant items of precision at that item's rank.
inline MapResult mean_ap(const Orderings& orderings, const std::vector<std::size_t>& query_ids,
                         const std::vector<std::size_t>& gallery_ids) {
    MapResult out;
    for (std::size_t i = 0; i < orderings.size(); ++i) {
        double found = 0.0, acc = 0.0;
        for (std::size_t r = 0; r < orderings[i].size(); ++r) {
            if (gallery_ids[orderings[i][r]] == query_ids[i]) {
                found += 1.0;
                acc += found / static_cast<double>(r + 1);
            }
        }
        out.per_query_ap.push_back(found > 0 ? acc / found : 0.0);
    }
    double s = 0.0;
    for (double ap : out.per_query_ap) s += ap;
    out.map = out.per_query_ap.empty() ? 0.0 : s / static_cast<double>(out.per_query_ap.size());
    return out;
}

struct DistanceStats {
    double pos_mean = 0.0, pos_std = 0.0;
    double neg_mean = 0.0, neg_std = 0.0;
    std::size_t pos_count = 0, neg_count = 0;
};

/// Mean and population standard deviation of cosine distances over all
/// query-gallery pairs, split by identity match.
inline DistanceStats distance_stats(const RetrievalSet& set) {
    const auto dist = distance_matrix(set);
    const std::size_t g = set.gallery.rows();
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < set.query.rows(); ++i) {
        for (std::size_t j = 0; j < g; ++j) {
            (set.query.ids[i] == set.gallery.ids[j] ? pos : neg).push_back(dist[i * g + j]);
        }
    }
    const auto moments = [](const std::vector<double>& v, double& mean, double& sd) {
        if (v.empty()) return;
        double s = 0.0;
        for (double x : v) s += x;
        mean = s / static_cast<double>(v.size());
        double ss = 0.0;
        for (double x : v) ss += (x - mean) * (x - mean);
        sd = std::sqrt(ss / static_cast<double>(v.size()));
    };
    DistanceStats st;
    st.pos_count = pos.size();
    st.neg_count = neg.size();
    moments(pos, st.pos_mean, st.pos_std);
    moments(neg, st.neg_mean, st.neg_std);
    return st;
}

struct EvalReport {
    Direction direction = Direction::v2i;
    std::vector<double> cmc;
    double map = 0.0;
    std::vector<double> per_query_ap;
    DistanceStats dist;
    std::size_t num_query = 0, num_gallery = 0, dropped_queries = 0;

    double rank_at(std::size_t r) const {
        if (cmc.empty()) return 0.0;
        return cmc[std::min(r, cmc.size()) - 1];
    }
};

inline EvalReport evaluate(const RetrievalSet& set) {
    const auto ord = rank(set);
    EvalReport rep;
    rep.direction = set.direction;
    rep.cmc = cmc_curve(ord, set.query.ids, set.gallery.ids);
    auto m = mean_ap(ord, set.query.ids, set.gallery.ids);
    rep.map = m.map;
    rep.per_query_ap = std::move(m.per_query_ap);
    rep.dist = distance_stats(set);
    rep.num_query = set.query.rows();
    rep.num_gallery = set.gallery.rows();
    rep.dropped_queries = set.dropped_queries;
    return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
    return {{"direction", direction_name(r.direction)},
            {"rank1", r.rank_at(1)},
            {"rank5", r.rank_at(5)},
            {"rank10", r.rank_at(10)},
            {"rank20", r.rank_at(20)},
            {"map", r.map},
            {"cmc", r.cmc},
            {"pos_dist_mean", r.dist.pos_mean},
            {"pos_dist_std", r.dist.pos_std},
            {"neg_dist_mean", r.dist.neg_mean},
            {"neg_dist_std", r.dist.neg_std},
            {"num_query", r.num_query},
            {"num_gallery", r.num_gallery},
            {"dropped_queries", r.dropped_queries}};
}

// --------------------------------------------------------------------------
// Feature extraction

struct LabeledImages {
    std::vector<Tensor> pixels;  // [3,H,W] each
    std::vector<std::size_t> ids;
    std::vector<synth::Modality> modality;
};

inline LabeledImages load_split(const synth::Manifest& m, synth::Split split) {
    LabeledImages out;
    for (const auto& r : m.rows) {
        if (r.split != split) continue;
        out.pixels.push_back(m.load_pixels(r));
        out.ids.push_back(r.identity);
        out.modality.push_back(r.modality);
    }
    return out;
}

inline Tensor stack_images(const std::vector<Tensor>& imgs, std::size_t begin, std::size_t end) {
    const Shape& s = imgs.at(begin).shape;
    Tensor batch = Tensor::zeros({end - begin, s[0], s[1], s[2]});
    const std::size_t n = imgs[begin].size();
    for (std::size_t i = begin; i < end; ++i) {
        if (imgs[i].shape != s) throw ShapeError("stack_images: inconsistent image shapes");
        std::copy(imgs[i].data.begin(), imgs[i].data.end(), batch.data.begin() + static_cast<std::ptrdiff_t>((i - begin) * n));
    }
    return batch;
}

struct BranchFeatures {
    FeatureSet identity;
    FeatureSet clothing;  // empty without DBDL
};

/// Eval-mode f (and f_c) for every image of one modality. Each image is
/// processed independently of its chunk neighbours.
inline BranchFeatures extract_features(PiaModel& model, const LabeledImages& data, synth::Modality modality,
                                       std::size_t chunk = 64) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.ids.size(); ++i) {
        if (data.modality[i] == modality) idx.push_back(i);
    }
    BranchFeatures out;
    const std::size_t d = model.embedding_dim();
    out.identity.dim = d;
    out.clothing.dim = d;
    for (std::size_t s = 0; s < idx.size(); s += chunk) {
        const std::size_t e = std::min(idx.size(), s + chunk);
        std::vector<Tensor> imgs;
        for (std::size_t i = s; i < e; ++i) imgs.push_back(data.pixels[idx[i]]);
        Tape tape;
        auto fw = model.forward(tape, stack_images(imgs, 0, imgs.size()), Mode::eval);
        const auto& fv = fw.f.value().data;
        out.identity.feats.insert(out.identity.feats.end(), fv.begin(), fv.end());
        if (fw.f_c) {
            const auto& cv = fw.f_c->value().data;
            out.clothing.feats.insert(out.clothing.feats.end(), cv.begin(), cv.end());
        }
        for (std::size_t i = s; i < e; ++i) {
            out.identity.ids.push_back(data.ids[idx[i]]);
            if (fw.f_c) out.clothing.ids.push_back(data.ids[idx[i]]);
        }
    }
    return out;
}

/// Mean |cos(f, f_c)| over all images (both modalities); 0 without DBDL.
inline double feature_correlation(PiaModel& model, const LabeledImages& data) {
    double acc = 0.0;
    std::size_t n = 0;
    for (auto mod : {synth::Modality::V, synth::Modality::I}) {
        auto bf = extract_features(model, data, mod);
        if (bf.clothing.rows() == 0) continue;
        for (std::size_t i = 0; i < bf.identity.rows(); ++i) {
            const double* a = bf.identity.row(i);
            const double* b = bf.clothing.row(i);
            double ab = 0, aa = 0, bb = 0;
            for (std::size_t k = 0; k < bf.identity.dim; ++k) {
                ab += a[k] * b[k];
                aa += a[k] * a[k];
                bb += b[k] * b[k];
            }
            acc += std::abs(ab) / std::max(std::sqrt(aa) * std::sqrt(bb), 1e-300);
            ++n;
        }
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

/// Both protocol directions on a labeled split.
inline std::pair<EvalReport, EvalReport> evaluate_model(PiaModel& model, const LabeledImages& data) {
    auto vis = extract_features(model, data, synth::Modality::V).identity;
    auto ir = extract_features(model, data, synth::Modality::I).identity;
    return {evaluate(build_protocol(vis, ir, Direction::v2i)), evaluate(build_protocol(vis, ir, Direction::i2v))};
}

}  // namespace pia::eval
