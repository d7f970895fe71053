#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pia/ops.hpp"
#include "pia/tape.hpp"
#include "pia/tensor.hpp"

// Bi-directional prototype learning: per-modality identity prototypes kept
// outside the network and the ProtoNCE losses contrasting features against them.
namespace pia::bpl {

class UninitializedPrototypeError : public Error {
public:
    using Error::Error;
};

enum class Modality { visible, infrared };

/// Per-modality, per-identity prototype rows with momentum state.
struct PrototypeBank {
    std::size_t num_ids = 0;
    std::size_t dim = 0;
    std::vector<double> protos_v;  // num_ids x dim
    std::vector<double> protos_i;
    std::vector<bool> initialized_v;
    std::vector<bool> initialized_i;
    double alpha = 0.9;
    std::uint64_t iteration = 0;

    static PrototypeBank create(std::size_t num_ids, std::size_t dim, double alpha) {
        if (num_ids == 0 || dim == 0) throw ConfigError("prototype bank needs at least one identity and dimension");
        if (alpha < 0.0 || alpha > 1.0) throw ConfigError("alpha must lie in [0,1], got " + std::to_string(alpha));
        PrototypeBank b;
        b.num_ids = num_ids;
        b.dim = dim;
        b.protos_v.assign(num_ids * dim, 0.0);
        b.protos_i.assign(num_ids * dim, 0.0);
        b.initialized_v.assign(num_ids, false);
        b.initialized_i.assign(num_ids, false);
        b.alpha = alpha;
        return b;
    }

    std::vector<double>& protos(Modality m) { return m == Modality::visible ? protos_v : protos_i; }
    const std::vector<double>& protos(Modality m) const { return m == Modality::visible ? protos_v : protos_i; }
    std::vector<bool>& flags(Modality m) { return m == Modality::visible ? initialized_v : initialized_i; }
    const std::vector<bool>& flags(Modality m) const { return m == Modality::visible ? initialized_v : initialized_i; }

    bool fully_initialized() const {
        return std::all_of(initialized_v.begin(), initialized_v.end(), [](bool b) { return b; }) &&
               std::all_of(initialized_i.begin(), initialized_i.end(), [](bool b) { return b; });
    }

    std::size_t initialized_count() const {
        return static_cast<std::size_t>(std::count(initialized_v.begin(), initialized_v.end(), true) +
                                        std::count(initialized_i.begin(), initialized_i.end(), true));
    }

    /// Copy with the two modality banks exchanged.
    PrototypeBank swapped() const {
        PrototypeBank b = *this;
        std::swap(b.protos_v, b.protos_i);
        std::swap(b.initialized_v, b.initialized_i);
        return b;
    }
};

/// Detached visible and infrared features of one balanced batch.
struct ModalityBatch {
    Tensor feats_v;  // [M, D]
    Tensor feats_i;  // [M, D]
    std::vector<std::size_t> ids_v;
    std::vector<std::size_t> ids_i;

    const Tensor& feats(Modality m) const { return m == Modality::visible ? feats_v : feats_i; }
    const std::vector<std::size_t>& ids(Modality m) const { return m == Modality::visible ? ids_v : ids_i; }
};

namespace detail {

/// Per-identity mean rows of one modality block, keyed by identity.
inline std::map<std::size_t, std::vector<double>> group_means(const Tensor& feats, const std::vector<std::size_t>& ids,
                                                              std::size_t num_ids, std::size_t dim) {
    if (feats.rank() != 2 || feats.dim(0) != ids.size() || feats.dim(1) != dim) {
        throw ShapeError("prototype update: features " + to_string(feats.shape) + " do not match " +
                         std::to_string(ids.size()) + " labels of width " + std::to_string(dim));
    }
    std::map<std::size_t, std::vector<double>> sums;
    std::map<std::size_t, std::size_t> counts;
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= num_ids) throw ShapeError("prototype update: identity " + std::to_string(ids[r]) + " out of range");
        auto& s = sums[ids[r]];
        if (s.empty()) s.assign(dim, 0.0);
        for (std::size_t k = 0; k < dim; ++k) s[k] += feats[r * dim + k];
        ++counts[ids[r]];
    }
    for (auto& [id, s] : sums) {
        for (auto& v : s) v /= static_cast<double>(counts[id]);
    }
    return sums;
}

}  // namespace detail

/// Sets each not-yet-initialized prototype of an identity present in the
/// batch to the mean of its features in that modality.
inline void init_prototypes(PrototypeBank& bank, const ModalityBatch& batch) {
    for (Modality m : {Modality::visible, Modality::infrared}) {
        auto& rows = bank.protos(m);
        auto& flags = bank.flags(m);
        for (const auto& [id, mean] : detail::group_means(batch.feats(m), batch.ids(m), bank.num_ids, bank.dim)) {
            if (flags[id]) continue;
            std::copy(mean.begin(), mean.end(), rows.begin() + static_cast<std::ptrdiff_t>(id * bank.dim));
            flags[id] = true;
        }
    }
}

/// p ← α p + (1 − α) f̄ for every identity in the batch, per modality.
inline void momentum_update(PrototypeBank& bank, const ModalityBatch& batch) {
    const double a = bank.alpha;
    for (Modality m : {Modality::visible, Modality::infrared}) {
        auto& rows = bank.protos(m);
        const auto& flags = bank.flags(m);
        for (const auto& [id, mean] : detail::group_means(batch.feats(m), batch.ids(m), bank.num_ids, bank.dim)) {
            if (!flags[id]) {
                throw UninitializedPrototypeError("momentum_update: prototype of identity " + std::to_string(id) +
                                                  " is not initialized");
            }
            double* row = rows.data() + id * bank.dim;
            for (std::size_t k = 0; k < bank.dim; ++k) row[k] = a * row[k] + (1.0 - a) * mean[k];
        }
    }
    ++bank.iteration;
}

enum class PrototypeScope {
    all_required,     // every prototype must be initialized
    initialized_only  // the softmax runs over initialized prototypes only
};

/// ProtoNCE of features [M,D] against one prototype set:
/// mean_i −log softmax_k(s(f_i, p_k) / τ)[y_i] with cosine similarity s.
/// Prototypes enter as constants.
inline Var proto_nce(Var feats, const std::vector<std::size_t>& ids, const PrototypeBank& bank, Modality proto_modality,
                     double tau, PrototypeScope scope = PrototypeScope::all_required) {
    const auto& s = feats.shape();
    if (s.size() != 2 || s[1] != bank.dim || s[0] != ids.size()) {
        throw ShapeError("proto_nce: features " + to_string(s) + " do not match " + std::to_string(ids.size()) +
                         " labels and prototype width " + std::to_string(bank.dim));
    }
    if (!(tau > 0.0)) throw AttributeError("proto_nce: temperature must be > 0");
    const auto& rows = bank.protos(proto_modality);
    const auto& flags = bank.flags(proto_modality);
    const char* mname = proto_modality == Modality::visible ? "visible" : "infrared";

    std::vector<std::size_t> column(bank.num_ids, SIZE_MAX);
    std::vector<std::size_t> active;
    for (std::size_t k = 0; k < bank.num_ids; ++k) {
        if (flags[k]) {
            column[k] = active.size();
            active.push_back(k);
        } else if (scope == PrototypeScope::all_required) {
            throw UninitializedPrototypeError(std::string("proto_nce: ") + mname + " prototype of identity " +
                                              std::to_string(k) + " is not initialized");
        }
    }
    const std::size_t m = ids.size(), kk = active.size(), d = bank.dim;
    for (auto id : ids) {
        if (id >= bank.num_ids || column[id] == SIZE_MAX) {
            throw UninitializedPrototypeError(std::string("proto_nce: ") + mname + " prototype of identity " +
                                              std::to_string(id) + " is not initialized");
        }
    }

    Tensor protos = Tensor::zeros({kk, d});
    for (std::size_t j = 0; j < kk; ++j) {
        const double* row = rows.data() + active[j] * d;
        double sq = 0.0;
        for (std::size_t k = 0; k < d; ++k) sq += row[k] * row[k];
        const double nrm = std::max(std::sqrt(sq), ops::kNormFloor);
        for (std::size_t k = 0; k < d; ++k) protos[j * d + k] = row[k] / nrm;
    }
    Tensor onehot = Tensor::zeros({m, kk});
    for (std::size_t i = 0; i < m; ++i) onehot[i * kk + column[ids[i]]] = 1.0;

    Tape& tape = *feats.tape;
    Var sims = ops::linear(ops::l2_normalize(feats), tape.constant(std::move(protos)), tape.constant(Tensor::zeros({kk})));
    Var logp = ops::log_softmax(ops::scale(sims, 1.0 / tau));
    Var picked = ops::sum(ops::mul(logp, tape.constant(std::move(onehot))));
    return ops::scale(picked, -1.0 / static_cast<double>(m));
}

/// A pair of directional terms (visible-feature term, infrared-feature term).
struct ProtoTerms {
    Var v;
    Var i;
    Var total() const { return ops::add(v, i); }
};

/// Each modality's features against its own prototype set.
inline ProtoTerms intra_terms(Var feats_v, const std::vector<std::size_t>& ids_v, Var feats_i,
                              const std::vector<std::size_t>& ids_i, const PrototypeBank& bank, double tau,
                              PrototypeScope scope = PrototypeScope::all_required) {
    return {proto_nce(feats_v, ids_v, bank, Modality::visible, tau, scope),
            proto_nce(feats_i, ids_i, bank, Modality::infrared, tau, scope)};
}

/// Each modality's features against the other modality's prototype set.
inline ProtoTerms inter_terms(Var feats_v, const std::vector<std::size_t>& ids_v, Var feats_i,
                              const std::vector<std::size_t>& ids_i, const PrototypeBank& bank, double tau,
                              PrototypeScope scope = PrototypeScope::all_required) {
    return {proto_nce(feats_v, ids_v, bank, Modality::infrared, tau, scope),
            proto_nce(feats_i, ids_i, bank, Modality::visible, tau, scope)};
}

inline Var intra_loss(Var feats_v, const std::vector<std::size_t>& ids_v, Var feats_i,
                      const std::vector<std::size_t>& ids_i, const PrototypeBank& bank, double tau,
                      PrototypeScope scope = PrototypeScope::all_required) {
    return intra_terms(feats_v, ids_v, feats_i, ids_i, bank, tau, scope).total();
}

inline Var inter_loss(Var feats_v, const std::vector<std::size_t>& ids_v, Var feats_i,
                      const std::vector<std::size_t>& ids_i, const PrototypeBank& bank, double tau,
                      PrototypeScope scope = PrototypeScope::all_required) {
    return inter_terms(feats_v, ids_v, feats_i, ids_i, bank, tau, scope).total();
}

}  // namespace pia::bpl
