#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pia/encoder.hpp"
#include "pia/ops.hpp"
#include "pia/rng.hpp"
#include "pia/tape.hpp"

// Dual-branch disentanglement: a spatial clothing mask, its softened
// complement for the identity branch, and the two losses supervising them.
namespace pia::dbdl {

class DegenerateFeatureError : public Error {
public:
    using Error::Error;
};

class LabelError : public Error {
public:
    using Error::Error;
};

/// Attention conv over the stacked [max; avg] channel pools, plus the
/// unconstrained parameter behind the suppression coefficient λ = σ(lambda_raw).
struct AttentionParams {
    Tensor w1;          // [1, 2, k, k]
    Tensor b1;          // [1]
    Tensor lambda_raw;  // []

    std::size_t kernel() const { return w1.dim(2); }
    double lambda() const { return ops::sigmoid_scalar(lambda_raw.item()); }
};

inline AttentionParams init_attention(std::size_t kernel, Rng& rng) {
    if (kernel % 2 == 0) throw ConfigError("attention_kernel must be odd, got " + std::to_string(kernel));
    AttentionParams a{Tensor::zeros({1, 2, kernel, kernel}, true), Tensor::zeros({1}, true),
                      Tensor::scalar(0.0, true)};
    glorot_uniform(a.w1, 2 * kernel * kernel, kernel * kernel, rng);
    return a;
}

struct MaskPair {
    Var m_c;     // [N,1,H',W'], entries in (0,1)
    Var m_id;    // 1 - λ m_c
    Var lambda;  // []
};

struct DisentangledPair {
    Var f;    // identity embedding
    Var f_c;  // clothing embedding
};

/// m_c = σ(W1 * [max_c(Z); avg_c(Z)] + b1), same spatial size as Z.
inline Var clothing_mask(Var z, Var w1, Var b1) {
    const std::size_t rank = z.shape().size();
    Var stacked = ops::concat({ops::channel_max_pool(z), ops::channel_avg_pool(z)}, rank == 4 ? 1 : 0);
    const std::size_t k = w1.shape().at(2);
    return ops::sigmoid(ops::conv2d(stacked, w1, b1, 1, k / 2));
}

inline Var clothing_mask(Var z, AttentionParams& attn) {
    Tape& tape = *z.tape;
    return clothing_mask(z, tape.param(attn.w1), tape.param(attn.b1));
}

/// m_id = 1 − λ · m_c for an explicit λ (shape []).
inline Var suppress(Var m_c, Var lambda) {
    return ops::add_scalar(ops::scale(ops::mul(lambda, m_c), -1.0), 1.0);
}

inline MaskPair identity_mask(Var m_c, Var lambda_raw) {
    Var lambda = ops::sigmoid(lambda_raw);
    return {m_c, suppress(m_c, lambda), lambda};
}

inline MaskPair masks(Var z, AttentionParams& attn) {
    Var m_c = clothing_mask(z, attn);
    return identity_mask(m_c, z.tape->param(attn.lambda_raw));
}

/// f = embed(m_id ⊙ Z), f_c = embed(m_c ⊙ Z). Each branch has its own batch norm.
inline DisentangledPair disentangle(Var z, const MaskPair& m, PoolingMode pooling, BatchNormLayer* bn_id,
                                    BatchNormLayer* bn_c, Mode mode) {
    return {embed(ops::spatial_mask(m.m_id, z), pooling, bn_id, mode),
            embed(ops::spatial_mask(m.m_c, z), pooling, bn_c, mode)};
}

/// Mean negative log-likelihood of `labels` under log-probabilities [N,K].
inline Var nll(Var log_probs, const std::vector<std::size_t>& labels) {
    const auto& s = log_probs.shape();
    if (s.size() != 2 || s[0] != labels.size()) {
        throw ShapeError("nll: log-probabilities " + to_string(s) + " vs " + std::to_string(labels.size()) + " labels");
    }
    Tensor onehot = Tensor::zeros(s);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= s[1]) {
            throw LabelError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(s[1]) +
                             " classes");
        }
        onehot[i * s[1] + labels[i]] = 1.0;
    }
    Var picked = ops::sum(ops::mul(log_probs, log_probs.tape->constant(std::move(onehot))));
    return ops::scale(picked, -1.0 / static_cast<double>(labels.size()));
}

inline Var cross_entropy(Var embedding, LinearHead& head, const std::vector<std::size_t>& labels) {
    return nll(classify(embedding, head), labels);
}

/// Identity cross-entropy over f plus clothing cross-entropy over f_c.
inline Var classification_loss(Var f, Var f_c, const std::vector<std::size_t>& y_id,
                               const std::vector<std::size_t>& y_c, ClassifierHeads& heads) {
    if (y_id.empty()) throw ShapeError("classification_loss: empty batch");
    return ops::add(cross_entropy(f, heads.id_head, y_id), cross_entropy(f_c, heads.clothing_head, y_c));
}

inline constexpr double kMinFeatureNorm = 1e-6;

/// Batch mean of |<f_i, f_c,i>| / (||f_i|| ||f_c,i||).
inline Var orthogonality_loss(Var f, Var f_c) {
    const auto& s = f.shape();
    if (s.size() != 2 || f_c.shape() != s) {
        throw ShapeError("orthogonality_loss: expected equal [N,D] operands, got " + to_string(s) + " and " +
                         to_string(f_c.shape()));
    }
    const std::size_t n = s[0], d = s[1];
    for (const Var* v : {&f, &f_c}) {
        const auto& data = v->value().data;
        for (std::size_t i = 0; i < n; ++i) {
            double sq = 0.0;
            for (std::size_t k = 0; k < d; ++k) sq += data[i * d + k] * data[i * d + k];
            if (std::sqrt(sq) <= kMinFeatureNorm) {
                throw DegenerateFeatureError("orthogonality_loss: sample " + std::to_string(i) +
                                             " has a near-zero-norm " + (v == &f ? "identity" : "clothing") +
                                             " embedding");
            }
        }
    }
    return ops::mean(ops::abs(ops::dot(ops::l2_normalize(f), ops::l2_normalize(f_c))));
}

}  // namespace pia::dbdl
