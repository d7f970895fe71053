#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "pia/ops.hpp"
#include "pia/rng.hpp"
#include "pia/tape.hpp"
#include "pia/tensor.hpp"

namespace pia {

enum class Mode { train, eval };

enum class PoolingMode { gap, gap_gmp };

inline const char* to_string(PoolingMode m) { return m == PoolingMode::gap ? "gap" : "gap_gmp"; }

inline PoolingMode parse_pooling_mode(const std::string& s) {
    if (s == "gap") return PoolingMode::gap;
    if (s == "gap_gmp") return PoolingMode::gap_gmp;
    throw ConfigError("pooling_mode: expected gap or gap_gmp, got '" + s + "'");
}

/// Architecture of the convolutional backbone.
struct EncoderConfig {
    std::size_t in_channels = 3;
    std::size_t height = 64;
    std::size_t width = 32;
    std::vector<std::size_t> widths{16, 32, 32};
    std::vector<std::size_t> strides{4, 2, 1};
    std::size_t kernel = 3;
    PoolingMode pooling = PoolingMode::gap_gmp;
    bool use_bn = true;

    void validate() const {
        if (widths.empty() || widths.size() != strides.size()) {
            throw ConfigError("encoder: widths and strides must be non-empty and of equal length");
        }
        if (kernel % 2 == 0) throw ConfigError("encoder: filter size must be odd, got " + std::to_string(kernel));
        if (strides.back() != 1) throw ConfigError("encoder: the final block must have stride 1");
        for (auto s : strides) {
            if (s == 0) throw ConfigError("encoder: strides must be >= 1");
        }
        for (auto w : widths) {
            if (w == 0) throw ConfigError("encoder: widths must be >= 1");
        }
        if (in_channels == 0 || height == 0 || width == 0) throw ConfigError("encoder: empty input geometry");
    }

    /// Shape [C, H', W'] of the backbone output.
    Shape feature_shape() const {
        std::size_t h = height, w = width;
        const std::size_t pad = kernel / 2;
        for (auto s : strides) {
            h = (h + 2 * pad - kernel) / s + 1;
            w = (w + 2 * pad - kernel) / s + 1;
        }
        return {widths.back(), h, w};
    }

    std::size_t embedding_dim() const {
        return pooling == PoolingMode::gap ? widths.back() : 2 * widths.back();
    }
};

struct ConvBlock {
    Tensor weight;  // [Co, Ci, k, k]
    Tensor bias;    // [Co]
    std::size_t stride = 1;
};

struct BatchNormLayer {
    Tensor gamma;
    Tensor beta;
    ops::BatchNormStats stats;

    static BatchNormLayer init(std::size_t features) {
        return {Tensor::full({features}, 1.0, true), Tensor::zeros({features}, true),
                ops::BatchNormStats::init(features)};
    }
};

struct EncoderParams {
    std::vector<ConvBlock> blocks;
    BatchNormLayer final_bn;
};

struct LinearHead {
    Tensor weight;  // [Out, In]
    Tensor bias;    // [Out]

    std::size_t in_width() const { return weight.dim(1); }
    std::size_t out_width() const { return weight.dim(0); }
};

struct ClassifierHeads {
    LinearHead id_head;
    LinearHead clothing_head;
};

/// Zero-mean uniform fill with half-width sqrt(6 / (fan_in + fan_out)).
inline void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.data) v = rng.uniform(-a, a);
}

inline EncoderParams init_encoder(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    std::size_t cin = cfg.in_channels;
    const std::size_t kk = cfg.kernel * cfg.kernel;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
        const std::size_t cout = cfg.widths[i];
        ConvBlock b{Tensor::zeros({cout, cin, cfg.kernel, cfg.kernel}, true), Tensor::zeros({cout}, true),
                    cfg.strides[i]};
        glorot_uniform(b.weight, cin * kk, cout * kk, rng);
        p.blocks.push_back(std::move(b));
        cin = cout;
    }
    p.final_bn = BatchNormLayer::init(cfg.embedding_dim());
    return p;
}

inline LinearHead init_linear(std::size_t in, std::size_t out, Rng& rng) {
    LinearHead h{Tensor::zeros({out, in}, true), Tensor::zeros({out}, true)};
    glorot_uniform(h.weight, in, out, rng);
    return h;
}

/// Backbone feature map Z for a batch of images [N, 3, H, W] -> [N, C, H', W'].
/// Conv blocks are conv + relu with zero padding k/2.
inline Var forward_backbone(Var images, EncoderParams& params, const EncoderConfig& cfg) {
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width) {
        throw ShapeError("forward_backbone: expected [N," + std::to_string(cfg.in_channels) + "," +
                         std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "], got " + to_string(s));
    }
    if (params.blocks.size() != cfg.widths.size()) {
        throw ShapeError("forward_backbone: parameter blocks do not match the configured depth");
    }
    Tape& tape = *images.tape;
    Var x = images;
    for (auto& b : params.blocks) {
        x = ops::relu(ops::conv2d(x, tape.param(b.weight), tape.param(b.bias), b.stride, cfg.kernel / 2));
    }
    return x;
}

/// Pools a (masked) feature map [N,C,H',W'] into an embedding [N,C] (gap) or
/// [N,2C] (gap_gmp: average then max), followed by batch norm when `bn` is set.
inline Var embed(Var map, PoolingMode pooling, BatchNormLayer* bn, Mode mode) {
    Var pooled = ops::global_avg_pool(map);
    if (pooling == PoolingMode::gap_gmp) pooled = ops::concat({pooled, ops::global_max_pool(map)}, 1);
    if (!bn) return pooled;
    Tape& tape = *map.tape;
    return ops::batch_norm(pooled, tape.param(bn->gamma), tape.param(bn->beta), &bn->stats,
                           {mode == Mode::train, 0.1, 1e-5});
}

/// Class log-probabilities [N, classes].
inline Var classify(Var embedding, LinearHead& head) {
    const auto& s = embedding.shape();
    if (s.empty() || s.back() != head.in_width()) {
        throw ShapeError("classify: embedding " + to_string(s) + " does not match head input width " +
                         std::to_string(head.in_width()));
    }
    Tape& tape = *embedding.tape;
    return ops::log_softmax(ops::linear(embedding, tape.param(head.weight), tape.param(head.bias)));
}

}  // namespace pia
