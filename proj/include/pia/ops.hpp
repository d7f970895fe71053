#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pia/tape.hpp"
#include "pia/tensor.hpp"

/// Differentiable primitives. Every function records one node on the tape of
/// its inputs and returns a handle to the result.
namespace pia::ops {

namespace detail {

[[noreturn]] inline void shape_fail(const char* prim, const std::string& what) {
    throw ShapeError(std::string(prim) + ": " + what);
}

inline void expect_same(const char* prim, const Var& a, const Var& b) {
    if (a.shape() != b.shape()) {
        shape_fail(prim, "operand shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
}

inline Tape& tape_of(const char* prim, const Var& v) {
    if (!v.tape) throw TapeError(std::string(prim) + ": unbound variable");
    return *v.tape;
}

inline const Tensor& val(Tape& t, std::size_t id) { return t.node(id).value; }

/// View of a rank-3 [C,H,W] or rank-4 [N,C,H,W] map as N maps.
struct MapDims {
    std::size_t n, c, h, w;
    bool batched;
};

inline MapDims map_dims(const char* prim, const Shape& s) {
    if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
    if (s.size() == 3) return {1, s[0], s[1], s[2], false};
    shape_fail(prim, "expected a [C,H,W] or [N,C,H,W] map, got " + to_string(s));
}

inline Shape map_shape(const MapDims& d, std::size_t c, std::size_t h, std::size_t w) {
    return d.batched ? Shape{d.n, c, h, w} : Shape{c, h, w};
}

/// View of a rank-1 [D] or rank-2 [N,D] matrix.
struct RowDims {
    std::size_t n, d;
    bool batched;
};

inline RowDims row_dims(const char* prim, const Shape& s) {
    if (s.size() == 2) return {s[0], s[1], true};
    if (s.size() == 1) return {1, s[0], false};
    shape_fail(prim, "expected a [D] or [N,D] operand, got " + to_string(s));
}

inline bool is_scalar(const Shape& s) { return s.empty(); }

}  // namespace detail

// --------------------------------------------------------------------------
// Elementwise

inline Var relu(Var x) {
    auto& t = detail::tape_of("relu", x);
    const auto& in = x.value();
    Tensor out(in.shape, in.data);
    double margin = std::numeric_limits<double>::infinity();
    for (auto& v : out.data) {
        margin = std::min(margin, std::abs(v));
        if (v < 0.0) v = 0.0;
    }
    t.note_kink(margin);
    return t.record(Prim::relu, std::move(out), {x}, [](Tape& tp, std::size_t self, const std::vector<double>& g) {
        const auto xi = tp.node(self).inputs[0];
        if (auto* gx = tp.grad_of(xi)) {
            const auto& xv = detail::val(tp, xi).data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xv[i] > 0.0) (*gx)[i] += g[i];
            }
        }
    });
}

inline double sigmoid_scalar(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline Var sigmoid(Var x) {
    auto& t = detail::tape_of("sigmoid", x);
    Tensor out(x.shape(), x.value().data);
    for (auto& v : out.data) v = sigmoid_scalar(v);
    return t.record(Prim::sigmoid, std::move(out), {x}, [](Tape& tp, std::size_t self, const std::vector<double>& g) {
        const auto& n = tp.node(self);
        if (auto* gx = tp.grad_of(n.inputs[0])) {
            const auto& y = tp.node(self).value.data;
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i] * (1.0 - y[i]);
        }
    });
}

inline Var abs(Var x) {
    auto& t = detail::tape_of("abs", x);
    Tensor out(x.shape(), x.value().data);
    double margin = std::numeric_limits<double>::infinity();
    for (auto& v : out.data) {
        margin = std::min(margin, std::abs(v));
        v = std::abs(v);
    }
    t.note_kink(margin);
    return t.record(Prim::abs, std::move(out), {x}, [](Tape& tp, std::size_t self, const std::vector<double>& g) {
        const auto xi = tp.node(self).inputs[0];
        if (auto* gx = tp.grad_of(xi)) {
            const auto& xv = detail::val(tp, xi).data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (xv[i] > 0.0) (*gx)[i] += g[i];
                else if (xv[i] < 0.0) (*gx)[i] -= g[i];
            }
        }
    });
}

inline Var add(Var a, Var b) {
    detail::expect_same("add", a, b);
    auto& t = detail::tape_of("add", a);
    Tensor out(a.shape(), a.value().data);
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return t.record(Prim::add, std::move(out), {a, b}, [](Tape& tp, std::size_t self, const std::vector<double>& g) {
        const auto ins = tp.node(self).inputs;
        for (auto in : ins) {
            if (auto* gi = tp.grad_of(in)) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
            }
        }
    });
}

inline Var sub(Var a, Var b) {
    detail::expect_same("sub", a, b);
    auto& t = detail::tape_of("sub", a);
    Tensor out(a.shape(), a.value().data);
    const auto& bv = b.value().data;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return t.record(Prim::sub, std::move(out), {a, b}, [](Tape& tp, std::size_t self, const std::vector<double>& g) {
        const auto ins = tp.node(self).inputs;
        if (auto* ga = tp.grad_of(ins[0])) {
            for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        if (auto* gb = tp.grad_of(ins[1])) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        }
    });
}

/// Elementwise product. Either operand may be a scalar (shape []), in which
/// case it multiplies every entry of the other.
inline Var mul(Var a, Var b) {
    auto& t = detail::tape_of("mul", a);
    const bool a_scalar = detail::is_scalar(a.shape()) && !detail::is_scalar(b.shape());
    const bool b_scalar = detail::is_scalar(b.shape()) && !detail::is_scalar(a.shape());
    if (!a_scalar && !b_scalar) detail::expect_same("mul", a, b);
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    Tensor out = Tensor::zeros(a_scalar ? b.shape() : a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[a_scalar ? 0 : i] * bv[b_scalar ? 0 : i];
    }
    return t.record(Prim::mul, std::move(out), {a, b},
                    [a_scalar, b_scalar](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        const auto ins = tp.node(self).inputs;
                        const auto& x = detail::val(tp, ins[0]).data;
                        const auto& y = detail::val(tp, ins[1]).data;
                        if (auto* ga = tp.grad_of(ins[0])) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                                (*ga)[a_scalar ? 0 : i] += g[i] * y[b_scalar ? 0 : i];
                            }
                        }
                        if (auto* gb = tp.grad_of(ins[1])) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                                (*gb)[b_scalar ? 0 : i] += g[i] * x[a_scalar ? 0 : i];
                            }
                        }
                    });
}

inline Var scale(Var x, double c) {
    auto& t = detail::tape_of("scale", x);
    Tensor out(x.shape(), x.value().data);
    for (auto& v : out.data) v *= c;
    return t.record(Prim::scale, std::move(out), {x}, [c](Tape& tp, std::size_t self, const std::vector<double>& g) {
        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += c * g[i];
        }
    });
}

inline Var add_scalar(Var x, double c) {
    auto& t = detail::tape_of("add_scalar", x);
    Tensor out(x.shape(), x.value().data);
    for (auto& v : out.data) v += c;
    return t.record(Prim::add_scalar, std::move(out), {x}, [](Tape& tp, std::size_t self, const std::vector<double>& g) {
        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
        }
    });
}

// --------------------------------------------------------------------------
// Convolution

/// 2-D cross-correlation with zero padding. x: [N,Ci,H,W] or [Ci,H,W];
/// w: [Co,Ci,KH,KW]; b: [Co].
inline Var conv2d(Var x, Var w, Var b, std::size_t stride = 1, std::size_t padding = 0) {
    constexpr const char* P = "conv2d";
    auto& t = detail::tape_of(P, x);
    if (stride == 0) throw AttributeError("conv2d: stride must be >= 1");
    const auto d = detail::map_dims(P, x.shape());
    const auto& ws = w.shape();
    if (ws.size() != 4) detail::shape_fail(P, "filter must be [Co,Ci,KH,KW], got " + to_string(ws));
    if (ws[1] != d.c) {
        detail::shape_fail(P, "filter expects " + std::to_string(ws[1]) + " input channels, input has " +
                                  std::to_string(d.c));
    }
    if (b.shape() != Shape{ws[0]}) {
        detail::shape_fail(P, "bias must be [" + std::to_string(ws[0]) + "], got " + to_string(b.shape()));
    }
    const std::size_t co = ws[0], kh = ws[2], kw = ws[3];
    if (d.h + 2 * padding < kh || d.w + 2 * padding < kw) {
        detail::shape_fail(P, "kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " exceeds padded input " +
                                  std::to_string(d.h + 2 * padding) + "x" + std::to_string(d.w + 2 * padding));
    }
    const std::size_t ho = (d.h + 2 * padding - kh) / stride + 1;
    const std::size_t wo = (d.w + 2 * padding - kw) / stride + 1;
    const std::size_t K = d.c * kh * kw, Pn = ho * wo;
    const bool keep_cols = w.requires_grad();

    const auto& xv = x.value().data;
    const auto& wv = w.value().data;
    const auto& bv = b.value().data;
    Tensor out = Tensor::zeros(detail::map_shape(d, co, ho, wo));
    auto cols = std::make_shared<std::vector<double>>(keep_cols ? d.n * K * Pn : K * Pn);

    const auto im2col = [&](std::size_t n, double* col) {
        const double* img = xv.data() + n * d.c * d.h * d.w;
        for (std::size_t ci = 0; ci < d.c; ++ci) {
            for (std::size_t a = 0; a < kh; ++a) {
                for (std::size_t bb = 0; bb < kw; ++bb) {
                    double* row = col + ((ci * kh + a) * kw + bb) * Pn;
                    for (std::size_t oh = 0; oh < ho; ++oh) {
                        const long ih = static_cast<long>(oh * stride + a) - static_cast<long>(padding);
                        for (std::size_t ow = 0; ow < wo; ++ow) {
                            const long iw = static_cast<long>(ow * stride + bb) - static_cast<long>(padding);
                            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(d.h) &&
                                                iw < static_cast<long>(d.w);
                            row[oh * wo + ow] = inside ? img[(ci * d.h + ih) * d.w + iw] : 0.0;
                        }
                    }
                }
            }
        }
    };

    for (std::size_t n = 0; n < d.n; ++n) {
        double* col = cols->data() + (keep_cols ? n * K * Pn : 0);
        im2col(n, col);
        double* o = out.data.data() + n * co * Pn;
        for (std::size_t c = 0; c < co; ++c) {
            double* orow = o + c * Pn;
            std::fill(orow, orow + Pn, bv[c]);
            const double* wrow = wv.data() + c * K;
            for (std::size_t k = 0; k < K; ++k) {
                const double wk = wrow[k];
                const double* crow = col + k * Pn;
                for (std::size_t p = 0; p < Pn; ++p) orow[p] += wk * crow[p];
            }
        }
    }
    if (!keep_cols) cols.reset();

    const detail::MapDims dims = d;
    return t.record(
        Prim::conv2d, std::move(out), {x, w, b},
        [dims, co, kh, kw, ho, wo, stride, padding, cols](Tape& tp, std::size_t self, const std::vector<double>& g) {
            const auto ins = tp.node(self).inputs;
            const std::size_t K = dims.c * kh * kw, Pn = ho * wo;
            const auto& wv = detail::val(tp, ins[1]).data;
            if (auto* gb = tp.grad_of(ins[2])) {
                for (std::size_t n = 0; n < dims.n; ++n) {
                    for (std::size_t c = 0; c < co; ++c) {
                        const double* grow = g.data() + (n * co + c) * Pn;
                        double s = 0.0;
                        for (std::size_t p = 0; p < Pn; ++p) s += grow[p];
                        (*gb)[c] += s;
                    }
                }
            }
            if (auto* gw = tp.grad_of(ins[1])) {
                std::vector<double> colT(Pn * K);
                for (std::size_t n = 0; n < dims.n; ++n) {
                    const double* col = cols->data() + n * K * Pn;
                    for (std::size_t k = 0; k < K; ++k) {
                        for (std::size_t p = 0; p < Pn; ++p) colT[p * K + k] = col[k * Pn + p];
                    }
                    for (std::size_t c = 0; c < co; ++c) {
                        const double* grow = g.data() + (n * co + c) * Pn;
                        double* gwrow = gw->data() + c * K;
                        for (std::size_t p = 0; p < Pn; ++p) {
                            const double gp = grow[p];
                            const double* ct = colT.data() + p * K;
                            for (std::size_t k = 0; k < K; ++k) gwrow[k] += gp * ct[k];
                        }
                    }
                }
            }
            if (auto* gx = tp.grad_of(ins[0])) {
                std::vector<double> dcol(K * Pn);
                for (std::size_t n = 0; n < dims.n; ++n) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    for (std::size_t c = 0; c < co; ++c) {
                        const double* grow = g.data() + (n * co + c) * Pn;
                        const double* wrow = wv.data() + c * K;
                        for (std::size_t k = 0; k < K; ++k) {
                            const double wk = wrow[k];
                            double* drow = dcol.data() + k * Pn;
                            for (std::size_t p = 0; p < Pn; ++p) drow[p] += wk * grow[p];
                        }
                    }
                    double* img = gx->data() + n * dims.c * dims.h * dims.w;
                    for (std::size_t ci = 0; ci < dims.c; ++ci) {
                        for (std::size_t a = 0; a < kh; ++a) {
                            for (std::size_t bb = 0; bb < kw; ++bb) {
                                const double* row = dcol.data() + ((ci * kh + a) * kw + bb) * Pn;
                                for (std::size_t oh = 0; oh < ho; ++oh) {
                                    const long ih = static_cast<long>(oh * stride + a) - static_cast<long>(padding);
                                    if (ih < 0 || ih >= static_cast<long>(dims.h)) continue;
                                    for (std::size_t ow = 0; ow < wo; ++ow) {
                                        const long iw =
                                            static_cast<long>(ow * stride + bb) - static_cast<long>(padding);
                                        if (iw < 0 || iw >= static_cast<long>(dims.w)) continue;
                                        img[(ci * dims.h + ih) * dims.w + iw] += row[oh * wo + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// --------------------------------------------------------------------------
// Pooling and reshaping

/// Max over the channel axis; [N,C,H,W] -> [N,1,H,W]. Ties route the gradient
/// to the lowest channel index.
inline Var channel_max_pool(Var x) {
    constexpr const char* P = "channel_max_pool";
    auto& t = detail::tape_of(P, x);
    const auto d = detail::map_dims(P, x.shape());
    const auto& xv = x.value().data;
    const std::size_t hw = d.h * d.w;
    Tensor out = Tensor::zeros(detail::map_shape(d, 1, d.h, d.w));
    std::vector<std::size_t> arg(d.n * hw);
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t p = 0; p < hw; ++p) {
            std::size_t best = 0;
            double top = xv[n * d.c * hw + p];
            double second = -std::numeric_limits<double>::infinity();
            for (std::size_t c = 1; c < d.c; ++c) {
                const double v = xv[(n * d.c + c) * hw + p];
                if (v > top) {
                    second = top;
                    top = v;
                    best = c;
                } else if (v > second) {
                    second = v;
                }
            }
            // Ties among exact zeros come from clamped relu units; the relu
            // margin already covers them.
            if (d.c > 1 && !(top == 0.0 && second == 0.0)) margin = std::min(margin, top - second);
            out[n * hw + p] = top;
            arg[n * hw + p] = best;
        }
    }
    t.note_kink(margin);
    return t.record(Prim::channel_max_pool, std::move(out), {x},
                    [d, hw, arg = std::move(arg)](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                            for (std::size_t n = 0; n < d.n; ++n) {
                                for (std::size_t p = 0; p < hw; ++p) {
                                    (*gx)[(n * d.c + arg[n * hw + p]) * hw + p] += g[n * hw + p];
                                }
                            }
                        }
                    });
}

/// Mean over the channel axis; [N,C,H,W] -> [N,1,H,W].
inline Var channel_avg_pool(Var x) {
    constexpr const char* P = "channel_avg_pool";
    auto& t = detail::tape_of(P, x);
    const auto d = detail::map_dims(P, x.shape());
    const auto& xv = x.value().data;
    const std::size_t hw = d.h * d.w;
    Tensor out = Tensor::zeros(detail::map_shape(d, 1, d.h, d.w));
    const double inv = 1.0 / static_cast<double>(d.c);
    for (std::size_t n = 0; n < d.n; ++n) {
        for (std::size_t c = 0; c < d.c; ++c) {
            for (std::size_t p = 0; p < hw; ++p) out[n * hw + p] += xv[(n * d.c + c) * hw + p];
        }
        for (std::size_t p = 0; p < hw; ++p) out[n * hw + p] *= inv;
    }
    return t.record(Prim::channel_avg_pool, std::move(out), {x},
                    [d, hw, inv](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                            for (std::size_t n = 0; n < d.n; ++n) {
                                for (std::size_t c = 0; c < d.c; ++c) {
                                    for (std::size_t p = 0; p < hw; ++p) {
                                        (*gx)[(n * d.c + c) * hw + p] += inv * g[n * hw + p];
                                    }
                                }
                            }
                        }
                    });
}

/// Concatenation along `axis`; all other dimensions must agree.
inline Var concat(const std::vector<Var>& xs, std::size_t axis) {
    constexpr const char* P = "concat";
    if (xs.empty()) throw AttributeError("concat: no inputs");
    auto& t = detail::tape_of(P, xs[0]);
    const Shape& s0 = xs[0].shape();
    if (axis >= s0.size()) {
        throw AttributeError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(s0.size()));
    }
    Shape out_shape = s0;
    out_shape[axis] = 0;
    for (const auto& v : xs) {
        const auto& s = v.shape();
        if (s.size() != s0.size()) detail::shape_fail(P, "rank mismatch " + to_string(s) + " vs " + to_string(s0));
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != s0[i]) {
                detail::shape_fail(P, "dimension " + std::to_string(i) + " differs: " + to_string(s) + " vs " +
                                          to_string(s0));
            }
        }
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    const std::size_t out_row = out_shape[axis] * inner;
    Tensor out = Tensor::zeros(out_shape);
    std::vector<std::size_t> widths;
    std::size_t offset = 0;
    for (const auto& v : xs) {
        const std::size_t wdt = v.shape()[axis] * inner;
        const auto& vv = v.value().data;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(vv.data() + o * wdt, wdt, out.data.data() + o * out_row + offset);
        }
        widths.push_back(wdt);
        offset += wdt;
    }
    return t.record(Prim::concat, std::move(out), xs,
                    [outer, out_row, widths](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        const auto ins = tp.node(self).inputs;
                        std::size_t off = 0;
                        for (std::size_t j = 0; j < ins.size(); ++j) {
                            if (auto* gi = tp.grad_of(ins[j])) {
                                for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t k = 0; k < widths[j]; ++k) {
                                        (*gi)[o * widths[j] + k] += g[o * out_row + off + k];
                                    }
                                }
                            }
                            off += widths[j];
                        }
                    });
}

/// Spatial mean; [N,C,H,W] -> [N,C] (or [C,H,W] -> [C]).
inline Var global_avg_pool(Var x) {
    constexpr const char* P = "global_avg_pool";
    auto& t = detail::tape_of(P, x);
    const auto d = detail::map_dims(P, x.shape());
    const auto& xv = x.value().data;
    const std::size_t hw = d.h * d.w, rows = d.n * d.c;
    Tensor out = Tensor::zeros(d.batched ? Shape{d.n, d.c} : Shape{d.c});
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t p = 0; p < hw; ++p) s += xv[r * hw + p];
        out[r] = s * inv;
    }
    return t.record(Prim::global_avg_pool, std::move(out), {x},
                    [rows, hw, inv](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                            for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t p = 0; p < hw; ++p) (*gx)[r * hw + p] += g[r] * inv;
                            }
                        }
                    });
}

/// Spatial max; [N,C,H,W] -> [N,C]. Ties route to the lowest flat index.
inline Var global_max_pool(Var x) {
    constexpr const char* P = "global_max_pool";
    auto& t = detail::tape_of(P, x);
    const auto d = detail::map_dims(P, x.shape());
    const auto& xv = x.value().data;
    const std::size_t hw = d.h * d.w, rows = d.n * d.c;
    Tensor out = Tensor::zeros(d.batched ? Shape{d.n, d.c} : Shape{d.c});
    std::vector<std::size_t> arg(rows);
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * hw;
        std::size_t best = 0;
        double top = row[0];
        double second = -std::numeric_limits<double>::infinity();
        for (std::size_t p = 1; p < hw; ++p) {
            if (row[p] > top) {
                second = top;
                top = row[p];
                best = p;
            } else if (row[p] > second) {
                second = row[p];
            }
        }
        if (hw > 1 && !(top == 0.0 && second == 0.0)) margin = std::min(margin, top - second);
        out[r] = top;
        arg[r] = best;
    }
    t.note_kink(margin);
    return t.record(Prim::global_max_pool, std::move(out), {x},
                    [hw, arg = std::move(arg)](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                            for (std::size_t r = 0; r < arg.size(); ++r) (*gx)[r * hw + arg[r]] += g[r];
                        }
                    });
}

/// Multiplies a [N,1,H,W] spatial mask into every channel of a [N,C,H,W] map.
inline Var spatial_mask(Var mask, Var z) {
    constexpr const char* P = "spatial_mask";
    auto& t = detail::tape_of(P, z);
    const auto dz = detail::map_dims(P, z.shape());
    const auto dm = detail::map_dims(P, mask.shape());
    if (dm.c != 1 || dm.n != dz.n || dm.h != dz.h || dm.w != dz.w || dm.batched != dz.batched) {
        detail::shape_fail(P, "mask " + to_string(mask.shape()) + " does not broadcast over map " +
                                  to_string(z.shape()));
    }
    const std::size_t hw = dz.h * dz.w;
    const auto& mv = mask.value().data;
    Tensor out(z.shape(), z.value().data);
    for (std::size_t n = 0; n < dz.n; ++n) {
        for (std::size_t c = 0; c < dz.c; ++c) {
            double* row = out.data.data() + (n * dz.c + c) * hw;
            const double* m = mv.data() + n * hw;
            for (std::size_t p = 0; p < hw; ++p) row[p] *= m[p];
        }
    }
    return t.record(Prim::spatial_mask, std::move(out), {mask, z},
                    [dz, hw](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        const auto ins = tp.node(self).inputs;
                        const auto& mv = detail::val(tp, ins[0]).data;
                        const auto& zv = detail::val(tp, ins[1]).data;
                        auto* gm = tp.grad_of(ins[0]);
                        auto* gz = tp.grad_of(ins[1]);
                        for (std::size_t n = 0; n < dz.n; ++n) {
                            for (std::size_t c = 0; c < dz.c; ++c) {
                                const std::size_t base = (n * dz.c + c) * hw;
                                for (std::size_t p = 0; p < hw; ++p) {
                                    if (gm) (*gm)[n * hw + p] += g[base + p] * zv[base + p];
                                    if (gz) (*gz)[base + p] += g[base + p] * mv[n * hw + p];
                                }
                            }
                        }
                    });
}

/// Selects rows of a [N,D] matrix.
inline Var gather_rows(Var x, std::vector<std::size_t> rows) {
    constexpr const char* P = "gather_rows";
    auto& t = detail::tape_of(P, x);
    const auto& s = x.shape();
    if (s.size() != 2) detail::shape_fail(P, "expected [N,D], got " + to_string(s));
    if (rows.empty()) throw AttributeError("gather_rows: empty row selection");
    const std::size_t dcols = s[1];
    Tensor out = Tensor::zeros({rows.size(), dcols});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= s[0]) {
            throw AttributeError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " + to_string(s));
        }
        std::copy_n(x.value().data.data() + rows[i] * dcols, dcols, out.data.data() + i * dcols);
    }
    return t.record(Prim::gather_rows, std::move(out), {x},
                    [rows = std::move(rows), dcols](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                            for (std::size_t i = 0; i < rows.size(); ++i) {
                                for (std::size_t k = 0; k < dcols; ++k) (*gx)[rows[i] * dcols + k] += g[i * dcols + k];
                            }
                        }
                    });
}

// --------------------------------------------------------------------------
// Dense layers

/// y = x W^T + b; x: [N,In] or [In], W: [Out,In], b: [Out].
inline Var linear(Var x, Var w, Var b) {
    constexpr const char* P = "linear";
    auto& t = detail::tape_of(P, x);
    const auto r = detail::row_dims(P, x.shape());
    const auto& ws = w.shape();
    if (ws.size() != 2 || ws[1] != r.d) {
        detail::shape_fail(P, "weight " + to_string(ws) + " does not accept input width " + std::to_string(r.d));
    }
    const std::size_t outw = ws[0];
    if (b.shape() != Shape{outw}) {
        detail::shape_fail(P, "bias must be [" + std::to_string(outw) + "], got " + to_string(b.shape()));
    }
    const auto& xv = x.value().data;
    const auto& wv = w.value().data;
    const auto& bv = b.value().data;
    Tensor out = Tensor::zeros(r.batched ? Shape{r.n, outw} : Shape{outw});
    for (std::size_t n = 0; n < r.n; ++n) {
        for (std::size_t o = 0; o < outw; ++o) {
            double s = bv[o];
            for (std::size_t k = 0; k < r.d; ++k) s += xv[n * r.d + k] * wv[o * r.d + k];
            out[n * outw + o] = s;
        }
    }
    return t.record(Prim::linear, std::move(out), {x, w, b},
                    [r, outw](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        const auto ins = tp.node(self).inputs;
                        const auto& xv = detail::val(tp, ins[0]).data;
                        const auto& wv = detail::val(tp, ins[1]).data;
                        auto* gx = tp.grad_of(ins[0]);
                        auto* gw = tp.grad_of(ins[1]);
                        auto* gb = tp.grad_of(ins[2]);
                        for (std::size_t n = 0; n < r.n; ++n) {
                            for (std::size_t o = 0; o < outw; ++o) {
                                const double go = g[n * outw + o];
                                if (gb) (*gb)[o] += go;
                                if (gw) {
                                    for (std::size_t k = 0; k < r.d; ++k) (*gw)[o * r.d + k] += go * xv[n * r.d + k];
                                }
                                if (gx) {
                                    for (std::size_t k = 0; k < r.d; ++k) (*gx)[n * r.d + k] += go * wv[o * r.d + k];
                                }
                            }
                        }
                    });
}

/// Running statistics of a batch-norm layer.
struct BatchNormStats {
    Tensor running_mean;
    Tensor running_var;

    static BatchNormStats init(std::size_t features) {
        return {Tensor::zeros({features}), Tensor::full({features}, 1.0)};
    }
};

struct BatchNormAttrs {
    bool training = true;
    double momentum = 0.1;
    double eps = 1e-5;
};

/// Per-feature batch normalization of x: [N,F]. Training mode normalizes with
/// the biased batch variance and moves `stats` toward the batch statistics
/// (stats may be null); eval mode normalizes with `stats`.
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats* stats, BatchNormAttrs attrs = {}) {
    constexpr const char* P = "batch_norm";
    auto& t = detail::tape_of(P, x);
    const auto& s = x.shape();
    if (s.size() != 2) detail::shape_fail(P, "expected [N,F], got " + to_string(s));
    const std::size_t n = s[0], f = s[1];
    if (gamma.shape() != Shape{f} || beta.shape() != Shape{f}) {
        detail::shape_fail(P, "scale/shift must be [" + std::to_string(f) + "], got " + to_string(gamma.shape()) +
                                  " and " + to_string(beta.shape()));
    }
    if (attrs.eps < 0.0) throw AttributeError("batch_norm: eps must be >= 0");
    if (attrs.momentum < 0.0 || attrs.momentum > 1.0) throw AttributeError("batch_norm: momentum must be in [0,1]");
    if (attrs.training && n < 2) detail::shape_fail(P, "training mode needs a batch of at least 2, got " + std::to_string(n));
    if (!attrs.training && !stats) throw AttributeError("batch_norm: eval mode requires running statistics");
    if (stats && (stats->running_mean.shape != Shape{f} || stats->running_var.shape != Shape{f})) {
        detail::shape_fail(P, "running statistics do not match feature count " + std::to_string(f));
    }

    const auto& xv = x.value().data;
    const auto& gv = gamma.value().data;
    const auto& bv = beta.value().data;
    std::vector<double> mean(f, 0.0), inv_std(f, 0.0);
    if (attrs.training) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < f; ++j) mean[j] += xv[i * f + j];
        }
        for (auto& m : mean) m /= static_cast<double>(n);
        std::vector<double> var(f, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < f; ++j) {
                const double dlt = xv[i * f + j] - mean[j];
                var[j] += dlt * dlt;
            }
        }
        for (std::size_t j = 0; j < f; ++j) {
            var[j] /= static_cast<double>(n);
            inv_std[j] = 1.0 / std::sqrt(var[j] + attrs.eps);
            if (stats) {
                auto& rm = stats->running_mean.data[j];
                auto& rv = stats->running_var.data[j];
                rm = (1.0 - attrs.momentum) * rm + attrs.momentum * mean[j];
                rv = (1.0 - attrs.momentum) * rv + attrs.momentum * var[j];
            }
        }
    } else {
        for (std::size_t j = 0; j < f; ++j) {
            mean[j] = stats->running_mean.data[j];
            inv_std[j] = 1.0 / std::sqrt(stats->running_var.data[j] + attrs.eps);
        }
    }
    if (attrs.training) {
        for (std::size_t j = 0; j < f; ++j) {
            if (!std::isfinite(inv_std[j])) {
                throw AttributeError("batch_norm: zero batch variance with eps = 0 in feature " + std::to_string(j));
            }
        }
    }

    Tensor out = Tensor::zeros(s);
    std::vector<double> xhat(n * f);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < f; ++j) {
            xhat[i * f + j] = (xv[i * f + j] - mean[j]) * inv_std[j];
            out[i * f + j] = gv[j] * xhat[i * f + j] + bv[j];
        }
    }
    const bool training = attrs.training;
    return t.record(
        Prim::batch_norm, std::move(out), {x, gamma, beta},
        [n, f, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](Tape& tp, std::size_t self,
                                                                              const std::vector<double>& g) {
            const auto ins = tp.node(self).inputs;
            const auto& gv = detail::val(tp, ins[1]).data;
            auto* gx = tp.grad_of(ins[0]);
            auto* gg = tp.grad_of(ins[1]);
            auto* gb = tp.grad_of(ins[2]);
            for (std::size_t j = 0; j < f; ++j) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    sum_g += g[i * f + j];
                    sum_gx += g[i * f + j] * xhat[i * f + j];
                }
                if (gg) (*gg)[j] += sum_gx;
                if (gb) (*gb)[j] += sum_g;
                if (!gx) continue;
                const double k = gv[j] * inv_std[j];
                if (training) {
                    const double mg = sum_g / static_cast<double>(n);
                    const double mgx = sum_gx / static_cast<double>(n);
                    for (std::size_t i = 0; i < n; ++i) {
                        (*gx)[i * f + j] += k * (g[i * f + j] - mg - xhat[i * f + j] * mgx);
                    }
                } else {
                    for (std::size_t i = 0; i < n; ++i) (*gx)[i * f + j] += k * g[i * f + j];
                }
            }
        });
}

/// Log-softmax over the last axis of [N,K] or [K].
inline Var log_softmax(Var x) {
    constexpr const char* P = "log_softmax";
    auto& t = detail::tape_of(P, x);
    const auto r = detail::row_dims(P, x.shape());
    Tensor out(x.shape(), x.value().data);
    for (std::size_t i = 0; i < r.n; ++i) {
        double* row = out.data.data() + i * r.d;
        const double mx = *std::max_element(row, row + r.d);
        double s = 0.0;
        for (std::size_t k = 0; k < r.d; ++k) s += std::exp(row[k] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t k = 0; k < r.d; ++k) row[k] -= lse;
    }
    return t.record(Prim::log_softmax, std::move(out), {x}, [r](Tape& tp, std::size_t self, const std::vector<double>& g) {
        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
            const auto& y = tp.node(self).value.data;
            for (std::size_t i = 0; i < r.n; ++i) {
                double sg = 0.0;
                for (std::size_t k = 0; k < r.d; ++k) sg += g[i * r.d + k];
                for (std::size_t k = 0; k < r.d; ++k) {
                    (*gx)[i * r.d + k] += g[i * r.d + k] - std::exp(y[i * r.d + k]) * sg;
                }
            }
        }
    });
}

inline constexpr double kNormFloor = 1e-12;

/// x / max(||x||, 1e-12) over the last axis of [N,D] or [D].
inline Var l2_normalize(Var x) {
    constexpr const char* P = "l2_normalize";
    auto& t = detail::tape_of(P, x);
    const auto r = detail::row_dims(P, x.shape());
    Tensor out(x.shape(), x.value().data);
    std::vector<double> norms(r.n);
    for (std::size_t i = 0; i < r.n; ++i) {
        double* row = out.data.data() + i * r.d;
        double s = 0.0;
        for (std::size_t k = 0; k < r.d; ++k) s += row[k] * row[k];
        norms[i] = std::sqrt(s);
        const double dnm = std::max(norms[i], kNormFloor);
        for (std::size_t k = 0; k < r.d; ++k) row[k] /= dnm;
    }
    return t.record(Prim::l2_normalize, std::move(out), {x},
                    [r, norms = std::move(norms)](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                            const auto& y = tp.node(self).value.data;
                            for (std::size_t i = 0; i < r.n; ++i) {
                                const double* yr = y.data() + i * r.d;
                                const double* gr = g.data() + i * r.d;
                                if (norms[i] > kNormFloor) {
                                    double yg = 0.0;
                                    for (std::size_t k = 0; k < r.d; ++k) yg += yr[k] * gr[k];
                                    for (std::size_t k = 0; k < r.d; ++k) {
                                        (*gx)[i * r.d + k] += (gr[k] - yr[k] * yg) / norms[i];
                                    }
                                } else {
                                    for (std::size_t k = 0; k < r.d; ++k) (*gx)[i * r.d + k] += gr[k] / kNormFloor;
                                }
                            }
                        }
                    });
}

/// Inner product over the last axis: [D]·[D] -> [], [N,D]·[N,D] -> [N].
inline Var dot(Var a, Var b) {
    constexpr const char* P = "dot";
    detail::expect_same(P, a, b);
    auto& t = detail::tape_of(P, a);
    const auto r = detail::row_dims(P, a.shape());
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    Tensor out = Tensor::zeros(r.batched ? Shape{r.n} : Shape{});
    for (std::size_t i = 0; i < r.n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < r.d; ++k) s += av[i * r.d + k] * bv[i * r.d + k];
        out[i] = s;
    }
    return t.record(Prim::dot, std::move(out), {a, b}, [r](Tape& tp, std::size_t self, const std::vector<double>& g) {
        const auto ins = tp.node(self).inputs;
        const auto& av = detail::val(tp, ins[0]).data;
        const auto& bv = detail::val(tp, ins[1]).data;
        auto* ga = tp.grad_of(ins[0]);
        auto* gb = tp.grad_of(ins[1]);
        for (std::size_t i = 0; i < r.n; ++i) {
            for (std::size_t k = 0; k < r.d; ++k) {
                if (ga) (*ga)[i * r.d + k] += g[i] * bv[i * r.d + k];
                if (gb) (*gb)[i * r.d + k] += g[i] * av[i * r.d + k];
            }
        }
    });
}

namespace detail {

inline Var reduce(const char* prim, Prim kind, Var x, std::optional<std::size_t> axis, bool average) {
    auto& t = tape_of(prim, x);
    const auto& s = x.shape();
    const std::size_t total = x.value().size();
    if (!axis) {
        double acc = 0.0;
        for (double v : x.value().data) acc += v;
        const double c = average ? 1.0 / static_cast<double>(total) : 1.0;
        return t.record(kind, Tensor::scalar(acc * c), {x}, [c](Tape& tp, std::size_t self, const std::vector<double>& g) {
            if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                for (auto& v : *gx) v += g[0] * c;
            }
        });
    }
    if (*axis >= s.size()) {
        throw AttributeError(std::string(prim) + ": axis " + std::to_string(*axis) + " out of range for shape " +
                             to_string(s));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < *axis; ++i) outer *= s[i];
    for (std::size_t i = *axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[*axis];
    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != *axis) os.push_back(s[i]);
    }
    Tensor out = Tensor::zeros(os);
    const auto& xv = x.value().data;
    const double c = average ? 1.0 / static_cast<double>(len) : 1.0;
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * len + l) * inner + i];
        }
    }
    for (auto& v : out.data) v *= c;
    return t.record(kind, std::move(out), {x},
                    [outer, inner, len, c](Tape& tp, std::size_t self, const std::vector<double>& g) {
                        if (auto* gx = tp.grad_of(tp.node(self).inputs[0])) {
                            for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t l = 0; l < len; ++l) {
                                    for (std::size_t i = 0; i < inner; ++i) {
                                        (*gx)[(o * len + l) * inner + i] += g[o * inner + i] * c;
                                    }
                                }
                            }
                        }
                    });
}

}  // namespace detail

/// Mean over one axis, or over every entry (yielding a scalar) when axis is empty.
inline Var mean(Var x, std::optional<std::size_t> axis = std::nullopt) {
    return detail::reduce("mean", Prim::mean, x, axis, true);
}

inline Var sum(Var x, std::optional<std::size_t> axis = std::nullopt) {
    return detail::reduce("sum", Prim::sum, x, axis, false);
}

}  // namespace pia::ops
