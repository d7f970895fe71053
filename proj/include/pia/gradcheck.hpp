#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "pia/tape.hpp"
#include "pia/tensor.hpp"

namespace pia {

class NonDeterministicError : public Error {
public:
    using Error::Error;
};

/// Builds a scalar loss on the given tape from parameters captured by reference.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckEntry {
    std::size_t param = 0;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<double> max_rel_error;  // one per parameter
    std::vector<GradCheckEntry> failures;
    double kink_margin = 0.0;  // smallest distance to a relu/abs/max kink seen by the forward
    std::size_t entries = 0;

    bool passed() const { return failures.empty(); }
    double worst() const {
        return max_rel_error.empty() ? 0.0 : *std::max_element(max_rel_error.begin(), max_rel_error.end());
    }
};

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

namespace detail {

inline double evaluate(const LossBuilder& build) {
    Tape tape;
    return build(tape).item();
}

inline bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

}  // namespace detail

/// Compares reverse-mode gradients of `build` against central differences
/// (L(θ+h) − L(θ−h)) / 2h for every entry of every parameter.
inline GradCheckReport check_gradients(const LossBuilder& build, const std::vector<Tensor*>& params, double step = 1e-5,
                                       double tol = 1e-4) {
    if (!(step > 0.0)) throw AttributeError("check_gradients: step must be > 0");

    const double first = detail::evaluate(build);
    const double second = detail::evaluate(build);
    if (!detail::bit_equal(first, second)) {
        throw NonDeterministicError("check_gradients: two identical forward evaluations disagree (" +
                                    std::to_string(first) + " vs " + std::to_string(second) + ")");
    }

    GradCheckReport report;
    std::vector<bool> saved_rg;
    for (auto* p : params) {
        saved_rg.push_back(p->requires_grad);
        p->requires_grad = true;
        p->zero_grad();
    }
    {
        Tape tape;
        Var loss = build(tape);
        report.kink_margin = tape.kink_margin();
        tape.backward(loss);
    }

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = *params[pi];
        const std::vector<double> analytic = p.grad ? *p.grad : std::vector<double>(p.size(), 0.0);
        double worst = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.data[i];
            p.data[i] = orig + step;
            const double up = detail::evaluate(build);
            p.data[i] = orig - step;
            const double down = detail::evaluate(build);
            p.data[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double err = relative_error(analytic[i], numeric);
            worst = std::max(worst, err);
            ++report.entries;
            if (err > tol) report.failures.push_back({pi, i, analytic[i], numeric, err});
        }
        report.max_rel_error.push_back(worst);
    }
    for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi]->requires_grad = saved_rg[pi];
    return report;
}

}  // namespace pia
