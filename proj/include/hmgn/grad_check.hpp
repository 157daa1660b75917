#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "hmgn/tensor.hpp"

namespace hmgn {

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

/// |a − n| / max(1e-8, |a| + |n|)
inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Compares tape gradients of a scalar function against central differences,
/// element by element over every tensor in `params`.
///
/// `f` must build its computation on the tape it is given and must be a pure
/// function of the parameter values. Parameter data is restored afterwards;
/// parameter gradients are left holding the analytic gradient.
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, std::vector<Tensor> params,
                                  double epsilon = 1e-4, double tolerance = 1e-4) {
    if (!(epsilon > 0)) throw std::invalid_argument("grad_check: epsilon must be positive");

    for (Tensor& p : params) p.zero_grad();
    {
        Tape tape;
        const Tensor loss = f(tape);
        if (!std::isfinite(loss.item())) throw std::domain_error("grad_check: non-finite loss at base point");
        tape.backward(loss);
    }

    auto evaluate = [&]() {
        Tape tape(Tape::Mode::no_grad);
        const double v = f(tape).item();
        if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite loss under perturbation");
        return v;
    };

    GradCheckReport report;
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto data = params[p].data();
        auto grad = params[p].grad();
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double original = data[k];
            data[k] = original + epsilon;
            const double plus = evaluate();
            data[k] = original - epsilon;
            const double minus = evaluate();
            data[k] = original;

            const double numeric = (plus - minus) / (2.0 * epsilon);
            const double err = relative_error(grad[k], numeric);
            ++report.checked;
            if (err > report.max_relative_error || report.checked == 1) {
                report.max_relative_error = err;
                report.worst_param = p;
                report.worst_index = k;
                report.worst_analytic = grad[k];
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_relative_error < tolerance;
    return report;
}

}  // namespace hmgn
