#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vband/tensor.hpp"

namespace vband {

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t checked = 0;
};

/// Compares tape gradients of a scalar function with central finite differences.
///
/// Relative error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor).
/// The finite-difference side only ever runs forward evaluations with no tape active.
inline GradCheckResult gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                                 std::vector<Tensor> inputs, double step = 1e-5, double floor = 1e-5) {
    for (auto& t : inputs) {
        t.zero_grad();
        t.set_requires_grad(true);
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = fn(inputs);
        tape.backward(loss);
        for (const auto& t : inputs) analytic.push_back(t.grad());
    }
    GradCheckResult res;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + step;
            const double fp = fn(inputs).item();
            data[i] = orig - step;
            const double fm = fn(inputs).item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[k][i];
            const double abs_err = std::abs(a - numeric);
            const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
            res.max_rel_error = std::max(res.max_rel_error, rel);
            res.max_abs_error = std::max(res.max_abs_error, abs_err);
            ++res.checked;
        }
    }
    for (auto& t : inputs) t.zero_grad();
    return res;
}

}  // namespace vband
