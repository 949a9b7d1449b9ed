#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "ferformer/errors.hpp"
#include "ferformer/ops.hpp"
#include "ferformer/tape.hpp"
#include "ferformer/tensor.hpp"

namespace ferformer {

template <typename T>
struct GradCheckReport {
    T max_rel_err = T(0);
    bool pass = false;
    std::size_t checked = 0;
};

// Compares the taped gradient of a scalar-valued function against central
// differences, element by element:
//   numeric_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)
//   rel_err   = |a - n| / max(|a|, |n|, 1e-8)
// f may read x through shared storage and ignore its argument; grad_check
// perturbs x's buffer in place and restores it. `subset` limits which
// elements are probed (all when null).
template <typename T>
GradCheckReport<T> grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x,
                              T eps, T tol, const std::vector<std::size_t>* subset = nullptr) {
    if (!(eps > T(0)) || eps > T(1e-2)) {
        throw UsageError("grad_check: eps must lie in (0, 1e-2]");
    }

    auto eval = [&]() -> T {
        Tensor<T> y = f(x);
        if (y.numel() != 1) {
            throw UsageError("grad_check: f must return a scalar, got " + shape_str(y.shape()));
        }
        return y.item();
    };

    const T probe1 = eval();
    const T probe2 = eval();
    if (probe1 != probe2) {
        throw DeterminismError("grad_check: two forward evaluations differ (" +
                               std::to_string(probe1) + " vs " + std::to_string(probe2) + ")");
    }

    // analytic pass
    const bool old_flag = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    std::vector<T> analytic;
    {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> y = f(x);
        if (y.numel() != 1) {
            throw UsageError("grad_check: f must return a scalar, got " + shape_str(y.shape()));
        }
        tape.backward(y);
        analytic = x.has_grad() ? x.grad() : std::vector<T>(x.numel(), T(0));
    }
    x.zero_grad();
    x.set_requires_grad(old_flag);

    std::vector<std::size_t> all;
    if (!subset) {
        all.resize(x.numel());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    }
    const std::vector<std::size_t>& idx = subset ? *subset : all;

    GradCheckReport<T> report;
    report.checked = idx.size();
    for (std::size_t i : idx) {
        const T saved = x[i];
        x[i] = saved + eps;
        const T up = eval();
        x[i] = saved - eps;
        const T down = eval();
        x[i] = saved;
        const T numeric = (up - down) / (T(2) * eps);
        const T a = analytic[i];
        const T denom = std::max({std::abs(a), std::abs(numeric), T(1e-8)});
        report.max_rel_err = std::max(report.max_rel_err, std::abs(a - numeric) / denom);
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

} // namespace ferformer
