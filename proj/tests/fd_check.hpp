#pragma once

// Central finite-difference gradient checking used across the test suites.

#include <cmath>
#include <functional>

#include "forge/nn.hpp"
#include "forge/tensor.hpp"

namespace forge::testutil {

// Relative error with an absolute floor so near-zero gradients compare sanely.
inline double rel_err(double a, double b, double floor = 1e-10) {
    double denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

// f evaluates the scalar objective from current tensor contents.
inline double fd_grad(Tensor& t, int64_t idx, const std::function<double()>& f,
                      double eps = 1e-4) {
    double saved = t[idx];
    t[idx] = saved + eps;
    double up = f();
    t[idx] = saved - eps;
    double down = f();
    t[idx] = saved;
    return (up - down) / (2.0 * eps);
}

// Checks a handful of coordinates of one named parameter against central
// differences. `loss_and_grads` must zero grads, run forward+backward, and
// leave gradients in the store. `loss_only` must be side-effect free.
struct GradCheckResult {
    int checked = 0;
    int failed = 0;
    double worst = 0.0;
};

inline GradCheckResult check_param_grads(nn::ParamStore& store, const std::string& name,
                                         const std::vector<int64_t>& indices,
                                         const std::function<void()>& loss_and_grads,
                                         const std::function<double()>& loss_only,
                                         double eps = 1e-4, double tol = 1e-3) {
    GradCheckResult res;
    loss_and_grads();
    Tensor analytic = store.at(name).grad;
    for (int64_t idx : indices) {
        double fd = fd_grad(store.at(name).value, idx, loss_only, eps);
        double an = analytic[idx];
        double err = rel_err(an, fd, 1e-7);
        res.checked++;
        res.worst = std::max(res.worst, err);
        if (err > tol) res.failed++;
    }
    return res;
}

}  // namespace forge::testutil
