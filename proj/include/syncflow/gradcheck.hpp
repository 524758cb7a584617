#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "syncflow/optim.hpp"
#include "syncflow/tensor.hpp"

namespace syncflow {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - centered FD| / (|analytic| + 1e-8).
// The analytic gradient comes from f at x in x's dtype; the centered
// differences evaluate `reference` on an f64 copy of x, so an f32 gradient is
// judged without f32 rounding noise in the difference quotient.
// eps must lie in [1e-5, 1e-2] and both functions must return a scalar.
double grad_check(const ScalarFn& f, const ScalarFn& reference, const Tensor& x, double eps);

// Single-function form; f must accept f64 input as well.
double grad_check(const ScalarFn& f, const Tensor& x, double eps);

struct ParamCheckReport {
    double max_rel_error = 0.0;      // over the probed coordinates
    double directional_rel_error = 0.0; // one random direction through every parameter
    std::int64_t coordinates = 0;
    std::string worst_param;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

// Gradient check over a whole parameter set. `loss` is evaluated with a tape
// for the analytic gradient of `params`; `reference` must compute the same
// loss from `reference_params` (typically an f64 copy of the model, same
// names and order) and is used for the centered differences. Up to
// `per_tensor` coordinates of each tensor are probed (all of them when the
// tensor is smaller) plus one random direction that moves every parameter.
ParamCheckReport grad_check_params(const std::function<Tensor()>& loss, const NamedParams& params,
                                   const std::function<double()>& reference, const NamedParams& reference_params,
                                   double eps, int per_tensor, std::uint64_t seed);

} // namespace syncflow
