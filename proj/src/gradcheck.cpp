#include "syncflow/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "syncflow/errors.hpp"
#include "syncflow/rng.hpp"

namespace syncflow {

namespace {

std::vector<double> analytic_gradient(const ScalarFn& f, const Tensor& x)
{
    Tensor leaf = x.clone();
    leaf.set_requires_grad(true);
    GradTape tape;
    Tensor out;
    {
        TapeScope scope(tape);
        out = f(leaf);
    }
    if (out.numel() != 1) throw ContractError("grad_check: function output is not scalar");
    tape.backward(out);
    return leaf.grad_f64_vector();
}

double evaluate(const ScalarFn& f, const Tensor& x)
{
    Tensor out = f(x);
    if (out.numel() != 1) throw ContractError("grad_check: function output is not scalar");
    return out.item();
}

} // namespace

double grad_check(const ScalarFn& f, const ScalarFn& reference, const Tensor& x, double eps)
{
    if (!(eps >= 1e-5 && eps <= 1e-2)) throw ContractError("grad_check: eps must lie in [1e-5, 1e-2]");
    const std::vector<double> analytic = analytic_gradient(f, x);
    Tensor probe = x.to(DType::kF64);
    double worst = 0.0;
    for (std::int64_t i = 0; i < probe.numel(); ++i) {
        const double x0 = probe.at(i);
        probe.set(i, x0 + eps);
        const double up = evaluate(reference, probe);
        probe.set(i, x0 - eps);
        const double down = evaluate(reference, probe);
        probe.set(i, x0);
        const double numeric = (up - down) / (2.0 * eps);
        const double a = analytic[static_cast<std::size_t>(i)];
        worst = std::max(worst, std::abs(a - numeric) / (std::abs(a) + 1e-8));
    }
    return worst;
}

double grad_check(const ScalarFn& f, const Tensor& x, double eps)
{
    return grad_check(f, f, x, eps);
}

ParamCheckReport grad_check_params(const std::function<Tensor()>& loss, const NamedParams& params,
                                   const std::function<double()>& reference, const NamedParams& reference_params,
                                   double eps, int per_tensor, std::uint64_t seed)
{
    if (!(eps >= 1e-5 && eps <= 1e-2)) throw ContractError("grad_check: eps must lie in [1e-5, 1e-2]");
    if (params.size() != reference_params.size()) throw ContractError("grad_check: parameter lists differ");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].first != reference_params[i].first || params[i].second->numel() != reference_params[i].second->numel())
            throw ContractError("grad_check: parameter '" + params[i].first + "' has no matching reference");

    zero_grads(params);
    GradTape tape;
    Tensor out;
    {
        TapeScope scope(tape);
        out = loss();
    }
    if (out.numel() != 1) throw ContractError("grad_check: function output is not scalar");
    tape.backward(out);
    std::vector<std::vector<double>> grads;
    for (const auto& [name, p] : params)
        grads.push_back(p->has_grad() ? p->grad_f64_vector() : std::vector<double>(static_cast<std::size_t>(p->numel()), 0.0));
    zero_grads(params);

    ParamCheckReport report;
    Rng rng(seed);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& ref = *reference_params[k].second;
        const std::int64_t n = ref.numel();
        std::vector<std::int64_t> coords;
        if (n <= per_tensor) {
            for (std::int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < per_tensor; ++i) coords.push_back(static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n))));
        }
        for (std::int64_t i : coords) {
            const double x0 = ref.at(i);
            ref.set(i, x0 + eps);
            const double up = reference();
            ref.set(i, x0 - eps);
            const double down = reference();
            ref.set(i, x0);
            const double numeric = (up - down) / (2.0 * eps);
            const double a = grads[k][static_cast<std::size_t>(i)];
            const double rel = std::abs(a - numeric) / (std::abs(a) + 1e-8);
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = params[k].first;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            ++report.coordinates;
        }
    }

    // directional derivative along a random unit-scale direction
    std::vector<std::vector<double>> dir(params.size());
    std::vector<std::vector<double>> base(params.size());
    double analytic = 0.0, norm = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        base[k] = reference_params[k].second->to_f64_vector();
        dir[k].resize(base[k].size());
        for (std::size_t i = 0; i < dir[k].size(); ++i) {
            dir[k][i] = rng.normal();
            analytic += dir[k][i] * grads[k][i];
            norm += dir[k][i] * dir[k][i];
        }
    }
    const double step = eps / std::sqrt(norm);
    auto shift = [&](double s) {
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < dir[k].size(); ++i)
                reference_params[k].second->set(static_cast<std::int64_t>(i), base[k][i] + s * dir[k][i]);
    };
    shift(step);
    const double up = reference();
    shift(-step);
    const double down = reference();
    shift(0.0);
    const double numeric = (up - down) / (2.0 * step);
    report.directional_rel_error = std::abs(analytic - numeric) / (std::abs(analytic) + 1e-8);
    return report;
}

} // namespace syncflow
