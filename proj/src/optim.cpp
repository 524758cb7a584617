#include "syncflow/optim.hpp"

#include <algorithm>
#include <cmath>

namespace syncflow {

double Adam::current_lr() const
{
    if (config_.warmup_steps <= 0) return config_.lr;
    const double ramp = static_cast<double>(steps_ + 1) / static_cast<double>(config_.warmup_steps);
    return config_.lr * std::min(1.0, ramp);
}

void Adam::step(const NamedParams& params)
{
    const double lr = current_lr();
    ++steps_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (const auto& [name, param] : params) {
        if (!param->has_grad()) continue;
        auto [it, inserted] = state_.try_emplace(name);
        if (inserted) {
            it->second.m = Tensor(param->shape(), param->dtype());
            it->second.v = Tensor(param->shape(), param->dtype());
        }
        Moments& mo = it->second;
        dispatch_dtype(param->dtype(), [&]<class T>(std::type_identity<T>) {
            auto p = param->data<T>();
            auto g = param->grad<T>();
            auto m = mo.m.data<T>();
            auto v = mo.v.data<T>();
            const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = b1 * m[i] + (T(1) - b1) * g[i];
                v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
                const double mhat = static_cast<double>(m[i]) / c1;
                const double vhat = static_cast<double>(v[i]) / c2;
                p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + config_.eps));
            }
        });
    }
}

void zero_grads(const NamedParams& params)
{
    for (const auto& [name, param] : params) param->zero_grad();
}

} // namespace syncflow
