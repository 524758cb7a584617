#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "syncflow/tensor.hpp"

namespace syncflow {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 0; // linear warmup of the learning rate
};

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;

class Adam {
public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    // Applies one update to every parameter that currently holds a gradient;
    // parameters without a gradient are left untouched.
    void step(const NamedParams& params);
    double current_lr() const;

    std::int64_t steps() const { return steps_; }
    const AdamConfig& config() const { return config_; }

    struct Moments {
        Tensor m;
        Tensor v;
    };
    const std::map<std::string, Moments>& state() const { return state_; }
    void restore(std::int64_t steps, std::map<std::string, Moments> state)
    {
        steps_ = steps;
        state_ = std::move(state);
    }

private:
    AdamConfig config_;
    std::int64_t steps_ = 0;
    std::map<std::string, Moments> state_;
};

void zero_grads(const NamedParams& params);

} // namespace syncflow
