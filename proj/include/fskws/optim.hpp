#pragma once

#include <cstdint>
#include <functional>

#include "fskws/params.hpp"

namespace fskws {

/// Inner-loop (SGD) learning rate.
inline constexpr double kDefaultSgdLr = 5e-2;
/// Adam learning rate for outer loops and metric training.
inline constexpr double kDefaultAdamLr = 1e-4;

/// theta <- theta - lr * g for every parameter whose partition is in `mask`.
/// Other parameters are returned untouched.
ParamSet sgd_step(ParamSet params, const Gradients& grads, double lr = kDefaultSgdLr,
                  PartitionMask mask = PartitionMask::all());

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t t = 0;
    Gradients m;
    Gradients v;

    /// Zero moments shaped like `params`.
    static AdamState for_params(const ParamSet& params);
};

/// One bias-corrected Adam step over the masked parameters. Moments of
/// unmasked parameters are left as they are.
void adam_step(ParamSet& params, const Gradients& grads, AdamState& state, double lr = kDefaultAdamLr,
               PartitionMask mask = PartitionMask::all());

using LossFn = std::function<double(const ParamSet&)>;

/// Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h for every
/// scalar of every masked parameter.
Gradients finite_diff_grad(const LossFn& loss, const ParamSet& params, double h = 1e-5,
                           PartitionMask mask = PartitionMask::all());

/// Element-wise sum of two gradient maps over the same ids.
void accumulate(Gradients& into, const Gradients& g, double scale = 1.0);

}  // namespace fskws
