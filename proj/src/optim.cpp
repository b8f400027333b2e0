#include "fskws/optim.hpp"

#include <cmath>

#include "fskws/error.hpp"

namespace fskws {

namespace {

const Tensor& grad_for(const Gradients& grads, const std::string& id, const Tensor& value) {
    auto it = grads.find(id);
    if (it == grads.end()) throw InvalidArgument("missing gradient for parameter '" + id + "'");
    if (it->second.shape() != value.shape())
        throw ShapeError("gradient for '" + id + "' has shape " + shape_str(it->second.shape()) + ", parameter " +
                         shape_str(value.shape()));
    return it->second;
}

}  // namespace

ParamSet sgd_step(ParamSet params, const Gradients& grads, double lr, PartitionMask mask) {
    if (!(lr > 0.0)) throw InvalidArgument("sgd_step: learning rate must be positive");
    for (const auto& id : params.ids()) {
        if (!mask.contains(params.partition(id))) continue;
        Tensor& w = params.mutable_value(id);
        const Tensor& g = grad_for(grads, id, w);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
    }
    return params;
}

AdamState AdamState::for_params(const ParamSet& params) {
    AdamState s;
    s.m = params.zeros_like();
    s.v = params.zeros_like();
    return s;
}

void adam_step(ParamSet& params, const Gradients& grads, AdamState& state, double lr, PartitionMask mask) {
    if (!(lr > 0.0)) throw InvalidArgument("adam_step: learning rate must be positive");
    // validate everything before touching anything
    for (const auto& [id, e] : params.entries()) {
        if (!mask.contains(e.partition)) continue;
        auto m = state.m.find(id);
        auto v = state.v.find(id);
        if (m == state.m.end() || v == state.v.end() || m->second.shape() != e.value.shape() ||
            v->second.shape() != e.value.shape())
            throw ShapeError("Adam state does not match parameter '" + id + "'");
        grad_for(grads, id, e.value);
    }
    state.t += 1;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (const auto& id : params.ids()) {
        if (!mask.contains(params.partition(id))) continue;
        Tensor& w = params.mutable_value(id);
        const Tensor& g = grads.at(id);
        Tensor& m = state.m.at(id);
        Tensor& v = state.v.at(id);
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

Gradients finite_diff_grad(const LossFn& loss, const ParamSet& params, double h, PartitionMask mask) {
    if (!(h > 0.0)) throw InvalidArgument("finite_diff_grad: step must be positive");
    Gradients out = params.zeros_like();
    ParamSet probe = params;
    for (const auto& id : params.ids()) {
        if (!mask.contains(params.partition(id))) continue;
        Tensor& g = out.at(id);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double orig = params.value(id)[i];
            probe.mutable_value(id)[i] = orig + h;
            const double fp = loss(probe);
            probe.mutable_value(id)[i] = orig - h;
            const double fm = loss(probe);
            probe.mutable_value(id)[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_diff_grad: non-finite loss at '" + id + "'[" + std::to_string(i) + "]");
            g[i] = (fp - fm) / (2.0 * h);
        }
    }
    return out;
}

void accumulate(Gradients& into, const Gradients& g, double scale) {
    for (const auto& [id, t] : g) {
        auto it = into.find(id);
        if (it == into.end()) {
            Tensor s = t;
            for (double& v : s.values()) v *= scale;
            into.emplace(id, std::move(s));
            continue;
        }
        if (it->second.shape() != t.shape()) throw ShapeError("gradient shape drift for '" + id + "'");
        for (std::size_t i = 0; i < t.size(); ++i) it->second[i] += scale * t[i];
    }
}

}  // namespace fskws
