#include "fskws/layers.hpp"

#include <cmath>

#include "fskws/error.hpp"

namespace fskws {

Tensor glorot_uniform(std::size_t out, std::size_t in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    Tensor w({out, in});
    for (double& v : w.values()) v = rng.uniform(-limit, limit);
    return w;
}

void init_affine(ParamSet& params, const std::string& prefix, std::size_t in, std::size_t out, Partition part,
                 Rng& rng) {
    params.add(prefix + ".w", glorot_uniform(out, in, rng), part);
    params.add(prefix + ".b", Tensor({out}, 0.0), part);
}

Var build_affine(Graph& g, const std::string& prefix, Var x) {
    return g.affine(x, g.param(prefix + ".w"), g.param(prefix + ".b"));
}

std::string mlp_layer_prefix(const std::string& prefix, std::size_t layer) {
    return prefix + ".fc" + std::to_string(layer);
}

void init_mlp(ParamSet& params, const std::string& prefix, std::span<const std::size_t> widths, Partition part,
              Rng& rng) {
    if (widths.size() < 2) throw InvalidArgument("perceptron needs at least an input and an output width");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        init_affine(params, mlp_layer_prefix(prefix, i), widths[i], widths[i + 1], part, rng);
}

Var build_mlp(Graph& g, const std::string& prefix, std::size_t layers, Var x, bool relu_last) {
    for (std::size_t i = 0; i < layers; ++i) {
        x = build_affine(g, mlp_layer_prefix(prefix, i), x);
        if (i + 1 < layers || relu_last) x = g.relu(x);
    }
    return x;
}

}  // namespace fskws
