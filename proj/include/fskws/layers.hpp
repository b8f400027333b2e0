#pragma once

#include <span>
#include <string>

#include "fskws/graph.hpp"
#include "fskws/params.hpp"
#include "fskws/rng.hpp"

namespace fskws {

/// [out, in] weights uniform in +-sqrt(6 / (in + out)).
Tensor glorot_uniform(std::size_t out, std::size_t in, Rng& rng);

/// Adds `<prefix>.w` [out, in] (Glorot) and `<prefix>.b` [out] (zeros).
void init_affine(ParamSet& params, const std::string& prefix, std::size_t in, std::size_t out, Partition part,
                 Rng& rng);
Var build_affine(Graph& g, const std::string& prefix, Var x);

/// Perceptron with layer sizes `widths` = {in, h1, ..., out}; parameters
/// `<prefix>.fc<i>.{w,b}`.
void init_mlp(ParamSet& params, const std::string& prefix, std::span<const std::size_t> widths, Partition part,
              Rng& rng);
/// ReLU between layers; none after the last one unless `relu_last`.
Var build_mlp(Graph& g, const std::string& prefix, std::size_t layers, Var x, bool relu_last = false);

std::string mlp_layer_prefix(const std::string& prefix, std::size_t layer);

}  // namespace fskws
