#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fskws/params.hpp"
#include "fskws/tensor.hpp"

namespace fskws {

/// Handle to a node of a particular Graph.
struct Var {
    std::uint32_t id = UINT32_MAX;
    bool valid() const noexcept { return id != UINT32_MAX; }
};

enum class OpKind : std::uint8_t {
    Input,
    Const,
    Param,
    Affine,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Sigmoid,
    Log,
    Sum,
    MeanAll,
    MeanAxis,
    SegmentMean,
    Softmax,
    SoftmaxCrossEntropy,
    NllProb,
    MeanSquaredError,
    PairwiseSqDist,
    BatchedSqDist,
    Concat,
    GatherRows,
    Reshape,
    Attention,
    LayerSum,
};

const char* to_string(OpKind op) noexcept;

enum class Reduction : std::uint8_t { Sum, Mean };

using Inputs = std::map<std::string, Tensor>;

/// Differentiable expression over placeholders, constants and parameters.
///
/// Nodes are appended in construction order, which is a topological order by
/// construction. A graph is built once and may be evaluated any number of
/// times: forward() binds a ParamSet and the named inputs, evaluates every
/// node, and caches activations; backward() then walks the nodes in exact
/// reverse order. A graph is single-owner; it is not safe to evaluate one
/// instance from two threads.
class Graph {
   public:
    // leaves
    Var input(const std::string& name);
    Var constant(Tensor value);
    /// Parameter leaf bound by id at forward time. Repeated calls with the
    /// same id return the same node.
    Var param(const std::string& id);

    /// y = x W^T + b over the last axis; W is [out, in], b is [out].
    Var affine(Var x, Var w, Var b);
    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var x, double c);
    Var relu(Var x);
    Var sigmoid(Var x);
    Var log(Var x);
    Var sum(Var x);
    Var mean(Var x);
    /// Mean over one axis; the axis is removed.
    Var mean_axis(Var x, std::size_t axis);
    /// Row-block means of a [R, d] matrix; `offsets` has B+1 entries from 0 to R.
    Var segment_mean(Var x, std::vector<std::size_t> offsets);
    /// Softmax over the last axis.
    Var softmax(Var x);
    Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels, Reduction r = Reduction::Mean);
    /// Negative log of the labelled entry of each row of a probability matrix.
    Var nll_prob(Var probs, std::vector<std::size_t> labels, Reduction r = Reduction::Mean);
    Var mean_squared_error(Var pred, Tensor target);
    /// [M, n] x [P, n] -> [M, P] squared Euclidean distances.
    Var pairwise_sq_dist(Var a, Var b);
    /// [B, n] x [B, M, n] -> [B, M]: distance of each row of `q` to its own M rows of `s`.
    Var batched_sq_dist(Var q, Var s);
    Var concat(const std::vector<Var>& parts, std::size_t axis);
    Var gather_rows(Var x, std::vector<std::size_t> rows);
    Var reshape(Var x, Shape shape);
    /// Multi-head scaled dot-product attention. q is [B, Tq, n] (or [Tq, n]),
    /// k and v are [B, Tk, n]; heads must divide n.
    Var attention(Var q, Var k, Var v, std::size_t heads);
    /// [B, L, d] and weights [L] -> [B, d], sum over layers.
    Var layer_sum(Var x, Var weights);

    /// Evaluate every node and return the value of the last one.
    const Tensor& forward(const ParamSet& params, const Inputs& inputs = {});

    /// Reverse pass from a scalar root. Returns a gradient for every parameter
    /// of the ParamSet bound at forward(); unreached parameters get zeros.
    Gradients backward(Var root);
    Gradients backward() { return backward(last()); }

    const Tensor& value(Var v) const;
    /// Gradient of the root with respect to any node, after backward().
    const Tensor& grad(Var v) const;
    /// Attention probabilities [B, heads, Tq, Tk] of an Attention node, after forward().
    Tensor attention_weights(Var v) const;

    Var last() const;
    std::size_t size() const noexcept { return nodes_.size(); }
    OpKind kind(Var v) const;
    bool evaluated() const noexcept { return evaluated_; }

   private:
    struct Node {
        OpKind op = OpKind::Const;
        std::vector<std::uint32_t> in;
        std::string name;
        Shape shape;
        std::vector<std::size_t> index;
        std::size_t axis = 0;
        double scalar = 0.0;
        Reduction reduction = Reduction::Mean;
        Tensor constant;
        Tensor value;
        Tensor grad;
        std::vector<double> cache;
    };

    static Node make_node(OpKind op, std::vector<std::uint32_t> in);
    Var push(Node node);
    const Node& node(Var v) const;
    void eval_node(std::size_t i);
    void backprop_node(std::size_t i);
    [[noreturn]] void shape_fail(std::size_t i, const std::string& what) const;

    std::vector<Node> nodes_;
    std::map<std::string, std::uint32_t> param_nodes_;
    std::vector<std::pair<std::string, Shape>> bound_shapes_;
    bool evaluated_ = false;
    bool backpropagated_ = false;
};

}  // namespace fskws
