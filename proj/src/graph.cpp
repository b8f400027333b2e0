#include "fskws/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "fskws/error.hpp"

namespace fskws {

namespace {

inline void axpy(double a, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

inline double dot(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

}  // namespace

Graph::Node Graph::make_node(OpKind op, std::vector<std::uint32_t> in) {
    Node n;
    n.op = op;
    n.in = std::move(in);
    return n;
}

namespace {

// batch, time and width of a rank-2 or rank-3 sequence tensor
struct SeqDims {
    std::size_t b, t, n;
};

}  // namespace

const char* to_string(OpKind op) noexcept {
    switch (op) {
        case OpKind::Input: return "input";
        case OpKind::Const: return "const";
        case OpKind::Param: return "param";
        case OpKind::Affine: return "affine";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Relu: return "relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Log: return "log";
        case OpKind::Sum: return "sum";
        case OpKind::MeanAll: return "mean";
        case OpKind::MeanAxis: return "mean_axis";
        case OpKind::SegmentMean: return "segment_mean";
        case OpKind::Softmax: return "softmax";
        case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
        case OpKind::NllProb: return "nll_prob";
        case OpKind::MeanSquaredError: return "mean_squared_error";
        case OpKind::PairwiseSqDist: return "pairwise_sq_dist";
        case OpKind::BatchedSqDist: return "batched_sq_dist";
        case OpKind::Concat: return "concat";
        case OpKind::GatherRows: return "gather_rows";
        case OpKind::Reshape: return "reshape";
        case OpKind::Attention: return "attention";
        case OpKind::LayerSum: return "layer_sum";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// construction

Var Graph::push(Node n) {
    for (auto i : n.in)
        if (i >= nodes_.size()) throw InvalidArgument("graph input refers to a node of another graph");
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    backpropagated_ = false;
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw InvalidArgument("invalid graph node handle");
    return nodes_[v.id];
}

Var Graph::input(const std::string& name) {
    Node n = make_node(OpKind::Input, {});
    n.name = name;
    return push(std::move(n));
}

Var Graph::constant(Tensor value) {
    Node n = make_node(OpKind::Const, {});
    n.constant = std::move(value);
    return push(std::move(n));
}

Var Graph::param(const std::string& id) {
    if (auto it = param_nodes_.find(id); it != param_nodes_.end()) return Var{it->second};
    Node n = make_node(OpKind::Param, {});
    n.name = id;
    Var v = push(std::move(n));
    param_nodes_.emplace(id, v.id);
    return v;
}

Var Graph::affine(Var x, Var w, Var b) { return push(make_node(OpKind::Affine, {x.id, w.id, b.id})); }
Var Graph::matmul(Var a, Var b) { return push(make_node(OpKind::MatMul, {a.id, b.id})); }
Var Graph::add(Var a, Var b) { return push(make_node(OpKind::Add, {a.id, b.id})); }
Var Graph::sub(Var a, Var b) { return push(make_node(OpKind::Sub, {a.id, b.id})); }
Var Graph::mul(Var a, Var b) { return push(make_node(OpKind::Mul, {a.id, b.id})); }

Var Graph::scale(Var x, double c) {
    Node n = make_node(OpKind::Scale, {x.id});
    n.scalar = c;
    return push(std::move(n));
}

Var Graph::relu(Var x) { return push(make_node(OpKind::Relu, {x.id})); }
Var Graph::sigmoid(Var x) { return push(make_node(OpKind::Sigmoid, {x.id})); }
Var Graph::log(Var x) { return push(make_node(OpKind::Log, {x.id})); }
Var Graph::sum(Var x) { return push(make_node(OpKind::Sum, {x.id})); }
Var Graph::mean(Var x) { return push(make_node(OpKind::MeanAll, {x.id})); }

Var Graph::mean_axis(Var x, std::size_t axis) {
    Node n = make_node(OpKind::MeanAxis, {x.id});
    n.axis = axis;
    return push(std::move(n));
}

Var Graph::segment_mean(Var x, std::vector<std::size_t> offsets) {
    Node n = make_node(OpKind::SegmentMean, {x.id});
    n.index = std::move(offsets);
    return push(std::move(n));
}

Var Graph::softmax(Var x) { return push(make_node(OpKind::Softmax, {x.id})); }

Var Graph::softmax_cross_entropy(Var logits, std::vector<std::size_t> labels, Reduction r) {
    Node n = make_node(OpKind::SoftmaxCrossEntropy, {logits.id});
    n.index = std::move(labels);
    n.reduction = r;
    return push(std::move(n));
}

Var Graph::nll_prob(Var probs, std::vector<std::size_t> labels, Reduction r) {
    Node n = make_node(OpKind::NllProb, {probs.id});
    n.index = std::move(labels);
    n.reduction = r;
    return push(std::move(n));
}

Var Graph::mean_squared_error(Var pred, Tensor target) {
    Node n = make_node(OpKind::MeanSquaredError, {pred.id});
    n.constant = std::move(target);
    return push(std::move(n));
}

Var Graph::pairwise_sq_dist(Var a, Var b) { return push(make_node(OpKind::PairwiseSqDist, {a.id, b.id})); }
Var Graph::batched_sq_dist(Var q, Var s) { return push(make_node(OpKind::BatchedSqDist, {q.id, s.id})); }

Var Graph::concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw InvalidArgument("concat of zero tensors");
    Node n = make_node(OpKind::Concat, {});
    for (auto p : parts) n.in.push_back(p.id);
    n.axis = axis;
    return push(std::move(n));
}

Var Graph::gather_rows(Var x, std::vector<std::size_t> rows) {
    if (rows.empty()) throw InvalidArgument("gather of zero rows");
    Node n = make_node(OpKind::GatherRows, {x.id});
    n.index = std::move(rows);
    return push(std::move(n));
}

Var Graph::reshape(Var x, Shape shape) {
    Node n = make_node(OpKind::Reshape, {x.id});
    n.shape = std::move(shape);
    return push(std::move(n));
}

Var Graph::attention(Var q, Var k, Var v, std::size_t heads) {
    if (heads == 0) throw InvalidArgument("attention needs at least one head");
    Node n = make_node(OpKind::Attention, {q.id, k.id, v.id});
    n.axis = heads;
    return push(std::move(n));
}

Var Graph::layer_sum(Var x, Var weights) { return push(make_node(OpKind::LayerSum, {x.id, weights.id})); }

// ---------------------------------------------------------------------------
// evaluation

void Graph::shape_fail(std::size_t i, const std::string& what) const {
    throw ShapeError("node " + std::to_string(i) + " (" + to_string(nodes_[i].op) + "): " + what);
}

const Tensor& Graph::forward(const ParamSet& params, const Inputs& inputs) {
    if (nodes_.empty()) throw StateError("forward on an empty graph");
    evaluated_ = false;
    backpropagated_ = false;
    bound_shapes_.clear();
    for (const auto& [id, e] : params.entries()) bound_shapes_.emplace_back(id, e.value.shape());

    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (n.op == OpKind::Input) {
            auto it = inputs.find(n.name);
            if (it == inputs.end()) throw InvalidArgument("input '" + n.name + "' is not bound");
            n.value = it->second;
        } else if (n.op == OpKind::Param) {
            if (!params.contains(n.name)) throw InvalidArgument("parameter '" + n.name + "' is not in the ParamSet");
            n.value = params.value(n.name);
        } else if (n.op == OpKind::Const) {
            n.value = n.constant;
        } else {
            eval_node(i);
        }
        if (!n.value.all_finite())
            throw NumericError("node " + std::to_string(i) + " (" + to_string(n.op) + "): non-finite value");
    }
    evaluated_ = true;
    return nodes_.back().value;
}

void Graph::eval_node(std::size_t i) {
    Node& n = nodes_[i];
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.in[k]].value; };

    switch (n.op) {
        case OpKind::Affine: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            const Tensor& b = in(2);
            if (w.rank() != 2) shape_fail(i, "weight must be rank 2, got " + shape_str(w.shape()));
            const std::size_t out = w.dim(0), fan_in = w.dim(1);
            if (b.rank() != 1 || b.dim(0) != out)
                shape_fail(i, "bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
            if (x.rank() == 0 || x.shape().back() != fan_in)
                shape_fail(i, "input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
            Shape ys = x.shape();
            ys.back() = out;
            Tensor y(ys);
            const std::size_t rows = x.size() / fan_in;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = x.data() + r * fan_in;
                double* yr = y.data() + r * out;
                for (std::size_t o = 0; o < out; ++o) yr[o] = b[o] + dot(xr, w.data() + o * fan_in, fan_in);
            }
            n.value = std::move(y);
            break;
        }
        case OpKind::MatMul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
                shape_fail(i, "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
            const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
            Tensor c({m, p});
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < k; ++j) axpy(a.at(r, j), b.data() + j * p, c.data() + r * p, p);
            n.value = std::move(c);
            break;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (a.shape() != b.shape())
                shape_fail(i, "operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
            Tensor y(a.shape());
            for (std::size_t j = 0; j < a.size(); ++j)
                y[j] = n.op == OpKind::Add ? a[j] + b[j] : n.op == OpKind::Sub ? a[j] - b[j] : a[j] * b[j];
            n.value = std::move(y);
            break;
        }
        case OpKind::Scale: {
            Tensor y = in(0);
            for (double& v : y.values()) v *= n.scalar;
            n.value = std::move(y);
            break;
        }
        case OpKind::Relu: {
            Tensor y = in(0);
            for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
            n.value = std::move(y);
            break;
        }
        case OpKind::Sigmoid: {
            Tensor y = in(0);
            // clamped so the output stays strictly inside (0, 1)
            constexpr double lo = 1e-300, hi = 1.0 - 0x1p-53;
            for (double& v : y.values()) {
                const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
                v = std::clamp(s, lo, hi);
            }
            n.value = std::move(y);
            break;
        }
        case OpKind::Log: {
            Tensor y = in(0);
            for (double& v : y.values()) {
                if (!(v > 0.0)) throw NumericError("node " + std::to_string(i) + " (log): non-positive argument");
                v = std::log(v);
            }
            n.value = std::move(y);
            break;
        }
        case OpKind::Sum:
        case OpKind::MeanAll: {
            const Tensor& x = in(0);
            double s = 0.0;
            for (double v : x.values()) s += v;
            if (n.op == OpKind::MeanAll) s /= static_cast<double>(x.size());
            n.value = Tensor::scalar(s);
            break;
        }
        case OpKind::MeanAxis: {
            const Tensor& x = in(0);
            if (n.axis >= x.rank()) shape_fail(i, "axis " + std::to_string(n.axis) + " out of range");
            std::size_t outer = 1, inner = 1;
            for (std::size_t a = 0; a < n.axis; ++a) outer *= x.dim(a);
            for (std::size_t a = n.axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
            const std::size_t len = x.dim(n.axis);
            Shape ys;
            for (std::size_t a = 0; a < x.rank(); ++a)
                if (a != n.axis) ys.push_back(x.dim(a));
            Tensor y(ys);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t t = 0; t < len; ++t)
                    axpy(1.0 / static_cast<double>(len), x.data() + (o * len + t) * inner, y.data() + o * inner,
                         inner);
            n.value = std::move(y);
            break;
        }
        case OpKind::SegmentMean: {
            const Tensor& x = in(0);
            if (x.rank() != 2) shape_fail(i, "expects a matrix, got " + shape_str(x.shape()));
            const auto& off = n.index;
            if (off.size() < 2 || off.front() != 0 || off.back() != x.dim(0))
                shape_fail(i, "segment offsets do not cover " + std::to_string(x.dim(0)) + " rows");
            const std::size_t d = x.dim(1), segs = off.size() - 1;
            Tensor y({segs, d});
            for (std::size_t s = 0; s < segs; ++s) {
                if (off[s + 1] <= off[s]) throw InvalidArgument("segment_mean: empty segment " + std::to_string(s));
                const double inv = 1.0 / static_cast<double>(off[s + 1] - off[s]);
                for (std::size_t r = off[s]; r < off[s + 1]; ++r) axpy(inv, x.data() + r * d, y.data() + s * d, d);
            }
            n.value = std::move(y);
            break;
        }
        case OpKind::Softmax: {
            Tensor y = in(0);
            if (y.rank() == 0) shape_fail(i, "softmax of a scalar");
            const std::size_t c = y.shape().back();
            for (std::size_t r = 0; r < y.size() / c; ++r) {
                double* row = y.data() + r * c;
                const double mx = *std::max_element(row, row + c);
                double z = 0.0;
                for (std::size_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - mx));
                for (std::size_t j = 0; j < c; ++j) row[j] /= z;
            }
            n.value = std::move(y);
            break;
        }
        case OpKind::SoftmaxCrossEntropy: {
            const Tensor& x = in(0);
            if (x.rank() != 1 && x.rank() != 2) shape_fail(i, "logits must be rank 1 or 2");
            const std::size_t c = x.shape().back(), rows = x.size() / c;
            if (n.index.size() != rows)
                shape_fail(i, std::to_string(n.index.size()) + " labels for " + std::to_string(rows) + " rows");
            n.cache.assign(x.size(), 0.0);
            double loss = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                if (n.index[r] >= c) shape_fail(i, "label " + std::to_string(n.index[r]) + " out of range");
                const double* row = x.data() + r * c;
                double* p = n.cache.data() + r * c;
                const double mx = *std::max_element(row, row + c);
                double z = 0.0;
                for (std::size_t j = 0; j < c; ++j) z += (p[j] = std::exp(row[j] - mx));
                for (std::size_t j = 0; j < c; ++j) p[j] /= z;
                loss += mx + std::log(z) - row[n.index[r]];
            }
            if (n.reduction == Reduction::Mean) loss /= static_cast<double>(rows);
            n.value = Tensor::scalar(loss);
            break;
        }
        case OpKind::NllProb: {
            const Tensor& p = in(0);
            if (p.rank() != 1 && p.rank() != 2) shape_fail(i, "probabilities must be rank 1 or 2");
            const std::size_t c = p.shape().back(), rows = p.size() / c;
            if (n.index.size() != rows)
                shape_fail(i, std::to_string(n.index.size()) + " labels for " + std::to_string(rows) + " rows");
            double loss = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                if (n.index[r] >= c) shape_fail(i, "label " + std::to_string(n.index[r]) + " out of range");
                const double v = p[r * c + n.index[r]];
                if (!(v > 0.0)) throw NumericError("node " + std::to_string(i) + " (nll_prob): zero probability");
                loss -= std::log(v);
            }
            if (n.reduction == Reduction::Mean) loss /= static_cast<double>(rows);
            n.value = Tensor::scalar(loss);
            break;
        }
        case OpKind::MeanSquaredError: {
            const Tensor& x = in(0);
            if (x.shape() != n.constant.shape())
                shape_fail(i, "prediction " + shape_str(x.shape()) + " vs target " + shape_str(n.constant.shape()));
            double s = 0.0;
            for (std::size_t j = 0; j < x.size(); ++j) {
                const double e = x[j] - n.constant[j];
                s += e * e;
            }
            n.value = Tensor::scalar(s / static_cast<double>(x.size()));
            break;
        }
        case OpKind::PairwiseSqDist: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
                shape_fail(i, "operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
            const std::size_t m = a.dim(0), p = b.dim(0), d = a.dim(1);
            Tensor y({m, p});
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < p; ++c) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double e = a.at(r, j) - b.at(c, j);
                        s += e * e;
                    }
                    y.at(r, c) = s;
                }
            n.value = std::move(y);
            break;
        }
        case OpKind::BatchedSqDist: {
            const Tensor& q = in(0);
            const Tensor& s = in(1);
            if (q.rank() != 2 || s.rank() != 3 || s.dim(0) != q.dim(0) || s.dim(2) != q.dim(1))
                shape_fail(i, "operands " + shape_str(q.shape()) + " and " + shape_str(s.shape()));
            const std::size_t bsz = q.dim(0), m = s.dim(1), d = q.dim(1);
            Tensor y({bsz, m});
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t j = 0; j < m; ++j) {
                    const double* qv = q.data() + b * d;
                    const double* sv = s.data() + (b * m + j) * d;
                    double acc = 0.0;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double e = qv[k] - sv[k];
                        acc += e * e;
                    }
                    y.at(b, j) = acc;
                }
            n.value = std::move(y);
            break;
        }
        case OpKind::Concat: {
            const Tensor& first = in(0);
            if (n.axis >= first.rank()) shape_fail(i, "axis " + std::to_string(n.axis) + " out of range");
            Shape ys = first.shape();
            ys[n.axis] = 0;
            for (std::size_t k = 0; k < n.in.size(); ++k) {
                const Tensor& t = in(k);
                if (t.rank() != first.rank()) shape_fail(i, "rank mismatch among parts");
                for (std::size_t a = 0; a < t.rank(); ++a)
                    if (a != n.axis && t.dim(a) != first.dim(a))
                        shape_fail(i, "part " + shape_str(t.shape()) + " vs " + shape_str(first.shape()));
                ys[n.axis] += t.dim(n.axis);
            }
            std::size_t outer = 1;
            for (std::size_t a = 0; a < n.axis; ++a) outer *= first.dim(a);
            Tensor y(ys);
            const std::size_t out_block = y.size() / outer;
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.in.size(); ++k) {
                const Tensor& t = in(k);
                const std::size_t block = t.size() / outer;
                for (std::size_t o = 0; o < outer; ++o)
                    std::copy_n(t.data() + o * block, block, y.data() + o * out_block + offset);
                offset += block;
            }
            n.value = std::move(y);
            break;
        }
        case OpKind::GatherRows: {
            const Tensor& x = in(0);
            if (x.rank() == 0) shape_fail(i, "gather from a scalar");
            const std::size_t rows = x.dim(0), width = x.size() / rows;
            Shape ys = x.shape();
            ys[0] = n.index.size();
            Tensor y(ys);
            for (std::size_t r = 0; r < n.index.size(); ++r) {
                if (n.index[r] >= rows) shape_fail(i, "row " + std::to_string(n.index[r]) + " out of range");
                std::copy_n(x.data() + n.index[r] * width, width, y.data() + r * width);
            }
            n.value = std::move(y);
            break;
        }
        case OpKind::Reshape: {
            const Tensor& x = in(0);
            if (shape_size(n.shape) != x.size())
                shape_fail(i, "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(n.shape));
            n.value = x.reshaped(n.shape);
            break;
        }
        case OpKind::Attention: {
            const Tensor& q = in(0);
            const Tensor& k = in(1);
            const Tensor& v = in(2);
            auto dims = [&](const Tensor& t) -> SeqDims {
                if (t.rank() == 2) return {1, t.dim(0), t.dim(1)};
                if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2)};
                shape_fail(i, "sequence tensors must be rank 2 or 3, got " + shape_str(t.shape()));
            };
            const SeqDims dq = dims(q), dk = dims(k), dv = dims(v);
            if (q.rank() != k.rank() || k.shape() != v.shape() || dq.b != dk.b || dq.n != dk.n)
                shape_fail(i, "q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                                  shape_str(v.shape()));
            const std::size_t heads = n.axis;
            if (dq.n % heads != 0) shape_fail(i, std::to_string(heads) + " heads do not divide width");
            const std::size_t hd = dq.n / heads, tq = dq.t, tk = dk.t, w = dq.n;
            const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
            n.cache.assign(dq.b * heads * tq * tk, 0.0);
            Tensor y(q.shape());
            for (std::size_t b = 0; b < dq.b; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t t = 0; t < tq; ++t) {
                        double* a = n.cache.data() + ((b * heads + h) * tq + t) * tk;
                        const double* qv = q.data() + (b * tq + t) * w + h * hd;
                        double mx = -std::numeric_limits<double>::infinity();
                        for (std::size_t s = 0; s < tk; ++s) {
                            a[s] = inv * dot(qv, k.data() + (b * tk + s) * w + h * hd, hd);
                            mx = std::max(mx, a[s]);
                        }
                        double z = 0.0;
                        for (std::size_t s = 0; s < tk; ++s) z += (a[s] = std::exp(a[s] - mx));
                        double* out = y.data() + (b * tq + t) * w + h * hd;
                        for (std::size_t s = 0; s < tk; ++s) {
                            a[s] /= z;
                            axpy(a[s], v.data() + (b * tk + s) * w + h * hd, out, hd);
                        }
                    }
            (void)dv;
            n.value = std::move(y);
            break;
        }
        case OpKind::LayerSum: {
            const Tensor& x = in(0);
            const Tensor& wt = in(1);
            if (x.rank() != 3 || wt.rank() != 1 || wt.dim(0) != x.dim(1))
                shape_fail(i, "layers " + shape_str(x.shape()) + " vs weights " + shape_str(wt.shape()));
            const std::size_t bsz = x.dim(0), layers = x.dim(1), d = x.dim(2);
            Tensor y({bsz, d});
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t l = 0; l < layers; ++l) axpy(wt[l], x.data() + (b * layers + l) * d, y.data() + b * d, d);
            n.value = std::move(y);
            break;
        }
        case OpKind::Input:
        case OpKind::Const:
        case OpKind::Param:
            break;
    }
}

// ---------------------------------------------------------------------------
// reverse pass

Gradients Graph::backward(Var root) {
    if (!evaluated_) throw StateError("backward called before forward");
    const Node& r = node(root);
    if (r.value.size() != 1) throw StateError("backward root must be a scalar, got " + shape_str(r.value.shape()));

    for (std::size_t i = 0; i < nodes_.size(); ++i) nodes_[i].grad = Tensor(nodes_[i].value.shape(), 0.0);
    nodes_[root.id].grad[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) backprop_node(i);
    backpropagated_ = true;

    Gradients g;
    for (const auto& [id, shape] : bound_shapes_) {
        auto it = param_nodes_.find(id);
        if (it != param_nodes_.end() && it->second <= root.id)
            g.emplace(id, nodes_[it->second].grad);
        else
            g.emplace(id, Tensor(shape, 0.0));
    }
    return g;
}

void Graph::backprop_node(std::size_t i) {
    Node& n = nodes_[i];
    const Tensor& gy = n.grad;
    auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.in[k]].value; };
    auto gin = [&](std::size_t k) -> Tensor& { return nodes_[n.in[k]].grad; };

    switch (n.op) {
        case OpKind::Input:
        case OpKind::Const:
        case OpKind::Param:
            break;
        case OpKind::Affine: {
            const Tensor& x = in(0);
            const Tensor& w = in(1);
            Tensor& gx = gin(0);
            Tensor& gw = gin(1);
            Tensor& gb = gin(2);
            const std::size_t out = w.dim(0), fan_in = w.dim(1), rows = x.size() / fan_in;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = x.data() + r * fan_in;
                const double* gr = gy.data() + r * out;
                double* gxr = gx.data() + r * fan_in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double g = gr[o];
                    if (g == 0.0) continue;
                    axpy(g, w.data() + o * fan_in, gxr, fan_in);
                    axpy(g, xr, gw.data() + o * fan_in, fan_in);
                    gb[o] += g;
                }
            }
            break;
        }
        case OpKind::MatMul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            Tensor& ga = gin(0);
            Tensor& gb = gin(1);
            const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
            for (std::size_t r = 0; r < m; ++r) {
                const double* gr = gy.data() + r * p;
                for (std::size_t j = 0; j < k; ++j) {
                    ga.at(r, j) += dot(gr, b.data() + j * p, p);
                    axpy(a.at(r, j), gr, gb.data() + j * p, p);
                }
            }
            break;
        }
        case OpKind::Add:
        case OpKind::Sub: {
            Tensor& ga = gin(0);
            Tensor& gb = gin(1);
            const double sign = n.op == OpKind::Add ? 1.0 : -1.0;
            for (std::size_t j = 0; j < gy.size(); ++j) {
                ga[j] += gy[j];
                gb[j] += sign * gy[j];
            }
            break;
        }
        case OpKind::Mul: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            // same node on both sides (x*x) accumulates twice, as it should
            for (std::size_t j = 0; j < gy.size(); ++j) {
                gin(0)[j] += gy[j] * b[j];
                gin(1)[j] += gy[j] * a[j];
            }
            break;
        }
        case OpKind::Scale: {
            Tensor& gx = gin(0);
            for (std::size_t j = 0; j < gy.size(); ++j) gx[j] += n.scalar * gy[j];
            break;
        }
        case OpKind::Relu: {
            const Tensor& x = in(0);
            Tensor& gx = gin(0);
            for (std::size_t j = 0; j < gy.size(); ++j)
                if (x[j] > 0.0) gx[j] += gy[j];
            break;
        }
        case OpKind::Sigmoid: {
            Tensor& gx = gin(0);
            for (std::size_t j = 0; j < gy.size(); ++j) {
                const double s = n.value[j];
                gx[j] += gy[j] * s * (1.0 - s);
            }
            break;
        }
        case OpKind::Log: {
            const Tensor& x = in(0);
            Tensor& gx = gin(0);
            for (std::size_t j = 0; j < gy.size(); ++j) gx[j] += gy[j] / x[j];
            break;
        }
        case OpKind::Sum:
        case OpKind::MeanAll: {
            Tensor& gx = gin(0);
            const double g = n.op == OpKind::Sum ? gy[0] : gy[0] / static_cast<double>(gx.size());
            for (double& v : gx.values()) v += g;
            break;
        }
        case OpKind::MeanAxis: {
            const Tensor& x = in(0);
            Tensor& gx = gin(0);
            std::size_t outer = 1, inner = 1;
            for (std::size_t a = 0; a < n.axis; ++a) outer *= x.dim(a);
            for (std::size_t a = n.axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
            const std::size_t len = x.dim(n.axis);
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t t = 0; t < len; ++t)
                    axpy(1.0 / static_cast<double>(len), gy.data() + o * inner, gx.data() + (o * len + t) * inner,
                         inner);
            break;
        }
        case OpKind::SegmentMean: {
            const Tensor& x = in(0);
            Tensor& gx = gin(0);
            const auto& off = n.index;
            const std::size_t d = x.dim(1);
            for (std::size_t s = 0; s + 1 < off.size(); ++s) {
                const double inv = 1.0 / static_cast<double>(off[s + 1] - off[s]);
                for (std::size_t r = off[s]; r < off[s + 1]; ++r) axpy(inv, gy.data() + s * d, gx.data() + r * d, d);
            }
            break;
        }
        case OpKind::Softmax: {
            Tensor& gx = gin(0);
            const Tensor& y = n.value;
            const std::size_t c = y.shape().back();
            for (std::size_t r = 0; r < y.size() / c; ++r) {
                const double* yr = y.data() + r * c;
                const double* gr = gy.data() + r * c;
                const double s = dot(yr, gr, c);
                for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += yr[j] * (gr[j] - s);
            }
            break;
        }
        case OpKind::SoftmaxCrossEntropy: {
            const Tensor& x = in(0);
            Tensor& gx = gin(0);
            const std::size_t c = x.shape().back(), rows = x.size() / c;
            const double scale = n.reduction == Reduction::Mean ? gy[0] / static_cast<double>(rows) : gy[0];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < c; ++j)
                    gx[r * c + j] += scale * (n.cache[r * c + j] - (j == n.index[r] ? 1.0 : 0.0));
            break;
        }
        case OpKind::NllProb: {
            const Tensor& p = in(0);
            Tensor& gp = gin(0);
            const std::size_t c = p.shape().back(), rows = p.size() / c;
            const double scale = n.reduction == Reduction::Mean ? gy[0] / static_cast<double>(rows) : gy[0];
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t j = r * c + n.index[r];
                gp[j] -= scale / p[j];
            }
            break;
        }
        case OpKind::MeanSquaredError: {
            const Tensor& x = in(0);
            Tensor& gx = gin(0);
            const double scale = 2.0 * gy[0] / static_cast<double>(x.size());
            for (std::size_t j = 0; j < x.size(); ++j) gx[j] += scale * (x[j] - n.constant[j]);
            break;
        }
        case OpKind::PairwiseSqDist: {
            const Tensor& a = in(0);
            const Tensor& b = in(1);
            Tensor& ga = gin(0);
            Tensor& gb = gin(1);
            const std::size_t m = a.dim(0), p = b.dim(0), d = a.dim(1);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t c = 0; c < p; ++c) {
                    const double g = 2.0 * gy.at(r, c);
                    if (g == 0.0) continue;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double e = g * (a.at(r, j) - b.at(c, j));
                        ga.at(r, j) += e;
                        gb.at(c, j) -= e;
                    }
                }
            break;
        }
        case OpKind::BatchedSqDist: {
            const Tensor& q = in(0);
            const Tensor& s = in(1);
            Tensor& gq = gin(0);
            Tensor& gs = gin(1);
            const std::size_t bsz = q.dim(0), m = s.dim(1), d = q.dim(1);
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t j = 0; j < m; ++j) {
                    const double g = 2.0 * gy.at(b, j);
                    if (g == 0.0) continue;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double e = g * (q[b * d + k] - s[(b * m + j) * d + k]);
                        gq[b * d + k] += e;
                        gs[(b * m + j) * d + k] -= e;
                    }
                }
            break;
        }
        case OpKind::Concat: {
            std::size_t outer = 1;
            for (std::size_t a = 0; a < n.axis; ++a) outer *= n.value.dim(a);
            const std::size_t out_block = n.value.size() / outer;
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.in.size(); ++k) {
                Tensor& gt = gin(k);
                const std::size_t block = gt.size() / outer;
                for (std::size_t o = 0; o < outer; ++o)
                    axpy(1.0, gy.data() + o * out_block + offset, gt.data() + o * block, block);
                offset += block;
            }
            break;
        }
        case OpKind::GatherRows: {
            Tensor& gx = gin(0);
            const std::size_t width = gx.size() / gx.dim(0);
            for (std::size_t r = 0; r < n.index.size(); ++r)
                axpy(1.0, gy.data() + r * width, gx.data() + n.index[r] * width, width);
            break;
        }
        case OpKind::Reshape: {
            Tensor& gx = gin(0);
            for (std::size_t j = 0; j < gy.size(); ++j) gx[j] += gy[j];
            break;
        }
        case OpKind::Attention: {
            const Tensor& q = in(0);
            const Tensor& k = in(1);
            const Tensor& v = in(2);
            const bool batched = q.rank() == 3;
            const std::size_t bsz = batched ? q.dim(0) : 1;
            const std::size_t tq = batched ? q.dim(1) : q.dim(0);
            const std::size_t tk = batched ? k.dim(1) : k.dim(0);
            const std::size_t w = q.shape().back(), heads = n.axis, hd = w / heads;
            const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
            std::vector<double> ds(tk);
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t t = 0; t < tq; ++t) {
                        const double* a = n.cache.data() + ((b * heads + h) * tq + t) * tk;
                        const double* go = gy.data() + (b * tq + t) * w + h * hd;
                        double s = 0.0;
                        for (std::size_t j = 0; j < tk; ++j) {
                            const std::size_t off = (b * tk + j) * w + h * hd;
                            axpy(a[j], go, gin(2).data() + off, hd);
                            ds[j] = dot(go, v.data() + off, hd);
                            s += ds[j] * a[j];
                        }
                        const double* qv = q.data() + (b * tq + t) * w + h * hd;
                        double* gq = gin(0).data() + (b * tq + t) * w + h * hd;
                        for (std::size_t j = 0; j < tk; ++j) {
                            const double g = a[j] * (ds[j] - s) * inv;
                            if (g == 0.0) continue;
                            const std::size_t off = (b * tk + j) * w + h * hd;
                            axpy(g, k.data() + off, gq, hd);
                            axpy(g, qv, gin(1).data() + off, hd);
                        }
                    }
            break;
        }
        case OpKind::LayerSum: {
            const Tensor& x = in(0);
            const Tensor& wt = in(1);
            Tensor& gx = gin(0);
            Tensor& gw = gin(1);
            const std::size_t bsz = x.dim(0), layers = x.dim(1), d = x.dim(2);
            for (std::size_t b = 0; b < bsz; ++b)
                for (std::size_t l = 0; l < layers; ++l) {
                    const std::size_t off = (b * layers + l) * d;
                    axpy(wt[l], gy.data() + b * d, gx.data() + off, d);
                    gw[l] += dot(gy.data() + b * d, x.data() + off, d);
                }
            break;
        }
    }
}

const Tensor& Graph::value(Var v) const {
    if (!evaluated_) throw StateError("value read before forward");
    return node(v).value;
}

const Tensor& Graph::grad(Var v) const {
    if (!backpropagated_) throw StateError("gradient read before backward");
    return node(v).grad;
}

Tensor Graph::attention_weights(Var v) const {
    const Node& n = node(v);
    if (n.op != OpKind::Attention) throw InvalidArgument("node is not an attention node");
    if (!evaluated_) throw StateError("attention weights read before forward");
    const Tensor& q = nodes_[n.in[0]].value;
    const Tensor& k = nodes_[n.in[1]].value;
    const bool batched = q.rank() == 3;
    const std::size_t bsz = batched ? q.dim(0) : 1;
    return Tensor({bsz, n.axis, batched ? q.dim(1) : q.dim(0), batched ? k.dim(1) : k.dim(0)}, n.cache);
}

Var Graph::last() const {
    if (nodes_.empty()) throw StateError("empty graph");
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

OpKind Graph::kind(Var v) const { return node(v).op; }

}  // namespace fskws
