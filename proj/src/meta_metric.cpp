#include "fskws/meta_metric.hpp"

#include <memory>

#include "fskws/error.hpp"
#include "fskws/layers.hpp"

namespace fskws {

const char* to_string(MetricVariant v) noexcept {
    switch (v) {
        case MetricVariant::Prototypical: return "proto";
        case MetricVariant::Matching: return "matching";
        case MetricVariant::Relational: return "relational";
    }
    return "?";
}

MetricVariant metric_variant_from_string(std::string_view s) {
    if (s == "proto" || s == "prototypical") return MetricVariant::Prototypical;
    if (s == "matching") return MetricVariant::Matching;
    if (s == "relational") return MetricVariant::Relational;
    throw InvalidArgument("unknown metric variant '" + std::string(s) + "'");
}

Tensor class_average_matrix(const std::vector<std::size_t>& labels, std::size_t ways) {
    std::vector<std::size_t> count(ways, 0);
    for (auto l : labels) {
        if (l >= ways) throw InvalidArgument("label " + std::to_string(l) + " outside 0.." + std::to_string(ways - 1));
        ++count[l];
    }
    for (std::size_t c = 0; c < ways; ++c)
        if (!count[c]) throw InvalidArgument("class " + std::to_string(c) + " has no support embeddings");
    Tensor a({ways, labels.size()}, 0.0);
    for (std::size_t j = 0; j < labels.size(); ++j) a.at(labels[j], j) = 1.0 / static_cast<double>(count[labels[j]]);
    return a;
}

Tensor membership_matrix(const std::vector<std::size_t>& labels, std::size_t ways) {
    Tensor m({labels.size(), ways}, 0.0);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        if (labels[j] >= ways)
            throw InvalidArgument("label " + std::to_string(labels[j]) + " outside 0.." + std::to_string(ways - 1));
        m.at(j, labels[j]) = 1.0;
    }
    return m;
}

Var prototypes(Graph& g, Var support, const std::vector<std::size_t>& labels, std::size_t ways) {
    return g.matmul(g.constant(class_average_matrix(labels, ways)), support);
}

Tensor compute_prototypes(const Tensor& support, const std::vector<std::size_t>& labels, std::size_t ways) {
    if (support.rank() != 2 || support.dim(0) != labels.size())
        throw ShapeError("support embeddings " + shape_str(support.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
    Graph g;
    prototypes(g, g.constant(support), labels, ways);
    return g.forward({});
}

Var proto_logits(Graph& g, Var queries, Var protos) { return g.scale(g.pairwise_sq_dist(queries, protos), -1.0); }

// ---------------------------------------------------------------------------
// matching

void AttentionContext::init(ParamSet& params, Rng& rng) const {
    for (const char* p : {"ctx.q", "ctx.k", "ctx.v", "ctx.o"}) init_affine(params, p, width, width, Partition::Classifier, rng);
    init_affine(params, "ctx.ff1", width, ffn, Partition::Classifier, rng);
    init_affine(params, "ctx.ff2", ffn, width, Partition::Classifier, rng);
}

namespace {

struct ContextSequences {
    Var out;  // [Q, M + 1, n]
    Var attention;
};

// Sequence j holds the M supports followed by query j. The projections are
// row-wise, so they are applied once to the stacked embeddings and gathered.
ContextSequences contextualise(Graph& g, Var support, Var queries, std::size_t m, std::size_t q,
                               const AttentionContext& ctx) {
    Var base = g.concat({support, queries}, 0);
    std::vector<std::size_t> rows;
    rows.reserve(q * (m + 1));
    for (std::size_t j = 0; j < q; ++j) {
        for (std::size_t i = 0; i < m; ++i) rows.push_back(i);
        rows.push_back(m + j);
    }
    const Shape seq{q, m + 1, ctx.width};
    auto sequences = [&](Var x) { return g.reshape(g.gather_rows(x, rows), seq); };
    Var x = sequences(base);
    Var qs = sequences(build_affine(g, "ctx.q", base));
    Var ks = sequences(build_affine(g, "ctx.k", base));
    Var vs = sequences(build_affine(g, "ctx.v", base));
    Var att = g.attention(qs, ks, vs, ctx.heads);
    Var h = g.add(x, build_affine(g, "ctx.o", att));
    Var ff = build_affine(g, "ctx.ff2", g.relu(build_affine(g, "ctx.ff1", h)));
    return {g.add(h, ff), att};
}

}  // namespace

Var matching_context_attention(Graph& g, Var support, std::size_t n_support, Var queries, std::size_t n_queries,
                               const AttentionContext& ctx) {
    return contextualise(g, support, queries, n_support, n_queries, ctx).attention;
}

Var matching_probs(Graph& g, Var support, const std::vector<std::size_t>& labels, std::size_t ways, Var queries,
                   std::size_t n_queries, const AttentionContext* ctx) {
    Var member = g.constant(membership_matrix(labels, ways));
    Var dist;
    if (!ctx) {
        dist = g.pairwise_sq_dist(queries, support);
    } else {
        const std::size_t m = labels.size();
        const std::size_t q = n_queries;
        Var out = g.reshape(contextualise(g, support, queries, m, q, *ctx).out, {q * (m + 1), ctx->width});
        std::vector<std::size_t> query_rows, support_rows;
        for (std::size_t j = 0; j < q; ++j) {
            for (std::size_t i = 0; i < m; ++i) support_rows.push_back(j * (m + 1) + i);
            query_rows.push_back(j * (m + 1) + m);
        }
        Var qt = g.gather_rows(out, query_rows);
        Var st = g.reshape(g.gather_rows(out, support_rows), {q, m, ctx->width});
        dist = g.batched_sq_dist(qt, st);
    }
    return g.matmul(g.softmax(g.scale(dist, -1.0)), member);
}

// ---------------------------------------------------------------------------
// relational

Var relation_scores(Graph& g, Var queries, std::size_t n_queries, Var protos, std::size_t ways, std::size_t layers) {
    const std::size_t q = n_queries;
    std::vector<std::size_t> qi, pi;
    for (std::size_t j = 0; j < q; ++j)
        for (std::size_t c = 0; c < ways; ++c) {
            qi.push_back(j);
            pi.push_back(c);
        }
    Var pairs = g.concat({g.gather_rows(queries, qi), g.gather_rows(protos, pi)}, 1);
    Var s = g.sigmoid(build_mlp(g, kRelationPrefix, layers, pairs));
    return g.reshape(s, {q, ways});
}

// ---------------------------------------------------------------------------
// model

AttentionContext MetricModel::context() const {
    AttentionContext c;
    c.width = embed_dim;
    c.heads = heads;
    c.ffn = 2 * embed_dim;
    return c;
}

void MetricModel::init(ParamSet& params, Rng& rng) const {
    if (layers < 1) throw ConfigError("metric head needs at least one layer");
    init_front_end(params, front, rng);
    const std::size_t d = front.output_dim();
    switch (variant) {
        case MetricVariant::Prototypical: {
            std::vector<std::size_t> widths{d};
            for (std::size_t i = 0; i + 1 < layers; ++i) widths.push_back(hidden);
            widths.push_back(embed_dim);
            init_mlp(params, kEmbedPrefix, widths, Partition::Classifier, rng);
            break;
        }
        case MetricVariant::Matching:
            if (!identity_context && embed_dim % heads != 0)
                throw ConfigError("attention heads must divide the embedding width");
            init_affine(params, kMatchProjection, d, embed_dim, Partition::Classifier, rng);
            if (!identity_context) context().init(params, rng);
            break;
        case MetricVariant::Relational: {
            std::vector<std::size_t> widths{2 * d};
            for (std::size_t i = 0; i + 1 < layers; ++i) widths.push_back(hidden);
            widths.push_back(1);
            init_mlp(params, kRelationPrefix, widths, Partition::Classifier, rng);
            break;
        }
    }
}

Var MetricModel::embed(Graph& g, const FeatureBatch& batch) const {
    Var h = build_front_end(g, front, batch);
    switch (variant) {
        case MetricVariant::Prototypical: return build_mlp(g, kEmbedPrefix, layers, h);
        case MetricVariant::Matching: return build_affine(g, kMatchProjection, h);
        case MetricVariant::Relational: return h;
    }
    return h;
}

Var MetricModel::class_scores(Graph& g, const EpisodeBatch& ep) const {
    Var s = embed(g, ep.support);
    Var q = embed(g, ep.query);
    switch (variant) {
        case MetricVariant::Prototypical: return proto_logits(g, q, prototypes(g, s, ep.support_labels, ep.ways));
        case MetricVariant::Matching: {
            const AttentionContext ctx = context();
            return matching_probs(g, s, ep.support_labels, ep.ways, q, ep.query_labels.size(),
                                  identity_context ? nullptr : &ctx);
        }
        case MetricVariant::Relational:
            return relation_scores(g, q, ep.query_labels.size(), prototypes(g, s, ep.support_labels, ep.ways), ep.ways,
                                   layers);
    }
    return s;
}

Var MetricModel::episode_loss(Graph& g, const EpisodeBatch& ep) const {
    Var scores = class_scores(g, ep);
    switch (variant) {
        case MetricVariant::Prototypical: return g.softmax_cross_entropy(scores, ep.query_labels, Reduction::Mean);
        case MetricVariant::Matching: return g.nll_prob(scores, ep.query_labels, Reduction::Mean);
        case MetricVariant::Relational:
            return g.mean_squared_error(scores, membership_matrix(ep.query_labels, ep.ways));
    }
    return scores;
}

Objective metric_objective(const MetricModel& model, const EpisodeBatch& ep) {
    auto g = std::make_shared<Graph>();
    model.episode_loss(*g, ep);
    return [g](const ParamSet& p, Gradients* grad) {
        const double loss = g->forward(p).item();
        if (grad) *grad = g->backward();
        return loss;
    };
}

double metric_train_step(ParamSet& params, AdamState& adam, const MetricModel& model, const EpisodeBatch& ep,
                         double lr, PartitionMask mask) {
    Gradients g;
    const double loss = metric_objective(model, ep)(params, &g);
    adam_step(params, g, adam, lr, mask);
    return loss;
}

std::vector<std::size_t> metric_predict(const ParamSet& params, const MetricModel& model, const EpisodeBatch& ep) {
    Graph g;
    model.class_scores(g, ep);
    return argmax_rows(g.forward(params));
}

double metric_accuracy(const ParamSet& params, const MetricModel& model, const EpisodeBatch& ep) {
    return accuracy(metric_predict(params, model, ep), ep.query_labels);
}

TrainLog metric_meta_train(ParamSet& params, AdamState& adam, const MetricModel& model, const FeatureDataset& data,
                           const SplitSpec& split, const SamplerConfig& sampler, const EpochConfig& epochs,
                           PartitionMask trainable, Rng& rng, const EpochCallback& on_epoch) {
    sampler.validate();
    auto run_epoch = [&](std::size_t) {
        double total = 0.0;
        std::size_t steps = 0;
        for (const auto& batch : epoch_batches(split, sampler, epochs, rng)) {
            Gradients sum = params.zeros_like();
            double loss = 0.0;
            for (const auto& ep : batch) {
                Gradients g;
                loss += metric_objective(model, episode_batch(data, ep))(params, &g);
                accumulate(sum, g);
            }
            adam_step(params, sum, adam, epochs.outer_lr, trainable);
            total += loss / static_cast<double>(batch.size());
            ++steps;
        }
        return total / static_cast<double>(steps);
    };
    return run_epochs(epochs, run_epoch, on_epoch);
}

}  // namespace fskws
