#pragma once

#include <string_view>
#include <vector>

#include "fskws/episodes.hpp"
#include "fskws/features.hpp"
#include "fskws/graph.hpp"
#include "fskws/meta_optim.hpp"
#include "fskws/optim.hpp"

namespace fskws {

enum class MetricVariant { Prototypical, Matching, Relational };

const char* to_string(MetricVariant v) noexcept;
MetricVariant metric_variant_from_string(std::string_view s);

/// [N, M] matrix whose row c averages the rows of class c; throws when a
/// class has no member.
Tensor class_average_matrix(const std::vector<std::size_t>& labels, std::size_t ways);
/// [M, N] one-hot membership.
Tensor membership_matrix(const std::vector<std::size_t>& labels, std::size_t ways);

/// Per-class mean of the support embeddings [M, n] -> [N, n].
Var prototypes(Graph& g, Var support, const std::vector<std::size_t>& labels, std::size_t ways);
Tensor compute_prototypes(const Tensor& support, const std::vector<std::size_t>& labels, std::size_t ways);

/// -||q - h_w||^2 for every query row and prototype: [Q, N].
Var proto_logits(Graph& g, Var queries, Var protos);

/// One encoder layer: multi-head attention and a feed-forward block, each
/// with a residual connection. Parameters live under `ctx.`.
struct AttentionContext {
    std::size_t width = 64;
    std::size_t heads = 4;
    std::size_t ffn = 128;

    void init(ParamSet& params, Rng& rng) const;
};

/// Class distribution [Q, N]. Each query is contextualised jointly with all
/// supports; `ctx` null means the identity context.
Var matching_probs(Graph& g, Var support, const std::vector<std::size_t>& labels, std::size_t ways, Var queries,
                   std::size_t n_queries, const AttentionContext* ctx);

/// Attention probabilities of the context layer, for inspection.
Var matching_context_attention(Graph& g, Var support, std::size_t n_support, Var queries, std::size_t n_queries,
                               const AttentionContext& ctx);

/// sigmoid(head(q ++ h_w)) for every query and prototype: [Q, N].
Var relation_scores(Graph& g, Var queries, std::size_t n_queries, Var protos, std::size_t ways, std::size_t layers);

inline constexpr const char* kEmbedPrefix = "emb";
inline constexpr const char* kMatchProjection = "match.proj";
inline constexpr const char* kRelationPrefix = "rel";

struct MetricModel {
    MetricVariant variant = MetricVariant::Prototypical;
    FrontEndSpec front;
    std::size_t hidden = 64;
    std::size_t embed_dim = 64;
    /// affine layers of the embedding (prototypical) or relation head
    std::size_t layers = 4;
    std::size_t heads = 4;
    bool identity_context = false;

    AttentionContext context() const;
    void init(ParamSet& params, Rng& rng) const;
    /// Representation used for distances and dumps.
    Var embed(Graph& g, const FeatureBatch& batch) const;
    /// [Q, N] scores whose row argmax is the prediction.
    Var class_scores(Graph& g, const EpisodeBatch& ep) const;
    /// Scalar training loss of the episode.
    Var episode_loss(Graph& g, const EpisodeBatch& ep) const;
};

Objective metric_objective(const MetricModel& model, const EpisodeBatch& ep);

/// One Adam step on the episode loss; returns the loss before the step.
double metric_train_step(ParamSet& params, AdamState& adam, const MetricModel& model, const EpisodeBatch& ep,
                         double lr = kDefaultAdamLr, PartitionMask mask = PartitionMask::all());

std::vector<std::size_t> metric_predict(const ParamSet& params, const MetricModel& model, const EpisodeBatch& ep);
double metric_accuracy(const ParamSet& params, const MetricModel& model, const EpisodeBatch& ep);

/// Episodic training; the gradients of a meta-batch are summed before each Adam step.
TrainLog metric_meta_train(ParamSet& params, AdamState& adam, const MetricModel& model, const FeatureDataset& data,
                           const SplitSpec& split, const SamplerConfig& sampler, const EpochConfig& epochs,
                           PartitionMask trainable, Rng& rng, const EpochCallback& on_epoch = {});

}  // namespace fskws
