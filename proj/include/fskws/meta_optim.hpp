#pragma once

#include <cstdint>
#include <functional>
#include <string_view>
#include <vector>

#include "fskws/episodes.hpp"
#include "fskws/features.hpp"
#include "fskws/graph.hpp"
#include "fskws/optim.hpp"
#include "fskws/params.hpp"

namespace fskws {

enum class Variant { Maml, Anil, Boil, Reptile };

const char* to_string(Variant v) noexcept;
Variant variant_from_string(std::string_view s);

/// Partitions a variant adapts in the inner loop.
PartitionMask inner_partitions(Variant v) noexcept;

struct InnerLoopConfig {
    Variant variant = Variant::Maml;
    double inner_lr = kDefaultSgdLr;
    std::size_t steps_train = 5;
    std::size_t steps_test = 20;
    /// Partitions that may change at all; a fixed encoder removes Encoder.
    PartitionMask trainable = PartitionMask::all();

    /// Variant partitions restricted to the trainable ones.
    PartitionMask mask() const noexcept;
    void validate() const;
};

/// Scalar loss at `params`; fills `grad` when it is not null.
using Objective = std::function<double(const ParamSet& params, Gradients* grad)>;

/// `steps` full-batch SGD steps on `support_loss` over the inner mask.
ParamSet inner_adapt(const ParamSet& theta, const Objective& support_loss, const InnerLoopConfig& cfg,
                     std::size_t steps);

struct TaskObjectives {
    Objective support;
    /// Summed over the query set.
    Objective query;
    std::size_t query_count = 1;
};

/// Sum over tasks, in order, of the query-loss gradient at each task's
/// adapted parameters. `mean_query_loss` receives the mean per-query loss.
Gradients fomaml_outer_gradient(const ParamSet& theta, const std::vector<TaskObjectives>& tasks,
                                const InnerLoopConfig& cfg, double* mean_query_loss = nullptr);

/// One Adam step on the first-order outer gradient; returns the mean query loss.
double fomaml_outer_step(ParamSet& theta, const std::vector<TaskObjectives>& tasks, const InnerLoopConfig& cfg,
                         AdamState& adam, double outer_lr);

/// theta - beta * sum_i (theta - adapted_i) over the masked partitions.
ParamSet reptile_outer_step(const ParamSet& theta, const std::vector<ParamSet>& adapted, double beta,
                            PartitionMask mask = PartitionMask::all());

/// Front end followed by a ReLU perceptron classifier `head.fc<i>`.
struct ClassifierModel {
    FrontEndSpec front;
    std::size_t hidden = 64;
    /// affine layers in the head, the output layer included
    std::size_t layers = 4;
    std::size_t ways = 12;

    void init(ParamSet& params, Rng& rng) const;
    Var logits(Graph& g, const FeatureBatch& batch) const;
    /// Input of the output layer.
    Var penultimate(Graph& g, const FeatureBatch& batch) const;
    std::string output_layer() const;
};

inline constexpr const char* kHeadPrefix = "head";

/// Cross-entropy of the classifier over a fixed batch. The graph is built once
/// and re-evaluated for every parameter set.
Objective classifier_objective(const ClassifierModel& model, const FeatureBatch& batch,
                               std::vector<std::size_t> labels, Reduction reduction);

TaskObjectives classifier_task(const ClassifierModel& model, const EpisodeBatch& episode);

/// Row-wise argmax; ties go to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& scores);
double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels);

std::vector<std::size_t> classifier_predict(const ParamSet& params, const ClassifierModel& model,
                                            const FeatureBatch& batch);

/// Inner adaptation with steps_test on the support set, then query accuracy.
/// `theta` is not modified.
double adapt_and_eval(const ParamSet& theta, const ClassifierModel& model, const EpisodeBatch& episode,
                      const InnerLoopConfig& cfg);

struct EpochConfig {
    std::size_t epochs = 20;
    std::size_t tasks_per_epoch = 1000;
    std::size_t meta_batch = 4;
    double outer_lr = kDefaultAdamLr;
    /// stop once the epoch-mean loss improves by less than `tolerance` for
    /// `patience` consecutive epochs
    double tolerance = 1e-4;
    std::size_t patience = 3;

    void validate() const;
};

struct TrainLog {
    std::vector<double> epoch_loss;
    bool converged = false;
};

/// Called after every epoch with the epoch index and its mean loss.
using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Epoch loop with the early-stopping rule; `run_epoch` returns the epoch's mean loss.
TrainLog run_epochs(const EpochConfig& cfg, const std::function<double(std::size_t)>& run_epoch,
                    const EpochCallback& on_epoch = {});

/// Sampled meta-train episodes of one epoch, in meta-batches.
std::vector<std::vector<Episode>> epoch_batches(const SplitSpec& split, const SamplerConfig& sampler,
                                                const EpochConfig& cfg, Rng& rng);

/// Optimization-based meta-training (first-order MAML family or Reptile).
TrainLog meta_train(ParamSet& theta, AdamState& adam, const ClassifierModel& model, const FeatureDataset& data,
                    const SplitSpec& split, const SamplerConfig& sampler, const InnerLoopConfig& inner,
                    const EpochConfig& epochs, Rng& rng, const EpochCallback& on_epoch = {});

}  // namespace fskws
