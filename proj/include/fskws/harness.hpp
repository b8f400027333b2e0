#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fskws/episodes.hpp"
#include "fskws/features.hpp"
#include "fskws/meta_metric.hpp"
#include "fskws/meta_optim.hpp"
#include "fskws/optim.hpp"
#include "fskws/params.hpp"
#include "fskws/rng.hpp"

namespace fskws {

enum class Algorithm { Maml, Anil, Boil, Reptile, Proto, Matching, Relational, Transfer1, Scratch };

const char* to_string(Algorithm a) noexcept;
Algorithm algorithm_from_string(std::string_view s);
bool is_optimization_based(Algorithm a) noexcept;
bool is_metric_based(Algorithm a) noexcept;

/// Frozen: pooled encoder features. Scratch: raw frames through a randomly
/// initialised per-frame encoder.
enum class EncoderMode { Frozen, Scratch };
enum class EncoderTrain { Fixed, Finetune };

const char* to_string(EncoderMode m) noexcept;
EncoderMode encoder_mode_from_string(std::string_view s);
const char* to_string(EncoderTrain t) noexcept;
EncoderTrain encoder_train_from_string(std::string_view s);

struct RunConfig {
    Algorithm algorithm = Algorithm::Proto;
    /// Learning algorithm of the scratch baseline.
    Algorithm scratch_algo = Algorithm::Proto;
    EncoderMode encoder = EncoderMode::Frozen;
    EncoderTrain encoder_train = EncoderTrain::Finetune;
    std::size_t ways = 12;
    std::size_t shots = 5;
    std::size_t queries = 5;
    std::uint64_t seed = 0;
    double inner_lr = kDefaultSgdLr;
    double outer_lr = kDefaultAdamLr;
    std::size_t inner_steps_train = 5;
    std::size_t inner_steps_test = 20;
    std::size_t meta_batch = 4;
    std::size_t epochs = 20;
    std::size_t tasks_per_epoch = 1000;
    double tolerance = 1e-4;
    std::size_t patience = 3;
    std::size_t hidden = 64;
    std::size_t embed_dim = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    bool identity_context = false;
    /// Width of each of the two per-frame layers of the scratch encoder.
    std::size_t frame_width = 64;
    std::size_t pretrain_batch = 8;
    std::string data;
    std::string split;
    std::string suite;

    /// Throws ConfigError naming the violated constraint.
    void validate() const;
    /// The scratch alias replaced by its concrete algorithm and encoder.
    RunConfig resolved() const;

    PartitionMask trainable() const noexcept;
    InnerLoopConfig inner_loop() const;
    SamplerConfig sampler() const;
    EpochConfig epoch_config() const;

    /// Canonical JSON with sorted keys.
    std::string to_json() const;
    /// Keys override `base`; unknown keys and ill-typed values are rejected.
    static RunConfig from_json(std::string_view json, const RunConfig& base);
    static RunConfig from_json(std::string_view json);
    /// Hash of every setting except the file paths.
    std::string fingerprint() const;
};

RunConfig load_config(const std::string& path, const RunConfig& base = {});

/// A model with its parameters and training state.
struct Learner {
    RunConfig config;
    FrontEndSpec front;
    ParamSet params;
    AdamState adam;
    Rng rng;
    std::vector<double> epoch_loss;

    /// Concrete algorithm after resolving the scratch alias.
    Algorithm algorithm() const { return config.resolved().algorithm; }
    ClassifierModel classifier() const;
    MetricModel metric() const;
};

FrontEndSpec front_end_for(const RunConfig& config, const FeatureDataset& data);
void check_compatible(const FrontEndSpec& front, const FeatureDataset& data);

/// Validated config, randomly initialised parameters seeded by `config.seed`.
Learner make_learner(const RunConfig& config, const FeatureDataset& data);

TrainLog train(Learner& learner, const FeatureDataset& data, const SplitSpec& split,
               const EpochCallback& on_epoch = {});

/// Accuracy on one episode through the algorithm's adapt or predict path.
/// The learner is not modified.
double episode_accuracy(const Learner& learner, const FeatureDataset& data, const Episode& episode);

// transfer baseline

inline constexpr std::size_t kTransferPretrainWays = 20;

/// Supervised classification over the meta-train keywords.
TrainLog transfer_pretrain(Learner& learner, const FeatureDataset& data, const SplitSpec& split,
                           const EpochCallback& on_epoch = {});
/// Accuracy of the pretraining classifier on its own training utterances.
double transfer_train_accuracy(const Learner& learner, const FeatureDataset& data, const SplitSpec& split);
/// Copy of `params` whose output layer is a fresh `ways`-class layer drawn from `seed`.
ParamSet replace_output_layer(const ParamSet& params, const ClassifierModel& model, std::size_t ways,
                              std::uint64_t seed);
/// Fresh head seeded from the episode, then `steps` SGD steps on the support set.
ParamSet transfer_adapt(const Learner& learner, const EpisodeBatch& episode, const Episode& source, std::size_t steps);
/// Query accuracy after transfer_adapt.
double transfer_adapt_eval(const Learner& learner, const EpisodeBatch& episode, const Episode& source,
                           std::size_t steps);

// checkpoints

std::string serialize_checkpoint(const Learner& learner);
Learner parse_checkpoint(const std::string& text);
void save_checkpoint(const Learner& learner, const std::string& path);
Learner load_checkpoint(const std::string& path);

// evaluation

struct EvalOptions {
    std::size_t threads = 1;
    /// Extra support redraws per task (0 disables).
    std::size_t resample_supports = 0;
    /// Needed when resample_supports > 0.
    const SplitSpec* split = nullptr;
    std::uint64_t resample_seed = 0;
};

struct EvalReport {
    std::string algorithm;
    std::string suite_id;
    std::string config_fingerprint;
    std::vector<double> accuracies;
    double mean = 0.0;
    double std = 0.0;
    /// Per task: accuracies under the support redraws.
    std::vector<std::vector<double>> resampled;
    double mean_resampled = 0.0;
    double std_resampled = 0.0;

    /// One JSON line per task, then a summary line.
    std::string to_jsonl() const;
    static EvalReport from_jsonl(const std::string& text);
};

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;
};

/// Mean and sample (n - 1) standard deviation; std is 0 for a single value.
MeanStd mean_and_std(const std::vector<double>& values);

EvalReport make_report(std::string algorithm, std::string suite_id, std::string config_fingerprint,
                       std::vector<double> accuracies);

EvalReport evaluate_suite(const Learner& learner, const FeatureDataset& data, const Suite& suite,
                          const EvalOptions& options = {});

/// Text table of several reports, one row each.
std::string summarize_reports(const std::vector<EvalReport>& reports);

// embeddings

/// [B, n] representation used by the learner's classifier or metric.
Tensor embed_dataset(const Learner& learner, const FeatureDataset& data);
std::string serialize_embeddings(const Learner& learner, const FeatureDataset& data);
void dump_embeddings(const Learner& learner, const FeatureDataset& data, const std::string& path);

}  // namespace fskws
