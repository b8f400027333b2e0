#include "fskws/meta_optim.hpp"

#include <cmath>
#include <memory>

#include "fskws/error.hpp"
#include "fskws/layers.hpp"

namespace fskws {

const char* to_string(Variant v) noexcept {
    switch (v) {
        case Variant::Maml: return "maml";
        case Variant::Anil: return "anil";
        case Variant::Boil: return "boil";
        case Variant::Reptile: return "reptile";
    }
    return "?";
}

Variant variant_from_string(std::string_view s) {
    if (s == "maml") return Variant::Maml;
    if (s == "anil") return Variant::Anil;
    if (s == "boil") return Variant::Boil;
    if (s == "reptile") return Variant::Reptile;
    throw InvalidArgument("unknown variant '" + std::string(s) + "'");
}

PartitionMask inner_partitions(Variant v) noexcept {
    switch (v) {
        case Variant::Anil: return {Partition::Classifier};
        case Variant::Boil: return {Partition::Encoder, Partition::LayerWeights};
        default: return PartitionMask::all();
    }
}

PartitionMask InnerLoopConfig::mask() const noexcept { return inner_partitions(variant) & trainable; }

void InnerLoopConfig::validate() const {
    if (!(inner_lr > 0.0) || !std::isfinite(inner_lr)) throw ConfigError("inner learning rate must be positive");
    if (variant == Variant::Boil && !trainable.contains(Partition::Encoder))
        throw ConfigError(
            "boil adapts only the encoder in the inner loop; with a fixed encoder there is nothing to adapt");
    if (variant == Variant::Anil && !trainable.contains(Partition::Encoder))
        throw ConfigError("anil with a fixed encoder is identical to maml; use --algo maml");
}

ParamSet inner_adapt(const ParamSet& theta, const Objective& support_loss, const InnerLoopConfig& cfg,
                     std::size_t steps) {
    cfg.validate();
    ParamSet p = theta;
    const PartitionMask mask = cfg.mask();
    for (std::size_t s = 0; s < steps; ++s) {
        Gradients g;
        support_loss(p, &g);
        p = sgd_step(std::move(p), g, cfg.inner_lr, mask);
    }
    return p;
}

Gradients fomaml_outer_gradient(const ParamSet& theta, const std::vector<TaskObjectives>& tasks,
                                const InnerLoopConfig& cfg, double* mean_query_loss) {
    if (tasks.empty()) throw InvalidArgument("outer step needs at least one task");
    Gradients total = theta.zeros_like();
    double loss = 0.0;
    for (const auto& t : tasks) {
        if (t.query_count == 0) throw InvalidArgument("empty query set");
        const ParamSet adapted = inner_adapt(theta, t.support, cfg, cfg.steps_train);
        Gradients g;
        loss += t.query(adapted, &g) / static_cast<double>(t.query_count);
        accumulate(total, g);
    }
    if (mean_query_loss) *mean_query_loss = loss / static_cast<double>(tasks.size());
    return total;
}

double fomaml_outer_step(ParamSet& theta, const std::vector<TaskObjectives>& tasks, const InnerLoopConfig& cfg,
                         AdamState& adam, double outer_lr) {
    double loss = 0.0;
    const Gradients g = fomaml_outer_gradient(theta, tasks, cfg, &loss);
    adam_step(theta, g, adam, outer_lr, cfg.trainable);
    return loss;
}

ParamSet reptile_outer_step(const ParamSet& theta, const std::vector<ParamSet>& adapted, double beta,
                            PartitionMask mask) {
    if (adapted.empty()) throw InvalidArgument("reptile step needs at least one adapted parameter set");
    ParamSet out = theta;
    for (const auto& id : theta.ids()) {
        if (!mask.contains(theta.partition(id))) continue;
        const Tensor& w = theta.value(id);
        Tensor& o = out.mutable_value(id);
        for (const auto& a : adapted) {
            if (!a.contains(id)) throw ShapeError("adapted parameters lack '" + id + "'");
            const Tensor& v = a.value(id);
            if (v.shape() != w.shape())
                throw ShapeError("adapted '" + id + "' has shape " + shape_str(v.shape()) + ", expected " +
                                 shape_str(w.shape()));
            for (std::size_t i = 0; i < w.size(); ++i) o[i] -= beta * (w[i] - v[i]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// classifier model

void ClassifierModel::init(ParamSet& params, Rng& rng) const {
    if (layers < 1) throw ConfigError("classifier needs at least one layer");
    init_front_end(params, front, rng);
    std::vector<std::size_t> widths{front.output_dim()};
    for (std::size_t i = 0; i + 1 < layers; ++i) widths.push_back(hidden);
    widths.push_back(ways);
    init_mlp(params, kHeadPrefix, widths, Partition::Classifier, rng);
}

Var ClassifierModel::penultimate(Graph& g, const FeatureBatch& batch) const {
    Var h = build_front_end(g, front, batch);
    return build_mlp(g, kHeadPrefix, layers - 1, h, true);
}

Var ClassifierModel::logits(Graph& g, const FeatureBatch& batch) const {
    return build_affine(g, output_layer(), penultimate(g, batch));
}

std::string ClassifierModel::output_layer() const { return mlp_layer_prefix(kHeadPrefix, layers - 1); }

Objective classifier_objective(const ClassifierModel& model, const FeatureBatch& batch,
                               std::vector<std::size_t> labels, Reduction reduction) {
    auto g = std::make_shared<Graph>();
    g->softmax_cross_entropy(model.logits(*g, batch), std::move(labels), reduction);
    return [g](const ParamSet& p, Gradients* grad) {
        const double loss = g->forward(p).item();
        if (grad) *grad = g->backward();
        return loss;
    };
}

TaskObjectives classifier_task(const ClassifierModel& model, const EpisodeBatch& ep) {
    if (ep.ways != model.ways)
        throw ShapeError("episode has " + std::to_string(ep.ways) + " classes, classifier outputs " +
                         std::to_string(model.ways));
    TaskObjectives t;
    t.support = classifier_objective(model, ep.support, ep.support_labels, Reduction::Mean);
    t.query = classifier_objective(model, ep.query, ep.query_labels, Reduction::Sum);
    t.query_count = ep.query_labels.size();
    return t;
}

std::vector<std::size_t> argmax_rows(const Tensor& scores) {
    if (scores.rank() != 2) throw ShapeError("argmax_rows expects a matrix, got " + shape_str(scores.shape()));
    std::vector<std::size_t> out(scores.dim(0), 0);
    for (std::size_t r = 0; r < scores.dim(0); ++r)
        for (std::size_t c = 1; c < scores.dim(1); ++c)
            if (scores.at(r, c) > scores.at(r, out[r])) out[r] = c;
    return out;
}

double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& labels) {
    if (predicted.size() != labels.size() || labels.empty())
        throw InvalidArgument("accuracy needs equally sized, non-empty prediction and label lists");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

std::vector<std::size_t> classifier_predict(const ParamSet& params, const ClassifierModel& model,
                                            const FeatureBatch& batch) {
    Graph g;
    model.logits(g, batch);
    return argmax_rows(g.forward(params));
}

double adapt_and_eval(const ParamSet& theta, const ClassifierModel& model, const EpisodeBatch& ep,
                      const InnerLoopConfig& cfg) {
    const Objective support = classifier_objective(model, ep.support, ep.support_labels, Reduction::Mean);
    const ParamSet adapted = inner_adapt(theta, support, cfg, cfg.steps_test);
    return accuracy(classifier_predict(adapted, model, ep.query), ep.query_labels);
}

// ---------------------------------------------------------------------------
// training loop

void EpochConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (tasks_per_epoch < 1) throw ConfigError("tasks_per_epoch must be at least 1");
    if (meta_batch < 1) throw ConfigError("meta_batch must be at least 1");
    if (!(outer_lr > 0.0) || !std::isfinite(outer_lr)) throw ConfigError("outer learning rate must be positive");
}

TrainLog run_epochs(const EpochConfig& cfg, const std::function<double(std::size_t)>& run_epoch,
                    const EpochCallback& on_epoch) {
    cfg.validate();
    TrainLog log;
    std::size_t stale = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const double loss = run_epoch(e);
        if (!log.epoch_loss.empty()) {
            stale = log.epoch_loss.back() - loss < cfg.tolerance ? stale + 1 : 0;
        }
        log.epoch_loss.push_back(loss);
        if (on_epoch) on_epoch(e, loss);
        if (cfg.patience > 0 && stale >= cfg.patience) {
            log.converged = true;
            break;
        }
    }
    return log;
}

std::vector<std::vector<Episode>> epoch_batches(const SplitSpec& split, const SamplerConfig& sampler,
                                                const EpochConfig& cfg, Rng& rng) {
    std::vector<std::vector<Episode>> out;
    for (std::size_t t = 0; t < cfg.tasks_per_epoch; t += cfg.meta_batch) {
        std::vector<Episode> batch;
        for (std::size_t i = t; i < std::min(cfg.tasks_per_epoch, t + cfg.meta_batch); ++i)
            batch.push_back(sample_episode(split, Phase::Train, sampler, rng));
        out.push_back(std::move(batch));
    }
    return out;
}

TrainLog meta_train(ParamSet& theta, AdamState& adam, const ClassifierModel& model, const FeatureDataset& data,
                    const SplitSpec& split, const SamplerConfig& sampler, const InnerLoopConfig& inner,
                    const EpochConfig& epochs, Rng& rng, const EpochCallback& on_epoch) {
    inner.validate();
    sampler.validate();
    auto run_epoch = [&](std::size_t) {
        double total = 0.0;
        std::size_t steps = 0;
        for (const auto& batch : epoch_batches(split, sampler, epochs, rng)) {
            std::vector<TaskObjectives> tasks;
            for (const auto& ep : batch) tasks.push_back(classifier_task(model, episode_batch(data, ep)));
            if (inner.variant == Variant::Reptile) {
                std::vector<ParamSet> adapted;
                double loss = 0.0;
                for (const auto& t : tasks) {
                    adapted.push_back(inner_adapt(theta, t.support, inner, inner.steps_train));
                    loss += t.query(adapted.back(), nullptr) / static_cast<double>(t.query_count);
                }
                theta = reptile_outer_step(theta, adapted, epochs.outer_lr, inner.trainable);
                total += loss / static_cast<double>(tasks.size());
            } else {
                total += fomaml_outer_step(theta, tasks, inner, adam, epochs.outer_lr);
            }
            ++steps;
        }
        return total / static_cast<double>(steps);
    };
    return run_epochs(epochs, run_epoch, on_epoch);
}

}  // namespace fskws
