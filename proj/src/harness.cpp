#include "fskws/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <thread>

#include "fskws/error.hpp"
#include "fskws/layers.hpp"
#include "json.hpp"
#include "text_io.hpp"

namespace fskws {

using nlohmann::json;

namespace {

template <typename E>
struct Names {
    E value;
    const char* name;
};

constexpr Names<Algorithm> kAlgorithms[] = {
    {Algorithm::Maml, "maml"},           {Algorithm::Anil, "anil"},         {Algorithm::Boil, "boil"},
    {Algorithm::Reptile, "reptile"},     {Algorithm::Proto, "proto"},       {Algorithm::Matching, "matching"},
    {Algorithm::Relational, "relational"}, {Algorithm::Transfer1, "transfer1"}, {Algorithm::Scratch, "scratch"},
};

std::string algorithm_choices() {
    std::string s;
    for (const auto& a : kAlgorithms) s += (s.empty() ? "" : "|") + std::string(a.name);
    return s;
}

Variant variant_of(Algorithm a) {
    switch (a) {
        case Algorithm::Maml: return Variant::Maml;
        case Algorithm::Anil: return Variant::Anil;
        case Algorithm::Boil: return Variant::Boil;
        case Algorithm::Reptile: return Variant::Reptile;
        default: throw InvalidArgument(std::string(to_string(a)) + " is not optimization-based");
    }
}

MetricVariant metric_variant_of(Algorithm a) {
    switch (a) {
        case Algorithm::Proto: return MetricVariant::Prototypical;
        case Algorithm::Matching: return MetricVariant::Matching;
        case Algorithm::Relational: return MetricVariant::Relational;
        default: throw InvalidArgument(std::string(to_string(a)) + " is not metric-based");
    }
}

}  // namespace

const char* to_string(Algorithm a) noexcept {
    for (const auto& n : kAlgorithms)
        if (n.value == a) return n.name;
    return "?";
}

Algorithm algorithm_from_string(std::string_view s) {
    for (const auto& n : kAlgorithms)
        if (s == n.name) return n.value;
    throw ConfigError("unknown algorithm '" + std::string(s) + "'; expected one of " + algorithm_choices());
}

bool is_optimization_based(Algorithm a) noexcept {
    return a == Algorithm::Maml || a == Algorithm::Anil || a == Algorithm::Boil || a == Algorithm::Reptile;
}

bool is_metric_based(Algorithm a) noexcept {
    return a == Algorithm::Proto || a == Algorithm::Matching || a == Algorithm::Relational;
}

const char* to_string(EncoderMode m) noexcept { return m == EncoderMode::Frozen ? "frozen" : "scratch"; }

EncoderMode encoder_mode_from_string(std::string_view s) {
    if (s == "frozen") return EncoderMode::Frozen;
    if (s == "scratch") return EncoderMode::Scratch;
    throw ConfigError("unknown encoder '" + std::string(s) + "'; expected frozen|scratch");
}

const char* to_string(EncoderTrain t) noexcept { return t == EncoderTrain::Fixed ? "fixed" : "finetune"; }

EncoderTrain encoder_train_from_string(std::string_view s) {
    if (s == "fixed") return EncoderTrain::Fixed;
    if (s == "finetune") return EncoderTrain::Finetune;
    throw ConfigError("unknown encoder training '" + std::string(s) + "'; expected fixed|finetune");
}

// ---------------------------------------------------------------------------
// run configuration

RunConfig RunConfig::resolved() const {
    RunConfig r = *this;
    if (algorithm == Algorithm::Scratch) {
        r.algorithm = scratch_algo;
        r.encoder = EncoderMode::Scratch;
    }
    return r;
}

void RunConfig::validate() const {
    if (scratch_algo == Algorithm::Scratch) throw ConfigError("scratch_algo must name a concrete algorithm");
    const RunConfig r = resolved();
    auto positive = [](double v, const char* what) {
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(what) + " must be positive");
    };
    auto at_least = [](std::size_t v, std::size_t lo, const char* what) {
        if (v < lo) throw ConfigError(std::string(what) + " must be at least " + std::to_string(lo));
    };
    at_least(ways, 3, "ways (keywords plus unknown and silence)");
    at_least(shots, 1, "shots");
    at_least(queries, 1, "queries");
    at_least(inner_steps_train, 0, "inner_steps_train");
    at_least(meta_batch, 1, "meta_batch");
    at_least(epochs, 1, "epochs");
    at_least(tasks_per_epoch, 1, "tasks_per_epoch");
    at_least(hidden, 1, "hidden");
    at_least(embed_dim, 1, "embed_dim");
    at_least(layers, 2, "layers");
    at_least(heads, 1, "heads");
    at_least(frame_width, 1, "frame_width");
    at_least(pretrain_batch, 1, "pretrain_batch");
    positive(inner_lr, "inner_lr");
    positive(outer_lr, "outer_lr");
    if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be non-negative");
    if (r.algorithm == Algorithm::Matching && !identity_context && embed_dim % heads != 0)
        throw ConfigError("heads (" + std::to_string(heads) + ") must divide embed_dim (" +
                          std::to_string(embed_dim) + ")");
    if (r.encoder == EncoderMode::Scratch && encoder_train == EncoderTrain::Fixed)
        throw ConfigError("the scratch encoder is randomly initialised and must be trained; use --encoder-train finetune");
    if (r.algorithm == Algorithm::Boil && encoder_train == EncoderTrain::Fixed)
        throw ConfigError(
            "boil updates only the encoder in the inner loop, so with a fixed encoder it cannot perform inner-loop "
            "updates; use --encoder-train finetune");
    if (r.algorithm == Algorithm::Anil && encoder_train == EncoderTrain::Fixed)
        throw ConfigError("anil with a fixed encoder is the same as maml; use --algo maml");
}

PartitionMask RunConfig::trainable() const noexcept {
    return encoder_train == EncoderTrain::Fixed ? PartitionMask::all().without(Partition::Encoder)
                                                : PartitionMask::all();
}

InnerLoopConfig RunConfig::inner_loop() const {
    InnerLoopConfig c;
    const Algorithm a = resolved().algorithm;
    if (is_optimization_based(a)) c.variant = variant_of(a);
    c.inner_lr = inner_lr;
    c.steps_train = inner_steps_train;
    c.steps_test = inner_steps_test;
    c.trainable = trainable();
    return c;
}

SamplerConfig RunConfig::sampler() const {
    SamplerConfig s;
    s.ways = ways;
    s.shots = shots;
    s.queries = queries;
    s.tasks_per_epoch = tasks_per_epoch;
    s.seed = seed;
    return s;
}

EpochConfig RunConfig::epoch_config() const {
    EpochConfig e;
    e.epochs = epochs;
    e.tasks_per_epoch = tasks_per_epoch;
    e.meta_batch = meta_batch;
    e.outer_lr = outer_lr;
    e.tolerance = tolerance;
    e.patience = patience;
    return e;
}

namespace {

json config_json(const RunConfig& c, bool with_paths) {
    json j = {
        {"algo", to_string(c.algorithm)},
        {"scratch_algo", to_string(c.scratch_algo)},
        {"encoder", to_string(c.encoder)},
        {"encoder_train", to_string(c.encoder_train)},
        {"ways", c.ways},
        {"shots", c.shots},
        {"queries", c.queries},
        {"seed", c.seed},
        {"inner_lr", c.inner_lr},
        {"outer_lr", c.outer_lr},
        {"inner_steps_train", c.inner_steps_train},
        {"inner_steps_test", c.inner_steps_test},
        {"meta_batch", c.meta_batch},
        {"epochs", c.epochs},
        {"tasks_per_epoch", c.tasks_per_epoch},
        {"tolerance", c.tolerance},
        {"patience", c.patience},
        {"hidden", c.hidden},
        {"embed_dim", c.embed_dim},
        {"layers", c.layers},
        {"heads", c.heads},
        {"identity_context", c.identity_context},
        {"frame_width", c.frame_width},
        {"pretrain_batch", c.pretrain_batch},
    };
    if (with_paths) {
        j["data"] = c.data;
        j["split"] = c.split;
        j["suite"] = c.suite;
    }
    return j;
}

template <typename T>
T typed(const json& v, const std::string& key) {
    try {
        if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
            if (!v.is_number_unsigned()) throw ConfigError("");
        } else if constexpr (std::is_same_v<T, double>) {
            if (!v.is_number()) throw ConfigError("");
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) throw ConfigError("");
        } else {
            if (!v.is_string()) throw ConfigError("");
        }
        return v.get<T>();
    } catch (const std::exception&) {
        const char* want = std::is_same_v<T, std::string> ? "a string"
                           : std::is_same_v<T, bool>      ? "a boolean"
                           : std::is_same_v<T, double>    ? "a number"
                                                          : "a non-negative integer";
        throw ConfigError("configuration key '" + key + "' must be " + want + ", got " + v.dump());
    }
}

}  // namespace

std::string RunConfig::to_json() const { return config_json(*this, true).dump(); }

std::string RunConfig::fingerprint() const { return text::fingerprint(config_json(*this, false).dump()); }

RunConfig RunConfig::from_json(std::string_view text, const RunConfig& base) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
    RunConfig c = base;
    for (const auto& [key, v] : j.items()) {
        if (key == "algo") c.algorithm = algorithm_from_string(typed<std::string>(v, key));
        else if (key == "scratch_algo") c.scratch_algo = algorithm_from_string(typed<std::string>(v, key));
        else if (key == "encoder") c.encoder = encoder_mode_from_string(typed<std::string>(v, key));
        else if (key == "encoder_train") c.encoder_train = encoder_train_from_string(typed<std::string>(v, key));
        else if (key == "ways") c.ways = typed<std::size_t>(v, key);
        else if (key == "shots") c.shots = typed<std::size_t>(v, key);
        else if (key == "queries") c.queries = typed<std::size_t>(v, key);
        else if (key == "seed") c.seed = typed<std::uint64_t>(v, key);
        else if (key == "inner_lr") c.inner_lr = typed<double>(v, key);
        else if (key == "outer_lr") c.outer_lr = typed<double>(v, key);
        else if (key == "inner_steps_train") c.inner_steps_train = typed<std::size_t>(v, key);
        else if (key == "inner_steps_test") c.inner_steps_test = typed<std::size_t>(v, key);
        else if (key == "meta_batch") c.meta_batch = typed<std::size_t>(v, key);
        else if (key == "epochs") c.epochs = typed<std::size_t>(v, key);
        else if (key == "tasks_per_epoch") c.tasks_per_epoch = typed<std::size_t>(v, key);
        else if (key == "tolerance") c.tolerance = typed<double>(v, key);
        else if (key == "patience") c.patience = typed<std::size_t>(v, key);
        else if (key == "hidden") c.hidden = typed<std::size_t>(v, key);
        else if (key == "embed_dim") c.embed_dim = typed<std::size_t>(v, key);
        else if (key == "layers") c.layers = typed<std::size_t>(v, key);
        else if (key == "heads") c.heads = typed<std::size_t>(v, key);
        else if (key == "identity_context") c.identity_context = typed<bool>(v, key);
        else if (key == "frame_width") c.frame_width = typed<std::size_t>(v, key);
        else if (key == "pretrain_batch") c.pretrain_batch = typed<std::size_t>(v, key);
        else if (key == "data") c.data = typed<std::string>(v, key);
        else if (key == "split") c.split = typed<std::string>(v, key);
        else if (key == "suite") c.suite = typed<std::string>(v, key);
        else throw ConfigError("unknown configuration key '" + key + "'");
    }
    return c;
}

RunConfig RunConfig::from_json(std::string_view text) { return from_json(text, RunConfig{}); }

RunConfig load_config(const std::string& path, const RunConfig& base) {
    return RunConfig::from_json(text::read_file(path), base);
}

// ---------------------------------------------------------------------------
// learner

FrontEndSpec front_end_for(const RunConfig& config, const FeatureDataset& data) {
    const RunConfig r = config.resolved();
    FrontEndSpec f;
    if (r.encoder == EncoderMode::Frozen) {
        if (data.mode() != FeatureMode::Pooled)
            throw ConfigError("the frozen encoder needs pooled features; the dataset holds frames");
        f.mode = FeatureMode::Pooled;
        f.num_layers = data.num_layers();
        f.input_dim = data.dim();
        f.adapter = r.encoder_train == EncoderTrain::Finetune;
    } else {
        if (data.mode() != FeatureMode::Frames)
            throw ConfigError("the scratch encoder needs frame features; the dataset holds pooled vectors");
        f.mode = FeatureMode::Frames;
        f.num_layers = 1;
        f.input_dim = data.dim();
        f.frame_widths = {r.frame_width, r.frame_width};
    }
    return f;
}

void check_compatible(const FrontEndSpec& front, const FeatureDataset& data) {
    if (front.mode != data.mode())
        throw ShapeError(std::string("model expects ") + to_string(front.mode) + " features, dataset holds " +
                         to_string(data.mode()));
    if (front.input_dim != data.dim() || (front.mode == FeatureMode::Pooled && front.num_layers != data.num_layers()))
        throw ShapeError("model expects L=" + std::to_string(front.num_layers) + " d=" +
                         std::to_string(front.input_dim) + ", dataset has L=" + std::to_string(data.num_layers()) +
                         " d=" + std::to_string(data.dim()));
}

ClassifierModel Learner::classifier() const {
    ClassifierModel m;
    m.front = front;
    m.hidden = config.hidden;
    m.layers = config.layers;
    m.ways = algorithm() == Algorithm::Transfer1 ? kTransferPretrainWays : config.ways;
    return m;
}

MetricModel Learner::metric() const {
    MetricModel m;
    m.variant = metric_variant_of(algorithm());
    m.front = front;
    m.hidden = config.hidden;
    m.embed_dim = config.embed_dim;
    m.layers = config.layers;
    m.heads = config.heads;
    m.identity_context = config.identity_context;
    return m;
}

Learner make_learner(const RunConfig& config, const FeatureDataset& data) {
    config.validate();
    Learner l;
    l.config = config;
    l.front = front_end_for(config, data);
    l.rng = Rng(config.seed);
    Rng init = Rng::stream(config.seed, 0);
    if (is_metric_based(l.algorithm()))
        l.metric().init(l.params, init);
    else
        l.classifier().init(l.params, init);
    l.adam = AdamState::for_params(l.params);
    return l;
}

TrainLog train(Learner& l, const FeatureDataset& data, const SplitSpec& split, const EpochCallback& on_epoch) {
    l.config.validate();
    check_compatible(l.front, data);
    check_split_against(split, data);
    const Algorithm a = l.algorithm();
    TrainLog log;
    if (a == Algorithm::Transfer1) {
        log = transfer_pretrain(l, data, split, on_epoch);
    } else if (is_metric_based(a)) {
        log = metric_meta_train(l.params, l.adam, l.metric(), data, split, l.config.sampler(), l.config.epoch_config(),
                                l.config.trainable(), l.rng, on_epoch);
    } else {
        log = meta_train(l.params, l.adam, l.classifier(), data, split, l.config.sampler(), l.config.inner_loop(),
                         l.config.epoch_config(), l.rng, on_epoch);
    }
    l.epoch_loss.insert(l.epoch_loss.end(), log.epoch_loss.begin(), log.epoch_loss.end());
    return log;
}

double episode_accuracy(const Learner& l, const FeatureDataset& data, const Episode& episode) {
    const EpisodeBatch batch = episode_batch(data, episode);
    const Algorithm a = l.algorithm();
    if (a == Algorithm::Transfer1) return transfer_adapt_eval(l, batch, episode, l.config.inner_steps_test);
    if (is_metric_based(a)) return metric_accuracy(l.params, l.metric(), batch);
    return adapt_and_eval(l.params, l.classifier(), batch, l.config.inner_loop());
}

// ---------------------------------------------------------------------------
// transfer baseline

namespace {

struct LabelledRows {
    std::vector<std::size_t> rows;
    std::vector<std::size_t> labels;
};

LabelledRows pretrain_rows(const FeatureDataset& data, const SplitSpec& split) {
    const PhasePool& pool = split.pool(Phase::Train);
    if (pool.keywords.size() != kTransferPretrainWays)
        throw ConfigError("transfer pretraining needs " + std::to_string(kTransferPretrainWays) +
                          " meta-train keywords, the split has " + std::to_string(pool.keywords.size()));
    LabelledRows out;
    std::size_t label = 0;
    for (const auto& [keyword, ids] : pool.keywords) {
        for (const auto& id : ids) {
            out.rows.push_back(data.index_of(id));
            out.labels.push_back(label);
        }
        ++label;
    }
    return out;
}

std::uint64_t episode_seed(const Episode& ep) {
    std::string key;
    for (const auto* items : {&ep.support, &ep.query})
        for (const auto& it : *items) key += it.id + ':' + std::to_string(it.cls) + ';';
    return std::stoull(text::fingerprint(key), nullptr, 16);
}

}  // namespace

TrainLog transfer_pretrain(Learner& l, const FeatureDataset& data, const SplitSpec& split,
                           const EpochCallback& on_epoch) {
    if (l.algorithm() != Algorithm::Transfer1) throw StateError("learner is not a transfer baseline");
    const LabelledRows all = pretrain_rows(data, split);
    const ClassifierModel model = l.classifier();
    EpochConfig ec = l.config.epoch_config();
    const std::size_t batch = l.config.pretrain_batch;
    auto run_epoch = [&](std::size_t) {
        std::vector<std::size_t> order(all.rows.size());
        std::iota(order.begin(), order.end(), 0);
        l.rng.shuffle(order);
        double total = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += batch) {
            std::vector<std::size_t> rows, labels;
            for (std::size_t i = start; i < std::min(order.size(), start + batch); ++i) {
                rows.push_back(all.rows[order[i]]);
                labels.push_back(all.labels[order[i]]);
            }
            Gradients g;
            total += classifier_objective(model, data.batch(rows), labels, Reduction::Mean)(l.params, &g);
            adam_step(l.params, g, l.adam, l.config.outer_lr, l.config.trainable());
            ++steps;
        }
        return total / static_cast<double>(steps);
    };
    return run_epochs(ec, run_epoch, on_epoch);
}

double transfer_train_accuracy(const Learner& l, const FeatureDataset& data, const SplitSpec& split) {
    const LabelledRows all = pretrain_rows(data, split);
    return accuracy(classifier_predict(l.params, l.classifier(), data.batch(all.rows)), all.labels);
}

ParamSet replace_output_layer(const ParamSet& params, const ClassifierModel& model, std::size_t ways,
                              std::uint64_t seed) {
    const std::string out = model.output_layer();
    ParamSet p = params;
    const std::size_t fan_in = p.value(out + ".w").dim(1);
    p.remove(out + ".w");
    p.remove(out + ".b");
    Rng rng(seed);
    init_affine(p, out, fan_in, ways, Partition::Classifier, rng);
    return p;
}

ParamSet transfer_adapt(const Learner& l, const EpisodeBatch& batch, const Episode& source, std::size_t steps) {
    ClassifierModel model = l.classifier();
    const ParamSet fresh = replace_output_layer(l.params, model, batch.ways, episode_seed(source));
    model.ways = batch.ways;
    InnerLoopConfig cfg;
    cfg.variant = Variant::Maml;
    cfg.inner_lr = l.config.inner_lr;
    cfg.trainable = l.config.trainable();
    const Objective support = classifier_objective(model, batch.support, batch.support_labels, Reduction::Mean);
    return inner_adapt(fresh, support, cfg, steps);
}

double transfer_adapt_eval(const Learner& l, const EpisodeBatch& batch, const Episode& source, std::size_t steps) {
    ClassifierModel model = l.classifier();
    model.ways = batch.ways;
    const ParamSet adapted = transfer_adapt(l, batch, source, steps);
    return accuracy(classifier_predict(adapted, model, batch.query), batch.query_labels);
}

// ---------------------------------------------------------------------------
// checkpoints
//
//   kwsckpt v1
//   config <json>
//   front mode=<pooled|frames> L=<int> d=<int> adapter=<0|1> widths=<a,b,..|->
//   rng <engine state>
//   history <n> <losses...>
//   adam t=<int> beta1=<x> beta2=<x> eps=<x>
//   param <id> <partition> <dims, comma separated> <values...>
//   moment1 <id> <values...>
//   moment2 <id> <values...>
//   end

namespace {

std::string shape_field(const Shape& s) {
    if (s.empty()) return "-";
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out;
}

Shape parse_shape_field(std::string_view f, std::size_t line) {
    Shape s;
    if (f == "-") return s;
    for (auto part : text::split(f, ',')) s.push_back(text::parse_int<std::size_t>(part, line));
    return s;
}

std::string_view after_tag(std::string_view line, std::string_view tag) {
    if (line.size() < tag.size() + 1 || line.substr(0, tag.size()) != tag || line[tag.size()] != ' ') return {};
    return line.substr(tag.size() + 1);
}

std::string_view kv_value(std::string_view tok, std::string_view key, std::size_t line) {
    if (tok.size() <= key.size() || tok.substr(0, key.size()) != key || tok[key.size()] != '=')
        throw FormatError("expected " + std::string(key) + "=..., got '" + std::string(tok) + "'", line);
    return tok.substr(key.size() + 1);
}

}  // namespace

std::string serialize_checkpoint(const Learner& l) {
    std::string out = "kwsckpt v1\n";
    out += "config " + l.config.to_json() + "\n";
    std::string widths;
    for (std::size_t i = 0; i < l.front.frame_widths.size(); ++i)
        widths += (i ? "," : "") + std::to_string(l.front.frame_widths[i]);
    out += std::string("front mode=") + to_string(l.front.mode) + " L=" + std::to_string(l.front.num_layers) +
           " d=" + std::to_string(l.front.input_dim) + " adapter=" + (l.front.adapter ? "1" : "0") +
           " widths=" + (widths.empty() ? "-" : widths) + "\n";
    out += "rng " + l.rng.save_state() + "\n";
    out += "history " + std::to_string(l.epoch_loss.size());
    for (double v : l.epoch_loss) {
        out += ' ';
        text::append_double(out, v);
    }
    out += "\nadam t=" + std::to_string(l.adam.t) + " beta1=";
    text::append_double(out, l.adam.beta1);
    out += " beta2=";
    text::append_double(out, l.adam.beta2);
    out += " eps=";
    text::append_double(out, l.adam.eps);
    out += '\n';
    for (const auto& [id, e] : l.params.entries()) {
        out += "param " + id + ' ' + to_string(e.partition) + ' ' + shape_field(e.value.shape()) + ' ';
        text::append_doubles(out, e.value.values());
        out += '\n';
    }
    for (const auto& [tag, moments] : {std::pair{"moment1", &l.adam.m}, std::pair{"moment2", &l.adam.v}})
        for (const auto& [id, t] : *moments) {
            out += std::string(tag) + ' ' + id + ' ';
            text::append_doubles(out, t.values());
            out += '\n';
        }
    out += "end\n";
    return out;
}

Learner parse_checkpoint(const std::string& content) {
    std::vector<std::string> lines;
    for (auto sv : text::split(content, '\n')) lines.emplace_back(sv);
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    if (lines.empty() || lines[0] != "kwsckpt v1") throw FormatError("expected header 'kwsckpt v1'", 1);
    Learner l;
    std::size_t i = 1;
    auto next = [&](std::string_view tag) -> std::string_view {
        if (i >= lines.size()) throw FormatError("missing '" + std::string(tag) + "' record", i + 1);
        auto rest = after_tag(lines[i], tag);
        if (rest.empty()) throw FormatError("expected '" + std::string(tag) + "' record", i + 1);
        ++i;
        return rest;
    };
    try {
        l.config = RunConfig::from_json(next("config"));
    } catch (const ConfigError& e) {
        throw FormatError(std::string("invalid config record: ") + e.what(), i);
    }
    {
        const std::size_t ln = i + 1;
        const auto toks = text::tokens(next("front"));
        if (toks.size() != 5) throw FormatError("front record needs mode, L, d, adapter and widths", ln);
        l.front.mode = feature_mode_from_string(kv_value(toks[0], "mode", ln));
        l.front.num_layers = text::parse_int<std::size_t>(kv_value(toks[1], "L", ln), ln);
        l.front.input_dim = text::parse_int<std::size_t>(kv_value(toks[2], "d", ln), ln);
        l.front.adapter = kv_value(toks[3], "adapter", ln) == "1";
        l.front.frame_widths = parse_shape_field(kv_value(toks[4], "widths", ln), ln);
    }
    l.rng.load_state(std::string(next("rng")));
    {
        const std::size_t ln = i + 1;
        const auto toks = text::tokens(next("history"));
        const auto n = text::parse_int<std::size_t>(toks.at(0), ln);
        if (toks.size() != n + 1) throw FormatError("history count does not match its values", ln);
        for (std::size_t k = 1; k < toks.size(); ++k) l.epoch_loss.push_back(text::parse_double(toks[k], ln));
    }
    {
        const std::size_t ln = i + 1;
        const auto toks = text::tokens(next("adam"));
        if (toks.size() != 4) throw FormatError("adam record needs t, beta1, beta2 and eps", ln);
        l.adam.t = text::parse_int<std::uint64_t>(kv_value(toks[0], "t", ln), ln);
        l.adam.beta1 = text::parse_double(kv_value(toks[1], "beta1", ln), ln);
        l.adam.beta2 = text::parse_double(kv_value(toks[2], "beta2", ln), ln);
        l.adam.eps = text::parse_double(kv_value(toks[3], "eps", ln), ln);
    }
    for (; i < lines.size() && lines[i] != "end"; ++i) {
        const std::size_t ln = i + 1;
        const auto toks = text::tokens(lines[i]);
        if (toks.size() < 2) throw FormatError("truncated record", ln);
        const std::string id(toks[1]);
        if (toks[0] == "param") {
            if (toks.size() < 4) throw FormatError("param record needs id, partition, shape and values", ln);
            const Partition part = partition_from_string(toks[2]);
            const Shape shape = parse_shape_field(toks[3], ln);
            std::vector<double> vals;
            for (std::size_t k = 4; k < toks.size(); ++k) vals.push_back(text::parse_double(toks[k], ln));
            if (vals.size() != shape_size(shape))
                throw FormatError("parameter '" + id + "' has " + std::to_string(vals.size()) + " values for shape " +
                                      shape_str(shape),
                                  ln);
            if (l.params.contains(id)) throw FormatError("duplicate parameter '" + id + "'", ln);
            l.params.add(id, Tensor(shape, std::move(vals)), part);
        } else if (toks[0] == "moment1" || toks[0] == "moment2") {
            if (!l.params.contains(id)) throw FormatError("moment for unknown parameter '" + id + "'", ln);
            const Tensor& p = l.params.value(id);
            std::vector<double> vals;
            for (std::size_t k = 2; k < toks.size(); ++k) vals.push_back(text::parse_double(toks[k], ln));
            if (vals.size() != p.size()) throw FormatError("moment of '" + id + "' does not match its shape", ln);
            (toks[0] == "moment1" ? l.adam.m : l.adam.v)[id] = Tensor(p.shape(), std::move(vals));
        } else {
            throw FormatError("unknown record '" + std::string(toks[0]) + "'", ln);
        }
    }
    if (i >= lines.size()) throw FormatError("missing 'end' record (truncated checkpoint?)", lines.size());
    if (i + 1 != lines.size()) throw FormatError("content after 'end'", i + 2);
    for (const auto& id : l.params.ids()) {
        if (!l.adam.m.count(id) || !l.adam.v.count(id))
            throw FormatError("optimizer moments missing for parameter '" + id + "'");
    }
    l.config.validate();
    return l;
}

void save_checkpoint(const Learner& l, const std::string& path) { text::write_file(path, serialize_checkpoint(l)); }

Learner load_checkpoint(const std::string& path) { return parse_checkpoint(text::read_file(path)); }

// ---------------------------------------------------------------------------
// evaluation

MeanStd mean_and_std(const std::vector<double>& v) {
    if (v.empty()) throw InvalidArgument("mean and std of an empty list");
    // shifted by the first value, so identical inputs give exactly zero spread
    const double n = static_cast<double>(v.size()), x0 = v.front();
    double s = 0.0, ss = 0.0;
    for (double x : v) {
        s += x - x0;
        ss += (x - x0) * (x - x0);
    }
    MeanStd r;
    r.mean = x0 + s / n;
    if (v.size() > 1) r.std = std::sqrt(std::max(0.0, (ss - s * s / n) / (n - 1.0)));
    return r;
}

EvalReport make_report(std::string algorithm, std::string suite_id, std::string config_fingerprint,
                       std::vector<double> accuracies) {
    EvalReport r;
    r.algorithm = std::move(algorithm);
    r.suite_id = std::move(suite_id);
    r.config_fingerprint = std::move(config_fingerprint);
    r.accuracies = std::move(accuracies);
    const MeanStd ms = mean_and_std(r.accuracies);
    r.mean = ms.mean;
    r.std = ms.std;
    return r;
}

std::string EvalReport::to_jsonl() const {
    std::string out;
    for (std::size_t i = 0; i < accuracies.size(); ++i) {
        json rec = {{"record", "task"}, {"task", i}, {"accuracy", accuracies[i]}};
        if (!resampled.empty()) rec["resampled"] = resampled[i];
        out += rec.dump() + "\n";
    }
    json summary = {{"record", "summary"},  {"algorithm", algorithm}, {"suite", suite_id},
                    {"config", config_fingerprint}, {"tasks", accuracies.size()}, {"mean", mean},
                    {"std", std}};
    if (!resampled.empty()) {
        summary["resample_supports"] = resampled.front().size();
        summary["mean_resampled"] = mean_resampled;
        summary["std_resampled"] = std_resampled;
    }
    out += summary.dump() + "\n";
    return out;
}

EvalReport EvalReport::from_jsonl(const std::string& content) {
    EvalReport r;
    bool have_summary = false;
    std::size_t ln = 0;
    for (auto sv : text::split(content, '\n')) {
        ++ln;
        if (sv.empty()) continue;
        if (have_summary) throw FormatError("record after the summary", ln);
        json j;
        try {
            j = json::parse(sv);
        } catch (const json::parse_error&) {
            throw FormatError("not a JSON record", ln);
        }
        try {
            const std::string kind = j.at("record").get<std::string>();
            if (kind == "task") {
                if (j.at("task").get<std::size_t>() != r.accuracies.size()) throw FormatError("task out of order", ln);
                r.accuracies.push_back(j.at("accuracy").get<double>());
                if (j.contains("resampled")) r.resampled.push_back(j.at("resampled").get<std::vector<double>>());
            } else if (kind == "summary") {
                r.algorithm = j.at("algorithm").get<std::string>();
                r.suite_id = j.at("suite").get<std::string>();
                r.config_fingerprint = j.at("config").get<std::string>();
                r.mean = j.at("mean").get<double>();
                r.std = j.at("std").get<double>();
                if (j.contains("mean_resampled")) {
                    r.mean_resampled = j.at("mean_resampled").get<double>();
                    r.std_resampled = j.at("std_resampled").get<double>();
                }
                if (j.at("tasks").get<std::size_t>() != r.accuracies.size())
                    throw FormatError("summary task count does not match the task records", ln);
                have_summary = true;
            } else {
                throw FormatError("unknown record kind '" + kind + "'", ln);
            }
        } catch (const json::exception& e) {
            throw FormatError(std::string("malformed record: ") + e.what(), ln);
        }
    }
    if (!have_summary) throw FormatError("report has no summary record");
    return r;
}

EvalReport evaluate_suite(const Learner& l, const FeatureDataset& data, const Suite& suite, const EvalOptions& opt) {
    if (suite.episodes.empty()) throw InvalidArgument("cannot evaluate an empty suite");
    check_compatible(l.front, data);
    if (opt.resample_supports > 0 && !opt.split) throw InvalidArgument("support resampling needs the split");
    const std::size_t n = suite.episodes.size();
    const std::size_t r = opt.resample_supports;
    std::vector<double> acc(n, 0.0);
    std::vector<std::vector<double>> redraws(r ? n : 0);
    std::vector<std::exception_ptr> errors(n);

    auto work = [&](std::size_t worker, std::size_t workers) {
        for (std::size_t i = worker; i < n; i += workers) {
            try {
                const Episode& ep = suite.episodes[i];
                acc[i] = episode_accuracy(l, data, ep);
                if (r) {
                    Rng rng = Rng::stream(opt.resample_seed, i);
                    for (std::size_t k = 0; k < r; ++k)
                        redraws[i].push_back(
                            episode_accuracy(l, data, resample_support(*opt.split, Phase::Test, ep, rng)));
                }
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(opt.threads, n));
    if (workers == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    EvalReport rep = make_report(to_string(l.config.algorithm), suite_fingerprint(suite), l.config.fingerprint(),
                                 std::move(acc));
    if (r) {
        std::vector<double> all = rep.accuracies;
        for (const auto& v : redraws) all.insert(all.end(), v.begin(), v.end());
        const MeanStd ms = mean_and_std(all);
        rep.mean_resampled = ms.mean;
        rep.std_resampled = ms.std;
        rep.resampled = std::move(redraws);
    }
    return rep;
}

std::string summarize_reports(const std::vector<EvalReport>& reports) {
    std::string out = "algorithm    suite             config            tasks   mean     std     resampled\n";
    std::set<std::string> suites;
    for (const auto& r : reports) {
        char buf[200];
        int n = std::snprintf(buf, sizeof(buf), "%-12s %-17s %-17s %5zu  %.4f  %.4f", r.algorithm.c_str(),
                              r.suite_id.c_str(), r.config_fingerprint.c_str(), r.accuracies.size(), r.mean, r.std);
        if (!r.resampled.empty())
            std::snprintf(buf + n, sizeof(buf) - n, "  %.4f +- %.4f (R=%zu)", r.mean_resampled, r.std_resampled,
                          r.resampled.front().size());
        else
            std::snprintf(buf + n, sizeof(buf) - n, "  -");
        out += buf;
        out += '\n';
        suites.insert(r.suite_id);
    }
    if (suites.size() > 1) out += "warning: reports were computed on different suites\n";
    return out;
}

// ---------------------------------------------------------------------------
// embeddings

Tensor embed_dataset(const Learner& l, const FeatureDataset& data) {
    check_compatible(l.front, data);
    std::vector<std::size_t> rows(data.size());
    std::iota(rows.begin(), rows.end(), 0);
    const FeatureBatch batch = data.batch(rows);
    Graph g;
    if (is_metric_based(l.algorithm()))
        l.metric().embed(g, batch);
    else
        l.classifier().penultimate(g, batch);
    return g.forward(l.params);
}

std::string serialize_embeddings(const Learner& l, const FeatureDataset& data) {
    const Tensor e = embed_dataset(l, data);
    const std::size_t n = e.dim(1);
    std::string out = "kwsemb v1 n=" + std::to_string(n) + "\n";
    for (std::size_t r = 0; r < data.size(); ++r) {
        out += data.at(r).id + '\t' + data.at(r).label + '\t';
        text::append_doubles(out, std::span<const double>(e.data() + r * n, n));
        out += '\n';
    }
    return out;
}

void dump_embeddings(const Learner& l, const FeatureDataset& data, const std::string& path) {
    text::write_file(path, serialize_embeddings(l, data));
}

}  // namespace fskws
