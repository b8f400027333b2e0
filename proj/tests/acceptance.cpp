#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fskws/error.hpp"
#include "fskws/harness.hpp"
#include "fskws/layers.hpp"
#include "primitive_cases.hpp"
#include "test_support.hpp"

using namespace fskws;
using fskws::testing::check_graph_gradients;
using fskws::testing::max_abs_diff;
using fskws::testing::random_tensor;

namespace {

struct Outcome {
    bool pass = true;
    std::vector<std::string> notes;
    std::vector<std::string> failures;

    void fail(std::string what) {
        pass = false;
        failures.push_back(std::move(what));
    }
    void expect(bool ok, const std::string& what) {
        if (!ok) fail(what);
    }
    void note(std::string what) { notes.push_back(std::move(what)); }
    std::string summary;
};

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

template <typename F>
bool throws_config(F&& f) {
    try {
        f();
    } catch (const ConfigError&) {
        return true;
    } catch (...) {
        return false;
    }
    return false;
}

// ---------------------------------------------------------------------------
// shared small-scale fixtures

struct World {
    FeatureDataset data;
    SplitSpec split;
};

World small_world(std::uint64_t seed) {
    SynthConfig c;
    c.dim = 4;
    c.num_layers = 3;
    c.seed = seed;
    FeatureDataset ds = generate_synthetic(c);
    SplitSpec s = build_splits(ds, seed);
    return World{std::move(ds), std::move(s)};
}

EpisodeBatch small_episode(const World& w, std::uint64_t seed, std::size_t ways, std::size_t shots,
                           std::size_t queries) {
    Rng rng(seed);
    SamplerConfig cfg;
    cfg.ways = ways;
    cfg.shots = shots;
    cfg.queries = queries;
    return episode_batch(w.data, sample_episode(w.split, Phase::Train, cfg, rng));
}

// Random biases and layer logits so no gradient is zero by symmetry alone.
void general_position(ParamSet& p, Rng& rng) {
    for (const auto& id : p.ids()) {
        auto& t = p.mutable_value(id);
        if (id.back() == 'b') t = random_tensor(t.shape(), rng, -0.5, 0.5);
        if (p.partition(id) != Partition::Classifier)
            for (double& v : t.values()) v += rng.uniform(-0.2, 0.2);
    }
}

struct GradTally {
    double worst_rel = 0.0;
    double worst_zero = 0.0;
    std::size_t tensors = 0;
    std::size_t refined = 0;
    std::size_t zeros = 0;
    std::string worst_id;

    void add(const fskws::testing::ObjectiveCheck& c) {
        if (c.worst_rel > worst_rel) {
            worst_rel = c.worst_rel;
            worst_id = c.worst_id;
        }
        worst_zero = std::max(worst_zero, c.worst_zero);
        tensors += c.tensors;
        refined += c.refined;
        zeros += c.vanishing;
    }
    bool ok() const { return worst_rel < 1e-4; }
    std::string describe() const {
        return "worst " + fmt("%.1e", worst_rel) + " (" + worst_id + "), " + std::to_string(tensors) + " tensors, " +
               std::to_string(zeros) + " vanishing (norm <= " + fmt("%.0e", worst_zero) + "), " +
               std::to_string(refined) + " at h=1e-6";
    }
};

// ---------------------------------------------------------------------------
// 1

Outcome gradient_correctness(std::size_t seeds) {
    Outcome out;
    double worst_primitive = 0.0, worst_model = 0.0;
    std::size_t refined = 0;
    for (const auto& c : fskws::testing::primitive_cases()) {
        double worst = 0.0;
        for (std::uint64_t seed = 0; seed < seeds; ++seed) {
            Rng rng(seed * 7919 + 13);
            Graph g;
            ParamSet ps;
            c.build(g, ps, rng);
            worst = std::max(worst, check_graph_gradients(g, ps).worst_rel);
        }
        out.expect(worst < 1e-4, std::string(c.name) + " worst " + fmt("%.3g", worst));
        out.note(std::string(c.name) + "=" + fmt("%.1e", worst));
        worst_primitive = std::max(worst_primitive, worst);
    }

    const World w = small_world(31);
    auto metric_model = [](MetricVariant v, bool frames) {
        MetricModel m;
        m.variant = v;
        if (frames) {
            m.front.mode = FeatureMode::Frames;
            m.front.input_dim = 4;
            m.front.frame_widths = {6, 6};
        } else {
            m.front.mode = FeatureMode::Pooled;
            m.front.num_layers = 3;
            m.front.input_dim = 4;
            m.front.adapter = true;
        }
        m.hidden = 8;
        m.embed_dim = 8;
        m.heads = 2;
        m.layers = 3;
        return m;
    };
    const World wf = [] {
        SynthConfig c;
        c.mode = FeatureMode::Frames;
        c.dim = 4;
        c.frames_per_utterance = 3;
        c.seed = 32;
        FeatureDataset ds = generate_synthetic(c);
        SplitSpec s = build_splits(ds, 32);
        return World{std::move(ds), std::move(s)};
    }();
    struct MetricCase {
        const char* name;
        MetricVariant variant;
        bool frames;
    };
    const MetricCase metric_cases[] = {{"prototypical", MetricVariant::Prototypical, false},
                                       {"matching", MetricVariant::Matching, false},
                                       {"relational", MetricVariant::Relational, false},
                                       {"prototypical-scratch", MetricVariant::Prototypical, true}};
    for (const auto& mc : metric_cases) {
        const MetricModel m = metric_model(mc.variant, mc.frames);
        GradTally tally;
        for (std::uint64_t seed = 0; seed < seeds; ++seed) {
            Rng rng(1000 + seed);
            ParamSet p;
            m.init(p, rng);
            general_position(p, rng);
            const EpisodeBatch ep = small_episode(mc.frames ? wf : w, 2000 + seed, 3, 2, 2);
            tally.add(fskws::testing::check_objective_gradients(metric_objective(m, ep), p));
        }
        out.expect(tally.ok(), std::string(mc.name) + " " + tally.describe());
        out.note(std::string(mc.name) + ": " + tally.describe());
        worst_model = std::max(worst_model, tally.worst_rel);
        refined += tally.refined;
    }

    ClassifierModel cm;
    cm.front.mode = FeatureMode::Pooled;
    cm.front.num_layers = 3;
    cm.front.input_dim = 4;
    cm.front.adapter = true;
    cm.hidden = 8;
    cm.ways = 3;
    GradTally inner_tally, outer_tally;
    double worst_outer_identity = 0.0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        Rng rng(3000 + seed);
        ParamSet theta;
        cm.init(theta, rng);
        general_position(theta, rng);
        const EpisodeBatch ep = small_episode(w, 4000 + seed, 3, 2, 2);
        const TaskObjectives task = classifier_task(cm, ep);
        InnerLoopConfig inner;
        inner.variant = static_cast<Variant>(seed % 3);
        const ParamSet adapted = inner_adapt(theta, task.support, inner, 1 + seed % 5);
        inner_tally.add(fskws::testing::check_objective_gradients(task.support, theta));
        inner_tally.add(fskws::testing::check_objective_gradients(task.support, adapted));
        outer_tally.add(fskws::testing::check_objective_gradients(task.query, adapted));
        Gradients expected;
        task.query(adapted, &expected);
        inner.steps_train = 1 + seed % 5;
        const Gradients outer = fomaml_outer_gradient(theta, {task}, inner);
        for (const auto& [id, g] : outer)
            worst_outer_identity = std::max(worst_outer_identity, max_abs_diff(g, expected.at(id)));
    }
    out.expect(inner_tally.ok(), "fomaml inner " + inner_tally.describe());
    out.expect(outer_tally.ok(), "fomaml outer " + outer_tally.describe());
    out.expect(worst_outer_identity == 0.0,
               "outer gradient differs from the adapted query gradient by " + fmt("%.3g", worst_outer_identity));
    out.note("fomaml inner: " + inner_tally.describe());
    out.note("fomaml outer: " + outer_tally.describe());
    worst_model = std::max({worst_model, inner_tally.worst_rel, outer_tally.worst_rel});
    refined += inner_tally.refined + outer_tally.refined;
    out.summary = std::to_string(fskws::testing::primitive_cases().size()) + " primitives worst " +
                  fmt("%.1e", worst_primitive) + ", 6 model graphs worst " + fmt("%.1e", worst_model) + " over " +
                  std::to_string(seeds) + " seeds, " + std::to_string(refined) + " tensors re-checked at h=1e-6";
    return out;
}

// ---------------------------------------------------------------------------
// 2

Outcome update_rules() {
    Outcome out;
    auto scalar = [](double v) {
        ParamSet p;
        p.add("theta", Tensor::scalar(v), Partition::Classifier);
        return p;
    };
    auto near = [](double a, double b) { return std::abs(a - b) <= 1e-12; };

    out.expect(near(sgd_step(scalar(1.0), {{"theta", Tensor::scalar(2.0)}}, 0.05).value("theta").item(), 0.9),
               "sgd 1 - 0.05 * 2");
    out.expect(near(sgd_step(scalar(0.0), {{"theta", Tensor::scalar(1.0)}}).value("theta").item(), -0.05),
               "sgd default lr 5e-2");

    {
        ParamSet p = scalar(0.0);
        AdamState st = AdamState::for_params(p);
        adam_step(p, {{"theta", Tensor::scalar(1.0)}}, st, 1e-4);
        out.expect(near(p.value("theta").item(), -1e-4), "adam first step is -lr");
    }
    {
        // three Adam steps on a vector, recomputed by hand
        Rng rng(11);
        ParamSet p;
        p.add("a", random_tensor({5}, rng), Partition::Classifier);
        const auto init = p.value("a").values();
        std::vector<double> x(init.begin(), init.end()), m(5, 0.0), v(5, 0.0);
        AdamState st = AdamState::for_params(p);
        const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        double worst = 0.0;
        for (int t = 1; t <= 3; ++t) {
            const Tensor g = random_tensor({5}, rng);
            adam_step(p, {{"a", g}}, st, lr);
            for (std::size_t i = 0; i < 5; ++i) {
                m[i] = b1 * m[i] + (1 - b1) * g[i];
                v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
                const double mh = m[i] / (1 - std::pow(b1, t)), vh = v[i] / (1 - std::pow(b2, t));
                x[i] -= lr * mh / (std::sqrt(vh) + eps);
                worst = std::max(worst, std::abs(p.value("a")[i] - x[i]));
            }
        }
        out.expect(worst <= 1e-12, "adam three-step recurrence " + fmt("%.3g", worst));
    }
    {
        Rng rng(12);
        ParamSet p;
        p.add("a", random_tensor({4, 3}, rng), Partition::Encoder);
        const Tensor g = random_tensor({4, 3}, rng);
        const ParamSet q = sgd_step(p, {{"a", g}}, 0.3);
        double worst = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i)
            worst = std::max(worst, std::abs(q.value("a")[i] - (p.value("a")[i] - 0.3 * g[i])));
        out.expect(worst <= 1e-12, "sgd element-wise");
    }

    out.expect(near(reptile_outer_step(scalar(0.0), {scalar(1.0)}, 0.1).value("theta").item(), 0.1),
               "reptile 0 toward 1 by 0.1");
    out.expect(reptile_outer_step(scalar(0.7), {scalar(0.7), scalar(0.7)}, 0.1).identical(scalar(0.7)),
               "reptile fixed point");
    out.expect(near(reptile_outer_step(scalar(0.0), {scalar(1.0), scalar(-1.0)}, 0.1).value("theta").item(), 0.0),
               "reptile symmetric pull");
    out.expect(near(reptile_outer_step(scalar(0.5), {scalar(1.0), scalar(2.0)}, 0.2).value("theta").item(),
                    0.5 - 0.2 * ((0.5 - 1.0) + (0.5 - 2.0))),
               "reptile two tasks");
    out.summary = "sgd, adam (first step -lr, three-step recurrence) and reptile hand values within 1e-12";
    return out;
}

// ---------------------------------------------------------------------------
// 3

Outcome partition_contracts() {
    Outcome out;
    const World w = small_world(21);
    ClassifierModel m;
    m.front.mode = FeatureMode::Pooled;
    m.front.num_layers = 3;
    m.front.input_dim = 4;
    m.front.adapter = true;
    m.hidden = 8;
    std::size_t checked = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        ParamSet theta;
        m.init(theta, rng);
        general_position(theta, rng);
        const EpisodeBatch ep = small_episode(w, 100 + seed, 12, 2, 2);
        const Objective support = classifier_objective(m, ep.support, ep.support_labels, Reduction::Mean);
        for (std::size_t steps = 1; steps <= 5; ++steps) {
            InnerLoopConfig cfg;
            cfg.variant = Variant::Anil;
            const ParamSet a = inner_adapt(theta, support, cfg, steps);
            out.expect(a.identical_in(theta, Partition::Encoder), "anil moved the encoder");
            out.expect(a.identical_in(theta, Partition::LayerWeights), "anil moved the layer weights");
            out.expect(!a.identical_in(theta, Partition::Classifier), "anil did not adapt the classifier");
            cfg.variant = Variant::Boil;
            const ParamSet b = inner_adapt(theta, support, cfg, steps);
            out.expect(b.identical_in(theta, Partition::Classifier), "boil moved the classifier");
            out.expect(!b.identical_in(theta, Partition::Encoder), "boil did not adapt the encoder");
            checked += 2;
        }
    }
    out.note(std::to_string(checked) + " inner loops");

    for (Algorithm a : {Algorithm::Boil, Algorithm::Anil}) {
        RunConfig c;
        c.algorithm = a;
        c.encoder_train = EncoderTrain::Fixed;
        out.expect(throws_config([&] { c.validate(); }), std::string(to_string(a)) + " + fixed accepted");
        out.expect(throws_config([&] { (void)make_learner(c, w.data); }),
                   std::string(to_string(a)) + " + fixed learner created");
        c.encoder_train = EncoderTrain::Finetune;
        out.expect(!throws_config([&] { c.validate(); }), std::string(to_string(a)) + " + finetune rejected");
    }
    InnerLoopConfig fixed;
    fixed.trainable = PartitionMask::all().without(Partition::Encoder);
    for (Variant v : {Variant::Boil, Variant::Anil}) {
        fixed.variant = v;
        out.expect(throws_config([&] { fixed.validate(); }), std::string(to_string(v)) + " inner loop + fixed");
    }
    out.note("boil/anil + fixed encoder rejected");
    return out;
}

// ---------------------------------------------------------------------------
// 4

Outcome joint_equivalence() {
    Outcome out;
    const World w = small_world(21);
    ClassifierModel m;
    m.front.mode = FeatureMode::Pooled;
    m.front.num_layers = 3;
    m.front.input_dim = 4;
    m.front.adapter = true;
    m.hidden = 16;
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        ParamSet theta;
        m.init(theta, rng);
        general_position(theta, rng);
        std::vector<EpisodeBatch> eps;
        std::vector<TaskObjectives> tasks;
        for (std::uint64_t i = 0; i < 4; ++i) {
            eps.push_back(small_episode(w, 100 * seed + i, 12, 2, 3));
            tasks.push_back(classifier_task(m, eps.back()));
        }
        InnerLoopConfig cfg;
        cfg.steps_train = 0;
        const Gradients outer = fomaml_outer_gradient(theta, tasks, cfg);

        std::vector<std::size_t> labels;
        std::vector<double> data;
        for (const auto& e : eps) {
            data.insert(data.end(), e.query.data.values().begin(), e.query.data.values().end());
            labels.insert(labels.end(), e.query_labels.begin(), e.query_labels.end());
        }
        FeatureBatch joint;
        joint.mode = FeatureMode::Pooled;
        joint.size = labels.size();
        joint.data = Tensor({labels.size(), 3, 4}, std::move(data));
        Graph g;
        g.softmax_cross_entropy(m.logits(g, joint), labels, Reduction::Sum);
        g.forward(theta);
        const Gradients pooled = g.backward();
        for (const auto& [id, t] : outer) worst = std::max(worst, max_abs_diff(t, pooled.at(id)));
    }
    out.expect(worst <= 1e-10, "max abs difference " + fmt("%.3g", worst));
    out.note("max abs diff " + fmt("%.2e", worst) + " over 10 meta-batches of 4 tasks");
    return out;
}

// ---------------------------------------------------------------------------
// 5

Outcome episode_invariants(std::size_t n_episodes) {
    Outcome out;
    SynthConfig sc;
    sc.seed = 5;
    const FeatureDataset data = generate_synthetic(sc);
    const SplitSpec split = build_splits(data, 5);

    std::map<std::string, std::string> label_of;
    for (const auto& u : data.utterances()) label_of[u.id] = u.label;
    auto ids_of = [](const PhasePool& p) {
        std::set<std::string> s(p.noise_ids.begin(), p.noise_ids.end());
        for (const auto& [k, v] : p.keywords) s.insert(v.begin(), v.end());
        for (const auto& [k, v] : p.unknown) s.insert(v.begin(), v.end());
        return s;
    };
    const std::set<std::string> train_ids = ids_of(split.train), test_ids = ids_of(split.test);
    const std::set<std::string> unknown_kws(split.unknown_keywords.begin(), split.unknown_keywords.end());
    std::size_t overlap = 0;
    for (const auto& id : train_ids) overlap += test_ids.count(id);
    for (const auto& [k, v] : split.train.keywords) overlap += split.test.keywords.count(k) + unknown_kws.count(k);
    for (const auto& [k, v] : split.test.keywords) overlap += unknown_kws.count(k);
    out.expect(overlap == 0, "split pools overlap in " + std::to_string(overlap) + " places");

    std::size_t violations = 0;
    std::size_t fired = 0;
    for (std::uint64_t i = 0; i < n_episodes; ++i) {
        Rng rng = Rng::stream(77, i);
        SamplerConfig cfg;
        cfg.shots = 1 + i % 5;
        cfg.queries = 1 + i % 3;
        const Phase ph = i % 2 ? Phase::Train : Phase::Test;
        const Episode e = sample_episode(split, ph, cfg, rng);
        const std::set<std::string>& own = ph == Phase::Train ? train_ids : test_ids;
        const PhasePool& pool = split.pool(ph);
        std::size_t v = 0;

        const std::set<std::string> classes(e.class_labels.begin(), e.class_labels.end());
        v += classes.size() != 12;
        v += e.class_labels.size() != 12;
        v += !classes.count(std::string(kUnknownClass));
        v += !classes.count(std::string(kSilenceClass));
        for (const auto& c : e.class_labels)
            if (c != kUnknownClass && c != kSilenceClass) v += !pool.keywords.count(c);

        std::vector<std::size_t> n_support(e.ways(), 0), n_query(e.ways(), 0);
        std::set<std::string> support_ids;
        auto item_ok = [&](const EpisodeItem& it) {
            if (it.cls >= e.ways()) return false;
            if (!own.count(it.id)) return false;
            const std::string& truth = label_of.at(it.id);
            const std::string& cls = e.class_labels[it.cls];
            if (cls == kUnknownClass) return unknown_kws.count(truth) == 1;
            if (cls == kSilenceClass) return truth == kSilenceLabel;
            return truth == cls;
        };
        for (const auto& it : e.support) {
            if (!item_ok(it)) {
                ++v;
                continue;
            }
            ++n_support[it.cls];
            v += !support_ids.insert(it.id).second;
        }
        for (const auto& it : e.query) {
            if (!item_ok(it)) {
                ++v;
                continue;
            }
            ++n_query[it.cls];
            v += support_ids.count(it.id);
        }
        for (std::size_t c = 0; c < e.ways(); ++c) v += (n_support[c] != cfg.shots) + (n_query[c] != cfg.queries);
        violations += v;
        fired += !episode_violations(e, split, ph).empty();
    }
    out.expect(violations == 0, std::to_string(violations) + " invariant violations");
    out.expect(fired == 0, std::to_string(fired) + " episodes flagged by the library checker");
    out.note(std::to_string(n_episodes) + " episodes, 0 violations");

    SamplerConfig cfg;
    const Suite a = fixed_test_suite(split, 1000, cfg, 3);
    const Suite b = fixed_test_suite(split, 1000, cfg, 3);
    const Suite c = fixed_test_suite(split, 1000, cfg, 4);
    const auto dir = std::filesystem::temp_directory_path() / ("fskws_acceptance_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    save_suite(a, (dir / "a.suite").string());
    save_suite(b, (dir / "b.suite").string());
    auto slurp = [](const std::filesystem::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    };
    const std::string bytes_a = slurp(dir / "a.suite"), bytes_b = slurp(dir / "b.suite");
    const bool round_trip = load_suite((dir / "a.suite").string()) == a;
    std::filesystem::remove_all(dir);
    out.expect(!bytes_a.empty() && bytes_a == bytes_b, "suite files differ under the same seed");
    out.expect(serialize_suite(a) != serialize_suite(c), "different seeds gave the same suite");
    out.expect(round_trip, "suite does not survive a round trip");
    out.note("1000-task suite byte-identical, fingerprint " + suite_fingerprint(a));
    return out;
}


// ---------------------------------------------------------------------------
// 6

Outcome metric_oracles() {
    Outcome out;
    const World w = small_world(41);
    MetricModel proto;
    proto.variant = MetricVariant::Prototypical;
    proto.front.mode = FeatureMode::Pooled;
    proto.front.num_layers = 3;
    proto.front.input_dim = 4;
    proto.hidden = 8;
    proto.embed_dim = 4;
    proto.layers = 3;
    std::size_t queries_checked = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(500 + seed);
        ParamSet p;
        proto.init(p, rng);
        general_position(p, rng);
        const std::size_t ways = 3 + seed % 3, shots = 1 + seed % 3;
        const EpisodeBatch ep = small_episode(w, 600 + seed, ways, shots, 4);
        Graph gs, gq;
        proto.embed(gs, ep.support);
        proto.embed(gq, ep.query);
        const Tensor s = gs.forward(p), q = gq.forward(p);
        const std::size_t n = s.dim(1);
        std::vector<std::size_t> expected;
        for (std::size_t r = 0; r < q.dim(0); ++r) {
            std::size_t best = 0;
            double best_d = INFINITY;
            for (std::size_t c = 0; c < ways; ++c) {
                double d = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    double mean = 0.0, count = 0.0;
                    for (std::size_t i = 0; i < ep.support_labels.size(); ++i)
                        if (ep.support_labels[i] == c) {
                            mean += s.at(i, j);
                            count += 1.0;
                        }
                    mean /= count;
                    d += (q.at(r, j) - mean) * (q.at(r, j) - mean);
                }
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            expected.push_back(best);
        }
        out.expect(metric_predict(p, proto, ep) == expected,
                   "prototypical prediction differs from brute force on episode " + std::to_string(seed));
        queries_checked += expected.size();
    }
    out.note("nearest prototype on 5 episodes (" + std::to_string(queries_checked) + " queries)");

    double worst_identity = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(700 + seed);
        MetricModel match;
        match.variant = MetricVariant::Matching;
        match.front = proto.front;
        match.embed_dim = 6;
        match.identity_context = true;
        ParamSet p;
        match.init(p, rng);
        general_position(p, rng);
        const EpisodeBatch ep = small_episode(w, 800 + seed, 3 + seed % 10, 1, 3);
        Graph gm;
        match.class_scores(gm, ep);
        const Tensor probs = gm.forward(p);
        Graph gp;
        Var s = match.embed(gp, ep.support), q = match.embed(gp, ep.query);
        gp.softmax(proto_logits(gp, q, prototypes(gp, s, ep.support_labels, ep.ways)));
        worst_identity = std::max(worst_identity, max_abs_diff(probs, gp.forward(p)));
    }
    out.expect(worst_identity <= 1e-10, "identity matching vs prototypical " + fmt("%.3g", worst_identity));
    out.note("identity K=1 max diff " + fmt("%.1e", worst_identity));

    double worst_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        Rng rng(900 + seed);
        MetricModel match;
        match.variant = MetricVariant::Matching;
        match.front = proto.front;
        match.front.adapter = true;
        match.embed_dim = 8;
        match.heads = 2;
        ParamSet p;
        match.init(p, rng);
        general_position(p, rng);
        const EpisodeBatch ep = small_episode(w, 1000 + seed, 12, 1 + seed % 5, 1 + seed % 4);
        Graph g;
        match.class_scores(g, ep);
        const Tensor probs = g.forward(p);
        for (std::size_t r = 0; r < probs.dim(0); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < probs.dim(1); ++c) s += probs.at(r, c);
            worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        }
    }
    out.expect(worst_sum <= 1e-12, "matching probabilities sum off by " + fmt("%.3g", worst_sum));
    out.note("probability sums within " + fmt("%.1e", worst_sum));
    return out;
}

// ---------------------------------------------------------------------------
// 7

struct Budget {
    std::size_t epochs;
    std::size_t tasks_per_epoch;
};

struct EndToEndPlan {
    Budget proto{3, 1000};
    Budget matching{2, 100};
    Budget fomaml{10, 1000};
    std::size_t suite_tasks = 200;
};

SynthConfig informative_features() {
    SynthConfig c;
    c.num_keywords = 35;
    c.dim = 8;
    c.num_layers = 3;
    c.sigma_between = 1.0;
    c.sigma_within = 0.1;
    c.seed = 1;
    return c;
}

SynthConfig uninformative_frames() {
    SynthConfig c = informative_features();
    c.mode = FeatureMode::Frames;
    c.frames_per_utterance = 8;
    c.sigma_between = 0.3;
    c.sigma_within = 1.0;
    return c;
}

double train_and_evaluate(RunConfig cfg, const Budget& b, const FeatureDataset& data, const SplitSpec& split,
                          const Suite& suite) {
    cfg.epochs = b.epochs;
    cfg.tasks_per_epoch = b.tasks_per_epoch;
    Learner l = make_learner(cfg, data);
    train(l, data, split);
    return evaluate_suite(l, data, suite).mean;
}

Outcome end_to_end(const EndToEndPlan& plan) {
    Outcome out;
    const FeatureDataset pooled = generate_synthetic(informative_features());
    const SplitSpec pooled_split = build_splits(pooled, 1);
    const FeatureDataset frames = generate_synthetic(uninformative_frames());
    const SplitSpec frames_split = build_splits(frames, 1);

    RunConfig base;
    base.ways = 12;
    base.shots = 5;
    base.queries = 5;
    base.seed = 7;
    const Suite suite = fixed_test_suite(pooled_split, plan.suite_tasks, base.sampler(), 2024);
    const Suite frames_suite = fixed_test_suite(frames_split, plan.suite_tasks, base.sampler(), 2024);
    const double chance = 1.0 / 12.0;

    auto timed = [](auto&& f) {
        const auto t0 = std::chrono::steady_clock::now();
        const double v = f();
        return std::pair{v, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    };
    auto report = [&](const char* name, double acc, double secs, double target) {
        out.expect(acc >= target, std::string(name) + " accuracy " + fmt("%.4f", acc) + " < " + fmt("%.2f", target));
        out.expect(acc >= chance + 0.60, std::string(name) + " not 0.60 above chance");
        out.note(std::string(name) + "=" + fmt("%.4f", acc) + " (" + fmt("%.0f", secs) + "s)");
    };

    RunConfig proto = base;
    proto.algorithm = Algorithm::Proto;
    const auto [proto_acc, proto_s] = timed([&] { return train_and_evaluate(proto, plan.proto, pooled, pooled_split, suite); });
    report("prototypical", proto_acc, proto_s, 0.90);

    RunConfig matching = base;
    matching.algorithm = Algorithm::Matching;
    const auto [match_acc, match_s] =
        timed([&] { return train_and_evaluate(matching, plan.matching, pooled, pooled_split, suite); });
    report("matching", match_acc, match_s, 0.90);

    RunConfig fomaml = base;
    fomaml.algorithm = Algorithm::Maml;
    const auto [maml_acc, maml_s] =
        timed([&] { return train_and_evaluate(fomaml, plan.fomaml, pooled, pooled_split, suite); });
    report("fomaml", maml_acc, maml_s, 0.85);

    for (auto [algo, pooled_acc, budget] : {std::tuple{Algorithm::Proto, proto_acc, plan.proto},
                                            std::tuple{Algorithm::Matching, match_acc, plan.matching}}) {
        RunConfig scratch = base;
        scratch.algorithm = Algorithm::Scratch;
        scratch.scratch_algo = algo;
        scratch.frame_width = 32;
        const auto [acc, secs] =
            timed([&] { return train_and_evaluate(scratch, budget, frames, frames_split, frames_suite); });
        const std::string name = std::string(to_string(algo)) + "-scratch";
        out.expect(pooled_acc - acc >= 0.15,
                   name + " gap " + fmt("%.4f", pooled_acc - acc) + " below 0.15 (scratch " + fmt("%.4f", acc) + ")");
        out.note(name + "=" + fmt("%.4f", acc) + " gap " + fmt("%.3f", pooled_acc - acc) + " (" + fmt("%.0f", secs) +
                 "s)");
    }
    return out;
}

// ---------------------------------------------------------------------------
// 8

Outcome reporting() {
    Outcome out;
    // Two 3-way one-shot tasks on hand-placed points with an identity embedding:
    // every query of the first task is nearest its own class, half of the
    // second task's queries are labelled with a different class.
    std::vector<UtteranceFeatures> utts;
    const double centres[3][2] = {{1.0, 1.0}, {6.0, 1.0}, {1.0, 6.0}};
    const char* labels[3] = {"kwa", "kwb", "kwc"};
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 4; ++i) {
            UtteranceFeatures u;
            u.id = std::string(labels[c]) + "_" + std::to_string(i);
            u.label = labels[c];
            u.pooled_layers = Tensor({1, 2}, {centres[c][0] + 0.1 * static_cast<double>(i), centres[c][1]});
            utts.push_back(std::move(u));
        }
    const FeatureDataset data = FeatureDataset::create(FeatureMode::Pooled, 1, 2, std::move(utts));

    Episode clean;
    clean.class_labels = {"kwa", "kwb", "kwc"};
    clean.shots = 1;
    clean.queries = 2;
    for (std::size_t c = 0; c < 3; ++c) clean.support.push_back({std::string(labels[c]) + "_0", c});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 1; i <= 2; ++i) clean.query.push_back({std::string(labels[c]) + "_" + std::to_string(i), c});
    Episode half = clean;
    half.query = {{"kwa_1", 0}, {"kwb_1", 0}, {"kwb_2", 1}, {"kwc_1", 1}, {"kwa_2", 2}, {"kwc_2", 2}};
    Suite suite;
    suite.ways = 3;
    suite.shots = 1;
    suite.queries = 2;
    suite.episodes = {clean, half};

    RunConfig cfg;
    cfg.algorithm = Algorithm::Proto;
    cfg.ways = 3;
    cfg.shots = 1;
    cfg.queries = 2;
    cfg.encoder_train = EncoderTrain::Fixed;
    cfg.layers = 2;
    cfg.hidden = 2;
    cfg.embed_dim = 2;
    Learner l = make_learner(cfg, data);
    for (std::size_t layer = 0; layer < 2; ++layer) {
        const std::string prefix = mlp_layer_prefix(kEmbedPrefix, layer);
        l.params.mutable_value(prefix + ".w") = Tensor::matrix(2, 2, {1.0, 0.0, 0.0, 1.0});
        l.params.mutable_value(prefix + ".b") = Tensor({2}, 0.0);
    }
    const EvalReport rep = evaluate_suite(l, data, suite);
    out.expect(rep.accuracies == std::vector<double>{1.0, 0.5}, "task accuracies are not [1, 0.5]");
    out.expect(rep.mean == 0.75, "mean " + fmt("%.17g", rep.mean));
    out.expect(std::abs(rep.std - std::sqrt(0.125)) <= 1e-15, "std " + fmt("%.17g", rep.std));
    out.expect(fmt("%.6f", rep.std) == "0.353553", "std rounds to " + fmt("%.6f", rep.std));
    out.note("mean " + fmt("%.2f", rep.mean) + " std " + fmt("%.6f", rep.std));

    const FeatureDataset synth = generate_synthetic(informative_features());
    const SplitSpec split = build_splits(synth, 1);
    RunConfig rc;
    rc.algorithm = Algorithm::Proto;
    rc.epochs = 1;
    rc.tasks_per_epoch = 50;
    Learner trained = make_learner(rc, synth);
    train(trained, synth, split);
    const Suite s = fixed_test_suite(split, 40, rc.sampler(), 9);
    const std::string ckpt = serialize_checkpoint(trained);
    const std::string a = evaluate_suite(parse_checkpoint(ckpt), synth, s).to_jsonl();
    const std::string b = evaluate_suite(parse_checkpoint(ckpt), synth, parse_suite(lines_of(serialize_suite(s)))).to_jsonl();
    EvalOptions threaded;
    threaded.threads = 4;
    const std::string c = evaluate_suite(parse_checkpoint(ckpt), synth, s, threaded).to_jsonl();
    out.expect(a == b && a == c, "reports differ for the same checkpoint and suite");
    out.expect(EvalReport::from_jsonl(a).to_jsonl() == a, "report does not survive a round trip");
    out.note("40-task report byte-identical across reloads and thread counts");
    return out;
}

struct Criterion {
    int id;
    const char* title;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance suite of the few-shot keyword-spotting engine", "fskws_acceptance"};
    std::vector<int> only;
    std::size_t seeds = 100, episodes = 10000;
    EndToEndPlan plan;
    bool verbose = false;
    app.add_option("criteria", only, "criteria to run (default: all)");
    app.add_option("--seeds", seeds, "random seeds of the gradient checks");
    app.add_option("--episodes", episodes, "sampled episodes of the invariant check");
    app.add_option("--suite-tasks", plan.suite_tasks, "size of the end-to-end test suite");
    app.add_flag("-v,--verbose", verbose, "print the measured values");
    CLI11_PARSE(app, argc, argv);

    const std::vector<Criterion> criteria = {
        {1, "gradient correctness", [&] { return gradient_correctness(seeds); }},
        {2, "update-rule oracles", update_rules},
        {3, "partition contracts", partition_contracts},
        {4, "joint-training equivalence", joint_equivalence},
        {5, "episode invariants", [&] { return episode_invariants(episodes); }},
        {6, "metric-method oracles", metric_oracles},
        {7, "end-to-end learning", [&] { return end_to_end(plan); }},
        {8, "reporting", reporting},
    };

    int failed = 0;
    for (const auto& c : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.fail(std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::string detail;
        for (const auto& f : o.failures) detail += (detail.empty() ? "" : "; ") + f;
        if (o.pass && !o.summary.empty()) detail = o.summary;
        if (o.pass && o.summary.empty())
            for (const auto& n : o.notes) detail += (detail.empty() ? "" : "; ") + n;
        std::printf("%s %d %s (%.1fs)%s%s\n", o.pass ? "PASS" : "FAIL", c.id, c.title, secs,
                    detail.empty() ? "" : ": ", detail.c_str());
        if (verbose && !o.summary.empty())
            for (const auto& n : o.notes) std::printf("    %s\n", n.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
