#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "fskws/fskws.h"
#include "json.hpp"

namespace {

using nlohmann::json;

struct Failure {
    fskws_status status;
    std::string message;
};

void check(fskws_status s) {
    if (s != FSKWS_OK) throw Failure{s, fskws_last_error()};
}

[[noreturn]] void usage_error(const std::string& message) { throw Failure{FSKWS_ERR_CONFIG, message}; }

template <typename T, void (*Free)(T*)>
struct Handle {
    T* p = nullptr;
    Handle() = default;
    Handle(const Handle&) = delete;
    Handle& operator=(const Handle&) = delete;
    Handle(Handle&& o) noexcept : p(o.p) { o.p = nullptr; }
    Handle& operator=(Handle&& o) noexcept {
        std::swap(p, o.p);
        return *this;
    }
    ~Handle() { Free(p); }
    T** out() { return &p; }
    T* get() const { return p; }
};

using Dataset = Handle<fskws_dataset, fskws_dataset_free>;
using Split = Handle<fskws_split, fskws_split_free>;
using SuiteH = Handle<fskws_suite, fskws_suite_free>;
using LearnerH = Handle<fskws_learner, fskws_learner_free>;
using Report = Handle<fskws_report, fskws_report_free>;

std::string take(char* s) {
    std::string out(s ? s : "");
    fskws_string_free(s);
    return out;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Failure{FSKWS_ERR_IO, "cannot open '" + path + "' for reading"};
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text(const std::string& path, const std::string& content) {
    if (path.empty() || path == "-") {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Failure{FSKWS_ERR_IO, "cannot open '" + path + "' for writing"};
    out << content;
}

Dataset load_data(const std::string& path) {
    Dataset d;
    check(fskws_dataset_load(path.c_str(), d.out()));
    return d;
}

// Run-configuration flags. Only flags given on the command line enter the
// JSON, so unset ones keep the library defaults or the config file's values.
struct RunFlags {
    std::optional<std::string> algo, scratch_algo, encoder, encoder_train, data, split, suite;
    std::optional<std::size_t> shots, ways, queries, inner_steps_train, inner_steps_test, meta_batch, epochs,
        tasks_per_epoch, hidden, embed_dim;
    std::optional<std::uint64_t> seed;
    std::optional<double> inner_lr, outer_lr;
    std::string config;

    void add_to(CLI::App* app) {
        app->add_option("--algo", algo, "maml|anil|boil|reptile|proto|matching|relational|transfer1|scratch");
        app->add_option("--scratch-algo", scratch_algo, "algorithm trained on the scratch encoder");
        app->add_option("--shots", shots, "support examples per class (K)");
        app->add_option("--ways", ways, "classes per episode (N)");
        app->add_option("--queries", queries, "query examples per class");
        app->add_option("--encoder", encoder, "frozen|scratch");
        app->add_option("--encoder-train", encoder_train, "fixed|finetune");
        app->add_option("--inner-lr", inner_lr);
        app->add_option("--outer-lr", outer_lr);
        app->add_option("--inner-steps-train", inner_steps_train);
        app->add_option("--inner-steps-test", inner_steps_test);
        app->add_option("--meta-batch", meta_batch);
        app->add_option("--epochs", epochs);
        app->add_option("--tasks-per-epoch", tasks_per_epoch);
        app->add_option("--hidden", hidden);
        app->add_option("--embed-dim", embed_dim);
        app->add_option("--seed", seed);
        app->add_option("--data", data, "feature file");
        app->add_option("--split", split, "split file (built from --seed when absent)");
        app->add_option("--suite", suite, "suite file");
        app->add_option("--config", config, "JSON run configuration; its keys override the flags");
    }

    std::string to_json() const {
        json j = json::object();
        auto put = [&](const char* key, const auto& v) {
            if (v) j[key] = *v;
        };
        put("algo", algo);
        put("scratch_algo", scratch_algo);
        put("encoder", encoder);
        put("encoder_train", encoder_train);
        put("shots", shots);
        put("ways", ways);
        put("queries", queries);
        put("inner_lr", inner_lr);
        put("outer_lr", outer_lr);
        put("inner_steps_train", inner_steps_train);
        put("inner_steps_test", inner_steps_test);
        put("meta_batch", meta_batch);
        put("epochs", epochs);
        put("tasks_per_epoch", tasks_per_epoch);
        put("hidden", hidden);
        put("embed_dim", embed_dim);
        put("seed", seed);
        put("data", data);
        put("split", split);
        put("suite", suite);
        return j.dump();
    }

    json merged() const {
        const std::string overrides = config.empty() ? std::string() : read_text(config);
        char* out = nullptr;
        check(fskws_config_merge(to_json().c_str(), overrides.empty() ? nullptr : overrides.c_str(), &out));
        return json::parse(take(out));
    }
};

void on_epoch(std::size_t epoch, double loss, void*) {
    std::fprintf(stderr, "epoch %zu loss %.6f\n", epoch + 1, loss);
}

int run(int argc, char** argv) {
    CLI::App app{"Few-shot keyword spotting: synthetic data, episodic training and fixed-suite evaluation", "fskws"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(fskws_version()));

    // gen-synth
    auto* gen = app.add_subcommand("gen-synth", "write a synthetic feature file");
    std::string gen_out, gen_mode = "pooled";
    std::optional<std::size_t> g_keywords, g_layers, g_dim, g_utts, g_noise, g_noise_utts, g_frames;
    std::optional<double> g_sw, g_sb;
    std::uint64_t g_seed = 0;
    gen->add_option("--out", gen_out, "output feature file")->required();
    gen->add_option("--seed", g_seed);
    gen->add_option("--mode", gen_mode, "pooled|frames");
    gen->add_option("--keywords", g_keywords);
    gen->add_option("--layers", g_layers);
    gen->add_option("--dim", g_dim);
    gen->add_option("--utterances", g_utts, "utterances per keyword");
    gen->add_option("--noise-classes", g_noise);
    gen->add_option("--noise-utterances", g_noise_utts);
    gen->add_option("--frames", g_frames, "frames per utterance (frames mode)");
    gen->add_option("--sigma-within", g_sw);
    gen->add_option("--sigma-between", g_sb);

    // split
    auto* split = app.add_subcommand("split", "assign keywords to unknown, meta-train and meta-test");
    std::string sp_data, sp_out;
    std::uint64_t sp_seed = 0;
    split->add_option("--data", sp_data)->required();
    split->add_option("--out", sp_out)->required();
    split->add_option("--seed", sp_seed);

    // make-suite
    auto* mk = app.add_subcommand("make-suite", "sample a fixed meta-test suite");
    std::string mk_split, mk_out, mk_data;
    std::size_t mk_tasks = 1000, mk_ways = 12, mk_shots = 5, mk_queries = 5;
    std::uint64_t mk_seed = 0;
    mk->add_option("--split", mk_split)->required();
    mk->add_option("--data", mk_data, "feature file to check the split against");
    mk->add_option("--out", mk_out)->required();
    mk->add_option("--tasks", mk_tasks);
    mk->add_option("--ways", mk_ways);
    mk->add_option("--shots", mk_shots);
    mk->add_option("--queries", mk_queries);
    mk->add_option("--seed", mk_seed);

    // train
    auto* tr = app.add_subcommand("train", "meta-train (or pretrain) a model and write a checkpoint");
    RunFlags tr_flags;
    std::string tr_out;
    tr_flags.add_to(tr);
    tr->add_option("--out", tr_out, "checkpoint file")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a fixed suite");
    std::string ev_ckpt, ev_data, ev_suite, ev_split, ev_out;
    std::size_t ev_resample = 0, ev_threads = 1;
    std::uint64_t ev_seed = 0;
    ev->add_option("--checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data, "feature file (default: the one recorded at training)");
    ev->add_option("--suite", ev_suite, "suite file (default: the one recorded at training)");
    ev->add_option("--split", ev_split, "split file, needed by --resample-supports");
    ev->add_option("--resample-supports", ev_resample, "extra support redraws per task");
    ev->add_option("--seed", ev_seed, "seed of the support redraws");
    ev->add_option("--threads", ev_threads);
    ev->add_option("--out", ev_out, "report file (JSON lines)");

    // dump-emb
    auto* de = app.add_subcommand("dump-emb", "write one embedding per utterance");
    std::string de_ckpt, de_data, de_out;
    de->add_option("--checkpoint", de_ckpt)->required();
    de->add_option("--data", de_data)->required();
    de->add_option("--out", de_out)->required();

    // report
    auto* rp = app.add_subcommand("report", "tabulate evaluation reports");
    std::vector<std::string> rp_files;
    std::string rp_out;
    rp->add_option("reports", rp_files, "report files")->required();
    rp->add_option("--out", rp_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "fskws: error[usage]: %s\nRun with --help for usage.\n", e.what());
        return 2;
    }

    if (*gen) {
        json c = {{"seed", g_seed}, {"mode", gen_mode}};
        auto put = [&](const char* k, const auto& v) {
            if (v) c[k] = *v;
        };
        put("keywords", g_keywords);
        put("layers", g_layers);
        put("dim", g_dim);
        put("utterances", g_utts);
        put("noise_classes", g_noise);
        put("noise_utterances", g_noise_utts);
        put("frames", g_frames);
        put("sigma_within", g_sw);
        put("sigma_between", g_sb);
        Dataset d;
        check(fskws_dataset_generate(c.dump().c_str(), d.out()));
        check(fskws_dataset_save(d.get(), gen_out.c_str()));
        std::size_t n = 0;
        check(fskws_dataset_info(d.get(), &n, nullptr, nullptr, nullptr));
        std::fprintf(stderr, "wrote %zu utterances to %s\n", n, gen_out.c_str());
    } else if (*split) {
        Dataset d = load_data(sp_data);
        Split s;
        check(fskws_split_build(d.get(), sp_seed, s.out()));
        check(fskws_split_save(s.get(), sp_out.c_str()));
    } else if (*mk) {
        Dataset d;
        if (!mk_data.empty()) d = load_data(mk_data);
        Split s;
        check(fskws_split_load(mk_split.c_str(), d.get(), s.out()));
        SuiteH su;
        check(fskws_suite_make(s.get(), mk_tasks, mk_ways, mk_shots, mk_queries, mk_seed, su.out()));
        check(fskws_suite_save(su.get(), mk_out.c_str()));
        char* fp = nullptr;
        check(fskws_suite_fingerprint(su.get(), &fp));
        std::fprintf(stderr, "wrote %zu-task suite %s to %s\n", mk_tasks, take(fp).c_str(), mk_out.c_str());
    } else if (*tr) {
        const json cfg = tr_flags.merged();
        const std::string data_path = cfg.at("data").get<std::string>();
        if (data_path.empty()) usage_error("train needs --data (or \"data\" in the config file)");
        Dataset d = load_data(data_path);
        Split s;
        const std::string split_path = cfg.at("split").get<std::string>();
        if (split_path.empty())
            check(fskws_split_build(d.get(), cfg.at("seed").get<std::uint64_t>(), s.out()));
        else
            check(fskws_split_load(split_path.c_str(), d.get(), s.out()));
        LearnerH l;
        check(fskws_learner_create(cfg.dump().c_str(), d.get(), l.out()));
        std::fprintf(stderr, "training %s, %zu-way %zu-shot, encoder %s/%s\n",
                     cfg.at("algo").get<std::string>().c_str(), cfg.at("ways").get<std::size_t>(),
                     cfg.at("shots").get<std::size_t>(), cfg.at("encoder").get<std::string>().c_str(),
                     cfg.at("encoder_train").get<std::string>().c_str());
        check(fskws_learner_train(l.get(), d.get(), s.get(), on_epoch, nullptr));
        check(fskws_learner_save(l.get(), tr_out.c_str()));
    } else if (*ev) {
        LearnerH l;
        check(fskws_learner_load(ev_ckpt.c_str(), l.out()));
        char* cj = nullptr;
        check(fskws_learner_config(l.get(), &cj));
        const json cfg = json::parse(take(cj));
        if (ev_data.empty()) ev_data = cfg.at("data").get<std::string>();
        if (ev_suite.empty()) ev_suite = cfg.at("suite").get<std::string>();
        if (ev_data.empty()) usage_error("eval needs --data");
        if (ev_suite.empty()) usage_error("eval needs --suite");
        if (ev_resample > 0 && ev_split.empty()) ev_split = cfg.at("split").get<std::string>();
        if (ev_resample > 0 && ev_split.empty()) usage_error("--resample-supports needs --split");
        Dataset d = load_data(ev_data);
        SuiteH su;
        check(fskws_suite_load(ev_suite.c_str(), su.out()));
        Split s;
        if (!ev_split.empty()) check(fskws_split_load(ev_split.c_str(), d.get(), s.out()));
        Report r;
        check(fskws_evaluate(l.get(), d.get(), su.get(), s.get(), ev_resample, ev_seed, ev_threads, r.out()));
        if (!ev_out.empty()) check(fskws_report_save(r.get(), ev_out.c_str()));
        std::size_t n = 0;
        double mean = 0.0, sd = 0.0;
        check(fskws_report_summary(r.get(), &n, &mean, &sd));
        std::printf("%s tasks=%zu mean=%.4f std=%.4f", cfg.at("algo").get<std::string>().c_str(), n, mean, sd);
        if (ev_resample > 0) {
            char* lines = nullptr;
            check(fskws_report_jsonl(r.get(), &lines));
            std::istringstream in(take(lines));
            std::string line, last;
            while (std::getline(in, line))
                if (!line.empty()) last = line;
            const json summary = json::parse(last);
            std::printf(" resampled_mean=%.4f resampled_std=%.4f", summary.at("mean_resampled").get<double>(),
                        summary.at("std_resampled").get<double>());
        }
        std::printf("\n");
    } else if (*de) {
        LearnerH l;
        check(fskws_learner_load(de_ckpt.c_str(), l.out()));
        Dataset d = load_data(de_data);
        check(fskws_learner_dump_embeddings(l.get(), d.get(), de_out.c_str()));
    } else if (*rp) {
        std::vector<Report> reports;
        std::vector<const fskws_report*> ptrs;
        for (const auto& f : rp_files) {
            reports.emplace_back();
            check(fskws_report_load(f.c_str(), reports.back().out()));
            ptrs.push_back(reports.back().get());
        }
        char* table = nullptr;
        check(fskws_report_table(ptrs.data(), ptrs.size(), &table));
        write_text(rp_out, take(table));
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Failure& f) {
        std::fprintf(stderr, "fskws: error[%s]: %s\n", fskws_status_name(f.status), f.message.c_str());
        return static_cast<int>(f.status);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "fskws: error[internal]: %s\n", e.what());
        return static_cast<int>(FSKWS_ERR_INTERNAL);
    }
}
