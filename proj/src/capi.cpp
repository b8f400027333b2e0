#include "fskws/fskws.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "fskws/error.hpp"
#include "fskws/harness.hpp"
#include "json.hpp"
#include "text_io.hpp"

struct fskws_dataset {
    fskws::FeatureDataset value;
};
struct fskws_split {
    fskws::SplitSpec value;
};
struct fskws_suite {
    fskws::Suite value;
};
struct fskws_learner {
    fskws::Learner value;
};
struct fskws_report {
    fskws::EvalReport value;
};

namespace {

thread_local std::string g_last_error;

fskws_status status_of(fskws::ErrorKind k) {
    using fskws::ErrorKind;
    switch (k) {
        case ErrorKind::InvalidArgument: return FSKWS_ERR_INVALID_ARGUMENT;
        case ErrorKind::Config: return FSKWS_ERR_CONFIG;
        case ErrorKind::Format: return FSKWS_ERR_FORMAT;
        case ErrorKind::Io: return FSKWS_ERR_IO;
        case ErrorKind::Sampling: return FSKWS_ERR_SAMPLING;
        case ErrorKind::Shape: return FSKWS_ERR_SHAPE;
        case ErrorKind::Numeric: return FSKWS_ERR_NUMERIC;
        case ErrorKind::State: return FSKWS_ERR_STATE;
    }
    return FSKWS_ERR_INTERNAL;
}

template <typename F>
fskws_status guarded(F&& f) {
    try {
        f();
        g_last_error.clear();
        return FSKWS_OK;
    } catch (const fskws::Error& e) {
        g_last_error = e.what();
        return status_of(e.kind());
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return FSKWS_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return FSKWS_ERR_INTERNAL;
    }
}

template <typename T>
const T& deref(const T* p, const char* what) {
    if (!p) throw fskws::InvalidArgument(std::string(what) + " is null");
    return *p;
}

template <typename T>
T& deref(T* p, const char* what) {
    if (!p) throw fskws::InvalidArgument(std::string(what) + " is null");
    return *p;
}

std::string path_arg(const char* p, const char* what) {
    if (!p || !*p) throw fskws::InvalidArgument(std::string(what) + " path is empty");
    return p;
}

void require_out(const void* out) {
    if (!out) throw fskws::InvalidArgument("output pointer is null");
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.data(), s.size() + 1);
    return out;
}

fskws::SynthConfig synth_from_json(const char* text) {
    fskws::SynthConfig c;
    if (!text || !*text) return c;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw fskws::ConfigError(std::string("synthetic configuration is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw fskws::ConfigError("synthetic configuration must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        auto count = [&] {
            if (!v.is_number_unsigned())
                throw fskws::ConfigError("'" + key + "' must be a non-negative integer, got " + v.dump());
            return v.get<std::size_t>();
        };
        auto number = [&] {
            if (!v.is_number()) throw fskws::ConfigError("'" + key + "' must be a number, got " + v.dump());
            return v.get<double>();
        };
        if (key == "keywords") c.num_keywords = count();
        else if (key == "layers") c.num_layers = count();
        else if (key == "dim") c.dim = count();
        else if (key == "utterances") c.utterances_per_keyword = count();
        else if (key == "sigma_within") c.sigma_within = number();
        else if (key == "sigma_between") c.sigma_between = number();
        else if (key == "noise_classes") c.noise_classes = count();
        else if (key == "noise_utterances") c.utterances_per_noise = count();
        else if (key == "frames") c.frames_per_utterance = count();
        else if (key == "seed") c.seed = count();
        else if (key == "mode") {
            if (!v.is_string()) throw fskws::ConfigError("'mode' must be \"pooled\" or \"frames\"");
            try {
                c.mode = fskws::feature_mode_from_string(v.get<std::string>());
            } catch (const fskws::FormatError& e) {
                throw fskws::ConfigError(e.what());
            }
        } else {
            throw fskws::ConfigError("unknown synthetic configuration key '" + key + "'");
        }
    }
    return c;
}

}  // namespace

extern "C" {

const char* fskws_version(void) { return "0.1.0"; }

const char* fskws_status_name(fskws_status s) {
    switch (s) {
        case FSKWS_OK: return "ok";
        case FSKWS_ERR_INVALID_ARGUMENT: return "invalid-argument";
        case FSKWS_ERR_CONFIG: return "config";
        case FSKWS_ERR_FORMAT: return "format";
        case FSKWS_ERR_IO: return "io";
        case FSKWS_ERR_SAMPLING: return "sampling";
        case FSKWS_ERR_SHAPE: return "shape";
        case FSKWS_ERR_NUMERIC: return "numeric";
        case FSKWS_ERR_STATE: return "state";
        case FSKWS_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* fskws_last_error(void) { return g_last_error.c_str(); }

void fskws_string_free(char* s) { std::free(s); }

// datasets

fskws_status fskws_dataset_generate(const char* config_json, fskws_dataset** out) {
    return guarded([&] {
        require_out(out);
        *out = new fskws_dataset{fskws::generate_synthetic(synth_from_json(config_json))};
    });
}

fskws_status fskws_dataset_load(const char* path, fskws_dataset** out) {
    return guarded([&] {
        require_out(out);
        *out = new fskws_dataset{fskws::load_dataset(path_arg(path, "dataset"))};
    });
}

fskws_status fskws_dataset_save(const fskws_dataset* d, const char* path) {
    return guarded([&] { fskws::save_dataset(deref(d, "dataset").value, path_arg(path, "dataset")); });
}

fskws_status fskws_dataset_info(const fskws_dataset* d, size_t* utterances, size_t* layers, size_t* dim,
                                int* frames) {
    return guarded([&] {
        const auto& ds = deref(d, "dataset").value;
        if (utterances) *utterances = ds.size();
        if (layers) *layers = ds.num_layers();
        if (dim) *dim = ds.dim();
        if (frames) *frames = ds.mode() == fskws::FeatureMode::Frames ? 1 : 0;
    });
}

void fskws_dataset_free(fskws_dataset* d) { delete d; }

// splits

fskws_status fskws_split_build(const fskws_dataset* d, uint64_t seed, fskws_split** out) {
    return guarded([&] {
        require_out(out);
        *out = new fskws_split{fskws::build_splits(deref(d, "dataset").value, seed)};
    });
}

fskws_status fskws_split_load(const char* path, const fskws_dataset* d, fskws_split** out) {
    return guarded([&] {
        require_out(out);
        fskws::SplitSpec s = fskws::load_split(path_arg(path, "split"));
        if (d) fskws::check_split_against(s, d->value);
        *out = new fskws_split{std::move(s)};
    });
}

fskws_status fskws_split_save(const fskws_split* s, const char* path) {
    return guarded([&] { fskws::save_split(deref(s, "split").value, path_arg(path, "split")); });
}

void fskws_split_free(fskws_split* s) { delete s; }

// suites

fskws_status fskws_suite_make(const fskws_split* s, size_t tasks, size_t ways, size_t shots, size_t queries,
                              uint64_t seed, fskws_suite** out) {
    return guarded([&] {
        require_out(out);
        if (tasks == 0) throw fskws::InvalidArgument("a suite needs at least one task");
        fskws::SamplerConfig cfg;
        cfg.ways = ways;
        cfg.shots = shots;
        cfg.queries = queries;
        cfg.seed = seed;
        *out = new fskws_suite{fskws::fixed_test_suite(deref(s, "split").value, tasks, cfg, seed)};
    });
}

fskws_status fskws_suite_load(const char* path, fskws_suite** out) {
    return guarded([&] {
        require_out(out);
        *out = new fskws_suite{fskws::load_suite(path_arg(path, "suite"))};
    });
}

fskws_status fskws_suite_save(const fskws_suite* s, const char* path) {
    return guarded([&] { fskws::save_suite(deref(s, "suite").value, path_arg(path, "suite")); });
}

fskws_status fskws_suite_info(const fskws_suite* s, size_t* tasks, size_t* ways, size_t* shots, size_t* queries) {
    return guarded([&] {
        const auto& su = deref(s, "suite").value;
        if (tasks) *tasks = su.episodes.size();
        if (ways) *ways = su.ways;
        if (shots) *shots = su.shots;
        if (queries) *queries = su.queries;
    });
}

fskws_status fskws_suite_fingerprint(const fskws_suite* s, char** out) {
    return guarded([&] {
        require_out(out);
        *out = dup_string(fskws::suite_fingerprint(deref(s, "suite").value));
    });
}

void fskws_suite_free(fskws_suite* s) { delete s; }

// configurations

fskws_status fskws_config_merge(const char* base_json, const char* overrides_json, char** out) {
    return guarded([&] {
        require_out(out);
        fskws::RunConfig c;
        if (base_json && *base_json) c = fskws::RunConfig::from_json(base_json, c);
        if (overrides_json && *overrides_json) c = fskws::RunConfig::from_json(overrides_json, c);
        c.validate();
        *out = dup_string(c.to_json());
    });
}

// learners

fskws_status fskws_learner_create(const char* config_json, const fskws_dataset* d, fskws_learner** out) {
    return guarded([&] {
        require_out(out);
        const fskws::RunConfig c =
            config_json && *config_json ? fskws::RunConfig::from_json(config_json) : fskws::RunConfig{};
        *out = new fskws_learner{fskws::make_learner(c, deref(d, "dataset").value)};
    });
}

fskws_status fskws_learner_train(fskws_learner* l, const fskws_dataset* d, const fskws_split* s,
                                 fskws_epoch_callback on_epoch, void* user) {
    return guarded([&] {
        fskws::EpochCallback cb;
        if (on_epoch) cb = [&](std::size_t e, double loss) { on_epoch(e, loss, user); };
        fskws::train(deref(l, "learner").value, deref(d, "dataset").value, deref(s, "split").value, cb);
    });
}

fskws_status fskws_learner_save(const fskws_learner* l, const char* path) {
    return guarded([&] { fskws::save_checkpoint(deref(l, "learner").value, path_arg(path, "checkpoint")); });
}

fskws_status fskws_learner_load(const char* path, fskws_learner** out) {
    return guarded([&] {
        require_out(out);
        *out = new fskws_learner{fskws::load_checkpoint(path_arg(path, "checkpoint"))};
    });
}

fskws_status fskws_learner_config(const fskws_learner* l, char** out) {
    return guarded([&] {
        require_out(out);
        *out = dup_string(deref(l, "learner").value.config.to_json());
    });
}

fskws_status fskws_learner_dump_embeddings(const fskws_learner* l, const fskws_dataset* d, const char* path) {
    return guarded([&] {
        fskws::dump_embeddings(deref(l, "learner").value, deref(d, "dataset").value, path_arg(path, "embedding"));
    });
}

void fskws_learner_free(fskws_learner* l) { delete l; }

// evaluation

fskws_status fskws_evaluate(const fskws_learner* l, const fskws_dataset* d, const fskws_suite* su,
                            const fskws_split* sp, size_t resample_supports, uint64_t resample_seed, size_t threads,
                            fskws_report** out) {
    return guarded([&] {
        require_out(out);
        fskws::EvalOptions opt;
        opt.threads = threads ? threads : 1;
        opt.resample_supports = resample_supports;
        opt.resample_seed = resample_seed;
        opt.split = sp ? &sp->value : nullptr;
        *out = new fskws_report{
            fskws::evaluate_suite(deref(l, "learner").value, deref(d, "dataset").value, deref(su, "suite").value, opt)};
    });
}

fskws_status fskws_report_load(const char* path, fskws_report** out) {
    return guarded([&] {
        require_out(out);
        *out = new fskws_report{fskws::EvalReport::from_jsonl(fskws::text::read_file(path_arg(path, "report")))};
    });
}

fskws_status fskws_report_save(const fskws_report* r, const char* path) {
    return guarded([&] { fskws::text::write_file(path_arg(path, "report"), deref(r, "report").value.to_jsonl()); });
}

fskws_status fskws_report_summary(const fskws_report* r, size_t* tasks, double* mean, double* std) {
    return guarded([&] {
        const auto& rep = deref(r, "report").value;
        if (tasks) *tasks = rep.accuracies.size();
        if (mean) *mean = rep.mean;
        if (std) *std = rep.std;
    });
}

fskws_status fskws_report_accuracy(const fskws_report* r, size_t task, double* accuracy) {
    return guarded([&] {
        require_out(accuracy);
        const auto& rep = deref(r, "report").value;
        if (task >= rep.accuracies.size())
            throw fskws::InvalidArgument("task " + std::to_string(task) + " outside the report");
        *accuracy = rep.accuracies[task];
    });
}

fskws_status fskws_report_jsonl(const fskws_report* r, char** out) {
    return guarded([&] {
        require_out(out);
        *out = dup_string(deref(r, "report").value.to_jsonl());
    });
}

fskws_status fskws_report_table(const fskws_report* const* reports, size_t count, char** out) {
    return guarded([&] {
        require_out(out);
        if (count && !reports) throw fskws::InvalidArgument("report list is null");
        std::vector<fskws::EvalReport> list;
        for (size_t i = 0; i < count; ++i) list.push_back(deref(reports[i], "report").value);
        *out = dup_string(fskws::summarize_reports(list));
    });
}

void fskws_report_free(fskws_report* r) { delete r; }

}  // extern "C"
