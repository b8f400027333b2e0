#include "fskws/episodes.hpp"

#include <algorithm>
#include <set>

#include "fskws/error.hpp"
#include "text_io.hpp"

namespace fskws {

const char* to_string(Phase p) noexcept { return p == Phase::Train ? "train" : "test"; }

Phase phase_from_string(std::string_view s) {
    if (s == "train") return Phase::Train;
    if (s == "test") return Phase::Test;
    throw InvalidArgument("unknown phase '" + std::string(s) + "'");
}

std::vector<std::string> SplitSpec::keywords(Phase p) const {
    std::vector<std::string> out;
    for (const auto& [label, ids] : pool(p).keywords) out.push_back(label);
    return out;
}

namespace {

void pool_unknown(PhasePool& p) {
    p.unknown_ids.clear();
    for (const auto& [label, ids] : p.unknown) p.unknown_ids.insert(p.unknown_ids.end(), ids.begin(), ids.end());
}

bool reserved_class(std::string_view label) { return label == kUnknownClass || label == kSilenceClass; }

}  // namespace

SplitSpec build_splits(const FeatureDataset& dataset, std::uint64_t seed, SplitSizes sizes) {
    std::vector<std::string> kws;
    for (const auto& l : dataset.labels())
        if (l != kSilenceLabel) kws.push_back(l);
    const std::size_t need = sizes.unknown + sizes.train + sizes.test;
    if (kws.size() < need)
        throw SamplingError("split needs " + std::to_string(need) + " keyword labels, dataset has " +
                            std::to_string(kws.size()));
    for (const auto& k : kws)
        if (reserved_class(k)) throw InvalidArgument("keyword label '" + k + "' clashes with an episode class name");
    const auto noise_rows = dataset.rows_with_label(kSilenceLabel);
    if (noise_rows.size() < 2) throw SamplingError("split needs at least 2 silence utterances");

    Rng rng(seed);
    rng.shuffle(kws);
    SplitSpec s;
    std::size_t pos = 0;
    auto ids_of = [&](const std::string& label) {
        std::vector<std::string> ids;
        for (auto r : dataset.rows_with_label(label)) ids.push_back(dataset.at(r).id);
        return ids;
    };
    for (std::size_t i = 0; i < sizes.unknown; ++i, ++pos) s.unknown_keywords.push_back(kws[pos]);
    for (std::size_t i = 0; i < sizes.train; ++i, ++pos) s.train.keywords[kws[pos]] = ids_of(kws[pos]);
    for (std::size_t i = 0; i < sizes.test; ++i, ++pos) s.test.keywords[kws[pos]] = ids_of(kws[pos]);
    std::sort(s.unknown_keywords.begin(), s.unknown_keywords.end());

    auto halve = [&](std::vector<std::string> ids, std::vector<std::string>& a, std::vector<std::string>& b) {
        rng.shuffle(ids);
        const std::size_t half = ids.size() / 2;
        a.assign(ids.begin(), ids.begin() + static_cast<long>(half));
        b.assign(ids.begin() + static_cast<long>(half), ids.end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
    };
    for (const auto& u : s.unknown_keywords) halve(ids_of(u), s.train.unknown[u], s.test.unknown[u]);
    pool_unknown(s.train);
    pool_unknown(s.test);
    std::vector<std::string> noise;
    for (auto r : noise_rows) noise.push_back(dataset.at(r).id);
    halve(noise, s.train.noise_ids, s.test.noise_ids);
    check_split(s);
    return s;
}

void check_split(const SplitSpec& s) {
    std::set<std::string> labels;
    auto claim_label = [&](const std::string& l) {
        if (reserved_class(l) || l == kSilenceLabel)
            throw FormatError("keyword label '" + l + "' is reserved");
        if (!labels.insert(l).second) throw FormatError("keyword '" + l + "' appears in more than one role");
    };
    for (const auto& l : s.unknown_keywords) claim_label(l);
    for (const auto& [l, ids] : s.train.keywords) claim_label(l);
    for (const auto& [l, ids] : s.test.keywords) claim_label(l);

    std::set<std::string> ids;
    auto claim = [&](const std::vector<std::string>& v) {
        for (const auto& id : v)
            if (!ids.insert(id).second) throw FormatError("utterance '" + id + "' is assigned twice");
    };
    for (const PhasePool* p : {&s.train, &s.test}) {
        for (const auto& [l, v] : p->keywords) claim(v);
        for (const auto& [l, v] : p->unknown) {
            if (!std::binary_search(s.unknown_keywords.begin(), s.unknown_keywords.end(), l))
                throw FormatError("unknown pool for '" + l + "', which is not an unknown keyword");
            claim(v);
        }
        claim(p->noise_ids);
    }
}

void check_split_against(const SplitSpec& s, const FeatureDataset& ds) {
    auto check = [&](const std::vector<std::string>& v, std::string_view want) {
        for (const auto& id : v) {
            auto row = ds.find(id);
            if (!row) throw SamplingError("split names utterance '" + id + "', which is not in the dataset");
            if (ds.at(*row).label != want)
                throw SamplingError("utterance '" + id + "' is labelled '" + ds.at(*row).label + "', split expects '" +
                                    std::string(want) + "'");
        }
    };
    for (const PhasePool* p : {&s.train, &s.test}) {
        for (const auto& [l, v] : p->keywords) check(v, l);
        for (const auto& [l, v] : p->unknown) check(v, l);
        check(p->noise_ids, kSilenceLabel);
    }
}

// rows: <role>\t<label>\t<phase>\t<space-separated ids>
std::string serialize_split(const SplitSpec& s) {
    std::string out = "kwssplit v1 unknown=" + std::to_string(s.unknown_keywords.size()) +
                      " train=" + std::to_string(s.train.keywords.size()) +
                      " test=" + std::to_string(s.test.keywords.size()) + "\n";
    auto row = [&](std::string_view role, const std::string& label, Phase ph, const std::vector<std::string>& ids) {
        out += role;
        out += '\t';
        out += label;
        out += '\t';
        out += to_string(ph);
        out += '\t';
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (i) out += ' ';
            out += ids[i];
        }
        out += '\n';
    };
    for (Phase ph : {Phase::Train, Phase::Test})
        for (const auto& [l, ids] : s.pool(ph).keywords) row("keyword", l, ph, ids);
    for (Phase ph : {Phase::Train, Phase::Test})
        for (const auto& [l, ids] : s.pool(ph).unknown) row("unknown", l, ph, ids);
    for (Phase ph : {Phase::Train, Phase::Test}) row("silence", std::string(kSilenceLabel), ph, s.pool(ph).noise_ids);
    return out;
}

SplitSpec parse_split(const std::vector<std::string>& lines) {
    if (lines.empty()) throw FormatError("missing header", 1);
    const auto head = text::tokens(lines[0]);
    if (head.size() != 5 || head[0] != "kwssplit" || head[1] != "v1")
        throw FormatError("expected 'kwssplit v1 unknown=<int> train=<int> test=<int>'", 1);
    const auto n_unknown = text::parse_kv<std::size_t>(head[2], "unknown", 1);
    const auto n_train = text::parse_kv<std::size_t>(head[3], "train", 1);
    const auto n_test = text::parse_kv<std::size_t>(head[4], "test", 1);

    SplitSpec s;
    std::set<std::string> unknown;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::size_t ln = i + 1;
        const auto f = text::split(lines[i], '\t');
        if (f.size() != 4) throw FormatError("expected <role>\\t<label>\\t<phase>\\t<ids>", ln);
        Phase ph;
        try {
            ph = phase_from_string(f[2]);
        } catch (const InvalidArgument&) {
            throw FormatError("unknown phase '" + std::string(f[2]) + "'", ln);
        }
        PhasePool& pool = ph == Phase::Train ? s.train : s.test;
        std::vector<std::string> ids;
        for (auto t : text::tokens(f[3])) ids.emplace_back(t);
        const std::string label(f[1]);
        if (f[0] == "keyword") {
            if (!pool.keywords.emplace(label, std::move(ids)).second)
                throw FormatError("keyword '" + label + "' listed twice", ln);
        } else if (f[0] == "unknown") {
            unknown.insert(label);
            if (!pool.unknown.emplace(label, std::move(ids)).second)
                throw FormatError("unknown keyword '" + label + "' listed twice for one phase", ln);
        } else if (f[0] == "silence") {
            if (label != kSilenceLabel) throw FormatError("silence rows must carry the silence label", ln);
            pool.noise_ids.insert(pool.noise_ids.end(), ids.begin(), ids.end());
        } else {
            throw FormatError("unknown role '" + std::string(f[0]) + "'", ln);
        }
    }
    s.unknown_keywords.assign(unknown.begin(), unknown.end());
    if (s.unknown_keywords.size() != n_unknown || s.train.keywords.size() != n_train ||
        s.test.keywords.size() != n_test)
        throw FormatError("keyword counts do not match the header", 1);
    pool_unknown(s.train);
    pool_unknown(s.test);
    check_split(s);
    return s;
}

void save_split(const SplitSpec& split, const std::string& path) { text::write_file(path, serialize_split(split)); }

SplitSpec load_split(const std::string& path) { return parse_split(text::read_lines(path)); }

// ---------------------------------------------------------------------------
// sampling

void SamplerConfig::validate() const {
    if (ways < 3) throw ConfigError("ways must be at least 3 (keywords plus unknown plus silence)");
    if (shots < 1) throw ConfigError("shots must be at least 1");
    if (queries < 1) throw ConfigError("queries per class must be at least 1");
    if (tasks_per_epoch < 1) throw ConfigError("tasks_per_epoch must be at least 1");
}

const std::vector<std::string>& class_pool(const SplitSpec& split, Phase phase, std::string_view label) {
    const PhasePool& p = split.pool(phase);
    if (label == kUnknownClass) return p.unknown_ids;
    if (label == kSilenceClass) return p.noise_ids;
    auto it = p.keywords.find(std::string(label));
    if (it == p.keywords.end())
        throw SamplingError("class '" + std::string(label) + "' is not a " + to_string(phase) + " keyword");
    return it->second;
}

Episode sample_episode(const SplitSpec& split, Phase phase, const SamplerConfig& cfg, Rng& rng) {
    cfg.validate();
    const auto kws = split.keywords(phase);
    const std::size_t n_kw = cfg.ways - 2;
    if (kws.size() < n_kw)
        throw SamplingError(std::string(to_string(phase)) + " phase has " + std::to_string(kws.size()) +
                            " keywords, episode needs " + std::to_string(n_kw));
    Episode ep;
    ep.shots = cfg.shots;
    ep.queries = cfg.queries;
    for (auto i : rng.choose(kws.size(), n_kw)) ep.class_labels.push_back(kws[i]);
    ep.class_labels.emplace_back(kUnknownClass);
    ep.class_labels.emplace_back(kSilenceClass);
    rng.shuffle(ep.class_labels);

    const std::size_t per_class = cfg.shots + cfg.queries;
    for (std::size_t c = 0; c < ep.ways(); ++c) {
        const auto& pool = class_pool(split, phase, ep.class_labels[c]);
        if (pool.size() < per_class)
            throw SamplingError("class '" + ep.class_labels[c] + "' has " + std::to_string(pool.size()) +
                                " utterances, episode needs " + std::to_string(per_class));
        const auto picks = rng.choose(pool.size(), per_class);
        for (std::size_t j = 0; j < per_class; ++j)
            (j < cfg.shots ? ep.support : ep.query).push_back({pool[picks[j]], c});
    }
    // per-class blocks were appended in class order, so both lists are sorted by class
    return ep;
}

Episode resample_support(const SplitSpec& split, Phase phase, const Episode& episode, Rng& rng) {
    Episode out = episode;
    out.support.clear();
    for (std::size_t c = 0; c < episode.ways(); ++c) {
        std::set<std::string> taken;
        for (const auto& q : episode.query)
            if (q.cls == c) taken.insert(q.id);
        std::vector<std::string> rest;
        for (const auto& id : class_pool(split, phase, episode.class_labels[c]))
            if (!taken.count(id)) rest.push_back(id);
        if (rest.size() < episode.shots)
            throw SamplingError("class '" + episode.class_labels[c] + "' has too few utterances to redraw supports");
        for (auto i : rng.choose(rest.size(), episode.shots)) out.support.push_back({rest[i], c});
    }
    return out;
}

std::vector<std::string> episode_violations(const Episode& ep, const SplitSpec& split, Phase phase) {
    std::vector<std::string> v;
    const auto kws = split.keywords(phase);
    std::set<std::string> labels(ep.class_labels.begin(), ep.class_labels.end());
    if (labels.size() != ep.ways()) v.push_back("duplicate class labels");
    if (!labels.count(std::string(kUnknownClass))) v.push_back("no unknown class");
    if (!labels.count(std::string(kSilenceClass))) v.push_back("no silence class");
    for (const auto& l : ep.class_labels)
        if (!reserved_class(l) && !std::binary_search(kws.begin(), kws.end(), l))
            v.push_back("class '" + l + "' is not a " + to_string(phase) + " keyword");

    std::vector<std::size_t> n_support(ep.ways(), 0), n_query(ep.ways(), 0);
    std::set<std::string> support_ids;
    auto check_item = [&](const EpisodeItem& it, const char* where) {
        if (it.cls >= ep.ways()) {
            v.push_back(std::string(where) + " item '" + it.id + "' has class index out of range");
            return false;
        }
        const std::string& label = ep.class_labels[it.cls];
        if (!reserved_class(label) && !split.pool(phase).keywords.count(label)) return true;
        const auto& pool = class_pool(split, phase, label);
        if (std::find(pool.begin(), pool.end(), it.id) == pool.end())
            v.push_back(std::string(where) + " item '" + it.id + "' is not in the pool of class '" +
                        ep.class_labels[it.cls] + "'");
        return true;
    };
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
        const auto& it = ep.support[i];
        if (!check_item(it, "support")) continue;
        ++n_support[it.cls];
        if (!support_ids.insert(it.id).second) v.push_back("support repeats '" + it.id + "'");
        if (i && ep.support[i - 1].cls > it.cls) v.push_back("support is not ordered by class");
    }
    std::set<std::string> query_ids;
    for (std::size_t i = 0; i < ep.query.size(); ++i) {
        const auto& it = ep.query[i];
        if (!check_item(it, "query")) continue;
        ++n_query[it.cls];
        if (support_ids.count(it.id)) v.push_back("'" + it.id + "' is in both support and query");
        if (!query_ids.insert(it.id).second) v.push_back("query repeats '" + it.id + "'");
        if (i && ep.query[i - 1].cls > it.cls) v.push_back("query is not ordered by class");
    }
    for (std::size_t c = 0; c < ep.ways(); ++c) {
        if (n_support[c] != ep.shots)
            v.push_back("class " + std::to_string(c) + " has " + std::to_string(n_support[c]) + " supports");
        if (n_query[c] != ep.queries)
            v.push_back("class " + std::to_string(c) + " has " + std::to_string(n_query[c]) + " queries");
    }
    return v;
}

Suite fixed_test_suite(const SplitSpec& split, std::size_t n_tasks, const SamplerConfig& cfg, std::uint64_t seed) {
    if (n_tasks < 1) throw InvalidArgument("suite needs at least one task");
    Suite s;
    s.ways = cfg.ways;
    s.shots = cfg.shots;
    s.queries = cfg.queries;
    s.episodes.reserve(n_tasks);
    for (std::size_t i = 0; i < n_tasks; ++i) {
        Rng rng = Rng::stream(seed, i);
        s.episodes.push_back(sample_episode(split, Phase::Test, cfg, rng));
    }
    return s;
}

std::string serialize_suite(const Suite& s) {
    std::string out = "kwssuite v1 N=" + std::to_string(s.ways) + " K=" + std::to_string(s.shots) +
                      " Q=" + std::to_string(s.queries) + " tasks=" + std::to_string(s.episodes.size()) + "\n";
    for (const auto& ep : s.episodes) {
        for (const auto& it : ep.support) {
            out += ep.class_labels.at(it.cls);
            out += ':';
            out += it.id;
            out += '\t';
        }
        out += '|';
        for (const auto& it : ep.query) {
            out += '\t';
            out += ep.class_labels.at(it.cls);
            out += ':';
            out += it.id;
        }
        out += '\n';
    }
    return out;
}

Suite parse_suite(const std::vector<std::string>& lines) {
    if (lines.empty()) throw FormatError("missing header", 1);
    const auto head = text::tokens(lines[0]);
    if (head.size() != 6 || head[0] != "kwssuite" || head[1] != "v1")
        throw FormatError("expected 'kwssuite v1 N=<int> K=<int> Q=<int> tasks=<int>'", 1);
    Suite s;
    s.ways = text::parse_kv<std::size_t>(head[2], "N", 1);
    s.shots = text::parse_kv<std::size_t>(head[3], "K", 1);
    s.queries = text::parse_kv<std::size_t>(head[4], "Q", 1);
    const auto tasks = text::parse_kv<std::size_t>(head[5], "tasks", 1);
    if (lines.size() - 1 != tasks)
        throw FormatError("header declares " + std::to_string(tasks) + " tasks, file has " +
                          std::to_string(lines.size() - 1), 1);

    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::size_t ln = i + 1;
        Episode ep;
        ep.shots = s.shots;
        ep.queries = s.queries;
        std::map<std::string, std::size_t> index;
        bool in_query = false;
        for (auto field : text::split(lines[i], '\t')) {
            if (field == "|") {
                if (in_query) throw FormatError("more than one '|' separator", ln);
                in_query = true;
                continue;
            }
            const auto colon = field.find(':');
            if (colon == std::string_view::npos || colon == 0 || colon + 1 == field.size())
                throw FormatError("expected <class_label>:<utt_id>, got '" + std::string(field) + "'", ln);
            const std::string label(field.substr(0, colon));
            EpisodeItem it{std::string(field.substr(colon + 1)), 0};
            auto found = index.find(label);
            if (found == index.end()) {
                if (in_query) throw FormatError("query class '" + label + "' has no supports", ln);
                found = index.emplace(label, ep.class_labels.size()).first;
                ep.class_labels.push_back(label);
            }
            it.cls = found->second;
            (in_query ? ep.query : ep.support).push_back(std::move(it));
        }
        if (!in_query) throw FormatError("missing '|' between support and query", ln);
        if (ep.ways() != s.ways || ep.support.size() != s.ways * s.shots || ep.query.size() != s.ways * s.queries)
            throw FormatError("episode does not have N=" + std::to_string(s.ways) + " K=" + std::to_string(s.shots) +
                              " Q=" + std::to_string(s.queries) + " items", ln);
        s.episodes.push_back(std::move(ep));
    }
    return s;
}

void save_suite(const Suite& suite, const std::string& path) { text::write_file(path, serialize_suite(suite)); }

Suite load_suite(const std::string& path) { return parse_suite(text::read_lines(path)); }

std::string suite_fingerprint(const Suite& suite) { return text::fingerprint(serialize_suite(suite)); }

EpisodeBatch episode_batch(const FeatureDataset& ds, const Episode& ep) {
    EpisodeBatch b;
    b.ways = ep.ways();
    b.shots = ep.shots;
    std::vector<std::size_t> rows;
    for (const auto& it : ep.support) {
        rows.push_back(ds.index_of(it.id));
        b.support_labels.push_back(it.cls);
    }
    b.support = ds.batch(rows);
    rows.clear();
    for (const auto& it : ep.query) {
        rows.push_back(ds.index_of(it.id));
        b.query_labels.push_back(it.cls);
    }
    b.query = ds.batch(rows);
    return b;
}

}  // namespace fskws
