#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fskws/features.hpp"
#include "fskws/rng.hpp"

namespace fskws {

/// Class labels of the two non-keyword episode classes.
inline constexpr std::string_view kUnknownClass = "unknown";
inline constexpr std::string_view kSilenceClass = "silence";

enum class Phase { Train, Test };

const char* to_string(Phase p) noexcept;
Phase phase_from_string(std::string_view s);

/// Utterance ids available to one phase.
struct PhasePool {
    /// keyword label -> utterance ids, for the phase's own keywords
    std::map<std::string, std::vector<std::string>> keywords;
    /// unknown keyword label -> its utterances assigned to this phase
    std::map<std::string, std::vector<std::string>> unknown;
    /// all of `unknown`, pooled in label order
    std::vector<std::string> unknown_ids;
    std::vector<std::string> noise_ids;

    bool operator==(const PhasePool&) const = default;
};

struct SplitSpec {
    std::vector<std::string> unknown_keywords;
    PhasePool train;
    PhasePool test;

    const PhasePool& pool(Phase p) const { return p == Phase::Train ? train : test; }
    std::vector<std::string> keywords(Phase p) const;
    bool operator==(const SplitSpec&) const = default;
};

struct SplitSizes {
    std::size_t unknown = 5;
    std::size_t train = 20;
    std::size_t test = 10;
};

/// Deterministic keyword partition. Meta-train and meta-test keywords belong
/// wholly to their phase; the unknown keywords and the silence pool are split
/// in half by utterance.
SplitSpec build_splits(const FeatureDataset& dataset, std::uint64_t seed, SplitSizes sizes = {});

/// Throws FormatError when keyword sets or id sets overlap, or when an id
/// appears twice.
void check_split(const SplitSpec& split);
/// Throws SamplingError when the split names ids the dataset does not have.
void check_split_against(const SplitSpec& split, const FeatureDataset& dataset);

std::string serialize_split(const SplitSpec& split);
SplitSpec parse_split(const std::vector<std::string>& lines);
void save_split(const SplitSpec& split, const std::string& path);
SplitSpec load_split(const std::string& path);

struct SamplerConfig {
    std::size_t ways = 12;
    std::size_t shots = 5;
    std::size_t queries = 5;
    std::size_t tasks_per_epoch = 1000;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpisodeItem {
    std::string id;
    std::size_t cls = 0;
    bool operator==(const EpisodeItem&) const = default;
};

/// One N-way K-shot task. Support and query are ordered by class index.
struct Episode {
    std::vector<std::string> class_labels;
    std::vector<EpisodeItem> support;
    std::vector<EpisodeItem> query;
    std::size_t shots = 0;
    std::size_t queries = 0;

    std::size_t ways() const noexcept { return class_labels.size(); }
    bool operator==(const Episode&) const = default;
};

/// Utterance ids that may fill class `label` of an episode in `phase`.
const std::vector<std::string>& class_pool(const SplitSpec& split, Phase phase, std::string_view label);

Episode sample_episode(const SplitSpec& split, Phase phase, const SamplerConfig& cfg, Rng& rng);

/// Same classes and queries, fresh support draws from the rest of each pool.
Episode resample_support(const SplitSpec& split, Phase phase, const Episode& episode, Rng& rng);

/// Every broken episode invariant, as text; empty when the episode is valid.
std::vector<std::string> episode_violations(const Episode& episode, const SplitSpec& split, Phase phase);

struct Suite {
    std::size_t ways = 0;
    std::size_t shots = 0;
    std::size_t queries = 0;
    std::vector<Episode> episodes;

    bool operator==(const Suite&) const = default;
};

/// Meta-test suite; episode i is drawn from stream i of `seed`.
Suite fixed_test_suite(const SplitSpec& split, std::size_t n_tasks, const SamplerConfig& cfg, std::uint64_t seed);

std::string serialize_suite(const Suite& suite);
Suite parse_suite(const std::vector<std::string>& lines);
void save_suite(const Suite& suite, const std::string& path);
Suite load_suite(const std::string& path);
/// Fingerprint of the serialized suite.
std::string suite_fingerprint(const Suite& suite);

/// Model inputs of an episode.
struct EpisodeBatch {
    std::size_t ways = 0;
    std::size_t shots = 0;
    FeatureBatch support;
    std::vector<std::size_t> support_labels;
    FeatureBatch query;
    std::vector<std::size_t> query_labels;
};

EpisodeBatch episode_batch(const FeatureDataset& dataset, const Episode& episode);

}  // namespace fskws
