#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fskws/graph.hpp"
#include "fskws/params.hpp"
#include "fskws/rng.hpp"
#include "fskws/tensor.hpp"

namespace fskws {

/// Dataset label of background-noise utterances (the silence class).
inline constexpr std::string_view kSilenceLabel = "_silence_";

enum class FeatureMode { Pooled, Frames };

const char* to_string(FeatureMode m) noexcept;
FeatureMode feature_mode_from_string(std::string_view s);

struct UtteranceFeatures {
    std::string id;
    std::string label;
    /// [L, d]: one time-averaged vector per encoder layer.
    std::optional<Tensor> pooled_layers;
    /// [T, d_f]: raw per-frame features.
    std::optional<Tensor> frames;
};

/// Model input for a batch of utterances.
struct FeatureBatch {
    FeatureMode mode = FeatureMode::Pooled;
    /// Pooled: [B, L, d]. Frames: all frames stacked, [sum T, d_f].
    Tensor data;
    /// Frames mode: B+1 row offsets into `data`.
    std::vector<std::size_t> offsets;
    std::size_t size = 0;
};

/// Immutable collection of utterance features with uniform shape.
class FeatureDataset {
   public:
    /// Validates every invariant: unique ids, uniform shapes, finite values,
    /// at least two utterances per label, token-safe ids and labels.
    static FeatureDataset create(FeatureMode mode, std::size_t num_layers, std::size_t dim,
                                 std::vector<UtteranceFeatures> utterances);

    FeatureMode mode() const noexcept { return mode_; }
    /// L in pooled mode, 1 in frames mode.
    std::size_t num_layers() const noexcept { return num_layers_; }
    /// d (pooled) or d_f (frames).
    std::size_t dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return utterances_.size(); }
    const std::vector<UtteranceFeatures>& utterances() const noexcept { return utterances_; }
    const UtteranceFeatures& at(std::size_t i) const { return utterances_.at(i); }
    /// Sorted label inventory, the silence label included when present.
    const std::vector<std::string>& labels() const noexcept { return labels_; }

    std::optional<std::size_t> find(std::string_view id) const;
    std::size_t index_of(std::string_view id) const;
    /// Row indices for `label`, in dataset order.
    std::vector<std::size_t> rows_with_label(std::string_view label) const;

    FeatureBatch batch(std::span<const std::size_t> rows) const;

    bool operator==(const FeatureDataset& other) const;

   private:
    FeatureMode mode_ = FeatureMode::Pooled;
    std::size_t num_layers_ = 0;
    std::size_t dim_ = 0;
    std::vector<UtteranceFeatures> utterances_;
    std::vector<std::string> labels_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

FeatureDataset load_dataset(const std::string& path);
void save_dataset(const FeatureDataset& dataset, const std::string& path);
std::string serialize_dataset(const FeatureDataset& dataset);
FeatureDataset parse_dataset(const std::vector<std::string>& lines);

/// Class-conditional Gaussian stand-in for encoder features.
struct SynthConfig {
    std::size_t num_keywords = 35;
    std::size_t num_layers = 3;
    std::size_t dim = 8;
    std::size_t utterances_per_keyword = 20;
    double sigma_within = 0.1;
    double sigma_between = 1.0;
    /// Number of background-noise sources; all are labelled as silence.
    std::size_t noise_classes = 4;
    std::size_t utterances_per_noise = 20;
    FeatureMode mode = FeatureMode::Pooled;
    /// Frames mode only: frames per utterance.
    std::size_t frames_per_utterance = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Keyword labels are kw00, kw01, ...; noise utterances carry kSilenceLabel.
FeatureDataset generate_synthetic(const SynthConfig& config);

/// Mean over the time axis of a [T, d] row-major block.
std::vector<double> time_mean_pool(std::span<const double> frames, std::size_t dim);
Tensor time_mean_pool(const Tensor& frames);

struct LayerWeights {
    Tensor logits;

    explicit LayerWeights(std::size_t layers) : logits({layers}, 0.0) {}
    explicit LayerWeights(Tensor l) : logits(std::move(l)) {}
    /// softmax(logits)
    Tensor normalized() const;
};

/// sum_l softmax(logits)_l * layer_l for a single utterance [L, d].
Tensor weighted_layer_sum(const Tensor& pooled_layers, const LayerWeights& weights);

/// Parameter ids of the front end.
inline constexpr const char* kLayerLogitsId = "lw.logits";
inline constexpr const char* kAdapterWeightId = "enc.adapter.w";
inline constexpr const char* kAdapterBiasId = "enc.adapter.b";

/// Front end mapping a FeatureBatch to one representation per utterance.
///
/// Pooled mode: trainable layer-weighted sum (layer-weights partition),
/// optionally followed by an identity-initialised affine adapter (encoder
/// partition) that stands in for fine-tuning the encoder. Frames mode: a
/// per-frame perceptron (encoder partition) followed by time-mean pooling.
struct FrontEndSpec {
    FeatureMode mode = FeatureMode::Pooled;
    std::size_t num_layers = 1;
    std::size_t input_dim = 1;
    bool adapter = false;
    /// Frames mode: output widths of the per-frame layers, last one is the
    /// representation width.
    std::vector<std::size_t> frame_widths;

    std::size_t output_dim() const;
};

void init_front_end(ParamSet& params, const FrontEndSpec& spec, Rng& rng);
Var build_front_end(Graph& g, const FrontEndSpec& spec, const FeatureBatch& batch);

/// Pooled representation of one utterance's frames under the scratch encoder.
Tensor scratch_encoder_forward(const Tensor& frames, const ParamSet& params, const FrontEndSpec& spec);

}  // namespace fskws
