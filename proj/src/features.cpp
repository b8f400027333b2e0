#include "fskws/features.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fskws/error.hpp"
#include "fskws/layers.hpp"
#include "text_io.hpp"

namespace fskws {

namespace {

constexpr const char* kFramePrefix = "enc.frame";

bool token_safe(std::string_view s) {
    if (s.empty()) return false;
    for (char c : s)
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == ':' || c == '|') return false;
    return true;
}

}  // namespace

const char* to_string(FeatureMode m) noexcept { return m == FeatureMode::Pooled ? "pooled" : "frames"; }

FeatureMode feature_mode_from_string(std::string_view s) {
    if (s == "pooled") return FeatureMode::Pooled;
    if (s == "frames") return FeatureMode::Frames;
    throw FormatError("unknown feature mode '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// dataset

FeatureDataset FeatureDataset::create(FeatureMode mode, std::size_t num_layers, std::size_t dim,
                                      std::vector<UtteranceFeatures> utterances) {
    if (dim == 0) throw FormatError("feature dimension must be positive");
    if (mode == FeatureMode::Pooled && num_layers == 0) throw FormatError("layer count must be positive");
    if (mode == FeatureMode::Frames) num_layers = 1;

    FeatureDataset ds;
    ds.mode_ = mode;
    ds.num_layers_ = num_layers;
    ds.dim_ = dim;
    std::map<std::string, std::size_t> label_counts;
    for (std::size_t i = 0; i < utterances.size(); ++i) {
        const auto& u = utterances[i];
        if (!token_safe(u.id)) throw FormatError("utterance id '" + u.id + "' is empty or has reserved characters");
        if (!token_safe(u.label)) throw FormatError("label '" + u.label + "' is empty or has reserved characters");
        if (mode == FeatureMode::Pooled) {
            if (!u.pooled_layers || u.frames)
                throw FormatError("utterance '" + u.id + "' must carry pooled layers only");
            if (u.pooled_layers->shape() != Shape{num_layers, dim})
                throw FormatError("utterance '" + u.id + "' has shape " + shape_str(u.pooled_layers->shape()) +
                                  ", expected " + shape_str({num_layers, dim}));
            if (!u.pooled_layers->all_finite()) throw FormatError("utterance '" + u.id + "' has non-finite values");
        } else {
            if (!u.frames || u.pooled_layers) throw FormatError("utterance '" + u.id + "' must carry frames only");
            if (u.frames->rank() != 2 || u.frames->dim(1) != dim)
                throw FormatError("utterance '" + u.id + "' has frame shape " + shape_str(u.frames->shape()));
            if (!u.frames->all_finite()) throw FormatError("utterance '" + u.id + "' has non-finite values");
        }
        if (!ds.index_.emplace(u.id, i).second) throw FormatError("duplicate utterance id '" + u.id + "'");
        ++label_counts[u.label];
    }
    for (const auto& [label, count] : label_counts) {
        if (count < 2)
            throw FormatError("label '" + label + "' has " + std::to_string(count) + " utterance(s); at least 2 needed");
        ds.labels_.push_back(label);
    }
    ds.utterances_ = std::move(utterances);
    return ds;
}

std::optional<std::size_t> FeatureDataset::find(std::string_view id) const {
    auto it = index_.find(id);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t FeatureDataset::index_of(std::string_view id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw InvalidArgument("unknown utterance id '" + std::string(id) + "'");
    return it->second;
}

std::vector<std::size_t> FeatureDataset::rows_with_label(std::string_view label) const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < utterances_.size(); ++i)
        if (utterances_[i].label == label) rows.push_back(i);
    return rows;
}

FeatureBatch FeatureDataset::batch(std::span<const std::size_t> rows) const {
    if (rows.empty()) throw InvalidArgument("empty batch");
    FeatureBatch b;
    b.mode = mode_;
    b.size = rows.size();
    if (mode_ == FeatureMode::Pooled) {
        const std::size_t block = num_layers_ * dim_;
        std::vector<double> v(rows.size() * block);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const Tensor& t = *at(rows[i]).pooled_layers;
            std::copy_n(t.data(), block, v.data() + i * block);
        }
        b.data = Tensor({rows.size(), num_layers_, dim_}, std::move(v));
    } else {
        b.offsets.push_back(0);
        for (auto r : rows) b.offsets.push_back(b.offsets.back() + at(r).frames->dim(0));
        std::vector<double> v(b.offsets.back() * dim_);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const Tensor& t = *at(rows[i]).frames;
            std::copy_n(t.data(), t.size(), v.data() + b.offsets[i] * dim_);
        }
        b.data = Tensor({b.offsets.back(), dim_}, std::move(v));
    }
    return b;
}

bool FeatureDataset::operator==(const FeatureDataset& other) const {
    if (mode_ != other.mode_ || num_layers_ != other.num_layers_ || dim_ != other.dim_ ||
        utterances_.size() != other.utterances_.size())
        return false;
    for (std::size_t i = 0; i < utterances_.size(); ++i) {
        const auto& a = utterances_[i];
        const auto& b = other.utterances_[i];
        if (a.id != b.id || a.label != b.label) return false;
        const Tensor& ta = a.pooled_layers ? *a.pooled_layers : *a.frames;
        const Tensor& tb = b.pooled_layers ? *b.pooled_layers : *b.frames;
        if (!ta.identical(tb)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// file format

std::string serialize_dataset(const FeatureDataset& ds) {
    std::string out;
    if (ds.mode() == FeatureMode::Pooled)
        out = "kwsfeat pooled v1 L=" + std::to_string(ds.num_layers()) + " d=" + std::to_string(ds.dim()) + "\n";
    else
        out = "kwsfeat frames v1 d=" + std::to_string(ds.dim()) + "\n";
    for (const auto& u : ds.utterances()) {
        out += u.id;
        out += '\t';
        out += u.label;
        out += '\t';
        if (ds.mode() == FeatureMode::Pooled) {
            text::append_doubles(out, u.pooled_layers->values());
        } else {
            out += std::to_string(u.frames->dim(0));
            out += '\t';
            text::append_doubles(out, u.frames->values());
        }
        out += '\n';
    }
    return out;
}

FeatureDataset parse_dataset(const std::vector<std::string>& lines) {
    if (lines.empty()) throw FormatError("missing header", 1);
    const auto head = text::tokens(lines[0]);
    FeatureMode mode;
    std::size_t layers = 1, dim = 0;
    if (head.size() == 5 && head[0] == "kwsfeat" && head[1] == "pooled" && head[2] == "v1") {
        mode = FeatureMode::Pooled;
        layers = text::parse_kv<std::size_t>(head[3], "L", 1);
        dim = text::parse_kv<std::size_t>(head[4], "d", 1);
        if (layers == 0 || dim == 0) throw FormatError("L and d must be positive", 1);
    } else if (head.size() == 4 && head[0] == "kwsfeat" && head[1] == "frames" && head[2] == "v1") {
        mode = FeatureMode::Frames;
        dim = text::parse_kv<std::size_t>(head[3], "d", 1);
        if (dim == 0) throw FormatError("d must be positive", 1);
    } else {
        throw FormatError("expected 'kwsfeat pooled v1 L=<int> d=<int>' or 'kwsfeat frames v1 d=<int>'", 1);
    }

    std::vector<UtteranceFeatures> utts;
    std::set<std::string, std::less<>> seen;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const std::size_t ln = i + 1;
        const auto fields = text::split(lines[i], '\t');
        UtteranceFeatures u;
        if (mode == FeatureMode::Pooled) {
            if (fields.size() != 3) throw FormatError("expected <id>\\t<label>\\t<values>", ln);
            auto vals = text::parse_doubles(fields[2], ln);
            if (vals.size() != layers * dim)
                throw FormatError("record carries " + std::to_string(vals.size()) + " values, header declares L=" +
                                      std::to_string(layers) + " d=" + std::to_string(dim) + " (" +
                                      std::to_string(layers * dim) + " values)",
                                  ln);
            u.pooled_layers = Tensor({layers, dim}, std::move(vals));
        } else {
            if (fields.size() != 4) throw FormatError("expected <id>\\t<label>\\t<T>\\t<values>", ln);
            const auto frames = text::parse_int<std::size_t>(fields[2], ln);
            if (frames == 0) throw FormatError("frame count must be positive", ln);
            auto vals = text::parse_doubles(fields[3], ln);
            if (vals.size() != frames * dim)
                throw FormatError("record carries " + std::to_string(vals.size()) + " values, expected T*d = " +
                                      std::to_string(frames * dim),
                                  ln);
            u.frames = Tensor({frames, dim}, std::move(vals));
        }
        u.id = std::string(fields[0]);
        u.label = std::string(fields[1]);
        if (!seen.insert(u.id).second) throw FormatError("duplicate utterance id '" + u.id + "'", ln);
        const Tensor& t = u.pooled_layers ? *u.pooled_layers : *u.frames;
        if (!t.all_finite()) throw FormatError("non-finite value", ln);
        utts.push_back(std::move(u));
    }
    return FeatureDataset::create(mode, layers, dim, std::move(utts));
}

FeatureDataset load_dataset(const std::string& path) { return parse_dataset(text::read_lines(path)); }

void save_dataset(const FeatureDataset& dataset, const std::string& path) {
    text::write_file(path, serialize_dataset(dataset));
}

// ---------------------------------------------------------------------------
// synthetic data

void SynthConfig::validate() const {
    if (!(sigma_within > 0.0) || !std::isfinite(sigma_within)) throw ConfigError("sigma_within must be positive");
    if (!(sigma_between > 0.0) || !std::isfinite(sigma_between)) throw ConfigError("sigma_between must be positive");
    if (num_keywords == 0) throw ConfigError("num_keywords must be positive");
    if (num_layers == 0 || dim == 0) throw ConfigError("num_layers and dim must be positive");
    if (utterances_per_keyword < 2) throw ConfigError("utterances_per_keyword must be at least 2");
    if (noise_classes > 0 && noise_classes * utterances_per_noise < 2)
        throw ConfigError("the silence pool needs at least 2 utterances");
    if (mode == FeatureMode::Frames && frames_per_utterance == 0)
        throw ConfigError("frames_per_utterance must be positive");
}

FeatureDataset generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const bool pooled = cfg.mode == FeatureMode::Pooled;
    const std::size_t layers = pooled ? cfg.num_layers : 1;
    const std::size_t mean_size = layers * cfg.dim;
    std::vector<UtteranceFeatures> utts;

    auto emit_class = [&](const std::string& tag, const std::string& label, std::size_t count) {
        std::vector<double> mean(mean_size);
        for (double& m : mean) m = cfg.sigma_between * rng.normal();
        for (std::size_t u = 0; u < count; ++u) {
            UtteranceFeatures f;
            char buf[32];
            std::snprintf(buf, sizeof(buf), "_%04zu", u);
            f.id = tag + buf;
            f.label = label;
            if (pooled) {
                std::vector<double> v(mean_size);
                for (std::size_t j = 0; j < mean_size; ++j) v[j] = mean[j] + cfg.sigma_within * rng.normal();
                f.pooled_layers = Tensor({layers, cfg.dim}, std::move(v));
            } else {
                const std::size_t t = cfg.frames_per_utterance;
                std::vector<double> v(t * cfg.dim);
                for (std::size_t j = 0; j < v.size(); ++j) v[j] = mean[j % cfg.dim] + cfg.sigma_within * rng.normal();
                f.frames = Tensor({t, cfg.dim}, std::move(v));
            }
            utts.push_back(std::move(f));
        }
    };

    for (std::size_t k = 0; k < cfg.num_keywords; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "kw%02zu", k);
        emit_class(buf, buf, cfg.utterances_per_keyword);
    }
    for (std::size_t k = 0; k < cfg.noise_classes; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "noise%02zu", k);
        emit_class(buf, std::string(kSilenceLabel), cfg.utterances_per_noise);
    }
    return FeatureDataset::create(cfg.mode, layers, cfg.dim, std::move(utts));
}

// ---------------------------------------------------------------------------
// pooling and layer weighting

std::vector<double> time_mean_pool(std::span<const double> frames, std::size_t dim) {
    if (dim == 0) throw InvalidArgument("time_mean_pool: zero feature dimension");
    if (frames.empty()) throw InvalidArgument("time_mean_pool: empty input (T = 0)");
    if (frames.size() % dim != 0) throw ShapeError("time_mean_pool: buffer is not a whole number of frames");
    const std::size_t t = frames.size() / dim;
    std::vector<double> out(dim, 0.0);
    for (std::size_t r = 0; r < t; ++r)
        for (std::size_t j = 0; j < dim; ++j) out[j] += frames[r * dim + j];
    for (double& v : out) v /= static_cast<double>(t);
    return out;
}

Tensor time_mean_pool(const Tensor& frames) {
    if (frames.rank() != 2) throw ShapeError("time_mean_pool expects [T, d], got " + shape_str(frames.shape()));
    return Tensor({frames.dim(1)}, time_mean_pool(frames.values(), frames.dim(1)));
}

Tensor LayerWeights::normalized() const {
    Graph g;
    g.softmax(g.constant(logits));
    return g.forward({});
}

Tensor weighted_layer_sum(const Tensor& pooled_layers, const LayerWeights& weights) {
    if (pooled_layers.rank() != 2) throw ShapeError("expected [L, d] layers, got " + shape_str(pooled_layers.shape()));
    if (weights.logits.rank() != 1 || weights.logits.dim(0) != pooled_layers.dim(0))
        throw ShapeError("layer weight count " + shape_str(weights.logits.shape()) + " does not match L=" +
                         std::to_string(pooled_layers.dim(0)));
    Graph g;
    Var x = g.constant(pooled_layers.reshaped({1, pooled_layers.dim(0), pooled_layers.dim(1)}));
    Var w = g.softmax(g.constant(weights.logits));
    g.layer_sum(x, w);
    return g.forward({}).reshaped({pooled_layers.dim(1)});
}

// ---------------------------------------------------------------------------
// front end

std::size_t FrontEndSpec::output_dim() const {
    if (mode == FeatureMode::Pooled) return input_dim;
    return frame_widths.empty() ? input_dim : frame_widths.back();
}

void init_front_end(ParamSet& params, const FrontEndSpec& spec, Rng& rng) {
    if (spec.mode == FeatureMode::Pooled) {
        params.add(kLayerLogitsId, Tensor({spec.num_layers}, 0.0), Partition::LayerWeights);
        if (spec.adapter) {
            Tensor w({spec.input_dim, spec.input_dim}, 0.0);
            for (std::size_t i = 0; i < spec.input_dim; ++i) w.at(i, i) = 1.0;
            params.add(kAdapterWeightId, std::move(w), Partition::Encoder);
            params.add(kAdapterBiasId, Tensor({spec.input_dim}, 0.0), Partition::Encoder);
        }
        return;
    }
    if (spec.frame_widths.empty()) throw ConfigError("frames front end needs at least one layer");
    std::vector<std::size_t> widths{spec.input_dim};
    widths.insert(widths.end(), spec.frame_widths.begin(), spec.frame_widths.end());
    init_mlp(params, kFramePrefix, widths, Partition::Encoder, rng);
}

Var build_front_end(Graph& g, const FrontEndSpec& spec, const FeatureBatch& batch) {
    if (batch.mode != spec.mode) throw ConfigError("feature batch mode does not match the front end");
    if (spec.mode == FeatureMode::Pooled) {
        Var x = g.constant(batch.data);
        Var w = g.softmax(g.param(kLayerLogitsId));
        Var h = g.layer_sum(x, w);
        if (spec.adapter) h = g.affine(h, g.param(kAdapterWeightId), g.param(kAdapterBiasId));
        return h;
    }
    Var frames = g.constant(batch.data);
    Var h = build_mlp(g, kFramePrefix, spec.frame_widths.size(), frames);
    return g.segment_mean(h, batch.offsets);
}

Tensor scratch_encoder_forward(const Tensor& frames, const ParamSet& params, const FrontEndSpec& spec) {
    if (spec.mode != FeatureMode::Frames) throw ConfigError("scratch encoder needs a frames front end");
    if (frames.rank() != 2) throw ShapeError("expected [T, d_f] frames, got " + shape_str(frames.shape()));
    FeatureBatch b;
    b.mode = FeatureMode::Frames;
    b.data = frames;
    b.offsets = {0, frames.dim(0)};
    b.size = 1;
    Graph g;
    build_front_end(g, spec, b);
    return g.forward(params).reshaped({spec.output_dim()});
}

}  // namespace fskws
