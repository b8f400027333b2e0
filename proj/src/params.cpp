#include "fskws/params.hpp"

#include "fskws/error.hpp"

namespace fskws {

const char* to_string(Partition p) noexcept {
    switch (p) {
        case Partition::Encoder:
            return "encoder";
        case Partition::Classifier:
            return "classifier";
        case Partition::LayerWeights:
            return "layer-weights";
    }
    return "?";
}

Partition partition_from_string(std::string_view s) {
    if (s == "encoder") return Partition::Encoder;
    if (s == "classifier") return Partition::Classifier;
    if (s == "layer-weights") return Partition::LayerWeights;
    throw FormatError("unknown partition '" + std::string(s) + "'");
}

void ParamSet::add(const std::string& id, Tensor value, Partition partition) {
    if (id.empty()) throw InvalidArgument("parameter id must be non-empty");
    auto [it, inserted] = entries_.emplace(id, Entry{std::move(value), partition});
    if (!inserted) throw InvalidArgument("duplicate parameter id '" + id + "'");
}

void ParamSet::remove(const std::string& id) {
    if (entries_.erase(id) == 0) throw InvalidArgument("no parameter '" + id + "'");
}

const Tensor& ParamSet::value(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw InvalidArgument("no parameter '" + id + "'");
    return it->second.value;
}

Tensor& ParamSet::mutable_value(const std::string& id) {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw InvalidArgument("no parameter '" + id + "'");
    return it->second.value;
}

Partition ParamSet::partition(const std::string& id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw InvalidArgument("no parameter '" + id + "'");
    return it->second.partition;
}

std::size_t ParamSet::scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& [id, e] : entries_) n += e.value.size();
    return n;
}

std::vector<std::string> ParamSet::ids() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
}

bool ParamSet::identical(const ParamSet& other) const noexcept {
    if (entries_.size() != other.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
        if (a->first != b->first || a->second.partition != b->second.partition) return false;
        if (!a->second.value.identical(b->second.value)) return false;
    }
    return true;
}

bool ParamSet::identical_in(const ParamSet& other, Partition p) const noexcept {
    std::size_t seen = 0;
    for (const auto& [id, e] : entries_) {
        if (e.partition != p) continue;
        ++seen;
        auto it = other.entries_.find(id);
        if (it == other.entries_.end() || it->second.partition != p) return false;
        if (!e.value.identical(it->second.value)) return false;
    }
    std::size_t other_seen = 0;
    for (const auto& [id, e] : other.entries_)
        if (e.partition == p) ++other_seen;
    return seen == other_seen;
}

Gradients ParamSet::zeros_like() const {
    Gradients g;
    for (const auto& [id, e] : entries_) g.emplace(id, Tensor(e.value.shape(), 0.0));
    return g;
}

}  // namespace fskws
