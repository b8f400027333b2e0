#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "fskws/tensor.hpp"

namespace fskws {

/// Which side of the model a parameter belongs to.
enum class Partition : std::uint8_t { Encoder = 1, Classifier = 2, LayerWeights = 4 };

const char* to_string(Partition p) noexcept;
Partition partition_from_string(std::string_view s);

/// Set of partitions selected for an update.
class PartitionMask {
   public:
    constexpr PartitionMask() = default;
    constexpr PartitionMask(std::initializer_list<Partition> parts) {
        for (auto p : parts) bits_ |= static_cast<std::uint8_t>(p);
    }
    static constexpr PartitionMask all() {
        return {Partition::Encoder, Partition::Classifier, Partition::LayerWeights};
    }
    static constexpr PartitionMask none() { return {}; }

    constexpr bool contains(Partition p) const { return (bits_ & static_cast<std::uint8_t>(p)) != 0; }
    constexpr PartitionMask without(Partition p) const {
        PartitionMask m = *this;
        m.bits_ &= static_cast<std::uint8_t>(~static_cast<std::uint8_t>(p));
        return m;
    }
    constexpr PartitionMask with(Partition p) const {
        PartitionMask m = *this;
        m.bits_ |= static_cast<std::uint8_t>(p);
        return m;
    }
    constexpr PartitionMask operator&(PartitionMask o) const {
        PartitionMask m = *this;
        m.bits_ &= o.bits_;
        return m;
    }
    constexpr bool empty() const { return bits_ == 0; }
    constexpr bool operator==(const PartitionMask&) const = default;

   private:
    std::uint8_t bits_ = 0;
};

using Gradients = std::map<std::string, Tensor>;

/// Named, partition-tagged model parameters. Value semantics: copies are deep.
/// Iteration order is the lexicographic order of ids.
class ParamSet {
   public:
    struct Entry {
        Tensor value;
        Partition partition;
    };

    void add(const std::string& id, Tensor value, Partition partition);
    void remove(const std::string& id);

    bool contains(const std::string& id) const { return entries_.count(id) != 0; }
    const Tensor& value(const std::string& id) const;
    /// Mutable access to the values; the partition tag cannot be changed.
    Tensor& mutable_value(const std::string& id);
    Partition partition(const std::string& id) const;

    std::size_t size() const noexcept { return entries_.size(); }
    std::size_t scalar_count() const noexcept;
    std::vector<std::string> ids() const;
    const std::map<std::string, Entry>& entries() const noexcept { return entries_; }

    /// True when ids, tags, shapes and values all agree bit-for-bit.
    bool identical(const ParamSet& other) const noexcept;
    /// Same as identical() but restricted to parameters of the given partition.
    bool identical_in(const ParamSet& other, Partition p) const noexcept;

    Gradients zeros_like() const;

   private:
    std::map<std::string, Entry> entries_;
};

}  // namespace fskws
