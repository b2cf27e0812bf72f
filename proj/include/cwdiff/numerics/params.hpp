#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cwdiff/numerics/tensor.hpp"

namespace cwdiff {

/// Named parameter tensors. Buffers (e.g. running statistics) are stored
/// alongside trainable tensors but never receive gradients.
template <typename T>
class ParamStore {
public:
    std::size_t add(const std::string& name, Tensor<T> value, bool trainable = true) {
        require(!index_.contains(name), ErrorKind::invalid_argument, "duplicate parameter '" + name + "'");
        index_.emplace(name, values_.size());
        names_.push_back(name);
        values_.push_back(std::move(value));
        trainable_.push_back(trainable);
        return values_.size() - 1;
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    std::size_t index(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), ErrorKind::invalid_argument, "unknown parameter '" + name + "'");
        return it->second;
    }

    std::size_t size() const noexcept { return values_.size(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    bool trainable(std::size_t i) const { return trainable_.at(i); }

    Tensor<T>& operator[](std::size_t i) { return values_[i]; }
    const Tensor<T>& operator[](std::size_t i) const { return values_[i]; }
    Tensor<T>& at(const std::string& name) { return values_[index(name)]; }
    const Tensor<T>& at(const std::string& name) const { return values_[index(name)]; }

    /// Number of trainable scalars.
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            if (trainable_[i]) {
                n += values_[i].numel();
            }
        }
        return n;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (std::size_t i = 0; i < values_.size(); ++i) {
            out.add(names_[i], values_[i].template cast<U>(), trainable_[i]);
        }
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<Tensor<T>> values_;
    std::vector<bool> trainable_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// FNV-1a over the raw bytes of every tensor, in insertion order.
template <typename T>
std::uint64_t checksum(const ParamStore<T>& store) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    for (std::size_t i = 0; i < store.size(); ++i) {
        mix(store.name(i).data(), store.name(i).size());
        mix(store[i].data(), store[i].numel() * sizeof(T));
    }
    return h;
}

}  // namespace cwdiff
