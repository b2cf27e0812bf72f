#pragma once

#include <string>

#include "cwdiff/numerics/params.hpp"
#include "cwdiff/rng.hpp"

namespace cwdiff {

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
template <typename T>
void add_linear_params(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                       bool zero = false) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> w({out, in}), b({out});
    if (!zero) {
        for (auto& x : w.values()) x = static_cast<T>(u(rng));
        for (auto& x : b.values()) x = static_cast<T>(u(rng));
    }
    store.add(prefix + ".w", std::move(w));
    store.add(prefix + ".b", std::move(b));
}

/// 3x3 convolution weights laid out [out, in*9].
template <typename T>
void add_conv_params(ParamStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                     bool zero = false) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * 9));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor<T> w({out, in * 9}), b({out});
    if (!zero) {
        for (auto& x : w.values()) x = static_cast<T>(u(rng));
        for (auto& x : b.values()) x = static_cast<T>(u(rng));
    }
    store.add(prefix + ".w", std::move(w));
    store.add(prefix + ".b", std::move(b));
}

template <typename T>
void add_norm_params(ParamStore<T>& store, const std::string& prefix, std::size_t channels) {
    store.add(prefix + ".gamma", Tensor<T>::ones({channels}));
    store.add(prefix + ".beta", Tensor<T>::zeros({channels}));
}

template <typename T>
void add_batch_norm_params(ParamStore<T>& store, const std::string& prefix, std::size_t channels) {
    add_norm_params(store, prefix, channels);
    store.add(prefix + ".running_mean", Tensor<T>::zeros({channels}), false);
    store.add(prefix + ".running_var", Tensor<T>::ones({channels}), false);
}

}  // namespace cwdiff
