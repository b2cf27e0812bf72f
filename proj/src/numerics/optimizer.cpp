#include "cwdiff/numerics/optimizer.hpp"

#include <cmath>

namespace cwdiff {

template <typename T>
OptimizerState<T> make_optimizer(const ParamStore<T>& params, const AdamConfig& config) {
    OptimizerState<T> st;
    st.config = config;
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params.trainable(i)) {
            st.m[i] = Tensor<T>(params[i].shape());
            st.v[i] = Tensor<T>(params[i].shape());
        }
    }
    return st;
}

template <typename T>
void adam_step(ParamStore<T>& params, const std::vector<Tensor<T>>& grads, OptimizerState<T>& state,
               double learning_rate) {
    require(grads.size() == params.size() && state.m.size() == params.size(), ErrorKind::shape,
            "optimizer state, gradients and parameters are misaligned");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params.trainable(i)) {
            continue;
        }
        require(grads[i].shape() == params[i].shape() && state.m[i].shape() == params[i].shape(), ErrorKind::shape,
                "gradient shape mismatch for parameter '" + params.name(i) + "'");
        require(grads[i].all_finite(), ErrorKind::numeric, "non-finite gradient for parameter '" + params.name(i) + "'");
    }
    const AdamConfig& c = state.config;
    const double lr = learning_rate > 0.0 ? learning_rate : c.learning_rate;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params.trainable(i)) {
            continue;
        }
        T* p = params[i].data();
        T* m = state.m[i].data();
        T* v = state.v[i].data();
        const T* g = grads[i].data();
        for (std::size_t k = 0; k < params[i].numel(); ++k) {
            m[k] = b1 * m[k] + (T(1) - b1) * g[k];
            v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            const double update = mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p[k];
            p[k] = static_cast<T>(p[k] - lr * update);
        }
    }
}

template OptimizerState<float> make_optimizer(const ParamStore<float>&, const AdamConfig&);
template OptimizerState<double> make_optimizer(const ParamStore<double>&, const AdamConfig&);
template void adam_step(ParamStore<float>&, const std::vector<Tensor<float>>&, OptimizerState<float>&, double);
template void adam_step(ParamStore<double>&, const std::vector<Tensor<double>>&, OptimizerState<double>&, double);

}  // namespace cwdiff
