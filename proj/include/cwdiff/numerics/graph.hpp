#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cwdiff/numerics/params.hpp"
#include "cwdiff/numerics/tensor.hpp"

namespace cwdiff {

using NodeId = std::size_t;

enum class OpKind {
    input,
    param,
    linear,       // x[N,in], w[out,in], b[out] -> [N,out]
    conv3x3,      // x[B,C,H,W], w[Co,C*9], b[Co] -> [B,Co,H,W]; stride 1, zero padding
    downsample2,  // nearest: keeps even rows and columns
    upsample2,    // nearest: each pixel repeated 2x2
    silu,
    tanh,
    expm1,
    group_norm,   // x[B,C,...], gamma[C], beta[C]
    batch_norm,   // x[N,C], gamma[C], beta[C]; running stats are buffers
    add,
    mul,
    film,         // x[B,C,...] * (1 + scale[B,C]) + shift[B,C]
    concat,       // along dim 1
    global_avg_pool,  // [B,C,...] -> [B,C]
    mse,          // mean squared error, optionally weighted; scalar [1]
};

const char* to_string(OpKind kind) noexcept;

struct OpNode {
    OpKind kind = OpKind::input;
    std::vector<NodeId> inputs;
    std::string label;  // input or parameter name
    int groups = 0;
    double eps = 1e-5;
    double momentum = 0.1;
    std::string running_mean;
    std::string running_var;
};

/// Static computation graph. Nodes may only reference earlier nodes, so
/// insertion order is a topological order.
class OpGraph {
public:
    NodeId input(const std::string& name);
    NodeId param(const std::string& name);

    NodeId linear(NodeId x, NodeId w, NodeId b);
    NodeId conv3x3(NodeId x, NodeId w, NodeId b);
    NodeId downsample2(NodeId x);
    NodeId upsample2(NodeId x);
    NodeId silu(NodeId x);
    NodeId tanh(NodeId x);
    NodeId expm1(NodeId x);
    NodeId group_norm(NodeId x, NodeId gamma, NodeId beta, int groups, double eps = 1e-5);
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, const std::string& running_mean,
                      const std::string& running_var, double momentum = 0.1, double eps = 1e-5);
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId film(NodeId x, NodeId scale, NodeId shift);
    NodeId concat(const std::vector<NodeId>& parts);
    NodeId global_avg_pool(NodeId x);
    NodeId mse(NodeId pred, NodeId target);
    NodeId mse(NodeId pred, NodeId target, NodeId weights);

    void mark_output(NodeId id);

    const std::vector<OpNode>& nodes() const noexcept { return nodes_; }
    const OpNode& node(NodeId id) const { return nodes_.at(id); }
    const std::vector<NodeId>& outputs() const noexcept { return outputs_; }
    const std::vector<NodeId>& input_nodes() const noexcept { return inputs_; }
    std::size_t input_count() const noexcept { return inputs_.size(); }
    /// Position of a named input in the argument list of evaluate().
    std::size_t input_index(const std::string& name) const;

private:
    NodeId push(OpNode node);

    std::vector<OpNode> nodes_;
    std::vector<NodeId> inputs_;
    std::vector<NodeId> outputs_;
};

enum class Mode { eval, train };

/// Node values and per-op caches from one forward pass. Parameter values
/// are referenced, not copied: the ParamStore must outlive the state.
template <typename T>
struct ForwardState {
    Mode mode = Mode::eval;
    std::vector<Tensor<T>> values;
    std::vector<const Tensor<T>*> refs;
    std::vector<std::vector<Tensor<T>>> aux;

    const Tensor<T>& value(NodeId id) const { return refs[id] ? *refs[id] : values[id]; }
};

template <typename T>
struct Gradients {
    std::vector<Tensor<T>> params;  // aligned with ParamStore indices
    std::vector<Tensor<T>> inputs;  // aligned with graph inputs
};

template <typename T>
ForwardState<T> evaluate(const OpGraph& graph, std::vector<Tensor<T>> inputs, const ParamStore<T>& params,
                         Mode mode = Mode::eval);

template <typename T>
std::vector<Tensor<T>> outputs(const OpGraph& graph, const ForwardState<T>& state);

/// Reverse pass. `seeds` holds one tensor per graph output (dL/d output).
template <typename T>
Gradients<T> backprop(const OpGraph& graph, const ForwardState<T>& state, const ParamStore<T>& params,
                      const std::vector<Tensor<T>>& seeds);

/// Folds batch statistics of a train-mode pass into the running buffers.
template <typename T>
void update_running_stats(const OpGraph& graph, const ForwardState<T>& state, ParamStore<T>& params);

}  // namespace cwdiff
