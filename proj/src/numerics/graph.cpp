#include "cwdiff/numerics/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cwdiff {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

[[noreturn]] void node_error(NodeId id, OpKind kind, const std::string& msg) {
    fail(ErrorKind::shape, "node " + std::to_string(id) + " (" + to_string(kind) + "): " + msg);
}

void check(bool cond, NodeId id, OpKind kind, const std::string& msg) {
    if (!cond) {
        node_error(id, kind, msg);
    }
}

// Product of dims from index 2 on; 1 for rank-2 tensors.
std::size_t spatial_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t i = 2; i < s.size(); ++i) {
        n *= s[i];
    }
    return n;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    T* d = dst.data();
    const T* s = src.data();
    for (std::size_t i = 0; i < dst.numel(); ++i) {
        d[i] += s[i];
    }
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

// ---- convolution ---------------------------------------------------------

// Rows are shifted copies of the input; kx selects a one-pixel shift with
// zero fill at the border.
template <typename T>
void im2col(const Tensor<T>& x, Tensor<T>& cols) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t HW = H * W, N = B * HW;
    cols = Tensor<T>({C * 9, N});
    T* out = cols.data();
    const T* in = x.data();
    for (std::size_t c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = out + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * N;
                for (std::size_t b = 0; b < B; ++b) {
                    const T* plane = in + (b * C + c) * HW;
                    T* dst = row + b * HW;
                    for (std::size_t y = 0; y < H; ++y) {
                        const long sy = static_cast<long>(y) + ky - 1;
                        T* d = dst + y * W;
                        if (sy < 0 || sy >= static_cast<long>(H)) {
                            continue;  // cols starts zeroed
                        }
                        const T* src = plane + static_cast<std::size_t>(sy) * W;
                        if (kx == 0) {
                            std::copy_n(src, W - 1, d + 1);
                        } else if (kx == 1) {
                            std::copy_n(src, W, d);
                        } else {
                            std::copy_n(src + 1, W - 1, d);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, Tensor<T>& dx) {
    const std::size_t B = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    const std::size_t HW = H * W, N = B * HW;
    T* out = dx.data();
    for (std::size_t c = 0; c < C; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = cols + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * N;
                for (std::size_t b = 0; b < B; ++b) {
                    T* plane = out + (b * C + c) * HW;
                    const T* src = row + b * HW;
                    for (std::size_t y = 0; y < H; ++y) {
                        const long sy = static_cast<long>(y) + ky - 1;
                        if (sy < 0 || sy >= static_cast<long>(H)) {
                            continue;
                        }
                        T* d = plane + static_cast<std::size_t>(sy) * W;
                        const T* s = src + y * W;
                        if (kx == 0) {
                            for (std::size_t i = 0; i + 1 < W; ++i) d[i] += s[i + 1];
                        } else if (kx == 1) {
                            for (std::size_t i = 0; i < W; ++i) d[i] += s[i];
                        } else {
                            for (std::size_t i = 1; i < W; ++i) d[i] += s[i - 1];
                        }
                    }
                }
            }
        }
    }
}

// [B, C, HW] <-> [C, B*HW]
template <typename T>
void batch_to_channel_major(const T* in, T* out, std::size_t B, std::size_t C, std::size_t HW) {
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            std::copy_n(in + (b * C + c) * HW, HW, out + c * B * HW + b * HW);
        }
    }
}

template <typename T>
void channel_to_batch_major(const T* in, T* out, std::size_t B, std::size_t C, std::size_t HW) {
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            std::copy_n(in + c * B * HW + b * HW, HW, out + (b * C + c) * HW);
        }
    }
}

// ---- normalization ---------------------------------------------------------

// Backward of a normalization over m elements spaced `stride` apart. Group
// norm blocks are contiguous; batch norm channels are strided by C.
template <typename T>
void norm_backward_block(const T* gy_hat, const T* xhat, T inv_std, std::size_t m, T* dx,
                         std::size_t stride) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        sum_g += gy_hat[i * stride];
        sum_gx += static_cast<double>(gy_hat[i * stride]) * xhat[i * stride];
    }
    const double mean_g = sum_g / static_cast<double>(m);
    const double mean_gx = sum_gx / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t k = i * stride;
        dx[k] += static_cast<T>(inv_std * (gy_hat[k] - mean_g - xhat[k] * mean_gx));
    }
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::invalid_argument: return "invalid-argument";
        case ErrorKind::shape: return "shape";
        case ErrorKind::schema: return "schema";
        case ErrorKind::io: return "io";
        case ErrorKind::checksum: return "checksum";
        case ErrorKind::numeric: return "numeric";
    }
    return "unknown";
}

const char* to_string(OpKind kind) noexcept {
    switch (kind) {
        case OpKind::input: return "input";
        case OpKind::param: return "param";
        case OpKind::linear: return "linear";
        case OpKind::conv3x3: return "conv3x3";
        case OpKind::downsample2: return "downsample2";
        case OpKind::upsample2: return "upsample2";
        case OpKind::silu: return "silu";
        case OpKind::tanh: return "tanh";
        case OpKind::expm1: return "expm1";
        case OpKind::group_norm: return "group_norm";
        case OpKind::batch_norm: return "batch_norm";
        case OpKind::add: return "add";
        case OpKind::mul: return "mul";
        case OpKind::film: return "film";
        case OpKind::concat: return "concat";
        case OpKind::global_avg_pool: return "global_avg_pool";
        case OpKind::mse: return "mse";
    }
    return "unknown";
}

// ---- graph construction ------------------------------------------------------

NodeId OpGraph::push(OpNode node) {
    for (NodeId in : node.inputs) {
        require(in < nodes_.size(), ErrorKind::invalid_argument,
                std::string("graph input references a later node in ") + to_string(node.kind));
    }
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
}

NodeId OpGraph::input(const std::string& name) {
    for (NodeId id : inputs_) {
        require(nodes_[id].label != name, ErrorKind::invalid_argument, "duplicate graph input '" + name + "'");
    }
    const NodeId id = push({.kind = OpKind::input, .label = name});
    inputs_.push_back(id);
    return id;
}

NodeId OpGraph::param(const std::string& name) { return push({.kind = OpKind::param, .label = name}); }

NodeId OpGraph::linear(NodeId x, NodeId w, NodeId b) { return push({.kind = OpKind::linear, .inputs = {x, w, b}}); }
NodeId OpGraph::conv3x3(NodeId x, NodeId w, NodeId b) {
    return push({.kind = OpKind::conv3x3, .inputs = {x, w, b}});
}
NodeId OpGraph::downsample2(NodeId x) { return push({.kind = OpKind::downsample2, .inputs = {x}}); }
NodeId OpGraph::upsample2(NodeId x) { return push({.kind = OpKind::upsample2, .inputs = {x}}); }
NodeId OpGraph::silu(NodeId x) { return push({.kind = OpKind::silu, .inputs = {x}}); }
NodeId OpGraph::tanh(NodeId x) { return push({.kind = OpKind::tanh, .inputs = {x}}); }
NodeId OpGraph::expm1(NodeId x) { return push({.kind = OpKind::expm1, .inputs = {x}}); }

NodeId OpGraph::group_norm(NodeId x, NodeId gamma, NodeId beta, int groups, double eps) {
    require(groups >= 1, ErrorKind::invalid_argument, "group_norm needs groups >= 1");
    return push({.kind = OpKind::group_norm, .inputs = {x, gamma, beta}, .groups = groups, .eps = eps});
}

NodeId OpGraph::batch_norm(NodeId x, NodeId gamma, NodeId beta, const std::string& running_mean,
                           const std::string& running_var, double momentum, double eps) {
    return push({.kind = OpKind::batch_norm,
                 .inputs = {x, gamma, beta},
                 .eps = eps,
                 .momentum = momentum,
                 .running_mean = running_mean,
                 .running_var = running_var});
}

NodeId OpGraph::add(NodeId a, NodeId b) { return push({.kind = OpKind::add, .inputs = {a, b}}); }
NodeId OpGraph::mul(NodeId a, NodeId b) { return push({.kind = OpKind::mul, .inputs = {a, b}}); }
NodeId OpGraph::film(NodeId x, NodeId scale, NodeId shift) {
    return push({.kind = OpKind::film, .inputs = {x, scale, shift}});
}
NodeId OpGraph::concat(const std::vector<NodeId>& parts) {
    require(!parts.empty(), ErrorKind::invalid_argument, "concat of nothing");
    return push({.kind = OpKind::concat, .inputs = parts});
}
NodeId OpGraph::global_avg_pool(NodeId x) { return push({.kind = OpKind::global_avg_pool, .inputs = {x}}); }
NodeId OpGraph::mse(NodeId pred, NodeId target) { return push({.kind = OpKind::mse, .inputs = {pred, target}}); }
NodeId OpGraph::mse(NodeId pred, NodeId target, NodeId weights) {
    return push({.kind = OpKind::mse, .inputs = {pred, target, weights}});
}

void OpGraph::mark_output(NodeId id) {
    require(id < nodes_.size(), ErrorKind::invalid_argument, "output references unknown node");
    outputs_.push_back(id);
}

std::size_t OpGraph::input_index(const std::string& name) const {
    for (std::size_t i = 0; i < inputs_.size(); ++i) {
        if (nodes_[inputs_[i]].label == name) {
            return i;
        }
    }
    fail(ErrorKind::invalid_argument, "graph has no input '" + name + "'");
}

// ---- forward -----------------------------------------------------------------

template <typename T>
ForwardState<T> evaluate(const OpGraph& graph, std::vector<Tensor<T>> inputs, const ParamStore<T>& params,
                         Mode mode) {
    require(inputs.size() == graph.input_count(), ErrorKind::shape,
            "graph expects " + std::to_string(graph.input_count()) + " inputs, got " +
                std::to_string(inputs.size()));
    const auto& nodes = graph.nodes();
    ForwardState<T> st;
    st.mode = mode;
    st.values.resize(nodes.size());
    st.refs.assign(nodes.size(), nullptr);
    st.aux.resize(nodes.size());

    std::size_t next_input = 0;
    for (NodeId id = 0; id < nodes.size(); ++id) {
        const OpNode& n = nodes[id];
        auto in = [&](std::size_t k) -> const Tensor<T>& { return st.value(n.inputs[k]); };
        Tensor<T>& out = st.values[id];
        switch (n.kind) {
            case OpKind::input: {
                out = std::move(inputs[next_input++]);
                break;
            }
            case OpKind::param: {
                st.refs[id] = &params.at(n.label);
                break;
            }
            case OpKind::linear: {
                const auto &x = in(0), &w = in(1), &b = in(2);
                check(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, id, n.kind, "expects x[N,in] w[out,in] b[out]");
                check(x.dim(1) == w.dim(1) && b.dim(0) == w.dim(0), id, n.kind,
                      "x " + shape_string(x.shape()) + " incompatible with w " + shape_string(w.shape()));
                const std::size_t N = x.dim(0), I = x.dim(1), O = w.dim(0);
                out = Tensor<T>({N, O});
                MatMap<T> y(out.data(), N, O);
                y.noalias() = ConstMatMap<T>(x.data(), N, I) * ConstMatMap<T>(w.data(), O, I).transpose();
                y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.data(), O);
                break;
            }
            case OpKind::conv3x3: {
                const auto &x = in(0), &w = in(1), &b = in(2);
                check(x.rank() == 4, id, n.kind, "expects x[B,C,H,W], got " + shape_string(x.shape()));
                const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
                check(w.rank() == 2 && w.dim(1) == C * 9 && b.rank() == 1 && b.dim(0) == w.dim(0), id, n.kind,
                      "weight " + shape_string(w.shape()) + " incompatible with input " + shape_string(x.shape()));
                const std::size_t Co = w.dim(0), HW = H * W, N = B * HW;
                st.aux[id].resize(1);
                Tensor<T>& cols = st.aux[id][0];
                im2col(x, cols);
                AlignedVector<T> ymat(Co * N);
                MatMap<T> y(ymat.data(), Co, N);
                y.noalias() = ConstMatMap<T>(w.data(), Co, C * 9) * ConstMatMap<T>(cols.data(), C * 9, N);
                y.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(b.data(), Co);
                out = Tensor<T>({B, Co, H, W});
                channel_to_batch_major(ymat.data(), out.data(), B, Co, HW);
                break;
            }
            case OpKind::downsample2: {
                const auto& x = in(0);
                check(x.rank() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, id, n.kind,
                      "expects [B,C,H,W] with even H,W, got " + shape_string(x.shape()));
                const std::size_t P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
                out = Tensor<T>({x.dim(0), x.dim(1), H / 2, W / 2});
                for (std::size_t p = 0; p < P; ++p) {
                    for (std::size_t y = 0; y < H / 2; ++y) {
                        for (std::size_t xx = 0; xx < W / 2; ++xx) {
                            out[(p * (H / 2) + y) * (W / 2) + xx] = x[(p * H + 2 * y) * W + 2 * xx];
                        }
                    }
                }
                break;
            }
            case OpKind::upsample2: {
                const auto& x = in(0);
                check(x.rank() == 4, id, n.kind, "expects [B,C,H,W], got " + shape_string(x.shape()));
                const std::size_t P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
                out = Tensor<T>({x.dim(0), x.dim(1), H * 2, W * 2});
                for (std::size_t p = 0; p < P; ++p) {
                    for (std::size_t y = 0; y < 2 * H; ++y) {
                        for (std::size_t xx = 0; xx < 2 * W; ++xx) {
                            out[(p * 2 * H + y) * 2 * W + xx] = x[(p * H + y / 2) * W + xx / 2];
                        }
                    }
                }
                break;
            }
            case OpKind::silu:
            case OpKind::tanh:
            case OpKind::expm1: {
                const auto& x = in(0);
                out = Tensor<T>(x.shape());
                const T* src = x.data();
                T* dst = out.data();
                const std::size_t m = x.numel();
                if (n.kind == OpKind::silu) {
                    for (std::size_t i = 0; i < m; ++i) dst[i] = src[i] * sigmoid(src[i]);
                } else if (n.kind == OpKind::tanh) {
                    for (std::size_t i = 0; i < m; ++i) dst[i] = std::tanh(src[i]);
                } else {
                    for (std::size_t i = 0; i < m; ++i) dst[i] = std::expm1(src[i]);
                }
                break;
            }
            case OpKind::group_norm: {
                const auto &x = in(0), &g = in(1), &bt = in(2);
                check(x.rank() >= 2, id, n.kind, "expects [B,C,...]");
                const std::size_t B = x.dim(0), C = x.dim(1), S = spatial_size(x.shape());
                const std::size_t G = static_cast<std::size_t>(n.groups);
                check(C % G == 0, id, n.kind, "channels " + std::to_string(C) + " not divisible by groups");
                check(g.numel() == C && bt.numel() == C, id, n.kind, "affine parameters must have C entries");
                const std::size_t cpg = C / G, m = cpg * S;
                out = Tensor<T>(x.shape());
                st.aux[id].resize(2);
                Tensor<T>& xhat = st.aux[id][0];
                Tensor<T>& inv_std = st.aux[id][1];
                xhat = Tensor<T>(x.shape());
                inv_std = Tensor<T>({B * G});
                for (std::size_t bg = 0; bg < B * G; ++bg) {
                    const T* src = x.data() + bg * m;
                    double mean = 0.0;
                    for (std::size_t i = 0; i < m; ++i) mean += src[i];
                    mean /= static_cast<double>(m);
                    double var = 0.0;
                    for (std::size_t i = 0; i < m; ++i) var += (src[i] - mean) * (src[i] - mean);
                    var /= static_cast<double>(m);
                    const double is = 1.0 / std::sqrt(var + n.eps);
                    inv_std[bg] = static_cast<T>(is);
                    T* xh = xhat.data() + bg * m;
                    T* dst = out.data() + bg * m;
                    const std::size_t g0 = (bg % G) * cpg;
                    for (std::size_t c = 0; c < cpg; ++c) {
                        const T gamma = g[g0 + c], beta = bt[g0 + c];
                        for (std::size_t s = 0; s < S; ++s) {
                            const std::size_t k = c * S + s;
                            xh[k] = static_cast<T>((src[k] - mean) * is);
                            dst[k] = gamma * xh[k] + beta;
                        }
                    }
                }
                break;
            }
            case OpKind::batch_norm: {
                const auto &x = in(0), &g = in(1), &bt = in(2);
                check(x.rank() == 2, id, n.kind, "expects [N,C], got " + shape_string(x.shape()));
                const std::size_t N = x.dim(0), C = x.dim(1);
                check(g.numel() == C && bt.numel() == C, id, n.kind, "affine parameters must have C entries");
                out = Tensor<T>(x.shape());
                st.aux[id].resize(4);
                Tensor<T>& xhat = st.aux[id][0];
                Tensor<T>& inv_std = st.aux[id][1];
                Tensor<T>& mean_t = st.aux[id][2];
                Tensor<T>& var_t = st.aux[id][3];
                xhat = Tensor<T>(x.shape());
                inv_std = Tensor<T>({C});
                mean_t = Tensor<T>({C});
                var_t = Tensor<T>({C});
                if (mode == Mode::train) {
                    check(N >= 2, id, n.kind, "batch statistics need at least two rows");
                    std::vector<double> mean(C, 0.0), var(C, 0.0);
                    for (std::size_t r = 0; r < N; ++r)
                        for (std::size_t c = 0; c < C; ++c) mean[c] += x[r * C + c];
                    for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<double>(N);
                    for (std::size_t r = 0; r < N; ++r)
                        for (std::size_t c = 0; c < C; ++c) {
                            const double d = x[r * C + c] - mean[c];
                            var[c] += d * d;
                        }
                    for (std::size_t c = 0; c < C; ++c) {
                        var[c] /= static_cast<double>(N);
                        mean_t[c] = static_cast<T>(mean[c]);
                        var_t[c] = static_cast<T>(var[c]);
                        inv_std[c] = static_cast<T>(1.0 / std::sqrt(var[c] + n.eps));
                    }
                } else {
                    const auto& rm = params.at(n.running_mean);
                    const auto& rv = params.at(n.running_var);
                    for (std::size_t c = 0; c < C; ++c) {
                        mean_t[c] = rm[c];
                        var_t[c] = rv[c];
                        inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + n.eps));
                    }
                }
                for (std::size_t r = 0; r < N; ++r)
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t k = r * C + c;
                        xhat[k] = (x[k] - mean_t[c]) * inv_std[c];
                        out[k] = g[c] * xhat[k] + bt[c];
                    }
                break;
            }
            case OpKind::add:
            case OpKind::mul: {
                const auto &a = in(0), &b = in(1);
                check(a.shape() == b.shape(), id, n.kind,
                      "operand shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) + " differ");
                out = Tensor<T>(a.shape());
                const std::size_t m = a.numel();
                if (n.kind == OpKind::add) {
                    for (std::size_t i = 0; i < m; ++i) out[i] = a[i] + b[i];
                } else {
                    for (std::size_t i = 0; i < m; ++i) out[i] = a[i] * b[i];
                }
                break;
            }
            case OpKind::film: {
                const auto &x = in(0), &sc = in(1), &sh = in(2);
                check(x.rank() >= 2, id, n.kind, "expects [B,C,...]");
                const std::size_t B = x.dim(0), C = x.dim(1), S = spatial_size(x.shape());
                const Shape bc{B, C};
                check(sc.shape() == bc && sh.shape() == bc, id, n.kind,
                      "modulation must be " + shape_string(bc));
                out = Tensor<T>(x.shape());
                for (std::size_t p = 0; p < B * C; ++p) {
                    const T a = T(1) + sc[p], s = sh[p];
                    const T* src = x.data() + p * S;
                    T* dst = out.data() + p * S;
                    for (std::size_t i = 0; i < S; ++i) dst[i] = src[i] * a + s;
                }
                break;
            }
            case OpKind::concat: {
                const auto& first = in(0);
                check(first.rank() >= 2, id, n.kind, "expects rank >= 2");
                const std::size_t B = first.dim(0), S = spatial_size(first.shape());
                std::size_t total = 0;
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    const auto& p = in(k);
                    Shape a = p.shape(), ref = first.shape();
                    check(a.size() == ref.size(), id, n.kind, "rank mismatch at part " + std::to_string(k));
                    a[1] = ref[1] = 0;
                    check(a == ref, id, n.kind,
                          "part " + std::to_string(k) + " shape " + shape_string(p.shape()) + " mismatched");
                    total += p.dim(1);
                }
                Shape os = first.shape();
                os[1] = total;
                out = Tensor<T>(os);
                for (std::size_t b = 0; b < B; ++b) {
                    std::size_t off = 0;
                    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                        const auto& p = in(k);
                        const std::size_t len = p.dim(1) * S;
                        std::copy_n(p.data() + b * len, len, out.data() + b * total * S + off);
                        off += len;
                    }
                }
                break;
            }
            case OpKind::global_avg_pool: {
                const auto& x = in(0);
                check(x.rank() >= 3, id, n.kind, "expects [B,C,...]");
                const std::size_t B = x.dim(0), C = x.dim(1), S = spatial_size(x.shape());
                out = Tensor<T>({B, C});
                for (std::size_t p = 0; p < B * C; ++p) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < S; ++i) s += x[p * S + i];
                    out[p] = static_cast<T>(s / static_cast<double>(S));
                }
                break;
            }
            case OpKind::mse: {
                const auto &a = in(0), &b = in(1);
                check(a.shape() == b.shape(), id, n.kind,
                      "prediction " + shape_string(a.shape()) + " vs target " + shape_string(b.shape()));
                double num = 0.0, den = 0.0;
                if (n.inputs.size() == 3) {
                    const auto& w = in(2);
                    check(w.shape() == a.shape(), id, n.kind, "weights must match prediction shape");
                    for (std::size_t i = 0; i < a.numel(); ++i) {
                        const double d = static_cast<double>(a[i]) - b[i];
                        num += w[i] * d * d;
                        den += w[i];
                    }
                } else {
                    for (std::size_t i = 0; i < a.numel(); ++i) {
                        const double d = static_cast<double>(a[i]) - b[i];
                        num += d * d;
                    }
                    den = static_cast<double>(a.numel());
                }
                out = Tensor<T>({1});
                out[0] = den > 0.0 ? static_cast<T>(num / den) : T(0);
                st.aux[id].assign(1, Tensor<T>({1}, static_cast<T>(den)));
                break;
            }
        }
        if (n.kind != OpKind::param && n.kind != OpKind::input && !out.all_finite()) {
            fail(ErrorKind::numeric, "node " + std::to_string(id) + " (" + to_string(n.kind) + ") produced a non-finite value");
        }
    }
    return st;
}

template <typename T>
std::vector<Tensor<T>> outputs(const OpGraph& graph, const ForwardState<T>& state) {
    std::vector<Tensor<T>> out;
    out.reserve(graph.outputs().size());
    for (NodeId id : graph.outputs()) {
        out.push_back(state.value(id));
    }
    return out;
}

// ---- reverse -----------------------------------------------------------------

template <typename T>
Gradients<T> backprop(const OpGraph& graph, const ForwardState<T>& st, const ParamStore<T>& params,
                      const std::vector<Tensor<T>>& seeds) {
    const auto& nodes = graph.nodes();
    require(seeds.size() == graph.outputs().size(), ErrorKind::shape,
            "expected " + std::to_string(graph.outputs().size()) + " seeds, got " + std::to_string(seeds.size()));
    require(st.values.size() == nodes.size(), ErrorKind::invalid_argument, "forward state does not match graph");

    std::vector<Tensor<T>> grad(nodes.size());
    for (std::size_t k = 0; k < seeds.size(); ++k) {
        const NodeId id = graph.outputs()[k];
        require(seeds[k].shape() == st.value(id).shape(), ErrorKind::shape,
                "seed " + std::to_string(k) + " shape " + shape_string(seeds[k].shape()) + " does not match output " +
                    shape_string(st.value(id).shape()));
        accumulate(grad[id], seeds[k]);
    }

    // Contributions to an input slot; allocates zeros on first touch.
    auto slot = [&](NodeId target) -> Tensor<T>& {
        Tensor<T>& g = grad[target];
        if (g.empty()) {
            g = Tensor<T>(st.value(target).shape());
        }
        return g;
    };

    for (NodeId id = nodes.size(); id-- > 0;) {
        const OpNode& n = nodes[id];
        if (grad[id].empty() || n.kind == OpKind::input || n.kind == OpKind::param) {
            continue;
        }
        const Tensor<T>& gy = grad[id];
        auto val = [&](std::size_t k) -> const Tensor<T>& { return st.value(n.inputs[k]); };
        switch (n.kind) {
            case OpKind::input:
            case OpKind::param:
                break;
            case OpKind::linear: {
                const auto &x = val(0), &w = val(1);
                const std::size_t N = x.dim(0), I = x.dim(1), O = w.dim(0);
                ConstMatMap<T> g(gy.data(), N, O);
                MatMap<T>(slot(n.inputs[0]).data(), N, I).noalias() += g * ConstMatMap<T>(w.data(), O, I);
                MatMap<T>(slot(n.inputs[1]).data(), O, I).noalias() += g.transpose() * ConstMatMap<T>(x.data(), N, I);
                Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(slot(n.inputs[2]).data(), O) += g.colwise().sum();
                break;
            }
            case OpKind::conv3x3: {
                const auto &x = val(0), &w = val(1);
                const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
                const std::size_t Co = w.dim(0), HW = H * W, N = B * HW;
                const Tensor<T>& cols = st.aux[id].at(0);
                AlignedVector<T> gmat(Co * N);
                batch_to_channel_major(gy.data(), gmat.data(), B, Co, HW);
                ConstMatMap<T> g(gmat.data(), Co, N);
                MatMap<T>(slot(n.inputs[1]).data(), Co, C * 9).noalias() +=
                    g * ConstMatMap<T>(cols.data(), C * 9, N).transpose();
                Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(slot(n.inputs[2]).data(), Co) += g.rowwise().sum();
                AlignedVector<T> dcols(C * 9 * N);
                MatMap<T>(dcols.data(), C * 9, N).noalias() = ConstMatMap<T>(w.data(), Co, C * 9).transpose() * g;
                col2im(dcols.data(), slot(n.inputs[0]));
                break;
            }
            case OpKind::downsample2: {
                Tensor<T>& dx = slot(n.inputs[0]);
                const std::size_t P = dx.dim(0) * dx.dim(1), H = dx.dim(2), W = dx.dim(3);
                for (std::size_t p = 0; p < P; ++p)
                    for (std::size_t y = 0; y < H / 2; ++y)
                        for (std::size_t xx = 0; xx < W / 2; ++xx)
                            dx[(p * H + 2 * y) * W + 2 * xx] += gy[(p * (H / 2) + y) * (W / 2) + xx];
                break;
            }
            case OpKind::upsample2: {
                Tensor<T>& dx = slot(n.inputs[0]);
                const std::size_t P = dx.dim(0) * dx.dim(1), H = dx.dim(2), W = dx.dim(3);
                for (std::size_t p = 0; p < P; ++p)
                    for (std::size_t y = 0; y < 2 * H; ++y)
                        for (std::size_t xx = 0; xx < 2 * W; ++xx)
                            dx[(p * H + y / 2) * W + xx / 2] += gy[(p * 2 * H + y) * 2 * W + xx];
                break;
            }
            case OpKind::silu: {
                const auto& x = val(0);
                Tensor<T>& dx = slot(n.inputs[0]);
                for (std::size_t i = 0; i < x.numel(); ++i) {
                    const T s = sigmoid(x[i]);
                    dx[i] += gy[i] * s * (T(1) + x[i] * (T(1) - s));
                }
                break;
            }
            case OpKind::tanh: {
                const auto& y = st.value(id);
                Tensor<T>& dx = slot(n.inputs[0]);
                for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += gy[i] * (T(1) - y[i] * y[i]);
                break;
            }
            case OpKind::expm1: {
                const auto& y = st.value(id);
                Tensor<T>& dx = slot(n.inputs[0]);
                for (std::size_t i = 0; i < y.numel(); ++i) dx[i] += gy[i] * (y[i] + T(1));
                break;
            }
            case OpKind::group_norm: {
                const auto &x = val(0), &g = val(1);
                const std::size_t B = x.dim(0), C = x.dim(1), S = spatial_size(x.shape());
                const std::size_t G = static_cast<std::size_t>(n.groups), cpg = C / G, m = cpg * S;
                const Tensor<T>& xhat = st.aux[id][0];
                const Tensor<T>& inv_std = st.aux[id][1];
                Tensor<T>& dg = slot(n.inputs[1]);
                Tensor<T>& db = slot(n.inputs[2]);
                Tensor<T>& dx = slot(n.inputs[0]);
                std::vector<T> gh(m);
                for (std::size_t bg = 0; bg < B * G; ++bg) {
                    const std::size_t g0 = (bg % G) * cpg;
                    const T* gyb = gy.data() + bg * m;
                    const T* xh = xhat.data() + bg * m;
                    for (std::size_t c = 0; c < cpg; ++c) {
                        T sg = 0, sgx = 0;
                        for (std::size_t s = 0; s < S; ++s) {
                            const std::size_t k = c * S + s;
                            sg += gyb[k];
                            sgx += gyb[k] * xh[k];
                            gh[k] = gyb[k] * g[g0 + c];
                        }
                        dg[g0 + c] += sgx;
                        db[g0 + c] += sg;
                    }
                    norm_backward_block(gh.data(), xh, inv_std[bg], m, dx.data() + bg * m, 1);
                }
                break;
            }
            case OpKind::batch_norm: {
                const auto &x = val(0), &g = val(1);
                const std::size_t N = x.dim(0), C = x.dim(1);
                const Tensor<T>& xhat = st.aux[id][0];
                const Tensor<T>& inv_std = st.aux[id][1];
                Tensor<T>& dg = slot(n.inputs[1]);
                Tensor<T>& db = slot(n.inputs[2]);
                Tensor<T>& dx = slot(n.inputs[0]);
                std::vector<T> gh(N * C);
                for (std::size_t r = 0; r < N; ++r)
                    for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t k = r * C + c;
                        dg[c] += gy[k] * xhat[k];
                        db[c] += gy[k];
                        gh[k] = gy[k] * g[c];
                    }
                if (st.mode == Mode::train) {
                    for (std::size_t c = 0; c < C; ++c) {
                        norm_backward_block(gh.data() + c, xhat.data() + c, inv_std[c], N, dx.data() + c, C);
                    }
                } else {
                    for (std::size_t r = 0; r < N; ++r)
                        for (std::size_t c = 0; c < C; ++c) dx[r * C + c] += gh[r * C + c] * inv_std[c];
                }
                break;
            }
            case OpKind::add: {
                accumulate(grad[n.inputs[0]], gy);
                accumulate(grad[n.inputs[1]], gy);
                break;
            }
            case OpKind::mul: {
                const auto &a = val(0), &b = val(1);
                Tensor<T>& da = slot(n.inputs[0]);
                for (std::size_t i = 0; i < a.numel(); ++i) da[i] += gy[i] * b[i];
                Tensor<T>& db = slot(n.inputs[1]);
                for (std::size_t i = 0; i < a.numel(); ++i) db[i] += gy[i] * a[i];
                break;
            }
            case OpKind::film: {
                const auto &x = val(0), &sc = val(1);
                const std::size_t B = x.dim(0), C = x.dim(1), S = spatial_size(x.shape());
                Tensor<T>& dx = slot(n.inputs[0]);
                Tensor<T>& dsc = slot(n.inputs[1]);
                Tensor<T>& dsh = slot(n.inputs[2]);
                for (std::size_t p = 0; p < B * C; ++p) {
                    const T a = T(1) + sc[p];
                    T s1 = 0, s2 = 0;
                    for (std::size_t i = 0; i < S; ++i) {
                        const std::size_t k = p * S + i;
                        dx[k] += gy[k] * a;
                        s1 += gy[k] * x[k];
                        s2 += gy[k];
                    }
                    dsc[p] += s1;
                    dsh[p] += s2;
                }
                break;
            }
            case OpKind::concat: {
                const auto& y = st.value(id);
                const std::size_t B = y.dim(0), total = y.dim(1), S = spatial_size(y.shape());
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    Tensor<T>& d = slot(n.inputs[k]);
                    const std::size_t len = d.dim(1) * S;
                    for (std::size_t b = 0; b < B; ++b) {
                        const T* src = gy.data() + b * total * S + off;
                        T* dst = d.data() + b * len;
                        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                    off += len;
                }
                break;
            }
            case OpKind::global_avg_pool: {
                Tensor<T>& dx = slot(n.inputs[0]);
                const std::size_t BC = gy.numel(), S = dx.numel() / BC;
                const T inv = T(1) / static_cast<T>(S);
                for (std::size_t p = 0; p < BC; ++p)
                    for (std::size_t i = 0; i < S; ++i) dx[p * S + i] += gy[p] * inv;
                break;
            }
            case OpKind::mse: {
                const auto &a = val(0), &b = val(1);
                const double den = st.aux[id][0][0];
                if (den <= 0.0) {
                    slot(n.inputs[0]);
                    slot(n.inputs[1]);
                    break;
                }
                const T scale = static_cast<T>(2.0 * gy[0] / den);
                Tensor<T>& da = slot(n.inputs[0]);
                Tensor<T>& db = slot(n.inputs[1]);
                const Tensor<T>* w = n.inputs.size() == 3 ? &val(2) : nullptr;
                for (std::size_t i = 0; i < a.numel(); ++i) {
                    const T d = scale * (a[i] - b[i]) * (w ? (*w)[i] : T(1));
                    da[i] += d;
                    db[i] -= d;
                }
                if (w) {
                    slot(n.inputs[2]);
                }
                break;
            }
        }
    }

    Gradients<T> out;
    out.params.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.params[i] = Tensor<T>(params[i].shape());
    }
    for (NodeId id = 0; id < nodes.size(); ++id) {
        if (nodes[id].kind == OpKind::param && !grad[id].empty()) {
            const std::size_t pi = params.index(nodes[id].label);
            if (params.trainable(pi)) {
                accumulate(out.params[pi], grad[id]);
            }
        }
    }
    out.inputs.reserve(graph.input_count());
    for (NodeId id : graph.input_nodes()) {
        out.inputs.push_back(grad[id].empty() ? Tensor<T>(st.value(id).shape()) : std::move(grad[id]));
    }
    return out;
}

template <typename T>
void update_running_stats(const OpGraph& graph, const ForwardState<T>& st, ParamStore<T>& params) {
    require(st.mode == Mode::train, ErrorKind::invalid_argument, "running statistics need a train-mode pass");
    const auto& nodes = graph.nodes();
    for (NodeId id = 0; id < nodes.size(); ++id) {
        const OpNode& n = nodes[id];
        if (n.kind != OpKind::batch_norm) {
            continue;
        }
        const auto& mean = st.aux[id][2];
        const auto& var = st.aux[id][3];
        const double rows = static_cast<double>(st.value(n.inputs[0]).dim(0));
        auto& rm = params.at(n.running_mean);
        auto& rv = params.at(n.running_var);
        const T mom = static_cast<T>(n.momentum);
        for (std::size_t c = 0; c < rm.numel(); ++c) {
            rm[c] = (T(1) - mom) * rm[c] + mom * mean[c];
            rv[c] = (T(1) - mom) * rv[c] + mom * static_cast<T>(var[c] * rows / (rows - 1.0));
        }
    }
}

#define CWDIFF_INSTANTIATE(T)                                                                                  \
    template ForwardState<T> evaluate(const OpGraph&, std::vector<Tensor<T>>, const ParamStore<T>&, Mode);     \
    template std::vector<Tensor<T>> outputs(const OpGraph&, const ForwardState<T>&);                           \
    template Gradients<T> backprop(const OpGraph&, const ForwardState<T>&, const ParamStore<T>&,               \
                                   const std::vector<Tensor<T>>&);                                             \
    template void update_running_stats(const OpGraph&, const ForwardState<T>&, ParamStore<T>&);

CWDIFF_INSTANTIATE(float)
CWDIFF_INSTANTIATE(double)

}  // namespace cwdiff
