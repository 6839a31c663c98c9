#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsk/sds.hpp"
#include "lsk/sparse_conv.hpp"
#include "lsk/tensor.hpp"
#include "lsk/voxel.hpp"

namespace lsk {

/// Channel-wise weight selection knobs: base width D, width factor w, sort period f_s.
struct WidthConfig {
    int base_width = 32;
    double width_factor = 1.8;
    int sort_every = 300;

    int expanded() const { return static_cast<int>(std::lround(width_factor * base_width)); }
    bool expands() const { return expanded() > base_width; }

    void validate() const {
        if (base_width < 1) throw std::invalid_argument("base width must be >= 1");
        if (!(width_factor >= 1.0)) throw std::invalid_argument("width factor must be >= 1");
        if (sort_every < 1) throw std::invalid_argument("sorting frequency must be >= 1");
    }
    friend bool operator==(const WidthConfig&, const WidthConfig&) = default;
};

struct NetworkConfig {
    int in_feats = 2;
    double voxel_size = 0.05;
    WidthConfig width;
    int kernel_size = 9;
    std::vector<int> group_divisions{3, 3, 3};
    int num_blocks = 2;
    int num_classes = 3;
    std::vector<double> class_weights;  // empty means uniform
    std::vector<int> scales{2, 4, 8, 16};  // informational only
    std::uint64_t init_seed = 0;

    void validate() const {
        width.validate();
        if (in_feats < 1) throw std::invalid_argument("in_feats must be >= 1");
        if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel size must be > 0");
        if (num_blocks < 0) throw std::invalid_argument("num_blocks must be >= 0");
        if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
        if (!class_weights.empty()) {
            if (class_weights.size() != static_cast<std::size_t>(num_classes))
                throw std::invalid_argument("class weight count != num_classes");
            for (double w : class_weights)
                if (!(w > 0.0)) throw std::invalid_argument("class weights must be positive");
        }
        partition();  // validates kernel size and divisions
    }

    GroupPartition partition() const { return partition_groups(kernel_size, group_divisions); }

    std::vector<double> weights() const {
        return class_weights.empty() ? std::vector<double>(static_cast<std::size_t>(num_classes), 1.0) : class_weights;
    }
    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

enum class Mode { train, eval };

/// A trainable tensor with its gradient and AdamW moments.
template <class T>
struct Param {
    std::vector<std::size_t> shape;
    std::vector<T> value, grad, m, v;

    Param() = default;
    explicit Param(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
        const auto n = Tensor<T>::numel(shape);
        value.assign(n, fill);
        grad.assign(n, T(0));
        m.assign(n, T(0));
        v.assign(n, T(0));
    }
};

template <class T>
struct SparseConvLayer {
    GroupedSparseKernel<T> kernel;
    std::vector<T> grad, m, v;

    SparseConvLayer() = default;
    SparseConvLayer(GroupPartition part, std::size_t out, std::size_t in) : kernel(std::move(part), out, in) {
        grad.assign(kernel.size(), T(0));
        m.assign(kernel.size(), T(0));
        v.assign(kernel.size(), T(0));
    }
};

/// Per-channel normalization over active voxels with running statistics.
template <class T>
struct BatchNorm {
    Param<T> gamma, beta;
    std::vector<T> running_mean, running_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm() = default;
    explicit BatchNorm(std::size_t c)
        : gamma({c}, T(1)), beta({c}, T(0)), running_mean(c, T(0)), running_var(c, T(1)) {}
    std::size_t channels() const { return gamma.value.size(); }
};

template <class T>
struct Linear {
    Param<T> weight;  // [out, in]
    Param<T> bias;    // [out]

    Linear() = default;
    Linear(std::size_t out, std::size_t in) : weight({out, in}), bias({out}) {}
};

/// Two equal-width large-kernel convs with an identity shortcut:
/// y = x + conv2(relu(bn1(conv1(x)))).
template <class T>
struct LskBlockParams {
    SparseConvLayer<T> conv1, conv2;
    BatchNorm<T> bn1;

    std::size_t width() const { return conv1.kernel.d_in; }
};

/// Non-owning handle to one stored tensor. `boundary[a]` names the channel
/// boundary axis `a` belongs to (0 = residual stream, 1 + b = inside block b),
/// or -1 when the axis never changes under channel sort/select.
template <class T>
struct ParamView {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<int> boundary;
    std::vector<T>* value = nullptr;
    std::vector<T>* grad = nullptr;  // null for buffers (running stats)
    std::vector<T>* m = nullptr;
    std::vector<T>* v = nullptr;
    std::vector<std::uint8_t>* mask = nullptr;  // set for large-kernel layers only

    bool trainable() const { return grad != nullptr; }
};

template <class T>
struct BnCache {
    Matrix<T> xhat;
    std::vector<T> inv_std;
};

template <class T>
struct BlockCache {
    Matrix<T> x_in;
    Matrix<T> h1;
    BnCache<T> bn;
    Matrix<T> a1;  // post-activation, input of conv2
};

template <class T>
struct ForwardCache {
    Mode mode = Mode::train;
    Matrix<T> input;
    std::vector<BlockCache<T>> blocks;
    Matrix<T> trunk_out;
    BnCache<T> head_bn;
    Matrix<T> head_act;
};

namespace nn {

/// Sums over input channels in `order` when given, index order otherwise.
template <class T>
Matrix<T> linear_forward(const Linear<T>& l, const Matrix<T>& x, const std::vector<int>* order = nullptr) {
    const std::size_t out = l.weight.shape[0], in = l.weight.shape[1];
    if (x.cols != in) throw std::invalid_argument("shape mismatch");
    Matrix<T> y(x.rows, out);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const T* xr = x.data.data() + r * in;
        T* yr = y.data.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            const T* w = l.weight.value.data() + o * in;
            T acc = l.bias.value[o];
            if (order) {
                for (std::size_t j = 0; j < in; ++j) {
                    const auto i = static_cast<std::size_t>((*order)[j]);
                    acc += w[i] * xr[i];
                }
            } else {
                for (std::size_t i = 0; i < in; ++i) acc += w[i] * xr[i];
            }
            yr[o] = acc;
        }
    }
    return y;
}

/// Accumulates weight/bias grads; returns dL/dx.
template <class T>
Matrix<T> linear_backward(Linear<T>& l, const Matrix<T>& x, const Matrix<T>& dy, bool want_param_grads = true) {
    const std::size_t out = l.weight.shape[0], in = l.weight.shape[1];
    Matrix<T> dx(x.rows, in);
    for (std::size_t r = 0; r < x.rows; ++r) {
        const T* xr = x.data.data() + r * in;
        const T* g = dy.data.data() + r * out;
        T* dxr = dx.data.data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const T* w = l.weight.value.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) dxr[i] += w[i] * g[o];
            if (want_param_grads) {
                T* gw = l.weight.grad.data() + o * in;
                for (std::size_t i = 0; i < in; ++i) gw[i] += g[o] * xr[i];
                l.bias.grad[o] += g[o];
            }
        }
    }
    return dx;
}

template <class T>
Matrix<T> bn_forward(BatchNorm<T>& bn, const Matrix<T>& x, Mode mode, BnCache<T>* cache) {
    const std::size_t n = x.rows, c = x.cols;
    if (c != bn.channels()) throw std::invalid_argument("shape mismatch");
    Matrix<T> y(n, c);
    std::vector<T> mean(c, T(0)), inv_std(c, T(0));
    if (mode == Mode::train && n > 0) {
        std::vector<T> var(c, T(0));
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < c; ++k) mean[k] += x(r, k);
        for (std::size_t k = 0; k < c; ++k) mean[k] /= static_cast<T>(n);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < c; ++k) {
                const T d = x(r, k) - mean[k];
                var[k] += d * d;
            }
        for (std::size_t k = 0; k < c; ++k) {
            var[k] /= static_cast<T>(n);
            inv_std[k] = T(1) / std::sqrt(var[k] + bn.eps);
            const T unbiased = n > 1 ? var[k] * static_cast<T>(n) / static_cast<T>(n - 1) : var[k];
            bn.running_mean[k] = (T(1) - bn.momentum) * bn.running_mean[k] + bn.momentum * mean[k];
            bn.running_var[k] = (T(1) - bn.momentum) * bn.running_var[k] + bn.momentum * unbiased;
        }
    } else {
        for (std::size_t k = 0; k < c; ++k) {
            mean[k] = bn.running_mean[k];
            inv_std[k] = T(1) / std::sqrt(bn.running_var[k] + bn.eps);
        }
    }
    Matrix<T> xhat(n, c);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < c; ++k) {
            const T h = (x(r, k) - mean[k]) * inv_std[k];
            xhat(r, k) = h;
            y(r, k) = bn.gamma.value[k] * h + bn.beta.value[k];
        }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

template <class T>
Matrix<T> bn_backward(BatchNorm<T>& bn, const BnCache<T>& cache, const Matrix<T>& dy, Mode mode,
                      bool want_param_grads = true) {
    const std::size_t n = dy.rows, c = dy.cols;
    Matrix<T> dx(n, c);
    std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < c; ++k) {
            sum_dy[k] += dy(r, k);
            sum_dy_xhat[k] += dy(r, k) * cache.xhat(r, k);
        }
    if (want_param_grads)
        for (std::size_t k = 0; k < c; ++k) {
            bn.beta.grad[k] += sum_dy[k];
            bn.gamma.grad[k] += sum_dy_xhat[k];
        }
    if (mode == Mode::train) {
        const T inv_n = n > 0 ? T(1) / static_cast<T>(n) : T(0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < c; ++k)
                dx(r, k) = bn.gamma.value[k] * cache.inv_std[k] * inv_n *
                           (static_cast<T>(n) * dy(r, k) - sum_dy[k] - cache.xhat(r, k) * sum_dy_xhat[k]);
    } else {
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < c; ++k) dx(r, k) = bn.gamma.value[k] * cache.inv_std[k] * dy(r, k);
    }
    return dx;
}

template <class T>
Matrix<T> relu(const Matrix<T>& x) {
    Matrix<T> y(x.rows, x.cols);
    for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
    return y;
}

/// dy masked by the activation's support (output > 0).
template <class T>
Matrix<T> relu_backward(const Matrix<T>& activated, const Matrix<T>& dy) {
    Matrix<T> dx(dy.rows, dy.cols);
    for (std::size_t i = 0; i < dy.data.size(); ++i) dx.data[i] = activated.data[i] > T(0) ? dy.data[i] : T(0);
    return dx;
}

template <class T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

template <class T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Forward for one residual block on raw feature rows. `stream_order` and
/// `inner_order` fix the reduction order over the input channels of conv1 and
/// conv2.
template <class T>
Matrix<T> block_forward(LskBlockParams<T>& b, const Matrix<T>& x, const NeighborMap& nmap, Mode mode,
                        BlockCache<T>* cache, const std::vector<int>* stream_order = nullptr,
                        const std::vector<int>* inner_order = nullptr) {
    if (x.cols != b.width()) throw std::invalid_argument("width mismatch");
    Matrix<T> h1 = conv_forward_features(x, b.conv1.kernel, nmap, stream_order);
    BnCache<T> bnc;
    Matrix<T> a1 = relu(bn_forward(b.bn1, h1, mode, &bnc));
    Matrix<T> y = conv_forward_features(a1, b.conv2.kernel, nmap, inner_order);
    add_into(y, x);
    if (cache) {
        cache->x_in = x;
        cache->h1 = std::move(h1);
        cache->bn = std::move(bnc);
        cache->a1 = std::move(a1);
    }
    return y;
}

template <class T>
Matrix<T> block_backward(LskBlockParams<T>& b, const BlockCache<T>& cache, const Matrix<T>& dy,
                         const NeighborMap& nmap, Mode mode, bool want_param_grads) {
    auto g2 = conv_backward_features(dy, cache.a1, b.conv2.kernel, nmap, true, want_param_grads);
    if (want_param_grads) add_into(b.conv2.grad, g2.grad_weight);
    Matrix<T> da1 = relu_backward(cache.a1, g2.grad_in);
    Matrix<T> dh1 = bn_backward(b.bn1, cache.bn, da1, mode, want_param_grads);
    auto g1 = conv_backward_features(dh1, cache.x_in, b.conv1.kernel, nmap, true, want_param_grads);
    if (want_param_grads) add_into(b.conv1.grad, g1.grad_weight);
    Matrix<T> dx = dy;
    add_into(dx, g1.grad_in);
    return dx;
}

}  // namespace nn

/// Stem (1x1x1 linear) -> residual large-kernel blocks -> norm/ReLU/linear head.
/// Every hidden boundary carries `width` channels.
template <class T>
class LskNetwork {
public:
    NetworkConfig config;
    std::size_t width = 0;
    OffsetList offsets;
    Linear<T> stem;
    std::vector<LskBlockParams<T>> blocks;
    BatchNorm<T> head_bn;
    Linear<T> head;
    // Per boundary, a label for each physical channel. Channel permutations
    // move the labels with the data; sums over a channel axis run in label
    // order, so permuted networks reproduce their outputs bit for bit.
    std::vector<std::vector<int>> channel_ids;

    LskNetwork() = default;

    /// Allocates at `width_override` channels (default: the expanded width) and,
    /// unless `init` is false, draws dense He-uniform weights. All masks start full.
    explicit LskNetwork(const NetworkConfig& cfg, int width_override = 0, bool init = true) : config(cfg) {
        config.validate();
        width = static_cast<std::size_t>(width_override > 0 ? width_override : config.width.expanded());
        offsets = kernel_offsets(config.kernel_size);
        const auto part = config.partition();
        const auto in = static_cast<std::size_t>(config.in_feats);
        const auto classes = static_cast<std::size_t>(config.num_classes);
        stem = Linear<T>(width, in);
        blocks.resize(static_cast<std::size_t>(config.num_blocks));
        for (auto& b : blocks) {
            b.conv1 = SparseConvLayer<T>(part, width, width);
            b.bn1 = BatchNorm<T>(width);
            b.conv2 = SparseConvLayer<T>(part, width, width);
        }
        head_bn = BatchNorm<T>(width);
        head = Linear<T>(classes, width);
        channel_ids.assign(num_boundaries(), std::vector<int>(width));
        for (auto& ids : channel_ids) std::iota(ids.begin(), ids.end(), 0);
        if (init) initialize(config.init_seed);
    }

    void initialize(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        auto fill = [&](std::vector<T>& v, double bound) {
            std::uniform_real_distribution<double> u(-bound, bound);
            for (auto& x : v) x = static_cast<T>(u(rng));
        };
        const double stem_bound = 1.0 / std::sqrt(static_cast<double>(stem.weight.shape[1]));
        fill(stem.weight.value, stem_bound);
        fill(stem.bias.value, stem_bound);
        for (auto& b : blocks) {
            for (auto* conv : {&b.conv1, &b.conv2}) {
                const double fan_in = static_cast<double>(conv->kernel.slots * conv->kernel.d_in);
                fill(conv->kernel.weight, std::sqrt(6.0 / fan_in));
                conv->kernel.apply_mask();
            }
        }
        const double head_bound = 1.0 / std::sqrt(static_cast<double>(head.weight.shape[1]));
        fill(head.weight.value, head_bound);
        fill(head.bias.value, head_bound);
    }

    std::vector<SparseConvLayer<T>*> sparse_layers() {
        std::vector<SparseConvLayer<T>*> out;
        for (auto& b : blocks) {
            out.push_back(&b.conv1);
            out.push_back(&b.conv2);
        }
        return out;
    }
    std::vector<const SparseConvLayer<T>*> sparse_layers() const {
        std::vector<const SparseConvLayer<T>*> out;
        for (const auto& b : blocks) {
            out.push_back(&b.conv1);
            out.push_back(&b.conv2);
        }
        return out;
    }

    /// Every stored tensor in a fixed declaration order.
    std::vector<ParamView<T>> params() {
        std::vector<ParamView<T>> out;
        auto dense = [&](const std::string& name, Param<T>& p, std::vector<int> boundary) {
            out.push_back({name, p.shape, std::move(boundary), &p.value, &p.grad, &p.m, &p.v, nullptr});
        };
        auto buffer = [&](const std::string& name, std::vector<T>& v, int boundary) {
            out.push_back({name, {v.size()}, {boundary}, &v, nullptr, nullptr, nullptr, nullptr});
        };
        auto norm = [&](const std::string& name, BatchNorm<T>& bn, int boundary) {
            dense(name + ".gamma", bn.gamma, {boundary});
            dense(name + ".beta", bn.beta, {boundary});
            buffer(name + ".running_mean", bn.running_mean, boundary);
            buffer(name + ".running_var", bn.running_var, boundary);
        };
        auto conv = [&](const std::string& name, SparseConvLayer<T>& c, int out_b, int in_b) {
            out.push_back({name + ".weight",
                           {c.kernel.slots, c.kernel.d_out, c.kernel.d_in},
                           {-1, out_b, in_b},
                           &c.kernel.weight, &c.grad, &c.m, &c.v, &c.kernel.mask});
        };
        dense("stem.weight", stem.weight, {0, -1});
        dense("stem.bias", stem.bias, {0});
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const std::string p = "block" + std::to_string(b);
            const int inner = 1 + static_cast<int>(b);
            conv(p + ".conv1", blocks[b].conv1, inner, 0);
            norm(p + ".bn1", blocks[b].bn1, inner);
            conv(p + ".conv2", blocks[b].conv2, 0, inner);
        }
        norm("head_bn", head_bn, 0);
        dense("head.weight", head.weight, {-1, 0});
        dense("head.bias", head.bias, {-1});
        return out;
    }

    std::size_t num_boundaries() const { return 1 + blocks.size(); }

    /// Physical channel indices of boundary b sorted by label.
    std::vector<int> reduction_order(std::size_t b) const {
        const auto& ids = channel_ids[b];
        std::vector<int> order(ids.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int c) {
            return ids[static_cast<std::size_t>(a)] < ids[static_cast<std::size_t>(c)];
        });
        return order;
    }

    void zero_grad() {
        for (auto& p : params())
            if (p.grad) std::fill(p.grad->begin(), p.grad->end(), T(0));
    }

    /// Stem + residual blocks; returns the last large-kernel feature map.
    Matrix<T> trunk_forward(const Matrix<T>& input, const NeighborMap& nmap, Mode mode, ForwardCache<T>* cache) {
        if (input.cols != static_cast<std::size_t>(config.in_feats)) throw std::invalid_argument("shape mismatch");
        Matrix<T> x = nn::linear_forward(stem, input);
        if (cache) {
            cache->mode = mode;
            cache->input = input;
            cache->blocks.assign(blocks.size(), {});
        }
        const auto stream = reduction_order(0);
        for (std::size_t b = 0; b < blocks.size(); ++b) {
            const auto inner = reduction_order(1 + b);
            x = nn::block_forward(blocks[b], x, nmap, mode, cache ? &cache->blocks[b] : nullptr, &stream, &inner);
        }
        if (cache) cache->trunk_out = x;
        return x;
    }

    Matrix<T> head_forward(const Matrix<T>& trunk, Mode mode, ForwardCache<T>* cache) {
        BnCache<T> bnc;
        Matrix<T> a = nn::relu(nn::bn_forward(head_bn, trunk, mode, &bnc));
        const auto stream = reduction_order(0);
        Matrix<T> logits = nn::linear_forward(head, a, &stream);
        if (cache) {
            cache->head_bn = std::move(bnc);
            cache->head_act = std::move(a);
        }
        return logits;
    }

    Matrix<T> forward(const Matrix<T>& input, const NeighborMap& nmap, Mode mode, ForwardCache<T>* cache = nullptr) {
        return head_forward(trunk_forward(input, nmap, mode, cache), mode, cache);
    }

    Matrix<T> head_backward(const ForwardCache<T>& cache, const Matrix<T>& grad_logits, bool want_param_grads = true) {
        Matrix<T> da = nn::linear_backward(head, cache.head_act, grad_logits, want_param_grads);
        Matrix<T> dbn = nn::relu_backward(cache.head_act, da);
        return nn::bn_backward(head_bn, cache.head_bn, dbn, cache.mode, want_param_grads);
    }

    /// Back-propagates through blocks and stem; returns dL/d(input features).
    Matrix<T> trunk_backward(const ForwardCache<T>& cache, const Matrix<T>& grad_trunk, const NeighborMap& nmap,
                             bool want_param_grads = true) {
        Matrix<T> g = grad_trunk;
        for (std::size_t b = blocks.size(); b-- > 0;)
            g = nn::block_backward(blocks[b], cache.blocks[b], g, nmap, cache.mode, want_param_grads);
        return nn::linear_backward(stem, cache.input, g, want_param_grads);
    }

    Matrix<T> backward(const ForwardCache<T>& cache, const Matrix<T>& grad_logits, const NeighborMap& nmap) {
        return trunk_backward(cache, head_backward(cache, grad_logits), nmap);
    }
};

/// Residual block applied to a sparse tensor; coordinates pass through unchanged.
template <class T>
SparseTensor3D<T> lsk_block_forward(const SparseTensor3D<T>& x, LskBlockParams<T>& params, const NeighborMap& nmap,
                                    Mode mode = Mode::eval) {
    return SparseTensor3D<T>(x.coords, nn::block_forward(params, x.feats, nmap, mode, static_cast<BlockCache<T>*>(nullptr)));
}

template <class T>
struct LossResult {
    T loss = T(0);
    Matrix<T> grad;
};

/// Class-weighted cross entropy normalised by the total weight of the labels:
/// sum_i w[y_i] * (logsumexp(z_i) - z_i[y_i]) / sum_i w[y_i].
template <class T>
LossResult<T> weighted_ce_loss(const Matrix<T>& logits, std::span<const int> labels,
                               std::span<const double> class_weights) {
    const std::size_t n = logits.rows, c = logits.cols;
    if (labels.size() != n) throw std::invalid_argument("shape mismatch");
    if (class_weights.size() != c) throw std::invalid_argument("class weight count mismatch");
    for (double w : class_weights)
        if (!(w > 0.0)) throw std::invalid_argument("class weights must be positive");
    double total_w = 0.0;
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= c) throw std::invalid_argument("label out of range");
        total_w += class_weights[static_cast<std::size_t>(y)];
    }
    LossResult<T> res;
    res.grad = Matrix<T>(n, c);
    if (n == 0) return res;
    double loss = 0.0;
    std::vector<double> p(c);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, static_cast<double>(logits(i, k)));
        double z = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
            p[k] = std::exp(static_cast<double>(logits(i, k)) - mx);
            z += p[k];
        }
        const auto y = static_cast<std::size_t>(labels[i]);
        const double w = class_weights[y] / total_w;
        loss += w * (std::log(z) + mx - static_cast<double>(logits(i, y)));
        for (std::size_t k = 0; k < c; ++k) res.grad(i, k) = static_cast<T>(w * (p[k] / z - (k == y ? 1.0 : 0.0)));
    }
    res.loss = static_cast<T>(loss);
    return res;
}

}  // namespace lsk
