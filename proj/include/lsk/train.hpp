#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsk/cws.hpp"
#include "lsk/metrics.hpp"
#include "lsk/network.hpp"
#include "lsk/scene_io.hpp"
#include "lsk/sds.hpp"

namespace lsk {

struct TrainSchedule {
    int iterations = 2000;
    SparsityConfig sparsity;
    double peak_lr = 5e-3;
    double weight_decay = 0.01;
    int batch_size = 1;
    /// Weight of the loss of the embedded base-width subnetwork (leading D
    /// channels) added to the expanded network's loss; only used when w > 1.
    double base_loss_weight = 1.0;

    void validate(const NetworkConfig& net) const {
        sparsity.validate();
        net.width.validate();
        if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
        if (!(peak_lr >= 0.0)) throw std::invalid_argument("learning rate must be >= 0");
        if (net.width.expands()) {
            if (net.width.sort_every % sparsity.adapt_every != 0)
                throw std::invalid_argument("sorting frequency must be a multiple of the adaptation frequency");
            if (iterations < net.width.sort_every)
                throw std::invalid_argument("iterations must be >= sorting frequency");
        }
    }
    friend bool operator==(const TrainSchedule&, const TrainSchedule&) = default;
};

/// One-cycle schedule with cosine phases: lr rises from peak/25 to peak over
/// the first 30% of steps, then anneals to peak/25e4.
inline double one_cycle_lr(double peak, int step, int total) {
    if (total <= 1) return peak;
    const double initial = peak / 25.0;
    const double final_lr = initial / 1e4;
    const double warm_end = 0.3 * total - 1.0;
    auto cosine = [](double from, double to, double pct) {
        return to + (from - to) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct));
    };
    const double s = static_cast<double>(step);
    if (s <= warm_end) return cosine(initial, peak, warm_end > 0 ? s / warm_end : 1.0);
    const double span = (total - 1.0) - warm_end;
    return cosine(peak, final_lr, span > 0 ? std::min(1.0, (s - warm_end) / span) : 1.0);
}

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    /// Decoupled-decay Adam update; positions with mask == 0 are left untouched.
    template <class T>
    void step(ParamView<T>& p, double lr, double weight_decay, std::int64_t t) const {
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        auto& w = *p.value;
        auto& g = *p.grad;
        auto& m = *p.m;
        auto& v = *p.v;
        const std::uint8_t* mask = p.mask ? p.mask->data() : nullptr;
        const double decay = 1.0 - lr * weight_decay;
        for (std::size_t k = 0; k < w.size(); ++k) {
            const double gk = static_cast<double>(g[k]);
            const double mk = beta1 * static_cast<double>(m[k]) + (1.0 - beta1) * gk;
            const double vk = beta2 * static_cast<double>(v[k]) + (1.0 - beta2) * gk * gk;
            const double wk = static_cast<double>(w[k]) * decay - lr * (mk / bc1) / (std::sqrt(vk / bc2) + eps);
            const bool keep = mask == nullptr || mask[k] != 0;
            m[k] = keep ? static_cast<T>(mk) : m[k];
            v[k] = keep ? static_cast<T>(vk) : v[k];
            w[k] = keep ? static_cast<T>(wk) : w[k];
        }
    }
};

/// Draws ER-scaled masks for every large-kernel layer and zeroes masked weights.
template <class T>
std::vector<std::string> init_masks(LskNetwork<T>& net, double sparsity, std::uint64_t seed) {
    std::vector<std::string> warnings;
    auto layers = net.sparse_layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& k = layers[l]->kernel;
        auto init = er_init_mask(k.slots, k.d_out, k.d_in, k.partition, sparsity, mix_seed(seed, {0, l}));
        k.mask = std::move(init.mask);
        k.apply_mask();
        for (auto& w : init.warnings) warnings.push_back("layer " + std::to_string(l) + ": " + w);
    }
    return warnings;
}

/// Mutable training state; everything needed to resume bit-exactly.
template <class T>
struct TrainState {
    LskNetwork<T> net;
    std::int64_t iteration = 0;
    std::int64_t adam_step = 0;
    std::int64_t sds_events = 0;
    std::int64_t sort_events = 0;
    std::uint64_t seed = 0;
    ChannelPermutation last_permutation;
};

template <class T>
Sample<T> prepare_sample(const Scene& scene, const NetworkConfig& cfg, const OffsetList& offsets) {
    std::vector<std::array<double, 3>> pts(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i)
        pts[i] = {scene.points[i][0], scene.points[i][1], scene.points[i][2]};
    if (scene.feats.cols != static_cast<std::size_t>(cfg.in_feats))
        throw std::invalid_argument("scene feature dim does not match network in_feats");
    auto vox = voxelize<T>(pts, scene.feats.template cast<T>(), cfg.voxel_size);
    Sample<T> s;
    s.tensor = std::move(vox.tensor);
    s.points = std::move(vox.map);
    s.labels.assign(scene.labels.begin(), scene.labels.end());
    for (int y : s.labels)
        if (y >= cfg.num_classes) throw std::invalid_argument("width/class mismatch: label exceeds num_classes");
    s.nmap = std::make_shared<const NeighborMap>(gather_neighbors(s.tensor, offsets));
    return s;
}

/// Places several samples side by side along x, far enough apart that no
/// kernel offset reaches across scenes.
template <class T>
Sample<T> concat_samples(const std::vector<const Sample<T>*>& parts, const OffsetList& offsets) {
    if (parts.size() == 1) return *parts.front();
    Sample<T> out;
    std::vector<Coord3> coords;
    Matrix<T> feats(0, parts.front()->tensor.channels());
    std::int32_t shift = 0;
    std::int32_t row_base = 0;
    for (const auto* p : parts) {
        std::int32_t lo = 0, hi = 0;
        for (std::size_t r = 0; r < p->tensor.size(); ++r) {
            lo = r == 0 ? p->tensor.coords[r].x : std::min(lo, p->tensor.coords[r].x);
            hi = r == 0 ? p->tensor.coords[r].x : std::max(hi, p->tensor.coords[r].x);
        }
        for (const auto& c : p->tensor.coords) coords.push_back({c.x - lo + shift, c.y, c.z});
        feats.data.insert(feats.data.end(), p->tensor.feats.data.begin(), p->tensor.feats.data.end());
        for (auto v : p->points.point_to_voxel) out.points.point_to_voxel.push_back(v + row_base);
        out.labels.insert(out.labels.end(), p->labels.begin(), p->labels.end());
        shift += (hi - lo) + offsets.kernel[0] + 1;
        row_base += static_cast<std::int32_t>(p->tensor.size());
    }
    feats.rows = coords.size();
    out.tensor = SparseTensor3D<T>(std::move(coords), std::move(feats));
    out.points.num_voxels = out.tensor.size();
    out.points.voxel_size = parts.front()->points.voxel_size;
    out.nmap = std::make_shared<const NeighborMap>(gather_neighbors(out.tensor, offsets));
    return out;
}

namespace detail {

template <class T>
T forward_backward(LskNetwork<T>& net, const Sample<T>& s, const std::vector<double>& cw, T scale) {
    ForwardCache<T> cache;
    const Matrix<T> logits = net.forward(s.tensor.feats, *s.nmap, Mode::train, &cache);
    const Matrix<T> point_logits = devoxelize(logits, s.points);
    auto loss = weighted_ce_loss(point_logits, std::span<const int>(s.labels), std::span<const double>(cw));
    if (!std::isfinite(static_cast<double>(loss.loss))) throw std::runtime_error("diverged");
    Matrix<T> g = devoxelize_backward(loss.grad, s.points, s.tensor.size());
    if (scale != T(1))
        for (auto& v : g.data) v *= scale;
    net.backward(cache, g, *s.nmap);
    return loss.loss;
}

}  // namespace detail

struct StepMetrics {
    double loss = 0.0;
    double base_loss = 0.0;
};

/// One optimisation step. Large-kernel gradients are zero off-mask and the
/// optimizer skips masked positions, so masked weights stay exactly 0.
/// With w > 1 the base-width subnetwork's loss is added (see TrainSchedule).
template <class T>
StepMetrics train_step(TrainState<T>& st, const Sample<T>& sample, double lr, const TrainSchedule& sched) {
    auto& net = st.net;
    if (sample.tensor.channels() != static_cast<std::size_t>(net.config.in_feats))
        throw std::invalid_argument("shape mismatch");
    const auto cw = net.config.weights();
    net.zero_grad();
    StepMetrics m;
    m.loss = static_cast<double>(detail::forward_backward(net, sample, cw, T(1)));
    const auto base = static_cast<std::size_t>(net.config.width.base_width);
    if (net.width > base && sched.base_loss_weight > 0.0) {
        LskNetwork<T> sub = slice_network(net, base, false);
        m.base_loss = static_cast<double>(
            detail::forward_backward(sub, sample, cw, static_cast<T>(sched.base_loss_weight)));
        accumulate_sliced_grads(net, sub);
        copy_sliced_buffers(net, sub);
    }
    ++st.adam_step;
    AdamW opt;
    for (auto& p : net.params())
        if (p.trainable()) opt.step(p, lr, sched.weight_decay, st.adam_step);
    return m;
}

/// Applies one adaptation to every large-kernel layer and clears optimizer
/// state at pruned positions.
template <class T>
std::vector<MaskDelta> sds_event(TrainState<T>& st, const SparsityConfig& cfg) {
    std::vector<MaskDelta> deltas;
    auto layers = st.net.sparse_layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
        auto& layer = *layers[l];
        auto delta = sds_update(layer.kernel, cfg,
                                mix_seed(st.seed, {1, l, static_cast<std::uint64_t>(st.sds_events)}));
        for (const auto* list : {&delta.eliminated, &delta.grown})
            for (const auto& e : *list) layer.grad[e.flat] = layer.m[e.flat] = layer.v[e.flat] = T(0);
        deltas.push_back(std::move(delta));
    }
    ++st.sds_events;
    return deltas;
}

struct IterationRecord {
    std::int64_t iteration = 0;
    double loss = 0.0;
    double base_loss = 0.0;
    double lr = 0.0;
    std::vector<double> layer_sparsity;
    bool sds_event = false;
    bool sort_event = false;
};

/// Sample indices used by 1-based iteration `it`: consecutive slices of an
/// endless stream of per-epoch shuffles seeded by (seed, epoch).
inline std::vector<std::size_t> batch_indices(std::uint64_t seed, std::int64_t it, std::size_t num_samples,
                                              int batch_size) {
    std::vector<std::size_t> out;
    std::vector<std::size_t> order;
    std::int64_t cached_epoch = -1;
    for (int b = 0; b < batch_size; ++b) {
        const auto pos = static_cast<std::uint64_t>((it - 1) * batch_size + b);
        const auto epoch = static_cast<std::int64_t>(pos / num_samples);
        if (epoch != cached_epoch) {
            order.resize(num_samples);
            std::iota(order.begin(), order.end(), 0);
            std::mt19937_64 rng(mix_seed(seed, {2, static_cast<std::uint64_t>(epoch)}));
            std::shuffle(order.begin(), order.end(), rng);
            cached_epoch = epoch;
        }
        out.push_back(order[pos % num_samples]);
    }
    return out;
}

/// Runs iterations st.iteration+1 .. sched.iterations: train step, then an
/// SDS adaptation when it % f_a == 0 (and s > 0), then a channel sort when
/// it % f_s == 0 (and w > 1).
template <class T>
void training_loop(TrainState<T>& st, const TrainSchedule& sched, const std::vector<Sample<T>>& data,
                   const std::function<void(const IterationRecord&)>& on_iteration = {},
                   std::int64_t stop_after = -1) {
    sched.validate(st.net.config);
    if (data.empty()) throw std::invalid_argument("no scenes");
    const auto& width = st.net.config.width;
    const bool sds_on = sched.sparsity.sparsity > 0.0;
    const bool cws_on = width.expands();
    const std::int64_t last = stop_after >= 0 ? std::min<std::int64_t>(sched.iterations, stop_after)
                                              : static_cast<std::int64_t>(sched.iterations);
    while (st.iteration < last) {
        const std::int64_t it = st.iteration + 1;
        const auto idx = batch_indices(st.seed, it, data.size(), sched.batch_size);
        std::vector<const Sample<T>*> parts;
        for (auto i : idx) parts.push_back(&data[i]);
        const double lr = one_cycle_lr(sched.peak_lr, static_cast<int>(it - 1), sched.iterations);
        StepMetrics m;
        if (parts.size() == 1) {
            m = train_step(st, *parts.front(), lr, sched);
        } else {
            const Sample<T> batch = concat_samples(parts, st.net.offsets);
            m = train_step(st, batch, lr, sched);
        }
        IterationRecord rec;
        rec.iteration = it;
        rec.loss = m.loss;
        rec.base_loss = m.base_loss;
        rec.lr = lr;
        if (sds_on && it % sched.sparsity.adapt_every == 0) {
            sds_event(st, sched.sparsity);
            rec.sds_event = true;
        }
        if (cws_on && it % width.sort_every == 0) {
            st.last_permutation = sort_channels(st.net);
            ++st.sort_events;
            rec.sort_event = true;
        }
        for (const auto* layer : st.net.sparse_layers())
            rec.layer_sparsity.push_back(1.0 - static_cast<double>(layer->kernel.nonzero()) /
                                                   static_cast<double>(layer->kernel.size()));
        st.iteration = it;
        if (on_iteration) on_iteration(rec);
    }
}

/// Validation path: sort the expanded network, keep the top base-width
/// channels and return the inference network (the training network keeps
/// its new channel order).
template <class T>
LskNetwork<T> inference_network(TrainState<T>& st) {
    if (!st.net.config.width.expands() || st.net.width == static_cast<std::size_t>(st.net.config.width.base_width))
        return st.net;
    st.last_permutation = sort_channels(st.net);
    return select_channels(st.net, st.net.config.width.base_width);
}

template <class T>
TrainState<T> make_train_state(const NetworkConfig& cfg, const TrainSchedule& sched,
                               std::vector<std::string>* warnings = nullptr) {
    sched.validate(cfg);
    TrainState<T> st;
    st.net = LskNetwork<T>(cfg);
    st.seed = sched.sparsity.seed;
    auto w = init_masks(st.net, sched.sparsity.sparsity, st.seed);
    if (warnings) *warnings = std::move(w);
    ChannelPermutation id;
    for (std::size_t b = 0; b < st.net.num_boundaries(); ++b) {
        std::vector<int> p(st.net.width);
        std::iota(p.begin(), p.end(), 0);
        id.perms.push_back(std::move(p));
    }
    st.last_permutation = std::move(id);
    return st;
}

}  // namespace lsk
