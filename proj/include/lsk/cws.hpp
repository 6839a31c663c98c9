#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "lsk/network.hpp"

namespace lsk {

/// One permutation per channel boundary; perms[b][k] is the old index now at position k.
struct ChannelPermutation {
    std::vector<std::vector<int>> perms;

    bool is_identity() const {
        for (const auto& p : perms)
            for (std::size_t k = 0; k < p.size(); ++k)
                if (p[k] != static_cast<int>(k)) return false;
        return true;
    }

    ChannelPermutation inverse() const {
        ChannelPermutation inv;
        for (const auto& p : perms) {
            std::vector<int> q(p.size());
            for (std::size_t k = 0; k < p.size(); ++k) q[static_cast<std::size_t>(p[k])] = static_cast<int>(k);
            inv.perms.push_back(std::move(q));
        }
        return inv;
    }
    friend bool operator==(const ChannelPermutation&, const ChannelPermutation&) = default;
};

/// Sum of |W| over all slots and input channels, per output channel.
template <class T>
std::vector<double> channel_l1_scores(const GroupedSparseKernel<T>& k) {
    std::vector<double> score(k.d_out, 0.0);
    for (std::size_t s = 0; s < k.slots; ++s)
        for (std::size_t o = 0; o < k.d_out; ++o)
            for (std::size_t i = 0; i < k.d_in; ++i) {
                const auto idx = k.index(s, o, i);
                if (k.mask[idx]) score[o] += std::abs(static_cast<double>(k.weight[idx]));
            }
    return score;
}

/// Indices ordered by descending score; equal scores keep the lower index first.
inline std::vector<int> descending_order(const std::vector<double>& scores) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    return order;
}

/// Scores that rank each boundary: the residual stream uses the summed conv2
/// scores of every block (all of them write into the stream); each block's
/// inner boundary uses its conv1 scores.
template <class T>
std::vector<std::vector<double>> boundary_scores(const LskNetwork<T>& net) {
    std::vector<std::vector<double>> out(net.num_boundaries());
    out[0].assign(net.width, 0.0);
    if (net.blocks.empty()) {
        const auto& w = net.stem.weight;
        for (std::size_t o = 0; o < w.shape[0]; ++o)
            for (std::size_t i = 0; i < w.shape[1]; ++i) out[0][o] += std::abs(static_cast<double>(w.value[o * w.shape[1] + i]));
    }
    for (std::size_t b = 0; b < net.blocks.size(); ++b) {
        const auto s2 = channel_l1_scores(net.blocks[b].conv2.kernel);
        for (std::size_t k = 0; k < s2.size(); ++k) out[0][k] += s2[k];
        out[1 + b] = channel_l1_scores(net.blocks[b].conv1.kernel);
    }
    return out;
}

/// Reorders every tensor axis tied to a boundary, including masks, grads and
/// optimizer moments. Pure data movement, so the network function is unchanged.
template <class T>
void apply_permutation(LskNetwork<T>& net, const ChannelPermutation& perm) {
    if (perm.perms.size() != net.num_boundaries()) throw std::invalid_argument("permutation boundary count mismatch");
    for (auto& p : net.params()) {
        for (std::size_t a = 0; a < p.shape.size(); ++a) {
            const int b = p.boundary[a];
            if (b < 0) continue;
            const auto& pi = perm.perms[static_cast<std::size_t>(b)];
            axis_ops::permute(*p.value, p.shape, a, pi);
            if (p.grad) {
                axis_ops::permute(*p.grad, p.shape, a, pi);
                axis_ops::permute(*p.m, p.shape, a, pi);
                axis_ops::permute(*p.v, p.shape, a, pi);
            }
            if (p.mask) axis_ops::permute(*p.mask, p.shape, a, pi);
        }
    }
    for (std::size_t b = 0; b < perm.perms.size(); ++b) {
        auto& ids = net.channel_ids[b];
        const auto old = ids;
        for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = old[static_cast<std::size_t>(perm.perms[b][k])];
    }
}

/// Sorts every boundary by descending L1 score, in place.
template <class T>
ChannelPermutation sort_channels(LskNetwork<T>& net) {
    ChannelPermutation perm;
    for (const auto& s : boundary_scores(net)) perm.perms.push_back(descending_order(s));
    apply_permutation(net, perm);
    return perm;
}

/// Copy of `net` keeping channels [0, width) at every boundary. Without
/// `optimizer_state` the copy's gradients and moments are zero.
template <class T>
LskNetwork<T> slice_network(LskNetwork<T>& net, std::size_t width, bool optimizer_state = true) {
    if (width > net.width) throw std::invalid_argument("selected width exceeds expanded width");
    NetworkConfig cfg = net.config;
    LskNetwork<T> out(cfg, static_cast<int>(width), false);
    auto src = net.params();
    auto dst = out.params();
    for (std::size_t k = 0; k < src.size(); ++k) {
        const auto& s = src[k];
        auto& d = dst[k];
        axis_ops::for_each_leading(d.shape, s.shape, [&](std::size_t sub, std::size_t full) {
            (*d.value)[sub] = (*s.value)[full];
            if (s.grad && optimizer_state) {
                (*d.grad)[sub] = (*s.grad)[full];
                (*d.m)[sub] = (*s.m)[full];
                (*d.v)[sub] = (*s.v)[full];
            }
            if (s.mask) (*d.mask)[sub] = (*s.mask)[full];
        });
    }
    for (std::size_t b = 0; b < out.channel_ids.size(); ++b)
        std::copy_n(net.channel_ids[b].begin(), width, out.channel_ids[b].begin());
    return out;
}

/// Inference network at base width D: the first D channels at every boundary.
/// Meant to follow sort_channels so the kept channels are the top-D by L1.
template <class T>
LskNetwork<T> select_channels(LskNetwork<T>& net, int base_width) {
    if (base_width < 1 || static_cast<std::size_t>(base_width) > net.width)
        throw std::invalid_argument("selected width exceeds expanded width");
    LskNetwork<T> out = slice_network(net, static_cast<std::size_t>(base_width));
    out.config.width.base_width = base_width;
    out.config.width.width_factor = 1.0;
    return out;
}

/// Adds the gradients of a leading-slice copy back into the full network.
template <class T>
void accumulate_sliced_grads(LskNetwork<T>& full, LskNetwork<T>& sub, T scale = T(1)) {
    auto dst = full.params();
    auto src = sub.params();
    for (std::size_t k = 0; k < dst.size(); ++k) {
        if (!dst[k].grad) continue;
        axis_ops::for_each_leading(src[k].shape, dst[k].shape, [&](std::size_t s, std::size_t f) {
            (*dst[k].grad)[f] += scale * (*src[k].grad)[s];
        });
    }
}

/// Copies the running statistics of a leading-slice copy into the full network.
template <class T>
void copy_sliced_buffers(LskNetwork<T>& full, LskNetwork<T>& sub) {
    auto dst = full.params();
    auto src = sub.params();
    for (std::size_t k = 0; k < dst.size(); ++k) {
        if (dst[k].grad) continue;
        axis_ops::for_each_leading(src[k].shape, dst[k].shape,
                                   [&](std::size_t s, std::size_t f) { (*dst[k].value)[f] = (*src[k].value)[s]; });
    }
}

}  // namespace lsk
