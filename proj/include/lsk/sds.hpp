#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsk/sparse_conv.hpp"

namespace lsk {

/// Spatial-wise dynamic sparsity knobs: target sparsity, prune rate, adaptation period.
struct SparsityConfig {
    double sparsity = 0.4;
    double prune_rate = 0.3;
    int adapt_every = 2000;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(sparsity >= 0.0 && sparsity < 1.0)) throw std::invalid_argument("sparsity must be in [0,1)");
        if (!(prune_rate > 0.0 && prune_rate < 1.0)) throw std::invalid_argument("prune rate must be in (0,1)");
        if (adapt_every < 1) throw std::invalid_argument("adaptation frequency must be >= 1");
    }
    friend bool operator==(const SparsityConfig&, const SparsityConfig&) = default;
};

struct MaskEntry {
    std::size_t flat;  // index into the [slot][out][in] store
    std::size_t group;
    friend bool operator==(const MaskEntry&, const MaskEntry&) = default;
};

/// Positions eliminated (E) and grown (G) by one adaptation.
struct MaskDelta {
    std::vector<MaskEntry> eliminated;
    std::vector<MaskEntry> grown;
    std::vector<std::string> warnings;
};

/// Scaling applied to a group's zero budget:
/// 1 - (D_in + D_out + K1g + K2g + K3g) / (D_in * D_out * K1g * K2g * K3g).
inline double er_scale(std::size_t d_in, std::size_t d_out, const std::array<int, 3>& group_dims) {
    const double num = static_cast<double>(d_in + d_out) + group_dims[0] + group_dims[1] + group_dims[2];
    const double den = static_cast<double>(d_in) * static_cast<double>(d_out) * group_dims[0] * group_dims[1] *
                       group_dims[2];
    return 1.0 - num / den;
}

/// Derives an independent stream seed from a base seed and a tag sequence.
inline std::uint64_t mix_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
    std::uint64_t h = base ^ 0x6A09E667F3BCC909ULL;
    for (auto t : tags) {
        h += 0x9E3779B97F4A7C15ULL + t;
        h = (h ^ (h >> 30)) * 0xBF58476D1CE4E5B9ULL;
        h = (h ^ (h >> 27)) * 0x94D049BB133111EBULL;
        h ^= h >> 31;
    }
    return h;
}

struct MaskInit {
    std::vector<std::uint8_t> mask;
    std::vector<std::size_t> zeros_per_group;
    std::size_t target_zeros = 0;  // rounded layer-level budget
    std::vector<std::string> warnings;
};

/// Per-group zero budgets: round-to-nearest, then a reconciliation pass that
/// moves single units between groups (largest residual first) until the sum
/// matches the rounded layer budget. Budgets are clamped so each group keeps
/// at least one nonzero.
inline std::vector<std::size_t> er_zero_budgets(std::size_t d_out, std::size_t d_in, const GroupPartition& part,
                                                double s, std::size_t* layer_target = nullptr,
                                                std::vector<std::string>* warnings = nullptr) {
    if (!(s >= 0.0 && s < 1.0)) throw std::invalid_argument("sparsity must be in [0,1)");
    const std::size_t groups = part.num_groups();
    std::vector<double> ideal(groups);
    std::vector<std::size_t> size(groups);
    std::vector<long long> budget(groups);
    double total = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
        size[g] = part.group_slots[g].size() * d_out * d_in;
        if (size[g] == 0) throw std::invalid_argument("empty group");
        ideal[g] = s * er_scale(d_in, d_out, part.group_dims[g]) * static_cast<double>(size[g]);
        ideal[g] = std::max(ideal[g], 0.0);
        budget[g] = std::llround(ideal[g]);
        total += ideal[g];
    }
    const long long target = std::llround(total);
    if (layer_target) *layer_target = static_cast<std::size_t>(target);
    long long diff = target - std::accumulate(budget.begin(), budget.end(), 0LL);
    std::vector<std::size_t> order(groups);
    std::iota(order.begin(), order.end(), 0);
    if (diff != 0) {
        const bool up = diff > 0;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double ra = ideal[a] - static_cast<double>(budget[a]);
            const double rb = ideal[b] - static_cast<double>(budget[b]);
            return up ? ra > rb : ra < rb;
        });
        for (std::size_t k = 0; diff != 0 && k < groups; ++k) {
            budget[order[k]] += up ? 1 : -1;
            diff += up ? -1 : 1;
        }
    }
    std::vector<std::size_t> out(groups);
    for (std::size_t g = 0; g < groups; ++g) {
        long long b = std::max(0LL, budget[g]);
        if (b > static_cast<long long>(size[g]) - 1) {
            b = static_cast<long long>(size[g]) - 1;
            if (warnings) warnings->push_back("group " + std::to_string(g) + " zero budget clamped to keep one weight");
        }
        out[g] = static_cast<std::size_t>(b);
    }
    return out;
}

/// ER-scaled random mask: zero positions are sampled uniformly inside each group.
inline MaskInit er_init_mask(std::size_t slots, std::size_t d_out, std::size_t d_in, const GroupPartition& part,
                             double s, std::uint64_t seed) {
    if (slots != part.num_slots()) throw std::invalid_argument("shape mismatch: partition");
    MaskInit res;
    res.zeros_per_group = er_zero_budgets(d_out, d_in, part, s, &res.target_zeros, &res.warnings);
    res.mask.assign(slots * d_out * d_in, 1);
    const std::size_t block = d_out * d_in;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> pos;
    for (std::size_t g = 0; g < part.num_groups(); ++g) {
        pos.clear();
        for (int sl : part.group_slots[g])
            for (std::size_t k = 0; k < block; ++k) pos.push_back(static_cast<std::size_t>(sl) * block + k);
        const std::size_t z = res.zeros_per_group[g];
        for (std::size_t k = 0; k < z; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, pos.size() - 1);
            std::swap(pos[k], pos[pick(rng)]);
            res.mask[pos[k]] = 0;
        }
    }
    return res;
}

/// Hadamard product W_D * M.
template <class T>
std::vector<T> apply_mask(const std::vector<T>& dense, const std::vector<std::uint8_t>& mask) {
    if (dense.size() != mask.size()) throw std::invalid_argument("shape mismatch");
    std::vector<T> out(dense.size());
    for (std::size_t i = 0; i < dense.size(); ++i) out[i] = mask[i] ? dense[i] : T(0);
    return out;
}

/// Removes floor(p * nnz_g) smallest-magnitude active weights from each group,
/// at most caps[g] when caps is given. Ties go to the lower flat index, i.e.
/// (slot, out, in) order.
template <class T>
MaskDelta prune_step(GroupedSparseKernel<T>& kernel, double p, const std::vector<std::size_t>* caps = nullptr) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("prune rate must be in (0,1)");
    MaskDelta delta;
    std::vector<std::pair<double, std::size_t>> active;  // (|w|, flat): a strict total order
    for (std::size_t g = 0; g < kernel.partition.num_groups(); ++g) {
        active.clear();
        kernel.for_each_in_group(g, [&](std::size_t k) {
            if (kernel.mask[k]) active.push_back({std::abs(static_cast<double>(kernel.weight[k])), k});
        });
        auto count = static_cast<std::size_t>(std::floor(p * static_cast<double>(active.size())));
        if (caps && (*caps)[g] < count) {
            delta.warnings.push_back("group " + std::to_string(g) + ": prune count " + std::to_string(count) +
                                     " capped to " + std::to_string((*caps)[g]) + " free zero positions");
            count = (*caps)[g];
        }
        if (count == 0) continue;
        std::nth_element(active.begin(), active.begin() + static_cast<std::ptrdiff_t>(count - 1), active.end());
        // tag with 2, then sweep the group in flat order
        for (std::size_t j = 0; j < count; ++j) kernel.mask[active[j].second] = 2;
        kernel.for_each_in_group(g, [&](std::size_t k) {
            if (kernel.mask[k] != 2) return;
            kernel.mask[k] = 0;
            kernel.weight[k] = T(0);
            delta.eliminated.push_back({k, g});
        });
    }
    return delta;
}

/// Grows |E_g| random zero positions per group, excluding positions pruned in
/// the same adaptation. New weights start at 0.
template <class T>
void regrow_step(GroupedSparseKernel<T>& kernel, MaskDelta& delta, std::uint64_t seed) {
    const std::size_t groups = kernel.partition.num_groups();
    std::vector<std::size_t> quota(groups, 0);
    std::vector<std::uint8_t> just_pruned(kernel.size(), 0);
    for (const auto& e : delta.eliminated) {
        ++quota[e.group];
        just_pruned[e.flat] = 1;
    }
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> eligible;
    for (std::size_t g = 0; g < groups; ++g) {
        if (quota[g] == 0) continue;
        eligible.clear();
        kernel.for_each_in_group(g, [&](std::size_t k) {
            if (!kernel.mask[k] && !just_pruned[k]) eligible.push_back(k);
        });
        std::size_t want = quota[g];
        if (eligible.size() < want) {
            delta.warnings.push_back("group " + std::to_string(g) + ": only " + std::to_string(eligible.size()) +
                                     " eligible zero positions for " + std::to_string(want) + " regrowths");
            want = eligible.size();
        }
        for (std::size_t k = 0; k < want; ++k) {
            std::uniform_int_distribution<std::size_t> pick(k, eligible.size() - 1);
            std::swap(eligible[k], eligible[pick(rng)]);
            kernel.mask[eligible[k]] = 2;
        }
        kernel.for_each_in_group(g, [&](std::size_t k) {
            if (kernel.mask[k] != 2) return;
            kernel.mask[k] = 1;
            kernel.weight[k] = T(0);
            delta.grown.push_back({k, g});
        });
    }
}

/// One prune-then-regrow adaptation. A group prunes at most as many weights
/// as it has zero positions, so every pruned weight can be regrown elsewhere
/// and per-group nonzero counts never change.
template <class T>
MaskDelta sds_update(GroupedSparseKernel<T>& kernel, const SparsityConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::vector<std::size_t> zeros(kernel.partition.num_groups(), 0);
    for (std::size_t g = 0; g < zeros.size(); ++g)
        kernel.for_each_in_group(g, [&](std::size_t k) { zeros[g] += kernel.mask[k] == 0; });
    MaskDelta delta = prune_step(kernel, cfg.prune_rate, &zeros);
    regrow_step(kernel, delta, seed);
    return delta;
}

}  // namespace lsk
