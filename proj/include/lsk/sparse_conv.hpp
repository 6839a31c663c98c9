#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "lsk/parallel.hpp"
#include "lsk/tensor.hpp"
#include "lsk/voxel.hpp"

namespace lsk {

/// Splits the K1xK2xK3 offset lattice into axis-aligned blocks ("spatial groups").
/// Groups are numbered lexicographically over (gx, gy, gz), z fastest.
struct GroupPartition {
    std::array<int, 3> kernel{1, 1, 1};
    std::array<std::vector<int>, 3> divisions;
    std::vector<int> slot_group;
    std::vector<std::array<int, 3>> group_dims;
    std::vector<std::vector<int>> group_slots;

    std::size_t num_slots() const { return slot_group.size(); }
    std::size_t num_groups() const { return group_dims.size(); }

    friend bool operator==(const GroupPartition& a, const GroupPartition& b) {
        return a.kernel == b.kernel && a.divisions == b.divisions;
    }
};

inline GroupPartition partition_groups(std::array<int, 3> kernel, std::array<std::vector<int>, 3> divisions) {
    kernel_offsets(kernel[0], kernel[1], kernel[2]);  // validates sizes
    GroupPartition p;
    p.kernel = kernel;
    p.divisions = divisions;
    std::array<std::vector<int>, 3> axis_group;  // per-axis coordinate -> division index
    for (int a = 0; a < 3; ++a) {
        if (divisions[a].empty()) throw std::invalid_argument("bad partition");
        int sum = 0;
        for (std::size_t j = 0; j < divisions[a].size(); ++j) {
            const int d = divisions[a][j];
            if (d <= 0) throw std::invalid_argument("bad partition");
            for (int k = 0; k < d; ++k) axis_group[a].push_back(static_cast<int>(j));
            sum += d;
        }
        if (sum != kernel[a]) throw std::invalid_argument("bad partition");
    }
    const int gx = static_cast<int>(divisions[0].size());
    const int gy = static_cast<int>(divisions[1].size());
    const int gz = static_cast<int>(divisions[2].size());
    for (int i = 0; i < gx; ++i)
        for (int j = 0; j < gy; ++j)
            for (int k = 0; k < gz; ++k) p.group_dims.push_back({divisions[0][i], divisions[1][j], divisions[2][k]});
    p.group_slots.resize(p.group_dims.size());
    for (int x = 0; x < kernel[0]; ++x)
        for (int y = 0; y < kernel[1]; ++y)
            for (int z = 0; z < kernel[2]; ++z) {
                const int g = (axis_group[0][x] * gy + axis_group[1][y]) * gz + axis_group[2][z];
                p.group_slots[static_cast<std::size_t>(g)].push_back(static_cast<int>(p.slot_group.size()));
                p.slot_group.push_back(g);
            }
    return p;
}

inline GroupPartition partition_groups(int k, const std::vector<int>& divisions) {
    return partition_groups({k, k, k}, {divisions, divisions, divisions});
}

/// The whole lattice as a single group.
inline GroupPartition single_group(int k) { return partition_groups(k, {k}); }

/// Dense weights [slot][out][in] with a same-shaped 0/1 mask.
/// Invariant: weight is exactly zero wherever mask is zero.
template <class T>
struct GroupedSparseKernel {
    std::size_t slots = 0;
    std::size_t d_out = 0;
    std::size_t d_in = 0;
    std::vector<T> weight;
    std::vector<std::uint8_t> mask;
    GroupPartition partition;

    GroupedSparseKernel() = default;
    GroupedSparseKernel(GroupPartition part, std::size_t out, std::size_t in)
        : slots(part.num_slots()), d_out(out), d_in(in), partition(std::move(part)) {
        weight.assign(slots * d_out * d_in, T(0));
        mask.assign(weight.size(), 1);
    }

    std::size_t block() const { return d_out * d_in; }
    std::size_t size() const { return weight.size(); }
    std::size_t index(std::size_t slot, std::size_t o, std::size_t i) const { return (slot * d_out + o) * d_in + i; }
    std::size_t group_of(std::size_t flat) const {
        return static_cast<std::size_t>(partition.slot_group[flat / block()]);
    }
    std::size_t group_size(std::size_t g) const { return partition.group_slots[g].size() * block(); }

    std::size_t nonzero() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

    std::vector<std::size_t> nonzero_per_group() const {
        std::vector<std::size_t> n(partition.num_groups(), 0);
        for (std::size_t s = 0; s < slots; ++s) {
            const auto g = static_cast<std::size_t>(partition.slot_group[s]);
            n[g] += static_cast<std::size_t>(std::count(mask.begin() + static_cast<std::ptrdiff_t>(s * block()),
                                                        mask.begin() + static_cast<std::ptrdiff_t>((s + 1) * block()), 1));
        }
        return n;
    }

    /// True iff weight is zero at every masked-off position.
    bool mask_consistent() const {
        for (std::size_t k = 0; k < weight.size(); ++k)
            if (mask[k] == 0 && weight[k] != T(0)) return false;
        return true;
    }

    void apply_mask() {
        for (std::size_t k = 0; k < weight.size(); ++k)
            if (mask[k] == 0) weight[k] = T(0);
    }

    /// Flat indices of the group's positions in (slot, out, in) order.
    template <class F>
    void for_each_in_group(std::size_t g, F&& f) const {
        for (int s : partition.group_slots[g]) {
            const std::size_t base = static_cast<std::size_t>(s) * block();
            for (std::size_t k = 0; k < block(); ++k) f(base + k);
        }
    }
};

/// Forward-pass record needed by the adjoint.
template <class T>
struct ConvTape {
    Matrix<T> input;
    std::shared_ptr<const NeighborMap> nmap;
    std::vector<std::uint8_t> mask;
    std::size_t slots = 0, d_out = 0, d_in = 0;
};

template <class T>
struct ConvGrads {
    Matrix<T> grad_in;
    std::vector<T> grad_weight;
};

namespace detail {

/// Floats per 64-byte tile; inner loops run over whole tiles of zero-padded operands.
template <class T>
inline constexpr std::size_t kLanes = 64 / sizeof(T);

inline std::size_t round_up(std::size_t a, std::size_t b) { return (a + b - 1) / b * b; }

/// Row-major copy with the row stride padded to `ld` (extra columns zero).
/// With `order`, column j of the copy is column order[j] of m.
template <class T>
std::vector<T> pad_rows(const Matrix<T>& m, std::size_t ld, const std::vector<int>* order = nullptr) {
    std::vector<T> out(m.rows * ld, T(0));
    for (std::size_t r = 0; r < m.rows; ++r) {
        const T* src = m.data.data() + r * m.cols;
        T* dst = out.data() + r * ld;
        if (order)
            for (std::size_t j = 0; j < m.cols; ++j) dst[j] = src[static_cast<std::size_t>((*order)[j])];
        else
            std::copy_n(src, m.cols, dst);
    }
    return out;
}

template <class T>
Matrix<T> unpad_rows(const std::vector<T>& buf, std::size_t rows, std::size_t cols, std::size_t ld) {
    Matrix<T> m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(buf.data() + r * ld, cols, m.data.data() + r * cols);
    return m;
}

/// Neighbor pairs regrouped by slot: (center row, neighbor row), center rows ascending.
struct SlotMajor {
    std::vector<std::size_t> start;
    std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
};

inline SlotMajor slot_major(const NeighborMap& nmap) {
    SlotMajor sm;
    sm.start.assign(nmap.num_slots + 1, 0);
    for (const auto& p : nmap.pairs) ++sm.start[static_cast<std::size_t>(p.slot) + 1];
    std::partial_sum(sm.start.begin(), sm.start.end(), sm.start.begin());
    sm.pairs.resize(nmap.num_pairs());
    auto cursor = sm.start;
    for (std::size_t c = 0; c < nmap.rows(); ++c)
        for (const auto& p : nmap.of(c))
            sm.pairs[cursor[static_cast<std::size_t>(p.slot)]++] = {static_cast<std::int32_t>(c), p.row};
    return sm;
}

/// Per slot, (W * M) laid out [slot][in][ld_out] (ld_out padded), so that
/// y[c] += x[r] * block; row j holds input channel in_order[j] when given.
/// With `transposed` the block is [out][ld_in] instead and slot s holds the
/// kernel of the opposite slot (adjoint direction).
template <class T>
std::vector<T> packed_blocks(const GroupedSparseKernel<T>& k, bool transposed, std::size_t ld,
                             const std::vector<int>* in_order = nullptr) {
    const std::size_t rows = transposed ? k.d_out : k.d_in;
    const std::size_t block = k.block();
    std::vector<T> w(k.slots * rows * ld, T(0));
    for (std::size_t s = 0; s < k.slots; ++s) {
        const std::size_t src_slot = transposed ? k.slots - 1 - s : s;
        const T* src = k.weight.data() + src_slot * block;
        const std::uint8_t* m = k.mask.data() + src_slot * block;
        T* dst = w.data() + s * rows * ld;
        for (std::size_t o = 0; o < k.d_out; ++o) {
            const T* so = src + o * k.d_in;
            const std::uint8_t* mo = m + o * k.d_in;
            if (transposed) {
                T* d = dst + o * ld;
                for (std::size_t i = 0; i < k.d_in; ++i) d[i] = mo[i] ? so[i] : T(0);
            } else {
                for (std::size_t j = 0; j < k.d_in; ++j) {
                    const std::size_t i = in_order ? static_cast<std::size_t>((*in_order)[j]) : j;
                    dst[j * ld + o] = mo[i] ? so[i] : T(0);
                }
            }
        }
    }
    return w;
}

template <class T>
struct Tile {
    typedef T type __attribute__((vector_size(64)));
};
template <class T>
using tile_t = typename Tile<T>::type;

template <class T>
inline tile_t<T> load_tile(const T* p) {
    tile_t<T> v;
    std::memcpy(&v, p, sizeof(v));
    return v;
}
template <class T>
inline void store_tile(T* p, const tile_t<T>& v) {
    std::memcpy(p, &v, sizeof(v));
}

/// Rows yr[0..R) += xr[j] * W over `NT` tiles starting at column o0.
template <class T, int R, int NT>
inline void gemm_block(T* const* yr, const T* const* xr, const T* w, std::size_t ldy, std::size_t d, std::size_t o0) {
    using V = tile_t<T>;
    constexpr std::size_t L = kLanes<T>;
    V acc[R][NT];
    for (int j = 0; j < R; ++j)
        for (int t = 0; t < NT; ++t) acc[j][t] = load_tile(yr[j] + o0 + t * L);
    for (std::size_t i = 0; i < d; ++i) {
        V wi[NT];
        for (int t = 0; t < NT; ++t) wi[t] = load_tile(w + i * ldy + o0 + t * L);
        for (int j = 0; j < R; ++j) {
            const T xv = xr[j][i];
            for (int t = 0; t < NT; ++t) acc[j][t] += xv * wi[t];
        }
    }
    for (int j = 0; j < R; ++j)
        for (int t = 0; t < NT; ++t) store_tile(yr[j] + o0 + t * L, acc[j][t]);
}

template <class T, int R>
inline void gemm_rows(T* const* yr, const T* const* xr, const T* w, std::size_t ldy, std::size_t d) {
    constexpr std::size_t L = kLanes<T>;
    std::size_t o0 = 0;
    for (; o0 + 4 * L <= ldy; o0 += 4 * L) gemm_block<T, R, 4>(yr, xr, w, ldy, d, o0);
    switch ((ldy - o0) / L) {
        case 3: gemm_block<T, R, 3>(yr, xr, w, ldy, d, o0); break;
        case 2: gemm_block<T, R, 2>(yr, xr, w, ldy, d, o0); break;
        case 1: gemm_block<T, R, 1>(yr, xr, w, ldy, d, o0); break;
        default: break;
    }
}

/// y[c] += x[r] * W for pairs (c, r); W is [d][ldy]. Each y element gets its
/// terms in ascending input-channel order.
template <class T>
void gather_gemm(T* y, std::size_t ldy, const T* x, std::size_t ldx, const T* w, std::size_t d,
                 const std::pair<std::int32_t, std::int32_t>* pr, std::size_t np) {
    std::size_t k = 0;
    T* yr[4];
    const T* xr[4];
    for (; k + 4 <= np; k += 4) {
        for (int j = 0; j < 4; ++j) {
            yr[j] = y + static_cast<std::size_t>(pr[k + j].first) * ldy;
            xr[j] = x + static_cast<std::size_t>(pr[k + j].second) * ldx;
        }
        gemm_rows<T, 4>(yr, xr, w, ldy, d);
    }
    for (; k < np; ++k) {
        yr[0] = y + static_cast<std::size_t>(pr[k].first) * ldy;
        xr[0] = x + static_cast<std::size_t>(pr[k].second) * ldx;
        gemm_rows<T, 1>(yr, xr, w, ldy, d);
    }
}

/// gw[o][i] += g[c][o] * x[r][i] over pairs (c, r), pairs in list order.
/// gw is [rows][ldx] with rows a multiple of 4 and <= ldg.
template <class T>
void outer_accumulate(T* gw, std::size_t rows, const T* g, std::size_t ldg, const T* x, std::size_t ldx,
                      const std::pair<std::int32_t, std::int32_t>* pr, std::size_t np) {
    using V = tile_t<T>;
    constexpr std::size_t L = kLanes<T>;
    for (std::size_t o0 = 0; o0 < rows; o0 += 4)
        for (std::size_t i0 = 0; i0 < ldx; i0 += L) {
            T* r0 = gw + o0 * ldx + i0;
            V a0 = load_tile(r0), a1 = load_tile(r0 + ldx), a2 = load_tile(r0 + 2 * ldx), a3 = load_tile(r0 + 3 * ldx);
            for (std::size_t k = 0; k < np; ++k) {
                const T* gr = g + static_cast<std::size_t>(pr[k].first) * ldg + o0;
                const V xv = load_tile(x + static_cast<std::size_t>(pr[k].second) * ldx + i0);
                a0 += gr[0] * xv;
                a1 += gr[1] * xv;
                a2 += gr[2] * xv;
                a3 += gr[3] * xv;
            }
            store_tile(r0, a0);
            store_tile(r0 + ldx, a1);
            store_tile(r0 + 2 * ldx, a2);
            store_tile(r0 + 3 * ldx, a3);
        }
}

/// y[c] += sum over slots (ascending) of x[r] * block(slot). Rows are split
/// into contiguous per-thread ranges, so each output row has one owner and
/// its accumulation order does not depend on the thread count.
template <class T>
void slot_major_apply(std::vector<T>& y, std::size_t ldy, const std::vector<T>& x, std::size_t ldx,
                      const std::vector<T>& blocks, std::size_t d, std::size_t rows, const SlotMajor& sm) {
    const std::size_t slots = sm.start.size() - 1;
    const std::size_t block = d * ldy;
#pragma omp parallel
    {
#ifdef _OPENMP
        const auto nt = static_cast<std::size_t>(omp_get_num_threads());
        const auto t = static_cast<std::size_t>(omp_get_thread_num());
#else
        const std::size_t nt = 1, t = 0;
#endif
        const auto lo = static_cast<std::int32_t>(rows * t / nt);
        const auto hi = static_cast<std::int32_t>(rows * (t + 1) / nt);
        for (std::size_t s = 0; s < slots; ++s) {
            const auto* b = sm.pairs.data() + sm.start[s];
            const auto* e = sm.pairs.data() + sm.start[s + 1];
            const auto* first = std::lower_bound(b, e, lo, [](const auto& p, std::int32_t v) { return p.first < v; });
            const auto* last = std::lower_bound(first, e, hi, [](const auto& p, std::int32_t v) { return p.first < v; });
            if (first != last)
                gather_gemm(y.data(), ldy, x.data(), ldx, blocks.data() + s * block, d, first,
                            static_cast<std::size_t>(last - first));
        }
    }
}

}  // namespace detail

/// out[c] = sum over (slot, r) in nmap(c) of W_slot x[r], accumulated in slot
/// order, then input-channel order (in_order[0], in_order[1], ... when given).
template <class T>
Matrix<T> conv_forward_features(const Matrix<T>& x, const GroupedSparseKernel<T>& kernel, const NeighborMap& nmap,
                                const std::vector<int>* in_order = nullptr) {
    if (x.cols != kernel.d_in || nmap.rows() != x.rows || nmap.num_slots != kernel.slots)
        throw std::invalid_argument("shape mismatch");
    if (in_order && in_order->size() != kernel.d_in) throw std::invalid_argument("shape mismatch");
    constexpr std::size_t L = detail::kLanes<T>;
    const std::size_t ldx = detail::round_up(kernel.d_in, L), ldy = detail::round_up(kernel.d_out, L);
    const auto w = detail::packed_blocks(kernel, false, ldy, in_order);
    const auto xp = detail::pad_rows(x, ldx, in_order);
    std::vector<T> y(x.rows * ldy, T(0));
    detail::slot_major_apply(y, ldy, xp, ldx, w, kernel.d_in, x.rows, detail::slot_major(nmap));
    return detail::unpad_rows(y, x.rows, kernel.d_out, ldy);
}

template <class T>
SparseTensor3D<T> subm_conv_forward(const SparseTensor3D<T>& x, const GroupedSparseKernel<T>& kernel,
                                    const NeighborMap& nmap) {
    return SparseTensor3D<T>(x.coords, conv_forward_features(x.feats, kernel, nmap));
}

template <class T>
std::pair<SparseTensor3D<T>, ConvTape<T>> subm_conv_forward_taped(const SparseTensor3D<T>& x,
                                                                  const GroupedSparseKernel<T>& kernel,
                                                                  std::shared_ptr<const NeighborMap> nmap) {
    auto out = subm_conv_forward(x, kernel, *nmap);
    ConvTape<T> tape{x.feats, std::move(nmap), kernel.mask, kernel.slots, kernel.d_out, kernel.d_in};
    return {std::move(out), std::move(tape)};
}

/// Adjoint of conv_forward_features. grad_in uses the neighbor-map symmetry
/// (a -i-> b iff b -(-i)-> a) so each input row is owned by one thread;
/// grad_weight is accumulated per slot. Both reductions run in a fixed order.
template <class T>
ConvGrads<T> conv_backward_features(const Matrix<T>& grad_out, const Matrix<T>& input,
                                    const GroupedSparseKernel<T>& kernel, const NeighborMap& nmap,
                                    bool want_grad_in = true, bool want_grad_weight = true) {
    if (grad_out.rows != input.rows || grad_out.cols != kernel.d_out || input.cols != kernel.d_in ||
        nmap.rows() != input.rows || nmap.num_slots != kernel.slots)
        throw std::invalid_argument("shape mismatch");
    constexpr std::size_t L = detail::kLanes<T>;
    const std::size_t d_in = kernel.d_in, d_out = kernel.d_out, n = input.rows;
    const std::size_t ldi = detail::round_up(d_in, L), ldo = detail::round_up(d_out, L);
    const auto sm = detail::slot_major(nmap);
    const auto gp = detail::pad_rows(grad_out, ldo);
    ConvGrads<T> g;

    if (want_grad_in) {
        const auto w = detail::packed_blocks(kernel, true, ldi);
        std::vector<T> gi(n * ldi, T(0));
        detail::slot_major_apply(gi, ldi, gp, ldo, w, d_out, n, sm);
        g.grad_in = detail::unpad_rows(gi, n, d_in, ldi);
    }

    if (!want_grad_weight) return g;

    const auto xp = detail::pad_rows(input, ldi);
    const std::size_t rows4 = detail::round_up(d_out, 4);
    const std::size_t block = kernel.block();
    g.grad_weight.assign(kernel.size(), T(0));
#pragma omp parallel
    {
        std::vector<T> tile(rows4 * ldi);
#pragma omp for schedule(dynamic, 1)
        for (std::int64_t s = 0; s < static_cast<std::int64_t>(kernel.slots); ++s) {
            const auto su = static_cast<std::size_t>(s);
            std::fill(tile.begin(), tile.end(), T(0));
            detail::outer_accumulate(tile.data(), rows4, gp.data(), ldo, xp.data(), ldi, sm.pairs.data() + sm.start[su],
                                     sm.start[su + 1] - sm.start[su]);
            T* gw = g.grad_weight.data() + su * block;
            const std::uint8_t* m = kernel.mask.data() + su * block;
            for (std::size_t o = 0; o < d_out; ++o)
                for (std::size_t i = 0; i < d_in; ++i) gw[o * d_in + i] = m[o * d_in + i] ? tile[o * ldi + i] : T(0);
        }
    }
    return g;
}

template <class T>
ConvGrads<T> subm_conv_backward(const Matrix<T>& grad_out, const ConvTape<T>& tape,
                                const GroupedSparseKernel<T>& kernel) {
    if (!tape.nmap || tape.slots != kernel.slots || tape.d_out != kernel.d_out || tape.d_in != kernel.d_in ||
        tape.mask != kernel.mask)
        throw std::invalid_argument("stale tape");
    if (grad_out.rows != tape.input.rows) throw std::invalid_argument("shape mismatch");
    return conv_backward_features(grad_out, tape.input, kernel, *tape.nmap);
}

}  // namespace lsk
