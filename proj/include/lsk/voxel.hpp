#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "lsk/tensor.hpp"

namespace lsk {

struct Coord3 {
    std::int32_t x = 0;
    std::int32_t y = 0;
    std::int32_t z = 0;

    friend bool operator==(const Coord3&, const Coord3&) = default;
    friend auto operator<=>(const Coord3&, const Coord3&) = default;
    Coord3 operator+(const Coord3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Coord3 operator-(const Coord3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Coord3 operator-() const { return {-x, -y, -z}; }
};

/// splitmix64 finalizer over the packed coordinate. Fixed, so neighbor maps
/// are identical from run to run.
struct Coord3Hash {
    std::size_t operator()(const Coord3& c) const noexcept {
        std::uint64_t h = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.x)) * 0x9E3779B97F4A7C15ULL) ^
                          (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.y)) << 21) ^
                          (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.z)) << 42);
        h ^= h >> 30;
        h *= 0xBF58476D1CE4E5B9ULL;
        h ^= h >> 27;
        h *= 0x94D049BB133111EBULL;
        h ^= h >> 31;
        return static_cast<std::size_t>(h);
    }
};

/// Active voxel coordinates paired with one feature row each.
template <class T>
struct SparseTensor3D {
    std::vector<Coord3> coords;
    Matrix<T> feats;

    SparseTensor3D() = default;
    SparseTensor3D(std::vector<Coord3> c, Matrix<T> f) : coords(std::move(c)), feats(std::move(f)) {
        if (feats.rows != coords.size()) throw std::invalid_argument("shape mismatch: feats rows != coords");
    }

    std::size_t size() const { return coords.size(); }
    std::size_t channels() const { return feats.cols; }

    template <class U>
    SparseTensor3D<U> cast() const {
        return SparseTensor3D<U>(coords, feats.template cast<U>());
    }
};

/// Coordinate -> row lookup.
class CoordIndex {
public:
    CoordIndex() = default;

    explicit CoordIndex(std::span<const Coord3> coords) {
        map_.reserve(coords.size() * 2);
        for (std::size_t r = 0; r < coords.size(); ++r) {
            auto [it, inserted] = map_.emplace(coords[r], static_cast<std::int32_t>(r));
            if (!inserted) throw std::invalid_argument("duplicate coordinate");
        }
    }

    std::optional<std::int32_t> find(const Coord3& c) const {
        auto it = map_.find(c);
        if (it == map_.end()) return std::nullopt;
        return it->second;
    }

    std::size_t size() const { return map_.size(); }

private:
    std::unordered_map<Coord3, std::int32_t, Coord3Hash> map_;
};

template <class T>
CoordIndex build_index(const SparseTensor3D<T>& t) {
    return CoordIndex(t.coords);
}

/// Kernel offset lattice, lexicographic with z fastest. Because the lattice
/// is centered, slot s and slot (size-1-s) are negations of each other.
struct OffsetList {
    std::array<int, 3> kernel{1, 1, 1};
    std::vector<Coord3> offsets;

    std::size_t size() const { return offsets.size(); }
    int center_slot() const { return static_cast<int>(offsets.size() / 2); }
    int opposite(int slot) const { return static_cast<int>(offsets.size()) - 1 - slot; }

    int slot_of(const Coord3& o) const {
        const int hx = kernel[0] / 2, hy = kernel[1] / 2, hz = kernel[2] / 2;
        if (std::abs(o.x) > hx || std::abs(o.y) > hy || std::abs(o.z) > hz) return -1;
        return ((o.x + hx) * kernel[1] + (o.y + hy)) * kernel[2] + (o.z + hz);
    }
};

inline OffsetList kernel_offsets(int k1, int k2, int k3) {
    for (int k : {k1, k2, k3})
        if (k < 1 || k % 2 == 0) throw std::invalid_argument("invalid kernel size");
    OffsetList out;
    out.kernel = {k1, k2, k3};
    out.offsets.reserve(static_cast<std::size_t>(k1) * k2 * k3);
    for (int x = -(k1 / 2); x <= k1 / 2; ++x)
        for (int y = -(k2 / 2); y <= k2 / 2; ++y)
            for (int z = -(k3 / 2); z <= k3 / 2; ++z) out.offsets.push_back({x, y, z});
    return out;
}

inline OffsetList kernel_offsets(int k) { return kernel_offsets(k, k, k); }

struct NeighborPair {
    std::int32_t slot;
    std::int32_t row;
    friend bool operator==(const NeighborPair&, const NeighborPair&) = default;
};

/// CSR list of (offset slot, input row) per output row, in slot order.
struct NeighborMap {
    std::size_t num_slots = 0;
    std::vector<std::size_t> row_ptr{0};
    std::vector<NeighborPair> pairs;

    std::size_t rows() const { return row_ptr.size() - 1; }
    std::span<const NeighborPair> of(std::size_t r) const {
        return {pairs.data() + row_ptr[r], row_ptr[r + 1] - row_ptr[r]};
    }
    std::size_t num_pairs() const { return pairs.size(); }

    /// Pair count per slot across all rows.
    std::vector<std::size_t> slot_histogram() const {
        std::vector<std::size_t> h(num_slots, 0);
        for (const auto& p : pairs) ++h[static_cast<std::size_t>(p.slot)];
        return h;
    }
};

template <class T>
NeighborMap gather_neighbors(const CoordIndex& index, const SparseTensor3D<T>& tensor, const OffsetList& offsets) {
    const std::size_t n = tensor.size();
    NeighborMap map;
    map.num_slots = offsets.size();
    std::vector<std::vector<NeighborPair>> per_row(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < static_cast<std::int64_t>(n); ++r) {
        auto& list = per_row[static_cast<std::size_t>(r)];
        const Coord3 c = tensor.coords[static_cast<std::size_t>(r)];
        for (std::size_t s = 0; s < offsets.size(); ++s) {
            if (auto hit = index.find(c + offsets.offsets[s])) list.push_back({static_cast<std::int32_t>(s), *hit});
        }
    }
    map.row_ptr.assign(n + 1, 0);
    for (std::size_t r = 0; r < n; ++r) map.row_ptr[r + 1] = map.row_ptr[r] + per_row[r].size();
    map.pairs.resize(map.row_ptr[n]);
    for (std::size_t r = 0; r < n; ++r)
        std::copy(per_row[r].begin(), per_row[r].end(), map.pairs.begin() + static_cast<std::ptrdiff_t>(map.row_ptr[r]));
    return map;
}

template <class T>
NeighborMap gather_neighbors(const SparseTensor3D<T>& tensor, const OffsetList& offsets) {
    return gather_neighbors(build_index(tensor), tensor, offsets);
}

/// For every input point, the row of the voxel it fell into.
struct PointVoxelMap {
    std::vector<std::int32_t> point_to_voxel;
    double voxel_size = 0.0;
    std::size_t num_voxels = 0;
};

template <class T>
struct Voxelized {
    SparseTensor3D<T> tensor;
    PointVoxelMap map;
};

/// Mean-reduces point features into voxels of edge `voxel_size`. Voxel rows
/// appear in order of first occupying point.
template <class T>
Voxelized<T> voxelize(std::span<const std::array<double, 3>> points, const Matrix<T>& point_feats, double voxel_size) {
    if (points.empty()) throw std::invalid_argument("empty input");
    if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw std::invalid_argument("invalid voxel size");
    if (point_feats.rows != points.size()) throw std::invalid_argument("shape mismatch: point features");
    for (const auto& p : points)
        for (double v : p)
            if (!std::isfinite(v)) throw std::invalid_argument("non-finite input");
    for (const T& v : point_feats.data)
        if (!std::isfinite(static_cast<double>(v))) throw std::invalid_argument("non-finite input");

    const std::size_t d = point_feats.cols;
    std::unordered_map<Coord3, std::int32_t, Coord3Hash> rows;
    std::vector<Coord3> coords;
    std::vector<double> sums;
    std::vector<std::size_t> counts;
    PointVoxelMap map;
    map.voxel_size = voxel_size;
    map.point_to_voxel.resize(points.size());

    for (std::size_t i = 0; i < points.size(); ++i) {
        const Coord3 c{static_cast<std::int32_t>(std::floor(points[i][0] / voxel_size)),
                       static_cast<std::int32_t>(std::floor(points[i][1] / voxel_size)),
                       static_cast<std::int32_t>(std::floor(points[i][2] / voxel_size))};
        auto [it, inserted] = rows.emplace(c, static_cast<std::int32_t>(coords.size()));
        if (inserted) {
            coords.push_back(c);
            sums.resize(sums.size() + d, 0.0);
            counts.push_back(0);
        }
        const auto r = static_cast<std::size_t>(it->second);
        map.point_to_voxel[i] = it->second;
        ++counts[r];
        for (std::size_t k = 0; k < d; ++k) sums[r * d + k] += static_cast<double>(point_feats(i, k));
    }

    Matrix<T> feats(coords.size(), d);
    for (std::size_t r = 0; r < coords.size(); ++r)
        for (std::size_t k = 0; k < d; ++k)
            feats(r, k) = static_cast<T>(sums[r * d + k] / static_cast<double>(counts[r]));
    map.num_voxels = coords.size();
    return {SparseTensor3D<T>(std::move(coords), std::move(feats)), std::move(map)};
}

/// Copies each point's voxel row. Stand-in for a learned point branch.
template <class T>
Matrix<T> devoxelize(const Matrix<T>& voxel_feats, const PointVoxelMap& map) {
    Matrix<T> out(map.point_to_voxel.size(), voxel_feats.cols);
    for (std::size_t i = 0; i < map.point_to_voxel.size(); ++i) {
        const auto v = map.point_to_voxel[i];
        if (v < 0 || static_cast<std::size_t>(v) >= voxel_feats.rows) throw std::invalid_argument("invalid map");
        const auto src = voxel_feats.row(static_cast<std::size_t>(v));
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

template <class T>
Matrix<T> devoxelize(const SparseTensor3D<T>& tensor, const PointVoxelMap& map) {
    return devoxelize(tensor.feats, map);
}

/// Adjoint of devoxelize: per-point gradients summed into their voxel.
template <class T>
Matrix<T> devoxelize_backward(const Matrix<T>& point_grad, const PointVoxelMap& map, std::size_t num_voxels) {
    Matrix<T> out(num_voxels, point_grad.cols);
    for (std::size_t i = 0; i < map.point_to_voxel.size(); ++i) {
        const auto v = static_cast<std::size_t>(map.point_to_voxel[i]);
        auto dst = out.row(v);
        auto src = point_grad.row(i);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    return out;
}

}  // namespace lsk
