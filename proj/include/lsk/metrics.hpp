#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsk/network.hpp"
#include "lsk/voxel.hpp"

namespace lsk {

/// counts[truth][pred].
struct ConfusionMatrix {
    std::size_t num_classes = 0;
    std::vector<std::uint64_t> counts;

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(std::size_t c) : num_classes(c), counts(c * c, 0) {}

    std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * num_classes + pred]; }
    std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * num_classes + pred]; }

    void add(std::size_t truth, std::size_t pred) {
        if (truth >= num_classes || pred >= num_classes) throw std::invalid_argument("label out of range");
        ++at(truth, pred);
    }
    void merge(const ConfusionMatrix& o) {
        if (o.num_classes != num_classes) throw std::invalid_argument("class count mismatch");
        for (std::size_t k = 0; k < counts.size(); ++k) counts[k] += o.counts[k];
    }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
};

struct MiouResult {
    std::vector<double> iou;      // NaN for classes absent from truth and prediction
    std::vector<bool> present;
    std::vector<std::uint64_t> tp, fp, fn;
    double mean = 0.0;
};

inline MiouResult miou(const ConfusionMatrix& cm) {
    const std::size_t c = cm.num_classes;
    MiouResult r;
    r.iou.assign(c, std::numeric_limits<double>::quiet_NaN());
    r.present.assign(c, false);
    r.tp.assign(c, 0);
    r.fp.assign(c, 0);
    r.fn.assign(c, 0);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < c; ++k) {
        r.tp[k] = cm.at(k, k);
        for (std::size_t j = 0; j < c; ++j) {
            if (j == k) continue;
            r.fp[k] += cm.at(j, k);
            r.fn[k] += cm.at(k, j);
        }
        const auto denom = r.tp[k] + r.fp[k] + r.fn[k];
        if (denom == 0) continue;
        r.present[k] = true;
        r.iou[k] = static_cast<double>(r.tp[k]) / static_cast<double>(denom);
        sum += r.iou[k];
        ++n;
    }
    if (n == 0) throw std::invalid_argument("no classes present");
    r.mean = sum / static_cast<double>(n);
    return r;
}

/// A voxelized scene ready for the network.
template <class T>
struct Sample {
    SparseTensor3D<T> tensor;
    PointVoxelMap points;
    std::vector<int> labels;  // per point
    std::shared_ptr<const NeighborMap> nmap;
};

template <class T>
std::size_t argmax_row(const Matrix<T>& m, std::size_t r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < m.cols; ++k)
        if (m(r, k) > m(r, best)) best = k;
    return best;
}

/// Point-level confusion of the network in eval mode.
template <class T>
ConfusionMatrix evaluate(LskNetwork<T>& net, const std::vector<Sample<T>>& samples) {
    ConfusionMatrix cm(static_cast<std::size_t>(net.config.num_classes));
    for (const auto& s : samples) {
        const Matrix<T> logits = net.forward(s.tensor.feats, *s.nmap, Mode::eval);
        std::vector<std::size_t> pred(logits.rows);
        for (std::size_t r = 0; r < logits.rows; ++r) pred[r] = argmax_row(logits, r);
        for (std::size_t i = 0; i < s.labels.size(); ++i)
            cm.add(static_cast<std::size_t>(s.labels[i]), pred[static_cast<std::size_t>(s.points.point_to_voxel[i])]);
    }
    return cm;
}

/// Parameter and FLOPs accounting. FLOPs are 2 x multiply-accumulates over
/// realized neighbor pairs and nonzero weights.
struct CostReport {
    struct Row {
        std::string layer;
        std::uint64_t dense_params = 0;
        std::uint64_t nnz_params = 0;
        std::uint64_t flops = 0;
        friend bool operator==(const Row&, const Row&) = default;
    };
    std::vector<Row> rows;

    Row total() const {
        Row t{"total"};
        for (const auto& r : rows) {
            t.dense_params += r.dense_params;
            t.nnz_params += r.nnz_params;
            t.flops += r.flops;
        }
        return t;
    }
    const Row* find(const std::string& layer) const {
        for (const auto& r : rows)
            if (r.layer == layer) return &r;
        return nullptr;
    }
};

inline std::string layer_of(const std::string& param_name) {
    const auto dot = param_name.rfind('.');
    return dot == std::string::npos ? param_name : param_name.substr(0, dot);
}

/// Dense and nonzero parameter counts per layer (running statistics excluded).
template <class T>
CostReport count_params(LskNetwork<T>& net) {
    CostReport rep;
    for (const auto& p : net.params()) {
        if (!p.trainable()) continue;
        const std::string layer = layer_of(p.name);
        if (rep.rows.empty() || rep.rows.back().layer != layer) rep.rows.push_back({layer});
        auto& row = rep.rows.back();
        row.dense_params += p.value->size();
        row.nnz_params += p.mask ? static_cast<std::uint64_t>(std::count(p.mask->begin(), p.mask->end(), 1))
                                 : p.value->size();
    }
    return rep;
}

/// 2 * sum over realized (row, slot) pairs of the slot block's nonzero count.
template <class T>
std::uint64_t conv_flops(const GroupedSparseKernel<T>& k, const NeighborMap& nmap) {
    const auto hist = nmap.slot_histogram();
    std::uint64_t flops = 0;
    for (std::size_t s = 0; s < k.slots; ++s) {
        const auto nnz = static_cast<std::uint64_t>(
            std::count(k.mask.begin() + static_cast<std::ptrdiff_t>(s * k.block()),
                       k.mask.begin() + static_cast<std::ptrdiff_t>((s + 1) * k.block()), 1));
        flops += 2 * nnz * hist[s];
    }
    return flops;
}

/// count_params plus per-layer FLOPs on one scene's neighbor map.
template <class T>
CostReport count_flops(LskNetwork<T>& net, const NeighborMap& nmap) {
    CostReport rep = count_params(net);
    const auto n = static_cast<std::uint64_t>(nmap.rows());
    for (auto& row : rep.rows) {
        if (row.layer == "stem" || row.layer == "head") {
            const auto& l = row.layer == "stem" ? net.stem : net.head;
            row.flops = 2 * n * l.weight.value.size();
        }
    }
    for (std::size_t b = 0; b < net.blocks.size(); ++b) {
        const std::string p = "block" + std::to_string(b);
        for (auto& row : rep.rows) {
            if (row.layer == p + ".conv1") row.flops = conv_flops(net.blocks[b].conv1.kernel, nmap);
            if (row.layer == p + ".conv2") row.flops = conv_flops(net.blocks[b].conv2.kernel, nmap);
        }
    }
    return rep;
}

/// Per-input-voxel gradient magnitude of one central output.
struct ErfMap {
    Coord3 center;
    std::vector<Coord3> coords;
    std::vector<double> magnitude;

    std::vector<Coord3> support() const {
        std::vector<Coord3> s;
        for (std::size_t i = 0; i < coords.size(); ++i)
            if (magnitude[i] > 0.0) s.push_back(coords[i]);
        return s;
    }
};

/// Gradient of sum_channels(last block output at `center`) with respect to
/// every input voxel's features, in eval mode; L2 norm per voxel.
template <class T>
ErfMap compute_erf(LskNetwork<T>& net, const SparseTensor3D<T>& scene, const NeighborMap& nmap, const Coord3& center) {
    const auto row = CoordIndex(scene.coords).find(center);
    if (!row) throw std::invalid_argument("center not in scene");
    ForwardCache<T> cache;
    const Matrix<T> trunk = net.trunk_forward(scene.feats, nmap, Mode::eval, &cache);
    Matrix<T> seed(trunk.rows, trunk.cols);
    for (std::size_t k = 0; k < trunk.cols; ++k) seed(static_cast<std::size_t>(*row), k) = T(1);
    const Matrix<T> g = net.trunk_backward(cache, seed, nmap, false);
    ErfMap erf;
    erf.center = center;
    erf.coords = scene.coords;
    erf.magnitude.resize(g.rows);
    for (std::size_t r = 0; r < g.rows; ++r) {
        double s = 0.0;
        for (std::size_t k = 0; k < g.cols; ++k) s += static_cast<double>(g(r, k)) * static_cast<double>(g(r, k));
        erf.magnitude[r] = std::sqrt(s);
    }
    return erf;
}

}  // namespace lsk
