#pragma once

#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "lsk/checkpoint.hpp"
#include "lsk/config.hpp"
#include "lsk/metrics.hpp"
#include "lsk/report.hpp"
#include "lsk/synth.hpp"
#include "lsk/train.hpp"

namespace lsk {

namespace fs = std::filesystem;

inline void require_path(const std::string& what, const std::string& p) {
    if (p.empty()) throw ConfigError(what + " not set");
    if (!fs::exists(p)) throw ConfigError(what + " does not exist: " + p);
}

inline RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config does not exist: " + path.string());
    return parse_run_config(detail::read_file(path));
}

inline void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

template <class T>
std::vector<Sample<T>> prepare_dataset(const std::vector<Scene>& scenes, const NetworkConfig& cfg,
                                       const OffsetList& offsets) {
    std::vector<Sample<T>> out;
    out.reserve(scenes.size());
    for (const auto& s : scenes) out.push_back(prepare_sample<T>(s, cfg, offsets));
    return out;
}

inline DatasetManifest run_gen_data(const SyntheticSceneSpec& spec, std::size_t count, const fs::path& out) {
    return gen_dataset(spec, count, out);
}

struct TrainSummary {
    std::int64_t iterations = 0;
    std::int64_t sds_events = 0;
    std::int64_t sort_events = 0;
    double final_loss = 0.0;
    std::optional<MiouResult> validation;
};

/// Writes metrics.csv, checkpoint.lskc and config.txt into `out`
/// (and val_iou.csv when validation data is configured).
inline TrainSummary run_train(const RunConfig& rc, const fs::path& out, std::ostream& log) {
    require_path("train_data", rc.train_data);
    if (!rc.val_data.empty()) require_path("val_data", rc.val_data);
    ensure_dir(out);
    std::vector<std::string> warnings;
    auto st = make_train_state<float>(rc.network, rc.schedule, &warnings);
    for (const auto& w : warnings) log << "warning: " << w << "\n";
    const auto train = prepare_dataset<float>(load_dataset(rc.train_data), rc.network, st.net.offsets);
    std::string metrics = metrics_csv_header(st.net.sparse_layers().size());
    TrainSummary sum;
    training_loop(st, rc.schedule, train, [&](const IterationRecord& r) {
        metrics += metrics_csv_row(r);
        sum.final_loss = r.loss;
        if (r.iteration % 100 == 0 || r.iteration == rc.schedule.iterations)
            log << "iter " << r.iteration << " loss " << r.loss << " lr " << r.lr << "\n";
    });
    sum.iterations = st.iteration;
    sum.sds_events = st.sds_events;
    sum.sort_events = st.sort_events;
    detail::write_file(out / "metrics.csv", metrics);
    detail::write_file(out / "config.txt", serialize_run_config(rc));
    if (!rc.val_data.empty()) {
        const auto val = load_dataset(rc.val_data);
        auto net = inference_network(st);
        const auto samples = prepare_dataset<float>(val, net.config, net.offsets);
        if (samples.empty()) throw std::runtime_error("no scenes");
        sum.validation = miou(evaluate(net, samples));
        detail::write_file(out / "val_iou.csv", iou_csv(*sum.validation));
        log << "validation mIoU " << sum.validation->mean << "\n";
    }
    save_checkpoint(st, rc.schedule, out / "checkpoint.lskc");
    return sum;
}

/// Sort + select to base width (a no-op when w = 1), evaluate, write iou.csv.
inline MiouResult run_eval(const fs::path& checkpoint, const fs::path& data, const fs::path& out) {
    auto ck = load_checkpoint<float>(checkpoint);
    const auto scenes = load_dataset(data);
    if (scenes.empty()) throw std::runtime_error("no scenes");
    auto net = inference_network(ck.state);
    const auto samples = prepare_dataset<float>(scenes, net.config, net.offsets);
    const auto result = miou(evaluate(net, samples));
    ensure_dir(out);
    detail::write_file(out / "iou.csv", iou_csv(result));
    return result;
}

/// Active voxel closest to the centre of the bounding box (lowest row on ties).
inline Coord3 default_center(const std::vector<Coord3>& coords) {
    if (coords.empty()) throw std::invalid_argument("empty input");
    Coord3 lo = coords.front(), hi = coords.front();
    for (const auto& c : coords) {
        lo = {std::min(lo.x, c.x), std::min(lo.y, c.y), std::min(lo.z, c.z)};
        hi = {std::max(hi.x, c.x), std::max(hi.y, c.y), std::max(hi.z, c.z)};
    }
    const double mx = (lo.x + hi.x) / 2.0, my = (lo.y + hi.y) / 2.0, mz = (lo.z + hi.z) / 2.0;
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < coords.size(); ++i) {
        const double d = (coords[i].x - mx) * (coords[i].x - mx) + (coords[i].y - my) * (coords[i].y - my) +
                         (coords[i].z - mz) * (coords[i].z - mz);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return coords[best];
}

/// ERF of the inference network on one scene; writes erf.csv and erf.svg.
inline ErfMap run_erf(const fs::path& checkpoint, const fs::path& scene_path, std::optional<Coord3> center,
                      const fs::path& out) {
    auto ck = load_checkpoint<float>(checkpoint);
    auto net = inference_network(ck.state);
    const auto sample = prepare_sample<float>(load_scene(scene_path), net.config, net.offsets);
    const Coord3 c = center ? *center : default_center(sample.tensor.coords);
    const auto erf = compute_erf(net, sample.tensor, *sample.nmap, c);
    ensure_dir(out);
    emit_erf(erf, out / "erf.csv", out / "erf.svg");
    return erf;
}

/// Costs of the stored network (costs.csv/svg) and, when it is wider than the
/// base width, of the selected inference network (costs_selected.csv/svg).
inline CostReport run_count(const fs::path& checkpoint, const fs::path& scene_path, const fs::path& out) {
    auto ck = load_checkpoint<float>(checkpoint);
    const auto scene = load_scene(scene_path);
    const auto sample = prepare_sample<float>(scene, ck.state.net.config, ck.state.net.offsets);
    const auto rep = count_flops(ck.state.net, *sample.nmap);
    ensure_dir(out);
    emit_costs(rep, out / "costs.csv", out / "costs.svg");
    if (ck.state.net.width > static_cast<std::size_t>(ck.state.net.config.width.base_width)) {
        auto net = inference_network(ck.state);
        emit_costs(count_flops(net, *sample.nmap), out / "costs_selected.csv", out / "costs_selected.svg");
    }
    return rep;
}

}  // namespace lsk
