#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsk/config.hpp"
#include "lsk/scene_io.hpp"
#include "lsk/sds.hpp"

namespace lsk {

// Class ids: 0 ground plane, 1 box, 2 sphere, 3 vertical wall panel.
// With two classes every object is class 1. Boxes may carry a floating lid
// separated by a gap; lid and box share the label.

namespace synth_detail {

struct Rng {
    std::mt19937_64 eng;
    double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
};

struct Footprint {
    double x, y, r;
};

inline bool fits(const std::vector<Footprint>& placed, const Footprint& f, double extent) {
    if (f.x - f.r < 1.0 || f.y - f.r < 1.0 || f.x + f.r > extent - 1.0 || f.y + f.r > extent - 1.0) return false;
    for (const auto& p : placed)
        if (std::hypot(p.x - f.x, p.y - f.y) < p.r + f.r + 1.5) return false;
    return true;
}

}  // namespace synth_detail

/// One scene in metric units (voxel units scaled by spec.voxel_size).
/// Features per point: [1, height / scene height].
inline Scene generate_scene(const SyntheticSceneSpec& spec, std::uint64_t index) {
    spec.validate();
    using synth_detail::Footprint;
    synth_detail::Rng rng{std::mt19937_64(mix_seed(spec.seed, {index}))};
    const double ext = spec.extent;
    const double step = 0.5;
    const int box_class = 1;
    const int sphere_class = spec.num_classes >= 3 ? 2 : 1;

    struct Pt {
        double x, y, z;
        int label;
    };
    std::vector<Pt> pts;
    auto emit = [&](double x, double y, double z, int label) {
        if (rng.uniform() >= spec.density) return;
        x += rng.uniform(-spec.noise, spec.noise);
        y += rng.uniform(-spec.noise, spec.noise);
        z += rng.uniform(-spec.noise, spec.noise);
        if (x < 0 || y < 0 || z < 0 || x >= ext || y >= ext || z >= ext) return;
        pts.push_back({x, y, z, label});
    };

    std::vector<Footprint> placed;
    struct Box {
        double x, y, hx, hy, h;
        bool lid;
    };
    struct Ball {
        double x, y, z, r;
    };
    struct Wall {
        double x, y, half_len, h;
        bool along_x;
    };
    std::vector<Box> boxes;
    std::vector<Ball> balls;
    std::vector<Wall> walls;
    const int max_tries = 200;
    for (int b = 0; b < spec.boxes; ++b)
        for (int t = 0; t < max_tries; ++t) {
            Box bx{0, 0, rng.uniform(1.5, 3.5), rng.uniform(1.5, 3.5), rng.uniform(2.0, 5.0), rng.uniform() < 0.5};
            const double r = std::hypot(bx.hx, bx.hy);
            bx.x = rng.uniform(0.0, ext);
            bx.y = rng.uniform(0.0, ext);
            if (1.0 + bx.h + 3.0 + 1.0 >= ext) continue;
            if (!synth_detail::fits(placed, {bx.x, bx.y, r}, ext)) continue;
            placed.push_back({bx.x, bx.y, r});
            boxes.push_back(bx);
            break;
        }
    for (int s = 0; s < spec.spheres; ++s)
        for (int t = 0; t < max_tries; ++t) {
            Ball ball{rng.uniform(0.0, ext), rng.uniform(0.0, ext), 0.0, rng.uniform(1.5, 3.5)};
            ball.z = 1.5 + ball.r + rng.uniform(0.0, 3.0);
            if (ball.z + ball.r >= ext) continue;
            if (!synth_detail::fits(placed, {ball.x, ball.y, ball.r}, ext)) continue;
            placed.push_back({ball.x, ball.y, ball.r});
            balls.push_back(ball);
            break;
        }
    if (spec.num_classes >= 4)
        for (int w = 0; w < 2; ++w)
            for (int t = 0; t < max_tries; ++t) {
                Wall wall{rng.uniform(0.0, ext), rng.uniform(0.0, ext), rng.uniform(2.0, 5.0), rng.uniform(3.0, 7.0),
                          rng.uniform() < 0.5};
                if (1.0 + wall.h >= ext) continue;
                if (!synth_detail::fits(placed, {wall.x, wall.y, wall.half_len}, ext)) continue;
                placed.push_back({wall.x, wall.y, wall.half_len});
                walls.push_back(wall);
                break;
            }

    // Ground plane in the bottom voxel layer, hidden under box footprints.
    for (double x = 0.25; x < ext; x += step)
        for (double y = 0.25; y < ext; y += step) {
            bool covered = false;
            for (const auto& b : boxes)
                if (std::abs(x - b.x) <= b.hx && std::abs(y - b.y) <= b.hy) covered = true;
            if (!covered) emit(x, y, 0.5, 0);
        }

    auto rect_xy = [&](double cx, double cy, double hx, double hy, double z, int label) {
        for (double x = cx - hx + 0.25; x <= cx + hx; x += step)
            for (double y = cy - hy + 0.25; y <= cy + hy; y += step) emit(x, y, z, label);
    };
    for (const auto& b : boxes) {
        const double z0 = 1.25, z1 = 1.0 + b.h;
        for (double z = z0; z <= z1; z += step) {
            for (double x = b.x - b.hx + 0.25; x <= b.x + b.hx; x += step) {
                emit(x, b.y - b.hy, z, box_class);
                emit(x, b.y + b.hy, z, box_class);
            }
            for (double y = b.y - b.hy + 0.25; y <= b.y + b.hy; y += step) {
                emit(b.x - b.hx, y, z, box_class);
                emit(b.x + b.hx, y, z, box_class);
            }
        }
        rect_xy(b.x, b.y, b.hx, b.hy, z1, box_class);
        if (b.lid) rect_xy(b.x, b.y, b.hx, b.hy, z1 + 3.0, box_class);
    }
    for (const auto& s : balls) {
        const auto n = static_cast<int>(std::ceil(4.0 * std::numbers::pi * s.r * s.r / (step * step)));
        const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
        for (int i = 0; i < n; ++i) {
            const double zz = 1.0 - 2.0 * (i + 0.5) / n;
            const double rr = std::sqrt(1.0 - zz * zz);
            const double th = golden * i;
            emit(s.x + s.r * rr * std::cos(th), s.y + s.r * rr * std::sin(th), s.z + s.r * zz, sphere_class);
        }
    }
    for (const auto& w : walls)
        for (double z = 1.25; z <= 1.0 + w.h; z += step)
            for (double u = -w.half_len + 0.25; u <= w.half_len; u += step)
                emit(w.along_x ? w.x + u : w.x, w.along_x ? w.y : w.y + u, z, 3);

    Scene scene;
    scene.feats = Matrix<float>(pts.size(), 2);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto& p = pts[i];
        scene.points.push_back({static_cast<float>(p.x * spec.voxel_size), static_cast<float>(p.y * spec.voxel_size),
                                static_cast<float>(p.z * spec.voxel_size)});
        scene.feats(i, 0) = 1.0f;
        scene.feats(i, 1) = static_cast<float>(p.z / ext);
        scene.labels.push_back(static_cast<std::uint16_t>(p.label));
    }
    return scene;
}

struct DatasetManifest {
    std::uint64_t seed = 0;
    int num_classes = 0;
    std::vector<std::string> files;  // relative to the manifest directory
    std::vector<std::uint64_t> histogram;  // points per class over all files

    std::string serialize() const {
        KeyValueDoc doc;
        doc.add("dataset", "seed", cfg::fmt(seed));
        doc.add("dataset", "num_classes", cfg::fmt(num_classes));
        doc.add("dataset", "count", cfg::fmt(static_cast<std::uint64_t>(files.size())));
        doc.add("dataset", "histogram", cfg::fmt_list(histogram));
        for (const auto& f : files) doc.add("dataset", "scene", f);
        return doc.serialize();
    }

    static DatasetManifest parse(const std::string& text) {
        const auto doc = KeyValueDoc::parse(text);
        const auto* kvs = doc.section("dataset");
        if (!kvs) throw ConfigError("manifest: missing [dataset]");
        DatasetManifest m;
        std::uint64_t count = 0;
        for (const auto& [k, v] : *kvs) {
            if (k == "seed") m.seed = cfg::parse_num<std::uint64_t>(k, v);
            else if (k == "num_classes") m.num_classes = cfg::parse_num<int>(k, v);
            else if (k == "count") count = cfg::parse_num<std::uint64_t>(k, v);
            else if (k == "histogram") m.histogram = cfg::parse_list<std::uint64_t>(k, v);
            else if (k == "scene") m.files.push_back(v);
            else throw ConfigError("manifest: unknown key '" + k + "'");
        }
        if (count != m.files.size()) throw ConfigError("manifest: count does not match scene list");
        return m;
    }
};

inline constexpr const char* kManifestName = "manifest.txt";

inline std::string scene_file_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%04zu.lsk3", i);
    return buf;
}

/// Writes `count` scenes and manifest.txt into `dir` (created if needed).
/// Scene i is generated from (spec.seed, first_index + i).
inline DatasetManifest gen_dataset(const SyntheticSceneSpec& spec, std::size_t count, const std::filesystem::path& dir,
                                   std::uint64_t first_index = 0) {
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
    DatasetManifest m;
    m.seed = spec.seed;
    m.num_classes = spec.num_classes;
    m.histogram.assign(static_cast<std::size_t>(spec.num_classes), 0);
    for (std::size_t i = 0; i < count; ++i) {
        const Scene s = generate_scene(spec, first_index + i);
        for (auto y : s.labels) ++m.histogram[y];
        m.files.push_back(scene_file_name(i));
        save_scene(s, dir / m.files.back());
    }
    detail::write_file(dir / kManifestName, m.serialize());
    return m;
}

/// Loads every scene listed in `dir`/manifest.txt.
inline std::vector<Scene> load_dataset(const std::filesystem::path& dir) {
    const auto m = DatasetManifest::parse(detail::read_file(dir / kManifestName));
    std::vector<Scene> out;
    for (const auto& f : m.files) out.push_back(load_scene(dir / f));
    return out;
}

}  // namespace lsk
