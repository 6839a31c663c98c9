#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lsk/network.hpp"
#include "lsk/scene_io.hpp"
#include "lsk/train.hpp"

namespace lsk {

/// Raised for malformed or invalid configuration; maps to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Line-oriented `key = value` text grouped under `[section]` headers.
/// '#' starts a comment. Keys may repeat; order is preserved.
struct KeyValueDoc {
    std::vector<std::pair<std::string, std::vector<std::pair<std::string, std::string>>>> sections;

    static std::string trim(std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static KeyValueDoc parse(const std::string& text) {
        KeyValueDoc doc;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": bad section header");
                auto name = trim(line.substr(1, line.size() - 2));
                if (doc.section(name))
                    throw ConfigError("line " + std::to_string(lineno) + ": duplicate section [" + name + "]");
                doc.sections.push_back({std::move(name), {}});
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
            if (doc.sections.empty()) doc.sections.push_back({"", {}});
            doc.sections.back().second.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1))});
        }
        return doc;
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [name, kvs] : sections) {
            if (!out.empty()) out += '\n';
            if (!name.empty()) out += "[" + name + "]\n";
            for (const auto& [k, v] : kvs) out += k + " = " + v + "\n";
        }
        return out;
    }

    const std::vector<std::pair<std::string, std::string>>* section(const std::string& name) const {
        for (const auto& s : sections)
            if (s.first == name) return &s.second;
        return nullptr;
    }

    void add(const std::string& sec, const std::string& key, const std::string& value) {
        for (auto& s : sections)
            if (s.first == sec) {
                s.second.push_back({key, value});
                return;
            }
        sections.push_back({sec, {{key, value}}});
    }
};

namespace cfg {

inline std::string fmt(double v) { return detail::format_exact(v); }
inline std::string fmt(int v) { return std::to_string(v); }
inline std::string fmt(std::int64_t v) { return std::to_string(v); }
inline std::string fmt(std::uint64_t v) { return std::to_string(v); }
template <class U>
std::string fmt_list(const std::vector<U>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + fmt(xs[i]);
    return s;
}

template <class U>
U parse_num(const std::string& key, const std::string& text) {
    U v{};
    const char* b = text.data();
    const char* e = text.data() + text.size();
    auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e) throw ConfigError("invalid value for '" + key + "': '" + text + "'");
    return v;
}

template <class U>
std::vector<U> parse_list(const std::string& key, const std::string& text) {
    std::vector<U> out;
    if (KeyValueDoc::trim(text).empty()) return out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) out.push_back(parse_num<U>(key, KeyValueDoc::trim(item)));
    return out;
}

/// Reads keys of one section into typed fields; unknown keys are errors.
class SectionReader {
public:
    SectionReader(const KeyValueDoc& doc, const std::string& name, bool required = true) : name_(name) {
        kvs_ = doc.section(name);
        if (!kvs_ && required) throw ConfigError("missing section [" + name + "]");
    }
    bool present() const { return kvs_ != nullptr; }

    const std::string* raw(const std::string& key) {
        seen_.push_back(key);
        if (!kvs_) return nullptr;
        const std::string* v = nullptr;
        for (const auto& [k, val] : *kvs_)
            if (k == key) v = &val;
        return v;
    }
    template <class U>
    void num(const std::string& key, U& out) {
        if (auto v = raw(key)) out = parse_num<U>(key, *v);
    }
    template <class U>
    void list(const std::string& key, std::vector<U>& out) {
        if (auto v = raw(key)) out = parse_list<U>(key, *v);
    }
    void str(const std::string& key, std::string& out) {
        if (auto v = raw(key)) out = *v;
    }
    void finish() const {
        if (!kvs_) return;
        for (const auto& [k, v] : *kvs_)
            if (std::find(seen_.begin(), seen_.end(), k) == seen_.end())
                throw ConfigError("unknown key '" + k + "' in [" + name_ + "]");
    }

private:
    std::string name_;
    const std::vector<std::pair<std::string, std::string>>* kvs_ = nullptr;
    std::vector<std::string> seen_;
};

}  // namespace cfg

inline void write_network_config(KeyValueDoc& doc, const NetworkConfig& c) {
    const std::string s = "network";
    doc.add(s, "in_feats", cfg::fmt(c.in_feats));
    doc.add(s, "voxel_size", cfg::fmt(c.voxel_size));
    doc.add(s, "base_width", cfg::fmt(c.width.base_width));
    doc.add(s, "width_factor", cfg::fmt(c.width.width_factor));
    doc.add(s, "sort_every", cfg::fmt(c.width.sort_every));
    doc.add(s, "kernel_size", cfg::fmt(c.kernel_size));
    doc.add(s, "group_divisions", cfg::fmt_list(c.group_divisions));
    doc.add(s, "num_blocks", cfg::fmt(c.num_blocks));
    doc.add(s, "num_classes", cfg::fmt(c.num_classes));
    doc.add(s, "class_weights", cfg::fmt_list(c.class_weights));
    doc.add(s, "scales", cfg::fmt_list(c.scales));
    doc.add(s, "init_seed", cfg::fmt(c.init_seed));
}

inline NetworkConfig read_network_config(const KeyValueDoc& doc) {
    NetworkConfig c;
    cfg::SectionReader r(doc, "network");
    r.num("in_feats", c.in_feats);
    r.num("voxel_size", c.voxel_size);
    r.num("base_width", c.width.base_width);
    r.num("width_factor", c.width.width_factor);
    r.num("sort_every", c.width.sort_every);
    r.num("kernel_size", c.kernel_size);
    r.list("group_divisions", c.group_divisions);
    r.num("num_blocks", c.num_blocks);
    r.num("num_classes", c.num_classes);
    r.list("class_weights", c.class_weights);
    r.list("scales", c.scales);
    r.num("init_seed", c.init_seed);
    r.finish();
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("[network] ") + e.what());
    }
    return c;
}

inline void write_schedule(KeyValueDoc& doc, const TrainSchedule& t) {
    const std::string s = "schedule";
    doc.add(s, "iterations", cfg::fmt(t.iterations));
    doc.add(s, "sparsity", cfg::fmt(t.sparsity.sparsity));
    doc.add(s, "prune_rate", cfg::fmt(t.sparsity.prune_rate));
    doc.add(s, "adapt_every", cfg::fmt(t.sparsity.adapt_every));
    doc.add(s, "seed", cfg::fmt(t.sparsity.seed));
    doc.add(s, "peak_lr", cfg::fmt(t.peak_lr));
    doc.add(s, "weight_decay", cfg::fmt(t.weight_decay));
    doc.add(s, "batch_size", cfg::fmt(t.batch_size));
    doc.add(s, "base_loss_weight", cfg::fmt(t.base_loss_weight));
}

inline TrainSchedule read_schedule(const KeyValueDoc& doc) {
    TrainSchedule t;
    cfg::SectionReader r(doc, "schedule");
    r.num("iterations", t.iterations);
    r.num("sparsity", t.sparsity.sparsity);
    r.num("prune_rate", t.sparsity.prune_rate);
    r.num("adapt_every", t.sparsity.adapt_every);
    r.num("seed", t.sparsity.seed);
    r.num("peak_lr", t.peak_lr);
    r.num("weight_decay", t.weight_decay);
    r.num("batch_size", t.batch_size);
    r.num("base_loss_weight", t.base_loss_weight);
    r.finish();
    return t;
}

/// Procedural scene generator settings.
struct SyntheticSceneSpec {
    int extent = 24;  // voxels per axis
    int num_classes = 3;
    int boxes = 2;
    int spheres = 2;
    double density = 1.0;  // fraction of surface samples kept
    double noise = 0.1;    // jitter amplitude, voxel units
    double voxel_size = 0.05;
    std::uint64_t seed = 0;

    void validate() const {
        if (extent < 8) throw std::invalid_argument("extent must be >= 8");
        if (num_classes < 2 || num_classes > 4) throw std::invalid_argument("num_classes must be in [2,4]");
        if (!(density > 0.0 && density <= 1.0)) throw std::invalid_argument("density must be in (0,1]");
        if (!(noise >= 0.0 && noise < 0.5)) throw std::invalid_argument("noise must be in [0,0.5)");
        if (boxes < 0 || spheres < 0) throw std::invalid_argument("shape counts must be >= 0");
        if (!(voxel_size > 0.0)) throw std::invalid_argument("voxel size must be > 0");
    }
    friend bool operator==(const SyntheticSceneSpec&, const SyntheticSceneSpec&) = default;
};

inline void write_scene_spec(KeyValueDoc& doc, const SyntheticSceneSpec& d) {
    const std::string s = "data";
    doc.add(s, "extent", cfg::fmt(d.extent));
    doc.add(s, "num_classes", cfg::fmt(d.num_classes));
    doc.add(s, "boxes", cfg::fmt(d.boxes));
    doc.add(s, "spheres", cfg::fmt(d.spheres));
    doc.add(s, "density", cfg::fmt(d.density));
    doc.add(s, "noise", cfg::fmt(d.noise));
    doc.add(s, "voxel_size", cfg::fmt(d.voxel_size));
    doc.add(s, "seed", cfg::fmt(d.seed));
}

inline SyntheticSceneSpec read_scene_spec(const KeyValueDoc& doc) {
    SyntheticSceneSpec d;
    cfg::SectionReader r(doc, "data", false);
    r.num("extent", d.extent);
    r.num("num_classes", d.num_classes);
    r.num("boxes", d.boxes);
    r.num("spheres", d.spheres);
    r.num("density", d.density);
    r.num("noise", d.noise);
    r.num("voxel_size", d.voxel_size);
    r.num("seed", d.seed);
    r.finish();
    try {
        d.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("[data] ") + e.what());
    }
    return d;
}

/// Everything a CLI run needs, round-trippable through text.
struct RunConfig {
    NetworkConfig network;
    TrainSchedule schedule;
    SyntheticSceneSpec data;
    std::string train_data;  // dataset directory (manifest.txt) for `train`
    std::string val_data;    // optional held-out dataset directory
    std::string output_dir;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline std::string serialize_run_config(const RunConfig& rc) {
    KeyValueDoc doc;
    write_network_config(doc, rc.network);
    write_schedule(doc, rc.schedule);
    write_scene_spec(doc, rc.data);
    doc.add("run", "train_data", rc.train_data);
    doc.add("run", "val_data", rc.val_data);
    doc.add("run", "output_dir", rc.output_dir);
    return doc.serialize();
}

inline RunConfig parse_run_config(const std::string& text) {
    const auto doc = KeyValueDoc::parse(text);
    RunConfig rc;
    rc.network = read_network_config(doc);
    rc.schedule = read_schedule(doc);
    rc.data = read_scene_spec(doc);
    cfg::SectionReader r(doc, "run", false);
    r.str("train_data", rc.train_data);
    r.str("val_data", rc.val_data);
    r.str("output_dir", rc.output_dir);
    r.finish();
    for (const auto& [name, kvs] : doc.sections)
        if (name != "network" && name != "schedule" && name != "data" && name != "run")
            throw ConfigError("unknown section [" + name + "]");
    try {
        rc.schedule.validate(rc.network);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("[schedule] ") + e.what());
    }
    return rc;
}

}  // namespace lsk
