#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsk/tensor.hpp"

namespace lsk {

/// A labelled point cloud as stored on disk.
struct Scene {
    std::vector<std::array<float, 3>> points;
    Matrix<float> feats;
    std::vector<std::uint16_t> labels;

    std::size_t size() const { return points.size(); }
    friend bool operator==(const Scene&, const Scene&) = default;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
void put_le(std::string& buf, U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    char bytes[sizeof(U)];
    std::memcpy(bytes, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    buf.append(bytes, sizeof(U));
}

template <class U>
U get_le(const char* p) {
    char bytes[sizeof(U)];
    std::memcpy(bytes, p, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
    U v;
    std::memcpy(&v, bytes, sizeof(U));
    return v;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

/// Shortest decimal text that parses back to exactly `v`.
template <class F>
std::string format_exact(F v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

}  // namespace detail

inline constexpr char kSceneMagic[4] = {'L', 'S', 'K', '3'};

inline std::string encode_scene(const Scene& s) {
    if (s.feats.rows != s.points.size() || s.labels.size() != s.points.size())
        throw std::invalid_argument("shape mismatch: scene");
    std::string buf(kSceneMagic, 4);
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(s.points.size()));
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(s.feats.cols));
    for (std::size_t i = 0; i < s.points.size(); ++i) {
        for (float v : s.points[i]) detail::put_le<float>(buf, v);
        for (float v : s.feats.row(i)) detail::put_le<float>(buf, v);
        detail::put_le<std::uint16_t>(buf, s.labels[i]);
    }
    return buf;
}

inline Scene decode_scene(const std::string& buf) {
    if (buf.size() < 12 || std::memcmp(buf.data(), kSceneMagic, 4) != 0) throw std::runtime_error("not a scene file");
    const auto n = detail::get_le<std::uint32_t>(buf.data() + 4);
    const auto d = detail::get_le<std::uint32_t>(buf.data() + 8);
    const std::size_t stride = 4 * (3 + static_cast<std::size_t>(d)) + 2;
    if (buf.size() != 12 + stride * n) throw std::runtime_error("truncated scene file");
    Scene s;
    s.points.resize(n);
    s.feats = Matrix<float>(n, d);
    s.labels.resize(n);
    const char* p = buf.data() + 12;
    for (std::size_t i = 0; i < n; ++i) {
        for (auto& v : s.points[i]) { v = detail::get_le<float>(p); p += 4; }
        for (auto& v : s.feats.row(i)) { v = detail::get_le<float>(p); p += 4; }
        s.labels[i] = detail::get_le<std::uint16_t>(p);
        p += 2;
    }
    return s;
}

/// One point per line: `x y z f0 .. f{D-1} label`. Lines starting with '#' are skipped.
inline std::string encode_scene_text(const Scene& s) {
    std::string out;
    for (std::size_t i = 0; i < s.points.size(); ++i) {
        for (float v : s.points[i]) out += detail::format_exact(v) + ' ';
        for (float v : s.feats.row(i)) out += detail::format_exact(v) + ' ';
        out += std::to_string(s.labels[i]);
        out += '\n';
    }
    return out;
}

inline Scene decode_scene_text(const std::string& text) {
    Scene s;
    std::istringstream in(text);
    std::string line;
    std::size_t dim = 0;
    bool first = true;
    std::vector<float> feats;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::vector<double> vals;
        double v;
        while (ls >> v) vals.push_back(v);
        if (!ls.eof()) throw std::runtime_error("malformed scene line: " + line);
        if (vals.size() < 4) throw std::runtime_error("malformed scene line: " + line);
        if (first) {
            dim = vals.size() - 4;
            first = false;
        } else if (vals.size() - 4 != dim) {
            throw std::runtime_error("inconsistent feature count in scene text");
        }
        s.points.push_back({static_cast<float>(vals[0]), static_cast<float>(vals[1]), static_cast<float>(vals[2])});
        for (std::size_t k = 0; k < dim; ++k) feats.push_back(static_cast<float>(vals[3 + k]));
        s.labels.push_back(static_cast<std::uint16_t>(vals.back()));
    }
    s.feats = Matrix<float>(s.points.size(), dim);
    s.feats.data = std::move(feats);
    return s;
}

inline bool is_text_scene_path(const std::filesystem::path& p) { return p.extension() == ".txt"; }

inline void save_scene(const Scene& s, const std::filesystem::path& path) {
    detail::write_file(path, is_text_scene_path(path) ? encode_scene_text(s) : encode_scene(s));
}

inline Scene load_scene(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    return is_text_scene_path(path) ? decode_scene_text(bytes) : decode_scene(bytes);
}

}  // namespace lsk
