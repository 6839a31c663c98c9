#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "lsk/config.hpp"
#include "lsk/scene_io.hpp"
#include "lsk/train.hpp"

namespace lsk {

// Layout (little endian):
//   "LSKC" u32 version u8 scalar_bytes
//   u32 len, config text ([network] + [schedule])
//   i64 iteration, adam_step, sds_events, sort_events; u64 seed
//   u32 width, u32 tensor count, then per tensor:
//     u32 len, name; u8 flags (1 trainable, 2 masked); u32 rank; u64 dims...
//     values; m and v if trainable; packed mask bits if masked
//   u32 boundaries, then per boundary u32 len, i32 entries (last permutation)
//   per boundary, width i32 channel ids

inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'K', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class Reader {
public:
    explicit Reader(const std::string& buf) : buf_(buf) {}

    template <class U>
    U get() {
        need(sizeof(U));
        U v = get_le<U>(buf_.data() + pos_);
        pos_ += sizeof(U);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n) throw std::runtime_error("truncated checkpoint");
    }
    const std::string& buf_;
    std::size_t pos_ = 0;
};

inline void put_string(std::string& out, const std::string& s) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out += s;
}

}  // namespace detail

template <class T>
std::string encode_checkpoint(TrainState<T>& st, const TrainSchedule& sched) {
    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint8_t>(out, sizeof(T));
    KeyValueDoc doc;
    write_network_config(doc, st.net.config);
    write_schedule(doc, sched);
    detail::put_string(out, doc.serialize());
    for (auto c : {st.iteration, st.adam_step, st.sds_events, st.sort_events}) detail::put_le<std::int64_t>(out, c);
    detail::put_le<std::uint64_t>(out, st.seed);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(st.net.width));
    auto params = st.net.params();
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        detail::put_string(out, p.name);
        detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>((p.trainable() ? 1 : 0) | (p.mask ? 2 : 0)));
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
        for (auto d : p.shape) detail::put_le<std::uint64_t>(out, d);
        for (T x : *p.value) detail::put_le<T>(out, x);
        if (p.trainable()) {
            for (T x : *p.m) detail::put_le<T>(out, x);
            for (T x : *p.v) detail::put_le<T>(out, x);
        }
        if (p.mask) {
            const auto& mk = *p.mask;
            for (std::size_t k = 0; k < mk.size(); k += 8) {
                std::uint8_t byte = 0;
                for (std::size_t j = 0; j < 8 && k + j < mk.size(); ++j)
                    if (mk[k + j]) byte |= static_cast<std::uint8_t>(1u << j);
                detail::put_le<std::uint8_t>(out, byte);
            }
        }
    }
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(st.last_permutation.perms.size()));
    for (const auto& perm : st.last_permutation.perms) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(perm.size()));
        for (int v : perm) detail::put_le<std::int32_t>(out, v);
    }
    for (const auto& ids : st.net.channel_ids)
        for (int v : ids) detail::put_le<std::int32_t>(out, v);
    return out;
}

template <class T>
struct LoadedCheckpoint {
    TrainState<T> state;
    TrainSchedule schedule;
};

/// Gradients are not stored; they are zero after loading.
template <class T>
LoadedCheckpoint<T> decode_checkpoint(const std::string& buf) {
    detail::Reader in(buf);
    if (buf.size() < 4 || buf.compare(0, 4, kCheckpointMagic, 4) != 0)
        throw std::runtime_error("incompatible checkpoint");
    in.bytes(4);
    if (in.get<std::uint32_t>() != kCheckpointVersion) throw std::runtime_error("incompatible checkpoint");
    if (in.get<std::uint8_t>() != sizeof(T)) throw std::runtime_error("incompatible checkpoint: scalar type");
    const std::string text = in.bytes(in.get<std::uint32_t>());
    KeyValueDoc doc;
    NetworkConfig ncfg;
    TrainSchedule sched;
    try {
        doc = KeyValueDoc::parse(text);
        ncfg = read_network_config(doc);
        sched = read_schedule(doc);
    } catch (const ConfigError& e) {
        throw std::runtime_error(std::string("incompatible checkpoint: ") + e.what());
    }
    std::int64_t counters[4];
    for (auto& c : counters) c = in.get<std::int64_t>();
    const auto seed = in.get<std::uint64_t>();
    const auto width = in.get<std::uint32_t>();
    if (width == 0 || width > (1u << 16)) throw std::runtime_error("incompatible checkpoint: width");
    LoadedCheckpoint<T> out;
    out.state.net = LskNetwork<T>(ncfg, static_cast<int>(width));
    out.schedule = sched;
    auto& st = out.state;
    st.iteration = counters[0];
    st.adam_step = counters[1];
    st.sds_events = counters[2];
    st.sort_events = counters[3];
    st.seed = seed;
    auto params = st.net.params();
    if (in.get<std::uint32_t>() != params.size()) throw std::runtime_error("incompatible checkpoint: tensor count");
    for (auto& p : params) {
        if (in.bytes(in.get<std::uint32_t>()) != p.name) throw std::runtime_error("incompatible checkpoint: " + p.name);
        const auto flags = in.get<std::uint8_t>();
        if (flags != static_cast<std::uint8_t>((p.trainable() ? 1 : 0) | (p.mask ? 2 : 0)))
            throw std::runtime_error("incompatible checkpoint: " + p.name);
        const auto rank = in.get<std::uint32_t>();
        if (rank != p.shape.size()) throw std::runtime_error("incompatible checkpoint: " + p.name);
        for (auto d : p.shape)
            if (in.get<std::uint64_t>() != d) throw std::runtime_error("incompatible checkpoint: " + p.name);
        for (auto& x : *p.value) x = in.get<T>();
        if (p.trainable()) {
            for (auto& x : *p.m) x = in.get<T>();
            for (auto& x : *p.v) x = in.get<T>();
            std::fill(p.grad->begin(), p.grad->end(), T(0));
        }
        if (p.mask) {
            auto& mk = *p.mask;
            for (std::size_t k = 0; k < mk.size(); k += 8) {
                const auto byte = in.get<std::uint8_t>();
                for (std::size_t j = 0; j < 8 && k + j < mk.size(); ++j) mk[k + j] = (byte >> j) & 1u;
            }
        }
    }
    const auto nb = in.get<std::uint32_t>();
    if (nb != st.net.num_boundaries()) throw std::runtime_error("incompatible checkpoint: permutation");
    for (std::uint32_t b = 0; b < nb; ++b) {
        std::vector<int> perm(in.get<std::uint32_t>());
        for (auto& v : perm) v = in.get<std::int32_t>();
        st.last_permutation.perms.push_back(std::move(perm));
    }
    for (auto& ids : st.net.channel_ids)
        for (auto& v : ids) v = in.get<std::int32_t>();
    if (!in.done()) throw std::runtime_error("incompatible checkpoint: trailing bytes");
    return out;
}

template <class T>
void save_checkpoint(TrainState<T>& st, const TrainSchedule& sched, const std::filesystem::path& path) {
    detail::write_file(path, encode_checkpoint(st, sched));
}

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint<T>(detail::read_file(path));
}

}  // namespace lsk
