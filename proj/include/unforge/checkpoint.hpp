#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "unforge/adam.hpp"
#include "unforge/epsnet.hpp"
#include "unforge/errors.hpp"
#include "unforge/param_store.hpp"
#include "unforge/schedule.hpp"

namespace unforge {

// Checkpoint file layout ("UFCP"):
//   magic "UFCP" | u32 version | u32 metadata length | metadata JSON bytes |
//   u32 segment count | per segment: u32 name length, name bytes, u32 rank,
//   u32 dims..., f32 payload...
// All integers and floats little-endian. The metadata bytes are kept verbatim
// on load so save(load(f)) is byte-identical.
constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string meta_bytes;  // canonical JSON, written back verbatim
    ParamStore segments;

    nlohmann::json meta() const { return nlohmann::json::parse(meta_bytes); }

    void set_meta(const nlohmann::json& j) { meta_bytes = j.dump(); }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline std::uint32_t take_u32(const std::string& in, std::size_t& pos) {
    if (pos + 4 > in.size()) throw IoError("checkpoint: truncated file");
    std::uint32_t v = (std::uint32_t(static_cast<unsigned char>(in[pos])) |
                       (std::uint32_t(static_cast<unsigned char>(in[pos + 1])) << 8) |
                       (std::uint32_t(static_cast<unsigned char>(in[pos + 2])) << 16) |
                       (std::uint32_t(static_cast<unsigned char>(in[pos + 3])) << 24));
    pos += 4;
    return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out;
    out += "UFCP";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.meta_bytes.size()));
    out += ckpt.meta_bytes;
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.segments.segments.size()));
    for (const auto& seg : ckpt.segments.segments) {
        detail::put_u32(out, static_cast<std::uint32_t>(seg.name.size()));
        out += seg.name;
        detail::put_u32(out, static_cast<std::uint32_t>(seg.value.rank()));
        for (std::size_t d : seg.value.shape)
            detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : seg.value.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            detail::put_u32(out, bits);
        }
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
    std::size_t pos = 0;
    if (bytes.size() < 4 || bytes.compare(0, 4, "UFCP") != 0)
        throw IoError("checkpoint: bad magic in '" + origin + "'");
    pos = 4;
    std::uint32_t version = detail::take_u32(bytes, pos);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported format version " + std::to_string(version) +
                      " in '" + origin + "'");
    std::uint32_t meta_len = detail::take_u32(bytes, pos);
    if (pos + meta_len > bytes.size()) throw IoError("checkpoint: truncated metadata");
    Checkpoint ckpt;
    ckpt.meta_bytes = bytes.substr(pos, meta_len);
    pos += meta_len;
    try {
        (void)nlohmann::json::parse(ckpt.meta_bytes);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: bad metadata JSON in '" + origin + "': " + e.what());
    }
    std::uint32_t count = detail::take_u32(bytes, pos);
    for (std::uint32_t s = 0; s < count; ++s) {
        std::uint32_t name_len = detail::take_u32(bytes, pos);
        if (pos + name_len > bytes.size()) throw IoError("checkpoint: truncated segment name");
        std::string name = bytes.substr(pos, name_len);
        pos += name_len;
        std::uint32_t rank = detail::take_u32(bytes, pos);
        std::vector<std::size_t> shape;
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape.push_back(detail::take_u32(bytes, pos));
            numel *= shape.back();
        }
        Tensor t(shape);
        if (t.numel() != numel || pos + numel * 4 > bytes.size())
            throw IoError("checkpoint: segment '" + name + "' payload does not match dims");
        for (std::size_t i = 0; i < numel; ++i) {
            std::uint32_t bits = detail::take_u32(bytes, pos);
            std::memcpy(&t.data[i], &bits, 4);
        }
        ckpt.segments.add(name, std::move(t));
    }
    if (pos != bytes.size()) throw IoError("checkpoint: trailing bytes in '" + origin + "'");
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes, path.string());
}

// ---- model state <-> checkpoint ----

inline nlohmann::json arch_to_json(const EpsNetArch& arch) {
    return {{"dim", arch.dim},
            {"class_count", arch.class_count},
            {"hidden_width", arch.hidden_width},
            {"depth", arch.depth},
            {"time_embed_dim", arch.time_embed_dim},
            {"cond_spacing", arch.cond_spacing},
            {"time_horizon", arch.time_horizon}};
}

inline EpsNetArch arch_from_json(const nlohmann::json& j) {
    EpsNetArch arch;
    arch.dim = j.at("dim").get<int>();
    arch.class_count = j.at("class_count").get<int>();
    arch.hidden_width = j.at("hidden_width").get<int>();
    arch.depth = j.at("depth").get<int>();
    arch.time_embed_dim = j.at("time_embed_dim").get<int>();
    arch.cond_spacing = j.value("cond_spacing", 2.0);
    arch.time_horizon = j.at("time_horizon").get<int>();
    arch.validate();
    return arch;
}

struct ScheduleParams {
    int steps = 100;
    double beta_start = 1e-3;
    double beta_end = 0.2;

    NoiseSchedule build() const { return make_linear_schedule(steps, beta_start, beta_end); }
};

inline nlohmann::json schedule_to_json(const ScheduleParams& s) {
    return {{"kind", "linear"},
            {"steps", s.steps},
            {"beta_start", s.beta_start},
            {"beta_end", s.beta_end}};
}

inline ScheduleParams schedule_from_json(const nlohmann::json& j) {
    if (j.at("kind").get<std::string>() != "linear")
        throw ConfigError("schedule: unknown kind '" + j.at("kind").get<std::string>() + "'");
    ScheduleParams s;
    s.steps = j.at("steps").get<int>();
    s.beta_start = j.at("beta_start").get<double>();
    s.beta_end = j.at("beta_end").get<double>();
    return s;
}

// Training state packed into a checkpoint: net params plus Adam moments
// (as adam.m.* / adam.v.* segments) so runs resume bit-exactly.
struct ModelState {
    EpsilonNet net;
    ScheduleParams schedule;
    AdamState opt_state;
    long opt_step_count = 0;
};

inline Checkpoint pack_checkpoint(const ModelState& state, const nlohmann::json& extra_meta) {
    Checkpoint ckpt;
    nlohmann::json meta = extra_meta;
    meta["format"] = "unforge-checkpoint";
    meta["arch"] = arch_to_json(state.net.arch);
    meta["schedule"] = schedule_to_json(state.schedule);
    meta["optim_step"] = state.opt_step_count;
    ckpt.segments = state.net.params;
    nlohmann::json frozen = nlohmann::json::array();
    for (const auto& seg : state.net.params.segments)
        if (seg.frozen) frozen.push_back(seg.name);
    meta["frozen_segments"] = frozen;
    ckpt.set_meta(meta);
    for (std::size_t s = 0; s < state.net.params.segments.size(); ++s) {
        const auto& name = state.net.params.segments[s].name;
        ckpt.segments.add("adam.m." + name, state.opt_state.m[s]);
        ckpt.segments.add("adam.v." + name, state.opt_state.v[s]);
    }
    return ckpt;
}

inline ModelState unpack_checkpoint(const Checkpoint& ckpt) {
    auto meta = ckpt.meta();
    ModelState state;
    state.net.arch = arch_from_json(meta.at("arch"));
    state.schedule = schedule_from_json(meta.at("schedule"));
    state.opt_step_count = meta.value("optim_step", 0L);
    std::vector<std::string> frozen;
    if (meta.contains("frozen_segments"))
        frozen = meta["frozen_segments"].get<std::vector<std::string>>();
    for (const auto& seg : ckpt.segments.segments)
        if (seg.name.rfind("adam.", 0) != 0) {
            int i = state.net.params.add(seg.name, seg.value);
            for (const auto& f : frozen)
                if (f == seg.name)
                    state.net.params.segments[static_cast<std::size_t>(i)].frozen = true;
        }
    if (state.net.params.param_count() != state.net.arch.param_count())
        throw IoError("checkpoint: parameter count does not match arch metadata");
    for (const auto& seg : state.net.params.segments) {
        int mi = ckpt.segments.index_of("adam.m." + seg.name);
        int vi = ckpt.segments.index_of("adam.v." + seg.name);
        if (mi < 0 || vi < 0) throw IoError("checkpoint: missing optimizer state for '" +
                                            seg.name + "'");
        state.opt_state.m.push_back(ckpt.segments.segments[static_cast<std::size_t>(mi)].value);
        state.opt_state.v.push_back(ckpt.segments.segments[static_cast<std::size_t>(vi)].value);
    }
    return state;
}

}  // namespace unforge
