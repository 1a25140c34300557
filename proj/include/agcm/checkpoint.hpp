#pragma once

// Binary checkpoint:
//   "AGCMCKPT" | u32 version | u64 len, config JSON | u64 seed | u64 epochs |
//   u64 blocks | per block: u32 len, name | u32 ndim | u64 dims... | f64 values |
//   u64 FNV-1a digest of every preceding byte.
// Integers and doubles are little-endian.

#include "agcm/fusion.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

namespace agcm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'A', 'G', 'C', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json config; // {"kind": "visual" | "fusion", ...}
    std::uint64_t seed = 0;
    std::uint64_t epochs = 0;
    std::vector<std::pair<std::string, Array>> blocks;
    std::uint64_t digest = 0; // filled by encode/decode
};

namespace detail {

template <typename T>
void put(std::string& buf, T v)
{
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::string& buf) : buf_(buf) {}

    template <typename T>
    T get()
    {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string bytes(std::size_t n)
    {
        need(n);
        auto s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > buf_.size()) throw ConfigError("checkpoint truncated");
    }

    const std::string& buf_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode_checkpoint(Checkpoint& c)
{
    std::string buf(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put<std::uint32_t>(buf, kCheckpointVersion);
    const auto cfg = c.config.dump();
    detail::put<std::uint64_t>(buf, cfg.size());
    buf += cfg;
    detail::put<std::uint64_t>(buf, c.seed);
    detail::put<std::uint64_t>(buf, c.epochs);
    detail::put<std::uint64_t>(buf, c.blocks.size());
    for (const auto& [name, value] : c.blocks) {
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(value.ndim()));
        for (const auto e : value.shape()) detail::put<std::uint64_t>(buf, e);
        for (const double v : value.values()) detail::put<double>(buf, v);
    }
    c.digest = fnv1a64(buf);
    detail::put<std::uint64_t>(buf, c.digest);
    return buf;
}

inline Checkpoint decode_checkpoint(const std::string& buf)
{
    if (buf.size() < sizeof kCheckpointMagic + 8 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
        throw ConfigError("not a checkpoint file");
    }
    const auto body = std::string_view(buf).substr(0, buf.size() - 8);
    std::uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (fnv1a64(body) != stored) throw ConfigError("checkpoint digest mismatch");
    detail::Reader r(buf);
    r.bytes(8);
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.digest = stored;
    const auto cfg_len = r.get<std::uint64_t>();
    c.config = nlohmann::json::parse(r.bytes(cfg_len));
    c.seed = r.get<std::uint64_t>();
    c.epochs = r.get<std::uint64_t>();
    const auto n = r.get<std::uint64_t>();
    for (std::uint64_t b = 0; b < n; ++b) {
        auto name = r.bytes(r.get<std::uint32_t>());
        Shape shape(r.get<std::uint32_t>());
        for (auto& e : shape) e = r.get<std::uint64_t>();
        std::vector<double> values(shape_size(shape));
        for (auto& v : values) v = r.get<double>();
        c.blocks.emplace_back(std::move(name), Array(shape, std::move(values)));
    }
    if (r.pos() != body.size()) throw ConfigError("trailing bytes in checkpoint");
    return c;
}

inline void write_checkpoint(const std::string& path, Checkpoint& c)
{
    const auto buf = encode_checkpoint(c);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("short write to " + path);
}

inline Checkpoint read_checkpoint(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read checkpoint " + path);
    const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(buf);
}

inline std::vector<std::pair<std::string, Array>> store_blocks(const ParameterStore& store)
{
    std::vector<std::pair<std::string, Array>> out;
    for (const auto* p : store.all()) out.emplace_back(p->name, p->value);
    return out;
}

inline void load_blocks(ParameterStore& store, const std::vector<std::pair<std::string, Array>>& blocks)
{
    if (blocks.size() != store.all().size()) {
        throw ConfigError("checkpoint has " + std::to_string(blocks.size()) + " parameter blocks, model has " +
                          std::to_string(store.all().size()));
    }
    for (const auto& [name, value] : blocks) {
        if (!store.contains(name)) throw ConfigError("checkpoint block " + name + " is not a model parameter");
        auto& p = store.get(name);
        if (p.value.shape() != value.shape()) {
            throw ConfigError("checkpoint block " + name + " has shape " + to_string(value.shape()) + ", model expects " +
                              to_string(p.value.shape()));
        }
        p.value = value;
    }
}

inline Checkpoint visual_checkpoint(const VisualModel& m, std::uint64_t epochs)
{
    Checkpoint c;
    c.config = {{"kind", "visual"}, {"model", to_json(m.config())}};
    c.seed = m.seed();
    c.epochs = epochs;
    c.blocks = store_blocks(m.params());
    return c;
}

inline VisualModel visual_from_checkpoint(const Checkpoint& c)
{
    if (c.config.value("kind", "") != "visual") throw ConfigError("checkpoint does not hold a visual model");
    VisualModel m(model_config_from_json(c.config.at("model")), c.seed);
    load_blocks(m.params(), c.blocks);
    return m;
}

inline nlohmann::json to_json(const TemporalModality& t)
{
    return {{"name", t.name}, {"feature_dim", t.feature_dim}, {"concepts", to_json(t.concepts)}};
}

inline TemporalModality temporal_modality_from_json(const nlohmann::json& j)
{
    return {j.at("name").get<std::string>(), j.at("feature_dim").get<std::size_t>(),
            concept_set_from_json(j.at("concepts"))};
}

/// Fusion checkpoints embed the frozen visual model they were trained on.
inline Checkpoint fusion_checkpoint(const FusionModel& f, const VisualModel& visual, std::uint64_t epochs)
{
    Checkpoint c;
    auto mods = nlohmann::json::array();
    for (const auto& m : f.modalities()) mods.push_back(to_json(m));
    c.config = {{"kind", "fusion"},
                {"model", to_json(f.visual_config())},
                {"fusion", to_json(f.config())},
                {"modalities", mods},
                {"visual_seed", visual.seed()}};
    c.seed = f.seed();
    c.epochs = epochs;
    c.blocks = store_blocks(visual.params());
    const auto own = store_blocks(f.params());
    c.blocks.insert(c.blocks.end(), own.begin(), own.end());
    return c;
}

struct FusionBundle {
    VisualModel visual;
    FusionModel fusion;
};

inline FusionBundle fusion_from_checkpoint(const Checkpoint& c)
{
    if (c.config.value("kind", "") != "fusion") throw ConfigError("checkpoint does not hold a fusion model");
    const auto vcfg = model_config_from_json(c.config.at("model"));
    std::vector<TemporalModality> mods;
    for (const auto& m : c.config.at("modalities")) mods.push_back(temporal_modality_from_json(m));
    FusionBundle b{VisualModel(vcfg, c.config.at("visual_seed").get<std::uint64_t>()),
                   FusionModel(vcfg, mods, fusion_config_from_json(c.config.at("fusion")), c.seed)};
    const auto nv = b.visual.params().all().size();
    if (c.blocks.size() < nv) throw ConfigError("fusion checkpoint is missing visual blocks");
    load_blocks(b.visual.params(), {c.blocks.begin(), c.blocks.begin() + static_cast<long>(nv)});
    load_blocks(b.fusion.params(), {c.blocks.begin() + static_cast<long>(nv), c.blocks.end()});
    return b;
}

} // namespace agcm
