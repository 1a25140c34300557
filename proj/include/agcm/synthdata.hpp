#pragma once

// Planted synthetic corpora: geometric "faces" whose concepts, regions and
// label rules are known by construction, plus aligned acoustic tracks.

#include "agcm/acoustic.hpp"
#include "agcm/config.hpp"
#include "agcm/dataset.hpp"
#include "agcm/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace agcm {

inline constexpr int kManifestVersion = 1;

enum class Motif { Ring, Cross, BarH, BarV, Blob, Diagonal };

inline const char* motif_name(Motif m)
{
    switch (m) {
    case Motif::Ring: return "ring";
    case Motif::Cross: return "cross";
    case Motif::BarH: return "bar_h";
    case Motif::BarV: return "bar_v";
    case Motif::Blob: return "blob";
    case Motif::Diagonal: return "diagonal";
    }
    return "?";
}

inline Motif motif_from_name(const std::string& s)
{
    for (auto m : {Motif::Ring, Motif::Cross, Motif::BarH, Motif::BarV, Motif::Blob, Motif::Diagonal}) {
        if (s == motif_name(m)) return m;
    }
    throw ConfigError("unknown motif: " + s);
}

/// Coverage in [0, 1] of a motif at offset (dx, dy) from its centre.
inline double motif_value(Motif m, double dx, double dy, double radius)
{
    const double r = std::hypot(dx, dy);
    const double w = 0.22 * radius; // stroke half-width
    switch (m) {
    case Motif::Ring: return std::abs(r - 0.7 * radius) <= w ? 1.0 : 0.0;
    case Motif::Cross: return r <= radius && (std::abs(dx) <= w || std::abs(dy) <= w) ? 1.0 : 0.0;
    case Motif::BarH: return std::abs(dx) <= radius && std::abs(dy) <= w ? 1.0 : 0.0;
    case Motif::BarV: return std::abs(dy) <= radius && std::abs(dx) <= w ? 1.0 : 0.0;
    case Motif::Blob: return r <= 0.6 * radius ? 1.0 : 0.0;
    case Motif::Diagonal:
        return r <= radius && (std::abs(dx - dy) <= w * std::numbers::sqrt2 || std::abs(dx + dy) <= w * std::numbers::sqrt2)
                   ? 1.0
                   : 0.0;
    }
    return 0.0;
}

struct ConceptPlant {
    std::string name;
    Point anchor; // landmark position before jitter
    Motif motif = Motif::Blob;
};

struct ActivationOption {
    std::vector<std::size_t> concepts;
    double prob = 1.0;
};

struct ClassTemplate {
    std::string name;
    std::vector<ActivationOption> options; // probabilities sum to 1
};

struct IndependentConcept {
    std::size_t index = 0;
    double prob = 0.0;
};

/// Acoustic side of a multimodal plant. The frame label is
/// 2 * (visual class position in `visual_classes`) + (loudness >= 0.5).
struct AcousticPlant {
    std::vector<std::size_t> visual_classes{0, 1};
    double silence_prob = 0.1;
};

struct PlantSpec {
    std::size_t width = 64;
    std::size_t height = 64;
    std::size_t patch = 16;
    std::vector<ConceptPlant> concepts;
    std::vector<ClassTemplate> classes;
    std::vector<IndependentConcept> independent; // drawn regardless of class
    std::vector<std::pair<std::size_t, std::size_t>> redundancy_pairs;
    double label_noise = 0.0;
    double global_jitter = 4.0;   // px, uniform shift of all landmarks
    double landmark_jitter = 1.0; // px, per landmark
    double motif_radius = 6.0;
    double motif_gain = 0.10;
    double background = 0.25;
    double texture_amp = 0.06;
    double pixel_noise = 0.04;
    AcousticPlant acoustic;

    double roi_radius() const { return default_roi_radius(width); }

    ConceptSet visual_concepts() const
    {
        std::vector<ConceptSpec> specs;
        for (std::size_t i = 0; i < concepts.size(); ++i) {
            ConceptSpec c;
            c.name = concepts[i].name;
            c.roi_bearing = true;
            c.landmark_subset = {i};
            specs.push_back(c);
        }
        return ConceptSet(std::move(specs));
    }

    void validate() const
    {
        auto fail = [](const std::string& m) { throw ConfigError("plant: " + m); };
        if (concepts.empty()) fail("no concepts");
        if (classes.size() < 2) fail("need at least two classes");
        if (width % patch != 0 || height % patch != 0) fail("image extents not divisible by the patch size");
        if (motif_radius > roi_radius()) fail("motif radius exceeds the ROI radius");
        visual_concepts();
        for (const auto& c : classes) {
            if (c.options.empty()) fail("class " + c.name + " has no activation options");
            double total = 0.0;
            for (const auto& o : c.options) {
                if (o.concepts.empty()) fail("class " + c.name + " has an option activating no concept");
                for (const auto i : o.concepts) {
                    if (i >= concepts.size()) fail("class " + c.name + " references concept " + std::to_string(i));
                }
                if (o.prob < 0.0) fail("negative option probability in class " + c.name);
                total += o.prob;
            }
            if (std::abs(total - 1.0) > 1e-9) fail("option probabilities of class " + c.name + " do not sum to 1");
        }
        for (const auto& ic : independent) {
            if (ic.index >= concepts.size() || ic.prob < 0.0 || ic.prob > 1.0) fail("bad independent concept");
        }
        const double reach = 2.0 * (roi_radius() + kRoiFalloff + landmark_jitter);
        for (const auto& [a, b] : redundancy_pairs) {
            if (a >= concepts.size() || b >= concepts.size() || a == b) fail("bad redundancy pair");
            const double d = std::hypot(concepts[a].anchor.x - concepts[b].anchor.x,
                                        concepts[a].anchor.y - concepts[b].anchor.y);
            if (d <= reach) fail("redundancy pair " + concepts[a].name + "/" + concepts[b].name + " shares an ROI");
        }
        if (label_noise < 0.0 || label_noise > 1.0) fail("label noise outside [0, 1]");
        for (const auto c : acoustic.visual_classes) {
            if (c >= classes.size()) fail("acoustic plant references class " + std::to_string(c));
        }
    }
};

/// Four classes over eight location-defined concepts: an upper row and a
/// lower row of four sites, with the same motif repeated in both rows.
/// Classes 0 and 1 are redundancy pairs (upper or lower site suffices);
/// classes 2 and 3 share lower2 and differ by upper2 versus lower3; upper3
/// fires independently of the class.
inline PlantSpec default_plant()
{
    PlantSpec p;
    const Motif motifs[4] = {Motif::Ring, Motif::Cross, Motif::BarH, Motif::Diagonal};
    for (std::size_t j = 0; j < 4; ++j) {
        p.concepts.push_back({"upper" + std::to_string(j), {8.0 + 16.0 * j, 12.0}, motifs[j]});
    }
    for (std::size_t j = 0; j < 4; ++j) {
        p.concepts.push_back({"lower" + std::to_string(j), {8.0 + 16.0 * j, 44.0}, motifs[j]});
    }
    p.classes = {
        {"pair0", {{{0, 4}, 0.7}, {{0}, 0.15}, {{4}, 0.15}}},
        {"pair1", {{{1, 5}, 0.7}, {{1}, 0.15}, {{5}, 0.15}}},
        {"upper2_lower2", {{{2, 6}, 1.0}}},
        {"lower2_lower3", {{{6, 7}, 1.0}}},
    };
    p.independent = {{3, 0.3}};
    p.redundancy_pairs = {{0, 4}, {1, 5}};
    return p;
}

/// One clip: consecutive frames (sample indices) sharing one acoustic track.
struct Clip {
    std::string id;
    std::string split;
    std::vector<std::size_t> frames;
    AcousticTrack track;
    std::vector<double> acoustic_labels;
    std::vector<double> descriptor;
};

struct Dataset {
    int version = kManifestVersion;
    std::string kind = "visual"; // visual | multimodal
    std::size_t width = 64;
    std::size_t height = 64;
    std::size_t channels = 1;
    std::size_t patch = 16;
    double roi_radius = 0.0;
    TaskKind task = TaskKind::Classification;
    std::size_t n_classes = 0;
    std::vector<std::string> class_names;
    ConceptSet concepts; // every modality
    std::vector<Sample> samples;
    std::vector<Clip> clips;

    ConceptSet visual_concepts() const { return concepts.of_modality(kVisual); }
    ConceptSet acoustic_concepts() const { return concepts.of_modality(kAcoustic); }

    /// Model configuration with the data-dependent fields filled in.
    ModelConfig model_config(ModelConfig base = {}) const
    {
        base.image_width = width;
        base.image_height = height;
        base.channels = channels;
        base.patch = patch;
        base.task = task;
        base.n_classes = n_classes;
        base.concepts = visual_concepts();
        return base;
    }
};

struct SplitCounts {
    std::size_t train = 2000;
    std::size_t val = 250;
    std::size_t test = 500;

    std::size_t total() const { return train + val + test; }
    std::string split_of(std::size_t i) const { return i < train ? "train" : i < train + val ? "val" : "test"; }
};

namespace detail {

inline std::string indexed_id(char prefix, std::size_t i)
{
    std::ostringstream os;
    os << prefix;
    os.width(6);
    os.fill('0');
    os << i;
    return os.str();
}

/// Renders one frame with the given active concepts. Draw order per sample
/// is fixed, so output depends only on (key, class, active set).
inline Sample render_sample(const PlantSpec& p, const ConceptSet& concepts, const std::vector<bool>& active,
                            std::uint64_t key)
{
    CounterRng rng(key);
    Sample s;
    s.landmarks.width = p.width;
    s.landmarks.height = p.height;
    const double gx = rng.uniform(-p.global_jitter, p.global_jitter);
    const double gy = rng.uniform(-p.global_jitter, p.global_jitter);
    for (const auto& c : p.concepts) {
        Point pt;
        pt.x = std::clamp(c.anchor.x + gx + rng.uniform(-p.landmark_jitter, p.landmark_jitter), 0.0,
                          static_cast<double>(p.width - 1));
        pt.y = std::clamp(c.anchor.y + gy + rng.uniform(-p.landmark_jitter, p.landmark_jitter), 0.0,
                          static_cast<double>(p.height - 1));
        s.landmarks.points.push_back(pt);
    }

    // low-frequency texture: three random plane waves
    double fx[3], fy[3], ph[3];
    for (int w = 0; w < 3; ++w) {
        const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double freq = rng.uniform(0.05, 0.2);
        fx[w] = freq * std::cos(ang);
        fy[w] = freq * std::sin(ang);
        ph[w] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    s.image = ImageGrid(1, p.height, p.width);
    for (std::size_t y = 0; y < p.height; ++y) {
        for (std::size_t x = 0; x < p.width; ++x) {
            double v = p.background;
            for (int w = 0; w < 3; ++w) {
                v += p.texture_amp * std::sin(fx[w] * static_cast<double>(x) + fy[w] * static_cast<double>(y) + ph[w]);
            }
            v += rng.uniform(-p.pixel_noise, p.pixel_noise);
            s.image.at(0, y, x) = v;
        }
    }
    s.concepts.assign(p.concepts.size(), 0.0);
    for (std::size_t i = 0; i < p.concepts.size(); ++i) {
        if (!active[i]) continue;
        s.concepts[i] = 1.0;
        const auto c = s.landmarks.points[i];
        for (std::size_t y = 0; y < p.height; ++y) {
            for (std::size_t x = 0; x < p.width; ++x) {
                const double m = motif_value(p.concepts[i].motif, static_cast<double>(x) - c.x,
                                             static_cast<double>(y) - c.y, p.motif_radius);
                s.image.at(0, y, x) += p.motif_gain * m;
            }
        }
    }
    quantize8(s.image);
    attach_patch_maps(s, concepts, p.patch, p.roi_radius());
    return s;
}

/// Draws (class, active concept set) for one sample.
inline std::pair<int, std::vector<bool>> draw_activation(const PlantSpec& p, std::size_t cls, CounterRng& rng)
{
    std::vector<bool> active(p.concepts.size(), false);
    const auto& tpl = p.classes[cls];
    double u = rng.uniform(), acc = 0.0;
    const ActivationOption* chosen = &tpl.options.back();
    for (const auto& o : tpl.options) {
        acc += o.prob;
        if (u < acc) {
            chosen = &o;
            break;
        }
    }
    for (const auto i : chosen->concepts) active[i] = true;
    for (const auto& ic : p.independent) {
        if (rng.bernoulli(ic.prob)) active[ic.index] = true;
    }
    int label = static_cast<int>(cls);
    if (p.label_noise > 0.0 && rng.bernoulli(p.label_noise)) {
        label = static_cast<int>((cls + 1 + rng.below(p.classes.size() - 1)) % p.classes.size());
    }
    return {label, active};
}

inline Dataset empty_dataset(const PlantSpec& p, std::string kind)
{
    Dataset d;
    d.kind = std::move(kind);
    d.width = p.width;
    d.height = p.height;
    d.patch = p.patch;
    d.roi_radius = p.roi_radius();
    return d;
}

} // namespace detail

/// Frame-level corpus. Sample i draws every random quantity from the
/// substream (seed, i), so samples can be generated independently.
inline Dataset generate_visual(const PlantSpec& p, const SplitCounts& counts, std::uint64_t seed)
{
    p.validate();
    if (counts.total() == 0) throw ConfigError("sample count must be positive");
    auto d = detail::empty_dataset(p, "visual");
    const auto concepts = p.visual_concepts();
    d.concepts = concepts;
    d.n_classes = p.classes.size();
    for (const auto& c : p.classes) d.class_names.push_back(c.name);
    for (std::size_t i = 0; i < counts.total(); ++i) {
        CounterRng rng(stream_key(seed, fnv1a64("sample"), i));
        const auto cls = static_cast<std::size_t>(rng.below(p.classes.size()));
        auto [label, active] = detail::draw_activation(p, cls, rng);
        Sample s = detail::render_sample(p, concepts, active, stream_key(seed, fnv1a64("render"), i));
        s.id = detail::indexed_id('s', i);
        s.split = counts.split_of(i);
        s.label = label;
        s.target = static_cast<double>(label) / static_cast<double>(p.classes.size() - 1);
        d.samples.push_back(std::move(s));
    }
    return d;
}

/// Raw track whose derived labels equal the requested levels: channels
/// alternate around their mean by the requested mean absolute difference.
inline AcousticTrack synthesize_track(const std::vector<double>& levels, const ConceptSet& acoustic, std::size_t k,
                                      bool silent)
{
    auto raw = [&](const std::string& name) {
        const auto& c = acoustic[acoustic.index_of(name)];
        const auto [lo, hi] = *c.norm_bounds;
        return lo + levels[acoustic.index_of(name)] * (hi - lo);
    };
    auto alternate = [k](double mean, double step) {
        std::vector<double> v(k);
        for (std::size_t j = 0; j < k; ++j) v[j] = mean + (j % 2 == 0 ? 0.5 : -0.5) * step;
        return v;
    };
    AcousticTrack t;
    if (silent) {
        t.pitch.assign(k, 0.0);
        t.loudness.assign(k, 0.0);
    } else {
        t.pitch = alternate(raw("pitch"), raw("pitch_variation"));
        t.loudness = alternate(raw("loudness"), raw("loudness_variation"));
    }
    t.jitter.assign(k, 100.0 * levels[acoustic.index_of("jitter")]);
    t.rate.assign(k, raw("speech_rate"));
    return t;
}

/// Clip corpus: each frame is a visual sample from one of the plant's
/// `acoustic.visual_classes`; its label combines that choice with whether
/// the clip is loud.
inline Dataset generate_multimodal(const PlantSpec& p, const SplitCounts& clip_counts, std::size_t k,
                                   std::uint64_t seed)
{
    p.validate();
    if (clip_counts.total() == 0 || k == 0) throw ConfigError("clip and frame counts must be positive");
    if (p.acoustic.visual_classes.empty()) throw ConfigError("plant has no acoustic template");
    auto d = detail::empty_dataset(p, "multimodal");
    const auto visual = p.visual_concepts();
    const ConceptSet acoustic(default_acoustic_specs());
    auto all = visual.specs();
    for (const auto& c : acoustic.specs()) all.push_back(c);
    d.concepts = ConceptSet(all);
    d.n_classes = 2 * p.acoustic.visual_classes.size();
    for (const auto c : p.acoustic.visual_classes) {
        d.class_names.push_back(p.classes[c].name + "_quiet");
        d.class_names.push_back(p.classes[c].name + "_loud");
    }
    const auto nv = p.acoustic.visual_classes.size();
    for (std::size_t ci = 0; ci < clip_counts.total(); ++ci) {
        CounterRng rng(stream_key(seed, fnv1a64("clip"), ci));
        Clip clip;
        clip.id = detail::indexed_id('c', ci);
        clip.split = clip_counts.split_of(ci);
        const bool silent = rng.bernoulli(p.acoustic.silence_prob);
        const bool loud = !silent && rng.bernoulli(0.5);
        std::vector<double> levels(acoustic.size());
        levels[acoustic.index_of("pitch")] = rng.uniform(0.2, 0.8);
        levels[acoustic.index_of("pitch_variation")] = rng.uniform(0.0, 0.5);
        levels[acoustic.index_of("jitter")] = rng.uniform(0.0, 0.05);
        levels[acoustic.index_of("loudness")] = loud ? rng.uniform(0.6, 0.9) : rng.uniform(0.1, 0.4);
        levels[acoustic.index_of("loudness_variation")] = rng.uniform(0.0, 0.3);
        levels[acoustic.index_of("speech_rate")] = rng.uniform(0.2, 0.8);
        clip.track = synthesize_track(levels, acoustic, k, silent);
        clip.acoustic_labels = derive_acoustic_labels(clip.track, acoustic);
        clip.descriptor = acoustic_descriptor(clip.track, acoustic);
        const bool loud_bit = clip.acoustic_labels[acoustic.index_of("loudness")] >= 0.5;
        for (std::size_t j = 0; j < k; ++j) {
            const auto idx = d.samples.size();
            CounterRng frng(stream_key(seed, fnv1a64("frame"), ci, j));
            const auto pos = static_cast<std::size_t>(frng.below(nv));
            auto [label, active] = detail::draw_activation(p, p.acoustic.visual_classes[pos], frng);
            (void)label;
            Sample s = detail::render_sample(p, visual, active, stream_key(seed, fnv1a64("frame-render"), ci, j));
            s.id = clip.id + "_f" + std::to_string(j);
            s.split = clip.split;
            s.label = static_cast<int>(2 * pos + (loud_bit ? 1 : 0));
            s.target = static_cast<double>(s.label) / static_cast<double>(d.n_classes - 1);
            d.samples.push_back(std::move(s));
            clip.frames.push_back(idx);
        }
        d.clips.push_back(std::move(clip));
    }
    return d;
}

// Manifest I/O ---------------------------------------------------------------

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("short write to " + path.string());
}

inline nlohmann::json landmarks_json(const LandmarkSet& lm)
{
    auto j = nlohmann::json::array();
    for (const auto& p : lm.points) j.push_back({p.x, p.y});
    return j;
}

inline void write_track_csv(const fs::path& path, const AcousticTrack& t)
{
    std::string s = "frame_idx,pitch,loudness,jitter,rate\n";
    for (std::size_t j = 0; j < t.frames(); ++j) {
        s += std::to_string(j) + "," + format_double(t.pitch[j]) + "," + format_double(t.loudness[j]) + "," +
             format_double(t.jitter[j]) + "," + format_double(t.rate[j]) + "\n";
    }
    write_text(path, s);
}

inline AcousticTrack read_track_csv(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read acoustic track " + path.string());
    AcousticTrack t;
    std::string line;
    std::getline(in, line);
    std::size_t expect = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> v;
        while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
        if (v.size() != 5 || static_cast<std::size_t>(v[0]) != expect++) {
            throw ConfigError("malformed acoustic track row in " + path.string());
        }
        t.pitch.push_back(v[1]);
        t.loudness.push_back(v[2]);
        t.jitter.push_back(v[3]);
        t.rate.push_back(v[4]);
    }
    t.validate();
    return t;
}

/// Writes manifest.json plus images/ (PPM + JSON sidecar per sample) and
/// tracks/ (CSV per clip) under `dir`.
inline void write_dataset(const fs::path& dir, const Dataset& d)
{
    fs::create_directories(dir / "images");
    if (!d.clips.empty()) fs::create_directories(dir / "tracks");
    nlohmann::json m;
    m["version"] = d.version;
    m["kind"] = d.kind;
    m["image"] = {{"width", d.width}, {"height", d.height}, {"channels", d.channels}, {"patch", d.patch}};
    m["roi_radius"] = d.roi_radius;
    m["task"] = {{"kind", d.task == TaskKind::Classification ? "classification" : "regression"},
                 {"n_classes", d.n_classes},
                 {"class_names", d.class_names}};
    m["concepts"] = to_json(d.concepts);
    auto samples = nlohmann::json::array();
    for (const auto& s : d.samples) {
        const auto img = "images/" + s.id + ".ppm";
        const auto meta = "images/" + s.id + ".json";
        write_ppm((dir / img).string(), s.image);
        nlohmann::json side = {{"id", s.id},
                               {"label", s.label},
                               {"target", s.target},
                               {"concepts", s.concepts},
                               {"landmarks", landmarks_json(s.landmarks)}};
        write_text(dir / meta, side.dump(1) + "\n");
        samples.push_back({{"id", s.id},
                           {"split", s.split},
                           {"image", img},
                           {"meta", meta},
                           {"label", s.label},
                           {"target", s.target},
                           {"concepts", s.concepts},
                           {"landmarks", landmarks_json(s.landmarks)}});
    }
    m["samples"] = samples;
    auto clips = nlohmann::json::array();
    for (const auto& c : d.clips) {
        const auto track = "tracks/" + c.id + ".csv";
        write_track_csv(dir / track, c.track);
        clips.push_back({{"id", c.id},
                         {"split", c.split},
                         {"frames", c.frames},
                         {"track", track},
                         {"acoustic_labels", c.acoustic_labels}});
    }
    m["clips"] = clips;
    write_text(dir / "manifest.json", m.dump(1) + "\n");
}

inline Dataset load_dataset(const fs::path& manifest_path)
{
    std::ifstream in(manifest_path);
    if (!in) throw ConfigError("cannot read manifest " + manifest_path.string());
    nlohmann::json m;
    try {
        in >> m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + manifest_path.string() + ": " + e.what());
    }
    const auto dir = manifest_path.parent_path();
    Dataset d;
    try {
        d.version = m.at("version").get<int>();
        if (d.version != kManifestVersion) {
            throw ConfigError("unsupported manifest version " + std::to_string(d.version));
        }
        d.kind = m.at("kind").get<std::string>();
        const auto& im = m.at("image");
        d.width = im.at("width");
        d.height = im.at("height");
        d.channels = im.at("channels");
        d.patch = im.at("patch");
        d.roi_radius = m.at("roi_radius");
        const auto& task = m.at("task");
        const auto kind = task.at("kind").get<std::string>();
        if (kind != "classification" && kind != "regression") throw ConfigError("unknown task kind " + kind);
        d.task = kind == "classification" ? TaskKind::Classification : TaskKind::Regression;
        d.n_classes = task.at("n_classes");
        d.class_names = task.value("class_names", std::vector<std::string>{});
        d.concepts = concept_set_from_json(m.at("concepts"));
        const auto visual = d.visual_concepts();
        std::set<std::string> ids;
        for (const auto& js : m.at("samples")) {
            Sample s;
            s.id = js.at("id");
            if (!ids.insert(s.id).second) throw ConfigError("duplicate sample id " + s.id);
            s.split = js.at("split");
            if (s.split != "train" && s.split != "val" && s.split != "test") {
                throw ConfigError("sample " + s.id + ": unknown split " + s.split);
            }
            s.label = js.at("label");
            s.target = js.at("target");
            s.concepts = js.at("concepts").get<std::vector<double>>();
            if (s.concepts.size() != visual.size()) {
                throw ConfigError("sample " + s.id + ": concept labels do not match the inventory");
            }
            if (d.task == TaskKind::Classification && (s.label < 0 || s.label >= static_cast<int>(d.n_classes))) {
                throw ConfigError("sample " + s.id + ": label out of range");
            }
            s.landmarks.width = d.width;
            s.landmarks.height = d.height;
            for (const auto& p : js.at("landmarks")) s.landmarks.points.push_back({p.at(0), p.at(1)});
            s.landmarks.validate();
            const auto img = dir / js.at("image").get<std::string>();
            if (!fs::exists(img)) throw ConfigError("missing image " + img.string());
            s.image = read_ppm(img.string(), d.channels);
            if (s.image.width != d.width || s.image.height != d.height) {
                throw ConfigError("image " + img.string() + " has the wrong extents");
            }
            if (js.contains("meta") && !fs::exists(dir / js.at("meta").get<std::string>())) {
                throw ConfigError("missing sidecar for " + s.id);
            }
            attach_patch_maps(s, visual, d.patch, d.roi_radius);
            d.samples.push_back(std::move(s));
        }
        const auto acoustic = d.acoustic_concepts();
        for (const auto& jc : m.value("clips", nlohmann::json::array())) {
            Clip c;
            c.id = jc.at("id");
            c.split = jc.at("split");
            c.frames = jc.at("frames").get<std::vector<std::size_t>>();
            for (const auto f : c.frames) {
                if (f >= d.samples.size()) throw ConfigError("clip " + c.id + " references a missing frame");
                if (d.samples[f].split != c.split) throw ConfigError("clip " + c.id + " spans several splits");
            }
            const auto track = dir / jc.at("track").get<std::string>();
            if (!fs::exists(track)) throw ConfigError("missing acoustic track " + track.string());
            c.track = read_track_csv(track);
            c.acoustic_labels = derive_acoustic_labels(c.track, acoustic);
            c.descriptor = acoustic_descriptor(c.track, acoustic);
            d.clips.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + manifest_path.string() + ": " + e.what());
    }
    return d;
}

} // namespace agcm
