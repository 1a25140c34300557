#pragma once

#include "agcm/checkpoint.hpp"
#include "agcm/evaluate.hpp"
#include "agcm/explain.hpp"
#include "agcm/fusion.hpp"
#include "agcm/gradcheck.hpp"
#include "agcm/synthdata.hpp"
#include "agcm/train.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace agcm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kFailed = 1, kConfigError = 2, kNumericError = 3 };

// Configuration layering --------------------------------------------------------

/// Default section per command. Every accepted key appears here; an empty
/// object value marks a free-form sub-object.
inline json command_defaults(const std::string& cmd)
{
    if (cmd == "synth") {
        const auto p = default_plant();
        return {{"kind", "visual"},
                {"train", 2000},
                {"val", 250},
                {"test", 500},
                {"clips", {{"train", 48}, {"val", 8}, {"test", 16}}},
                {"frames", kClipFrames},
                {"seeds", {0}},
                {"plant",
                 {{"motif_gain", p.motif_gain},
                  {"motif_radius", p.motif_radius},
                  {"background", p.background},
                  {"texture_amp", p.texture_amp},
                  {"pixel_noise", p.pixel_noise},
                  {"global_jitter", p.global_jitter},
                  {"landmark_jitter", p.landmark_jitter},
                  {"label_noise", p.label_noise},
                  {"silence_prob", p.acoustic.silence_prob}}}};
    }
    const json model = [] {
        auto j = to_json(ModelConfig{});
        for (const auto* k : {"image_width", "image_height", "channels", "patch", "task", "n_classes", "concepts"}) {
            j.erase(k);
        }
        return j;
    }();
    const json training = to_json(TrainConfig{});
    if (cmd == "train" || cmd == "ablate") {
        json j = {{"manifest", ""}, {"seeds", {0}}, {"eval_split", "test"}};
        j.update(model);
        j.update(training);
        if (cmd == "train") {
            j["stage"] = "visual";
            j["visual_checkpoint"] = "";
            auto f = to_json(FusionConfig{});
            f.erase("frames");
            j["fusion"] = f;
            j["modalities"] = {kAcoustic};
        }
        return j;
    }
    if (cmd == "eval") return {{"manifest", ""}, {"checkpoints", json::array()}, {"split", "test"}};
    if (cmd == "explain") {
        return {{"manifest", ""},  {"checkpoint", ""}, {"split", "test"}, {"samples", json::array()},
                {"count", 4},      {"top_k", 4},       {"render", true}};
    }
    if (cmd == "occlude") {
        return {{"manifest", ""},
                {"checkpoint", ""},
                {"split", "test"},
                {"regions", {"upper", "lower"}},
                {"fill", "zero"},
                {"fill_seed", 0},
                {"classes", json::array()},
                {"samples", json::array()}};
    }
    if (cmd == "gradcheck") return {{"instances", kFdInstances}, {"seeds", {0}}};
    throw ConfigError("unknown command " + cmd);
}

namespace detail {

inline void check_keys(const json& defaults, const json& given, const std::string& where)
{
    if (!given.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : given.items()) {
        if (!defaults.contains(key)) throw ConfigError("unknown config key " + where + "." + key);
        const auto& d = defaults.at(key);
        if (d.is_object() && !d.empty()) check_keys(d, value, where + "." + key);
    }
}

/// "a.b=value": value parsed as JSON, falling back to a plain string.
inline json set_layer(const std::vector<std::string>& sets)
{
    json out = json::object();
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got " + s);
        const auto key = s.substr(0, eq), raw = s.substr(eq + 1);
        json value = json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        json* node = &out;
        std::stringstream ss(key);
        std::string part;
        std::vector<std::string> parts;
        while (std::getline(ss, part, '.')) parts.push_back(part);
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
        (*node)[parts.back()] = value;
    }
    return out;
}

} // namespace detail

/// defaults <- config file section <- flag layer; later layers win.
inline json resolve_config(const std::string& cmd, const std::string& config_path, const json& flags)
{
    json resolved = command_defaults(cmd);
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ConfigError("cannot read config file " + config_path);
        const json file = json::parse(in, nullptr, false);
        if (file.is_discarded() || !file.is_object()) throw ConfigError("config file " + config_path + " is not a JSON object");
        for (const auto& [key, _] : file.items()) command_defaults(key); // rejects unknown sections
        if (file.contains(cmd)) {
            detail::check_keys(resolved, file.at(cmd), cmd);
            resolved.merge_patch(file.at(cmd));
        }
    }
    detail::check_keys(command_defaults(cmd), flags, cmd);
    resolved.merge_patch(flags);
    return resolved;
}

template <typename T>
T get(const json& j, const std::string& key)
{
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key " + key + ": " + e.what());
    }
}

inline std::vector<std::uint64_t> seeds_of(const json& cfg)
{
    auto seeds = get<std::vector<std::uint64_t>>(cfg, "seeds");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    return seeds;
}

/// AGCM_THREADS: positive integer, default 1. Kernels run on one thread,
/// so larger values are accepted and have no effect on results.
inline std::size_t thread_cap()
{
    const char* v = std::getenv("AGCM_THREADS");
    if (!v || !*v) return 1;
    char* end = nullptr;
    const auto n = std::strtoul(v, &end, 10);
    if (*end != '\0' || n == 0) throw ConfigError(std::string("AGCM_THREADS must be a positive integer, got ") + v);
    return n;
}

// Run directory -----------------------------------------------------------------

class Run {
public:
    Run(const fs::path& root, const std::string& cmd)
    {
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        gmtime_r(&now, &tm);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
        fs::create_directories(root);
        dir_ = root / (std::string(stamp) + "-" + cmd);
        for (int k = 1; fs::exists(dir_); ++k) dir_ = root / (std::string(stamp) + "-" + cmd + "-" + std::to_string(k));
        fs::create_directories(dir_);
        log_.open(dir_ / "log.txt", std::ios::binary);
    }

    const fs::path& dir() const { return dir_; }

    fs::path sub(const std::string& name) const
    {
        const auto p = dir_ / name;
        fs::create_directories(p);
        return p;
    }

    void info(const std::string& msg)
    {
        log_ << msg << '\n';
        log_.flush();
        std::cerr << msg << '\n';
    }

    void echo_config(const std::string& cmd, const json& cfg) const
    {
        write_text(dir_ / "config.json", json{{cmd, cfg}}.dump(2) + "\n");
    }

private:
    fs::path dir_;
    std::ofstream log_;
};

// Shared helpers ----------------------------------------------------------------

inline Dataset load_manifest(const json& cfg)
{
    const auto path = get<std::string>(cfg, "manifest");
    if (path.empty()) throw ConfigError("manifest path is required");
    return load_dataset(path);
}

inline std::vector<const Sample*> split_or_throw(const Dataset& d, const std::string& split)
{
    if (split != "train" && split != "val" && split != "test") throw ConfigError("unknown split " + split);
    auto v = split_view(d.samples, split);
    if (v.empty()) throw ConfigError("split " + split + " is empty");
    return v;
}

inline ModelConfig model_from_section(const json& cfg, const Dataset& d)
{
    auto base = model_config_from_json(cfg);
    auto mc = d.model_config(base);
    mc.validate();
    return mc;
}

inline TrainConfig train_from_section(const json& cfg)
{
    auto tc = train_config_from_json(cfg);
    tc.validate();
    return tc;
}

class EpochCsv {
public:
    explicit EpochCsv(const fs::path& path) : out_(path, std::ios::binary)
    {
        if (!out_) throw std::runtime_error("cannot write " + path.string());
        out_ << "stage,epoch,task,concept,map,total,val_loss,val_accuracy\n";
    }

    void operator()(const EpochRecord& r)
    {
        out_ << r.stage << ',' << r.epoch << ',' << format_double(r.task) << ',' << format_double(r.concept_loss) << ','
             << format_double(r.map) << ',' << format_double(r.total) << ',' << format_double(r.val_loss) << ','
             << format_double(r.val_accuracy) << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

/// Per-seed metric rows plus mean / sample stdev per metric.
class Aggregate {
public:
    void add(const std::string& row, std::uint64_t seed, const std::vector<std::pair<std::string, double>>& metrics)
    {
        rows_.push_back({row, seed, metrics});
        for (const auto& [k, _] : metrics) {
            if (std::find(names_.begin(), names_.end(), k) == names_.end()) names_.push_back(k);
        }
    }

    struct Stat {
        double mean = 0.0;
        double stdev = 0.0;
        std::size_t n = 0;
    };

    Stat stat(const std::string& row, const std::string& metric) const
    {
        std::vector<double> v;
        for (const auto& r : rows_) {
            if (r.row != row) continue;
            for (const auto& [k, x] : r.metrics) {
                if (k == metric && std::isfinite(x)) v.push_back(x);
            }
        }
        Stat s;
        s.n = v.size();
        if (v.empty()) return s;
        for (const double x : v) s.mean += x;
        s.mean /= static_cast<double>(v.size());
        if (v.size() > 1) {
            double ss = 0.0;
            for (const double x : v) ss += (x - s.mean) * (x - s.mean);
            s.stdev = std::sqrt(ss / static_cast<double>(v.size() - 1));
        }
        return s;
    }

    std::vector<std::string> row_names() const
    {
        std::vector<std::string> out;
        for (const auto& r : rows_) {
            if (std::find(out.begin(), out.end(), r.row) == out.end()) out.push_back(r.row);
        }
        return out;
    }

    void write_seeds(const fs::path& path, const std::string& row_header) const
    {
        std::string s = row_header + ",seed";
        for (const auto& n : names_) s += "," + n;
        s += "\n";
        for (const auto& r : rows_) {
            s += r.row + "," + std::to_string(r.seed);
            for (const auto& n : names_) {
                s += ",";
                for (const auto& [k, x] : r.metrics) {
                    if (k == n) s += format_double(x);
                }
            }
            s += "\n";
        }
        write_text(path, s);
    }

    void write_summary(const fs::path& path, const std::string& row_header) const
    {
        std::string s = row_header + ",metric,mean,stdev,n\n";
        for (const auto& row : row_names()) {
            for (const auto& n : names_) {
                const auto st = stat(row, n);
                s += row + "," + n + "," + format_double(st.mean) + "," + format_double(st.stdev) + "," +
                     std::to_string(st.n) + "\n";
            }
        }
        write_text(path, s);
    }

private:
    struct Row {
        std::string row;
        std::uint64_t seed;
        std::vector<std::pair<std::string, double>> metrics;
    };
    std::vector<Row> rows_;
    std::vector<std::string> names_;
};

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Commands ----------------------------------------------------------------------

inline int cmd_synth(const json& cfg, Run& run)
{
    const auto kind = get<std::string>(cfg, "kind");
    const auto seed = seeds_of(cfg).front();
    auto plant = default_plant();
    const auto& pj = cfg.at("plant");
    plant.motif_gain = get<double>(pj, "motif_gain");
    plant.motif_radius = get<double>(pj, "motif_radius");
    plant.background = get<double>(pj, "background");
    plant.texture_amp = get<double>(pj, "texture_amp");
    plant.pixel_noise = get<double>(pj, "pixel_noise");
    plant.global_jitter = get<double>(pj, "global_jitter");
    plant.landmark_jitter = get<double>(pj, "landmark_jitter");
    plant.label_noise = get<double>(pj, "label_noise");
    plant.acoustic.silence_prob = get<double>(pj, "silence_prob");
    plant.validate();
    Dataset d;
    if (kind == "visual") {
        d = generate_visual(plant,
                            SplitCounts{get<std::size_t>(cfg, "train"), get<std::size_t>(cfg, "val"),
                                        get<std::size_t>(cfg, "test")},
                            seed);
    } else if (kind == "multimodal") {
        const auto& c = cfg.at("clips");
        d = generate_multimodal(
            plant, SplitCounts{get<std::size_t>(c, "train"), get<std::size_t>(c, "val"), get<std::size_t>(c, "test")},
            get<std::size_t>(cfg, "frames"), seed);
    } else {
        throw ConfigError("synth kind must be visual or multimodal, got " + kind);
    }
    const auto dir = run.dir() / "dataset";
    write_dataset(dir, d);
    run.info("wrote " + std::to_string(d.samples.size()) + " samples, " + std::to_string(d.clips.size()) + " clips");
    std::cout << (dir / "manifest.json").string() << '\n';
    return kOk;
}

inline std::vector<std::pair<std::string, double>> with_epochs(std::vector<std::pair<std::string, double>> m,
                                                               std::size_t epochs)
{
    m.emplace_back("epochs", static_cast<double>(epochs));
    return m;
}

inline int train_fusion_stage(const json& cfg, const Dataset& d, Run& run)
{
    const auto ckpt_path = get<std::string>(cfg, "visual_checkpoint");
    if (ckpt_path.empty()) throw ConfigError("stage fusion requires --visual-checkpoint");
    if (d.clips.empty()) throw ConfigError("stage fusion needs a multimodal manifest");
    const auto visual = visual_from_checkpoint(read_checkpoint(ckpt_path));
    const auto names = get<std::vector<std::string>>(cfg, "modalities");
    bool acoustic = false;
    for (const auto& n : names) {
        if (n != kAcoustic) throw ConfigError("unknown temporal modality " + n);
        acoustic = true;
    }
    std::vector<TemporalModality> mods;
    if (acoustic) mods.push_back(acoustic_modality(d));
    auto fcfg = fusion_config_from_json(cfg.at("fusion"));
    fcfg.frames = d.clips.front().frames.size();
    const auto tc = train_from_section(cfg);
    const auto before = visual.params().digest();
    run.info("frozen visual digest " + hex64(before));

    const auto train = fusion_clips(d, "train", visual, acoustic);
    const auto val = fusion_clips(d, "val", visual, acoustic);
    const auto eval_split = get<std::string>(cfg, "eval_split");
    const auto test = fusion_clips(d, eval_split, visual, acoustic);
    if (train.empty() || test.empty()) throw ConfigError("fusion needs train and " + eval_split + " clips");
    Aggregate agg;
    for (const auto seed : seeds_of(cfg)) {
        const auto sdir = run.sub("seed" + std::to_string(seed));
        EpochCsv csv(sdir / "metrics.csv");
        auto res = train_fusion(train, val, visual.config(), mods, fcfg, tc, seed, std::ref(csv));
        auto ck = fusion_checkpoint(res.model, visual, res.log.epochs_run);
        write_checkpoint((sdir / "checkpoint.agcm").string(), ck);
        const auto preds = predict_frames(res.model, visual, test);
        write_frame_predictions_csv((sdir / "frames.csv").string(), res.model, preds);
        std::vector<int> p, l;
        for (const auto& f : preds) {
            p.push_back(f.predicted);
            l.push_back(f.label);
        }
        const auto cm = classification_metrics(p, l, visual.config().n_classes);
        agg.add("fusion", seed,
                with_epochs({{"frame_accuracy", 100.0 * cm.overall}, {"macro_f1", 100.0 * cm.macro_f1}},
                            res.log.epochs_run));
        run.info("seed " + std::to_string(seed) + ": frame accuracy " + format_double(100.0 * cm.overall));
    }
    const auto after = visual.params().digest();
    agg.write_seeds(run.dir() / "seeds.csv", "stage");
    agg.write_summary(run.dir() / "aggregate.csv", "stage");
    if (after != before) {
        run.info("visual branch changed during fusion training");
        return kFailed;
    }
    return kOk;
}

inline int cmd_train(const json& cfg, Run& run)
{
    const auto stage = get<std::string>(cfg, "stage");
    if (stage != "visual" && stage != "fusion" && stage != "by-step") {
        throw ConfigError("stage must be visual, fusion or by-step, got " + stage);
    }
    if (stage == "fusion" && get<std::string>(cfg, "visual_checkpoint").empty()) {
        throw ConfigError("stage fusion requires --visual-checkpoint");
    }
    const auto d = load_manifest(cfg);
    if (stage == "fusion") return train_fusion_stage(cfg, d, run);

    const auto mc = model_from_section(cfg, d);
    const auto tc = train_from_section(cfg);
    const auto eval_split = get<std::string>(cfg, "eval_split");
    const auto train = split_or_throw(d, "train");
    const auto val = split_view(d.samples, "val");
    const auto test = split_or_throw(d, eval_split);
    Aggregate agg;
    for (const auto seed : seeds_of(cfg)) {
        const auto sdir = run.sub("seed" + std::to_string(seed));
        EpochCsv csv(sdir / "metrics.csv");
        auto res = stage == "visual" ? train_visual(train, val, mc, tc, seed, {}, std::ref(csv))
                                     : train_by_step(train, val, mc, tc, seed, std::ref(csv));
        auto ck = visual_checkpoint(res.model, res.log.epochs_run);
        write_checkpoint((sdir / "checkpoint.agcm").string(), ck);
        const auto report = evaluate_visual(res.model, test, eval_split, seed);
        write_text(sdir / "eval.json", to_json(report).dump(2) + "\n");
        agg.add(stage, seed, with_epochs(flat_metrics(report), res.log.epochs_run));
        run.info("seed " + std::to_string(seed) + ": " + std::to_string(res.log.epochs_run) + " epochs, digest " +
                 hex64(ck.digest));
    }
    agg.write_seeds(run.dir() / "seeds.csv", "stage");
    agg.write_summary(run.dir() / "aggregate.csv", "stage");
    return kOk;
}

/// Toggle rows of the cumulative ablation, in order.
inline std::vector<std::pair<std::string, Toggles>> ablation_rows()
{
    return {{"none", {false, false, false, false}},
            {"msa", {true, false, false, false}},
            {"msa+mha", {true, true, false, false}},
            {"msa+mha+cacm", {true, true, true, false}},
            {"all", {true, true, true, true}}};
}

inline int cmd_ablate(const json& cfg, Run& run)
{
    const auto d = load_manifest(cfg);
    const auto base = model_from_section(cfg, d);
    const auto tc = train_from_section(cfg);
    const auto eval_split = get<std::string>(cfg, "eval_split");
    const auto train = split_or_throw(d, "train");
    const auto val = split_view(d.samples, "val");
    const auto test = split_or_throw(d, eval_split);
    Aggregate agg;
    for (const auto& [name, toggles] : ablation_rows()) {
        auto mc = base;
        mc.toggles = toggles;
        for (const auto seed : seeds_of(cfg)) {
            const auto sdir = run.sub("rows/" + name + "/seed" + std::to_string(seed));
            EpochCsv csv(sdir / "metrics.csv");
            auto res = train_visual(train, val, mc, tc, seed, {}, std::ref(csv));
            auto ck = visual_checkpoint(res.model, res.log.epochs_run);
            write_checkpoint((sdir / "checkpoint.agcm").string(), ck);
            const auto report = evaluate_visual(res.model, test, eval_split, seed);
            agg.add(name, seed, with_epochs(flat_metrics(report), res.log.epochs_run));
            run.info(name + " seed " + std::to_string(seed) + ": accuracy " +
                     format_double(report.classification ? 100.0 * report.classification->overall : 0.0));
        }
    }
    agg.write_seeds(run.dir() / "ablation_seeds.csv", "row");
    agg.write_summary(run.dir() / "ablation.csv", "row");
    return kOk;
}

inline int cmd_eval(const json& cfg, Run& run)
{
    const auto d = load_manifest(cfg);
    const auto split = get<std::string>(cfg, "split");
    const auto paths = get<std::vector<std::string>>(cfg, "checkpoints");
    if (paths.empty()) throw ConfigError("eval needs at least one --checkpoint");
    Aggregate agg;
    for (std::size_t k = 0; k < paths.size(); ++k) {
        const auto ck = read_checkpoint(paths[k]);
        const auto kind = ck.config.value("kind", "");
        const auto out = run.sub("checkpoint" + std::to_string(k));
        if (kind == "visual") {
            const auto model = visual_from_checkpoint(ck);
            const auto report = evaluate_visual(model, split_or_throw(d, split), split, ck.seed);
            auto j = to_json(report);
            j["checkpoint"] = paths[k];
            write_text(out / "report.json", j.dump(2) + "\n");
            agg.add("visual", ck.seed, flat_metrics(report));
        } else if (kind == "fusion") {
            const auto bundle = fusion_from_checkpoint(ck);
            const bool acoustic = !bundle.fusion.modalities().empty();
            const auto clips = fusion_clips(d, split, bundle.visual, acoustic);
            if (clips.empty()) throw ConfigError("no " + split + " clips in the manifest");
            const auto preds = predict_frames(bundle.fusion, bundle.visual, clips);
            write_frame_predictions_csv((out / "frames.csv").string(), bundle.fusion, preds);
            std::vector<int> p, l;
            for (const auto& f : preds) {
                p.push_back(f.predicted);
                l.push_back(f.label);
            }
            const auto cm = classification_metrics(p, l, bundle.visual.config().n_classes);
            json j = {{"checkpoint", paths[k]},
                      {"split", split},
                      {"seed", ck.seed},
                      {"frame_accuracy", 100.0 * cm.overall},
                      {"macro_f1", 100.0 * cm.macro_f1}};
            write_text(out / "report.json", j.dump(2) + "\n");
            agg.add("fusion", ck.seed, {{"frame_accuracy", 100.0 * cm.overall}, {"macro_f1", 100.0 * cm.macro_f1}});
        } else {
            throw ConfigError("checkpoint " + paths[k] + " has unknown kind '" + kind + "'");
        }
    }
    agg.write_seeds(run.dir() / "seeds.csv", "kind");
    agg.write_summary(run.dir() / "aggregate.csv", "kind");
    return kOk;
}

inline std::vector<const Sample*> pick_samples(const Dataset& d, const std::string& split,
                                               const std::vector<std::string>& ids, std::size_t count)
{
    const auto pool = split_or_throw(d, split);
    if (ids.empty()) return {pool.begin(), pool.begin() + static_cast<long>(std::min(count, pool.size()))};
    std::vector<const Sample*> out;
    for (const auto& id : ids) {
        const auto it = std::find_if(d.samples.begin(), d.samples.end(), [&](const Sample& s) { return s.id == id; });
        if (it == d.samples.end()) throw ConfigError("unknown sample id " + id);
        out.push_back(&*it);
    }
    return out;
}

inline std::string safe_name(std::string s)
{
    for (auto& c : s) {
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_') c = '_';
    }
    return s;
}

inline void explain_frames(const VisualModel& model, std::span<const Sample* const> samples, const json& cfg,
                           const fs::path& dir)
{
    const auto top_k = get<std::size_t>(cfg, "top_k");
    const bool render = get<bool>(cfg, "render");
    for (const auto* s : samples) {
        const auto e = explain_sample(model, *s, top_k);
        std::map<std::string, std::string> renders;
        if (render) {
            write_ppm((dir / (s->id + "_input.ppm")).string(), s->image);
            for (const auto& c : e.concepts) {
                const auto name = s->id + "_" + safe_name(c.name) + ".ppm";
                render_heatmap(c.attn, &s->image, (dir / name).string());
                renders[c.name] = name;
            }
            const auto name = s->id + "_weighted.ppm";
            render_heatmap(e.weighted, &s->image, (dir / name).string());
            renders["weighted"] = name;
        }
        write_text(dir / (s->id + ".json"), to_json(e, renders).dump(2) + "\n");
    }
}

inline int cmd_explain(const json& cfg, Run& run)
{
    const auto d = load_manifest(cfg);
    const auto ck = read_checkpoint(get<std::string>(cfg, "checkpoint"));
    const auto split = get<std::string>(cfg, "split");
    const auto ids = get<std::vector<std::string>>(cfg, "samples");
    const auto count = get<std::size_t>(cfg, "count");
    const auto dir = run.sub("explain");
    const auto kind = ck.config.value("kind", "");
    if (kind == "visual") {
        const auto model = visual_from_checkpoint(ck);
        explain_frames(model, pick_samples(d, split, ids, count), cfg, dir);
        return kOk;
    }
    if (kind != "fusion") throw ConfigError("checkpoint has unknown kind '" + kind + "'");
    // clips: one timeline CSV each, plus per-frame explanations
    const auto bundle = fusion_from_checkpoint(ck);
    const bool acoustic = !bundle.fusion.modalities().empty();
    auto clips = fusion_clips(d, split, bundle.visual, acoustic);
    std::vector<FusionClip> chosen;
    for (auto& c : clips) {
        const bool wanted = ids.empty() ? chosen.size() < count : std::find(ids.begin(), ids.end(), c.id) != ids.end();
        if (wanted) chosen.push_back(std::move(c));
    }
    if (chosen.empty()) throw ConfigError("no clips selected for explanation");
    for (const auto& c : chosen) {
        const FusionClip one[] = {c};
        const auto preds = predict_frames(bundle.fusion, bundle.visual, one);
        write_frame_predictions_csv((dir / ("timeline_" + c.id + ".csv")).string(), bundle.fusion, preds);
        explain_frames(bundle.visual, c.frames, cfg, dir);
    }
    return kOk;
}

inline int cmd_occlude(const json& cfg, Run& run)
{
    const auto d = load_manifest(cfg);
    const auto model = visual_from_checkpoint(read_checkpoint(get<std::string>(cfg, "checkpoint")));
    const auto& mc = model.config();
    std::vector<Region> regions;
    for (const auto& r : get<std::vector<std::string>>(cfg, "regions")) regions.push_back(parse_region(r));
    if (regions.empty()) throw ConfigError("occlude needs at least one region");
    const auto fill_name = get<std::string>(cfg, "fill");
    if (fill_name != "zero" && fill_name != "noise") throw ConfigError("fill must be zero or noise");
    const OcclusionFill fill{fill_name == "noise", get<std::uint64_t>(cfg, "fill_seed")};
    const auto classes = get<std::vector<int>>(cfg, "classes");
    auto samples = pick_samples(d, get<std::string>(cfg, "split"), get<std::vector<std::string>>(cfg, "samples"),
                                std::numeric_limits<std::size_t>::max());
    if (!classes.empty()) {
        std::erase_if(samples, [&](const Sample* s) {
            return std::find(classes.begin(), classes.end(), s->label) == classes.end();
        });
    }
    if (samples.empty()) throw ConfigError("no samples selected for occlusion");
    for (const auto& r : regions) r.resolve(mc.image_width, mc.image_height);

    std::string rows = "sample_id,label,region,concept,p_before,p_after,delta,pred_before,pred_after\n";
    const auto n = mc.n_concepts();
    std::vector<std::vector<double>> before(regions.size() * n), after(regions.size() * n);
    std::vector<std::size_t> correct_before(regions.size(), 0), correct_after(regions.size(), 0);
    for (const auto* s : samples) {
        const auto report = occlusion_report(model, *s, regions, fill);
        for (std::size_t r = 0; r < report.size(); ++r) {
            const auto& row = report[r];
            correct_before[r] += row.predicted_before == s->label;
            correct_after[r] += row.predicted_after == s->label;
            for (std::size_t i = 0; i < n; ++i) {
                rows += s->id + "," + std::to_string(s->label) + "," + row.region + "," + mc.concepts[i].name + "," +
                        format_double(row.before[i]) + "," + format_double(row.after[i]) + "," +
                        format_double(row.delta[i]) + "," + std::to_string(row.predicted_before) + "," +
                        std::to_string(row.predicted_after) + "\n";
                before[r * n + i].push_back(row.before[i]);
                after[r * n + i].push_back(row.after[i]);
            }
        }
    }
    write_text(run.dir() / "occlusion.csv", rows);
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (const double x : v) s += x;
        return v.empty() ? 0.0 : s / static_cast<double>(v.size());
    };
    std::string summary = "region,concept,mean_p_before,mean_p_after,accuracy_before,accuracy_after\n";
    const double N = static_cast<double>(samples.size());
    for (std::size_t r = 0; r < regions.size(); ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            summary += regions[r].name() + "," + mc.concepts[i].name + "," + format_double(mean(before[r * n + i])) +
                       "," + format_double(mean(after[r * n + i])) + "," +
                       format_double(100.0 * static_cast<double>(correct_before[r]) / N) + "," +
                       format_double(100.0 * static_cast<double>(correct_after[r]) / N) + "\n";
        }
    }
    write_text(run.dir() / "occlusion_summary.csv", summary);
    return kOk;
}

inline int cmd_gradcheck(const json& cfg, Run& run)
{
    const auto instances = get<std::size_t>(cfg, "instances");
    if (instances == 0) throw ConfigError("instances must be positive");
    std::string csv = "seed,operator,instances,failures,max_abs_err,max_rel_err,status\n";
    bool ok = true;
    for (const auto seed : seeds_of(cfg)) {
        for (const auto& r : run_gradcheck(seed, instances)) {
            ok = ok && r.ok();
            csv += std::to_string(seed) + "," + r.op + "," + std::to_string(r.instances) + "," +
                   std::to_string(r.failures) + "," + format_double(r.max_abs_err) + "," +
                   format_double(r.max_rel_err) + "," + (r.ok() ? "PASS" : "FAIL") + "\n";
            std::printf("%-24s %-4s abs=%.3e rel=%.3e\n", r.op.c_str(), r.ok() ? "PASS" : "FAIL", r.max_abs_err,
                        r.max_rel_err);
        }
    }
    write_text(run.dir() / "gradcheck.csv", csv);
    run.info(ok ? "all gradient checks passed" : "gradient check failures");
    return ok ? kOk : kFailed;
}

/// Checks that need no files, run before the run directory exists.
inline void precheck(const std::string& cmd, const json& cfg)
{
    if (cfg.contains("seeds")) seeds_of(cfg);
    if (cmd == "synth") {
        const auto kind = get<std::string>(cfg, "kind");
        if (kind != "visual" && kind != "multimodal") throw ConfigError("synth kind must be visual or multimodal");
    }
    if (cmd == "train") {
        const auto stage = get<std::string>(cfg, "stage");
        if (stage != "visual" && stage != "fusion" && stage != "by-step") {
            throw ConfigError("stage must be visual, fusion or by-step, got " + stage);
        }
        if (stage == "fusion" && get<std::string>(cfg, "visual_checkpoint").empty()) {
            throw ConfigError("stage fusion requires --visual-checkpoint");
        }
    }
    if (cmd == "train" || cmd == "ablate") {
        model_config_from_json(cfg);
        train_from_section(cfg);
    }
    if (cmd == "train") fusion_config_from_json(cfg.at("fusion"));
    if (cmd != "synth" && cmd != "gradcheck" && get<std::string>(cfg, "manifest").empty()) {
        throw ConfigError("--manifest is required");
    }
    if (cmd == "occlude") {
        const auto fill = get<std::string>(cfg, "fill");
        if (fill != "zero" && fill != "noise") throw ConfigError("fill must be zero or noise");
        for (const auto& r : get<std::vector<std::string>>(cfg, "regions")) parse_region(r);
    }
}

// Entry point -------------------------------------------------------------------

struct CommonFlags {
    std::string config;
    std::vector<std::uint64_t> seeds;
    std::string out = "runs";
    std::vector<std::string> sets;
};

inline int dispatch(const std::string& cmd, const json& cfg, Run& run)
{
    if (cmd == "synth") return cmd_synth(cfg, run);
    if (cmd == "train") return cmd_train(cfg, run);
    if (cmd == "eval") return cmd_eval(cfg, run);
    if (cmd == "explain") return cmd_explain(cfg, run);
    if (cmd == "occlude") return cmd_occlude(cfg, run);
    if (cmd == "gradcheck") return cmd_gradcheck(cfg, run);
    if (cmd == "ablate") return cmd_ablate(cfg, run);
    throw ConfigError("unknown command " + cmd);
}

inline int main(int argc, char** argv)
{
    CLI::App app{"agcm: interpretable concept-bottleneck models on planted corpora"};
    app.require_subcommand(1);
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"synth", "generate a planted corpus"},
        {"train", "train visual, by-step or fusion models"},
        {"eval", "evaluate checkpoints on a split"},
        {"explain", "concept explanations with attention renders"},
        {"occlude", "region occlusion report"},
        {"gradcheck", "finite-difference gradient checks"},
        {"ablate", "cumulative component ablation"}};
    std::map<std::string, CommonFlags> common;
    std::map<std::string, json> flag_layers;
    // specific flags, written into the flag layer when given
    std::map<std::string, std::map<std::string, std::string>> text_flags;
    std::map<std::string, std::vector<std::string>> ckpt_flags;
    for (const auto& [name, help] : commands) {
        auto* sub = app.add_subcommand(name, help);
        auto& c = common[name];
        sub->add_option("--config", c.config, "JSON config file");
        sub->add_option("--seed", c.seeds, "seed (repeatable)");
        sub->add_option("--out", c.out, "root directory for run outputs");
        sub->add_option("--set", c.sets, "key=value override (repeatable, dotted keys)");
        auto& t = text_flags[name];
        if (name != "gradcheck" && name != "synth") sub->add_option("--manifest", t["manifest"], "dataset manifest");
        if (name == "synth") sub->add_option("--kind", t["kind"], "visual or multimodal");
        if (name == "train") {
            sub->add_option("--stage", t["stage"], "visual, by-step or fusion");
            sub->add_option("--visual-checkpoint", t["visual_checkpoint"], "frozen visual checkpoint for fusion");
        }
        if (name == "eval") sub->add_option("--checkpoint", ckpt_flags[name], "checkpoint (repeatable)");
        if (name == "explain" || name == "occlude") sub->add_option("--checkpoint", t["checkpoint"], "checkpoint");
        if (name == "eval" || name == "explain" || name == "occlude") sub->add_option("--split", t["split"], "split");
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfigError;
    }
    const auto cmd = app.get_subcommands().front()->get_name();
    const auto& c = common[cmd];
    try {
        thread_cap();
        json flags = detail::set_layer(c.sets);
        for (const auto& [key, value] : text_flags[cmd]) {
            if (!value.empty()) flags[key] = value;
        }
        if (!ckpt_flags[cmd].empty()) flags["checkpoints"] = ckpt_flags[cmd];
        if (!c.seeds.empty()) {
            if (!command_defaults(cmd).contains("seeds")) throw ConfigError(cmd + " does not take --seed");
            flags["seeds"] = c.seeds;
        }
        const auto cfg = resolve_config(cmd, c.config, flags);
        precheck(cmd, cfg);
        Run run(c.out, cmd);
        run.echo_config(cmd, cfg);
        std::cout << run.dir().string() << '\n';
        const int rc = dispatch(cmd, cfg, run);
        run.info(rc == kOk ? "done" : "finished with failures");
        return rc;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const ShapeError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumericError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kFailed;
    }
}

} // namespace agcm::cli
