// Acceptance run: one PASS/FAIL line per criterion. Criteria can be picked
// with AGCM_ACCEPTANCE=1,4,9 (default: all). Exit status is nonzero when any
// selected criterion fails. The same lines are written to
// acceptance_results.txt in the working directory.

#include "cli_harness.hpp"
#include "metric_oracles.hpp"
#include "oracles.hpp"

#include "agcm/evaluate.hpp"
#include "agcm/explain.hpp"
#include "agcm/fusion.hpp"
#include "agcm/gradcheck.hpp"
#include "agcm/roimaps.hpp"
#include "agcm/synthdata.hpp"
#include "agcm/train.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>

using namespace agcm;
using namespace agcm::testing;

namespace {

// Pinned thresholds.
constexpr std::uint64_t kSeeds[] = {0, 1, 2, 3};
constexpr double kMinAccuracy = 95.0;     // criterion 4, percent
constexpr double kMinConceptAuc = 0.95;   // criterion 4, every concept
constexpr double kMinMapCosine = 0.7;     // criterion 4
constexpr double kMinAblationGap = 1.0;   // criterion 5, points
constexpr double kMinFusionGain = 3.0;    // criterion 6, points
constexpr double kMinCasMargin = 5.0;     // criterion 8, points
constexpr double kMaxOccludedProb = 0.5;  // criterion 9
constexpr double kMinOccludedAcc = 90.0;  // criterion 9, percent
constexpr double kOracleTol = 1e-12;      // criteria 3 and 10
constexpr std::size_t kOracleCases = 100; // criteria 2 and 3
constexpr std::size_t kMetricLength = 8;  // criterion 10

// Runtime budgets in seconds.
constexpr double kBudgetGrad = 120, kBudgetOracle = 10, kBudgetRecovery = 1800, kBudgetAblation = 9000,
                 kBudgetFusion = 3600;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double mean(const std::vector<double>& v)
{
    double s = 0.0;
    for (const double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string fmt(double v, int digits = 2)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string sci(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

std::string join(const std::vector<double>& v, int digits = 2)
{
    std::string s;
    for (const double x : v) s += (s.empty() ? "" : "/") + fmt(x, digits);
    return s;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Shared visual corpus and cached training runs -----------------------------------

struct VisualRun {
    double accuracy = 0.0; // percent
    double cas = 0.0;      // percent
    double map_cosine = 0.0;
    std::vector<double> auc;
    double seconds = 0.0;
    std::size_t epochs = 0;
    std::optional<VisualModel> model; // kept for the full model only
};

const Dataset& corpus()
{
    static const Dataset d = generate_visual(default_plant(), SplitCounts{2000, 250, 500}, 0);
    return d;
}

std::vector<const Sample*> split(const std::string& name) { return split_view(corpus().samples, name); }

VisualRun summarize(const VisualModel& model, std::uint64_t seed, std::size_t epochs, Clock::time_point t0)
{
    const auto test = split("test");
    const auto r = evaluate_visual(model, test, "test", seed);
    VisualRun run;
    run.accuracy = 100.0 * r.classification->overall;
    run.cas = r.cas;
    run.map_cosine = r.map_cosine;
    for (const auto& a : r.concept_auc) run.auc.push_back(a.value_or(0.0));
    run.epochs = epochs;
    run.seconds = seconds_since(t0);
    return run;
}

/// One training run per (variant, seed), computed once.
const VisualRun& visual_run(const std::string& variant, std::uint64_t seed)
{
    static std::map<std::pair<std::string, std::uint64_t>, VisualRun> cache;
    const auto key = std::make_pair(variant, seed);
    if (auto it = cache.find(key); it != cache.end()) return it->second;

    auto cfg = corpus().model_config();
    const TrainConfig tc;
    const auto train = split("train"), val = split("val");
    const auto t0 = Clock::now();
    VisualRun run;
    if (variant == "by-step") {
        const auto res = train_by_step(train, val, cfg, tc, seed);
        run = summarize(res.model, seed, res.log.epochs_run, t0);
    } else {
        if (variant == "no-concept-loss") {
            cfg.lambda_concept = 0.0;
        } else {
            // toggle string msa/mha/cacm/cml
            cfg.toggles = {variant[0] == '1', variant[1] == '1', variant[2] == '1', variant[3] == '1'};
        }
        auto res = train_visual(train, val, cfg, tc, seed);
        run = summarize(res.model, seed, res.log.epochs_run, t0);
        if (variant == "1111") run.model.emplace(std::move(res.model));
    }
    std::fprintf(stderr, "  [%s seed %llu] acc %.2f cas %.2f cos %.3f epochs %zu (%.0f s)\n", variant.c_str(),
                 static_cast<unsigned long long>(seed), run.accuracy, run.cas, run.map_cosine, run.epochs, run.seconds);
    return cache.emplace(key, std::move(run)).first->second;
}

std::vector<double> over_seeds(const std::string& variant, const std::function<double(const VisualRun&)>& f)
{
    std::vector<double> out;
    for (const auto s : kSeeds) out.push_back(f(visual_run(variant, s)));
    return out;
}

double variant_seconds(const std::string& variant)
{
    return mean(over_seeds(variant, [](const VisualRun& r) { return r.seconds; })) * std::size(kSeeds);
}

// Criteria ---------------------------------------------------------------------------

Outcome gradient_fidelity()
{
    const auto t0 = Clock::now();
    const auto results = run_gradcheck(0, kFdInstances);
    const double secs = seconds_since(t0);
    std::size_t failed = 0;
    double worst_abs = 0.0;
    std::string names;
    for (const auto& r : results) {
        if (!r.ok() || r.instances != kFdInstances) {
            ++failed;
            names += " " + r.op;
        }
        worst_abs = std::max(worst_abs, r.max_abs_err);
    }
    return {failed == 0 && secs < kBudgetGrad,
            std::to_string(results.size()) + " checks x " + std::to_string(kFdInstances) + " instances, " +
                std::to_string(failed) + " failing" + names + ", max abs err " + sci(worst_abs) + ", " + fmt(secs, 1) + " s"};
}

Outcome patchify_oracle()
{
    const auto t0 = Clock::now();
    CounterRng rng(101);
    std::size_t mismatches = 0;
    for (std::size_t trial = 0; trial < kOracleCases; ++trial) {
        const std::size_t sx = 1 + rng.below(8), sy = 1 + rng.below(8);
        const std::size_t cols = sx * (1 + rng.below(8)), rows = sy * (1 + rng.below(8));
        std::vector<double> v(rows * cols);
        for (auto& x : v) x = trial % 4 == 0 ? static_cast<double>(rng.below(2)) : rng.uniform();
        const RoiMap roi{0, Grid(rows, cols, v)};
        mismatches += patchify(roi, sx, sy).grid.values != block_sum_oracle(roi.grid, sx, sy).values;
    }
    const double secs = seconds_since(t0);
    return {mismatches == 0 && secs < kBudgetOracle,
            std::to_string(kOracleCases) + " maps, " + std::to_string(mismatches) + " inexact, " + fmt(secs, 3) + " s"};
}

Outcome weighted_map_equivalence()
{
    const auto t0 = Clock::now();
    CounterRng rng(202);
    double worst = 0.0;
    std::size_t degenerate = 0;
    for (std::size_t trial = 0; trial < kOracleCases; ++trial) {
        const std::size_t n = 1 + rng.below(8), rows = 1 + rng.below(6), cols = 1 + rng.below(6);
        const bool all_below = trial % 10 == 0;
        degenerate += all_below;
        std::vector<Grid> maps;
        std::vector<std::vector<double>> raw;
        std::vector<double> probs;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<double> v(rows * cols);
            for (auto& x : v) x = rng.uniform();
            raw.push_back(v);
            maps.emplace_back(rows, cols, v);
            probs.push_back(all_below ? rng.uniform(0.0, 0.49) : rng.uniform());
        }
        const auto got = weighted_map(maps, probs, 0.5);
        const auto want = weighted_map_oracle(raw, probs, 0.5);
        if (got.values.size() != want.size()) return {false, "size mismatch in trial " + std::to_string(trial)};
        for (std::size_t k = 0; k < want.size(); ++k) worst = std::max(worst, std::abs(got.values[k] - want[k]));
    }
    const double secs = seconds_since(t0);
    return {worst <= kOracleTol && secs < kBudgetOracle,
            std::to_string(kOracleCases) + " instances (" + std::to_string(degenerate) + " all below rho), max err " +
                sci(worst) + ", " + fmt(secs, 3) + " s"};
}

Outcome synthetic_recovery()
{
    const auto acc = over_seeds("1111", [](const VisualRun& r) { return r.accuracy; });
    const auto cos = over_seeds("1111", [](const VisualRun& r) { return r.map_cosine; });
    const auto n = corpus().visual_concepts().size();
    std::vector<double> auc(n, 0.0);
    for (const auto s : kSeeds) {
        for (std::size_t i = 0; i < n; ++i) auc[i] += visual_run("1111", s).auc[i] / std::size(kSeeds);
    }
    const double min_auc = *std::min_element(auc.begin(), auc.end());
    const double secs = variant_seconds("1111");
    return {mean(acc) >= kMinAccuracy && min_auc >= kMinConceptAuc && mean(cos) >= kMinMapCosine &&
                secs < kBudgetRecovery,
            "accuracy " + fmt(mean(acc)) + " (" + join(acc) + "), min concept AUC " + fmt(min_auc, 4) + " (" +
                join(auc, 3) + "), map cosine " + fmt(mean(cos), 3) + ", " + fmt(secs / 60.0, 1) + " min"};
}

Outcome ablation_ordering()
{
    const std::vector<std::pair<std::string, std::string>> rows = {
        {"0000", "none"}, {"1000", "MSA"}, {"1100", "+MHA"}, {"1110", "+CACM"}, {"1111", "+CML"}};
    std::vector<double> means;
    std::string detail;
    double secs = 0.0;
    for (const auto& [variant, label] : rows) {
        const auto acc = over_seeds(variant, [](const VisualRun& r) { return r.accuracy; });
        means.push_back(mean(acc));
        secs += variant_seconds(variant);
        detail += label + " " + fmt(means.back()) + " (" + join(acc) + "); ";
    }
    bool ordered = true;
    for (std::size_t i = 1; i < means.size(); ++i) ordered = ordered && means[i] >= means[i - 1];
    const double gap = means.back() - means.front();
    return {ordered && gap >= kMinAblationGap && secs < kBudgetAblation,
            detail + (ordered ? "non-decreasing" : "NOT monotone") + ", gap " + fmt(gap) + ", " +
                fmt(secs / 60.0, 1) + " min"};
}

Outcome fusion_gain()
{
    const auto t0 = Clock::now();
    const auto data = generate_multimodal(default_plant(), SplitCounts{48, 8, 16}, kClipFrames, 0);
    const auto vtrain = split_view(data.samples, "train"), vval = split_view(data.samples, "val");
    const auto visual = train_visual(vtrain, vval, data.model_config(), TrainConfig{}, 0).model;
    const auto digest = visual.params().digest();

    const auto with = [&](bool acoustic) {
        const auto train = fusion_clips(data, "train", visual, acoustic);
        const auto val = fusion_clips(data, "val", visual, acoustic);
        const auto test = fusion_clips(data, "test", visual, acoustic);
        std::vector<TemporalModality> mods;
        if (acoustic) mods.push_back(acoustic_modality(data));
        std::vector<double> acc;
        for (const auto s : kSeeds) {
            const auto res = train_fusion(train, val, visual.config(), mods, FusionConfig{}, TrainConfig{}, s);
            acc.push_back(100.0 * frame_accuracy(predict_frames(res.model, visual, test)));
            std::fprintf(stderr, "  [fusion %s seed %llu] frame acc %.2f epochs %zu\n",
                         acoustic ? "audio+visual" : "visual-only", static_cast<unsigned long long>(s), acc.back(),
                         res.log.epochs_run);
        }
        return acc;
    };
    const auto fused = with(true), visual_only = with(false);
    const bool frozen = visual.params().digest() == digest;
    const double gain = mean(fused) - mean(visual_only), secs = seconds_since(t0);
    return {gain >= kMinFusionGain && frozen && secs < kBudgetFusion,
            "fused " + fmt(mean(fused)) + " (" + join(fused) + ") vs visual-only " + fmt(mean(visual_only)) + " (" +
                join(visual_only) + "), gain " + fmt(gain) + ", visual digest " +
                (frozen ? "unchanged" : "CHANGED") + ", " + fmt(secs / 60.0, 1) + " min"};
}

Outcome end_to_end_vs_by_step()
{
    const auto e2e = over_seeds("1111", [](const VisualRun& r) { return r.accuracy; });
    const auto bs = over_seeds("by-step", [](const VisualRun& r) { return r.accuracy; });
    return {mean(e2e) >= mean(bs), "end-to-end " + fmt(mean(e2e)) + " (" + join(e2e) + ") vs by-step " +
                                       fmt(mean(bs)) + " (" + join(bs) + "), " +
                                       fmt(variant_seconds("by-step") / 60.0, 1) + " min extra"};
}

Outcome cas_direction()
{
    const auto sup = over_seeds("1111", [](const VisualRun& r) { return r.cas; });
    const auto none = over_seeds("no-concept-loss", [](const VisualRun& r) { return r.cas; });
    const double margin = mean(sup) - mean(none);
    return {margin >= kMinCasMargin, "CAS supervised " + fmt(mean(sup)) + " (" + join(sup) + ") vs no concept loss " +
                                         fmt(mean(none)) + " (" + join(none) + "), margin " + fmt(margin)};
}

Outcome occlusion_behavior()
{
    // Test samples of the redundancy classes with both members planted; the
    // upper half hides the upper member, the lower one stays visible.
    const auto& plant = default_plant();
    const auto test = split("test");
    const auto region = parse_region("upper");
    std::vector<double> before_sum(plant.redundancy_pairs.size()), after_sum(before_sum.size());
    std::vector<std::size_t> count(before_sum.size());
    std::size_t kept = 0, total = 0;
    std::vector<double> acc_per_seed, p_per_seed;
    for (const auto s : kSeeds) {
        const auto& model = *visual_run("1111", s).model;
        std::size_t seed_kept = 0, seed_total = 0;
        double seed_p = 0.0;
        std::size_t seed_n = 0;
        for (const auto* sample : test) {
            for (std::size_t k = 0; k < plant.redundancy_pairs.size(); ++k) {
                const auto [upper, lower] = plant.redundancy_pairs[k];
                if (sample->label != static_cast<int>(k)) continue;
                if (sample->concepts[upper] < 0.5 || sample->concepts[lower] < 0.5) continue;
                const auto rows = occlusion_report(model, *sample, {region});
                before_sum[k] += rows[0].before[upper];
                after_sum[k] += rows[0].after[upper];
                ++count[k];
                seed_p += rows[0].after[upper];
                ++seed_n;
                seed_kept += rows[0].predicted_after == sample->label;
                ++seed_total;
            }
        }
        kept += seed_kept;
        total += seed_total;
        acc_per_seed.push_back(100.0 * static_cast<double>(seed_kept) / static_cast<double>(seed_total));
        p_per_seed.push_back(seed_p / static_cast<double>(seed_n));
    }
    bool dropped = true;
    std::string detail;
    for (std::size_t k = 0; k < count.size(); ++k) {
        const double b = before_sum[k] / static_cast<double>(count[k]), a = after_sum[k] / static_cast<double>(count[k]);
        dropped = dropped && a < kMaxOccludedProb;
        detail += plant.concepts[plant.redundancy_pairs[k].first].name + " p " + fmt(b, 3) + " -> " + fmt(a, 3) + "; ";
    }
    const double acc = 100.0 * static_cast<double>(kept) / static_cast<double>(total);
    return {dropped && acc >= kMinOccludedAcc,
            detail + "accuracy after occlusion " + fmt(acc) + " (" + join(acc_per_seed) + ") over " +
                std::to_string(total) + " sample-seed pairs"};
}

Outcome metric_oracles()
{
    const auto t0 = Clock::now();
    std::uint64_t checked = 0;
    const auto bad = enumerate_metric_mismatches(kMetricLength, checked);

    CounterRng rng(303);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + rng.below(50);
        std::vector<double> p(n), l(n);
        for (std::size_t i = 0; i < n; ++i) {
            l[i] = rng.uniform(-1.0, 1.0);
            p[i] = 0.6 * l[i] + rng.uniform(-0.5, 0.5);
        }
        worst = std::max(worst, std::abs(ccc(p, l) - ccc_direct(p, l)));
    }
    std::vector<double> x(20);
    for (auto& v : x) v = rng.uniform(-2.0, 2.0);
    const double self = ccc(x, x);
    // shifted mean: 2 var / (2 var + c^2)
    const double c = 0.7;
    std::vector<double> y = x;
    for (auto& v : y) v += c;
    double mx = 0.0, var = 0.0;
    for (const double v : x) mx += v / static_cast<double>(x.size());
    for (const double v : x) var += (v - mx) * (v - mx) / static_cast<double>(x.size());
    const double shift_err = std::abs(ccc(x, y) - 2.0 * var / (2.0 * var + c * c));
    const bool ok = bad == 0 && worst <= kOracleTol && std::abs(self - 1.0) <= kOracleTol && shift_err <= kOracleTol;
    return {ok, std::to_string(checked) + " prediction/label pairs up to length " + std::to_string(kMetricLength) +
                    ", " + std::to_string(bad) + " mismatches; CCC max err " + sci(worst) + ", |CCC(x,x) - 1| " + sci(std::abs(self - 1.0)) +
                    ", shifted-mean err " + sci(shift_err) + ", " + fmt(seconds_since(t0), 1) + " s"};
}

Outcome cli_determinism()
{
    const auto root = fresh_dir("agcm_acceptance_cli");
    auto syn = run_cli("synth --out '" + root.string() + "' --set train=64 --set val=16 --set test=16");
    if (syn.code != 0 || syn.lines.size() != 2) return {false, "synth exited " + std::to_string(syn.code)};
    const auto manifest = syn.lines[1];
    const auto syn2 = run_cli("synth --out '" + root.string() + "' --set train=64 --set val=16 --set test=16");
    const auto m = "--manifest '" + manifest + "' --out '" + root.string() + "' ";
    const std::string small = "--set d_model=32 --set backbone_layers=1 --set mlp_hidden=32 --set max_epochs=3 ";

    std::vector<std::string> diffs;
    auto twice = [&](const std::string& args) -> std::string {
        const auto a = run_cli(args), b = run_cli(args);
        if (a.code != 0 || b.code != 0) {
            diffs.push_back("exit " + std::to_string(a.code) + "/" + std::to_string(b.code) + " for " + args);
            return {};
        }
        for (const auto& f : tree_differences(a.lines.at(0), b.lines.at(0))) diffs.push_back(f);
        return a.lines.at(0);
    };
    if (syn2.code == 0) {
        for (const auto& f : tree_differences(fs::path(manifest).parent_path(), fs::path(syn2.lines[1]).parent_path()))
            diffs.push_back("dataset/" + f);
    }
    const auto run = twice("train " + m + small + "--seed 7");
    if (run.empty()) return {false, diffs.front()};
    const auto ck = (fs::path(run) / "seed7" / "checkpoint.agcm").string();
    twice("eval " + m + "--checkpoint '" + ck + "'");
    twice("explain " + m + "--checkpoint '" + ck + "' --set count=3");
    twice("occlude " + m + "--checkpoint '" + ck + "' --set fill=noise --set fill_seed=3");
    twice("train --stage by-step " + m + small);
    const auto files = tree(root).size();
    std::string detail = std::to_string(files) + " files written, " + std::to_string(diffs.size()) + " differing";
    for (std::size_t i = 0; i < std::min<std::size_t>(diffs.size(), 5); ++i) detail += " " + diffs[i];
    return {diffs.empty(), detail};
}

std::set<int> selected()
{
    std::set<int> out;
    const char* env = std::getenv("AGCM_ACCEPTANCE");
    if (!env || !*env) {
        for (int i = 1; i <= 11; ++i) out.insert(i);
        return out;
    }
    std::stringstream ss(env);
    for (std::string tok; std::getline(ss, tok, ',');) out.insert(std::stoi(tok));
    return out;
}

} // namespace

int main()
{
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"gradient fidelity", gradient_fidelity},
        {"patch map oracle", patchify_oracle},
        {"weighted map oracle", weighted_map_equivalence},
        {"synthetic recovery", synthetic_recovery},
        {"ablation ordering", ablation_ordering},
        {"fusion gain", fusion_gain},
        {"end-to-end vs by-step", end_to_end_vs_by_step},
        {"CAS direction", cas_direction},
        {"occlusion behavior", occlusion_behavior},
        {"metric oracles", metric_oracles},
        {"CLI determinism", cli_determinism},
    };
    const auto pick = selected();
    std::ofstream results("acceptance_results.txt");
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!pick.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        char head[96];
        std::snprintf(head, sizeof head, "%s %2d %s: ", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str());
        std::printf("%s%s\n", head, o.detail.c_str());
        std::fflush(stdout);
        results << head << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
