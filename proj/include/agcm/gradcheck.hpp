#pragma once

// Central finite-difference checks for every tape operator and for the
// joint visual loss on a micro model.

#include "agcm/acg.hpp"
#include "agcm/diffcore.hpp"
#include "agcm/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace agcm {

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdAbsTol = 1e-6;
inline constexpr double kFdRelTol = 1e-4;
inline constexpr std::size_t kFdInstances = 10;

struct GradCheckResult {
    std::string op;
    std::size_t instances = 0;
    std::size_t failures = 0; // instances with at least one bad entry
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;

    bool ok() const { return failures == 0; }
};

inline bool fd_close(double analytic, double numeric)
{
    const double err = std::abs(analytic - numeric);
    return err <= std::max(kFdAbsTol, kFdRelTol * std::max(std::abs(analytic), std::abs(numeric)));
}

/// Scalar function of a list of free inputs, rebuilt on a fresh tape for
/// every evaluation.
using ScalarFn = std::function<DTensor(Tape&, const std::vector<DTensor>&)>;

namespace detail {

struct FdStats {
    bool ok = true;
    double max_abs = 0.0;
    double max_rel = 0.0;

    void add(double a, double n)
    {
        const double err = std::abs(a - n);
        max_abs = std::max(max_abs, err);
        const double denom = std::max(std::abs(a), std::abs(n));
        if (denom > 0.0) max_rel = std::max(max_rel, err / denom);
        ok = ok && fd_close(a, n);
    }
};

inline FdStats check_inputs(const ScalarFn& f, std::vector<Array> inputs, bool training, std::uint64_t key)
{
    Tape t(training, key);
    std::vector<DTensor> vars;
    for (const auto& a : inputs) vars.push_back(t.variable(a));
    const auto out = f(t, vars);
    t.backward(out);
    std::vector<Array> grads;
    for (const auto& v : vars) grads.push_back(v.grad());

    auto eval = [&](const std::vector<Array>& xs) {
        Tape tt(training, key);
        std::vector<DTensor> vs;
        for (const auto& a : xs) vs.push_back(tt.constant(a));
        return f(tt, vs).item();
    };
    FdStats stats;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + kFdStep;
            const double up = eval(inputs);
            inputs[k][i] = orig - kFdStep;
            const double down = eval(inputs);
            inputs[k][i] = orig;
            stats.add(grads[k][i], (up - down) / (2.0 * kFdStep));
        }
    }
    return stats;
}

inline Array random_array(const Shape& shape, CounterRng& rng, double lo = -1.0, double hi = 1.0)
{
    Array a(shape);
    for (auto& v : a.values()) v = rng.uniform(lo, hi);
    return a;
}

/// Projects a tensor output onto a fixed random direction so the check
/// covers the whole Jacobian.
inline DTensor project(Tape& t, const DTensor& y, std::uint64_t key)
{
    if (y.size() == 1) return reshape(y, {1});
    CounterRng rng(key);
    return sum(mul(y, t.constant(random_array(y.shape(), rng))));
}

struct OpCase {
    std::string name;
    std::function<std::vector<Array>(CounterRng&)> inputs;
    std::function<DTensor(Tape&, const std::vector<DTensor>&)> op;
    bool training = false;
};

inline std::vector<OpCase> operator_cases()
{
    using V = std::vector<DTensor>;
    using R = CounterRng;
    auto r = [](const Shape& s, double lo = -1.0, double hi = 1.0) {
        return [s, lo, hi](R& g) { return std::vector<Array>{random_array(s, g, lo, hi)}; };
    };
    auto r2 = [](const Shape& a, const Shape& b) {
        return [a, b](R& g) { return std::vector<Array>{random_array(a, g), random_array(b, g)}; };
    };
    std::vector<OpCase> c;
    c.push_back({"matmul", r2({3, 4}, {4, 2}), [](Tape&, const V& x) { return matmul(x[0], x[1]); }});
    c.push_back({"bmm", r2({2, 3, 4}, {2, 4, 2}), [](Tape&, const V& x) { return bmm(x[0], x[1]); }});
    c.push_back({"bmm_trans_a", r2({2, 4, 3}, {2, 4, 2}), [](Tape&, const V& x) { return bmm(x[0], x[1], true); }});
    c.push_back({"bmm_trans_b", r2({2, 3, 4}, {2, 2, 4}),
                 [](Tape&, const V& x) { return bmm(x[0], x[1], false, true); }});
    c.push_back({"add", r2({3, 4}, {3, 4}), [](Tape&, const V& x) { return add(x[0], x[1]); }});
    c.push_back({"sub", r2({3, 4}, {3, 4}), [](Tape&, const V& x) { return sub(x[0], x[1]); }});
    c.push_back({"mul", r2({3, 4}, {3, 4}), [](Tape&, const V& x) { return mul(x[0], x[1]); }});
    c.push_back({"add_bcast", r2({2, 3, 4}, {1, 3, 1}), [](Tape&, const V& x) { return add_bcast(x[0], x[1]); }});
    c.push_back({"mul_bcast", r2({2, 3, 4}, {2, 1, 4}), [](Tape&, const V& x) { return mul_bcast(x[0], x[1]); }});
    c.push_back({"convex_mix",
                 [](R& g) {
                     return std::vector<Array>{random_array({2, 3, 1}, g, 0.05, 0.95), random_array({2, 3, 4}, g),
                                               random_array({2, 3, 4}, g)};
                 },
                 [](Tape&, const V& x) { return convex_mix(x[0], x[1], x[2]); }});
    c.push_back({"affine", r({3, 4}), [](Tape&, const V& x) { return affine(x[0], -1.7, 0.3); }});
    c.push_back({"scale", r({3, 4}), [](Tape&, const V& x) { return scale(x[0], 2.5); }});
    c.push_back({"sigmoid", r({3, 4}, -3.0, 3.0), [](Tape&, const V& x) { return sigmoid(x[0]); }});
    c.push_back({"leaky_relu", r({3, 4}), [](Tape&, const V& x) { return leaky_relu(x[0], 0.01); }});
    c.push_back({"dropout", r({4, 5}), [](Tape&, const V& x) { return dropout(x[0], 0.3); }, true});
    c.push_back({"softmax", r({3, 5}, -2.0, 2.0), [](Tape&, const V& x) { return softmax(x[0]); }});
    c.push_back({"layer_norm", r({3, 6}), [](Tape&, const V& x) { return layer_norm(x[0]); }});
    c.push_back({"cosine_rows", r2({4, 5}, {4, 5}), [](Tape&, const V& x) { return cosine_rows(x[0], x[1]); }});
    c.push_back({"reshape", r({3, 4}), [](Tape&, const V& x) { return reshape(x[0], {2, 6}); }});
    c.push_back({"permute", r({2, 3, 4}), [](Tape&, const V& x) { return permute(x[0], {2, 0, 1}); }});
    c.push_back({"slice", r({3, 5, 2}), [](Tape&, const V& x) { return slice(x[0], 1, 1, 3); }});
    c.push_back({"concat_last", r2({2, 3}, {2, 4}), [](Tape&, const V& x) { return concat_last({x[0], x[1]}); }});
    c.push_back({"sum", r({3, 4}), [](Tape&, const V& x) { return sum(x[0]); }});
    c.push_back({"mean", r({3, 4}), [](Tape&, const V& x) { return mean(x[0]); }});
    c.push_back({"mean_axis", r({3, 4, 2}), [](Tape&, const V& x) { return mean_axis(x[0], 1); }});
    c.push_back({"cross_entropy", r({4, 3}, -2.0, 2.0), [](Tape&, const V& x) {
                     const int labels[] = {0, 2, 1, 2};
                     return cross_entropy(x[0], labels);
                 }});
    c.push_back({"bce", r({6}, 0.05, 0.95), [](Tape&, const V& x) {
                     return sum(bce(x[0], Array({6}, std::vector<double>{1, 0, 0.3, 1, 0.8, 0})));
                 }});
    c.push_back({"mse", r({5}), [](Tape&, const V& x) {
                     return mse(x[0], Array({5}, std::vector<double>{0.1, -0.2, 0.5, 0.0, 1.0}));
                 }});
    return c;
}

} // namespace detail

inline GradCheckResult check_operator(const detail::OpCase& oc, std::uint64_t seed,
                                      std::size_t instances = kFdInstances)
{
    GradCheckResult res;
    res.op = oc.name;
    for (std::size_t k = 0; k < instances; ++k) {
        CounterRng rng(stream_key(seed, fnv1a64(oc.name), k));
        const auto proj_key = stream_key(seed, fnv1a64("project"), k);
        const ScalarFn f = [&](Tape& t, const std::vector<DTensor>& x) { return detail::project(t, oc.op(t, x), proj_key); };
        const auto s = detail::check_inputs(f, oc.inputs(rng), oc.training, stream_key(seed, fnv1a64("dropout"), k));
        ++res.instances;
        if (!s.ok) ++res.failures;
        res.max_abs_err = std::max(res.max_abs_err, s.max_abs);
        res.max_rel_err = std::max(res.max_rel_err, s.max_rel);
    }
    return res;
}

/// Micro configuration: 8x8 single-channel images, 4-pixel patches (2x2
/// grid), d_model 8, two concepts, every component enabled.
inline ModelConfig micro_config(TaskKind task = TaskKind::Classification)
{
    ModelConfig c;
    c.image_width = c.image_height = 8;
    c.channels = 1;
    c.patch = 4;
    c.d_model = 8;
    c.backbone_layers = 1;
    c.backbone_heads = 2;
    c.mlp_hidden = 8;
    c.concept_embed = 4;
    c.cacm_hidden = 4;
    c.task = task;
    c.n_classes = 3;
    std::vector<ConceptSpec> specs(2);
    specs[0].name = "a";
    specs[1].name = "b";
    for (std::size_t i = 0; i < 2; ++i) {
        specs[i].roi_bearing = true;
        specs[i].landmark_subset = {i};
    }
    c.concepts = ConceptSet(specs);
    return c;
}

/// Checks d(joint loss)/d(parameter) for every scalar of every parameter
/// of a freshly initialised micro model, one model seed per instance.
inline GradCheckResult check_joint_loss(std::uint64_t seed, TaskKind task = TaskKind::Classification,
                                        std::size_t instances = kFdInstances)
{
    GradCheckResult res;
    res.op = task == TaskKind::Classification ? "joint_loss" : "joint_loss_regression";
    const auto cfg = micro_config(task);
    const std::size_t B = 2, n = 2, P = cfg.num_patches();
    for (std::size_t k = 0; k < instances; ++k) {
        CounterRng rng(stream_key(seed, fnv1a64(res.op), k));
        VisualModel model(cfg, stream_key(seed, k));
        const auto patches = detail::random_array({B * P, cfg.patch_dim()}, rng, 0.0, 1.0);
        VisualTargets y;
        y.labels = {static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))};
        y.regression = detail::random_array({B}, rng, 0.0, 1.0);
        y.concepts = Array({n * B}, std::vector<double>{1, 0, 0, 1});
        y.maps = detail::random_array({n * B, P}, rng, 0.0, 1.0);
        y.map_mask = Array({n * B}, std::vector<double>{1, 1, 0, 1});
        const auto key = stream_key(seed, fnv1a64("micro-dropout"), k);
        auto loss_value = [&]() {
            Tape t(true, key);
            return model.joint_loss(model.forward(t, patches, B), y).total.item();
        };
        model.params().zero_grad();
        {
            Tape t(true, key);
            t.backward(model.joint_loss(model.forward(t, patches, B), y).total);
        }
        detail::FdStats s;
        for (auto* p : model.params().all()) {
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const double orig = p->value[i];
                p->value[i] = orig + kFdStep;
                const double up = loss_value();
                p->value[i] = orig - kFdStep;
                const double down = loss_value();
                p->value[i] = orig;
                s.add(p->grad[i], (up - down) / (2.0 * kFdStep));
            }
        }
        ++res.instances;
        if (!s.ok) ++res.failures;
        res.max_abs_err = std::max(res.max_abs_err, s.max_abs);
        res.max_rel_err = std::max(res.max_rel_err, s.max_rel);
    }
    return res;
}

/// Every operator plus both joint-loss variants.
inline std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, std::size_t instances = kFdInstances)
{
    std::vector<GradCheckResult> out;
    for (const auto& oc : detail::operator_cases()) out.push_back(check_operator(oc, seed, instances));
    out.push_back(check_joint_loss(seed, TaskKind::Classification, instances));
    out.push_back(check_joint_loss(seed, TaskKind::Regression, instances));
    return out;
}

} // namespace agcm
