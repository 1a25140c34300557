#pragma once

#include "agcm/diffcore.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace agcm {

enum class InitScheme { UniformScaled, Zeros, Ones };

/// Deterministic initialisation. `ordinal` distinguishes successive tensors
/// drawn under the same seed; (shape, scheme, seed, ordinal) fixes the
/// values bit-for-bit.
///
/// UniformScaled draws U(-a, a) with a = 1/sqrt(fan_in), where fan_in is the
/// second-to-last extent (the contracted axis of a weight matrix) or the
/// only extent of a vector.
inline Array seeded_init(const Shape& shape, InitScheme scheme, std::uint64_t seed, std::uint64_t ordinal = 0)
{
    switch (scheme) {
    case InitScheme::Zeros: return Array(shape, 0.0);
    case InitScheme::Ones: return Array(shape, 1.0);
    case InitScheme::UniformScaled: break;
    }
    const std::size_t fan_in = shape.size() >= 2 ? shape[shape.size() - 2] : shape.front();
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    CounterRng rng(stream_key(seed, 0x1417ULL, ordinal));
    Array out(shape);
    for (auto& v : out.values()) v = rng.uniform(-bound, bound);
    return out;
}

/// Ordered collection of named parameters. Insertion order is the
/// serialisation order.
class ParameterStore {
public:
    ParameterStore() = default;
    ParameterStore(const ParameterStore&) = delete;
    ParameterStore& operator=(const ParameterStore&) = delete;
    ParameterStore(ParameterStore&&) = default;
    ParameterStore& operator=(ParameterStore&&) = default;

    Parameter& add(std::string name, Array value)
    {
        if (index_.contains(name)) {
            throw ConfigError("duplicate parameter name: " + name);
        }
        auto p = std::make_unique<Parameter>();
        p->name = name;
        p->value = std::move(value);
        p->zero_grad();
        index_.emplace(std::move(name), params_.size());
        params_.push_back(std::move(p));
        return *params_.back();
    }

    bool contains(const std::string& name) const { return index_.contains(name); }

    Parameter& get(const std::string& name)
    {
        const auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return *params_[it->second];
    }

    const Parameter& get(const std::string& name) const
    {
        const auto it = index_.find(name);
        if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
        return *params_[it->second];
    }

    std::vector<Parameter*> all()
    {
        std::vector<Parameter*> out;
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::vector<const Parameter*> all() const
    {
        std::vector<const Parameter*> out;
        for (const auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::size_t size() const noexcept { return params_.size(); }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grad()
    {
        for (auto& p : params_) p->zero_grad();
    }

    void set_trainable(bool trainable)
    {
        for (auto& p : params_) p->trainable = trainable;
    }

    /// FNV-1a over names, shapes and raw value bytes, in insertion order.
    std::uint64_t digest() const
    {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](const void* data, std::size_t n) {
            const auto* bytes = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= bytes[i];
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& p : params_) {
            feed(p->name.data(), p->name.size());
            for (const auto e : p->value.shape()) {
                const auto v = static_cast<std::uint64_t>(e);
                feed(&v, sizeof v);
            }
            feed(p->value.data(), p->value.size() * sizeof(double));
        }
        return h;
    }

    /// Value snapshot, used for early-stopping restore.
    std::vector<Array> snapshot() const
    {
        std::vector<Array> out;
        for (const auto& p : params_) out.push_back(p->value);
        return out;
    }

    void restore(const std::vector<Array>& values)
    {
        if (values.size() != params_.size()) throw ConfigError("restore: parameter count mismatch");
        for (std::size_t i = 0; i < values.size(); ++i) params_[i]->value = values[i];
    }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, std::size_t> index_;
};

/// Creates parameters in a store, numbering draws so each tensor gets its
/// own deterministic stream.
class ParamFactory {
public:
    ParamFactory(ParameterStore& store, std::uint64_t seed, std::string prefix = {})
        : store_(store), seed_(seed), prefix_(std::move(prefix))
    {
    }

    Parameter& make(const std::string& name, const Shape& shape, InitScheme scheme)
    {
        return store_.add(prefix_ + name, seeded_init(shape, scheme, seed_, ordinal_++));
    }

private:
    ParameterStore& store_;
    std::uint64_t seed_;
    std::string prefix_;
    std::uint64_t ordinal_ = 0;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// Applies one update to every trainable parameter using its grad.
    void step(ParameterStore& store)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto* p : store.all()) {
            if (!p->trainable) continue;
            auto& st = state_[p->name];
            if (st.m.size() != p->value.size()) {
                st.m.assign(p->value.size(), 0.0);
                st.v.assign(p->value.size(), 0.0);
            }
            auto w = p->value.values();
            const auto g = p->grad.values();
            for (std::size_t i = 0; i < w.size(); ++i) {
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = st.m[i] / c1;
                const double vhat = st.v[i] / c2;
                w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    std::uint64_t steps() const noexcept { return t_; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

} // namespace agcm
