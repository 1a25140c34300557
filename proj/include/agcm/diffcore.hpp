#pragma once

// Reverse-mode differentiation over a linear tape.
//
// Nodes are appended in evaluation order, which is a topological order by
// construction; backward walks them once in reverse. Parameters live outside
// the tape (Parameter) and are bound as leaves per forward pass, so one tape
// corresponds to one forward/backward step.

#include "agcm/array.hpp"
#include "agcm/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace agcm {

/// Log-domain clamp used by cross-entropy and binary cross-entropy.
inline constexpr double kLogClamp = 1e-7;
inline constexpr double kLayerNormEps = 1e-5;

struct Parameter {
    std::string name;
    Array value;
    Array grad;
    bool trainable = true;

    void zero_grad() { grad = Array(value.shape()); }
};

class Tape;

/// Handle to a tape node: an n-dimensional array that participates in
/// gradient accumulation.
class DTensor {
public:
    DTensor() = default;
    DTensor(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Array& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    std::size_t dim(std::size_t axis) const { return value().dim(axis); }
    bool requires_grad() const;
    /// Gradient after Tape::backward; empty Array when never reached.
    const Array& grad() const;
    double item() const { return value().item(); }

    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

using BackwardFn = std::function<void(Tape&, const Array& out_grad)>;

class Tape {
public:
    explicit Tape(bool training = false, std::uint64_t dropout_key = 0)
        : training_(training), dropout_key_(dropout_key)
    {
        nodes_.reserve(256);
    }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool training() const noexcept { return training_; }

    DTensor constant(Array value) { return push(std::move(value), false, nullptr, nullptr); }

    /// Free leaf that requires a gradient (used by gradient checks).
    DTensor variable(Array value) { return push(std::move(value), true, nullptr, nullptr); }

    /// Binds a parameter as a leaf. Frozen parameters become constants, so no
    /// gradient ever flows into them.
    DTensor param(Parameter& p) { return push(p.value, p.trainable, nullptr, &p); }

    DTensor record(Array value, std::initializer_list<DTensor> inputs, BackwardFn fn)
    {
        bool needs = false;
        for (const auto& in : inputs) {
            check_owner(in);
            needs = needs || nodes_[in.id()].requires_grad;
        }
        return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, nullptr);
    }

    DTensor record(Array value, std::span<const DTensor> inputs, BackwardFn fn)
    {
        bool needs = false;
        for (const auto& in : inputs) {
            check_owner(in);
            needs = needs || nodes_[in.id()].requires_grad;
        }
        return push(std::move(value), needs, needs ? std::move(fn) : BackwardFn{}, nullptr);
    }

    const Array& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    const Array& grad(std::size_t id) const { return nodes_[id].grad; }

    /// Accumulation buffer for node `id`, zero-initialised on first use.
    Array& grad_buffer(std::size_t id)
    {
        auto& node = nodes_[id];
        if (node.grad.empty()) {
            node.grad = Array(node.value.shape());
        }
        return node.grad;
    }

    /// Fresh generator for one dropout call; successive calls on the same
    /// tape draw from distinct streams.
    CounterRng next_dropout_rng() { return CounterRng(stream_key(dropout_key_, dropout_calls_++)); }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Propagates d(loss)/d(node) to every node and accumulates leaf
    /// gradients into their bound parameters.
    void backward(const DTensor& loss)
    {
        check_owner(loss);
        if (loss.size() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
        }
        if (backward_done_) {
            throw std::logic_error("backward: tape already consumed");
        }
        backward_done_ = true;
        if (!nodes_[loss.id()].requires_grad) {
            return;
        }
        grad_buffer(loss.id())[0] = 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (!node.requires_grad) {
                continue;
            }
            if (node.backward && !node.grad.empty()) {
                node.backward(*this, node.grad);
            }
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            auto& node = nodes_[i];
            if (!node.requires_grad || node.backward) {
                continue;
            }
            grad_buffer(i);
            if (node.param != nullptr) {
                if (node.param->grad.shape() != node.value.shape()) {
                    node.param->zero_grad();
                }
                auto dst = node.param->grad.values();
                const auto src = node.grad.values();
                for (std::size_t k = 0; k < dst.size(); ++k) {
                    dst[k] += src[k];
                }
            }
        }
    }

private:
    struct Node {
        Array value;
        Array grad;
        bool requires_grad = false;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    DTensor push(Array value, bool requires_grad, BackwardFn fn, Parameter* param)
    {
        nodes_.push_back(Node{std::move(value), Array{}, requires_grad, std::move(fn), param});
        return DTensor(this, nodes_.size() - 1);
    }

    void check_owner(const DTensor& t) const
    {
        if (t.tape() != this) {
            throw std::logic_error("DTensor used with a foreign tape");
        }
    }

    std::vector<Node> nodes_;
    bool training_;
    std::uint64_t dropout_key_;
    std::uint64_t dropout_calls_ = 0;
    bool backward_done_ = false;
};

inline const Array& DTensor::value() const { return tape_->value(id_); }
inline bool DTensor::requires_grad() const { return tape_->requires_grad(id_); }
inline const Array& DTensor::grad() const { return tape_->grad(id_); }

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;

inline Tape& tape_of(const DTensor& a) { return *a.tape(); }

inline void require_same_tape(const DTensor& a, const DTensor& b)
{
    if (a.tape() != b.tape()) {
        throw std::logic_error("operands recorded on different tapes");
    }
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b)
{
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

inline void require_same_shape(const char* op, const DTensor& a, const DTensor& b)
{
    require_same_tape(a, b);
    if (a.shape() != b.shape()) {
        shape_fail(op, a.shape(), b.shape());
    }
}

inline void accumulate(Array& dst, std::span<const double> src)
{
    auto d = dst.values();
    for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] += src[i];
    }
}

/// Offsets into a broadcast operand for every flat index of the full shape.
inline std::vector<std::size_t> broadcast_offsets(const Shape& full, const Shape& small)
{
    const std::size_t nd = full.size();
    std::vector<std::size_t> stride(nd, 0);
    std::size_t s = 1;
    for (std::size_t d = nd; d-- > 0;) {
        stride[d] = (small[d] == 1) ? 0 : s;
        s *= small[d];
    }
    std::vector<std::size_t> offsets(shape_size(full));
    std::vector<std::size_t> idx(nd, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < offsets.size(); ++flat) {
        offsets[flat] = off;
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            off += stride[d];
            if (idx[d] < full[d]) {
                break;
            }
            off -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return offsets;
}

inline void require_broadcastable(const char* op, const Shape& full, const Shape& small)
{
    if (full.size() != small.size()) {
        shape_fail(op, full, small);
    }
    for (std::size_t d = 0; d < full.size(); ++d) {
        if (small[d] != 1 && small[d] != full[d]) {
            shape_fail(op, full, small);
        }
    }
}

inline std::size_t last_dim(const Shape& s) { return s.back(); }

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [M,K] x [K,N] -> [M,N]
inline DTensor matmul(const DTensor& a, const DTensor& b)
{
    using namespace detail;
    require_same_tape(a, b);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        shape_fail("matmul", sa, sb);
    }
    const auto m = sa[0], k = sa[1], n = sb[1];
    Array out({m, n});
    MutMat(out.data(), m, n).noalias() = ConstMat(a.value().data(), m, k) * ConstMat(b.value().data(), k, n);
    const auto ia = a.id(), ib = b.id();
    return tape_of(a).record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, const Array& g) {
        ConstMat gm(g.data(), m, n);
        if (t.requires_grad(ia)) {
            MutMat(t.grad_buffer(ia).data(), m, k).noalias() += gm * ConstMat(t.value(ib).data(), k, n).transpose();
        }
        if (t.requires_grad(ib)) {
            MutMat(t.grad_buffer(ib).data(), k, n).noalias() += ConstMat(t.value(ia).data(), m, k).transpose() * gm;
        }
    });
}

/// Batched product over the leading axis: [G,M,K] x [G,K,N] -> [G,M,N].
/// `trans_a` reads a as [G,K,M]; `trans_b` reads b as [G,N,K].
inline DTensor bmm(const DTensor& a, const DTensor& b, bool trans_a = false, bool trans_b = false)
{
    using namespace detail;
    require_same_tape(a, b);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0]) {
        shape_fail("bmm", sa, sb);
    }
    const auto groups = sa[0];
    const auto m = trans_a ? sa[2] : sa[1];
    const auto k = trans_a ? sa[1] : sa[2];
    const auto kb = trans_b ? sb[2] : sb[1];
    const auto n = trans_b ? sb[1] : sb[2];
    if (k != kb) {
        shape_fail("bmm", sa, sb);
    }
    const auto ar = sa[1], ac = sa[2], br = sb[1], bc = sb[2];
    Array out({groups, m, n});
    for (std::size_t g = 0; g < groups; ++g) {
        ConstMat A(a.value().data() + g * ar * ac, ar, ac);
        ConstMat B(b.value().data() + g * br * bc, br, bc);
        MutMat O(out.data() + g * m * n, m, n);
        if (!trans_a && !trans_b) {
            O.noalias() = A * B;
        } else if (trans_a && !trans_b) {
            O.noalias() = A.transpose() * B;
        } else if (!trans_a && trans_b) {
            O.noalias() = A * B.transpose();
        } else {
            O.noalias() = A.transpose() * B.transpose();
        }
    }
    const auto ia = a.id(), ib = b.id();
    return tape_of(a).record(std::move(out), {a, b},
                             [=](Tape& t, const Array& gout) {
                                 const bool ga = t.requires_grad(ia), gb = t.requires_grad(ib);
                                 for (std::size_t g = 0; g < groups; ++g) {
                                     ConstMat G(gout.data() + g * m * n, m, n);
                                     ConstMat A(t.value(ia).data() + g * ar * ac, ar, ac);
                                     ConstMat B(t.value(ib).data() + g * br * bc, br, bc);
                                     if (ga) {
                                         MutMat dA(t.grad_buffer(ia).data() + g * ar * ac, ar, ac);
                                         // op(B) is B or B^T; dA = G op(B)^T, transposed when trans_a.
                                         if (!trans_a) {
                                             if (!trans_b) dA.noalias() += G * B.transpose();
                                             else dA.noalias() += G * B;
                                         } else {
                                             if (!trans_b) dA.noalias() += B * G.transpose();
                                             else dA.noalias() += B.transpose() * G.transpose();
                                         }
                                     }
                                     if (gb) {
                                         MutMat dB(t.grad_buffer(ib).data() + g * br * bc, br, bc);
                                         if (!trans_b) {
                                             if (!trans_a) dB.noalias() += A.transpose() * G;
                                             else dB.noalias() += A * G;
                                         } else {
                                             if (!trans_a) dB.noalias() += G.transpose() * A;
                                             else dB.noalias() += G.transpose() * A.transpose();
                                         }
                                     }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Elementwise

inline DTensor add(const DTensor& a, const DTensor& b)
{
    detail::require_same_shape("add", a, b);
    Array out = a.value();
    detail::accumulate(out, b.value().values());
    const auto ia = a.id(), ib = b.id();
    return detail::tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, const Array& g) {
        if (t.requires_grad(ia)) detail::accumulate(t.grad_buffer(ia), g.values());
        if (t.requires_grad(ib)) detail::accumulate(t.grad_buffer(ib), g.values());
    });
}

inline DTensor sub(const DTensor& a, const DTensor& b)
{
    detail::require_same_shape("sub", a, b);
    Array out = a.value();
    const auto bv = b.value().values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    const auto ia = a.id(), ib = b.id();
    return detail::tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, const Array& g) {
        if (t.requires_grad(ia)) detail::accumulate(t.grad_buffer(ia), g.values());
        if (t.requires_grad(ib)) {
            auto& d = t.grad_buffer(ib);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
        }
    });
}

inline DTensor mul(const DTensor& a, const DTensor& b)
{
    detail::require_same_shape("mul", a, b);
    Array out = a.value();
    const auto bv = b.value().values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const auto ia = a.id(), ib = b.id();
    return detail::tape_of(a).record(std::move(out), {a, b}, [ia, ib](Tape& t, const Array& g) {
        if (t.requires_grad(ia)) {
            auto& d = t.grad_buffer(ia);
            const auto& bv = t.value(ib);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            auto& d = t.grad_buffer(ib);
            const auto& av = t.value(ia);
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * av[i];
        }
    });
}

/// x + y with y broadcast along its unit axes (same rank as x).
inline DTensor add_bcast(const DTensor& x, const DTensor& y)
{
    detail::require_same_tape(x, y);
    detail::require_broadcastable("add_bcast", x.shape(), y.shape());
    auto offsets = detail::broadcast_offsets(x.shape(), y.shape());
    Array out = x.value();
    const auto& yv = y.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += yv[offsets[i]];
    const auto ix = x.id(), iy = y.id();
    return detail::tape_of(x).record(std::move(out), {x, y},
                                     [ix, iy, offsets = std::move(offsets)](Tape& t, const Array& g) {
                                         if (t.requires_grad(ix)) detail::accumulate(t.grad_buffer(ix), g.values());
                                         if (t.requires_grad(iy)) {
                                             auto& d = t.grad_buffer(iy);
                                             for (std::size_t i = 0; i < g.size(); ++i) d[offsets[i]] += g[i];
                                         }
                                     });
}

/// x * y with y broadcast along its unit axes (same rank as x).
inline DTensor mul_bcast(const DTensor& x, const DTensor& y)
{
    detail::require_same_tape(x, y);
    detail::require_broadcastable("mul_bcast", x.shape(), y.shape());
    auto offsets = detail::broadcast_offsets(x.shape(), y.shape());
    Array out = x.value();
    const auto& yv = y.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= yv[offsets[i]];
    const auto ix = x.id(), iy = y.id();
    return detail::tape_of(x).record(std::move(out), {x, y},
                                     [ix, iy, offsets = std::move(offsets)](Tape& t, const Array& g) {
                                         const auto& xv = t.value(ix);
                                         const auto& yv = t.value(iy);
                                         if (t.requires_grad(ix)) {
                                             auto& d = t.grad_buffer(ix);
                                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * yv[offsets[i]];
                                         }
                                         if (t.requires_grad(iy)) {
                                             auto& d = t.grad_buffer(iy);
                                             for (std::size_t i = 0; i < g.size(); ++i) d[offsets[i]] += g[i] * xv[i];
                                         }
                                     });
}

/// p * a + (1 - p) * b, with p broadcast along its unit axes. Written in
/// this form so p = 1 and p = 0 reproduce a and b bit-exactly.
inline DTensor convex_mix(const DTensor& p, const DTensor& a, const DTensor& b)
{
    detail::require_same_shape("convex_mix", a, b);
    detail::require_same_tape(p, a);
    detail::require_broadcastable("convex_mix", a.shape(), p.shape());
    auto offsets = detail::broadcast_offsets(a.shape(), p.shape());
    const auto& pv = p.value();
    const auto& av = a.value();
    const auto& bv = b.value();
    Array out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double w = pv[offsets[i]];
        out[i] = w * av[i] + (1.0 - w) * bv[i];
    }
    const auto ip = p.id(), ia = a.id(), ib = b.id();
    return detail::tape_of(a).record(std::move(out), {p, a, b},
                                     [ip, ia, ib, offsets = std::move(offsets)](Tape& t, const Array& g) {
                                         const auto& pv = t.value(ip);
                                         const auto& av = t.value(ia);
                                         const auto& bv = t.value(ib);
                                         if (t.requires_grad(ia)) {
                                             auto& d = t.grad_buffer(ia);
                                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * pv[offsets[i]];
                                         }
                                         if (t.requires_grad(ib)) {
                                             auto& d = t.grad_buffer(ib);
                                             for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - pv[offsets[i]]);
                                         }
                                         if (t.requires_grad(ip)) {
                                             auto& d = t.grad_buffer(ip);
                                             for (std::size_t i = 0; i < g.size(); ++i) d[offsets[i]] += g[i] * (av[i] - bv[i]);
                                         }
                                     });
}

/// scale * x + shift
inline DTensor affine(const DTensor& x, double scale, double shift = 0.0)
{
    Array out = x.value();
    for (auto& v : out.values()) v = scale * v + shift;
    const auto ix = x.id();
    return detail::tape_of(x).record(std::move(out), {x}, [ix, scale](Tape& t, const Array& g) {
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * g[i];
    });
}

inline DTensor scale(const DTensor& x, double s) { return affine(x, s, 0.0); }

inline DTensor sigmoid(const DTensor& x)
{
    Array out = x.value();
    for (auto& v : out.values()) {
        v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    auto& t = detail::tape_of(x);
    const auto ix = x.id();
    const auto iy = t.size();
    return t.record(std::move(out), {x}, [ix, iy](Tape& tp, const Array& g) {
        const auto& yv = tp.value(iy);
        auto& d = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * yv[i] * (1.0 - yv[i]);
    });
}

inline DTensor leaky_relu(const DTensor& x, double slope = 0.01)
{
    Array out = x.value();
    for (auto& v : out.values()) v = v > 0 ? v : slope * v;
    const auto ix = x.id();
    return detail::tape_of(x).record(std::move(out), {x}, [ix, slope](Tape& t, const Array& g) {
        const auto& xv = t.value(ix);
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (xv[i] > 0 ? 1.0 : slope);
    });
}

/// Inverted dropout: identity outside training, otherwise zeroes each entry
/// with probability `rate` and rescales survivors by 1 / (1 - rate).
inline DTensor dropout(const DTensor& x, double rate)
{
    auto& t = detail::tape_of(x);
    if (!t.training() || rate <= 0.0) {
        return x;
    }
    if (rate >= 1.0) {
        throw ConfigError("dropout: rate must be < 1");
    }
    auto rng = t.next_dropout_rng();
    std::vector<double> mask(x.size());
    const double keep = 1.0 / (1.0 - rate);
    for (auto& m : mask) m = rng.uniform() >= rate ? keep : 0.0;
    Array out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    const auto ix = x.id();
    return t.record(std::move(out), {x}, [ix, mask = std::move(mask)](Tape& tp, const Array& g) {
        auto& d = tp.grad_buffer(ix);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// Row-wise (last axis) operators

inline DTensor softmax(const DTensor& x)
{
    const std::size_t c = detail::last_dim(x.shape());
    const std::size_t rows = x.size() / c;
    Array out = x.value();
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= z;
    }
    auto& t = detail::tape_of(x);
    const auto ix = x.id();
    const auto iy = t.size();
    return t.record(std::move(out), {x}, [ix, iy, c, rows](Tape& tp, const Array& g) {
        const auto& y = tp.value(iy);
        auto& d = tp.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
            for (std::size_t j = 0; j < c; ++j) d[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
    });
}

/// Normalises each row to zero mean and unit (population) variance.
inline DTensor layer_norm(const DTensor& x, double eps = kLayerNormEps)
{
    const std::size_t c = detail::last_dim(x.shape());
    const std::size_t rows = x.size() / c;
    Array out = x.value();
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = out.data() + r * c;
        double mean = 0.0;
        for (std::size_t j = 0; j < c; ++j) mean += row[j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(c);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j) row[j] = (row[j] - mean) * inv_std[r];
    }
    auto& t = detail::tape_of(x);
    const auto ix = x.id();
    const auto iy = t.size();
    return t.record(std::move(out), {x}, [ix, iy, c, rows, inv_std = std::move(inv_std)](Tape& tp, const Array& g) {
        const auto& y = tp.value(iy);
        auto& d = tp.grad_buffer(ix);
        const double inv_c = 1.0 / static_cast<double>(c);
        for (std::size_t r = 0; r < rows; ++r) {
            double mg = 0.0, mgy = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
                mg += g[r * c + j];
                mgy += g[r * c + j] * y[r * c + j];
            }
            mg *= inv_c;
            mgy *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
                d[r * c + j] += inv_std[r] * (g[r * c + j] - mg - y[r * c + j] * mgy);
            }
        }
    });
}

/// Cosine similarity of matching rows (last axis). Output has one entry per
/// row. Rows whose norm product is below 1e-12 yield 0 with zero gradient.
inline DTensor cosine_rows(const DTensor& a, const DTensor& b)
{
    detail::require_same_shape("cosine_rows", a, b);
    const std::size_t c = detail::last_dim(a.shape());
    const std::size_t rows = a.size() / c;
    const auto& av = a.value();
    const auto& bv = b.value();
    Array out({rows});
    std::vector<double> na(rows), nb(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            dot += av[r * c + j] * bv[r * c + j];
            aa += av[r * c + j] * av[r * c + j];
            bb += bv[r * c + j] * bv[r * c + j];
        }
        na[r] = std::sqrt(aa);
        nb[r] = std::sqrt(bb);
        const double denom = na[r] * nb[r];
        out[r] = denom < 1e-12 ? 0.0 : dot / denom;
    }
    auto& t = detail::tape_of(a);
    const auto ia = a.id(), ib = b.id();
    const auto iy = t.size();
    return t.record(std::move(out), {a, b},
                    [ia, ib, iy, c, rows, na = std::move(na), nb = std::move(nb)](Tape& tp, const Array& g) {
                        const auto& av = tp.value(ia);
                        const auto& bv = tp.value(ib);
                        const auto& cs = tp.value(iy);
                        const bool ga = tp.requires_grad(ia), gb = tp.requires_grad(ib);
                        for (std::size_t r = 0; r < rows; ++r) {
                            const double denom = na[r] * nb[r];
                            if (denom < 1e-12) continue;
                            for (std::size_t j = 0; j < c; ++j) {
                                const double x = av[r * c + j], y = bv[r * c + j];
                                if (ga) tp.grad_buffer(ia)[r * c + j] += g[r] * (y / denom - cs[r] * x / (na[r] * na[r]));
                                if (gb) tp.grad_buffer(ib)[r * c + j] += g[r] * (x / denom - cs[r] * y / (nb[r] * nb[r]));
                            }
                        }
                    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline DTensor reshape(const DTensor& x, Shape shape)
{
    Array out = x.value().reshaped(std::move(shape));
    const auto ix = x.id();
    return detail::tape_of(x).record(std::move(out), {x}, [ix](Tape& t, const Array& g) {
        detail::accumulate(t.grad_buffer(ix), g.values());
    });
}

/// Reorders axes: output axis d is input axis perm[d].
inline DTensor permute(const DTensor& x, const std::vector<std::size_t>& perm)
{
    const auto& in_shape = x.shape();
    const std::size_t nd = in_shape.size();
    if (perm.size() != nd) {
        throw ShapeError("permute: permutation of rank " + std::to_string(perm.size()) + " for shape " +
                         to_string(in_shape));
    }
    std::vector<bool> seen(nd, false);
    Shape out_shape(nd);
    for (std::size_t d = 0; d < nd; ++d) {
        if (perm[d] >= nd || seen[perm[d]]) {
            throw ShapeError("permute: invalid permutation for shape " + to_string(in_shape));
        }
        seen[perm[d]] = true;
        out_shape[d] = in_shape[perm[d]];
    }
    std::vector<std::size_t> in_stride(nd);
    std::size_t s = 1;
    for (std::size_t d = nd; d-- > 0;) {
        in_stride[d] = s;
        s *= in_shape[d];
    }
    // source offset for each output flat index
    std::vector<std::size_t> src(x.size());
    std::vector<std::size_t> idx(nd, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < src.size(); ++flat) {
        src[flat] = off;
        for (std::size_t d = nd; d-- > 0;) {
            ++idx[d];
            off += in_stride[perm[d]];
            if (idx[d] < out_shape[d]) break;
            off -= in_stride[perm[d]] * idx[d];
            idx[d] = 0;
        }
    }
    Array out(out_shape);
    const auto& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[src[i]];
    const auto ix = x.id();
    return detail::tape_of(x).record(std::move(out), {x}, [ix, src = std::move(src)](Tape& t, const Array& g) {
        auto& d = t.grad_buffer(ix);
        for (std::size_t i = 0; i < g.size(); ++i) d[src[i]] += g[i];
    });
}

/// Contiguous range [start, start + len) along `axis`; rank is preserved.
inline DTensor slice(const DTensor& x, std::size_t axis, std::size_t start, std::size_t len)
{
    const auto& shape = x.shape();
    if (axis >= shape.size() || len == 0 || start + len > shape[axis]) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") on axis " + std::to_string(axis) + " of shape " + to_string(shape));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    const std::size_t extent = shape[axis];
    Shape out_shape = shape;
    out_shape[axis] = len;
    Array out(out_shape);
    const auto& xv = x.value();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(xv.data() + (o * extent + start) * inner, len * inner, out.data() + o * len * inner);
    }
    const auto ix = x.id();
    return detail::tape_of(x).record(std::move(out), {x}, [=](Tape& t, const Array& g) {
        auto& d = t.grad_buffer(ix);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < len * inner; ++i) {
                d[(o * extent + start) * inner + i] += g[o * len * inner + i];
            }
        }
    });
}

/// Concatenation along the last axis; all leading extents must agree.
inline DTensor concat_last(const std::vector<DTensor>& parts)
{
    if (parts.empty()) {
        throw ShapeError("concat_last: no inputs");
    }
    const auto& first = parts.front().shape();
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_same_tape(parts.front(), p);
        const auto& s = p.shape();
        if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
            detail::shape_fail("concat_last", first, s);
        }
        total += s.back();
    }
    Shape out_shape = first;
    out_shape.back() = total;
    const std::size_t rows = parts.front().size() / first.back();
    Array out(out_shape);
    std::vector<std::size_t> widths, ids;
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.shape().back();
        const auto& pv = p.value();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(pv.data() + r * w, w, out.data() + r * total + col);
        }
        col += w;
        widths.push_back(w);
        ids.push_back(p.id());
    }
    return detail::tape_of(parts.front())
        .record(std::move(out), std::span<const DTensor>(parts), [=](Tape& t, const Array& g) {
            std::size_t c0 = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                const std::size_t w = widths[k];
                if (t.requires_grad(ids[k])) {
                    auto& d = t.grad_buffer(ids[k]);
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t j = 0; j < w; ++j) d[r * w + j] += g[r * total + c0 + j];
                    }
                }
                c0 += w;
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline DTensor sum(const DTensor& x)
{
    double s = 0.0;
    for (const double v : x.value().values()) s += v;
    const auto ix = x.id();
    return detail::tape_of(x).record(Array::scalar(s), {x}, [ix](Tape& t, const Array& g) {
        auto& d = t.grad_buffer(ix);
        for (auto& v : d.values()) v += g[0];
    });
}

inline DTensor mean(const DTensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Mean over one axis, kept with extent 1 (e.g. mean over a sequence).
inline DTensor mean_axis(const DTensor& x, std::size_t axis)
{
    const auto& shape = x.shape();
    if (axis >= shape.size()) {
        throw ShapeError("mean_axis: axis " + std::to_string(axis) + " for shape " + to_string(shape));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    const std::size_t extent = shape[axis];
    Shape out_shape = shape;
    out_shape[axis] = 1;
    Array out(out_shape);
    const auto& xv = x.value();
    const double inv = 1.0 / static_cast<double>(extent);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t e = 0; e < extent; ++e) {
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * extent + e) * inner + i];
        }
        for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] *= inv;
    }
    const auto ix = x.id();
    return detail::tape_of(x).record(std::move(out), {x}, [=](Tape& t, const Array& g) {
        auto& d = t.grad_buffer(ix);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t e = 0; e < extent; ++e) {
                for (std::size_t i = 0; i < inner; ++i) d[(o * extent + e) * inner + i] += g[o * inner + i] * inv;
            }
        }
    });
}

/// Mean over rows of -log softmax(logits)[label], with the probability
/// clamped below at kLogClamp.
inline DTensor cross_entropy(const DTensor& logits, std::span<const int> labels)
{
    const auto& shape = logits.shape();
    if (shape.size() != 2 || shape[0] != labels.size()) {
        throw ShapeError("cross_entropy: logits " + to_string(shape) + " vs " + std::to_string(labels.size()) +
                         " labels");
    }
    const std::size_t rows = shape[0], c = shape[1];
    Array probs = logits.value();
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c) {
            throw ShapeError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0," +
                             std::to_string(c) + ")");
        }
        double* row = probs.data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            z += row[j];
        }
        for (std::size_t j = 0; j < c; ++j) row[j] /= z;
        loss -= std::log(std::max(row[labels[r]], kLogClamp));
    }
    loss /= static_cast<double>(rows);
    std::vector<int> lab(labels.begin(), labels.end());
    const auto ix = logits.id();
    return detail::tape_of(logits).record(
        Array::scalar(loss), {logits}, [ix, rows, c, probs = std::move(probs), lab = std::move(lab)](Tape& t, const Array& g) {
            auto& d = t.grad_buffer(ix);
            const double s = g[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                if (probs[r * c + lab[r]] <= kLogClamp) continue;
                for (std::size_t j = 0; j < c; ++j) {
                    const double onehot = (static_cast<int>(j) == lab[r]) ? 1.0 : 0.0;
                    d[r * c + j] += s * (probs[r * c + j] - onehot);
                }
            }
        });
}

/// Elementwise binary cross-entropy of probabilities against soft targets
/// in [0, 1]; probabilities are clamped to [kLogClamp, 1 - kLogClamp].
inline DTensor bce(const DTensor& probs, const Array& targets)
{
    if (probs.size() != targets.size()) {
        throw ShapeError("bce: probabilities " + to_string(probs.shape()) + " vs targets " + to_string(targets.shape()));
    }
    const auto& pv = probs.value();
    Array out(probs.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double p = std::clamp(pv[i], kLogClamp, 1.0 - kLogClamp);
        const double y = targets[i];
        out[i] = -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    }
    const auto ip = probs.id();
    return detail::tape_of(probs).record(std::move(out), {probs}, [ip, targets](Tape& t, const Array& g) {
        const auto& pv = t.value(ip);
        auto& d = t.grad_buffer(ip);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double p = pv[i];
            if (p <= kLogClamp || p >= 1.0 - kLogClamp) continue;
            d[i] += g[i] * (p - targets[i]) / (p * (1.0 - p));
        }
    });
}

/// Mean squared error against fixed targets.
inline DTensor mse(const DTensor& pred, const Array& targets)
{
    if (pred.size() != targets.size()) {
        throw ShapeError("mse: predictions " + to_string(pred.shape()) + " vs targets " + to_string(targets.shape()));
    }
    const auto& pv = pred.value();
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) loss += (pv[i] - targets[i]) * (pv[i] - targets[i]);
    const double n = static_cast<double>(pv.size());
    const auto ip = pred.id();
    return detail::tape_of(pred).record(Array::scalar(loss / n), {pred}, [ip, targets, n](Tape& t, const Array& g) {
        const auto& pv = t.value(ip);
        auto& d = t.grad_buffer(ip);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0] * 2.0 * (pv[i] - targets[i]) / n;
    });
}

} // namespace agcm
