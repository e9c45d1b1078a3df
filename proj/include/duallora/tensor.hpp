// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "duallora/errors.hpp"
#include "duallora/rng.hpp"

namespace duallora {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Tensor storage. Aligned so Eigen's vectorized kernels take the same path,
/// and hence sum in the same order, for every allocation.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

struct TensorImpl {
    Shape shape;
    Buffer data;
    Buffer grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<ImplPtr> parents;
    // Reads this node's grad and accumulates into parents that require grad.
    std::function<void(const TensorImpl&)> backward;

    bool is_leaf() const { return parents.empty(); }
    Buffer& ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
        return grad;
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, merges, oracles).
class NoGradGuard {
  public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool previous_;
};

/// Dense row-major float64 tensor.
///
/// Copies are handles onto the same storage, so a parameter held by a
/// model and by an optimizer is the same object. Use clone() for a deep copy.
class Tensor {
  public:
    Tensor() = default;

    Tensor(Shape shape, Buffer data, bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        if (shape.empty()) {
            throw DimensionError("tensor shape must have at least one extent");
        }
        for (auto extent : shape) {
            if (extent == 0) {
                throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
            }
        }
        if (numel(shape) != data.size()) {
            throw DimensionError("shape " + shape_str(shape) + " does not match " +
                                 std::to_string(data.size()) + " values");
        }
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
    }

    template <typename Alloc>
        requires(!std::is_same_v<std::vector<double, Alloc>, Buffer>)
    Tensor(Shape shape, const std::vector<double, Alloc>& data, bool requires_grad = false)
        : Tensor(std::move(shape), Buffer(data.begin(), data.end()), requires_grad) {}

    static Tensor zeros(Shape shape) {
        const auto n = numel(shape);
        return Tensor(std::move(shape), Buffer(n, 0.0));
    }
    static Tensor full(Shape shape, double value) {
        const auto n = numel(shape);
        return Tensor(std::move(shape), Buffer(n, value));
    }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor vector(const std::vector<double>& values) { return Tensor({values.size()}, values); }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        Buffer values;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& row : rows) {
            if (row.size() != cols) {
                throw DimensionError("ragged matrix literal");
            }
            values.insert(values.end(), row.begin(), row.end());
        }
        return Tensor({rows.size(), cols}, std::move(values));
    }
    static Tensor randn(Shape shape, Rng& rng, double stddev) {
        Buffer values(numel(shape));
        for (auto& v : values) {
            v = rng.normal(0.0, stddev);
        }
        return Tensor(std::move(shape), std::move(values));
    }
    static Tensor identity(std::size_t n) {
        Tensor t = zeros({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            t.impl_->data[i * n + i] = 1.0;
        }
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t dim() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t rows() const { return impl_->shape.front(); }
    std::size_t cols() const { return impl_->shape.back(); }

    std::span<const double> data() const { return impl_->data; }
    /// In-place access for optimizers and merges; never call during a live graph.
    std::span<double> mutable_data() { return impl_->data; }
    const Buffer& values() const { return impl_->data; }

    bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
    std::span<const double> grad() const { return impl_->grad; }
    /// Gradient as a tensor, zeros when none has been accumulated.
    Tensor grad_tensor() const {
        if (!has_grad()) {
            return zeros(shape());
        }
        return Tensor(shape(), impl_->grad);
    }
    void zero_grad() { impl_->grad.clear(); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool value) {
        impl_->requires_grad = value;
        return *this;
    }

    const char* op() const { return impl_->op; }

    double item() const {
        if (size() != 1) {
            throw ContractError("item() on tensor of shape " + shape_str(shape()));
        }
        return impl_->data[0];
    }
    double operator[](std::size_t i) const { return impl_->data[i]; }
    double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

    Tensor clone() const { return Tensor(shape(), impl_->data, false); }

    /// Same values, no history.
    Tensor detach() const { return clone(); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const detail::ImplPtr& impl() const { return impl_; }

  private:
    detail::ImplPtr impl_;
};

namespace detail {

inline bool needs_graph(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) {
        return false;
    }
    for (const auto* t : inputs) {
        if (t && t->defined() && t->requires_grad()) {
            return true;
        }
    }
    return false;
}

/// Wraps a freshly computed value, attaching history when any input tracks grads.
inline Tensor make_result(Shape shape, Buffer data, const char* op,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(const TensorImpl&)> backward) {
    Tensor out(std::move(shape), std::move(data));
    if (needs_graph(inputs)) {
        auto& impl = *out.impl();
        impl.requires_grad = true;
        impl.op = op;
        for (const auto* t : inputs) {
            if (t && t->defined()) {
                impl.parents.push_back(t->impl());
            }
        }
        impl.backward = std::move(backward);
    }
    return out;
}

inline bool tracks(const ImplPtr& p) { return p && p->requires_grad; }

inline ConstMap as_matrix(const Buffer& v, std::size_t r, std::size_t c) {
    return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap as_matrix(Buffer& v, std::size_t r, std::size_t c) {
    return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.dim() != 2) {
        throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
    }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; interior history is released afterwards.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward() requires a scalar loss");
    }
    if (!loss.requires_grad() || loss.impl()->is_leaf()) {
        throw ContractError("backward() requires a loss produced by a recorded graph");
    }
    using detail::ImplPtr;
    using detail::TensorImpl;

    // Owning handles: releasing a node's history must not free nodes still queued.
    std::vector<ImplPtr> order;
    std::unordered_set<TensorImpl*> seen;
    std::vector<std::pair<ImplPtr, std::size_t>> stack{{loss.impl(), 0}};
    seen.insert(loss.impl().get());
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            ImplPtr parent = top.first->parents[top.second++];
            if (parent->requires_grad && !seen.count(parent.get())) {
                seen.insert(parent.get());
                stack.emplace_back(std::move(parent), 0);
            }
        } else {
            order.push_back(std::move(top.first));
            stack.pop_back();
        }
    }

    loss.impl()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = it->get();
        if (node->is_leaf() || !node->backward) {
            continue;
        }
        node->ensure_grad();
        node->backward(*node);
        node->backward = nullptr;
        node->parents.clear();
        node->grad.clear();
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Buffer out(m * n);
    detail::as_matrix(out, m, n).noalias() =
        detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), k, n);
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result({m, n}, std::move(out), "matmul", {&a, &b},
                               [pa, pb, m, k, n](const detail::TensorImpl& self) {
                                   auto g = detail::as_matrix(self.grad, m, n);
                                   if (detail::tracks(pa)) {
                                       detail::as_matrix(pa->ensure_grad(), m, k).noalias() +=
                                           g * detail::as_matrix(pb->data, k, n).transpose();
                                   }
                                   if (detail::tracks(pb)) {
                                       detail::as_matrix(pb->ensure_grad(), k, n).noalias() +=
                                           detail::as_matrix(pa->data, m, k).transpose() * g;
                                   }
                               });
}

/// x [T x in] times weight [out x in] transposed, plus optional bias [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = Tensor()) {
    detail::require_2d(x, "linear");
    detail::require_2d(weight, "linear");
    const std::size_t t = x.rows(), in = x.cols(), out_dim = weight.rows();
    if (weight.cols() != in) {
        throw DimensionError("linear shape mismatch: input " + shape_str(x.shape()) + " vs weight " +
                             shape_str(weight.shape()));
    }
    if (bias.defined() && bias.size() != out_dim) {
        throw DimensionError("linear bias " + shape_str(bias.shape()) + " vs weight " +
                             shape_str(weight.shape()));
    }
    Buffer out(t * out_dim);
    auto y = detail::as_matrix(out, t, out_dim);
    y.noalias() = detail::as_matrix(x.values(), t, in) *
                  detail::as_matrix(weight.values(), out_dim, in).transpose();
    if (bias.defined()) {
        y.rowwise() += detail::as_matrix(bias.values(), 1, out_dim).row(0);
    }
    auto px = x.impl(), pw = weight.impl();
    auto pb = bias.defined() ? bias.impl() : detail::ImplPtr();
    return detail::make_result(
        {t, out_dim}, std::move(out), "linear", {&x, &weight, &bias},
        [px, pw, pb, t, in, out_dim](const detail::TensorImpl& self) {
            auto g = detail::as_matrix(self.grad, t, out_dim);
            if (detail::tracks(px)) {
                detail::as_matrix(px->ensure_grad(), t, in).noalias() +=
                    g * detail::as_matrix(pw->data, out_dim, in);
            }
            if (detail::tracks(pw)) {
                detail::as_matrix(pw->ensure_grad(), out_dim, in).noalias() +=
                    g.transpose() * detail::as_matrix(px->data, t, in);
            }
            if (detail::tracks(pb)) {
                detail::as_matrix(pb->ensure_grad(), 1, out_dim) += g.colwise().sum();
            }
        });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Buffer out(m * n);
    detail::as_matrix(out, n, m) = detail::as_matrix(a.values(), m, n).transpose();
    auto pa = a.impl();
    return detail::make_result({n, m}, std::move(out), "transpose", {&a},
                               [pa, m, n](const detail::TensorImpl& self) {
                                   detail::as_matrix(pa->ensure_grad(), m, n) +=
                                       detail::as_matrix(self.grad, n, m).transpose();
                               });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    auto pa = a.impl();
    return detail::make_result(std::move(shape), a.values(), "reshape", {&a},
                               [pa](const detail::TensorImpl& self) {
                                   auto& g = pa->ensure_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       g[i] += self.grad[i];
                                   }
                               });
}

/// Elementwise sum. b may also be a vector (or 1 x n row) matching a's last
/// extent, in which case it is added to every row.
inline Tensor add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool row_broadcast = !same && a.dim() == 2 && b.size() == a.cols() &&
                               (b.dim() == 1 || (b.dim() == 2 && b.rows() == 1));
    if (!same && !row_broadcast) {
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " + " +
                             shape_str(b.shape()));
    }
    Buffer out = a.values();
    const std::size_t width = b.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += b[same ? i : i % width];
    }
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result(a.shape(), std::move(out), "add", {&a, &b},
                               [pa, pb, same, width](const detail::TensorImpl& self) {
                                   if (detail::tracks(pa)) {
                                       auto& g = pa->ensure_grad();
                                       for (std::size_t i = 0; i < g.size(); ++i) {
                                           g[i] += self.grad[i];
                                       }
                                   }
                                   if (detail::tracks(pb)) {
                                       auto& g = pb->ensure_grad();
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                           g[same ? i : i % width] += self.grad[i];
                                       }
                                   }
                               });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("sub shape mismatch: " + shape_str(a.shape()) + " - " +
                             shape_str(b.shape()));
    }
    Buffer out = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= b[i];
    }
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result(a.shape(), std::move(out), "sub", {&a, &b},
                               [pa, pb](const detail::TensorImpl& self) {
                                   if (detail::tracks(pa)) {
                                       auto& g = pa->ensure_grad();
                                       for (std::size_t i = 0; i < g.size(); ++i) {
                                           g[i] += self.grad[i];
                                       }
                                   }
                                   if (detail::tracks(pb)) {
                                       auto& g = pb->ensure_grad();
                                       for (std::size_t i = 0; i < g.size(); ++i) {
                                           g[i] -= self.grad[i];
                                       }
                                   }
                               });
}

/// Elementwise product of equally shaped tensors.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul shape mismatch: " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    }
    Buffer out = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b[i];
    }
    auto pa = a.impl(), pb = b.impl();
    return detail::make_result(a.shape(), std::move(out), "mul", {&a, &b},
                               [pa, pb](const detail::TensorImpl& self) {
                                   if (detail::tracks(pa)) {
                                       auto& g = pa->ensure_grad();
                                       for (std::size_t i = 0; i < g.size(); ++i) {
                                           g[i] += self.grad[i] * pb->data[i];
                                       }
                                   }
                                   if (detail::tracks(pb)) {
                                       auto& g = pb->ensure_grad();
                                       for (std::size_t i = 0; i < g.size(); ++i) {
                                           g[i] += self.grad[i] * pa->data[i];
                                       }
                                   }
                               });
}

inline Tensor scale(const Tensor& a, double factor) {
    Buffer out = a.values();
    for (auto& v : out) {
        v *= factor;
    }
    auto pa = a.impl();
    return detail::make_result(a.shape(), std::move(out), "scale", {&a},
                               [pa, factor](const detail::TensorImpl& self) {
                                   auto& g = pa->ensure_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       g[i] += factor * self.grad[i];
                                   }
                               });
}

inline Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) {
        total += v;
    }
    auto pa = a.impl();
    return detail::make_result({1}, {total}, "sum", {&a}, [pa](const detail::TensorImpl& self) {
        auto& g = pa->ensure_grad();
        for (auto& v : g) {
            v += self.grad[0];
        }
    });
}

/// Mean of a 2-D tensor along an axis (0: over rows, 1: over columns), or of
/// a vector along axis 0.
inline Tensor mean(const Tensor& x, std::size_t axis) {
    if (x.dim() == 1) {
        if (axis != 0) {
            throw DimensionError("mean axis out of range for " + shape_str(x.shape()));
        }
        return scale(sum(x), 1.0 / static_cast<double>(x.size()));
    }
    detail::require_2d(x, "mean");
    if (axis > 1) {
        throw DimensionError("mean axis out of range for " + shape_str(x.shape()));
    }
    const std::size_t m = x.rows(), n = x.cols();
    auto xm = detail::as_matrix(x.values(), m, n);
    Buffer out(axis == 0 ? n : m);
    if (axis == 0) {
        detail::as_matrix(out, 1, n) = xm.colwise().mean();
    } else {
        detail::as_matrix(out, m, 1) = xm.rowwise().mean();
    }
    auto px = x.impl();
    const std::size_t len = out.size();
    return detail::make_result({len}, std::move(out), "mean", {&x},
                               [px, m, n, axis](const detail::TensorImpl& self) {
                                   auto& g = px->ensure_grad();
                                   for (std::size_t r = 0; r < m; ++r) {
                                       for (std::size_t c = 0; c < n; ++c) {
                                           g[r * n + c] += axis == 0 ? self.grad[c] / m
                                                                     : self.grad[r] / n;
                                       }
                                   }
                               });
}

/// Max-subtracted softmax along an axis of a vector or matrix.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.dim() || x.dim() > 2) {
        throw DimensionError("softmax axis " + std::to_string(axis) + " invalid for " +
                             shape_str(x.shape()));
    }
    // View as (outer, len, stride): slices run along `len` with step `stride`.
    const std::size_t rows = x.dim() == 2 ? x.rows() : 1;
    const std::size_t cols = x.cols();
    const bool along_cols = x.dim() == 1 || axis == 1;
    const std::size_t outer = along_cols ? rows : cols;
    const std::size_t len = along_cols ? cols : rows;
    const std::size_t stride = along_cols ? 1 : cols;
    const std::size_t step = along_cols ? cols : 1;
    Buffer out(x.size());
    const auto& in = x.values();
    for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t base = o * step;
        double peak = in[base];
        for (std::size_t i = 1; i < len; ++i) {
            peak = std::max(peak, in[base + i * stride]);
        }
        double total = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const double e = std::exp(in[base + i * stride] - peak);
            out[base + i * stride] = e;
            total += e;
        }
        for (std::size_t i = 0; i < len; ++i) {
            out[base + i * stride] /= total;
        }
    }
    auto px = x.impl();
    return detail::make_result(
        x.shape(), std::move(out), "softmax", {&x},
        [px, outer, len, stride, step](const detail::TensorImpl& self) {
            auto& g = px->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t base = o * step;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t at = base + i * stride;
                    dot += self.grad[at] * self.data[at];
                }
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t at = base + i * stride;
                    g[at] += self.data[at] * (self.grad[at] - dot);
                }
            }
        });
}

/// RMS normalization per row, scaled by gain: y = x / sqrt(mean(x^2) + eps) * gain.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6) {
    const std::size_t n = x.cols();
    const std::size_t m = x.size() / n;
    if (gain.size() != n) {
        throw DimensionError("layer_norm gain " + shape_str(gain.shape()) + " vs input " +
                             shape_str(x.shape()));
    }
    Buffer normed(x.size()), out(x.size()), inv_rms(m);
    const auto& in = x.values();
    for (std::size_t r = 0; r < m; ++r) {
        double ms = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            ms += in[r * n + c] * in[r * n + c];
        }
        ms /= static_cast<double>(n);
        inv_rms[r] = 1.0 / std::sqrt(ms + eps);
        for (std::size_t c = 0; c < n; ++c) {
            normed[r * n + c] = in[r * n + c] * inv_rms[r];
            out[r * n + c] = normed[r * n + c] * gain[c];
        }
    }
    auto px = x.impl(), pg = gain.impl();
    return detail::make_result(
        x.shape(), std::move(out), "layer_norm", {&x, &gain},
        [px, pg, m, n, normed = std::move(normed),
         inv_rms = std::move(inv_rms)](const detail::TensorImpl& self) {
            if (detail::tracks(pg)) {
                auto& gg = pg->ensure_grad();
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t c = 0; c < n; ++c) {
                        gg[c] += self.grad[r * n + c] * normed[r * n + c];
                    }
                }
            }
            if (detail::tracks(px)) {
                auto& gx = px->ensure_grad();
                for (std::size_t r = 0; r < m; ++r) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < n; ++c) {
                        dot += self.grad[r * n + c] * pg->data[c] * normed[r * n + c];
                    }
                    dot /= static_cast<double>(n);
                    for (std::size_t c = 0; c < n; ++c) {
                        const double dn = self.grad[r * n + c] * pg->data[c];
                        gx[r * n + c] += (dn - normed[r * n + c] * dot) * inv_rms[r];
                    }
                }
            }
        });
}

/// Tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
    constexpr double c = 0.044715;
    Buffer out(x.size());
    const auto& in = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = in[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
    }
    auto px = x.impl();
    return detail::make_result(x.shape(), std::move(out), "gelu", {&x},
                               [px](const detail::TensorImpl& self) {
                                   auto& g = px->ensure_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       const double v = px->data[i];
                                       const double u = k * (v + c * v * v * v);
                                       const double th = std::tanh(u);
                                       const double du = k * (1.0 + 3.0 * c * v * v);
                                       const double d =
                                           0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                                       g[i] += self.grad[i] * d;
                                   }
                               });
}

inline Tensor sigmoid(const Tensor& x) {
    Buffer out(x.size());
    const auto& in = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = in[i] >= 0 ? 1.0 / (1.0 + std::exp(-in[i])) : std::exp(in[i]) / (1.0 + std::exp(in[i]));
    }
    auto px = x.impl();
    return detail::make_result(x.shape(), std::move(out), "sigmoid", {&x},
                               [px](const detail::TensorImpl& self) {
                                   auto& g = px->ensure_grad();
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       const double s = self.data[i];
                                       g[i] += self.grad[i] * s * (1.0 - s);
                                   }
                               });
}

/// Rows of `table` selected by ids, as a [len(ids) x d] matrix.
inline Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    detail::require_2d(table, "embedding_lookup");
    if (ids.empty()) {
        throw ContractError("embedding_lookup with no ids");
    }
    const std::size_t vocab = table.rows(), d = table.cols();
    Buffer out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("embedding id " + std::to_string(ids[i]) + " outside [0, " +
                             std::to_string(vocab) + ")");
        }
        std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    auto pt = table.impl();
    std::vector<int> rows(ids.begin(), ids.end());
    return detail::make_result({ids.size(), d}, std::move(out), "embedding_lookup", {&table},
                               [pt, d, rows = std::move(rows)](const detail::TensorImpl& self) {
                                   auto& g = pt->ensure_grad();
                                   for (std::size_t i = 0; i < rows.size(); ++i) {
                                       for (std::size_t c = 0; c < d; ++c) {
                                           g[static_cast<std::size_t>(rows[i]) * d + c] +=
                                               self.grad[i * d + c];
                                       }
                                   }
                               });
}

inline constexpr int kIgnoreIndex = -1;

/// Mean token cross-entropy over positions whose target is not kIgnoreIndex.
/// Returns 0 when every position is ignored.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    detail::require_2d(logits, "cross_entropy");
    const std::size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             shape_str(logits.shape()) + " logits");
    }
    Buffer probs(t * v, 0.0);
    double total = 0.0;
    std::size_t counted = 0;
    const auto& in = logits.values();
    for (std::size_t r = 0; r < t; ++r) {
        if (targets[r] == kIgnoreIndex) {
            continue;
        }
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
            throw IndexError("target id " + std::to_string(targets[r]) + " outside [0, " +
                             std::to_string(v) + ")");
        }
        const double* row = in.data() + r * v;
        const double peak = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t c = 0; c < v; ++c) {
            probs[r * v + c] = std::exp(row[c] - peak);
            z += probs[r * v + c];
        }
        for (std::size_t c = 0; c < v; ++c) {
            probs[r * v + c] /= z;
        }
        total += std::log(z) + peak - row[targets[r]];
        ++counted;
    }
    const double denom = counted ? static_cast<double>(counted) : 1.0;
    auto pl = logits.impl();
    std::vector<int> tgt(targets.begin(), targets.end());
    return detail::make_result(
        {1}, {total / denom}, "cross_entropy", {&logits},
        [pl, t, v, denom, probs = std::move(probs), tgt = std::move(tgt)](
            const detail::TensorImpl& self) {
            auto& g = pl->ensure_grad();
            const double scale_factor = self.grad[0] / denom;
            for (std::size_t r = 0; r < t; ++r) {
                if (tgt[r] == kIgnoreIndex) {
                    continue;
                }
                for (std::size_t c = 0; c < v; ++c) {
                    g[r * v + c] += scale_factor * probs[r * v + c];
                }
                g[r * v + static_cast<std::size_t>(tgt[r])] -= scale_factor;
            }
        });
}

/// Per-head post-softmax weights [queries x keys], filled by attention().
using AttentionWeights = std::vector<detail::RowMat>;

/// Multi-head scaled dot-product attention over already projected q [Tq x d],
/// k [Tk x d], v [Tk x d]. Heads are contiguous column blocks of width
/// d / n_heads. With `causal`, query i only sees keys j <= i.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        bool causal, AttentionWeights* weights_out = nullptr) {
    detail::require_2d(q, "attention");
    detail::require_2d(k, "attention");
    detail::require_2d(v, "attention");
    const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d || v.rows() != tk) {
        throw DimensionError("attention shapes q " + shape_str(q.shape()) + " k " +
                             shape_str(k.shape()) + " v " + shape_str(v.shape()));
    }
    if (n_heads == 0 || d % n_heads != 0) {
        throw DimensionError("attention width " + std::to_string(d) + " not divisible into " +
                             std::to_string(n_heads) + " heads");
    }
    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    auto qm = detail::as_matrix(q.values(), tq, d);
    auto km = detail::as_matrix(k.values(), tk, d);
    auto vm = detail::as_matrix(v.values(), tk, d);
    Buffer out(tq * d);
    auto om = detail::as_matrix(out, tq, d);
    AttentionWeights probs(n_heads);
    const auto hd = static_cast<Eigen::Index>(dh);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * dh);
        detail::RowMat s = (qm.middleCols(c0, hd) * km.middleCols(c0, hd).transpose()) * inv_sqrt;
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const Eigen::Index visible = causal ? std::min<Eigen::Index>(i + 1, s.cols()) : s.cols();
            const double peak = s.row(i).head(visible).maxCoeff();
            double z = 0.0;
            for (Eigen::Index j = 0; j < s.cols(); ++j) {
                const double e = j < visible ? std::exp(s(i, j) - peak) : 0.0;
                s(i, j) = e;
                z += e;
            }
            s.row(i) /= z;
        }
        om.middleCols(c0, hd).noalias() = s * vm.middleCols(c0, hd);
        probs[h] = std::move(s);
    }
    if (weights_out) {
        *weights_out = probs;
    }
    auto pq = q.impl(), pk = k.impl(), pv = v.impl();
    return detail::make_result(
        {tq, d}, std::move(out), "attention", {&q, &k, &v},
        [pq, pk, pv, tq, tk, d, dh, n_heads, inv_sqrt,
         probs = std::move(probs)](const detail::TensorImpl& self) {
            auto g = detail::as_matrix(self.grad, tq, d);
            auto qm = detail::as_matrix(pq->data, tq, d);
            auto km = detail::as_matrix(pk->data, tk, d);
            auto vm = detail::as_matrix(pv->data, tk, d);
            const auto hd = static_cast<Eigen::Index>(dh);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const auto c0 = static_cast<Eigen::Index>(h * dh);
                const auto& p = probs[h];
                auto gh = g.middleCols(c0, hd);
                if (detail::tracks(pv)) {
                    detail::as_matrix(pv->ensure_grad(), tk, d).middleCols(c0, hd).noalias() +=
                        p.transpose() * gh;
                }
                if (!detail::tracks(pq) && !detail::tracks(pk)) {
                    continue;
                }
                detail::RowMat dp = gh * vm.middleCols(c0, hd).transpose();
                const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
                detail::RowMat ds = p.array() * (dp.colwise() - row_dot).array();
                ds *= inv_sqrt;
                if (detail::tracks(pq)) {
                    detail::as_matrix(pq->ensure_grad(), tq, d).middleCols(c0, hd).noalias() +=
                        ds * km.middleCols(c0, hd);
                }
                if (detail::tracks(pk)) {
                    detail::as_matrix(pk->ensure_grad(), tk, d).middleCols(c0, hd).noalias() +=
                        ds.transpose() * qm.middleCols(c0, hd);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Utilities
// ---------------------------------------------------------------------------

inline bool all_finite(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](double v) { return std::isfinite(v); });
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("max_abs_diff shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

/// Numerical rank by Gaussian elimination with full pivoting. A pivot counts
/// when its magnitude exceeds tol * max|entry| of the input.
inline std::size_t rank_of(const Tensor& m, double tol = 1e-10) {
    detail::require_2d(m, "rank_of");
    const std::size_t rows = m.rows(), cols = m.cols();
    Buffer a = m.values();
    double largest = 0.0;
    for (double v : a) {
        largest = std::max(largest, std::abs(v));
    }
    if (largest == 0.0) {
        return 0;
    }
    const double threshold = tol * largest;
    std::vector<std::size_t> col_of(cols);
    std::iota(col_of.begin(), col_of.end(), 0);
    std::size_t rank = 0;
    for (; rank < std::min(rows, cols); ++rank) {
        std::size_t pr = rank, pc = rank;
        double best = 0.0;
        for (std::size_t r = rank; r < rows; ++r) {
            for (std::size_t c = rank; c < cols; ++c) {
                if (std::abs(a[r * cols + c]) > best) {
                    best = std::abs(a[r * cols + c]);
                    pr = r;
                    pc = c;
                }
            }
        }
        if (best <= threshold) {
            break;
        }
        for (std::size_t c = 0; c < cols; ++c) {
            std::swap(a[rank * cols + c], a[pr * cols + c]);
        }
        for (std::size_t r = 0; r < rows; ++r) {
            std::swap(a[r * cols + rank], a[r * cols + pc]);
        }
        const double pivot = a[rank * cols + rank];
        for (std::size_t r = rank + 1; r < rows; ++r) {
            const double f = a[r * cols + rank] / pivot;
            if (f == 0.0) {
                continue;
            }
            for (std::size_t c = rank; c < cols; ++c) {
                a[r * cols + c] -= f * a[rank * cols + c];
            }
        }
    }
    return rank;
}

}  // namespace duallora
