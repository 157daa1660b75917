#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hmgn {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t k = 0; k < shape.size(); ++k) {
        if (k) os << ',';
        os << shape[k];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array of doubles with an optional gradient accumulator.
///
/// A Tensor is a shared handle: copies alias the same storage. Rank 0 is a
/// scalar, rank 1 a vector, rank 2 a row-major matrix.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_size(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (data.size() != shape_size(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_string(shape));
        }
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor vector(std::vector<double> data, bool requires_grad = false) {
        const std::size_t n = data.size();
        return Tensor({n}, std::move(data), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor({}, {value}, requires_grad);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t size() const { return impl_->data.size(); }
    std::size_t rows() const { return rank() == 2 ? impl_->shape[0] : 0; }
    std::size_t cols() const { return rank() == 2 ? impl_->shape[1] : 0; }
    bool requires_grad() const { return impl_->requires_grad; }

    // Shallow constness: a const handle still refers to mutable storage.
    std::span<double> data() const { return impl_->data; }
    std::span<double> grad() const { return impl_->grad; }

    double item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
        return impl_->data[0];
    }
    double& at(std::size_t r, std::size_t c) const { return impl_->data[r * impl_->shape[1] + c]; }
    std::span<double> row(std::size_t r) const {
        return std::span<double>(impl_->data).subspan(r * impl_->shape[1], impl_->shape[1]);
    }

    void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }

    /// Deep copy with detached storage.
    Tensor clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    struct Impl {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
    };

    Tensor(Shape shape, std::vector<double> data, bool requires_grad)
        : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
        impl_->requires_grad = requires_grad;
        if (requires_grad) impl_->grad.assign(impl_->data.size(), 0.0);
    }

    std::shared_ptr<Impl> impl_;
};

namespace detail {

inline void require(bool ok, const std::string& op, const Tensor& a, const Tensor& b) {
    if (!ok) {
        throw ShapeError(op + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
}

inline void require_rank(const Tensor& a, std::size_t rank, const std::string& op) {
    if (a.rank() != rank) {
        throw ShapeError(op + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_string(a.shape()));
    }
}

}  // namespace detail

/// Define-by-run recording of primitive operations for reverse-mode
/// differentiation. Entries are appended in execution order, so the record is
/// topologically sorted and backward() simply walks it in reverse.
///
/// A tape in no_grad mode evaluates forward values only and records nothing.
class Tape {
public:
    enum class Mode { record, no_grad };

    explicit Tape(Mode mode = Mode::record) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return mode_ == Mode::record; }
    std::size_t size() const { return entries_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
    /// Call once per tape; leaf gradients accumulate across tapes.
    void backward(const Tensor& loss) {
        if (loss.size() != 1) throw ShapeError("backward() needs a scalar loss, got " + shape_string(loss.shape()));
        if (!loss.requires_grad()) return;
        Tensor seed = loss;
        seed.grad()[0] += 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
    }

    // ---- elementwise -------------------------------------------------------

    Tensor add(const Tensor& a, const Tensor& b) {
        detail::require(a.shape() == b.shape(), "add", a, b);
        Tensor out = make(a.shape(), a, b);
        auto o = out.data();
        auto x = a.data();
        auto y = b.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] + y[k];
        record("add", out, [a, b, out]() mutable {
            accumulate(a, out.grad());
            accumulate(b, out.grad());
        });
        return out;
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        detail::require(a.shape() == b.shape(), "sub", a, b);
        Tensor out = make(a.shape(), a, b);
        auto o = out.data();
        auto x = a.data();
        auto y = b.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] - y[k];
        record("sub", out, [a, b, out]() mutable {
            accumulate(a, out.grad());
            if (b.requires_grad()) {
                auto g = b.grad();
                auto go = out.grad();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] -= go[k];
            }
        });
        return out;
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        detail::require(a.shape() == b.shape(), "elementwise_mul", a, b);
        Tensor out = make(a.shape(), a, b);
        auto o = out.data();
        auto x = a.data();
        auto y = b.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] * y[k];
        record("elementwise_mul", out, [a, b, out]() mutable {
            auto go = out.grad();
            if (a.requires_grad()) {
                auto g = a.grad();
                auto y = b.data();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += go[k] * y[k];
            }
            if (b.requires_grad()) {
                auto g = b.grad();
                auto x = a.data();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += go[k] * x[k];
            }
        });
        return out;
    }

    Tensor scale(const Tensor& a, double s) {
        Tensor out = make(a.shape(), a);
        auto o = out.data();
        auto x = a.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = s * x[k];
        record("scale", out, [a, out, s]() mutable {
            if (!a.requires_grad()) return;
            auto g = a.grad();
            auto go = out.grad();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += s * go[k];
        });
        return out;
    }

    Tensor add_scalar(const Tensor& a, double s) {
        Tensor out = make(a.shape(), a);
        auto o = out.data();
        auto x = a.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = x[k] + s;
        record("add_scalar", out, [a, out]() mutable { accumulate(a, out.grad()); });
        return out;
    }

    Tensor sigmoid(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        auto o = out.data();
        auto x = a.data();
        for (std::size_t k = 0; k < o.size(); ++k) {
            o[k] = x[k] >= 0 ? 1.0 / (1.0 + std::exp(-x[k])) : std::exp(x[k]) / (1.0 + std::exp(x[k]));
        }
        record("sigmoid", out, [a, out]() mutable {
            if (!a.requires_grad()) return;
            auto g = a.grad();
            auto go = out.grad();
            auto y = out.data();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += go[k] * y[k] * (1.0 - y[k]);
        });
        return out;
    }

    Tensor log(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        auto o = out.data();
        auto x = a.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = std::log(x[k]);
        record("log", out, [a, out]() mutable {
            if (!a.requires_grad()) return;
            auto g = a.grad();
            auto go = out.grad();
            auto x = a.data();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += go[k] / x[k];
        });
        return out;
    }

    /// log(sigmoid(x)) evaluated as -softplus(-x), finite for any finite x.
    Tensor log_sigmoid(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        auto o = out.data();
        auto x = a.data();
        for (std::size_t k = 0; k < o.size(); ++k) {
            o[k] = x[k] >= 0 ? -std::log1p(std::exp(-x[k])) : x[k] - std::log1p(std::exp(x[k]));
        }
        record("log_sigmoid", out, [a, out]() mutable {
            if (!a.requires_grad()) return;
            auto g = a.grad();
            auto go = out.grad();
            auto x = a.data();
            for (std::size_t k = 0; k < g.size(); ++k) {
                // d/dx log σ(x) = σ(-x)
                const double s = x[k] >= 0 ? std::exp(-x[k]) / (1.0 + std::exp(-x[k]))
                                           : 1.0 / (1.0 + std::exp(x[k]));
                g[k] += go[k] * s;
            }
        });
        return out;
    }

    Tensor sqrt(const Tensor& a) {
        Tensor out = make(a.shape(), a);
        auto o = out.data();
        auto x = a.data();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = std::sqrt(x[k]);
        record("sqrt", out, [a, out]() mutable {
            if (!a.requires_grad()) return;
            auto g = a.grad();
            auto go = out.grad();
            auto y = out.data();
            // subgradient 0 at the origin
            for (std::size_t k = 0; k < g.size(); ++k) {
                if (y[k] > 0) g[k] += go[k] * 0.5 / y[k];
            }
        });
        return out;
    }

    // ---- reductions --------------------------------------------------------

    Tensor sum(const Tensor& a) {
        Tensor out = make({}, a);
        double s = 0;
        for (double v : a.data()) s += v;
        out.data()[0] = s;
        record("sum", out, [a, out]() mutable {
            if (!a.requires_grad()) return;
            const double go = out.grad()[0];
            for (double& g : a.grad()) g += go;
        });
        return out;
    }

    Tensor dot(const Tensor& a, const Tensor& b) {
        detail::require(a.rank() == 1 && a.shape() == b.shape(), "dot", a, b);
        Tensor out = make({}, a, b);
        double s = 0;
        auto x = a.data();
        auto y = b.data();
        for (std::size_t k = 0; k < x.size(); ++k) s += x[k] * y[k];
        out.data()[0] = s;
        record("dot", out, [a, b, out]() mutable {
            const double go = out.grad()[0];
            if (a.requires_grad()) {
                auto g = a.grad();
                auto y = b.data();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += go * y[k];
            }
            if (b.requires_grad()) {
                auto g = b.grad();
                auto x = a.data();
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += go * x[k];
            }
        });
        return out;
    }

    Tensor l2_norm_sq(const Tensor& a) {
        Tensor out = make({}, a);
        double s = 0;
        for (double v : a.data()) s += v * v;
        out.data()[0] = s;
        record("l2_norm_sq", out, [a, out]() mutable {
            if (!a.requires_grad()) return;
            const double go = out.grad()[0];
            auto g = a.grad();
            auto x = a.data();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += 2.0 * go * x[k];
        });
        return out;
    }

    /// Numerically stable softmax of a vector (max-subtracted).
    Tensor softmax(const Tensor& a) {
        detail::require_rank(a, 1, "softmax");
        Tensor out = make(a.shape(), a);
        if (a.size() == 0) return out;
        auto x = a.data();
        auto o = out.data();
        const double m = *std::max_element(x.begin(), x.end());
        double z = 0;
        for (std::size_t k = 0; k < x.size(); ++k) {
            o[k] = std::exp(x[k] - m);
            z += o[k];
        }
        for (double& v : o) v /= z;
        record("softmax", out, [a, out]() mutable {
            if (!a.requires_grad()) return;
            auto y = out.data();
            auto go = out.grad();
            double inner = 0;
            for (std::size_t k = 0; k < y.size(); ++k) inner += go[k] * y[k];
            auto g = a.grad();
            for (std::size_t k = 0; k < g.size(); ++k) g[k] += y[k] * (go[k] - inner);
        });
        return out;
    }

    // ---- linear algebra ----------------------------------------------------

    Tensor matvec(const Tensor& m, const Tensor& v) {
        detail::require(m.rank() == 2 && v.rank() == 1 && m.cols() == v.size(), "matvec", m, v);
        const std::size_t n = m.rows();
        const std::size_t c = m.cols();
        Tensor out = make({n}, m, v);
        auto o = out.data();
        auto x = v.data();
        for (std::size_t r = 0; r < n; ++r) {
            auto mr = m.row(r);
            double s = 0;
            for (std::size_t k = 0; k < c; ++k) s += mr[k] * x[k];
            o[r] = s;
        }
        record("matvec", out, [m, v, out, n, c]() mutable {
            auto go = out.grad();
            if (m.requires_grad()) {
                auto g = m.grad();
                auto x = v.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t k = 0; k < c; ++k) g[r * c + k] += go[r] * x[k];
            }
            if (v.requires_grad()) {
                auto g = v.grad();
                for (std::size_t r = 0; r < n; ++r) {
                    auto mr = m.row(r);
                    for (std::size_t k = 0; k < c; ++k) g[k] += go[r] * mr[k];
                }
            }
        });
        return out;
    }

    Tensor matmul(const Tensor& a, const Tensor& b) {
        detail::require(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(), "matmul", a, b);
        const std::size_t n = a.rows();
        const std::size_t inner = a.cols();
        const std::size_t m = b.cols();
        Tensor out = make({n, m}, a, b);
        gemm(a.data(), b.data(), out.data(), n, inner, m);
        record("matmul", out, [a, b, out, n, inner, m]() mutable {
            auto go = out.grad();
            if (a.requires_grad()) {
                // dA = dOut · Bᵀ
                auto g = a.grad();
                auto bd = b.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t k = 0; k < inner; ++k) {
                        double s = 0;
                        for (std::size_t c = 0; c < m; ++c) s += go[r * m + c] * bd[k * m + c];
                        g[r * inner + k] += s;
                    }
            }
            if (b.requires_grad()) {
                // dB = Aᵀ · dOut
                auto g = b.grad();
                auto ad = a.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t k = 0; k < inner; ++k) {
                        const double av = ad[r * inner + k];
                        if (av == 0.0) continue;
                        for (std::size_t c = 0; c < m; ++c) g[k * m + c] += av * go[r * m + c];
                    }
            }
        });
        return out;
    }

    /// Row-wise linear map: out[r] = W · x[r] for every row, i.e. X·Wᵀ.
    Tensor linear_rows(const Tensor& x, const Tensor& w) {
        detail::require(x.rank() == 2 && w.rank() == 2 && x.cols() == w.cols(), "linear_rows", x, w);
        const std::size_t n = x.rows();
        const std::size_t in = x.cols();
        const std::size_t outd = w.rows();
        Tensor out = make({n, outd}, x, w);
        auto o = out.data();
        auto xd = x.data();
        auto wd = w.data();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < outd; ++j) {
                double s = 0;
                for (std::size_t k = 0; k < in; ++k) s += wd[j * in + k] * xd[r * in + k];
                o[r * outd + j] = s;
            }
        record("linear_rows", out, [x, w, out, n, in, outd]() mutable {
            auto go = out.grad();
            if (x.requires_grad()) {
                auto g = x.grad();
                auto wd = w.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < outd; ++j) {
                        const double gv = go[r * outd + j];
                        if (gv == 0.0) continue;
                        for (std::size_t k = 0; k < in; ++k) g[r * in + k] += gv * wd[j * in + k];
                    }
            }
            if (w.requires_grad()) {
                auto g = w.grad();
                auto xd = x.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t j = 0; j < outd; ++j) {
                        const double gv = go[r * outd + j];
                        if (gv == 0.0) continue;
                        for (std::size_t k = 0; k < in; ++k) g[j * in + k] += gv * xd[r * in + k];
                    }
            }
        });
        return out;
    }

    Tensor transpose(const Tensor& a) {
        detail::require_rank(a, 2, "transpose");
        const std::size_t n = a.rows();
        const std::size_t m = a.cols();
        Tensor out = make({m, n}, a);
        auto o = out.data();
        auto x = a.data();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < m; ++c) o[c * n + r] = x[r * m + c];
        record("transpose", out, [a, out, n, m]() mutable {
            if (!a.requires_grad()) return;
            auto g = a.grad();
            auto go = out.grad();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < m; ++c) g[r * m + c] += go[c * n + r];
        });
        return out;
    }

    // ---- row/segment operations used by graph propagation ------------------

    Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
        detail::require_rank(x, 2, "gather_rows");
        const std::size_t d = x.cols();
        for (std::size_t r : index) {
            if (r >= x.rows()) {
                throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range for shape " +
                                 shape_string(x.shape()));
            }
        }
        Tensor out = make({index.size(), d}, x);
        auto o = out.data();
        auto xd = x.data();
        for (std::size_t k = 0; k < index.size(); ++k)
            std::copy_n(xd.begin() + index[k] * d, d, o.begin() + k * d);
        record("gather_rows", out, [x, out, idx = std::vector<std::size_t>(index.begin(), index.end()), d]() mutable {
            if (!x.requires_grad()) return;
            auto g = x.grad();
            auto go = out.grad();
            for (std::size_t k = 0; k < idx.size(); ++k)
                for (std::size_t c = 0; c < d; ++c) g[idx[k] * d + c] += go[k * d + c];
        });
        return out;
    }

    /// Stacks matrices with equal column counts, or concatenates vectors.
    Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw ShapeError("concat_rows: no inputs");
        const bool vectors = parts.front().rank() == 1;
        const std::size_t d = vectors ? 1 : parts.front().cols();
        std::size_t n = 0;
        bool grad = false;
        for (const Tensor& p : parts) {
            detail::require(vectors ? p.rank() == 1 : (p.rank() == 2 && p.cols() == d), "concat_rows",
                            parts.front(), p);
            n += vectors ? p.size() : p.rows();
            grad = grad || p.requires_grad();
        }
        Tensor out = Tensor::zeros(vectors ? Shape{n} : Shape{n, d}, grad && recording());
        auto o = out.data();
        std::size_t offset = 0;
        for (const Tensor& p : parts) {
            std::copy(p.data().begin(), p.data().end(), o.begin() + offset);
            offset += p.size();
        }
        record("concat_rows", out, [parts, out]() mutable {
            auto go = out.grad();
            std::size_t offset = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    auto g = p.grad();
                    for (std::size_t k = 0; k < g.size(); ++k) g[k] += go[offset + k];
                }
                offset += p.size();
            }
        });
        return out;
    }

    /// out[r] = <a[r], b[r]>.
    Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
        detail::require(a.rank() == 2 && a.shape() == b.shape(), "rowwise_dot", a, b);
        const std::size_t n = a.rows();
        const std::size_t d = a.cols();
        Tensor out = make({n}, a, b);
        auto o = out.data();
        auto x = a.data();
        auto y = b.data();
        for (std::size_t r = 0; r < n; ++r) {
            double s = 0;
            for (std::size_t c = 0; c < d; ++c) s += x[r * d + c] * y[r * d + c];
            o[r] = s;
        }
        record("rowwise_dot", out, [a, b, out, n, d]() mutable {
            auto go = out.grad();
            if (a.requires_grad()) {
                auto g = a.grad();
                auto y = b.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) g[r * d + c] += go[r] * y[r * d + c];
            }
            if (b.requires_grad()) {
                auto g = b.grad();
                auto x = a.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) g[r * d + c] += go[r] * x[r * d + c];
            }
        });
        return out;
    }

    /// out[r] = w[r] · x[r].
    Tensor scale_rows(const Tensor& x, const Tensor& w) {
        detail::require(x.rank() == 2 && w.rank() == 1 && w.size() == x.rows(), "scale_rows", x, w);
        const std::size_t n = x.rows();
        const std::size_t d = x.cols();
        Tensor out = make(x.shape(), x, w);
        auto o = out.data();
        auto xd = x.data();
        auto wd = w.data();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) o[r * d + c] = wd[r] * xd[r * d + c];
        record("scale_rows", out, [x, w, out, n, d]() mutable {
            auto go = out.grad();
            if (x.requires_grad()) {
                auto g = x.grad();
                auto wd = w.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) g[r * d + c] += wd[r] * go[r * d + c];
            }
            if (w.requires_grad()) {
                auto g = w.grad();
                auto xd = x.data();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) g[r] += xd[r * d + c] * go[r * d + c];
            }
        });
        return out;
    }

    /// out[r] = x[r] + v for a row vector v.
    Tensor add_row(const Tensor& x, const Tensor& v) {
        detail::require(x.rank() == 2 && v.rank() == 1 && v.size() == x.cols(), "add_row", x, v);
        const std::size_t n = x.rows();
        const std::size_t d = x.cols();
        Tensor out = make(x.shape(), x, v);
        auto o = out.data();
        auto xd = x.data();
        auto vd = v.data();
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) o[r * d + c] = xd[r * d + c] + vd[c];
        record("add_row", out, [x, v, out, n, d]() mutable {
            accumulate(x, out.grad());
            if (v.requires_grad()) {
                auto g = v.grad();
                auto go = out.grad();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) g[c] += go[r * d + c];
            }
        });
        return out;
    }

    /// Softmax of `scores` taken independently within each segment; entries
    /// sharing a segment id are normalized together. Ids need not be sorted.
    Tensor segment_softmax(const Tensor& scores, std::span<const std::size_t> segment,
                           std::size_t num_segments) {
        detail::require_rank(scores, 1, "segment_softmax");
        if (segment.size() != scores.size()) {
            throw ShapeError("segment_softmax: " + std::to_string(segment.size()) + " segment ids for " +
                             std::to_string(scores.size()) + " scores");
        }
        Tensor out = make(scores.shape(), scores);
        auto x = scores.data();
        auto o = out.data();
        std::vector<double> max(num_segments, -std::numeric_limits<double>::infinity());
        for (std::size_t k = 0; k < x.size(); ++k) max.at(segment[k]) = std::max(max[segment[k]], x[k]);
        std::vector<double> z(num_segments, 0.0);
        for (std::size_t k = 0; k < x.size(); ++k) {
            o[k] = std::exp(x[k] - max[segment[k]]);
            z[segment[k]] += o[k];
        }
        for (std::size_t k = 0; k < x.size(); ++k) o[k] /= z[segment[k]];
        record("segment_softmax", out,
               [scores, out, seg = std::vector<std::size_t>(segment.begin(), segment.end()), num_segments]() mutable {
                   if (!scores.requires_grad()) return;
                   auto y = out.data();
                   auto go = out.grad();
                   std::vector<double> inner(num_segments, 0.0);
                   for (std::size_t k = 0; k < y.size(); ++k) inner[seg[k]] += go[k] * y[k];
                   auto g = scores.grad();
                   for (std::size_t k = 0; k < y.size(); ++k) g[k] += y[k] * (go[k] - inner[seg[k]]);
               });
        return out;
    }

    /// out[s] = Σ_{k : segment[k] = s} weight[k] · values[k]; empty segments
    /// yield zero rows.
    Tensor segment_weighted_sum(const Tensor& weight, const Tensor& values, std::span<const std::size_t> segment,
                                std::size_t num_segments) {
        detail::require(weight.rank() == 1 && values.rank() == 2 && values.rows() == weight.size() &&
                            segment.size() == weight.size(),
                        "segment_weighted_sum", weight, values);
        const std::size_t d = values.cols();
        Tensor out = make({num_segments, d}, weight, values);
        auto o = out.data();
        auto w = weight.data();
        auto v = values.data();
        for (std::size_t k = 0; k < w.size(); ++k) {
            const std::size_t s = segment[k];
            if (s >= num_segments) throw ShapeError("segment_weighted_sum: segment id out of range");
            for (std::size_t c = 0; c < d; ++c) o[s * d + c] += w[k] * v[k * d + c];
        }
        record("segment_weighted_sum", out,
               [weight, values, out, seg = std::vector<std::size_t>(segment.begin(), segment.end()), d]() mutable {
                   auto go = out.grad();
                   if (weight.requires_grad()) {
                       auto g = weight.grad();
                       auto v = values.data();
                       for (std::size_t k = 0; k < g.size(); ++k) {
                           double s = 0;
                           for (std::size_t c = 0; c < d; ++c) s += go[seg[k] * d + c] * v[k * d + c];
                           g[k] += s;
                       }
                   }
                   if (values.requires_grad()) {
                       auto g = values.grad();
                       auto w = weight.data();
                       for (std::size_t k = 0; k < w.size(); ++k)
                           for (std::size_t c = 0; c < d; ++c) g[k * d + c] += w[k] * go[seg[k] * d + c];
                   }
               });
        return out;
    }

private:
    struct Entry {
        const char* op;
        std::function<void()> backward;
    };

    template <typename... Inputs>
    Tensor make(Shape shape, const Inputs&... inputs) const {
        const bool grad = recording() && (inputs.requires_grad() || ...);
        return Tensor::zeros(std::move(shape), grad);
    }

    template <typename Fn>
    void record(const char* op, const Tensor& out, Fn&& fn) {
        if (!out.requires_grad()) return;
        entries_.push_back(Entry{op, std::forward<Fn>(fn)});
    }

    static void accumulate(const Tensor& target, std::span<const double> g) {
        if (!target.requires_grad()) return;
        auto t = target.grad();
        for (std::size_t k = 0; k < t.size(); ++k) t[k] += g[k];
    }

    static void gemm(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t n,
                     std::size_t inner, std::size_t m) {
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = 0; k < inner; ++k) {
                const double av = a[r * inner + k];
                if (av == 0.0) continue;
                for (std::size_t c = 0; c < m; ++c) out[r * m + c] += av * b[k * m + c];
            }
    }

    Mode mode_;
    std::vector<Entry> entries_;
};

}  // namespace hmgn
