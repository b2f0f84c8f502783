#include "xmla/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace xmla {

namespace {
bool g_finite_checks = false;

void maybe_check(const Tensor& t, const char* what) {
    if (g_finite_checks) t.check_finite(what);
}
}  // namespace

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks_enabled() { return g_finite_checks; }

int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// -- Tensor -------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
        throw DimensionError("Tensor: shape " + shape_string(shape) + " does not match data length " +
                             std::to_string(data.size()));
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->data.assign(static_cast<size_t>(shape_numel(shape)), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

int64_t Tensor::rows() const { return ndim() >= 2 ? impl_->shape[0] : 1; }

int64_t Tensor::cols() const {
    if (ndim() == 0) return 1;
    return impl_->shape.back();
}

double& Tensor::at(int64_t r, int64_t c) { return impl_->data[static_cast<size_t>(r * cols() + c)]; }
double Tensor::at(int64_t r, int64_t c) const { return impl_->data[static_cast<size_t>(r * cols() + c)]; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item(): tensor has " + std::to_string(numel()) + " elements, expected 1");
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::accumulate_grad(const std::vector<double>& g) {
    if (g.size() != impl_->data.size())
        throw DimensionError("accumulate_grad: gradient length " + std::to_string(g.size()) +
                             " does not match tensor length " + std::to_string(impl_->data.size()));
    auto& dst = grad();
    for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

Tensor Tensor::clone() const {
    Tensor t(impl_->shape, impl_->data, impl_->requires_grad);
    return t;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

void Tensor::check_finite(const std::string& what) const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) throw DataError(what + ": non-finite value encountered");
}

// -- GradTape -----------------------------------------------------------------

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

GradTape::Scope::Scope(GradTape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
GradTape::Scope::~Scope() { g_active_tape = prev_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(Tensor output, BackwardFn fn) {
    output.impl()->tracked = true;
    nodes_.push_back({std::move(output), std::move(fn)});
}

void GradTape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
    if (!loss.impl()->tracked && !loss.requires_grad())
        throw ContractError("backward: loss was not produced through taped primitives");
    loss.impl()->grad.assign(1, 0.0);
    loss.impl()->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (!it->output.has_grad()) continue;
        it->fn();
    }
}

bool tape_should_record(const Tensor& t) {
    return GradTape::active() != nullptr && (t.requires_grad() || t.impl()->tracked);
}

namespace {

bool any_records(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (tape_should_record(*t)) return true;
    return false;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
}

}  // namespace

// -- Elementwise --------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape(), 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    maybe_check(out, "add");
    if (any_records({&a, &b})) {
        GradTape::active()->record(out, [a = a, b = b, out = out]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(a)) a.accumulate_grad(g);
            if (tape_should_record(b)) b.accumulate_grad(g);
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape(), 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    maybe_check(out, "sub");
    if (any_records({&a, &b})) {
        GradTape::active()->record(out, [a = a, b = b, out = out]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(a)) a.accumulate_grad(g);
            if (tape_should_record(b)) {
                std::vector<double> neg(g.size());
                for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                b.accumulate_grad(neg);
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape(), 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    maybe_check(out, "mul");
    if (any_records({&a, &b})) {
        GradTape::active()->record(out, [a = a, b = b, out = out]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(a)) {
                std::vector<double> ga(g.size());
                for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * b.data()[i];
                a.accumulate_grad(ga);
            }
            if (tape_should_record(b)) {
                std::vector<double> gb(g.size());
                for (size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * a.data()[i];
                b.accumulate_grad(gb);
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape(), 0.0);
    const auto& av = a.data();
    auto& ov = out.data();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    maybe_check(out, "scale");
    if (any_records({&a})) {
        GradTape::active()->record(out, [a = a, out = out, s]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * s;
            a.accumulate_grad(ga);
        });
    }
    return out;
}

// -- Matmul / layout ----------------------------------------------------------

namespace {

// C(m x n) += A(m x k) * B(k x n), ikj order over contiguous rows.
void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C(m x n) += A(m x k) * B^T where Bt is given as B(n x k).
void matmul_bt_acc(const double* a, const double* bt, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* brow = bt + j * k;
            double acc = 0.0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C(k x n) += A^T * B where A is (m x k), B is (m x n).
void matmul_at_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* brow = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw DimensionError(std::string(op) + ": expected 2-D tensor, got " + shape_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: inner extents disagree, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out({m, n}, 0.0);
    matmul_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    maybe_check(out, "matmul");
    if (any_records({&a, &b})) {
        GradTape::active()->record(out, [a = a, b = b, out = out, m, k, n]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(a)) {
                // dA = dC * B^T
                auto& ga = a.grad();
                matmul_bt_acc(g.data(), b.data().data(), ga.data(), m, n, k);
            }
            if (tape_should_record(b)) {
                // dB = A^T * dC
                auto& gb = b.grad();
                matmul_at_acc(a.data().data(), g.data(), gb.data(), m, k, n);
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    int64_t m = a.shape()[0], n = a.shape()[1];
    Tensor out({n, m}, 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (any_records({&a})) {
        GradTape::active()->record(out, [a = a, out = out, m, n]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> ga(a.numel());
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < n; ++j) ga[static_cast<size_t>(i * n + j)] = g[static_cast<size_t>(j * m + i)];
            a.accumulate_grad(ga);
        });
    }
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
    Tensor out(std::move(shape), a.data());
    if (any_records({&a})) {
        GradTape::active()->record(out, [a = a, out = out]() mutable { a.accumulate_grad(out.impl()->grad); });
    }
    return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_2d(a, "concat_cols");
    require_2d(b, "concat_cols");
    if (a.shape()[0] != b.shape()[0])
        throw DimensionError("concat_cols: row counts differ, " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    int64_t m = a.shape()[0], na = a.shape()[1], nb = b.shape()[1];
    Tensor out({m, na + nb}, 0.0);
    for (int64_t i = 0; i < m; ++i) {
        std::copy_n(a.data().begin() + i * na, na, out.data().begin() + i * (na + nb));
        std::copy_n(b.data().begin() + i * nb, nb, out.data().begin() + i * (na + nb) + na);
    }
    if (any_records({&a, &b})) {
        GradTape::active()->record(out, [a = a, b = b, out = out, m, na, nb]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(a)) {
                std::vector<double> ga(a.numel());
                for (int64_t i = 0; i < m; ++i)
                    std::copy_n(g.begin() + i * (na + nb), na, ga.begin() + i * na);
                a.accumulate_grad(ga);
            }
            if (tape_should_record(b)) {
                std::vector<double> gb(b.numel());
                for (int64_t i = 0; i < m; ++i)
                    std::copy_n(g.begin() + i * (na + nb) + na, nb, gb.begin() + i * nb);
                b.accumulate_grad(gb);
            }
        });
    }
    return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_2d(a, "concat_rows");
    require_2d(b, "concat_rows");
    if (a.shape()[1] != b.shape()[1])
        throw DimensionError("concat_rows: column counts differ, " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    int64_t ma = a.shape()[0], mb = b.shape()[0], n = a.shape()[1];
    Tensor out({ma + mb, n}, 0.0);
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + ma * n);
    if (any_records({&a, &b})) {
        GradTape::active()->record(out, [a = a, b = b, out = out, ma, mb, n]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(a))
                a.accumulate_grad(std::vector<double>(g.begin(), g.begin() + ma * n));
            if (tape_should_record(b))
                b.accumulate_grad(std::vector<double>(g.begin() + ma * n, g.end()));
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end) {
    require_2d(a, "slice_cols");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (begin < 0 || end > n || begin >= end)
        throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for " + shape_string(a.shape()));
    int64_t w = end - begin;
    Tensor out({m, w}, 0.0);
    for (int64_t i = 0; i < m; ++i)
        std::copy_n(a.data().begin() + i * n + begin, w, out.data().begin() + i * w);
    if (any_records({&a})) {
        GradTape::active()->record(out, [a = a, out = out, m, n, begin, w]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> ga(a.numel());
            for (int64_t i = 0; i < m; ++i)
                std::copy_n(g.begin() + i * w, w, ga.begin() + i * n + begin);
            a.accumulate_grad(ga);
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end) {
    require_2d(a, "slice_rows");
    int64_t m = a.shape()[0], n = a.shape()[1];
    if (begin < 0 || end > m || begin >= end)
        throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") invalid for " + shape_string(a.shape()));
    int64_t h = end - begin;
    Tensor out({h, n}, std::vector<double>(a.data().begin() + begin * n, a.data().begin() + end * n));
    if (any_records({&a})) {
        GradTape::active()->record(out, [a = a, out = out, n, begin, h]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> ga(a.numel());
            std::copy(g.begin(), g.end(), ga.begin() + begin * n);
            a.accumulate_grad(ga);
        });
    }
    return out;
}

// -- Row-wise nonlinearities ----------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
    require_2d(x, "softmax_rows");
    int64_t m = x.shape()[0], n = x.shape()[1];
    Tensor out({m, n}, 0.0);
    for (int64_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double* orow = out.data().data() + i * n;
        double mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (int64_t j = 0; j < n; ++j) orow[j] /= denom;
    }
    maybe_check(out, "softmax_rows");
    if (any_records({&x})) {
        GradTape::active()->record(out, [x = x, out = out, m, n]() mutable {
            // dx = y * (dy - sum_j dy_j y_j) per row
            const auto& g = out.impl()->grad;
            const auto& y = out.data();
            std::vector<double> gx(x.numel());
            for (int64_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (int64_t j = 0; j < n; ++j) gx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
            }
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor log_softmax_rows(const Tensor& x) {
    require_2d(x, "log_softmax_rows");
    int64_t m = x.shape()[0], n = x.shape()[1];
    Tensor out({m, n}, 0.0);
    for (int64_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double* orow = out.data().data() + i * n;
        double mx = row[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
        double lse = mx + std::log(denom);
        for (int64_t j = 0; j < n; ++j) orow[j] = row[j] - lse;
    }
    if (any_records({&x})) {
        GradTape::active()->record(out, [x = x, out = out, m, n]() mutable {
            // dx = dy - softmax(x) * sum_j dy_j per row
            const auto& g = out.impl()->grad;
            const auto& ls = out.data();
            std::vector<double> gx(x.numel());
            for (int64_t i = 0; i < m; ++i) {
                double gsum = 0.0;
                for (int64_t j = 0; j < n; ++j) gsum += g[i * n + j];
                for (int64_t j = 0; j < n; ++j)
                    gx[i * n + j] = g[i * n + j] - std::exp(ls[i * n + j]) * gsum;
            }
            x.accumulate_grad(gx);
        });
    }
    return out;
}

// -- Reductions -----------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (any_records({&x})) {
        GradTape::active()->record(out, [x = x, out = out]() mutable {
            double g = out.impl()->grad[0];
            std::vector<double> gx(x.numel(), g);
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean: empty tensor");
    double s = 0.0;
    for (double v : x.data()) s += v;
    double inv = 1.0 / static_cast<double>(x.numel());
    Tensor out = Tensor::scalar(s * inv);
    if (any_records({&x})) {
        GradTape::active()->record(out, [x = x, out = out, inv]() mutable {
            double g = out.impl()->grad[0] * inv;
            std::vector<double> gx(x.numel(), g);
            x.accumulate_grad(gx);
        });
    }
    return out;
}

// -- Normalization ----------------------------------------------------------------

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_2d(x, "layer_norm_rows");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (gain.numel() != n || bias.numel() != n)
        throw DimensionError("layer_norm_rows: gain/bias length must equal row width " + std::to_string(n));
    Tensor out({m, n}, 0.0);
    std::vector<double> xhat(static_cast<size_t>(m * n));
    std::vector<double> inv_sigma(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double mu = 0.0;
        for (int64_t j = 0; j < n; ++j) mu += row[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(i)] = inv;
        for (int64_t j = 0; j < n; ++j) {
            double xh = (row[j] - mu) * inv;
            xhat[static_cast<size_t>(i * n + j)] = xh;
            out.data()[static_cast<size_t>(i * n + j)] = gain.data()[static_cast<size_t>(j)] * xh + bias.data()[static_cast<size_t>(j)];
        }
    }
    maybe_check(out, "layer_norm_rows");
    if (any_records({&x, &gain, &bias})) {
        GradTape::active()->record(out, [x = x, gain = gain, bias = bias, out = out, m, n, xhat = std::move(xhat),
                                         inv_sigma = std::move(inv_sigma)]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(gain)) {
                std::vector<double> gg(static_cast<size_t>(n), 0.0);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[i * n + j];
                gain.accumulate_grad(gg);
            }
            if (tape_should_record(bias)) {
                std::vector<double> gb(static_cast<size_t>(n), 0.0);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                bias.accumulate_grad(gb);
            }
            if (tape_should_record(x)) {
                std::vector<double> gx(x.numel());
                for (int64_t i = 0; i < m; ++i) {
                    // dxhat = g * gain; dx = inv_sigma*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int64_t j = 0; j < n; ++j) {
                        double dxh = g[i * n + j] * gain.data()[static_cast<size_t>(j)];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[i * n + j];
                    }
                    mean_dxh /= static_cast<double>(n);
                    mean_dxh_xh /= static_cast<double>(n);
                    for (int64_t j = 0; j < n; ++j) {
                        double dxh = g[i * n + j] * gain.data()[static_cast<size_t>(j)];
                        gx[i * n + j] = inv_sigma[static_cast<size_t>(i)] *
                                        (dxh - mean_dxh - xhat[i * n + j] * mean_dxh_xh);
                    }
                }
                x.accumulate_grad(gx);
            }
        });
    }
    return out;
}

Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps) {
    require_2d(x, "rms_norm_rows");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (gain.numel() != n)
        throw DimensionError("rms_norm_rows: gain length must equal row width " + std::to_string(n));
    Tensor out({m, n}, 0.0);
    std::vector<double> inv_rms(static_cast<size_t>(m));
    for (int64_t i = 0; i < m; ++i) {
        const double* row = x.data().data() + i * n;
        double ms = 0.0;
        for (int64_t j = 0; j < n; ++j) ms += row[j] * row[j];
        ms /= static_cast<double>(n);
        double inv = 1.0 / std::sqrt(ms + eps);
        inv_rms[static_cast<size_t>(i)] = inv;
        for (int64_t j = 0; j < n; ++j)
            out.data()[static_cast<size_t>(i * n + j)] = gain.data()[static_cast<size_t>(j)] * row[j] * inv;
    }
    maybe_check(out, "rms_norm_rows");
    if (any_records({&x, &gain})) {
        GradTape::active()->record(out, [x = x, gain = gain, out = out, m, n, inv_rms = std::move(inv_rms)]() mutable {
            const auto& g = out.impl()->grad;
            if (tape_should_record(gain)) {
                std::vector<double> gg(static_cast<size_t>(n), 0.0);
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j)
                        gg[j] += g[i * n + j] * x.data()[i * n + j] * inv_rms[static_cast<size_t>(i)];
                gain.accumulate_grad(gg);
            }
            if (tape_should_record(x)) {
                std::vector<double> gx(x.numel());
                for (int64_t i = 0; i < m; ++i) {
                    double inv = inv_rms[static_cast<size_t>(i)];
                    double dot = 0.0;  // sum_k g_k * gain_k * x_k
                    for (int64_t j = 0; j < n; ++j)
                        dot += g[i * n + j] * gain.data()[static_cast<size_t>(j)] * x.data()[i * n + j];
                    double c = dot * inv * inv * inv / static_cast<double>(n);
                    for (int64_t j = 0; j < n; ++j)
                        gx[i * n + j] = g[i * n + j] * gain.data()[static_cast<size_t>(j)] * inv -
                                        x.data()[i * n + j] * c;
                }
                x.accumulate_grad(gx);
            }
        });
    }
    return out;
}

// -- Activations --------------------------------------------------------------------

Tensor silu(const Tensor& x) {
    Tensor out(x.shape(), 0.0);
    for (size_t i = 0; i < out.data().size(); ++i) {
        double v = x.data()[i];
        out.data()[i] = v / (1.0 + std::exp(-v));
    }
    maybe_check(out, "silu");
    if (any_records({&x})) {
        GradTape::active()->record(out, [x = x, out = out]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> gx(x.numel());
            for (size_t i = 0; i < gx.size(); ++i) {
                double v = x.data()[i];
                double s = 1.0 / (1.0 + std::exp(-v));
                gx[i] = g[i] * s * (1.0 + v * (1.0 - s));
            }
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor softplus(const Tensor& x) {
    Tensor out(x.shape(), 0.0);
    for (size_t i = 0; i < out.data().size(); ++i) {
        double v = x.data()[i];
        out.data()[i] = std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v)));
    }
    if (any_records({&x})) {
        GradTape::active()->record(out, [x = x, out = out]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> gx(x.numel());
            for (size_t i = 0; i < gx.size(); ++i) gx[i] = g[i] / (1.0 + std::exp(-x.data()[i]));
            x.accumulate_grad(gx);
        });
    }
    return out;
}

// -- Indexing ------------------------------------------------------------------------

Tensor gather_cols(const Tensor& x, const std::vector<int64_t>& ids) {
    require_2d(x, "gather_cols");
    int64_t m = x.shape()[0], n = x.shape()[1];
    if (static_cast<int64_t>(ids.size()) != m)
        throw DimensionError("gather_cols: need one index per row, got " + std::to_string(ids.size()) +
                             " for " + std::to_string(m) + " rows");
    Tensor out({m}, 0.0);
    for (int64_t i = 0; i < m; ++i) {
        if (ids[static_cast<size_t>(i)] < 0 || ids[static_cast<size_t>(i)] >= n)
            throw VocabError("gather_cols: index " + std::to_string(ids[static_cast<size_t>(i)]) +
                             " out of range [0," + std::to_string(n) + ")");
        out.data()[static_cast<size_t>(i)] = x.data()[static_cast<size_t>(i * n + ids[static_cast<size_t>(i)])];
    }
    if (any_records({&x})) {
        GradTape::active()->record(out, [x = x, out = out, ids, m, n]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> gx(x.numel());
            for (int64_t i = 0; i < m; ++i)
                gx[static_cast<size_t>(i * n + ids[static_cast<size_t>(i)])] = g[static_cast<size_t>(i)];
            x.accumulate_grad(gx);
        });
    }
    return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids) {
    require_2d(table, "embedding_lookup");
    int64_t v = table.shape()[0], d = table.shape()[1];
    int64_t l = static_cast<int64_t>(ids.size());
    Tensor out({l, d}, 0.0);
    for (int64_t i = 0; i < l; ++i) {
        int64_t id = ids[static_cast<size_t>(i)];
        if (id < 0 || id >= v)
            throw VocabError("embedding_lookup: token id " + std::to_string(id) + " out of range [0," +
                             std::to_string(v) + ")");
        std::copy_n(table.data().begin() + id * d, d, out.data().begin() + i * d);
    }
    if (any_records({&table})) {
        GradTape::active()->record(out, [table = table, out = out, ids, l, d]() mutable {
            const auto& g = out.impl()->grad;
            std::vector<double> gt(table.numel());
            for (int64_t i = 0; i < l; ++i) {
                int64_t id = ids[static_cast<size_t>(i)];
                for (int64_t j = 0; j < d; ++j) gt[static_cast<size_t>(id * d + j)] += g[static_cast<size_t>(i * d + j)];
            }
            table.accumulate_grad(gt);
        });
    }
    return out;
}

}  // namespace xmla
