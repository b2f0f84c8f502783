#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "xmla/errors.hpp"
#include "xmla/rng.hpp"

namespace xmla {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// When enabled, every primitive checks its output for NaN/Inf and throws
// DataError on the first offender. Off by default (it is a debugging mode).
void set_finite_checks(bool on);
bool finite_checks_enabled();

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
    bool tracked = false;      // set when this tensor is the output of a taped op
};
}  // namespace detail

// Dense row-major tensor of doubles. Copying a Tensor aliases the same
// storage (shared handle); use clone() for a deep copy. Values are treated
// as immutable once gradient recording begins within a step; gradients
// accumulate in a side buffer until zero_grad().
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t ndim() const { return static_cast<int64_t>(impl_->shape.size()); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    // 2-D accessors; a 1-D tensor behaves as a single row.
    int64_t rows() const;
    int64_t cols() const;
    double& at(int64_t r, int64_t c);
    double at(int64_t r, int64_t c) const;

    double item() const;  // numel()==1 only

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    std::vector<double>& grad();  // allocates zeros on first use
    void zero_grad();
    void accumulate_grad(const std::vector<double>& g);

    Tensor clone() const;   // deep copy of values (grad not copied)
    Tensor detach() const;  // same values, no grad tracking

    void check_finite(const std::string& what) const;

    detail::TensorImpl* impl() const { return impl_.get(); }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Reverse-mode tape. One tape per training step: activate it with a Scope,
// run the forward, call backward(loss), then let it die. Confined to a
// single thread (the active-tape pointer is thread_local).
class GradTape {
public:
    using BackwardFn = std::function<void()>;

    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    class Scope {
    public:
        explicit Scope(GradTape& tape);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        GradTape* prev_;
    };

    static GradTape* active();

    // Record a primitive application. `fn` reads output.grad() and
    // accumulates into the inputs' grads; it is only invoked when the
    // output actually received a gradient.
    void record(Tensor output, BackwardFn fn);

    // Seed d(loss)/d(loss)=1 and replay the tape in reverse recording
    // order (reverse topological order by construction). Leaf gradients
    // accumulate across calls until cleared.
    void backward(const Tensor& loss);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor output;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
};

// True when a tape is active and `t` participates in gradient flow.
bool tape_should_record(const Tensor& t);

// -- Primitives (all taped when a GradTape is active) ------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, int64_t begin, int64_t end);
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-6);
Tensor rms_norm_rows(const Tensor& x, const Tensor& gain, double eps = 1e-6);

Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);

// picked[i] = x[i, ids[i]]; result shape {rows}.
Tensor gather_cols(const Tensor& x, const std::vector<int64_t>& ids);
// rows of `table` selected by ids; gradient scatters back into the table.
Tensor embedding_lookup(const Tensor& table, const std::vector<int64_t>& ids);

}  // namespace xmla
