#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "attnconv/util.hpp"

namespace attnconv {

// Thread-local autograd switch. Forward passes that never call backward()
// (validation, inference, benchmarking) run under a NoGradGuard so no graph
// is recorded.
bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
struct TensorImpl {
    std::vector<std::int64_t> shape;
    std::vector<T> data;
    std::vector<T> grad;           // allocated lazily, same length as data
    bool requires_grad = false;
    bool consumed = false;         // set once backward() has released this graph
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    std::function<void()> backward_fn;
};

// Dense row-major N-d array handle. Copying a Tensor copies the handle, not
// the storage; ops build a reverse-mode graph when any input requires grad.
// Canonical image layout is N x C x H x W.
template <class T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> shape, bool requires_grad = false);
    Tensor(std::vector<std::int64_t> shape, std::vector<T> values, bool requires_grad = false);

    static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::int64_t> shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }

    const std::vector<std::int64_t>& shape() const { return impl_->shape; }
    std::int64_t dim(std::size_t i) const { return impl_->shape[i]; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::vector<T>& values() { return impl_->data; }
    const std::vector<T>& values() const { return impl_->data; }
    T* data() { return impl_->data.data(); }
    const T* data() const { return impl_->data.data(); }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on);

    // Gradient accumulator; allocated (zeroed) on first access.
    std::vector<T>& grad();
    const std::vector<T>& grad() const;
    bool has_grad() const { return defined() && !impl_->grad.empty(); }
    void zero_grad();

    T item() const;     // scalar tensors only

    // Reverse-mode differentiation from a scalar. Releases the graph; a
    // second call on the same graph is rejected.
    void backward();

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }
    TensorImpl<T>* raw() const { return impl_.get(); }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

// Named trainable tensor plus its optimizer-owned velocity buffer.
// trainable=false parameters are skipped by the optimizer entirely and must
// stay bit-identical across steps.
template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    std::vector<T> velocity;       // empty while the parameter is frozen
    bool trainable = true;
    bool decay = true;             // L2 applies to conv/FC weights only
};

// --- graph plumbing shared by the op kernels -------------------------------

template <class T>
bool track_graph(std::initializer_list<const Tensor<T>*> inputs);

template <class T>
void attach(Tensor<T>& out, std::initializer_list<const Tensor<T>*> parents,
            std::function<void()> backward_fn);

template <class T>
std::vector<T>& ensure_grad(TensorImpl<T>* node);

void check_finite_values(const float* p, std::int64_t n, const char* what);
void check_finite_values(const double* p, std::int64_t n, const char* what);

template <class T>
void check_finite(const Tensor<T>& t, const char* what) {
    check_finite_values(t.data(), t.numel(), what);
}

std::string shape_string(const std::vector<std::int64_t>& shape);

// Central finite-difference check of a scalar-valued computation against the
// analytic gradients produced by backward(). `forward` must rebuild the graph
// from `inputs` on every call. Returns the max relative error
// |analytic - numeric| / (|analytic| + 1e-12). Meant for 64-bit tensors.
template <class Fn>
double grad_check(Fn&& forward, std::vector<Tensor<double>>& inputs, double step = 1e-5) {
    for (auto& in : inputs) in.zero_grad();
    Tensor<double> loss = forward();
    if (loss.numel() != 1) fail("grad_check: forward() must produce a scalar");
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(in.grad());

    double worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto& vals = inputs[i].values();
        for (std::size_t j = 0; j < vals.size(); ++j) {
            const double saved = vals[j];
            vals[j] = saved + step;
            const double up = forward().item();
            vals[j] = saved - step;
            const double down = forward().item();
            vals[j] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double err = std::abs(analytic[i][j] - numeric) /
                               (std::abs(analytic[i][j]) + 1e-12);
            if (err > worst) worst = err;
        }
    }
    return worst;
}

}  // namespace attnconv
