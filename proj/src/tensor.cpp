#include "attnconv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace attnconv {

namespace {
bool g_deterministic = false;
int g_max_threads = 0;
thread_local bool g_grad_enabled = true;

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d <= 0) fail("tensor: non-positive extent in shape " + shape_string(shape));
        n *= d;
    }
    return n;
}
}  // namespace

bool deterministic() { return g_deterministic; }
void set_deterministic(bool on) { g_deterministic = on; }

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_max_threads(int n) {
    g_max_threads = n;
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

std::string shape_string(const std::vector<std::int64_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

std::string format_double(double v, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
    return buf;
}

void check_finite_values(const float* p, std::int64_t n, const char* what) {
    for (std::int64_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i]))
            fail(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
}

void check_finite_values(const double* p, std::int64_t n, const char* what) {
    for (std::int64_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i]))
            fail(std::string(what) + ": non-finite value at flat index " + std::to_string(i));
}

template <class T>
Tensor<T>::Tensor(std::vector<std::int64_t> shape, bool requires_grad) {
    impl_ = std::make_shared<TensorImpl<T>>();
    const std::int64_t n = shape_numel(shape);
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(n), T(0));
    impl_->requires_grad = requires_grad;
}

template <class T>
Tensor<T>::Tensor(std::vector<std::int64_t> shape, std::vector<T> values, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(values.size()))
        fail("tensor: shape " + shape_string(shape) + " expects " + std::to_string(n) +
             " values, got " + std::to_string(values.size()));
    impl_ = std::make_shared<TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
}

template <class T>
Tensor<T> Tensor<T>::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    return Tensor<T>(std::move(shape), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(std::vector<std::int64_t> shape, T value, bool requires_grad) {
    Tensor<T> t(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor<T>({1}, {value}, requires_grad);
}

template <class T>
void Tensor<T>::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    if (!on) impl_->grad.clear();
}

template <class T>
std::vector<T>& Tensor<T>::grad() {
    return ensure_grad(impl_.get());
}

template <class T>
const std::vector<T>& Tensor<T>::grad() const {
    return ensure_grad(impl_.get());
}

template <class T>
void Tensor<T>::zero_grad() {
    if (!impl_->grad.empty())
        std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <class T>
T Tensor<T>::item() const {
    if (numel() != 1) fail("item(): tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

template <class T>
std::vector<T>& ensure_grad(TensorImpl<T>* node) {
    if (node->grad.empty()) node->grad.assign(node->data.size(), T(0));
    return node->grad;
}

template <class T>
bool track_graph(std::initializer_list<const Tensor<T>*> inputs) {
    if (!grad_enabled()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

template <class T>
void attach(Tensor<T>& out, std::initializer_list<const Tensor<T>*> parents,
            std::function<void()> backward_fn) {
    auto* impl = out.raw();
    impl->requires_grad = true;
    for (const Tensor<T>* p : parents)
        if (p->defined()) impl->parents.push_back(p->impl());
    impl->backward_fn = std::move(backward_fn);
}

template <class T>
void Tensor<T>::backward() {
    if (!defined()) fail("backward: undefined tensor");
    if (numel() != 1) fail("backward: loss must be scalar, shape is " + shape_string(shape()));
    if (impl_->consumed) fail("backward: graph already consumed by a previous backward()");

    // iterative post-order DFS
    std::vector<TensorImpl<T>*> topo;
    std::unordered_set<TensorImpl<T>*> visited;
    std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorImpl<T>* parent = node->parents[next++].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad(impl_.get())[0] = T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();

    // release intermediate storage and mark the graph spent
    for (TensorImpl<T>* node : topo) {
        if (node->backward_fn) {
            node->backward_fn = nullptr;
            node->consumed = true;
        }
        node->parents.clear();
    }
}

template class Tensor<float>;
template class Tensor<double>;
template std::vector<float>& ensure_grad(TensorImpl<float>*);
template std::vector<double>& ensure_grad(TensorImpl<double>*);
template bool track_graph(std::initializer_list<const Tensor<float>*>);
template bool track_graph(std::initializer_list<const Tensor<double>*>);
template void attach(Tensor<float>&, std::initializer_list<const Tensor<float>*>, std::function<void()>);
template void attach(Tensor<double>&, std::initializer_list<const Tensor<double>*>, std::function<void()>);

}  // namespace attnconv
