#include "attnconv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace attnconv {

namespace {

template <class T>
T sigmoid_scalar(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------
// Gather-style kernels: every output (or gradient) element is reduced by a
// single thread in a fixed order, so results are bit-reproducible for any
// thread count.

template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::array<std::int64_t, 2> stride, std::array<std::int64_t, 2> padding,
                 std::int64_t groups) {
    if (!input.defined() || input.rank() != 4)
        fail("conv2d: input must be N x C x H x W");
    if (!weight.defined() || weight.rank() != 4)
        fail("conv2d: weight must be Cout x Cin/groups x Kh x Kw");
    const std::int64_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t cout = weight.dim(0), wc = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
    const std::int64_t sh = stride[0], sw = stride[1], ph = padding[0], pw = padding[1];

    if (groups < 1) fail("conv2d: groups must be positive, got " + std::to_string(groups));
    if (cin % groups != 0)
        fail("conv2d: in_channels " + std::to_string(cin) + " not divisible by groups " +
             std::to_string(groups));
    if (cout % groups != 0)
        fail("conv2d: out_channels " + std::to_string(cout) + " not divisible by groups " +
             std::to_string(groups));
    const std::int64_t cg = cin / groups;
    if (wc != cg)
        fail("conv2d: weight channel dim " + std::to_string(wc) + " != in_channels/groups " +
             std::to_string(cg));
    if (sh < 1 || sw < 1) fail("conv2d: stride must be positive");
    if (ph < 0 || pw < 0) fail("conv2d: padding must be non-negative");
    const std::int64_t oh = (h + 2 * ph - kh) / sh + 1;
    const std::int64_t ow = (w + 2 * pw - kw) / sw + 1;
    if (h + 2 * ph - kh < 0 || oh < 1)
        fail("conv2d: output height < 1 for input height " + std::to_string(h));
    if (w + 2 * pw - kw < 0 || ow < 1)
        fail("conv2d: output width < 1 for input width " + std::to_string(w));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout))
        fail("conv2d: bias must have shape [" + std::to_string(cout) + "]");
    check_finite(input, "conv2d input");
    check_finite(weight, "conv2d weight");

    Tensor<T> out({n, cout, oh, ow});
    const T* in_p = input.data();
    const T* w_p = weight.data();
    const T* b_p = bias.defined() ? bias.data() : nullptr;
    T* out_p = out.data();
    const std::int64_t ocg = cout / groups;

#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (std::int64_t ni = 0; ni < n; ++ni) {
        for (std::int64_t oc = 0; oc < cout; ++oc) {
            const std::int64_t g = oc / ocg;
            const T* w_oc = w_p + oc * cg * kh * kw;
            T* out_row = out_p + ((ni * cout + oc) * oh) * ow;
            for (std::int64_t y = 0; y < oh; ++y) {
                const std::int64_t ih0 = y * sh - ph;
                const std::int64_t r_lo = std::max<std::int64_t>(0, -ih0);
                const std::int64_t r_hi = std::min<std::int64_t>(kh, h - ih0);
                for (std::int64_t x = 0; x < ow; ++x) {
                    const std::int64_t iw0 = x * sw - pw;
                    const std::int64_t s_lo = std::max<std::int64_t>(0, -iw0);
                    const std::int64_t s_hi = std::min<std::int64_t>(kw, w - iw0);
                    T acc = b_p ? b_p[oc] : T(0);
                    for (std::int64_t ic = 0; ic < cg; ++ic) {
                        const T* in_c = in_p + ((ni * cin + g * cg + ic) * h) * w;
                        const T* w_ic = w_oc + ic * kh * kw;
                        for (std::int64_t r = r_lo; r < r_hi; ++r) {
                            const T* in_row = in_c + (ih0 + r) * w + iw0;
                            const T* w_row = w_ic + r * kw;
                            for (std::int64_t s = s_lo; s < s_hi; ++s)
                                acc += in_row[s] * w_row[s];
                        }
                    }
                    out_row[y * ow + x] = acc;
                }
            }
        }
    }

    if (track_graph<T>({&input, &weight, &bias})) {
        auto in_impl = input.impl();
        auto w_impl = weight.impl();
        auto b_impl = bias.defined() ? bias.impl() : nullptr;
        auto* out_impl = out.raw();
        attach(out, {&input, &weight, &bias},
               [in_impl, w_impl, b_impl, out_impl, n, cin, h, w, cout, cg, ocg, kh, kw, sh, sw,
                ph, pw, oh, ow]() {
            const T* g_out = out_impl->grad.data();
            const T* in_p = in_impl->data.data();
            const T* w_p = w_impl->data.data();

            if (in_impl->requires_grad) {
                T* g_in = ensure_grad(in_impl.get()).data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    for (std::int64_t c = 0; c < cin; ++c) {
                        const std::int64_t g = c / cg;
                        const std::int64_t ic = c % cg;
                        T* g_in_c = g_in + ((ni * cin + c) * h) * w;
                        for (std::int64_t oc = g * ocg; oc < (g + 1) * ocg; ++oc) {
                            const T* g_out_c = g_out + ((ni * cout + oc) * oh) * ow;
                            const T* w_ic = w_p + (oc * cg + ic) * kh * kw;
                            for (std::int64_t y = 0; y < oh; ++y) {
                                const std::int64_t ih0 = y * sh - ph;
                                const std::int64_t r_lo = std::max<std::int64_t>(0, -ih0);
                                const std::int64_t r_hi = std::min<std::int64_t>(kh, h - ih0);
                                for (std::int64_t x = 0; x < ow; ++x) {
                                    const std::int64_t iw0 = x * sw - pw;
                                    const std::int64_t s_lo = std::max<std::int64_t>(0, -iw0);
                                    const std::int64_t s_hi = std::min<std::int64_t>(kw, w - iw0);
                                    const T gv = g_out_c[y * ow + x];
                                    for (std::int64_t r = r_lo; r < r_hi; ++r) {
                                        T* g_row = g_in_c + (ih0 + r) * w + iw0;
                                        const T* w_row = w_ic + r * kw;
                                        for (std::int64_t s = s_lo; s < s_hi; ++s)
                                            g_row[s] += gv * w_row[s];
                                    }
                                }
                            }
                        }
                    }
                }
            }

            if (w_impl->requires_grad) {
                T* g_w = ensure_grad(w_impl.get()).data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (std::int64_t oc = 0; oc < cout; ++oc) {
                    for (std::int64_t ic = 0; ic < cg; ++ic) {
                        const std::int64_t g = oc / ocg;
                        T* g_w_ic = g_w + (oc * cg + ic) * kh * kw;
                        for (std::int64_t r = 0; r < kh; ++r) {
                            for (std::int64_t s = 0; s < kw; ++s) {
                                T acc = T(0);
                                for (std::int64_t ni = 0; ni < n; ++ni) {
                                    const T* in_c = in_p + ((ni * cin + g * cg + ic) * h) * w;
                                    const T* g_out_c = g_out + ((ni * cout + oc) * oh) * ow;
                                    for (std::int64_t y = 0; y < oh; ++y) {
                                        const std::int64_t ih = y * sh - ph + r;
                                        if (ih < 0 || ih >= h) continue;
                                        const T* in_row = in_c + ih * w;
                                        const T* g_row = g_out_c + y * ow;
                                        for (std::int64_t x = 0; x < ow; ++x) {
                                            const std::int64_t iw = x * sw - pw + s;
                                            if (iw < 0 || iw >= w) continue;
                                            acc += in_row[iw] * g_row[x];
                                        }
                                    }
                                }
                                g_w_ic[r * kw + s] += acc;
                            }
                        }
                    }
                }
            }

            if (b_impl && b_impl->requires_grad) {
                T* g_b = ensure_grad(b_impl.get()).data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (std::int64_t oc = 0; oc < cout; ++oc) {
                    T acc = T(0);
                    for (std::int64_t ni = 0; ni < n; ++ni) {
                        const T* g_out_c = g_out + ((ni * cout + oc) * oh) * ow;
                        for (std::int64_t i = 0; i < oh * ow; ++i) acc += g_out_c[i];
                    }
                    g_b[oc] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> pool_global_spatial(const Tensor<T>& input, PoolMode mode) {
    if (!input.defined() || input.rank() != 4)
        fail("pool_global_spatial: input must be N x C x H x W");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t hw = h * w;

    Tensor<T> out({n, c, 1, 1});
    const T* in_p = input.data();
    T* out_p = out.data();
    // argmax per (n,c); first occurrence wins
    auto arg = std::make_shared<std::vector<std::int64_t>>();
    if (mode == PoolMode::max) arg->assign(static_cast<std::size_t>(n * c), 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T* p = in_p + nc * hw;
        if (mode == PoolMode::avg) {
            T acc = T(0);
            for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
            out_p[nc] = acc / static_cast<T>(hw);
        } else {
            T best = p[0];
            std::int64_t best_i = 0;
            for (std::int64_t i = 1; i < hw; ++i)
                if (p[i] > best) { best = p[i]; best_i = i; }
            out_p[nc] = best;
            (*arg)[static_cast<std::size_t>(nc)] = best_i;
        }
    }

    if (track_graph<T>({&input})) {
        auto in_impl = input.impl();
        auto* out_impl = out.raw();
        attach(out, {&input}, [in_impl, out_impl, mode, n, c, hw, arg]() {
            T* g_in = ensure_grad(in_impl.get()).data();
            const T* g_out = out_impl->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::int64_t nc = 0; nc < n * c; ++nc) {
                if (mode == PoolMode::avg) {
                    const T gv = g_out[nc] / static_cast<T>(hw);
                    T* p = g_in + nc * hw;
                    for (std::int64_t i = 0; i < hw; ++i) p[i] += gv;
                } else {
                    g_in[nc * hw + (*arg)[static_cast<std::size_t>(nc)]] += g_out[nc];
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> pool_across_channels(const Tensor<T>& input, PoolMode mode) {
    if (!input.defined() || input.rank() != 4)
        fail("pool_across_channels: input must be N x C x H x W");
    const std::int64_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::int64_t hw = h * w;

    Tensor<T> out({n, 1, h, w});
    const T* in_p = input.data();
    T* out_p = out.data();
    auto arg = std::make_shared<std::vector<std::int64_t>>();
    if (mode == PoolMode::max) arg->assign(static_cast<std::size_t>(n * hw), 0);

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* base = in_p + ni * c * hw;
        for (std::int64_t i = 0; i < hw; ++i) {
            if (mode == PoolMode::avg) {
                T acc = T(0);
                for (std::int64_t ch = 0; ch < c; ++ch) acc += base[ch * hw + i];
                out_p[ni * hw + i] = acc / static_cast<T>(c);
            } else {
                T best = base[i];
                std::int64_t best_c = 0;
                for (std::int64_t ch = 1; ch < c; ++ch) {
                    const T v = base[ch * hw + i];
                    if (v > best) { best = v; best_c = ch; }
                }
                out_p[ni * hw + i] = best;
                (*arg)[static_cast<std::size_t>(ni * hw + i)] = best_c;
            }
        }
    }

    if (track_graph<T>({&input})) {
        auto in_impl = input.impl();
        auto* out_impl = out.raw();
        attach(out, {&input}, [in_impl, out_impl, mode, n, c, hw, arg]() {
            T* g_in = ensure_grad(in_impl.get()).data();
            const T* g_out = out_impl->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::int64_t ni = 0; ni < n; ++ni) {
                T* base = g_in + ni * c * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const T gv = g_out[ni * hw + i];
                    if (mode == PoolMode::avg) {
                        const T share = gv / static_cast<T>(c);
                        for (std::int64_t ch = 0; ch < c; ++ch) base[ch * hw + i] += share;
                    } else {
                        base[(*arg)[static_cast<std::size_t>(ni * hw + i)] * hw + i] += gv;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> activation(const Tensor<T>& x, ActKind kind) {
    if (!x.defined()) fail("activation: undefined input");
    const std::int64_t n = x.numel();
    Tensor<T> out(x.shape());
    const T* in_p = x.data();
    T* out_p = out.data();

    // silu backward needs sigma(x); keep it instead of recomputing exp
    std::shared_ptr<std::vector<T>> sig;
    if (kind == ActKind::silu) sig = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t i = 0; i < n; ++i) {
        switch (kind) {
            case ActKind::sigmoid: out_p[i] = sigmoid_scalar(in_p[i]); break;
            case ActKind::relu: out_p[i] = in_p[i] > T(0) ? in_p[i] : T(0); break;
            case ActKind::silu: {
                const T s = sigmoid_scalar(in_p[i]);
                (*sig)[static_cast<std::size_t>(i)] = s;
                out_p[i] = in_p[i] * s;
                break;
            }
        }
    }

    if (track_graph<T>({&x})) {
        auto in_impl = x.impl();
        auto* out_impl = out.raw();
        attach(out, {&x}, [in_impl, out_impl, kind, n, sig]() {
            T* g_in = ensure_grad(in_impl.get()).data();
            const T* g_out = out_impl->grad.data();
            const T* in_p = in_impl->data.data();
            const T* out_p = out_impl->data.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::int64_t i = 0; i < n; ++i) {
                switch (kind) {
                    case ActKind::sigmoid: {
                        const T s = out_p[i];
                        g_in[i] += g_out[i] * s * (T(1) - s);
                        break;
                    }
                    case ActKind::relu:
                        if (in_p[i] > T(0)) g_in[i] += g_out[i];
                        break;
                    case ActKind::silu: {
                        const T s = (*sig)[static_cast<std::size_t>(i)];
                        g_in[i] += g_out[i] * (s + in_p[i] * s * (T(1) - s));
                        break;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                     BnStats<T>& running, bool training, T momentum, T epsilon) {
    if (!x.defined() || x.rank() != 4) fail("batch_norm: input must be N x C x H x W");
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (scale.rank() != 1 || scale.dim(0) != c || shift.rank() != 1 || shift.dim(0) != c)
        fail("batch_norm: scale/shift must have shape [" + std::to_string(c) + "]");
    if (static_cast<std::int64_t>(running.mean.size()) != c)
        fail("batch_norm: running stats sized for " + std::to_string(running.mean.size()) +
             " channels, input has " + std::to_string(c));
    const std::int64_t m = n * h * w;
    const std::int64_t hw = h * w;
    if (training && m < 2) fail("batch_norm: train mode needs N*H*W >= 2, got " + std::to_string(m));
    if (!training && !running.initialized)
        fail("batch_norm: eval mode before running statistics were ever initialized");

    Tensor<T> out({n, c, h, w});
    const T* in_p = x.data();
    const T* gamma = scale.data();
    const T* beta = shift.data();
    T* out_p = out.data();

    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));

    if (training) {
        std::vector<T> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (std::int64_t ch = 0; ch < c; ++ch) {
            T acc = T(0);
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* p = in_p + (ni * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
            }
            const T mu = acc / static_cast<T>(m);
            T vacc = T(0);
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* p = in_p + (ni * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const T d = p[i] - mu;
                    vacc += d * d;
                }
            }
            mean[static_cast<std::size_t>(ch)] = mu;
            var[static_cast<std::size_t>(ch)] = vacc / static_cast<T>(m);
        }
        for (std::int64_t ch = 0; ch < c; ++ch) {
            running.mean[static_cast<std::size_t>(ch)] =
                (T(1) - momentum) * running.mean[static_cast<std::size_t>(ch)] +
                momentum * mean[static_cast<std::size_t>(ch)];
            running.var[static_cast<std::size_t>(ch)] =
                (T(1) - momentum) * running.var[static_cast<std::size_t>(ch)] +
                momentum * var[static_cast<std::size_t>(ch)];
            (*inv_std)[static_cast<std::size_t>(ch)] =
                T(1) / std::sqrt(var[static_cast<std::size_t>(ch)] + epsilon);
        }
        running.initialized = true;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T mu = mean[static_cast<std::size_t>(ch)];
            const T is = (*inv_std)[static_cast<std::size_t>(ch)];
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const std::int64_t base = (ni * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const T xh = (in_p[base + i] - mu) * is;
                    (*xhat)[static_cast<std::size_t>(base + i)] = xh;
                    out_p[base + i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    } else {
        for (std::int64_t ch = 0; ch < c; ++ch)
            (*inv_std)[static_cast<std::size_t>(ch)] =
                T(1) / std::sqrt(running.var[static_cast<std::size_t>(ch)] + epsilon);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T mu = running.mean[static_cast<std::size_t>(ch)];
            const T is = (*inv_std)[static_cast<std::size_t>(ch)];
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const std::int64_t base = (ni * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const T xh = (in_p[base + i] - mu) * is;
                    (*xhat)[static_cast<std::size_t>(base + i)] = xh;
                    out_p[base + i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }

    if (track_graph<T>({&x, &scale, &shift})) {
        auto in_impl = x.impl();
        auto s_impl = scale.impl();
        auto b_impl = shift.impl();
        auto* out_impl = out.raw();
        attach(out, {&x, &scale, &shift},
               [in_impl, s_impl, b_impl, out_impl, xhat, inv_std, training, n, c, hw, m]() {
            const T* g_out = out_impl->grad.data();
            const T* gamma = s_impl->data.data();

            // per-channel reductions first
            std::vector<T> sum_g(static_cast<std::size_t>(c), T(0));
            std::vector<T> sum_gx(static_cast<std::size_t>(c), T(0));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::int64_t ch = 0; ch < c; ++ch) {
                T sg = T(0), sgx = T(0);
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    const std::int64_t base = (ni * c + ch) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        sg += g_out[base + i];
                        sgx += g_out[base + i] * (*xhat)[static_cast<std::size_t>(base + i)];
                    }
                }
                sum_g[static_cast<std::size_t>(ch)] = sg;
                sum_gx[static_cast<std::size_t>(ch)] = sgx;
            }

            if (b_impl->requires_grad) {
                T* g_b = ensure_grad(b_impl.get()).data();
                for (std::int64_t ch = 0; ch < c; ++ch)
                    g_b[ch] += sum_g[static_cast<std::size_t>(ch)];
            }
            if (s_impl->requires_grad) {
                T* g_s = ensure_grad(s_impl.get()).data();
                for (std::int64_t ch = 0; ch < c; ++ch)
                    g_s[ch] += sum_gx[static_cast<std::size_t>(ch)];
            }
            if (in_impl->requires_grad) {
                T* g_in = ensure_grad(in_impl.get()).data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const T is = (*inv_std)[static_cast<std::size_t>(ch)];
                    const T gam = gamma[ch];
                    if (training) {
                        const T mm = static_cast<T>(m);
                        const T sg = sum_g[static_cast<std::size_t>(ch)];
                        const T sgx = sum_gx[static_cast<std::size_t>(ch)];
                        for (std::int64_t ni = 0; ni < n; ++ni) {
                            const std::int64_t base = (ni * c + ch) * hw;
                            for (std::int64_t i = 0; i < hw; ++i) {
                                const T xh = (*xhat)[static_cast<std::size_t>(base + i)];
                                g_in[base + i] += gam * is / mm *
                                                  (mm * g_out[base + i] - sg - xh * sgx);
                            }
                        }
                    } else {
                        for (std::int64_t ni = 0; ni < n; ++ni) {
                            const std::int64_t base = (ni * c + ch) * hw;
                            for (std::int64_t i = 0; i < hw; ++i)
                                g_in[base + i] += gam * is * g_out[base + i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (!x.defined() || x.rank() != 2) fail("linear: input must be N x D");
    if (!w.defined() || w.rank() != 2) fail("linear: weight must be D x K");
    const std::int64_t n = x.dim(0), d = x.dim(1), k = w.dim(1);
    if (w.dim(0) != d)
        fail("linear: inner dimensions mismatch, input D=" + std::to_string(d) +
             " vs weight D=" + std::to_string(w.dim(0)));
    if (!b.defined() || b.rank() != 1 || b.dim(0) != k)
        fail("linear: bias must have shape [" + std::to_string(k) + "]");

    Tensor<T> out({n, k});
    const T* x_p = x.data();
    const T* w_p = w.data();
    const T* b_p = b.data();
    T* out_p = out.data();

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t ni = 0; ni < n; ++ni) {
        T* row = out_p + ni * k;
        for (std::int64_t j = 0; j < k; ++j) row[j] = b_p[j];
        const T* x_row = x_p + ni * d;
        for (std::int64_t di = 0; di < d; ++di) {
            const T xv = x_row[di];
            const T* w_row = w_p + di * k;
            for (std::int64_t j = 0; j < k; ++j) row[j] += xv * w_row[j];
        }
    }

    if (track_graph<T>({&x, &w, &b})) {
        auto x_impl = x.impl();
        auto w_impl = w.impl();
        auto b_impl = b.impl();
        auto* out_impl = out.raw();
        attach(out, {&x, &w, &b}, [x_impl, w_impl, b_impl, out_impl, n, d, k]() {
            const T* g_out = out_impl->grad.data();
            const T* x_p = x_impl->data.data();
            const T* w_p = w_impl->data.data();
            if (x_impl->requires_grad) {
                T* g_x = ensure_grad(x_impl.get()).data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    const T* g_row = g_out + ni * k;
                    T* gx_row = g_x + ni * d;
                    for (std::int64_t di = 0; di < d; ++di) {
                        const T* w_row = w_p + di * k;
                        T acc = T(0);
                        for (std::int64_t j = 0; j < k; ++j) acc += g_row[j] * w_row[j];
                        gx_row[di] += acc;
                    }
                }
            }
            if (w_impl->requires_grad) {
                T* g_w = ensure_grad(w_impl.get()).data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (std::int64_t di = 0; di < d; ++di) {
                    T* gw_row = g_w + di * k;
                    for (std::int64_t ni = 0; ni < n; ++ni) {
                        const T xv = x_p[ni * d + di];
                        const T* g_row = g_out + ni * k;
                        for (std::int64_t j = 0; j < k; ++j) gw_row[j] += xv * g_row[j];
                    }
                }
            }
            if (b_impl->requires_grad) {
                T* g_b = ensure_grad(b_impl.get()).data();
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    const T* g_row = g_out + ni * k;
                    for (std::int64_t j = 0; j < k; ++j) g_b[j] += g_row[j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / cross entropy
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
    if (!logits.defined() || logits.rank() != 2) fail("softmax: input must be N x K");
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    Tensor<T> out({n, k});
    const T* in_p = logits.data();
    T* out_p = out.data();

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* row = in_p + ni * k;
        T* orow = out_p + ni * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::int64_t j = 0; j < k; ++j) {
            orow[j] = std::exp(row[j] - mx);
            denom += orow[j];
        }
        for (std::int64_t j = 0; j < k; ++j) orow[j] /= denom;
    }

    if (track_graph<T>({&logits})) {
        auto in_impl = logits.impl();
        auto* out_impl = out.raw();
        attach(out, {&logits}, [in_impl, out_impl, n, k]() {
            T* g_in = ensure_grad(in_impl.get()).data();
            const T* g_out = out_impl->grad.data();
            const T* s = out_impl->data.data();
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* srow = s + ni * k;
                const T* grow = g_out + ni * k;
                T dot = T(0);
                for (std::int64_t j = 0; j < k; ++j) dot += grow[j] * srow[j];
                for (std::int64_t j = 0; j < k; ++j)
                    g_in[ni * k + j] += srow[j] * (grow[j] - dot);
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& labels) {
    if (!logits.defined() || logits.rank() != 2) fail("softmax_cross_entropy: logits must be N x K");
    const std::int64_t n = logits.dim(0), k = logits.dim(1);
    if (k < 2) fail("softmax_cross_entropy: needs K >= 2 classes, got " + std::to_string(k));
    if (static_cast<std::int64_t>(labels.size()) != n)
        fail("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
             std::to_string(n));
    for (std::int64_t i = 0; i < n; ++i)
        if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
            fail("softmax_cross_entropy: label " +
                 std::to_string(labels[static_cast<std::size_t>(i)]) + " at index " +
                 std::to_string(i) + " outside [0," + std::to_string(k) + ")");

    const T* in_p = logits.data();
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n * k));
    std::vector<T> per_row(static_cast<std::size_t>(n));

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t ni = 0; ni < n; ++ni) {
        const T* row = in_p + ni * k;
        T* prow = probs->data() + ni * k;
        T mx = row[0];
        for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        T denom = T(0);
        for (std::int64_t j = 0; j < k; ++j) {
            prow[j] = std::exp(row[j] - mx);
            denom += prow[j];
        }
        for (std::int64_t j = 0; j < k; ++j) prow[j] /= denom;
        per_row[static_cast<std::size_t>(ni)] =
            std::log(denom) + mx - row[labels[static_cast<std::size_t>(ni)]];
    }
    T loss = T(0);
    for (std::int64_t ni = 0; ni < n; ++ni) loss += per_row[static_cast<std::size_t>(ni)];
    loss /= static_cast<T>(n);

    Tensor<T> out = Tensor<T>::scalar(loss);
    if (track_graph<T>({&logits})) {
        auto in_impl = logits.impl();
        auto* out_impl = out.raw();
        auto labels_copy = std::make_shared<std::vector<std::int64_t>>(labels);
        attach(out, {&logits}, [in_impl, out_impl, probs, labels_copy, n, k]() {
            T* g_in = ensure_grad(in_impl.get()).data();
            const T gv = out_impl->grad[0] / static_cast<T>(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const T* prow = probs->data() + ni * k;
                T* grow = g_in + ni * k;
                const std::int64_t lab = (*labels_copy)[static_cast<std::size_t>(ni)];
                for (std::int64_t j = 0; j < k; ++j)
                    grow[j] += gv * (prow[j] - (j == lab ? T(1) : T(0)));
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise / structural
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        fail("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::int64_t n = a.numel();
    Tensor<T> out(a.shape());
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];

    if (track_graph<T>({&a, &b})) {
        auto a_impl = a.impl();
        auto b_impl = b.impl();
        auto* out_impl = out.raw();
        attach(out, {&a, &b}, [a_impl, b_impl, out_impl, n]() {
            const T* g = out_impl->grad.data();
            if (a_impl->requires_grad) {
                T* ga = ensure_grad(a_impl.get()).data();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
            }
            if (b_impl->requires_grad) {
                T* gb = ensure_grad(b_impl.get()).data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        fail("mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const std::int64_t n = a.numel();
    Tensor<T> out(a.shape());
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];

    if (track_graph<T>({&a, &b})) {
        auto a_impl = a.impl();
        auto b_impl = b.impl();
        auto* out_impl = out.raw();
        attach(out, {&a, &b}, [a_impl, b_impl, out_impl, n]() {
            const T* g = out_impl->grad.data();
            if (a_impl->requires_grad) {
                T* ga = ensure_grad(a_impl.get()).data();
                const T* bv = b_impl->data.data();
                for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
            }
            if (b_impl->requires_grad) {
                T* gb = ensure_grad(b_impl.get()).data();
                const T* av = a_impl->data.data();
                for (std::int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    const std::int64_t n = x.numel();
    Tensor<T> out(x.shape());
    const T* xp = x.data();
    T* op = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t i = 0; i < n; ++i) op[i] = xp[i] * factor;

    if (track_graph<T>({&x})) {
        auto x_impl = x.impl();
        auto* out_impl = out.raw();
        attach(out, {&x}, [x_impl, out_impl, factor, n]() {
            T* gx = ensure_grad(x_impl.get()).data();
            const T* g = out_impl->grad.data();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * factor;
        });
    }
    return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    const std::int64_t n = x.numel();
    const T* xp = x.data();
    T acc = T(0);
    if (deterministic()) {
        for (std::int64_t i = 0; i < n; ++i) acc += xp[i];
    } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) reduction(+ : acc)
#endif
        for (std::int64_t i = 0; i < n; ++i) acc += xp[i];
    }
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (track_graph<T>({&x})) {
        auto x_impl = x.impl();
        auto* out_impl = out.raw();
        attach(out, {&x}, [x_impl, out_impl, n]() {
            T* gx = ensure_grad(x_impl.get()).data();
            const T g = out_impl->grad[0];
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<std::int64_t> shape) {
    std::int64_t target = 1;
    for (std::int64_t d : shape) target *= d;
    if (target != x.numel())
        fail("reshape: " + shape_string(shape) + " incompatible with " +
             std::to_string(x.numel()) + " elements");
    Tensor<T> out(std::move(shape), x.values());
    if (track_graph<T>({&x})) {
        auto x_impl = x.impl();
        auto* out_impl = out.raw();
        const std::int64_t n = x.numel();
        attach(out, {&x}, [x_impl, out_impl, n]() {
            T* gx = ensure_grad(x_impl.get()).data();
            const T* g = out_impl->grad.data();
            for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
        });
    }
    return out;
}

template <class T>
Tensor<T> flatten(const Tensor<T>& x) {
    if (x.rank() < 1) fail("flatten: needs at least one dimension");
    return reshape(x, {x.dim(0), x.numel() / x.dim(0)});
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4) fail("concat_channels: inputs must be N x C x H x W");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        fail("concat_channels: mismatched batch/spatial dims " + shape_string(a.shape()) +
             " vs " + shape_string(b.shape()));
    const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::int64_t hw = a.dim(2) * a.dim(3);
    Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
    const T* ap = a.data();
    const T* bp = b.data();
    T* op = out.data();
    for (std::int64_t ni = 0; ni < n; ++ni) {
        std::copy(ap + ni * ca * hw, ap + (ni + 1) * ca * hw, op + ni * (ca + cb) * hw);
        std::copy(bp + ni * cb * hw, bp + (ni + 1) * cb * hw, op + (ni * (ca + cb) + ca) * hw);
    }

    if (track_graph<T>({&a, &b})) {
        auto a_impl = a.impl();
        auto b_impl = b.impl();
        auto* out_impl = out.raw();
        attach(out, {&a, &b}, [a_impl, b_impl, out_impl, n, ca, cb, hw]() {
            const T* g = out_impl->grad.data();
            if (a_impl->requires_grad) {
                T* ga = ensure_grad(a_impl.get()).data();
                for (std::int64_t ni = 0; ni < n; ++ni)
                    for (std::int64_t i = 0; i < ca * hw; ++i)
                        ga[ni * ca * hw + i] += g[ni * (ca + cb) * hw + i];
            }
            if (b_impl->requires_grad) {
                T* gb = ensure_grad(b_impl.get()).data();
                for (std::int64_t ni = 0; ni < n; ++ni)
                    for (std::int64_t i = 0; i < cb * hw; ++i)
                        gb[ni * cb * hw + i] += g[(ni * (ca + cb) + ca) * hw + i];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& w) {
    if (x.rank() != 4) fail("scale_channels: input must be N x C x H x W");
    if (w.rank() != 2 || w.dim(0) != x.dim(0) || w.dim(1) != x.dim(1))
        fail("scale_channels: weights must be N x C matching input, got " +
             shape_string(w.shape()) + " for " + shape_string(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(x.shape());
    const T* xp = x.data();
    const T* wp = w.data();
    T* op = out.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (std::int64_t nc = 0; nc < n * c; ++nc) {
        const T wv = wp[nc];
        const T* src = xp + nc * hw;
        T* dst = op + nc * hw;
        for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * wv;
    }

    if (track_graph<T>({&x, &w})) {
        auto x_impl = x.impl();
        auto w_impl = w.impl();
        auto* out_impl = out.raw();
        attach(out, {&x, &w}, [x_impl, w_impl, out_impl, n, c, hw]() {
            const T* g = out_impl->grad.data();
            if (x_impl->requires_grad) {
                T* gx = ensure_grad(x_impl.get()).data();
                const T* wv = w_impl->data.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (std::int64_t nc = 0; nc < n * c; ++nc)
                    for (std::int64_t i = 0; i < hw; ++i)
                        gx[nc * hw + i] += g[nc * hw + i] * wv[nc];
            }
            if (w_impl->requires_grad) {
                T* gw = ensure_grad(w_impl.get()).data();
                const T* xv = x_impl->data.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (std::int64_t nc = 0; nc < n * c; ++nc) {
                    T acc = T(0);
                    for (std::int64_t i = 0; i < hw; ++i)
                        acc += g[nc * hw + i] * xv[nc * hw + i];
                    gw[nc] += acc;
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> scale_spatial(const Tensor<T>& x, const Tensor<T>& m) {
    if (x.rank() != 4) fail("scale_spatial: input must be N x C x H x W");
    if (m.rank() != 4 || m.dim(0) != x.dim(0) || m.dim(1) != 1 || m.dim(2) != x.dim(2) ||
        m.dim(3) != x.dim(3))
        fail("scale_spatial: map must be N x 1 x H x W matching input, got " +
             shape_string(m.shape()) + " for " + shape_string(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out(x.shape());
    const T* xp = x.data();
    const T* mp = m.data();
    T* op = out.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* src = xp + (ni * c + ch) * hw;
            const T* map = mp + ni * hw;
            T* dst = op + (ni * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) dst[i] = src[i] * map[i];
        }

    if (track_graph<T>({&x, &m})) {
        auto x_impl = x.impl();
        auto m_impl = m.impl();
        auto* out_impl = out.raw();
        attach(out, {&x, &m}, [x_impl, m_impl, out_impl, n, c, hw]() {
            const T* g = out_impl->grad.data();
            if (x_impl->requires_grad) {
                T* gx = ensure_grad(x_impl.get()).data();
                const T* mv = m_impl->data.data();
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
                for (std::int64_t ni = 0; ni < n; ++ni)
                    for (std::int64_t ch = 0; ch < c; ++ch) {
                        const std::int64_t base = (ni * c + ch) * hw;
                        for (std::int64_t i = 0; i < hw; ++i)
                            gx[base + i] += g[base + i] * mv[ni * hw + i];
                    }
            }
            if (m_impl->requires_grad) {
                T* gm = ensure_grad(m_impl.get()).data();
                const T* xv = x_impl->data.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
                for (std::int64_t ni = 0; ni < n; ++ni) {
                    for (std::int64_t i = 0; i < hw; ++i) {
                        T acc = T(0);
                        for (std::int64_t ch = 0; ch < c; ++ch)
                            acc += g[(ni * c + ch) * hw + i] * xv[(ni * c + ch) * hw + i];
                        gm[ni * hw + i] += acc;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------

#define ATTNCONV_INSTANTIATE_OPS(T)                                                        \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                              std::array<std::int64_t, 2>, std::array<std::int64_t, 2>,    \
                              std::int64_t);                                               \
    template Tensor<T> pool_global_spatial(const Tensor<T>&, PoolMode);                    \
    template Tensor<T> pool_across_channels(const Tensor<T>&, PoolMode);                   \
    template Tensor<T> activation(const Tensor<T>&, ActKind);                              \
    template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                  BnStats<T>&, bool, T, T);                                \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
    template Tensor<T> softmax(const Tensor<T>&);                                          \
    template Tensor<T> softmax_cross_entropy(const Tensor<T>&,                             \
                                             const std::vector<std::int64_t>&);            \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> scale(const Tensor<T>&, T);                                         \
    template Tensor<T> sum(const Tensor<T>&);                                              \
    template Tensor<T> reshape(const Tensor<T>&, std::vector<std::int64_t>);               \
    template Tensor<T> flatten(const Tensor<T>&);                                          \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                \
    template Tensor<T> scale_channels(const Tensor<T>&, const Tensor<T>&);                 \
    template Tensor<T> scale_spatial(const Tensor<T>&, const Tensor<T>&);

ATTNCONV_INSTANTIATE_OPS(float)
ATTNCONV_INSTANTIATE_OPS(double)

#undef ATTNCONV_INSTANTIATE_OPS

}  // namespace attnconv
