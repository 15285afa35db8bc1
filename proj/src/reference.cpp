#include "attnconv/reference.hpp"

#include <cmath>

namespace attnconv::reference {

std::vector<double> conv2d_naive(const std::vector<double>& input, std::int64_t n,
                                 std::int64_t cin, std::int64_t h, std::int64_t w,
                                 const std::vector<double>& weight, std::int64_t cout,
                                 std::int64_t kh, std::int64_t kw,
                                 const std::vector<double>& bias, std::int64_t stride_h,
                                 std::int64_t stride_w, std::int64_t pad_h, std::int64_t pad_w,
                                 std::int64_t groups) {
    const std::int64_t cg = cin / groups;
    const std::int64_t ocg = cout / groups;
    const std::int64_t oh = (h + 2 * pad_h - kh) / stride_h + 1;
    const std::int64_t ow = (w + 2 * pad_w - kw) / stride_w + 1;
    std::vector<double> out(static_cast<std::size_t>(n * cout * oh * ow), 0.0);

    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t oc = 0; oc < cout; ++oc)
            for (std::int64_t y = 0; y < oh; ++y)
                for (std::int64_t x = 0; x < ow; ++x) {
                    double acc = bias.empty() ? 0.0 : bias[static_cast<std::size_t>(oc)];
                    const std::int64_t g = oc / ocg;
                    for (std::int64_t ic = 0; ic < cg; ++ic)
                        for (std::int64_t r = 0; r < kh; ++r)
                            for (std::int64_t s = 0; s < kw; ++s) {
                                const std::int64_t ih = y * stride_h - pad_h + r;
                                const std::int64_t iw = x * stride_w - pad_w + s;
                                if (ih < 0 || ih >= h || iw < 0 || iw >= w) continue;
                                acc += input[static_cast<std::size_t>(
                                           ((ni * cin + g * cg + ic) * h + ih) * w + iw)] *
                                       weight[static_cast<std::size_t>(
                                           ((oc * cg + ic) * kh + r) * kw + s)];
                            }
                    out[static_cast<std::size_t>(((ni * cout + oc) * oh + y) * ow + x)] = acc;
                }
    return out;
}

std::vector<double> matmul_naive(const std::vector<double>& a, std::int64_t n, std::int64_t d,
                                 const std::vector<double>& b, std::int64_t k) {
    std::vector<double> out(static_cast<std::size_t>(n * k), 0.0);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < k; ++j) {
            double acc = 0.0;
            for (std::int64_t l = 0; l < d; ++l)
                acc += a[static_cast<std::size_t>(i * d + l)] *
                       b[static_cast<std::size_t>(l * k + j)];
            out[static_cast<std::size_t>(i * k + j)] = acc;
        }
    return out;
}

std::vector<double> global_pool_naive(const std::vector<double>& input, std::int64_t n,
                                      std::int64_t c, std::int64_t h, std::int64_t w, bool max) {
    std::vector<double> out(static_cast<std::size_t>(n * c), 0.0);
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            double acc = max ? -1e300 : 0.0;
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x) {
                    const double v =
                        input[static_cast<std::size_t>(((ni * c + ch) * h + y) * w + x)];
                    if (max)
                        acc = v > acc ? v : acc;
                    else
                        acc += v;
                }
            out[static_cast<std::size_t>(ni * c + ch)] = max ? acc : acc / double(h * w);
        }
    return out;
}

std::vector<double> channel_pool_naive(const std::vector<double>& input, std::int64_t n,
                                       std::int64_t c, std::int64_t h, std::int64_t w, bool max) {
    std::vector<double> out(static_cast<std::size_t>(n * h * w), 0.0);
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = max ? -1e300 : 0.0;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const double v =
                        input[static_cast<std::size_t>(((ni * c + ch) * h + y) * w + x)];
                    if (max)
                        acc = v > acc ? v : acc;
                    else
                        acc += v;
                }
                out[static_cast<std::size_t>((ni * h + y) * w + x)] =
                    max ? acc : acc / double(c);
            }
    return out;
}

double softmax_cross_entropy_naive(const std::vector<double>& logits, std::int64_t n,
                                   std::int64_t k, const std::vector<std::int64_t>& labels) {
    double total = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double denom = 0.0;
        for (std::int64_t j = 0; j < k; ++j)
            denom += std::exp(logits[static_cast<std::size_t>(i * k + j)]);
        const double p =
            std::exp(logits[static_cast<std::size_t>(i * k + labels[static_cast<std::size_t>(i)])]) /
            denom;
        total += -std::log(p);
    }
    return total / double(n);
}

}  // namespace attnconv::reference
