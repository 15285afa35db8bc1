#pragma once

#include <cstdint>
#include <vector>

// Serial, naive implementations of the core kernels, kept deliberately
// independent of the main code path: plain nested loops over raw buffers, no
// shared helpers, no OpenMP. They back the correctness tests as oracles and
// the kernel benchmark as the single-thread baseline.
namespace attnconv::reference {

// Direct sliding-window cross-correlation, six nested loops plus the group
// loop. `bias` may be empty.
std::vector<double> conv2d_naive(const std::vector<double>& input, std::int64_t n,
                                 std::int64_t cin, std::int64_t h, std::int64_t w,
                                 const std::vector<double>& weight, std::int64_t cout,
                                 std::int64_t kh, std::int64_t kw,
                                 const std::vector<double>& bias, std::int64_t stride_h,
                                 std::int64_t stride_w, std::int64_t pad_h, std::int64_t pad_w,
                                 std::int64_t groups);

std::vector<double> matmul_naive(const std::vector<double>& a, std::int64_t n, std::int64_t d,
                                 const std::vector<double>& b, std::int64_t k);

// N x C x H x W -> N x C, per-channel mean / max over spatial positions.
std::vector<double> global_pool_naive(const std::vector<double>& input, std::int64_t n,
                                      std::int64_t c, std::int64_t h, std::int64_t w, bool max);

// N x C x H x W -> N x H x W, per-position mean / max over channels.
std::vector<double> channel_pool_naive(const std::vector<double>& input, std::int64_t n,
                                       std::int64_t c, std::int64_t h, std::int64_t w, bool max);

// Unstabilized exp/normalize/-log mean loss (valid for small logit magnitudes).
double softmax_cross_entropy_naive(const std::vector<double>& logits, std::int64_t n,
                                   std::int64_t k, const std::vector<std::int64_t>& labels);

}  // namespace attnconv::reference
