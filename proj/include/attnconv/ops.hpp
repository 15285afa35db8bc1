#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "attnconv/tensor.hpp"

namespace attnconv {

enum class PoolMode { avg, max };
enum class ActKind { sigmoid, relu, silu };

// Per-channel running statistics owned by a batch-norm layer. `initialized`
// flips on the first training-mode pass; evaluating before that is rejected.
template <class T>
struct BnStats {
    std::vector<T> mean;
    std::vector<T> var;
    bool initialized = false;

    BnStats() = default;
    explicit BnStats(std::int64_t channels)
        : mean(static_cast<std::size_t>(channels), T(0)),
          var(static_cast<std::size_t>(channels), T(1)) {}
};

// Cross-correlation over N x Cin x H x W with zero padding.
// groups=Cin with Cout=Cin gives a depthwise convolution; 1x1 with groups=1
// is pointwise. `bias` may be an undefined (default-constructed) tensor.
// Hout = floor((H + 2*padH - Kh) / strideH) + 1, and must be >= 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::array<std::int64_t, 2> stride = {1, 1},
                 std::array<std::int64_t, 2> padding = {0, 0},
                 std::int64_t groups = 1);

// N x C x H x W -> N x C x 1 x 1, mean or max over all spatial positions.
template <class T>
Tensor<T> pool_global_spatial(const Tensor<T>& input, PoolMode mode);

// N x C x H x W -> N x 1 x H x W, mean or max over channels.
template <class T>
Tensor<T> pool_across_channels(const Tensor<T>& input, PoolMode mode);

template <class T>
Tensor<T> activation(const Tensor<T>& x, ActKind kind);

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) { return activation(x, ActKind::sigmoid); }
template <class T>
Tensor<T> relu(const Tensor<T>& x) { return activation(x, ActKind::relu); }
template <class T>
Tensor<T> silu(const Tensor<T>& x) { return activation(x, ActKind::silu); }

// Train mode normalizes by batch statistics (biased variance over N*H*W per
// channel) and folds them into `running` via (1-momentum)*old + momentum*batch.
// Eval mode normalizes by the running statistics.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                     BnStats<T>& running, bool training, T momentum = T(0.1),
                     T epsilon = T(1e-5));

// x[N,D] * w[D,K] + b[K]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// Row-wise softmax (max-subtraction stabilized).
template <class T>
Tensor<T> softmax(const Tensor<T>& logits);

// Mean over the batch of -log softmax(logits)[label].
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& labels);

// --- elementwise / structural ----------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor);

template <class T>
Tensor<T> sum(const Tensor<T>& x);

template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<std::int64_t> shape);

// N x ... -> N x (numel/N)
template <class T>
Tensor<T> flatten(const Tensor<T>& x);

// [N,Ca,H,W] + [N,Cb,H,W] -> [N,Ca+Cb,H,W]
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

// out[n,c,h,w] = x[n,c,h,w] * w[n,c]
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& w);

// out[n,c,h,w] = x[n,c,h,w] * m[n,0,h,w]
template <class T>
Tensor<T> scale_spatial(const Tensor<T>& x, const Tensor<T>& m);

}  // namespace attnconv
