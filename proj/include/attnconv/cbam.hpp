#pragma once

#include <cstdint>

#include "attnconv/ops.hpp"
#include "attnconv/util.hpp"

namespace attnconv {

// Channel attention followed by spatial attention over an N x C x H x W
// feature map. The channel stage pools spatially (avg and max), runs both
// summaries through one shared two-layer MLP, sums the branches and squashes
// with a sigmoid; the spatial stage pools across channels, stacks the two
// maps and runs a k x k convolution with "same" padding.
template <class T>
struct CbamParams {
    std::int64_t channels = 0;
    std::int64_t reduction = 16;
    Tensor<T> mlp_w1;          // C x C/r
    Tensor<T> mlp_b1;          // C/r
    Tensor<T> mlp_w2;          // C/r x C
    Tensor<T> mlp_b2;          // C
    Tensor<T> spatial_kernel;  // 1 x 2 x k x k, k odd
    Tensor<T> spatial_bias;    // 1
};

// Zero-initialized parameter set; weights are filled in by the model builder
// (or by tests directly). Rejects C not divisible by r and even k.
template <class T>
CbamParams<T> make_cbam_params(std::int64_t channels, std::int64_t reduction,
                               std::int64_t spatial_kernel_size);

// sigma( MLP(avgpool(F)) + MLP(maxpool(F)) ), one weight per (sample, channel).
template <class T>
Tensor<T> channel_attention_weights(const Tensor<T>& feature, const CbamParams<T>& p);

// sigma( conv_kxk( [avg_over_channels(F); max_over_channels(F)] ) ), N x 1 x H x W.
template <class T>
Tensor<T> spatial_attention_map(const Tensor<T>& feature, const CbamParams<T>& p);

// Channel weights applied to F, then the spatial map of the refined tensor
// applied on top. Output shape equals input shape.
template <class T>
Tensor<T> cbam_forward(const Tensor<T>& feature, const CbamParams<T>& p);

}  // namespace attnconv
