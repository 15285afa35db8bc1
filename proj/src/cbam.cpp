#include "attnconv/cbam.hpp"

namespace attnconv {

template <class T>
CbamParams<T> make_cbam_params(std::int64_t channels, std::int64_t reduction,
                               std::int64_t spatial_kernel_size) {
    if (channels < 1) fail("cbam: channels must be positive");
    if (reduction < 1 || channels % reduction != 0)
        fail("cbam: channels " + std::to_string(channels) + " not divisible by reduction ratio " +
             std::to_string(reduction));
    if (spatial_kernel_size < 1 || spatial_kernel_size % 2 == 0)
        fail("cbam: spatial kernel size must be odd, got " + std::to_string(spatial_kernel_size));
    const std::int64_t hidden = channels / reduction;
    CbamParams<T> p;
    p.channels = channels;
    p.reduction = reduction;
    p.mlp_w1 = Tensor<T>({channels, hidden});
    p.mlp_b1 = Tensor<T>({hidden});
    p.mlp_w2 = Tensor<T>({hidden, channels});
    p.mlp_b2 = Tensor<T>({channels});
    p.spatial_kernel = Tensor<T>({1, 2, spatial_kernel_size, spatial_kernel_size});
    p.spatial_bias = Tensor<T>({1});
    return p;
}

namespace {
template <class T>
Tensor<T> cam_mlp(const Tensor<T>& pooled_nc, const CbamParams<T>& p) {
    return linear(relu(linear(pooled_nc, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2);
}
}  // namespace

template <class T>
Tensor<T> channel_attention_weights(const Tensor<T>& feature, const CbamParams<T>& p) {
    if (!feature.defined() || feature.rank() != 4)
        fail("channel_attention_weights: feature must be N x C x H x W");
    if (feature.dim(1) != p.channels)
        fail("channel_attention_weights: feature has " + std::to_string(feature.dim(1)) +
             " channels, parameters built for " + std::to_string(p.channels));
    const std::int64_t n = feature.dim(0);
    Tensor<T> avg = reshape(pool_global_spatial(feature, PoolMode::avg), {n, p.channels});
    Tensor<T> mx = reshape(pool_global_spatial(feature, PoolMode::max), {n, p.channels});
    return sigmoid(add(cam_mlp(avg, p), cam_mlp(mx, p)));
}

template <class T>
Tensor<T> spatial_attention_map(const Tensor<T>& feature, const CbamParams<T>& p) {
    if (!feature.defined() || feature.rank() != 4)
        fail("spatial_attention_map: feature must be N x C x H x W");
    const std::int64_t k = p.spatial_kernel.dim(2);
    const std::int64_t pad = (k - 1) / 2;
    Tensor<T> stacked = concat_channels(pool_across_channels(feature, PoolMode::avg),
                                        pool_across_channels(feature, PoolMode::max));
    return sigmoid(conv2d(stacked, p.spatial_kernel, p.spatial_bias, {1, 1}, {pad, pad}, 1));
}

template <class T>
Tensor<T> cbam_forward(const Tensor<T>& feature, const CbamParams<T>& p) {
    Tensor<T> weights = channel_attention_weights(feature, p);
    Tensor<T> refined = scale_channels(feature, weights);
    Tensor<T> map = spatial_attention_map(refined, p);
    return scale_spatial(refined, map);
}

#define ATTNCONV_INSTANTIATE_CBAM(T)                                                       \
    template CbamParams<T> make_cbam_params(std::int64_t, std::int64_t, std::int64_t);     \
    template Tensor<T> channel_attention_weights(const Tensor<T>&, const CbamParams<T>&);  \
    template Tensor<T> spatial_attention_map(const Tensor<T>&, const CbamParams<T>&);      \
    template Tensor<T> cbam_forward(const Tensor<T>&, const CbamParams<T>&);

ATTNCONV_INSTANTIATE_CBAM(float)
ATTNCONV_INSTANTIATE_CBAM(double)

#undef ATTNCONV_INSTANTIATE_CBAM

}  // namespace attnconv
