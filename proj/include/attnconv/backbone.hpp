#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "attnconv/cbam.hpp"
#include "attnconv/ops.hpp"
#include "attnconv/tensor.hpp"

namespace attnconv {

// One backbone stage: a mobile inverted bottleneck block repeated `repeats`
// times. Blocks after the first run with stride 1 and in == out channels.
struct MBConvSpec {
    double expansion = 1.0;
    std::int64_t kernel = 3;   // odd
    std::int64_t stride = 1;   // 1 or 2
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    std::int64_t repeats = 1;
    double se_ratio = 0.25;    // squeeze-and-excitation; <= 0 disables
};

struct NetworkConfig {
    std::int64_t stem_channels = 8;      // stem is a 3x3 stride-2 convolution
    std::vector<MBConvSpec> stages;
    std::int64_t head_channels = 64;     // 1x1 convolution after the last stage
    std::int64_t input_resolution = 64;
    std::int64_t num_classes = 11;
    std::int64_t channel_divisor = 8;
    // attention / head layout
    bool use_cbam = true;
    std::int64_t cbam_reduction = 16;
    std::int64_t cbam_kernel = 7;
    bool pooled_head = false;            // global-average-pool before the FC instead of flatten
};

// Throws naming the violated invariant.
void validate(const NetworkConfig& config);

// repeats <- ceil(repeats * depth); channels <- divisor-rounded channels * width
// (round half up, floored at the divisor, bumped up when rounding would lose
// more than 10% of the target); resolution <- round(resolution * res).
NetworkConfig compound_scale(const NetworkConfig& base, double depth_mult, double width_mult,
                             double resolution_mult);

std::int64_t round_to_divisor(double value, std::int64_t divisor);

// Reference desk-scale configuration used throughout the tests.
NetworkConfig efftiny_config();
// Thin configuration with the full-size stride layout (five stride-2
// reductions) and a 2560-wide head; maps 256x256 inputs to an 8x8 grid.
NetworkConfig b7_shape_config();
// Baseline stage table of the scaled family (224 input, 1280 head).
NetworkConfig b0_config(std::int64_t num_classes = 1000);

// --- blocks -----------------------------------------------------------------

template <class T>
struct MBConvBlock {
    std::int64_t in_ch = 0, out_ch = 0, mid_ch = 0, se_ch = 0;
    std::int64_t kernel = 3, stride = 1;
    bool has_expand = false, has_se = false, has_skip = false;

    Tensor<T> expand_w;
    Tensor<T> expand_bn_scale, expand_bn_shift;
    BnStats<T> expand_bn;
    Tensor<T> dw_w;
    Tensor<T> dw_bn_scale, dw_bn_shift;
    BnStats<T> dw_bn;
    Tensor<T> se_reduce_w, se_reduce_b, se_expand_w, se_expand_b;
    Tensor<T> project_w;
    Tensor<T> project_bn_scale, project_bn_shift;
    BnStats<T> project_bn;
};

template <class T>
MBConvBlock<T> make_mbconv_block(std::int64_t in_ch, std::int64_t out_ch, double expansion,
                                 std::int64_t kernel, std::int64_t stride, double se_ratio,
                                 RandomSource& rng);

// expand 1x1 -> depthwise kxk -> optional SE -> project 1x1, batch-norm and
// silu between, residual add when stride 1 and in == out.
template <class T>
Tensor<T> mbconv_forward(MBConvBlock<T>& block, const Tensor<T>& x, bool training);

// --- model ------------------------------------------------------------------

struct Model {
    NetworkConfig config;

    Tensor<float> stem_w;
    Tensor<float> stem_bn_scale, stem_bn_shift;
    BnStats<float> stem_bn;
    std::vector<std::vector<MBConvBlock<float>>> stages;
    Tensor<float> head_w;
    Tensor<float> head_bn_scale, head_bn_shift;
    BnStats<float> head_bn;
    CbamParams<float> cbam;
    Tensor<float> fc_w, fc_b;

    // flat registry driving the optimizer and the checkpoint format; the
    // tensors alias the structured fields above
    std::vector<Parameter<float>> params;
    bool bn_frozen = false;   // frozen layers keep using running statistics

    Parameter<float>* find_param(const std::string& name);
    std::int64_t stage_count() const { return static_cast<std::int64_t>(stages.size()); }
};

// Deterministic initialization from the seed: fan-out-scaled Gaussians for
// conv kernels, uniform +-1/sqrt(fan_in) for FC layers, batch-norm scale 1 /
// shift 0, zero biases. The same seed rebuilds a bit-identical model.
Model build_model(const NetworkConfig& config, std::uint64_t seed);

// Full pass to logits [N, num_classes]. Eval mode uses running batch-norm
// statistics and records no graph. `pre_cbam` (optional) receives the head
// feature map before attention.
Tensor<float> forward(Model& model, const Tensor<float>& batch, bool training,
                      Tensor<float>* pre_cbam = nullptr);

// Walks every batch-norm state in checkpoint order.
void visit_bn_stats(Model& model,
                    const std::function<void(const std::string&, BnStats<float>&)>& fn);

// --- accounting ---------------------------------------------------------------

struct ParamCount {
    std::int64_t total = 0;
    std::map<std::string, std::int64_t> per_group;   // stem / stageN / head / cbam / classifier
};

// Element count over trainable parameters.
ParamCount count_params(const Model& model);

struct LayerInfo {
    std::string name;
    std::vector<std::int64_t> out_shape;
    std::int64_t params = 0;
    std::int64_t macs = 0;
};

// Analytic per-layer table (the basis of `inspect`); multiply-accumulates
// count conv and FC work only, pooling/activation/normalization excluded.
std::vector<LayerInfo> layer_table(const NetworkConfig& config, std::int64_t resolution);

std::int64_t count_macs(const NetworkConfig& config, std::int64_t resolution);

}  // namespace attnconv
