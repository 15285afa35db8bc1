#include "attnconv/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace attnconv {

namespace {

std::int64_t expanded_channels(std::int64_t in_ch, double expansion) {
    return static_cast<std::int64_t>(std::llround(in_ch * expansion));
}

std::int64_t squeezed_channels(std::int64_t in_ch, double se_ratio) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(in_ch * se_ratio));
}

void fill_conv_kernel(Tensor<float>& w, std::int64_t fan_out, RandomSource& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_out));
    for (float& v : w.values()) v = static_cast<float>(rng.normal() * stddev);
}

void fill_conv_kernel(Tensor<double>& w, std::int64_t fan_out, RandomSource& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_out));
    for (double& v : w.values()) v = rng.normal() * stddev;
}

template <class T>
void fill_fc(Tensor<T>& w, std::int64_t fan_in, RandomSource& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (T& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
void fill_ones(Tensor<T>& t) {
    std::fill(t.values().begin(), t.values().end(), T(1));
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

std::int64_t round_to_divisor(double value, std::int64_t divisor) {
    const double half = static_cast<double>(divisor) / 2.0;
    std::int64_t rounded =
        (static_cast<std::int64_t>(value + half) / divisor) * divisor;
    rounded = std::max(divisor, rounded);
    if (static_cast<double>(rounded) < 0.9 * value) rounded += divisor;
    return rounded;
}

void validate(const NetworkConfig& config) {
    if (config.stem_channels < 1) fail("config: stem_channels must be positive");
    if (config.head_channels < 1) fail("config: head_channels must be positive");
    if (config.num_classes < 2) fail("config: num_classes must be at least 2");
    if (config.input_resolution < 1) fail("config: input_resolution must be positive");
    if (config.stages.empty()) fail("config: at least one stage required");
    if (config.channel_divisor < 1) fail("config: channel_divisor must be positive");

    std::int64_t prev = config.stem_channels;
    std::int64_t total_stride = 2;   // stem
    for (std::size_t i = 0; i < config.stages.size(); ++i) {
        const MBConvSpec& s = config.stages[i];
        const std::string where = "config: stage " + std::to_string(i + 1);
        if (s.expansion <= 0) fail(where + ": expansion must be positive");
        if (s.kernel < 1 || s.kernel % 2 == 0) fail(where + ": kernel must be odd");
        if (s.stride != 1 && s.stride != 2) fail(where + ": stride must be 1 or 2");
        if (s.in_channels < 1 || s.out_channels < 1) fail(where + ": channels must be positive");
        if (s.repeats < 1) fail(where + ": repeats must be positive");
        if (s.in_channels != prev)
            fail(where + ": in_channels " + std::to_string(s.in_channels) +
                 " does not chain from previous width " + std::to_string(prev));
        if (s.se_ratio > 1.0) fail(where + ": se_ratio must be <= 1");
        prev = s.out_channels;
        total_stride *= s.stride;
    }
    if (config.input_resolution % total_stride != 0)
        fail("config: cumulative stride " + std::to_string(total_stride) +
             " does not divide input_resolution " + std::to_string(config.input_resolution));
    if (config.use_cbam && config.head_channels % config.cbam_reduction != 0)
        fail("config: head_channels " + std::to_string(config.head_channels) +
             " not divisible by cbam_reduction " + std::to_string(config.cbam_reduction));
    if (config.use_cbam && config.cbam_kernel % 2 == 0)
        fail("config: cbam_kernel must be odd");
}

NetworkConfig compound_scale(const NetworkConfig& base, double depth_mult, double width_mult,
                             double resolution_mult) {
    if (depth_mult <= 0 || width_mult <= 0 || resolution_mult <= 0)
        fail("compound_scale: multipliers must be positive");
    NetworkConfig scaled = base;
    scaled.stem_channels = round_to_divisor(base.stem_channels * width_mult, base.channel_divisor);
    scaled.head_channels = round_to_divisor(base.head_channels * width_mult, base.channel_divisor);
    for (MBConvSpec& s : scaled.stages) {
        s.in_channels = round_to_divisor(s.in_channels * width_mult, base.channel_divisor);
        s.out_channels = round_to_divisor(s.out_channels * width_mult, base.channel_divisor);
        s.repeats = static_cast<std::int64_t>(std::ceil(s.repeats * depth_mult));
    }
    scaled.input_resolution =
        static_cast<std::int64_t>(std::llround(base.input_resolution * resolution_mult));
    validate(scaled);
    return scaled;
}

NetworkConfig efftiny_config() {
    NetworkConfig c;
    c.stem_channels = 8;
    c.stages = {
        {1.0, 3, 1, 8, 8, 1, 0.25},
        {4.0, 3, 2, 8, 16, 2, 0.25},
        {4.0, 5, 2, 16, 32, 2, 0.25},
    };
    c.head_channels = 64;
    c.input_resolution = 64;
    c.num_classes = 11;
    c.cbam_reduction = 16;
    c.cbam_kernel = 7;
    return c;
}

NetworkConfig b7_shape_config() {
    NetworkConfig c;
    c.stem_channels = 8;
    c.stages = {
        {1.0, 3, 1, 8, 8, 1, 0.25},
        {4.0, 3, 2, 8, 16, 1, 0.25},
        {4.0, 5, 2, 16, 16, 1, 0.25},
        {4.0, 3, 2, 16, 24, 1, 0.25},
        {4.0, 5, 1, 24, 24, 1, 0.25},
        {4.0, 5, 2, 24, 32, 1, 0.25},
        {4.0, 3, 1, 32, 32, 1, 0.25},
    };
    c.head_channels = 2560;
    c.input_resolution = 256;
    c.num_classes = 11;
    return c;
}

NetworkConfig b0_config(std::int64_t num_classes) {
    NetworkConfig c;
    c.stem_channels = 32;
    c.stages = {
        {1.0, 3, 1, 32, 16, 1, 0.25},
        {6.0, 3, 2, 16, 24, 2, 0.25},
        {6.0, 5, 2, 24, 40, 2, 0.25},
        {6.0, 3, 2, 40, 80, 3, 0.25},
        {6.0, 5, 1, 80, 112, 3, 0.25},
        {6.0, 5, 2, 112, 192, 4, 0.25},
        {6.0, 3, 1, 192, 320, 1, 0.25},
    };
    c.head_channels = 1280;
    c.input_resolution = 224;
    c.num_classes = num_classes;
    return c;
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

template <class T>
MBConvBlock<T> make_mbconv_block(std::int64_t in_ch, std::int64_t out_ch, double expansion,
                                 std::int64_t kernel, std::int64_t stride, double se_ratio,
                                 RandomSource& rng) {
    MBConvBlock<T> b;
    b.in_ch = in_ch;
    b.out_ch = out_ch;
    b.mid_ch = expanded_channels(in_ch, expansion);
    b.kernel = kernel;
    b.stride = stride;
    b.has_expand = b.mid_ch != in_ch;
    b.has_se = se_ratio > 0.0;
    b.se_ch = b.has_se ? squeezed_channels(in_ch, se_ratio) : 0;
    b.has_skip = stride == 1 && in_ch == out_ch;

    if (b.has_expand) {
        b.expand_w = Tensor<T>({b.mid_ch, in_ch, 1, 1});
        fill_conv_kernel(b.expand_w, b.mid_ch, rng);
        b.expand_bn_scale = Tensor<T>({b.mid_ch});
        fill_ones(b.expand_bn_scale);
        b.expand_bn_shift = Tensor<T>({b.mid_ch});
        b.expand_bn = BnStats<T>(b.mid_ch);
    }
    b.dw_w = Tensor<T>({b.mid_ch, 1, kernel, kernel});
    fill_conv_kernel(b.dw_w, kernel * kernel, rng);
    b.dw_bn_scale = Tensor<T>({b.mid_ch});
    fill_ones(b.dw_bn_scale);
    b.dw_bn_shift = Tensor<T>({b.mid_ch});
    b.dw_bn = BnStats<T>(b.mid_ch);
    if (b.has_se) {
        b.se_reduce_w = Tensor<T>({b.se_ch, b.mid_ch, 1, 1});
        fill_conv_kernel(b.se_reduce_w, b.se_ch, rng);
        b.se_reduce_b = Tensor<T>({b.se_ch});
        b.se_expand_w = Tensor<T>({b.mid_ch, b.se_ch, 1, 1});
        fill_conv_kernel(b.se_expand_w, b.mid_ch, rng);
        b.se_expand_b = Tensor<T>({b.mid_ch});
    }
    b.project_w = Tensor<T>({out_ch, b.mid_ch, 1, 1});
    fill_conv_kernel(b.project_w, out_ch, rng);
    b.project_bn_scale = Tensor<T>({out_ch});
    fill_ones(b.project_bn_scale);
    b.project_bn_shift = Tensor<T>({out_ch});
    b.project_bn = BnStats<T>(out_ch);
    return b;
}

template <class T>
Tensor<T> mbconv_forward(MBConvBlock<T>& block, const Tensor<T>& x, bool training) {
    Tensor<T> h = x;
    if (block.has_expand) {
        h = conv2d(h, block.expand_w, Tensor<T>{}, {1, 1}, {0, 0}, 1);
        h = batch_norm(h, block.expand_bn_scale, block.expand_bn_shift, block.expand_bn, training);
        h = silu(h);
    }
    const std::int64_t pad = (block.kernel - 1) / 2;
    h = conv2d(h, block.dw_w, Tensor<T>{}, {block.stride, block.stride}, {pad, pad}, block.mid_ch);
    h = batch_norm(h, block.dw_bn_scale, block.dw_bn_shift, block.dw_bn, training);
    h = silu(h);
    if (block.has_se) {
        Tensor<T> s = pool_global_spatial(h, PoolMode::avg);
        s = conv2d(s, block.se_reduce_w, block.se_reduce_b, {1, 1}, {0, 0}, 1);
        s = silu(s);
        s = conv2d(s, block.se_expand_w, block.se_expand_b, {1, 1}, {0, 0}, 1);
        Tensor<T> gates = sigmoid(reshape(s, {h.dim(0), block.mid_ch}));
        h = scale_channels(h, gates);
    }
    h = conv2d(h, block.project_w, Tensor<T>{}, {1, 1}, {0, 0}, 1);
    h = batch_norm(h, block.project_bn_scale, block.project_bn_shift, block.project_bn, training);
    if (block.has_skip) h = add(h, x);
    return h;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

namespace {

void register_param(Model& m, const std::string& name, Tensor<float> t, bool decay) {
    t.set_requires_grad(true);
    m.params.push_back(Parameter<float>{name, t, {}, true, decay});
}

void register_block(Model& m, const std::string& prefix, MBConvBlock<float>& b) {
    if (b.has_expand) {
        register_param(m, prefix + ".expand.weight", b.expand_w, true);
        register_param(m, prefix + ".expand_bn.scale", b.expand_bn_scale, false);
        register_param(m, prefix + ".expand_bn.shift", b.expand_bn_shift, false);
    }
    register_param(m, prefix + ".dwconv.weight", b.dw_w, true);
    register_param(m, prefix + ".dwconv_bn.scale", b.dw_bn_scale, false);
    register_param(m, prefix + ".dwconv_bn.shift", b.dw_bn_shift, false);
    if (b.has_se) {
        register_param(m, prefix + ".se_reduce.weight", b.se_reduce_w, true);
        register_param(m, prefix + ".se_reduce.bias", b.se_reduce_b, false);
        register_param(m, prefix + ".se_expand.weight", b.se_expand_w, true);
        register_param(m, prefix + ".se_expand.bias", b.se_expand_b, false);
    }
    register_param(m, prefix + ".project.weight", b.project_w, true);
    register_param(m, prefix + ".project_bn.scale", b.project_bn_scale, false);
    register_param(m, prefix + ".project_bn.shift", b.project_bn_shift, false);
}

std::int64_t final_grid(const NetworkConfig& c) {
    std::int64_t stride = 2;
    for (const MBConvSpec& s : c.stages) stride *= s.stride;
    return c.input_resolution / stride;
}

}  // namespace

Model build_model(const NetworkConfig& config, std::uint64_t seed) {
    validate(config);
    Model m;
    m.config = config;
    RandomSource rng(mix64(seed, 0x6d6f64656cULL));

    m.stem_w = Tensor<float>({config.stem_channels, 3, 3, 3});
    fill_conv_kernel(m.stem_w, 9 * config.stem_channels, rng);
    m.stem_bn_scale = Tensor<float>({config.stem_channels});
    fill_ones(m.stem_bn_scale);
    m.stem_bn_shift = Tensor<float>({config.stem_channels});
    m.stem_bn = BnStats<float>(config.stem_channels);

    for (std::size_t si = 0; si < config.stages.size(); ++si) {
        const MBConvSpec& spec = config.stages[si];
        std::vector<MBConvBlock<float>> blocks;
        for (std::int64_t r = 0; r < spec.repeats; ++r) {
            const std::int64_t in_ch = r == 0 ? spec.in_channels : spec.out_channels;
            const std::int64_t stride = r == 0 ? spec.stride : 1;
            blocks.push_back(make_mbconv_block<float>(in_ch, spec.out_channels, spec.expansion,
                                                      spec.kernel, stride, spec.se_ratio, rng));
        }
        m.stages.push_back(std::move(blocks));
    }

    const std::int64_t last_ch = config.stages.back().out_channels;
    m.head_w = Tensor<float>({config.head_channels, last_ch, 1, 1});
    fill_conv_kernel(m.head_w, config.head_channels, rng);
    m.head_bn_scale = Tensor<float>({config.head_channels});
    fill_ones(m.head_bn_scale);
    m.head_bn_shift = Tensor<float>({config.head_channels});
    m.head_bn = BnStats<float>(config.head_channels);

    if (config.use_cbam) {
        m.cbam = make_cbam_params<float>(config.head_channels, config.cbam_reduction,
                                         config.cbam_kernel);
        fill_fc(m.cbam.mlp_w1, config.head_channels, rng);
        fill_fc(m.cbam.mlp_w2, config.head_channels / config.cbam_reduction, rng);
        fill_conv_kernel(m.cbam.spatial_kernel, config.cbam_kernel * config.cbam_kernel, rng);
    }

    const std::int64_t grid = final_grid(config);
    const std::int64_t fc_in =
        config.pooled_head ? config.head_channels : config.head_channels * grid * grid;
    m.fc_w = Tensor<float>({fc_in, config.num_classes});
    fill_fc(m.fc_w, fc_in, rng);
    m.fc_b = Tensor<float>({config.num_classes});
    fill_fc(m.fc_b, fc_in, rng);

    // registry, in checkpoint order
    register_param(m, "stem.weight", m.stem_w, true);
    register_param(m, "stem_bn.scale", m.stem_bn_scale, false);
    register_param(m, "stem_bn.shift", m.stem_bn_shift, false);
    for (std::size_t si = 0; si < m.stages.size(); ++si)
        for (std::size_t bi = 0; bi < m.stages[si].size(); ++bi)
            register_block(m,
                           "stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1),
                           m.stages[si][bi]);
    register_param(m, "head.weight", m.head_w, true);
    register_param(m, "head_bn.scale", m.head_bn_scale, false);
    register_param(m, "head_bn.shift", m.head_bn_shift, false);
    if (config.use_cbam) {
        register_param(m, "cbam.mlp.w1", m.cbam.mlp_w1, true);
        register_param(m, "cbam.mlp.b1", m.cbam.mlp_b1, false);
        register_param(m, "cbam.mlp.w2", m.cbam.mlp_w2, true);
        register_param(m, "cbam.mlp.b2", m.cbam.mlp_b2, false);
        register_param(m, "cbam.spatial.kernel", m.cbam.spatial_kernel, true);
        register_param(m, "cbam.spatial.bias", m.cbam.spatial_bias, false);
    }
    register_param(m, "classifier.weight", m.fc_w, true);
    register_param(m, "classifier.bias", m.fc_b, false);
    return m;
}

Parameter<float>* Model::find_param(const std::string& name) {
    for (Parameter<float>& p : params)
        if (p.name == name) return &p;
    return nullptr;
}

Tensor<float> forward(Model& model, const Tensor<float>& batch, bool training,
                      Tensor<float>* pre_cbam) {
    if (!batch.defined() || batch.rank() != 4 || batch.dim(1) != 3)
        fail("forward: batch must be N x 3 x R x R");
    const std::int64_t r = model.config.input_resolution;
    if (batch.dim(2) != r || batch.dim(3) != r)
        fail("forward: resolution " + std::to_string(batch.dim(2)) + "x" +
             std::to_string(batch.dim(3)) + " does not match configured " + std::to_string(r));

    // eval mode never builds a graph
    std::unique_ptr<NoGradGuard> guard;
    if (!training) guard = std::make_unique<NoGradGuard>();
    const bool bn_training = training && !model.bn_frozen;

    Tensor<float> h = conv2d(batch, model.stem_w, Tensor<float>{}, {2, 2}, {1, 1}, 1);
    h = batch_norm(h, model.stem_bn_scale, model.stem_bn_shift, model.stem_bn, bn_training);
    h = silu(h);
    for (auto& stage : model.stages)
        for (auto& block : stage) h = mbconv_forward(block, h, bn_training);
    h = conv2d(h, model.head_w, Tensor<float>{}, {1, 1}, {0, 0}, 1);
    h = batch_norm(h, model.head_bn_scale, model.head_bn_shift, model.head_bn, bn_training);
    h = silu(h);
    if (pre_cbam) *pre_cbam = h;
    if (model.config.use_cbam) h = cbam_forward(h, model.cbam);
    if (model.config.pooled_head)
        h = reshape(pool_global_spatial(h, PoolMode::avg), {h.dim(0), h.dim(1)});
    else
        h = flatten(h);
    return linear(h, model.fc_w, model.fc_b);
}

void visit_bn_stats(Model& model,
                    const std::function<void(const std::string&, BnStats<float>&)>& fn) {
    fn("stem_bn", model.stem_bn);
    for (std::size_t si = 0; si < model.stages.size(); ++si)
        for (std::size_t bi = 0; bi < model.stages[si].size(); ++bi) {
            MBConvBlock<float>& b = model.stages[si][bi];
            const std::string prefix =
                "stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1);
            if (b.has_expand) fn(prefix + ".expand_bn", b.expand_bn);
            fn(prefix + ".dwconv_bn", b.dw_bn);
            fn(prefix + ".project_bn", b.project_bn);
        }
    fn("head_bn", model.head_bn);
}

// ---------------------------------------------------------------------------
// accounting
// ---------------------------------------------------------------------------

ParamCount count_params(const Model& model) {
    ParamCount out;
    for (const Parameter<float>& p : model.params) {
        if (!p.trainable) continue;
        const std::int64_t n = p.value.numel();
        out.total += n;
        const std::string group = p.name.substr(0, p.name.find('.'));
        out.per_group[group] += n;
    }
    return out;
}

namespace {

LayerInfo conv_layer(const std::string& name, std::int64_t cout, std::int64_t cin_per_group,
                     std::int64_t k, std::int64_t out_h, std::int64_t out_w, bool bias) {
    LayerInfo li;
    li.name = name;
    li.out_shape = {cout, out_h, out_w};
    li.params = cout * cin_per_group * k * k + (bias ? cout : 0);
    li.macs = cout * cin_per_group * k * k * out_h * out_w;
    return li;
}

LayerInfo bn_layer(const std::string& name, std::int64_t c, std::int64_t h, std::int64_t w) {
    LayerInfo li;
    li.name = name;
    li.out_shape = {c, h, w};
    li.params = 2 * c;
    li.macs = 0;
    return li;
}

}  // namespace

std::vector<LayerInfo> layer_table(const NetworkConfig& config, std::int64_t resolution) {
    validate(config);
    std::vector<LayerInfo> rows;
    std::int64_t res = (resolution - 1) / 2 + 1;   // 3x3 stride-2 pad-1
    rows.push_back(conv_layer("stem", config.stem_channels, 3, 3, res, res, false));
    rows.push_back(bn_layer("stem_bn", config.stem_channels, res, res));

    for (std::size_t si = 0; si < config.stages.size(); ++si) {
        const MBConvSpec& spec = config.stages[si];
        for (std::int64_t bi = 0; bi < spec.repeats; ++bi) {
            const std::int64_t in_ch = bi == 0 ? spec.in_channels : spec.out_channels;
            const std::int64_t stride = bi == 0 ? spec.stride : 1;
            const std::int64_t mid = expanded_channels(in_ch, spec.expansion);
            const std::string prefix =
                "stage" + std::to_string(si + 1) + ".block" + std::to_string(bi + 1);
            if (mid != in_ch) {
                rows.push_back(conv_layer(prefix + ".expand", mid, in_ch, 1, res, res, false));
                rows.push_back(bn_layer(prefix + ".expand_bn", mid, res, res));
            }
            const std::int64_t out_res = (res - 1) / stride + 1;   // same-padded
            rows.push_back(
                conv_layer(prefix + ".dwconv", mid, 1, spec.kernel, out_res, out_res, false));
            rows.push_back(bn_layer(prefix + ".dwconv_bn", mid, out_res, out_res));
            if (spec.se_ratio > 0.0) {
                const std::int64_t se = squeezed_channels(in_ch, spec.se_ratio);
                rows.push_back(conv_layer(prefix + ".se_reduce", se, mid, 1, 1, 1, true));
                rows.push_back(conv_layer(prefix + ".se_expand", mid, se, 1, 1, 1, true));
            }
            rows.push_back(
                conv_layer(prefix + ".project", spec.out_channels, mid, 1, out_res, out_res, false));
            rows.push_back(bn_layer(prefix + ".project_bn", spec.out_channels, out_res, out_res));
            res = out_res;
        }
    }

    rows.push_back(conv_layer("head", config.head_channels,
                              config.stages.back().out_channels, 1, res, res, false));
    rows.push_back(bn_layer("head_bn", config.head_channels, res, res));

    if (config.use_cbam) {
        const std::int64_t c = config.head_channels;
        const std::int64_t hidden = c / config.cbam_reduction;
        // the shared MLP runs on both pooled summaries
        LayerInfo mlp;
        mlp.name = "cbam.mlp";
        mlp.out_shape = {c};
        mlp.params = c * hidden + hidden + hidden * c + c;
        mlp.macs = 2 * (c * hidden + hidden * c);
        rows.push_back(mlp);
        rows.push_back(
            conv_layer("cbam.spatial", 1, 2, config.cbam_kernel, res, res, true));
    }

    LayerInfo fc;
    fc.name = "classifier";
    const std::int64_t fc_in =
        config.pooled_head ? config.head_channels : config.head_channels * res * res;
    fc.out_shape = {config.num_classes};
    fc.params = fc_in * config.num_classes + config.num_classes;
    fc.macs = fc_in * config.num_classes;
    rows.push_back(fc);
    return rows;
}

std::int64_t count_macs(const NetworkConfig& config, std::int64_t resolution) {
    std::int64_t total = 0;
    for (const LayerInfo& li : layer_table(config, resolution)) total += li.macs;
    return total;
}

// ---------------------------------------------------------------------------

template MBConvBlock<float> make_mbconv_block(std::int64_t, std::int64_t, double, std::int64_t,
                                              std::int64_t, double, RandomSource&);
template MBConvBlock<double> make_mbconv_block(std::int64_t, std::int64_t, double, std::int64_t,
                                               std::int64_t, double, RandomSource&);
template Tensor<float> mbconv_forward(MBConvBlock<float>&, const Tensor<float>&, bool);
template Tensor<double> mbconv_forward(MBConvBlock<double>&, const Tensor<double>&, bool);

}  // namespace attnconv
