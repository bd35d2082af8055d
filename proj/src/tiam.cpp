#include "taat/tiam.hpp"

#include "taat/errors.hpp"

namespace taat {

void TiamParams::validate() const {
    if (!flags.r2) throw ParameterError("TIAM flag R2 must stay enabled");
}

namespace {

// Conv block with the ReLU controlled by an ablation flag.
Tensor cr_apply(const Tensor& x, const ConvBlockParams& p, bool act_enabled) {
    Tensor out = conv2d(x, p.kernel, p.bias, 1, 1);
    out = batchnorm_inference(out, p.bn_mean, p.bn_var, p.bn_gamma, p.bn_beta, p.bn_eps);
    return act_enabled ? activation(out, Act::relu) : out;
}

}  // namespace

std::pair<Tensor, Tensor> decouple(const FrameFeatures& feat, const FrameFeatures& attn_source,
                                   const TiamParams& params) {
    params.validate();
    if (!feat.raw.same_shape(attn_source.raw))
        throw ShapeError("decouple shape mismatch: " + feat.raw.shape_str() + " vs " +
                         attn_source.raw.shape_str());

    const Tensor src_cls = conv_block(attn_source.raw, params.conv2, 1, 1);
    const Tensor src_reg = conv_block(attn_source.raw, params.conv4, 1, 1);
    const std::vector<float> a_cls = channel_attention(src_cls, params.attn_cls);
    const std::vector<float> a_reg = channel_attention(src_reg, params.attn_reg);

    const bool same = &feat == &attn_source;
    const Tensor feat_cls = same ? src_cls : conv_block(feat.raw, params.conv2, 1, 1);
    const Tensor feat_reg = same ? src_reg : conv_block(feat.raw, params.conv4, 1, 1);
    return {apply_attention(feat_cls, a_cls), apply_attention(feat_reg, a_reg)};
}

Tensor diff(const Tensor& x_t, const Tensor& x_p, const TiamParams& params) {
    params.validate();
    if (!x_t.same_shape(x_p))
        throw ShapeError("diff shape mismatch: " + x_t.shape_str() + " vs " + x_p.shape_str());
    const Tensor a = cr_apply(x_t, params.cr1, params.flags.r1);
    const Tensor b = cr_apply(x_p, params.cr1, params.flags.r1);
    return cr_apply(elementwise(a, b, EwOp::sub), params.cr2, params.flags.r2);
}

Tensor tiam_forward(const FrameFeatures& cur, const FrameFeatures& prev,
                    const TiamParams& params) {
    params.validate();
    if (cur.frame_index < prev.frame_index)
        throw ParameterError("tiam_forward: current frame precedes the cached previous frame");
    if (!cur.raw.same_shape(prev.raw))
        throw ShapeError("tiam_forward shape mismatch: " + cur.raw.shape_str() + " vs " +
                         prev.raw.shape_str());

    const auto [cls_t, reg_t] = decouple(cur, cur, params);
    const auto [cls_p, reg_p] = decouple(prev, cur, params);

    const Tensor d_cls = diff(cls_t, cls_p, params);
    const Tensor d_reg = diff(reg_t, reg_p, params);

    // Both predictions mix with the previous frame's classification clue;
    // reusing the regression clue directly would be hostage to object motion.
    const Tensor pred_cls = elementwise(d_cls, cls_p, EwOp::add);
    const Tensor pred_reg = elementwise(d_reg, cls_p, EwOp::add);

    const Tensor qk = cr_apply(concat_channels(pred_cls, pred_reg), params.cr3, params.flags.r3);
    Tensor pred = non_local(qk, cur.raw, params.nl);
    if (params.flags.r4) pred = activation(pred, Act::relu);
    return pred;
}

int sample_prev_index(int search_idx, Rng& rng) {
    if (search_idx < 1) throw SamplingError("search frame has no predecessor");
    const int lo = search_idx > 5 ? search_idx - 5 : 0;
    return static_cast<int>(rng.uniform_int(lo, search_idx - 1));
}

TrainingPair sample_training_pair(int sequence_length, Rng& rng) {
    if (sequence_length < 6)
        throw SamplingError("sequence too short for temporal sampling: " +
                            std::to_string(sequence_length));
    TrainingPair p;
    p.template_idx = static_cast<int>(rng.uniform_int(0, sequence_length - 1));
    p.search_idx = static_cast<int>(rng.uniform_int(1, sequence_length - 1));
    p.prev_search_idx = sample_prev_index(p.search_idx, rng);
    return p;
}

TiamParams init_tiam(int feature_channels, int reduction, PoolMode pooling,
                     const TiamFlags& flags, Rng& rng) {
    const int c = feature_channels;
    TiamParams p;
    p.conv2 = init_conv_block(c, c, 3, Act::relu, 0.0f, rng);
    p.conv4 = init_conv_block(c, c, 3, Act::relu, 0.0f, rng);
    p.cr1 = init_conv_block(c, c, 3, Act::none, 0.0f, rng);
    p.cr2 = init_conv_block(c, c, 3, Act::none, 0.0f, rng);
    p.cr3 = init_conv_block(c, 2 * c, 3, Act::none, 0.0f, rng);
    p.attn_cls = init_attention(c, reduction, pooling, rng);
    p.attn_reg = init_attention(c, reduction, pooling, rng);
    p.nl = init_non_local(c, c, c > 1 ? c / 2 : 1, rng);
    p.flags = flags;
    p.validate();
    return p;
}

void put_tiam(ModelWeights& w, const std::string& prefix, const TiamParams& p) {
    put_conv_block(w, prefix + "/conv2", p.conv2);
    put_conv_block(w, prefix + "/conv4", p.conv4);
    put_conv_block(w, prefix + "/cr1", p.cr1);
    put_conv_block(w, prefix + "/cr2", p.cr2);
    put_conv_block(w, prefix + "/cr3", p.cr3);
    put_attention(w, prefix + "/attn_cls", p.attn_cls);
    put_attention(w, prefix + "/attn_reg", p.attn_reg);
    put_non_local(w, prefix + "/nl", p.nl);
}

TiamParams take_tiam(WeightReader& r, const std::string& prefix, PoolMode pooling,
                     const TiamFlags& flags) {
    TiamParams p;
    p.conv2 = take_conv_block(r, prefix + "/conv2", Act::relu, 0.0f);
    p.conv4 = take_conv_block(r, prefix + "/conv4", Act::relu, 0.0f);
    p.cr1 = take_conv_block(r, prefix + "/cr1", Act::none, 0.0f);
    p.cr2 = take_conv_block(r, prefix + "/cr2", Act::none, 0.0f);
    p.cr3 = take_conv_block(r, prefix + "/cr3", Act::none, 0.0f);
    p.attn_cls = take_attention(r, prefix + "/attn_cls", pooling);
    p.attn_reg = take_attention(r, prefix + "/attn_reg", pooling);
    p.nl = take_non_local(r, prefix + "/nl");
    p.flags = flags;
    p.validate();
    return p;
}

}  // namespace taat
