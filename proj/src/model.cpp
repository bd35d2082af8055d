#include "taat/model.hpp"

#include <cmath>

#include "taat/errors.hpp"

namespace taat {

namespace {

constexpr int kBackboneChannels[4] = {16, 32, 64, 64};
constexpr int kInputChannels = 3;  // TIR planes are replicated to 3

Tensor init_plain_kernel(int cout, int cin, int k, Rng& rng) {
    Tensor t(cout, cin, k, k);
    const double s = std::sqrt(1.0 / (static_cast<double>(cin) * k * k));
    for (float& x : t.v) x = static_cast<float>(rng.uniform(-s, s));
    return t;
}

}  // namespace

ModelWeights init_model_weights(const TrackConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    ModelWeights w;

    int cin = kInputChannels;
    for (int i = 0; i < 4; ++i) {
        const int cout = kBackboneChannels[i];
        put_conv_block(w, "backbone/conv" + std::to_string(i + 1),
                       init_conv_block(cout, cin, 3, Act::relu, 0.0f, rng));
        cin = cout;
    }
    put_conv_block(w, "neck", init_conv_block(config.feature_dim, cin, 1, Act::none, 0.0f, rng));

    const int d = config.feature_dim;
    put_conv_block(w, "head/cls_template", init_conv_block(d, d, 3, Act::relu, 0.0f, rng));
    put_conv_block(w, "head/cls_search", init_conv_block(d, d, 3, Act::relu, 0.0f, rng));
    put_conv_block(w, "head/reg_template", init_conv_block(d, d, 3, Act::relu, 0.0f, rng));
    put_conv_block(w, "head/reg_search", init_conv_block(d, d, 3, Act::relu, 0.0f, rng));
    w["head/cls_out/kernel"] = WeightArray::from_tensor(init_plain_kernel(2, d, 1, rng));
    w["head/cls_out/bias"] = WeightArray::from_vector(std::vector<float>(2, 0.0f));
    w["head/reg_out/kernel"] = WeightArray::from_tensor(init_plain_kernel(4, d, 1, rng));
    w["head/reg_out/bias"] = WeightArray::from_vector(std::vector<float>(4, 0.0f));

    if (config.use_tiam) {
        const TiamParams tiam = init_tiam(d, config.attention_reduction,
                                          config.attention_pooling, config.tiam_flags, rng);
        put_tiam(w, "tiam", tiam);
    }
    if (config.fusion == FusionMode::dfm) {
        const DfmParams dfm = init_dfm(parse_width_config(config.dfm_widths),
                                       config.dfm_orientation, config.dfm_lambda,
                                       rng.next_u64());
        put_dfm(w, "dfm", dfm);
    }
    return w;
}

TrackModel model_from_weights(const ModelWeights& weights, const TrackConfig& config) {
    config.validate();
    WeightReader r(weights);
    TrackModel m;

    for (int i = 0; i < 4; ++i)
        m.backbone.convs.push_back(
            take_conv_block(r, "backbone/conv" + std::to_string(i + 1), Act::relu, 0.0f));
    m.backbone.neck = take_conv_block(r, "neck", Act::none, 0.0f);
    if (m.backbone.neck.out_channels() != config.feature_dim)
        throw ShapeError("neck output channels " +
                         std::to_string(m.backbone.neck.out_channels()) +
                         " do not match configured feature_dim " +
                         std::to_string(config.feature_dim));

    m.head.cls_template = take_conv_block(r, "head/cls_template", Act::relu, 0.0f);
    m.head.cls_search = take_conv_block(r, "head/cls_search", Act::relu, 0.0f);
    m.head.reg_template = take_conv_block(r, "head/reg_template", Act::relu, 0.0f);
    m.head.reg_search = take_conv_block(r, "head/reg_search", Act::relu, 0.0f);
    m.head.cls_out_kernel = r.take_tensor("head/cls_out/kernel");
    m.head.cls_out_bias = r.take_vector("head/cls_out/bias");
    m.head.reg_out_kernel = r.take_tensor("head/reg_out/kernel");
    m.head.reg_out_bias = r.take_vector("head/reg_out/bias");
    m.head.stride = config.stride;

    if (r.has_prefix("tiam/"))
        m.tiam = take_tiam(r, "tiam", config.attention_pooling, config.tiam_flags);
    if (r.has_prefix("dfm/")) {
        // Load every stored orientation block; the configured orientation
        // selects what runs.
        const bool has_tar = r.has_prefix("dfm/tar/");
        const bool has_rat = r.has_prefix("dfm/rat/");
        DfmOrientation stored = config.dfm_orientation;
        if (has_tar && has_rat)
            stored = DfmOrientation::both;
        else if (has_tar)
            stored = DfmOrientation::tir_to_rgb;
        else if (has_rat)
            stored = DfmOrientation::rgb_to_tir;
        DfmParams p = take_dfm(r, "dfm", parse_width_config(config.dfm_widths), stored,
                               config.dfm_lambda, config.std_eps);
        p.orientation = config.dfm_orientation;
        p.validate();
        m.dfm = std::move(p);
    }

    if (config.use_tiam && !m.tiam)
        throw ConfigError("config enables TIAM but the weight file has no tiam/ group");
    if (config.fusion == FusionMode::dfm && config.modality == Modality::rgbt && !m.dfm)
        throw ConfigError("config requires DFM fusion but the weight file has no dfm/ group");

    r.finish();
    return m;
}

void put_model(ModelWeights& w, const TrackModel& model) {
    for (std::size_t i = 0; i < model.backbone.convs.size(); ++i)
        put_conv_block(w, "backbone/conv" + std::to_string(i + 1), model.backbone.convs[i]);
    put_conv_block(w, "neck", model.backbone.neck);
    put_conv_block(w, "head/cls_template", model.head.cls_template);
    put_conv_block(w, "head/cls_search", model.head.cls_search);
    put_conv_block(w, "head/reg_template", model.head.reg_template);
    put_conv_block(w, "head/reg_search", model.head.reg_search);
    w["head/cls_out/kernel"] = WeightArray::from_tensor(model.head.cls_out_kernel);
    w["head/cls_out/bias"] = WeightArray::from_vector(model.head.cls_out_bias);
    w["head/reg_out/kernel"] = WeightArray::from_tensor(model.head.reg_out_kernel);
    w["head/reg_out/bias"] = WeightArray::from_vector(model.head.reg_out_bias);
    if (model.tiam) put_tiam(w, "tiam", *model.tiam);
    if (model.dfm) put_dfm(w, "dfm", *model.dfm);
}

}  // namespace taat
