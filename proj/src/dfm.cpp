#include "taat/dfm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "taat/errors.hpp"

namespace taat {

// ---------------------------------------------------------------------------
// Width grammar: "1-32-16(8)-1"

WidthConfig parse_width_config(const std::string& text) {
    WidthConfig w;
    int first = 0, last = 0;
    char paren[16] = {0};
    // with transition width
    if (std::sscanf(text.c_str(), "%d-%d-%d(%15[0-9])-%d", &first, &w.w1, &w.w2, paren, &last) == 5) {
        w.wt = std::atoi(paren);
    } else if (std::sscanf(text.c_str(), "%d-%d-%d-%d", &first, &w.w1, &w.w2, &last) == 4) {
        w.wt = 0;
    } else {
        throw ConfigError("cannot parse DFM width config: " + text);
    }
    if (first != 1 || last != 1)
        throw ConfigError("DFM width config must start and end with 1: " + text);
    if (w.w1 < 1 || w.w2 < 1 || w.wt < 0)
        throw ConfigError("DFM widths must be positive: " + text);
    return w;
}

std::string width_config_str(const WidthConfig& w) {
    char buf[64];
    if (w.wt > 0)
        std::snprintf(buf, sizeof(buf), "1-%d-%d(%d)-1", w.w1, w.w2, w.wt);
    else
        std::snprintf(buf, sizeof(buf), "1-%d-%d-1", w.w1, w.w2);
    return buf;
}

namespace {

void check_conv(const ConvParam& p, int cin, int cout, const char* name) {
    if (p.kernel.n != cout || p.kernel.c != cin)
        throw ShapeError(std::string("DFM conv ") + name + " has kernel " + p.kernel.shape_str() +
                         ", expected Cout=" + std::to_string(cout) +
                         " Cin=" + std::to_string(cin));
    if (static_cast<int>(p.bias.size()) != cout)
        throw ShapeError(std::string("DFM conv ") + name + " bias length mismatch");
}

void check_guide_block(const MutualGuideParams& b, const WidthConfig& w, const char* side) {
    check_conv(b.guide, 1, w.w1, side);
    check_conv(b.lower1, 1, w.w1, side);
    check_conv(b.lower2, w.w1, w.w2, side);
    if (w.wt > 0) {
        check_conv(b.trans1, 1, w.wt, side);
        check_conv(b.trans2, w.wt, w.w2, side);
    } else {
        check_conv(b.trans1, 1, w.w2, side);
    }
    check_conv(b.fuse, w.w2, 1, side);
}

}  // namespace

void DfmParams::validate() const {
    if (lambda < 0.0f || lambda > 1.0f)
        throw ParameterError("DFM lambda must be in [0,1], got " + std::to_string(lambda));
    if (!(std_eps > 0.0f)) throw ParameterError("DFM std_eps must be > 0");
    if (orientation != DfmOrientation::rgb_to_tir) check_guide_block(tar, widths, "tar");
    if (orientation != DfmOrientation::tir_to_rgb) check_guide_block(rat, widths, "rat");
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Tensor lrelu(const Tensor& x, float lambda) { return activation(x, Act::leaky_relu, lambda); }

Tensor conv3(const Tensor& x, const ConvParam& p) { return conv2d(x, p.kernel, p.bias, 1, 1); }

void require_single_channel(const Tensor& t, const char* what) {
    if (t.c != 1)
        throw ShapeError(std::string(what) + " must be single-channel, got " + t.shape_str());
}

struct GuideTape {
    Tensor g_pre, g;    // guide conv on primary
    Tensor a_pre, a;    // lower1 on assist
    Tensor mixed;       // g*a + a
    Tensor m2_pre, m2;  // lower2
    Tensor p1_pre, p1;  // trans1
    Tensor p2_pre, p2;  // trans2 (or alias of trans1 when wt == 0)
    Tensor out;
};

GuideTape guide_forward(const Tensor& primary, const Tensor& assist,
                        const MutualGuideParams& p, const WidthConfig& w, float lambda) {
    require_single_channel(primary, "mutual_guide primary map");
    require_single_channel(assist, "mutual_guide assist map");
    if (!primary.same_shape(assist))
        throw ShapeError("mutual_guide map shapes differ: " + primary.shape_str() + " vs " +
                         assist.shape_str());

    GuideTape t;
    t.g_pre = conv3(primary, p.guide);
    t.g = lrelu(t.g_pre, lambda);
    t.a_pre = conv3(assist, p.lower1);
    t.a = lrelu(t.a_pre, lambda);
    t.mixed = elementwise(elementwise(t.g, t.a, EwOp::mul), t.a, EwOp::add);
    t.m2_pre = conv3(t.mixed, p.lower2);
    t.m2 = lrelu(t.m2_pre, lambda);
    t.p1_pre = conv3(primary, p.trans1);
    t.p1 = lrelu(t.p1_pre, lambda);
    if (w.wt > 0) {
        t.p2_pre = conv3(t.p1, p.trans2);
        t.p2 = lrelu(t.p2_pre, lambda);
    } else {
        t.p2 = t.p1;
    }
    t.out = elementwise(t.p2, t.m2, EwOp::add);
    return t;
}

struct WeightTape {
    GuideTape mg;
    Tensor z;      // fuse conv output
    Tensor z_std;  // standardized
    Tensor w;      // sigmoid
};

WeightTape weight_forward(const Tensor& primary, const Tensor& assist,
                          const MutualGuideParams& p, const WidthConfig& widths, float lambda,
                          float std_eps) {
    WeightTape t;
    t.mg = guide_forward(primary, assist, p, widths, lambda);
    t.z = conv3(t.mg.out, p.fuse);
    t.z_std = standardize_spatial(t.z, std_eps);
    t.w = activation(t.z_std, Act::sigmoid);
    return t;
}

Tensor convex_mix(const Tensor& a, const Tensor& b, const Tensor& w) {
    // a*w + b*(1-w), w broadcast over channels of a/b
    Tensor out(a.n, a.c, a.h, a.w);
    const int plane = a.h * a.w;
    for (int ic = 0; ic < a.c; ++ic) {
        const float* pa = &a.v[a.idx(0, ic, 0, 0)];
        const float* pb = &b.v[b.idx(0, ic, 0, 0)];
        float* po = &out.v[out.idx(0, ic, 0, 0)];
        for (int i = 0; i < plane; ++i) po[i] = pa[i] * w.v[i] + pb[i] * (1.0f - w.v[i]);
    }
    return out;
}

}  // namespace

Tensor weighted_fusion(const Tensor& a, const Tensor& b, const Tensor& w) {
    if (!a.same_shape(b))
        throw ShapeError("weighted_fusion shape mismatch: " + a.shape_str() + " vs " +
                         b.shape_str());
    if (w.c != 1 || w.h != a.h || w.w != a.w)
        throw ShapeError("weight map shape " + w.shape_str() + " does not match " +
                         a.shape_str());
    return convex_mix(a, b, w);
}

Tensor mutual_guide(const Tensor& primary_map, const Tensor& assist_map,
                    const MutualGuideParams& params, float lambda) {
    WidthConfig w;
    w.w1 = params.guide.kernel.n;
    w.w2 = params.lower2.kernel.n;
    w.wt = params.trans1.kernel.n == w.w2 && params.trans2.kernel.numel() == 0
               ? 0
               : params.trans1.kernel.n;
    return guide_forward(primary_map, assist_map, params, w, lambda).out;
}

Tensor fusion_weight(const Tensor& primary_map, const Tensor& assist_map,
                     const MutualGuideParams& params, float lambda, float std_eps) {
    WidthConfig w;
    w.w1 = params.guide.kernel.n;
    w.w2 = params.lower2.kernel.n;
    w.wt = params.trans1.kernel.n == w.w2 && params.trans2.kernel.numel() == 0
               ? 0
               : params.trans1.kernel.n;
    return weight_forward(primary_map, assist_map, params, w, lambda, std_eps).w;
}

namespace {

// Effective RGB-side weight for the configured orientation.
Tensor effective_weight(const ResponseMaps& rgb, const ResponseMaps& tir,
                        const DfmParams& params) {
    if (params.orientation == DfmOrientation::tir_to_rgb)
        return weight_forward(rgb.cls_pos, tir.cls_pos, params.tar, params.widths, params.lambda,
                              params.std_eps)
            .w;
    if (params.orientation == DfmOrientation::rgb_to_tir) {
        Tensor w = weight_forward(tir.cls_pos, rgb.cls_pos, params.rat, params.widths,
                                  params.lambda, params.std_eps)
                       .w;
        for (float& x : w.v) x = 1.0f - x;
        return w;
    }
    Tensor wt = weight_forward(rgb.cls_pos, tir.cls_pos, params.tar, params.widths, params.lambda,
                               params.std_eps)
                    .w;
    const Tensor wr = weight_forward(tir.cls_pos, rgb.cls_pos, params.rat, params.widths,
                                     params.lambda, params.std_eps)
                          .w;
    for (std::size_t i = 0; i < wt.v.size(); ++i)
        wt.v[i] = 0.5f * (wt.v[i] + (1.0f - wr.v[i]));
    return wt;
}

}  // namespace

FusedResponse fuse(const ResponseMaps& rgb, const ResponseMaps& tir, const DfmParams& params) {
    params.validate();
    if (!rgb.cls_pos.same_shape(tir.cls_pos) || !rgb.reg.same_shape(tir.reg))
        throw ShapeError("fuse: modality grids differ: " + rgb.cls_pos.shape_str() + " vs " +
                         tir.cls_pos.shape_str());

    FusedResponse out;
    out.weight_map = effective_weight(rgb, tir, params);
    out.cls_pos_fused = convex_mix(rgb.cls_pos, tir.cls_pos, out.weight_map);
    out.cls_neg_fused = elementwise(rgb.cls_neg, tir.cls_neg, EwOp::add);
    for (float& x : out.cls_neg_fused.v) x *= 0.5f;
    out.reg_fused = convex_mix(rgb.reg, tir.reg, out.weight_map);
    return out;
}

FusedResponse fuse_average(const ResponseMaps& rgb, const ResponseMaps& tir) {
    if (!rgb.cls_pos.same_shape(tir.cls_pos) || !rgb.reg.same_shape(tir.reg))
        throw ShapeError("fuse_average: modality grids differ");
    FusedResponse out;
    out.weight_map = Tensor(rgb.cls_pos.n, 1, rgb.cls_pos.h, rgb.cls_pos.w, 0.5f);
    out.cls_pos_fused = elementwise(rgb.cls_pos, tir.cls_pos, EwOp::add);
    for (float& x : out.cls_pos_fused.v) x *= 0.5f;
    out.cls_neg_fused = elementwise(rgb.cls_neg, tir.cls_neg, EwOp::add);
    for (float& x : out.cls_neg_fused.v) x *= 0.5f;
    out.reg_fused = elementwise(rgb.reg, tir.reg, EwOp::add);
    for (float& x : out.reg_fused.v) x *= 0.5f;
    return out;
}

// ---------------------------------------------------------------------------
// Backward

namespace {

struct ConvBack {
    Tensor grad_input;
    Tensor grad_kernel;
    std::vector<float> grad_bias;
};

ConvBack conv3_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out,
                        bool want_input) {
    const int pad = 1;
    ConvBack b;
    b.grad_kernel = Tensor(kernel.n, kernel.c, kernel.h, kernel.w);
    b.grad_bias.assign(static_cast<std::size_t>(kernel.n), 0.0f);

    for (int co = 0; co < kernel.n; ++co) {
        double acc = 0.0;
        const float* go = &grad_out.v[grad_out.idx(0, co, 0, 0)];
        const int plane = grad_out.h * grad_out.w;
        for (int i = 0; i < plane; ++i) acc += go[i];
        b.grad_bias[co] = static_cast<float>(acc);
    }

    for (int co = 0; co < kernel.n; ++co) {
        for (int ci = 0; ci < kernel.c; ++ci) {
            for (int ky = 0; ky < kernel.h; ++ky) {
                for (int kx = 0; kx < kernel.w; ++kx) {
                    double acc = 0.0;
                    for (int y = 0; y < grad_out.h; ++y) {
                        const int iy = y + ky - pad;
                        if (iy < 0 || iy >= input.h) continue;
                        for (int x = 0; x < grad_out.w; ++x) {
                            const int ix = x + kx - pad;
                            if (ix < 0 || ix >= input.w) continue;
                            acc += static_cast<double>(grad_out.at(0, co, y, x)) *
                                   input.at(0, ci, iy, ix);
                        }
                    }
                    b.grad_kernel.at(co, ci, ky, kx) = static_cast<float>(acc);
                }
            }
        }
    }

    if (want_input) {
        b.grad_input = Tensor(input.n, input.c, input.h, input.w);
        for (int ci = 0; ci < input.c; ++ci) {
            for (int iy = 0; iy < input.h; ++iy) {
                for (int ix = 0; ix < input.w; ++ix) {
                    double acc = 0.0;
                    for (int co = 0; co < kernel.n; ++co) {
                        for (int ky = 0; ky < kernel.h; ++ky) {
                            const int y = iy + pad - ky;
                            if (y < 0 || y >= grad_out.h) continue;
                            for (int kx = 0; kx < kernel.w; ++kx) {
                                const int x = ix + pad - kx;
                                if (x < 0 || x >= grad_out.w) continue;
                                acc += static_cast<double>(grad_out.at(0, co, y, x)) *
                                       kernel.at(co, ci, ky, kx);
                            }
                        }
                    }
                    b.grad_input.at(0, ci, iy, ix) = static_cast<float>(acc);
                }
            }
        }
    }
    return b;
}

Tensor lrelu_backward(const Tensor& pre, const Tensor& grad_out, float lambda) {
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.v.size(); ++i)
        if (pre.v[i] <= 0.0f) g.v[i] *= lambda;
    return g;
}

Tensor sigmoid_backward(const Tensor& sig, const Tensor& grad_out) {
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.v.size(); ++i) g.v[i] *= sig.v[i] * (1.0f - sig.v[i]);
    return g;
}

// Backward through per-plane standardization y = (x - mu) / (sigma + eps).
Tensor standardize_backward(const Tensor& x, const Tensor& grad_out, float eps) {
    Tensor gi(x.n, x.c, x.h, x.w);
    const int plane = x.h * x.w;
    for (int in = 0; in < x.n; ++in) {
        for (int ic = 0; ic < x.c; ++ic) {
            const float* src = &x.v[x.idx(in, ic, 0, 0)];
            const float* go = &grad_out.v[grad_out.idx(in, ic, 0, 0)];
            float* dst = &gi.v[gi.idx(in, ic, 0, 0)];

            double mu = 0.0;
            for (int i = 0; i < plane; ++i) mu += src[i];
            mu /= plane;
            double var = 0.0;
            for (int i = 0; i < plane; ++i) {
                const double d = src[i] - mu;
                var += d * d;
            }
            var /= plane;
            const double sigma = std::sqrt(var);
            const double s = sigma + eps;

            double gsum = 0.0, gzsum = 0.0;
            for (int i = 0; i < plane; ++i) {
                gsum += go[i];
                gzsum += static_cast<double>(go[i]) * (src[i] - mu);
            }
            const double gmean = gsum / plane;
            const double corr = sigma > 0.0 ? gzsum / (plane * s * s * sigma) : 0.0;
            for (int i = 0; i < plane; ++i)
                dst[i] = static_cast<float>((go[i] - gmean) / s - (src[i] - mu) * corr);
        }
    }
    return gi;
}

ConvParam zeros_like(const ConvParam& p) {
    ConvParam z;
    z.kernel = Tensor(p.kernel.n, p.kernel.c, p.kernel.h, p.kernel.w);
    z.bias.assign(p.bias.size(), 0.0f);
    return z;
}

void accumulate(ConvParam& into, const Tensor& gk, const std::vector<float>& gb, double scale) {
    for (std::size_t i = 0; i < into.kernel.v.size(); ++i)
        into.kernel.v[i] += static_cast<float>(gk.v[i] * scale);
    for (std::size_t i = 0; i < into.bias.size(); ++i)
        into.bias[i] += static_cast<float>(gb[i] * scale);
}

// Backpropagates grad_w (w.r.t. the sigmoid weight map) through one guided
// block, accumulating parameter gradients scaled by `scale`.
void weight_backward(const Tensor& primary, const Tensor& assist, const MutualGuideParams& p,
                     const WidthConfig& widths, float lambda, float std_eps,
                     const WeightTape& t, const Tensor& grad_w, DfmGradients& grads,
                     const std::string& prefix, double scale) {
    const Tensor g_zstd = sigmoid_backward(t.w, grad_w);
    const Tensor g_z = standardize_backward(t.z, g_zstd, std_eps);

    ConvBack fuse_b = conv3_backward(t.mg.out, p.fuse.kernel, g_z, true);
    accumulate(grads[prefix + "/fuse"], fuse_b.grad_kernel, fuse_b.grad_bias, scale);
    const Tensor& g_out = fuse_b.grad_input;

    // transition path
    Tensor g_p2 = g_out;
    if (widths.wt > 0) {
        const Tensor g_p2pre = lrelu_backward(t.mg.p2_pre, g_p2, lambda);
        ConvBack t2b = conv3_backward(t.mg.p1, p.trans2.kernel, g_p2pre, true);
        accumulate(grads[prefix + "/trans2"], t2b.grad_kernel, t2b.grad_bias, scale);
        const Tensor g_p1pre = lrelu_backward(t.mg.p1_pre, t2b.grad_input, lambda);
        ConvBack t1b = conv3_backward(primary, p.trans1.kernel, g_p1pre, false);
        accumulate(grads[prefix + "/trans1"], t1b.grad_kernel, t1b.grad_bias, scale);
    } else {
        const Tensor g_p1pre = lrelu_backward(t.mg.p1_pre, g_p2, lambda);
        ConvBack t1b = conv3_backward(primary, p.trans1.kernel, g_p1pre, false);
        accumulate(grads[prefix + "/trans1"], t1b.grad_kernel, t1b.grad_bias, scale);
    }

    // assist path
    const Tensor g_m2pre = lrelu_backward(t.mg.m2_pre, g_out, lambda);
    ConvBack l2b = conv3_backward(t.mg.mixed, p.lower2.kernel, g_m2pre, true);
    accumulate(grads[prefix + "/lower2"], l2b.grad_kernel, l2b.grad_bias, scale);
    const Tensor& g_mixed = l2b.grad_input;

    // mixed = g*a + a
    Tensor g_g = elementwise(g_mixed, t.mg.a, EwOp::mul);
    Tensor g_a = elementwise(elementwise(g_mixed, t.mg.g, EwOp::mul), g_mixed, EwOp::add);

    const Tensor g_apre = lrelu_backward(t.mg.a_pre, g_a, lambda);
    ConvBack l1b = conv3_backward(assist, p.lower1.kernel, g_apre, false);
    accumulate(grads[prefix + "/lower1"], l1b.grad_kernel, l1b.grad_bias, scale);

    const Tensor g_gpre = lrelu_backward(t.mg.g_pre, g_g, lambda);
    ConvBack gb = conv3_backward(primary, p.guide.kernel, g_gpre, false);
    accumulate(grads[prefix + "/guide"], gb.grad_kernel, gb.grad_bias, scale);
}

struct ClsBack {
    double loss = 0.0, loss_pos = 0.0, loss_neg = 0.0;
    Tensor grad_pos;
};

// CE over (pos, neg) channels; returns gradient w.r.t. the fused positive
// map only (the negative map carries no DFM parameters).
ClsBack cls_backward(const Tensor& pos, const Tensor& neg, const Tensor& labels) {
    ClsBack out;
    out.grad_pos = Tensor(pos.n, pos.c, pos.h, pos.w);
    int total = 0, np = 0, nn = 0;
    double sum = 0.0, sp = 0.0, sn = 0.0;
    for (std::size_t i = 0; i < labels.v.size(); ++i)
        if (labels.v[i] != 0.0f) ++total;
    if (total == 0) throw LossError("cls loss has no non-ignored positions");

    for (std::size_t i = 0; i < labels.v.size(); ++i) {
        const float lab = labels.v[i];
        if (lab == 0.0f) continue;
        const double a = pos.v[i], b = neg.v[i];
        const double m = std::max(a, b);
        const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
        const double p_pos = std::exp(a - lse);
        if (lab > 0.0f) {
            const double l = lse - a;
            sum += l;
            sp += l;
            ++np;
            out.grad_pos.v[i] = static_cast<float>((p_pos - 1.0) / total);
        } else {
            const double l = lse - b;
            sum += l;
            sn += l;
            ++nn;
            out.grad_pos.v[i] = static_cast<float>(p_pos / total);
        }
    }
    out.loss = sum / total;
    out.loss_pos = np > 0 ? sp / np : 0.0;
    out.loss_neg = nn > 0 ? sn / nn : 0.0;
    return out;
}

}  // namespace

std::vector<DfmParamRef> dfm_active_convs(DfmParams& params) {
    std::vector<DfmParamRef> refs;
    auto add_block = [&](const std::string& side, MutualGuideParams& b) {
        refs.push_back({"dfm/" + side + "/guide", &b.guide});
        refs.push_back({"dfm/" + side + "/lower1", &b.lower1});
        refs.push_back({"dfm/" + side + "/lower2", &b.lower2});
        refs.push_back({"dfm/" + side + "/trans1", &b.trans1});
        if (params.widths.wt > 0) refs.push_back({"dfm/" + side + "/trans2", &b.trans2});
        refs.push_back({"dfm/" + side + "/fuse", &b.fuse});
    };
    if (params.orientation != DfmOrientation::rgb_to_tir) add_block("tar", params.tar);
    if (params.orientation != DfmOrientation::tir_to_rgb) add_block("rat", params.rat);
    return refs;
}

DfmLossAndGrads dfm_gradients(const std::vector<DfmSample>& batch, const DfmParams& params) {
    params.validate();
    if (batch.empty()) throw TrainError("dfm_gradients on empty batch");

    DfmLossAndGrads out;
    {
        DfmParams tmp = params;
        for (const auto& ref : dfm_active_convs(tmp)) out.grads[ref.name] = zeros_like(*ref.param);
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const DfmSample& sample : batch) {
        WeightTape tape_t, tape_r;
        Tensor w_eff;
        const bool use_tar = params.orientation != DfmOrientation::rgb_to_tir;
        const bool use_rat = params.orientation != DfmOrientation::tir_to_rgb;
        if (use_tar)
            tape_t = weight_forward(sample.rgb.cls_pos, sample.tir.cls_pos, params.tar,
                                    params.widths, params.lambda, params.std_eps);
        if (use_rat)
            tape_r = weight_forward(sample.tir.cls_pos, sample.rgb.cls_pos, params.rat,
                                    params.widths, params.lambda, params.std_eps);
        if (use_tar && use_rat) {
            w_eff = tape_t.w;
            for (std::size_t i = 0; i < w_eff.v.size(); ++i)
                w_eff.v[i] = 0.5f * (tape_t.w.v[i] + (1.0f - tape_r.w.v[i]));
        } else if (use_tar) {
            w_eff = tape_t.w;
        } else {
            w_eff = tape_r.w;
            for (float& x : w_eff.v) x = 1.0f - x;
        }

        const Tensor fused_pos = convex_mix(sample.rgb.cls_pos, sample.tir.cls_pos, w_eff);
        Tensor fused_neg = elementwise(sample.rgb.cls_neg, sample.tir.cls_neg, EwOp::add);
        for (float& x : fused_neg.v) x *= 0.5f;

        const ClsBack cb = cls_backward(fused_pos, fused_neg, sample.labels.cls_label);
        out.loss += cb.loss * inv_b;
        out.loss_positive += cb.loss_pos * inv_b;
        out.loss_negative += cb.loss_neg * inv_b;

        // dL/dW_eff = grad_pos * (R - T)
        Tensor g_weff = cb.grad_pos;
        for (std::size_t i = 0; i < g_weff.v.size(); ++i)
            g_weff.v[i] *= sample.rgb.cls_pos.v[i] - sample.tir.cls_pos.v[i];

        if (use_tar) {
            Tensor g_wt = g_weff;
            if (use_rat)
                for (float& x : g_wt.v) x *= 0.5f;
            weight_backward(sample.rgb.cls_pos, sample.tir.cls_pos, params.tar, params.widths,
                            params.lambda, params.std_eps, tape_t, g_wt, out.grads, "dfm/tar",
                            inv_b);
        }
        if (use_rat) {
            Tensor g_wr = g_weff;
            const float flip = use_tar ? -0.5f : -1.0f;
            for (float& x : g_wr.v) x *= flip;
            weight_backward(sample.tir.cls_pos, sample.rgb.cls_pos, params.rat, params.widths,
                            params.lambda, params.std_eps, tape_r, g_wr, out.grads, "dfm/rat",
                            inv_b);
        }
    }
    return out;
}

double dfm_batch_loss(const std::vector<DfmSample>& batch, const DfmParams& params) {
    if (batch.empty()) throw TrainError("dfm_batch_loss on empty batch");
    double sum = 0.0;
    for (const DfmSample& s : batch) {
        const FusedResponse f = fuse(s.rgb, s.tir, params);
        ResponseMaps fused;
        fused.cls_pos = f.cls_pos_fused;
        fused.cls_neg = f.cls_neg_fused;
        fused.reg = f.reg_fused;
        sum += cls_loss(fused, s.labels);
    }
    return sum / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Trainer

double learning_rate_at(const SgdSchedule& s, int epoch) {
    if (epoch < 0) throw ParameterError("negative epoch");
    if (s.warmup_epochs > 0 && epoch <= s.warmup_epochs)
        return s.lr_start +
               (s.lr_peak - s.lr_start) * static_cast<double>(epoch) / s.warmup_epochs;
    const int span = std::max(1, s.epochs - 1 - s.warmup_epochs);
    const double t = static_cast<double>(epoch - s.warmup_epochs) / span;
    return std::exp(std::log(s.lr_peak) + (std::log(s.lr_final) - std::log(s.lr_peak)) * t);
}

DfmTrainResult train_dfm(const std::vector<DfmSample>& dataset, const SgdSchedule& schedule,
                         const DfmParams& init) {
    if (dataset.empty()) throw TrainError("train_dfm: empty dataset");
    if (schedule.epochs < 1) throw TrainError("train_dfm: epochs must be >= 1");
    init.validate();

    DfmTrainResult result;
    result.params = init;
    auto refs = dfm_active_convs(result.params);

    std::map<std::string, ConvParam> velocity;
    for (const auto& ref : refs) velocity[ref.name] = zeros_like(*ref.param);

    Rng rng(schedule.seed);
    std::vector<int> order(dataset.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
        const double lr = learning_rate_at(schedule, epoch);
        rng.shuffle(order);

        double ep_loss = 0.0, ep_pos = 0.0, ep_neg = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(schedule.batch_size)) {
            std::vector<DfmSample> batch;
            for (std::size_t i = start;
                 i < std::min(order.size(), start + static_cast<std::size_t>(schedule.batch_size));
                 ++i)
                batch.push_back(dataset[static_cast<std::size_t>(order[i])]);

            DfmLossAndGrads lg = dfm_gradients(batch, result.params);
            ep_loss += lg.loss;
            ep_pos += lg.loss_positive;
            ep_neg += lg.loss_negative;
            ++batches;

            for (const auto& ref : refs) {
                ConvParam& vel = velocity[ref.name];
                const ConvParam& g = lg.grads[ref.name];
                for (std::size_t i = 0; i < ref.param->kernel.v.size(); ++i) {
                    const double gi = g.kernel.v[i] +
                                      schedule.weight_decay * ref.param->kernel.v[i];
                    vel.kernel.v[i] =
                        static_cast<float>(schedule.momentum * vel.kernel.v[i] + gi);
                    ref.param->kernel.v[i] -= static_cast<float>(lr * vel.kernel.v[i]);
                }
                for (std::size_t i = 0; i < ref.param->bias.size(); ++i) {
                    const double gi = g.bias[i] + schedule.weight_decay * ref.param->bias[i];
                    vel.bias[i] = static_cast<float>(schedule.momentum * vel.bias[i] + gi);
                    ref.param->bias[i] -= static_cast<float>(lr * vel.bias[i]);
                }
            }
        }

        EpochLoss el;
        el.epoch = epoch;
        el.lr = lr;
        el.total = ep_loss / batches;
        el.positive = ep_pos / batches;
        el.negative = ep_neg / batches;
        result.log.push_back(el);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Synthetic fusion datasets

namespace {

// Sharp-edged response: +amp inside the core ellipse, -floor_level outside.
Tensor peak_map(int size, float cx_cell, float cy_cell, float rx_cells, float ry_cells,
                float amp, float floor_level, float noise, Rng& rng) {
    Tensor t(1, 1, size, size);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            const float dx = (static_cast<float>(c) - cx_cell) / rx_cells;
            const float dy = (static_cast<float>(r) - cy_cell) / ry_cells;
            const bool inside = dx * dx + dy * dy <= 1.0f;
            t.at(0, 0, r, c) = (inside ? amp : -floor_level) +
                               noise * static_cast<float>(rng.normal());
        }
    return t;
}

Tensor noise_map(int size, float sigma, Rng& rng) {
    Tensor t(1, 1, size, size);
    for (float& x : t.v) x = sigma * static_cast<float>(rng.normal());
    return t;
}

}  // namespace

std::vector<DfmSample> make_synthetic_dfm_dataset(int count, int grid_size, int stride,
                                                  ReliableModality mode, std::uint64_t seed) {
    if (count < 1) throw ParameterError("dataset count must be >= 1");
    Rng rng(seed);
    const int image_size = grid_size * stride;
    const GridGeometry grid = GridGeometry::centered(grid_size, stride, image_size);

    std::vector<DfmSample> out;
    out.reserve(static_cast<std::size_t>(count));
    while (static_cast<int>(out.size()) < count) {
        BoundingBox gt;
        gt.w = static_cast<float>(rng.uniform(2.5, 5.0)) * stride;
        gt.h = static_cast<float>(rng.uniform(2.5, 5.0)) * stride;
        gt.cx = static_cast<float>(rng.uniform(0.25, 0.75)) * image_size;
        gt.cy = static_cast<float>(rng.uniform(0.25, 0.75)) * image_size;

        LabelMaps labels = assign_labels(gt, grid);
        bool has_pos = false;
        for (float l : labels.cls_label.v) has_pos |= l > 0.0f;
        if (!has_pos) continue;

        const float cx_cell = (gt.cx - grid.offset) / stride;
        const float cy_cell = (gt.cy - grid.offset) / stride;
        // core covers the positive-label ellipse (semi-axes w/4, h/4) snugly
        const float rx = 0.3f * gt.w / stride;
        const float ry = 0.3f * gt.h / stride;

        bool rgb_reliable = mode == ReliableModality::rgb;
        if (mode == ReliableModality::mixed) rgb_reliable = rng.uniform() < 0.5;

        DfmSample s;
        Tensor clean = peak_map(grid_size, cx_cell, cy_cell, rx, ry, 3.0f, 1.0f, 0.2f, rng);
        Tensor noisy = noise_map(grid_size, 1.5f, rng);
        s.rgb.cls_pos = rgb_reliable ? clean : noisy;
        s.tir.cls_pos = rgb_reliable ? noisy : clean;
        s.rgb.cls_neg = Tensor(1, 1, grid_size, grid_size);
        s.tir.cls_neg = Tensor(1, 1, grid_size, grid_size);
        s.rgb.reg = Tensor(1, 4, grid_size, grid_size, static_cast<float>(stride));
        s.tir.reg = Tensor(1, 4, grid_size, grid_size, static_cast<float>(stride));
        s.labels = std::move(labels);
        out.push_back(std::move(s));
    }
    return out;
}

double mean_weight_on_modality(const DfmParams& params, const std::vector<DfmSample>& samples,
                               bool rgb_side) {
    double sum = 0.0;
    std::int64_t n = 0;
    for (const DfmSample& s : samples) {
        const FusedResponse f = fuse(s.rgb, s.tir, params);
        for (std::size_t i = 0; i < s.labels.cls_label.v.size(); ++i) {
            if (s.labels.cls_label.v[i] <= 0.0f) continue;
            const double w = f.weight_map.v[i];
            sum += rgb_side ? w : 1.0 - w;
            ++n;
        }
    }
    if (n == 0) throw EvalError("no positive positions in weight evaluation set");
    return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Init and serialization

namespace {

ConvParam init_conv_param(int cout, int cin, Rng& rng) {
    ConvParam p;
    p.kernel = Tensor(cout, cin, 3, 3);
    const double s = std::sqrt(1.0 / (static_cast<double>(cin) * 9.0));
    for (float& x : p.kernel.v) x = static_cast<float>(rng.uniform(-s, s));
    p.bias.assign(static_cast<std::size_t>(cout), 0.0f);
    return p;
}

MutualGuideParams init_guide_block(const WidthConfig& w, Rng& rng) {
    MutualGuideParams b;
    b.guide = init_conv_param(w.w1, 1, rng);
    b.lower1 = init_conv_param(w.w1, 1, rng);
    b.lower2 = init_conv_param(w.w2, w.w1, rng);
    if (w.wt > 0) {
        b.trans1 = init_conv_param(w.wt, 1, rng);
        b.trans2 = init_conv_param(w.w2, w.wt, rng);
    } else {
        b.trans1 = init_conv_param(w.w2, 1, rng);
    }
    b.fuse = init_conv_param(1, w.w2, rng);
    return b;
}

void put_conv_param(ModelWeights& w, const std::string& prefix, const ConvParam& p) {
    w[prefix + "/kernel"] = WeightArray::from_tensor(p.kernel);
    w[prefix + "/bias"] = WeightArray::from_vector(p.bias);
}

ConvParam take_conv_param(WeightReader& r, const std::string& prefix) {
    ConvParam p;
    p.kernel = r.take_tensor(prefix + "/kernel");
    p.bias = r.take_vector(prefix + "/bias");
    return p;
}

void put_guide_block(ModelWeights& w, const std::string& prefix, const MutualGuideParams& b,
                     const WidthConfig& widths) {
    put_conv_param(w, prefix + "/guide", b.guide);
    put_conv_param(w, prefix + "/lower1", b.lower1);
    put_conv_param(w, prefix + "/lower2", b.lower2);
    put_conv_param(w, prefix + "/trans1", b.trans1);
    if (widths.wt > 0) put_conv_param(w, prefix + "/trans2", b.trans2);
    put_conv_param(w, prefix + "/fuse", b.fuse);
}

MutualGuideParams take_guide_block(WeightReader& r, const std::string& prefix,
                                   const WidthConfig& widths) {
    MutualGuideParams b;
    b.guide = take_conv_param(r, prefix + "/guide");
    b.lower1 = take_conv_param(r, prefix + "/lower1");
    b.lower2 = take_conv_param(r, prefix + "/lower2");
    b.trans1 = take_conv_param(r, prefix + "/trans1");
    if (widths.wt > 0) b.trans2 = take_conv_param(r, prefix + "/trans2");
    b.fuse = take_conv_param(r, prefix + "/fuse");
    return b;
}

}  // namespace

DfmParams init_dfm(const WidthConfig& widths, DfmOrientation orientation, float lambda,
                   std::uint64_t seed) {
    Rng rng(seed);
    DfmParams p;
    p.widths = widths;
    p.orientation = orientation;
    p.lambda = lambda;
    if (orientation != DfmOrientation::rgb_to_tir) p.tar = init_guide_block(widths, rng);
    if (orientation != DfmOrientation::tir_to_rgb) p.rat = init_guide_block(widths, rng);
    p.validate();
    return p;
}

void put_dfm(ModelWeights& w, const std::string& prefix, const DfmParams& p) {
    if (p.orientation != DfmOrientation::rgb_to_tir)
        put_guide_block(w, prefix + "/tar", p.tar, p.widths);
    if (p.orientation != DfmOrientation::tir_to_rgb)
        put_guide_block(w, prefix + "/rat", p.rat, p.widths);
}

DfmParams take_dfm(WeightReader& r, const std::string& prefix, const WidthConfig& widths,
                   DfmOrientation orientation, float lambda, float std_eps) {
    DfmParams p;
    p.widths = widths;
    p.orientation = orientation;
    p.lambda = lambda;
    p.std_eps = std_eps;
    if (orientation != DfmOrientation::rgb_to_tir)
        p.tar = take_guide_block(r, prefix + "/tar", widths);
    if (orientation != DfmOrientation::tir_to_rgb)
        p.rat = take_guide_block(r, prefix + "/rat", widths);
    p.validate();
    return p;
}

}  // namespace taat
