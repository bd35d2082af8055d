#include "taat/siamese.hpp"

#include <algorithm>
#include <cmath>

#include "taat/errors.hpp"

namespace taat {

Tensor extract_features(const Tensor& image, const BackboneParams& params) {
    if (image.h % 8 != 0 || image.w % 8 != 0)
        throw ShapeError("image side not divisible by total stride 8: " + image.shape_str());
    Tensor x = image;
    for (std::size_t i = 0; i < params.convs.size(); ++i) {
        const int stride = i < 3 ? 2 : 1;
        x = conv_block(x, params.convs[i], stride, 1);
    }
    return conv_block(x, params.neck, 1, 0);
}

namespace {

Tensor plain_conv1x1(const Tensor& input, const Tensor& kernel, const std::vector<float>& bias) {
    return conv2d(input, kernel, bias, 1, 0);
}

}  // namespace

ResponseMaps head_forward(const Tensor& template_feat, const Tensor& search_feat,
                          const HeadParams& params) {
    const Tensor cls_t = conv_block(template_feat, params.cls_template, 1, 1);
    const Tensor cls_s = conv_block(search_feat, params.cls_search, 1, 1);
    const Tensor reg_t = conv_block(template_feat, params.reg_template, 1, 1);
    const Tensor reg_s = conv_block(search_feat, params.reg_search, 1, 1);

    const Tensor cls_corr = xcorr_depthwise(cls_s, cls_t);
    const Tensor reg_corr = xcorr_depthwise(reg_s, reg_t);

    const Tensor cls = plain_conv1x1(cls_corr, params.cls_out_kernel, params.cls_out_bias);
    const Tensor reg_raw = plain_conv1x1(reg_corr, params.reg_out_kernel, params.reg_out_bias);
    if (cls.c != 2 || reg_raw.c != 4)
        throw ShapeError("head output convs must produce 2 cls and 4 reg channels");

    ResponseMaps maps;
    maps.cls_pos = Tensor(1, 1, cls.h, cls.w);
    maps.cls_neg = Tensor(1, 1, cls.h, cls.w);
    const int plane = cls.h * cls.w;
    std::copy_n(&cls.v[cls.idx(0, 0, 0, 0)], plane, maps.cls_pos.v.begin());
    std::copy_n(&cls.v[cls.idx(0, 1, 0, 0)], plane, maps.cls_neg.v.begin());

    maps.reg = reg_raw;
    const float s = static_cast<float>(params.stride);
    for (float& x : maps.reg.v) x = std::exp(x) * s;
    return maps;
}

LabelMaps assign_labels(const BoundingBox& gt, const GridGeometry& grid) {
    if (!gt.valid()) throw LabelError("groundtruth box has non-positive size");
    const float img = static_cast<float>(grid.image_size);
    if (gt.x1() <= 0.0f || gt.y1() <= 0.0f || gt.x0() >= img || gt.y0() >= img)
        throw LabelError("groundtruth box lies fully outside the search region");

    LabelMaps labels;
    labels.cls_label = Tensor(1, 1, grid.size, grid.size);
    labels.reg_target = Tensor(1, 4, grid.size, grid.size);

    const float ax1 = 0.5f * gt.w, ay1 = 0.5f * gt.h;    // E1 semi-axes
    const float ax2 = 0.25f * gt.w, ay2 = 0.25f * gt.h;  // E2 semi-axes
    for (int r = 0; r < grid.size; ++r) {
        const float py = grid.point_y(r);
        for (int c = 0; c < grid.size; ++c) {
            const float px = grid.point_x(c);
            const float dx = px - gt.cx, dy = py - gt.cy;
            const float e2 = (dx * dx) / (ax2 * ax2) + (dy * dy) / (ay2 * ay2);
            const float e1 = (dx * dx) / (ax1 * ax1) + (dy * dy) / (ay1 * ay1);
            float label = -1.0f;
            if (e2 <= 1.0f)
                label = 1.0f;
            else if (e1 <= 1.0f)
                label = 0.0f;
            labels.cls_label.at(0, 0, r, c) = label;
            labels.reg_target.at(0, 0, r, c) = px - gt.x0();
            labels.reg_target.at(0, 1, r, c) = py - gt.y0();
            labels.reg_target.at(0, 2, r, c) = gt.x1() - px;
            labels.reg_target.at(0, 3, r, c) = gt.y1() - py;
        }
    }
    return labels;
}

namespace {

// Per-position softmax losses for the (pos, neg) channel pair.
struct SoftmaxCe {
    double pos_loss;  // -log p(pos)
    double neg_loss;  // -log p(neg)
};

SoftmaxCe softmax_ce(float pos, float neg) {
    const double m = std::max(pos, neg);
    const double lse = m + std::log(std::exp(pos - m) + std::exp(neg - m));
    return {lse - pos, lse - neg};
}

}  // namespace

ClsLossSplit cls_loss_split(const ResponseMaps& resp, const LabelMaps& labels) {
    if (!resp.cls_pos.same_shape(labels.cls_label))
        throw ShapeError("cls_loss shape mismatch: " + resp.cls_pos.shape_str() + " vs " +
                         labels.cls_label.shape_str());
    double pos_sum = 0.0, neg_sum = 0.0;
    int pos_n = 0, neg_n = 0;
    for (std::size_t i = 0; i < labels.cls_label.v.size(); ++i) {
        const float lab = labels.cls_label.v[i];
        if (lab == 0.0f) continue;
        const SoftmaxCe ce = softmax_ce(resp.cls_pos.v[i], resp.cls_neg.v[i]);
        if (lab > 0.0f) {
            pos_sum += ce.pos_loss;
            ++pos_n;
        } else {
            neg_sum += ce.neg_loss;
            ++neg_n;
        }
    }
    if (pos_n + neg_n == 0) throw LossError("cls_loss has no non-ignored positions");
    ClsLossSplit out;
    out.total = static_cast<float>((pos_sum + neg_sum) / (pos_n + neg_n));
    out.positive = pos_n > 0 ? static_cast<float>(pos_sum / pos_n) : 0.0f;
    out.negative = neg_n > 0 ? static_cast<float>(neg_sum / neg_n) : 0.0f;
    out.positive_count = pos_n;
    out.negative_count = neg_n;
    return out;
}

float cls_loss(const ResponseMaps& resp, const LabelMaps& labels) {
    return cls_loss_split(resp, labels).total;
}

float iou_loss(const ResponseMaps& resp, const LabelMaps& labels) {
    if (resp.reg.h != labels.reg_target.h || resp.reg.w != labels.reg_target.w)
        throw ShapeError("iou_loss shape mismatch");
    double sum = 0.0;
    int count = 0;
    for (int r = 0; r < labels.cls_label.h; ++r) {
        for (int c = 0; c < labels.cls_label.w; ++c) {
            if (labels.cls_label.at(0, 0, r, c) <= 0.0f) continue;
            const float pl = resp.reg.at(0, 0, r, c), pt = resp.reg.at(0, 1, r, c);
            const float pr = resp.reg.at(0, 2, r, c), pb = resp.reg.at(0, 3, r, c);
            const float tl = labels.reg_target.at(0, 0, r, c), tt = labels.reg_target.at(0, 1, r, c);
            const float tr = labels.reg_target.at(0, 2, r, c), tb = labels.reg_target.at(0, 3, r, c);
            const double inter = (std::min(pl, tl) + std::min(pr, tr)) *
                                 static_cast<double>(std::min(pt, tt) + std::min(pb, tb));
            const double area_p = (pl + pr) * static_cast<double>(pt + pb);
            const double area_t = (tl + tr) * static_cast<double>(tt + tb);
            const double uni = area_p + area_t - inter;
            sum += 1.0 - (uni > 0.0 ? inter / uni : 0.0);
            ++count;
        }
    }
    if (count == 0) throw LossError("iou_loss has no positive positions");
    return static_cast<float>(sum / count);
}

namespace {

float hann(int i, int len) {
    if (len <= 1) return 1.0f;
    return 0.5f * (1.0f - std::cos(2.0f * 3.14159265358979323846f * static_cast<float>(i) /
                                   static_cast<float>(len - 1)));
}

float size_with_pad(float w, float h) {
    const float pad = 0.5f * (w + h);
    return std::sqrt((w + pad) * (h + pad));
}

}  // namespace

DecodedBox decode_box(const ResponseMaps& resp, const GridGeometry& grid,
                      const PostProcessConfig& post, const BoundingBox& prev) {
    const int s = grid.size;
    const float prev_sz = size_with_pad(prev.w, prev.h);
    const float prev_ratio = prev.w / prev.h;

    int best_r = 0, best_c = 0;
    float best_score = -1.0f;
    for (int r = 0; r < s; ++r) {
        for (int c = 0; c < s; ++c) {
            const float pos = resp.cls_pos.at(0, 0, r, c);
            const float neg = resp.cls_neg.at(0, 0, r, c);
            const float prob =
                static_cast<float>(1.0 / (1.0 + std::exp(static_cast<double>(neg) - pos)));

            const float bw = resp.reg.at(0, 0, r, c) + resp.reg.at(0, 2, r, c);
            const float bh = resp.reg.at(0, 1, r, c) + resp.reg.at(0, 3, r, c);
            const float sz = size_with_pad(bw, bh);
            const float s_c = std::max(sz / prev_sz, prev_sz / sz);
            const float ratio = bw / bh;
            const float r_c = std::max(ratio / prev_ratio, prev_ratio / ratio);
            const float penalty = std::exp(-(r_c * s_c - 1.0f) * post.penalty_k);

            const float window = hann(r, s) * hann(c, s);
            const float score =
                prob * penalty * (1.0f - post.window_weight) + window * post.window_weight;
            if (score > best_score) {
                best_score = score;
                best_r = r;
                best_c = c;
            }
        }
    }

    const float px = grid.point_x(best_c);
    const float py = grid.point_y(best_r);
    const float l = resp.reg.at(0, 0, best_r, best_c), t = resp.reg.at(0, 1, best_r, best_c);
    const float rr = resp.reg.at(0, 2, best_r, best_c), b = resp.reg.at(0, 3, best_r, best_c);

    BoundingBox decoded;
    decoded.cx = px + 0.5f * (rr - l);
    decoded.cy = py + 0.5f * (b - t);
    decoded.w = l + rr;
    decoded.h = t + b;

    DecodedBox out;
    out.box.cx = decoded.cx;
    out.box.cy = decoded.cy;
    out.box.w = post.size_lr * decoded.w + (1.0f - post.size_lr) * prev.w;
    out.box.h = post.size_lr * decoded.h + (1.0f - post.size_lr) * prev.h;
    out.row = best_r;
    out.col = best_c;

    const double pos = resp.cls_pos.at(0, 0, best_r, best_c);
    const double neg = resp.cls_neg.at(0, 0, best_r, best_c);
    double prob = 1.0 / (1.0 + std::exp(neg - pos));
    prob = std::min(1.0 - 1e-6, std::max(1e-6, prob));  // keep the float strictly inside (0,1)
    out.confidence = static_cast<float>(prob);
    return out;
}

}  // namespace taat
