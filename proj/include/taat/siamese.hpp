#pragma once

#include <vector>

#include "taat/blocks.hpp"
#include "taat/tensor.hpp"

namespace taat {

// Center-based box in pixels.
struct BoundingBox {
    float cx = 0.0f, cy = 0.0f, w = 0.0f, h = 0.0f;

    float x0() const { return cx - 0.5f * w; }
    float y0() const { return cy - 0.5f * h; }
    float x1() const { return cx + 0.5f * w; }
    float y1() const { return cy + 0.5f * h; }
    bool valid() const { return w > 0.0f && h > 0.0f; }

    static BoundingBox from_corner(float x, float y, float w_, float h_) {
        return {x + 0.5f * w_, y + 0.5f * h_, w_, h_};
    }
};

// Head outputs on a shared S x S grid. reg channels are (left, top, right,
// bottom) offsets in pixels.
struct ResponseMaps {
    Tensor cls_pos;  // [1,1,S,S]
    Tensor cls_neg;  // [1,1,S,S]
    Tensor reg;      // [1,4,S,S]

    int size() const { return cls_pos.h; }
};

// cls_label values: +1 positive, 0 ignore, -1 negative.
struct LabelMaps {
    Tensor cls_label;   // [1,1,S,S]
    Tensor reg_target;  // [1,4,S,S]
};

// Maps response-grid indices to pixel coordinates of the search crop:
// pixel = offset + stride * index.
struct GridGeometry {
    int size = 0;        // S
    int stride = 8;
    float offset = 0.0f;
    int image_size = 0;  // search crop side in pixels

    float point_x(int col) const { return offset + static_cast<float>(stride * col); }
    float point_y(int row) const { return offset + static_cast<float>(stride * row); }

    static GridGeometry centered(int response_size, int stride, int image_size) {
        GridGeometry g;
        g.size = response_size;
        g.stride = stride;
        g.image_size = image_size;
        g.offset = 0.5f * static_cast<float>(image_size - (response_size - 1) * stride);
        return g;
    }
};

// Stride-8 backbone stand-in plus the 1x1 neck.
struct BackboneParams {
    std::vector<ConvBlockParams> convs;  // strides 2,2,2,1
    ConvBlockParams neck;                // 1x1, no activation
};

Tensor extract_features(const Tensor& image, const BackboneParams& params);

// Independent classification / regression branches. The search-side branch
// convs transfer features into each head's space; the same blocks double as
// the temporal module's per-head input transforms.
struct HeadParams {
    ConvBlockParams cls_template, cls_search;
    ConvBlockParams reg_template, reg_search;
    Tensor cls_out_kernel;  // [2,C,1,1] -> (pos, neg)
    std::vector<float> cls_out_bias;
    Tensor reg_out_kernel;  // [4,C,1,1]
    std::vector<float> reg_out_bias;
    int stride = 8;  // reg maps are exp(raw) * stride
};

ResponseMaps head_forward(const Tensor& template_feat, const Tensor& search_feat,
                          const HeadParams& params);

// Ellipse label assignment: positive inside E2 (semi-axes w/4, h/4), ignore
// inside E1 (w/2, h/2) but outside E2, negative elsewhere.
LabelMaps assign_labels(const BoundingBox& gt, const GridGeometry& grid);

float cls_loss(const ResponseMaps& resp, const LabelMaps& labels);

struct ClsLossSplit {
    float total = 0.0f;
    float positive = 0.0f;
    float negative = 0.0f;
    int positive_count = 0;
    int negative_count = 0;
};
ClsLossSplit cls_loss_split(const ResponseMaps& resp, const LabelMaps& labels);

float iou_loss(const ResponseMaps& resp, const LabelMaps& labels);

struct PostProcessConfig {
    float window_weight = 0.3f;  // cosine window mix-in
    float size_lr = 0.3f;        // box size smoothing toward the decoded size
    float penalty_k = 0.04f;     // scale/ratio change penalty
};

struct DecodedBox {
    BoundingBox box;  // in search-crop pixel coordinates
    float confidence = 0.0f;
    int row = 0, col = 0;
};

// prev is the previous box expressed in search-crop coordinates.
DecodedBox decode_box(const ResponseMaps& resp, const GridGeometry& grid,
                      const PostProcessConfig& post, const BoundingBox& prev);

}  // namespace taat
