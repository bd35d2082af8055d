#include "taat/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include "taat/errors.hpp"

namespace taat {

namespace {

// The backbone is shared across modalities; single-plane TIR frames are
// replicated to three channels.
Tensor to_backbone_input(const Tensor& img) {
    if (img.c == 3) return img;
    if (img.c != 1) throw ShapeError("expected 1- or 3-channel image, got " + img.shape_str());
    Tensor out(img.n, 3, img.h, img.w);
    const std::size_t plane = static_cast<std::size_t>(img.h) * img.w;
    for (int ic = 0; ic < 3; ++ic)
        std::copy_n(img.v.begin(), plane, out.v.begin() + static_cast<std::ptrdiff_t>(ic) * plane);
    return out;
}

float template_crop_side(const BoundingBox& box, float context_factor) {
    const float pad = context_factor * (box.w + box.h);
    return std::sqrt((box.w + pad) * (box.h + pad));
}

}  // namespace

CropGeom search_crop_geom(const BoundingBox& prev, const TrackConfig& config) {
    CropGeom g;
    g.cx = prev.cx;
    g.cy = prev.cy;
    g.side = 4.0f * std::max(prev.w, prev.h);
    g.side = std::max(g.side, 16.0f);
    g.scale = static_cast<float>(config.search_size) / g.side;
    return g;
}

Tensor crop_resize(const Tensor& image, float cx, float cy, float size, int out_size) {
    if (out_size < 2) throw ParameterError("crop_resize out_size must be >= 2");
    if (!(size > 0.0f)) throw ParameterError("crop_resize size must be > 0");

    std::vector<float> mean(static_cast<std::size_t>(image.c), 0.0f);
    const int plane = image.h * image.w;
    for (int ic = 0; ic < image.c; ++ic) {
        double acc = 0.0;
        const float* src = &image.v[image.idx(0, ic, 0, 0)];
        for (int i = 0; i < plane; ++i) acc += src[i];
        mean[ic] = static_cast<float>(acc / plane);
    }

    const float x_start = cx - 0.5f * size;
    const float y_start = cy - 0.5f * size;
    const float step = size / static_cast<float>(out_size);

    Tensor out(1, image.c, out_size, out_size);
    for (int ic = 0; ic < image.c; ++ic) {
        auto sample = [&](int x, int y) -> float {
            if (x < 0 || x >= image.w || y < 0 || y >= image.h) return mean[ic];
            return image.at(0, ic, y, x);
        };
        for (int r = 0; r < out_size; ++r) {
            const float sy = y_start + (static_cast<float>(r) + 0.5f) * step - 0.5f;
            const int y0 = static_cast<int>(std::floor(sy));
            const float ty = sy - static_cast<float>(y0);
            for (int c = 0; c < out_size; ++c) {
                const float sx = x_start + (static_cast<float>(c) + 0.5f) * step - 0.5f;
                const int x0 = static_cast<int>(std::floor(sx));
                const float tx = sx - static_cast<float>(x0);
                const float v00 = sample(x0, y0), v10 = sample(x0 + 1, y0);
                const float v01 = sample(x0, y0 + 1), v11 = sample(x0 + 1, y0 + 1);
                const float top = v00 + (v10 - v00) * tx;
                const float bot = v01 + (v11 - v01) * tx;
                out.at(0, ic, r, c) = top + (bot - top) * ty;
            }
        }
    }
    return out;
}

BoundingBox box_to_crop(const BoundingBox& box, const CropGeom& crop, int out_size) {
    BoundingBox b;
    const float half = 0.5f * static_cast<float>(out_size);
    b.cx = (box.cx - crop.cx) * crop.scale + half;
    b.cy = (box.cy - crop.cy) * crop.scale + half;
    b.w = box.w * crop.scale;
    b.h = box.h * crop.scale;
    return b;
}

BoundingBox box_from_crop(const BoundingBox& box, const CropGeom& crop, int out_size) {
    BoundingBox b;
    const float half = 0.5f * static_cast<float>(out_size);
    b.cx = (box.cx - half) / crop.scale + crop.cx;
    b.cy = (box.cy - half) / crop.scale + crop.cy;
    b.w = box.w / crop.scale;
    b.h = box.h / crop.scale;
    return b;
}

TrackerState tracker_init(const Tensor& frame_rgb, const Tensor& frame_tir,
                          const BoundingBox& gt, const TrackModel& model,
                          const TrackConfig& config) {
    config.validate();
    if (!gt.valid()) throw InitError("initial box has non-positive size");
    if (gt.cx < 0.0f || gt.cy < 0.0f || gt.cx >= static_cast<float>(frame_rgb.w) ||
        gt.cy >= static_cast<float>(frame_rgb.h))
        throw InitError("initial box center lies outside the image");
    if (frame_rgb.h != frame_tir.h || frame_rgb.w != frame_tir.w)
        throw InitError("RGB and TIR frames differ in size");

    TrackerState state;
    state.config = config;
    state.prev_box = gt;

    const float tside = template_crop_side(gt, config.context_factor);
    const Tensor tmpl_rgb =
        crop_resize(frame_rgb, gt.cx, gt.cy, tside, config.template_size);
    const Tensor tmpl_tir =
        crop_resize(frame_tir, gt.cx, gt.cy, tside, config.template_size);
    state.template_feat_rgb = extract_features(to_backbone_input(tmpl_rgb), model.backbone);
    state.template_feat_tir = extract_features(to_backbone_input(tmpl_tir), model.backbone);

    const CropGeom crop = search_crop_geom(gt, config);
    const Tensor search_rgb =
        crop_resize(frame_rgb, crop.cx, crop.cy, crop.side, config.search_size);
    const Tensor search_tir =
        crop_resize(frame_tir, crop.cx, crop.cy, crop.side, config.search_size);
    state.prev_rgb = {extract_features(to_backbone_input(search_rgb), model.backbone), 0};
    state.prev_tir = {extract_features(to_backbone_input(search_tir), model.backbone), 0};
    return state;
}

StepForward forward_maps(const TrackerState& state, const TrackModel& model,
                         const Tensor& frame_rgb, const Tensor& frame_tir) {
    const TrackConfig& cfg = state.config;
    StepForward fwd;
    fwd.crop = search_crop_geom(state.prev_box, cfg);

    const bool want_rgb = cfg.modality != Modality::tir;
    const bool want_tir = cfg.modality != Modality::rgb;
    const bool need_tiam = cfg.use_tiam && model.tiam.has_value();

    auto run_modality = [&](const Tensor& frame, const Tensor& template_feat,
                            const FrameFeatures& prev, FrameFeatures& cur_out,
                            std::optional<ResponseMaps>& maps_out) {
        const Tensor patch =
            crop_resize(frame, fwd.crop.cx, fwd.crop.cy, fwd.crop.side, cfg.search_size);
        cur_out.raw = extract_features(to_backbone_input(patch), model.backbone);
        cur_out.frame_index = prev.frame_index + 1;
        const Tensor* search_feat = &cur_out.raw;
        Tensor enhanced;
        if (need_tiam) {
            enhanced = tiam_forward(cur_out, prev, *model.tiam);
            search_feat = &enhanced;
        }
        maps_out = head_forward(template_feat, *search_feat, model.head);
    };

    if (want_rgb)
        run_modality(frame_rgb, state.template_feat_rgb, state.prev_rgb, fwd.cur_rgb, fwd.rgb);
    if (want_tir)
        run_modality(frame_tir, state.template_feat_tir, state.prev_tir, fwd.cur_tir, fwd.tir);

    const ResponseMaps& any = want_rgb ? *fwd.rgb : *fwd.tir;
    fwd.grid = GridGeometry::centered(any.size(), cfg.stride, cfg.search_size);
    return fwd;
}

ResponseMaps fused_maps(const StepForward& fwd, const TrackerState& state,
                        const TrackModel& model) {
    const TrackConfig& cfg = state.config;
    if (cfg.modality == Modality::rgb) return *fwd.rgb;
    if (cfg.modality == Modality::tir) return *fwd.tir;

    FusedResponse fused;
    if (cfg.fusion == FusionMode::dfm) {
        if (!model.dfm) throw ConfigError("DFM fusion requested but model has no DFM weights");
        fused = fuse(*fwd.rgb, *fwd.tir, *model.dfm);
    } else {
        fused = fuse_average(*fwd.rgb, *fwd.tir);
    }
    ResponseMaps maps;
    maps.cls_pos = fused.cls_pos_fused;
    maps.cls_neg = fused.cls_neg_fused;
    maps.reg = fused.reg_fused;
    return maps;
}

TrackOutput tracker_step(TrackerState& state, const TrackModel& model, const Tensor& frame_rgb,
                         const Tensor& frame_tir) {
    StepForward fwd = forward_maps(state, model, frame_rgb, frame_tir);
    const ResponseMaps maps = fused_maps(fwd, state, model);

    const BoundingBox prev_in_crop =
        box_to_crop(state.prev_box, fwd.crop, state.config.search_size);
    const DecodedBox decoded = decode_box(maps, fwd.grid, state.config.post, prev_in_crop);
    BoundingBox box = box_from_crop(decoded.box, fwd.crop, state.config.search_size);

    // keep the box inside the frame with a sane size
    const float img_w = static_cast<float>(frame_rgb.w), img_h = static_cast<float>(frame_rgb.h);
    box.w = std::clamp(box.w, 4.0f, img_w);
    box.h = std::clamp(box.h, 4.0f, img_h);
    box.cx = std::clamp(box.cx, 0.0f, img_w - 1.0f);
    box.cy = std::clamp(box.cy, 0.0f, img_h - 1.0f);

    state.prev_rgb = std::move(fwd.cur_rgb);
    state.prev_tir = std::move(fwd.cur_tir);
    state.prev_box = box;

    return {box, decoded.confidence};
}

std::vector<DfmSample> harvest_dfm_samples(const TrackModel& model, const TrackConfig& config,
                                           const HarvestFrames& frames) {
    if (!frames.rgb || !frames.tir || !frames.gt)
        throw ParameterError("harvest_dfm_samples: missing frame streams");
    const auto& rgb = *frames.rgb;
    const auto& tir = *frames.tir;
    const auto& gt = *frames.gt;
    if (rgb.size() != tir.size() || rgb.size() != gt.size() || rgb.size() < 2)
        throw ParameterError("harvest_dfm_samples: inconsistent stream lengths");
    if (config.modality != Modality::rgbt)
        throw ConfigError("harvest requires the rgbt modality");

    TrackerState state = tracker_init(rgb[0], tir[0], gt[0], model, config);
    std::vector<DfmSample> samples;
    for (std::size_t t = 1; t < rgb.size(); ++t) {
        state.prev_box = gt[t - 1];  // teacher forcing
        StepForward fwd = forward_maps(state, model, rgb[t], tir[t]);

        const BoundingBox gt_in_crop = box_to_crop(gt[t], fwd.crop, config.search_size);
        const float img = static_cast<float>(config.search_size);
        const bool overlaps = gt_in_crop.x1() > 0.0f && gt_in_crop.y1() > 0.0f &&
                              gt_in_crop.x0() < img && gt_in_crop.y0() < img;
        if (overlaps) {
            LabelMaps labels = assign_labels(gt_in_crop, fwd.grid);
            bool has_pos = false;
            for (float l : labels.cls_label.v) has_pos |= l > 0.0f;
            if (has_pos) {
                DfmSample s;
                s.rgb = std::move(*fwd.rgb);
                s.tir = std::move(*fwd.tir);
                s.labels = std::move(labels);
                samples.push_back(std::move(s));
            }
        }
        state.prev_rgb = std::move(fwd.cur_rgb);
        state.prev_tir = std::move(fwd.cur_tir);
    }
    return samples;
}

}  // namespace taat
