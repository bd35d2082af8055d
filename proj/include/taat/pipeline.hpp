#pragma once

#include <optional>
#include <vector>

#include "taat/config.hpp"
#include "taat/dfm.hpp"
#include "taat/model.hpp"
#include "taat/siamese.hpp"
#include "taat/tiam.hpp"

namespace taat {

// Per-sequence mutable state. Template features never change after init;
// prev features always hold frame t-1 when frame t is processed.
struct TrackerState {
    Tensor template_feat_rgb, template_feat_tir;
    FrameFeatures prev_rgb, prev_tir;
    BoundingBox prev_box;
    TrackConfig config;
};

// Axis-aligned square crop in image space and its resize factor.
struct CropGeom {
    float cx = 0.0f, cy = 0.0f;
    float side = 0.0f;
    float scale = 1.0f;  // out pixels per image pixel
};

CropGeom search_crop_geom(const BoundingBox& prev, const TrackConfig& config);

// Square crop centered at (cx, cy) with side `size`, mean-padded outside the
// image, bilinearly resized to out_size x out_size.
Tensor crop_resize(const Tensor& image, float cx, float cy, float size, int out_size);

BoundingBox box_to_crop(const BoundingBox& box, const CropGeom& crop, int out_size);
BoundingBox box_from_crop(const BoundingBox& box, const CropGeom& crop, int out_size);

TrackerState tracker_init(const Tensor& frame_rgb, const Tensor& frame_tir,
                          const BoundingBox& gt, const TrackModel& model,
                          const TrackConfig& config);

// Dual-stream forward up to the per-modality response maps. Feature caching
// is left to the caller via the returned current features.
struct StepForward {
    std::optional<ResponseMaps> rgb, tir;
    GridGeometry grid;
    CropGeom crop;
    FrameFeatures cur_rgb, cur_tir;
};

StepForward forward_maps(const TrackerState& state, const TrackModel& model,
                         const Tensor& frame_rgb, const Tensor& frame_tir);

// Response maps after the configured fusion (single-modality passthrough,
// averaging, or DFM).
ResponseMaps fused_maps(const StepForward& fwd, const TrackerState& state,
                        const TrackModel& model);

struct TrackOutput {
    BoundingBox box;
    float confidence = 0.0f;
};

TrackOutput tracker_step(TrackerState& state, const TrackModel& model, const Tensor& frame_rgb,
                         const Tensor& frame_tir);

// Teacher-forced response-map harvesting for fusion training: crops follow
// the groundtruth trajectory and labels come from the current frame's box.
struct HarvestFrames {
    const std::vector<Tensor>* rgb = nullptr;
    const std::vector<Tensor>* tir = nullptr;
    const std::vector<BoundingBox>* gt = nullptr;
};

std::vector<DfmSample> harvest_dfm_samples(const TrackModel& model, const TrackConfig& config,
                                           const HarvestFrames& frames);

}  // namespace taat
