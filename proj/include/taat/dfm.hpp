#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "taat/blocks.hpp"
#include "taat/rng.hpp"
#include "taat/siamese.hpp"
#include "taat/tensor.hpp"

namespace taat {

// Plain conv (no batch norm) used throughout the fusion module.
struct ConvParam {
    Tensor kernel;  // [Cout,Cin,3,3]
    std::vector<float> bias;
};

enum class DfmOrientation { tir_to_rgb, rgb_to_tir, both };

// Widths "1-w1-w2(wt)-1": assist branch 1->w1->w2, primary transition
// 1->wt->w2 (single conv 1->w2 when wt == 0), final conv w2->1.
struct WidthConfig {
    int w1 = 32;
    int w2 = 16;
    int wt = 8;
};

WidthConfig parse_width_config(const std::string& text);
std::string width_config_str(const WidthConfig& w);

// One mutual-guided sub-block ("Tir->Rgb": primary = RGB, assist = TIR).
struct MutualGuideParams {
    ConvParam guide;   // primary -> w1 gating map
    ConvParam lower1;  // assist -> w1
    ConvParam lower2;  // w1 -> w2, after gating + skip
    ConvParam trans1;  // primary -> wt (or -> w2 when wt == 0)
    ConvParam trans2;  // wt -> w2, absent when wt == 0
    ConvParam fuse;    // w2 -> 1, feeds standardization + sigmoid
};

struct DfmParams {
    WidthConfig widths;
    DfmOrientation orientation = DfmOrientation::tir_to_rgb;
    float lambda = 0.1f;  // LeakyReLU slope
    float std_eps = 1e-6f;
    MutualGuideParams tar;  // Tir->Rgb
    MutualGuideParams rat;  // Rgb->Tir, populated when the orientation needs it

    void validate() const;
};

struct FusedResponse {
    Tensor cls_pos_fused;
    Tensor cls_neg_fused;
    Tensor reg_fused;
    Tensor weight_map;  // effective RGB weight, strictly in (0,1)
};

// Mixed-branch output of the guided block, before the final conv.
Tensor mutual_guide(const Tensor& primary_map, const Tensor& assist_map,
                    const MutualGuideParams& params, float lambda);

// W = sigmoid(standardize(conv(mutual_guide(primary, assist)))).
Tensor fusion_weight(const Tensor& primary_map, const Tensor& assist_map,
                     const MutualGuideParams& params, float lambda, float std_eps);

// a*w + b*(1-w) with the single-channel weight broadcast over channels.
Tensor weighted_fusion(const Tensor& a, const Tensor& b, const Tensor& w);

// Decision-level fusion of per-modality response maps: positive maps form
// the learned convex combination, negative maps are averaged, regression
// maps reuse the weight broadcast over the four channels.
FusedResponse fuse(const ResponseMaps& rgb, const ResponseMaps& tir, const DfmParams& params);

// Plain averaging fallback (the "w/o DFM" configuration).
FusedResponse fuse_average(const ResponseMaps& rgb, const ResponseMaps& tir);

// ---------------------------------------------------------------------------
// Training

struct DfmSample {
    ResponseMaps rgb;
    ResponseMaps tir;
    LabelMaps labels;
};

// Gradient of a conv parameter, same layout as the parameter itself.
using DfmGradients = std::map<std::string, ConvParam>;

struct DfmParamRef {
    std::string name;
    ConvParam* param;
};

// Conv blocks active under the configured orientation, in a fixed order.
std::vector<DfmParamRef> dfm_active_convs(DfmParams& params);

struct DfmLossAndGrads {
    double loss = 0.0;
    double loss_positive = 0.0;
    double loss_negative = 0.0;
    DfmGradients grads;
};

// Mean classification loss of the fused maps over the batch plus analytic
// gradients w.r.t. every active DFM parameter.
DfmLossAndGrads dfm_gradients(const std::vector<DfmSample>& batch, const DfmParams& params);

double dfm_batch_loss(const std::vector<DfmSample>& batch, const DfmParams& params);

struct SgdSchedule {
    int epochs = 20;
    int warmup_epochs = 5;
    double lr_start = 1e-3;
    double lr_peak = 5e-3;
    double lr_final = 5e-5;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 8;
    std::uint64_t seed = 0;
};

double learning_rate_at(const SgdSchedule& schedule, int epoch);

struct EpochLoss {
    int epoch = 0;
    double lr = 0.0;
    double total = 0.0;
    double positive = 0.0;
    double negative = 0.0;
};

struct DfmTrainResult {
    DfmParams params;
    std::vector<EpochLoss> log;
};

DfmTrainResult train_dfm(const std::vector<DfmSample>& dataset, const SgdSchedule& schedule,
                         const DfmParams& init);

// ---------------------------------------------------------------------------
// Synthetic map sets for fusion training and verification.

enum class ReliableModality { rgb, tir, mixed };

std::vector<DfmSample> make_synthetic_dfm_dataset(int count, int grid_size, int stride,
                                                  ReliableModality mode, std::uint64_t seed);

// Mean weight given to the stated modality at positive label positions.
double mean_weight_on_modality(const DfmParams& params, const std::vector<DfmSample>& samples,
                               bool rgb_side);

DfmParams init_dfm(const WidthConfig& widths, DfmOrientation orientation, float lambda,
                   std::uint64_t seed);

void put_dfm(ModelWeights& w, const std::string& prefix, const DfmParams& p);
DfmParams take_dfm(WeightReader& r, const std::string& prefix, const WidthConfig& widths,
                   DfmOrientation orientation, float lambda, float std_eps);

}  // namespace taat
