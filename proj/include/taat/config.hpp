#pragma once

#include <string>

#include "taat/dfm.hpp"
#include "taat/siamese.hpp"
#include "taat/tensor.hpp"
#include "taat/tiam.hpp"

namespace taat {

enum class Modality { rgb, tir, rgbt };
enum class FusionMode { average, dfm };

// Every ablation axis lives here; parsed from a key = value config file.
struct TrackConfig {
    int template_size = 96;
    int search_size = 192;
    int stride = 8;
    int feature_dim = 64;
    float context_factor = 0.5f;

    Modality modality = Modality::rgbt;
    FusionMode fusion = FusionMode::dfm;
    bool use_tiam = true;

    PoolMode attention_pooling = PoolMode::max;  // SENet-max vs plain SENet
    int attention_reduction = 4;
    TiamFlags tiam_flags;

    DfmOrientation dfm_orientation = DfmOrientation::tir_to_rgb;
    float dfm_lambda = 0.1f;
    std::string dfm_widths = "1-32-16(8)-1";
    float std_eps = 1e-6f;

    PostProcessConfig post;

    void validate() const;
};

TrackConfig parse_track_config_text(const std::string& text);
TrackConfig parse_track_config(const std::string& path);
std::string track_config_str(const TrackConfig& c);

std::string modality_str(Modality m);
Modality parse_modality(const std::string& s);

}  // namespace taat
