#pragma once

#include <cstdint>
#include <optional>

#include "taat/blocks.hpp"
#include "taat/config.hpp"
#include "taat/dfm.hpp"
#include "taat/siamese.hpp"
#include "taat/tiam.hpp"

namespace taat {

// One weight set shared by the RGB and TIR streams.
struct TrackModel {
    BackboneParams backbone;
    HeadParams head;
    std::optional<TiamParams> tiam;
    std::optional<DfmParams> dfm;
};

// Full deterministic initialization. The temporal and fusion groups are
// emitted according to the config so every stored name is consumed on load.
ModelWeights init_model_weights(const TrackConfig& config, std::uint64_t seed);

// Builds the model from whichever groups the file carries; the runtime
// config decides which paths execute. Missing required groups and leftover
// names both fail.
TrackModel model_from_weights(const ModelWeights& weights, const TrackConfig& config);

void put_model(ModelWeights& w, const TrackModel& model);

}  // namespace taat
