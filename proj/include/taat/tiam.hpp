#pragma once

#include <utility>

#include "taat/blocks.hpp"
#include "taat/rng.hpp"
#include "taat/tensor.hpp"

namespace taat {

// Which of the four investigated activations are enabled. The second one
// is mandatory: without it the salient previous-frame clues (negative in
// the difference) would cancel during the element-wise addition.
struct TiamFlags {
    bool r1 = true;
    bool r2 = true;
    bool r3 = true;
    bool r4 = true;
};

struct TiamParams {
    ConvBlockParams conv2, conv4;  // decoupling transforms, reused across frames
    ConvBlockParams cr1, cr2, cr3;
    AttentionParams attn_cls, attn_reg;
    NonLocalParams nl;
    TiamFlags flags;

    void validate() const;  // rejects disabled R2
};

struct FrameFeatures {
    Tensor raw;  // neck output
    int frame_index = 0;
};

// Channel-attention decoupling into classification/regression clues. The
// attention vectors always come from the current frame and are shared with
// the previous frame's features.
std::pair<Tensor, Tensor> decouple(const FrameFeatures& feat, const FrameFeatures& attn_source,
                                   const TiamParams& params);

// cr2(cr1(x_t) - cr1(x_p)); cr1/cr2 activations follow flags R1/R2.
Tensor diff(const Tensor& x_t, const Tensor& x_p, const TiamParams& params);

// Full temporal aggregation: decoupled differences, fusion with the previous
// frame's classification clue, then non-local enhancement of f(t).
Tensor tiam_forward(const FrameFeatures& cur, const FrameFeatures& prev,
                    const TiamParams& params);

struct TrainingPair {
    int template_idx = 0;
    int search_idx = 0;
    int prev_search_idx = 0;
};

// Uniform over [max(0, search_idx - 5), search_idx - 1].
int sample_prev_index(int search_idx, Rng& rng);

// Picks a template/search pair plus an extra search frame within the five
// frames before the search frame.
TrainingPair sample_training_pair(int sequence_length, Rng& rng);

TiamParams init_tiam(int feature_channels, int reduction, PoolMode pooling,
                     const TiamFlags& flags, Rng& rng);

void put_tiam(ModelWeights& w, const std::string& prefix, const TiamParams& p);
TiamParams take_tiam(WeightReader& r, const std::string& prefix, PoolMode pooling,
                     const TiamFlags& flags);

}  // namespace taat
