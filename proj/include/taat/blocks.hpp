#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "taat/rng.hpp"
#include "taat/tensor.hpp"

namespace taat {

// conv -> batchnorm -> activation
struct ConvBlockParams {
    Tensor kernel;  // [Cout,Cin,kh,kw]
    std::vector<float> bias;
    std::vector<float> bn_mean, bn_var, bn_gamma, bn_beta;
    Act act = Act::none;
    float act_slope = 0.0f;
    float bn_eps = 1e-5f;

    int out_channels() const { return kernel.n; }
    int in_channels() const { return kernel.c; }
};

Tensor conv_block(const Tensor& input, const ConvBlockParams& params, int stride, int padding);

// Squeeze-and-excitation. pooling = max gives the GMP variant, avg the
// original GAP form.
struct AttentionParams {
    Matrix fc1;  // [C/r, C]
    Matrix fc2;  // [C, C/r]
    int reduction = 4;
    PoolMode pooling = PoolMode::max;
};

// sigmoid(fc2 . relu(fc1 . pool(input))), N must be 1.
std::vector<float> channel_attention(const Tensor& input, const AttentionParams& params);

Tensor apply_attention(const Tensor& input, const std::vector<float>& attn);

// Embedded-Gaussian non-local block: 1x1 embeddings, row softmax over the
// similarity matrix, output projection, residual from the raw value tensor.
struct NonLocalParams {
    ConvBlockParams embed_q, embed_k, embed_v, project_out;
};

struct NonLocalTrace {
    Matrix similarity;  // after row softmax
    Tensor aggregated;  // S . flatten(embed_v(value)), before projection
    Tensor output;
};

Tensor non_local(const Tensor& qk, const Tensor& value, const NonLocalParams& params);
NonLocalTrace non_local_traced(const Tensor& qk, const Tensor& value,
                               const NonLocalParams& params);

void softmax_rows_inplace(Matrix& m);

// ---------------------------------------------------------------------------
// Weight storage

// Named weight entry. Stored rank (1..4) is preserved through file round
// trips; vectors are rank 1, FC matrices rank 2, conv kernels rank 4.
struct WeightArray {
    std::vector<std::uint32_t> dims;
    std::vector<float> v;

    std::size_t numel() const;
    static WeightArray from_tensor(const Tensor& t);
    static WeightArray from_matrix(const Matrix& m);
    static WeightArray from_vector(const std::vector<float>& vec);
    Tensor to_tensor() const;  // rank 4 only
    Matrix to_matrix() const;  // rank 2 only
};

using ModelWeights = std::map<std::string, WeightArray>;

// Binary format: magic "TAATW001"; u32 LE entry count; per entry u16 LE name
// length, UTF-8 name, u8 rank, rank x u32 LE dims, then f32 LE values.
void save_weights(const ModelWeights& weights, const std::string& path);
ModelWeights load_weights(const std::string& path);

// Tracks which names a model build consumed so leftovers can be rejected.
class WeightReader {
public:
    explicit WeightReader(const ModelWeights& w) : weights_(w) {}

    Tensor take_tensor(const std::string& name);
    Matrix take_matrix(const std::string& name);
    std::vector<float> take_vector(const std::string& name);
    bool has_prefix(const std::string& prefix) const;

    // Throws if any stored name was never consumed.
    void finish() const;

private:
    const WeightArray& take(const std::string& name, std::size_t rank);
    const ModelWeights& weights_;
    std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// Initialization. Kernels draw from uniform(-s, s) with
// s = sqrt(1 / (Cin*kh*kw)); biases are zero and batch norm starts as the
// identity. Same seed, same bits.

ConvBlockParams init_conv_block(int cout, int cin, int k, Act act, float slope, Rng& rng);
AttentionParams init_attention(int channels, int reduction, PoolMode pooling, Rng& rng);
NonLocalParams init_non_local(int qk_channels, int value_channels, int embed_channels, Rng& rng);

void put_conv_block(ModelWeights& w, const std::string& prefix, const ConvBlockParams& p);
ConvBlockParams take_conv_block(WeightReader& r, const std::string& prefix, Act act, float slope);
void put_attention(ModelWeights& w, const std::string& prefix, const AttentionParams& p);
AttentionParams take_attention(WeightReader& r, const std::string& prefix, PoolMode pooling);
void put_non_local(ModelWeights& w, const std::string& prefix, const NonLocalParams& p);
NonLocalParams take_non_local(WeightReader& r, const std::string& prefix);

}  // namespace taat
