#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "taat/errors.hpp"

namespace taat {

// Dense NCHW float32 tensor. Row-major: index = ((n*C + c)*H + h)*W + w.
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> v;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f);

    std::int64_t numel() const { return static_cast<std::int64_t>(n) * c * h * w; }

    std::size_t idx(int in, int ic, int ih, int iw) const {
        return ((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw;
    }
    float& at(int in, int ic, int ih, int iw) { return v[idx(in, ic, ih, iw)]; }
    float at(int in, int ic, int ih, int iw) const { return v[idx(in, ic, ih, iw)]; }

    bool same_shape(const Tensor& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    std::string shape_str() const;
};

// Small dense row-major matrix, used for attention FC layers and
// flattened similarity maps.
struct Matrix {
    int rows = 0, cols = 0;
    std::vector<float> v;

    Matrix() = default;
    Matrix(int r, int c, float fill = 0.0f)
        : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}

    float& at(int r, int c_) { return v[static_cast<std::size_t>(r) * cols + c_]; }
    float at(int r, int c_) const { return v[static_cast<std::size_t>(r) * cols + c_]; }
};

enum class Act { none, relu, leaky_relu, sigmoid };
enum class PoolMode { max, avg };
enum class EwOp { add, sub, mul };

// Cross-correlation (no kernel flip). kernel is [Cout,Cin,kh,kw];
// output spatial dims are floor((H + 2p - k)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const std::vector<float>& bias,
              int stride, int padding);

Tensor batchnorm_inference(const Tensor& input, const std::vector<float>& mean,
                           const std::vector<float>& var, const std::vector<float>& gamma,
                           const std::vector<float>& beta, float eps = 1e-5f);

Tensor activation(const Tensor& input, Act kind, float slope = 0.0f);

// Per-channel spatial max/mean; output is [N,C,1,1].
Tensor global_pool(const Tensor& input, PoolMode mode);

Tensor elementwise(const Tensor& a, const Tensor& b, EwOp op);

// a occupies the lower channel indices of the result.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Per (n,c) plane: subtract the spatial mean and divide by spatial std + eps.
Tensor standardize_spatial(const Tensor& input, float eps = 1e-6f);

// Per-channel valid cross-correlation, template as kernel. Output keeps C.
Tensor xcorr_depthwise(const Tensor& search_feat, const Tensor& template_feat);

// Entry (i,j) is the dot product of the channel vectors at flattened
// spatial positions i (from q) and j (from k). Requires N == 1.
Matrix flat_similarity(const Tensor& q, const Tensor& k);

}  // namespace taat
