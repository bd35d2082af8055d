#include "taat/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace taat {

namespace {

std::string shape4(int n, int c, int h, int w) {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
}

}  // namespace

Tensor::Tensor(int n_, int c_, int h_, int w_, float fill) : n(n_), c(c_),h(h_), w(w_) {
    if (n < 0 || c < 0 || h < 0 || w < 0)
        throw ShapeError("negative tensor dimension " + shape4(n_, c_, h_, w_));
    v.assign(static_cast<std::size_t>(numel()), fill);
}

std::string Tensor::shape_str() const { return shape4(n, c, h, w); }

Tensor conv2d(const Tensor& input, const Tensor& kernel, const std::vector<float>& bias,
              int stride, int padding) {
    if (kernel.c != input.c)
        throw ShapeError("conv2d channel mismatch: input " + input.shape_str() + " vs kernel " +
                         kernel.shape_str());
    if (static_cast<int>(bias.size()) != kernel.n)
        throw ShapeError("conv2d bias length " + std::to_string(bias.size()) +
                         " does not match kernel Cout " + std::to_string(kernel.n));
    if (stride < 1) throw ParameterError("conv2d stride must be >= 1");
    if (padding < 0) throw ParameterError("conv2d padding must be >= 0");

    const int oh = (input.h + 2 * padding - kernel.h) / stride + 1;
    const int ow = (input.w + 2 * padding - kernel.w) / stride + 1;
    if (oh <= 0 || ow <= 0)
        throw ShapeError("conv2d output would be empty: input " + input.shape_str() +
                         ", kernel " + kernel.shape_str());

    Tensor out(input.n, kernel.n, oh, ow);
    for (int in = 0; in < input.n; ++in) {
        for (int co = 0; co < kernel.n; ++co) {
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    float acc = bias[co];
                    const int iy0 = y * stride - padding;
                    const int ix0 = x * stride - padding;
                    for (int ci = 0; ci < input.c; ++ci) {
                        for (int ky = 0; ky < kernel.h; ++ky) {
                            const int iy = iy0 + ky;
                            if (iy < 0 || iy >= input.h) continue;
                            const float* irow = &input.v[input.idx(in, ci, iy, 0)];
                            const float* krow = &kernel.v[kernel.idx(co, ci, ky, 0)];
                            for (int kx = 0; kx < kernel.w; ++kx) {
                                const int ix = ix0 + kx;
                                if (ix < 0 || ix >= input.w) continue;
                                acc += irow[ix] * krow[kx];
                            }
                        }
                    }
                    out.at(in, co, y, x) = acc;
                }
            }
        }
    }
    return out;
}

Tensor batchnorm_inference(const Tensor& input, const std::vector<float>& mean,
                           const std::vector<float>& var, const std::vector<float>& gamma,
                           const std::vector<float>& beta, float eps) {
    const auto c = static_cast<std::size_t>(input.c);
    if (mean.size() != c || var.size() != c || gamma.size() != c || beta.size() != c)
        throw ShapeError("batchnorm parameter vectors must have length C=" + std::to_string(c));
    if (!(eps > 0.0f)) throw ParameterError("batchnorm eps must be > 0");
    for (float vv : var)
        if (vv < 0.0f) throw ParameterError("batchnorm variance entry is negative");

    Tensor out(input.n, input.c, input.h, input.w);
    const int plane = input.h * input.w;
    for (int in = 0; in < input.n; ++in) {
        for (int ic = 0; ic < input.c; ++ic) {
            const float inv = 1.0f / std::sqrt(var[ic] + eps);
            const float g = gamma[ic], m = mean[ic], b = beta[ic];
            const float* src = &input.v[input.idx(in, ic, 0, 0)];
            float* dst = &out.v[out.idx(in, ic, 0, 0)];
            for (int i = 0; i < plane; ++i) dst[i] = g * (src[i] - m) * inv + b;
        }
    }
    return out;
}

Tensor activation(const Tensor& input, Act kind, float slope) {
    if (kind == Act::leaky_relu && (slope < 0.0f || slope > 1.0f))
        throw ParameterError("leaky_relu slope must be in [0,1], got " + std::to_string(slope));

    Tensor out = input;
    switch (kind) {
        case Act::none:
            break;
        case Act::relu:
            for (float& x : out.v) x = x > 0.0f ? x : 0.0f;
            break;
        case Act::leaky_relu:
            for (float& x : out.v) x = x > 0.0f ? x : slope * x;
            break;
        case Act::sigmoid:
            for (float& x : out.v) x = 1.0f / (1.0f + std::exp(-x));
            break;
    }
    return out;
}

Tensor global_pool(const Tensor& input, PoolMode mode) {
    if (input.h * input.w < 1)
        throw ShapeError("global_pool on empty spatial extent " + input.shape_str());
    Tensor out(input.n, input.c, 1, 1);
    const int plane = input.h * input.w;
    for (int in = 0; in < input.n; ++in) {
        for (int ic = 0; ic < input.c; ++ic) {
            const float* src = &input.v[input.idx(in, ic, 0, 0)];
            if (mode == PoolMode::max) {
                float m = src[0];
                for (int i = 1; i < plane; ++i) m = std::max(m, src[i]);
                out.at(in, ic, 0, 0) = m;
            } else {
                float s = 0.0f;
                for (int i = 0; i < plane; ++i) s += src[i];
                out.at(in, ic, 0, 0) = s / static_cast<float>(plane);
            }
        }
    }
    return out;
}

Tensor elementwise(const Tensor& a, const Tensor& b, EwOp op) {
    if (!a.same_shape(b))
        throw ShapeError("elementwise shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = a;
    switch (op) {
        case EwOp::add:
            for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
            break;
        case EwOp::sub:
            for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.v[i];
            break;
        case EwOp::mul:
            for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
            break;
    }
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.n != b.n || a.h != b.h || a.w != b.w)
        throw ShapeError("concat_channels spatial mismatch: " + a.shape_str() + " vs " +
                         b.shape_str());
    Tensor out(a.n, a.c + b.c, a.h, a.w);
    const std::size_t plane = static_cast<std::size_t>(a.h) * a.w;
    for (int in = 0; in < a.n; ++in) {
        for (int ic = 0; ic < a.c; ++ic)
            std::copy_n(&a.v[a.idx(in, ic, 0, 0)], plane, &out.v[out.idx(in, ic, 0, 0)]);
        for (int ic = 0; ic < b.c; ++ic)
            std::copy_n(&b.v[b.idx(in, ic, 0, 0)], plane, &out.v[out.idx(in, a.c + ic, 0, 0)]);
    }
    return out;
}

Tensor standardize_spatial(const Tensor& input, float eps) {
    if (!(eps > 0.0f)) throw ParameterError("standardize_spatial eps must be > 0");
    if (input.h * input.w < 1)
        throw ShapeError("standardize_spatial on empty spatial extent " + input.shape_str());
    Tensor out(input.n, input.c, input.h, input.w);
    const int plane = input.h * input.w;
    for (int in = 0; in < input.n; ++in) {
        for (int ic = 0; ic < input.c; ++ic) {
            const float* src = &input.v[input.idx(in, ic, 0, 0)];
            float* dst = &out.v[out.idx(in, ic, 0, 0)];
            // moments in double so a constant plane maps to exact zeros
            double mean = 0.0;
            for (int i = 0; i < plane; ++i) mean += src[i];
            mean /= plane;
            double var = 0.0;
            for (int i = 0; i < plane; ++i) {
                const double d = src[i] - mean;
                var += d * d;
            }
            var /= plane;
            const float m = static_cast<float>(mean);
            const float inv = static_cast<float>(1.0 / (std::sqrt(var) + eps));
            for (int i = 0; i < plane; ++i) dst[i] = (src[i] - m) * inv;
        }
    }
    return out;
}

Tensor xcorr_depthwise(const Tensor& search_feat, const Tensor& template_feat) {
    if (search_feat.c != template_feat.c)
        throw ShapeError("xcorr_depthwise channel mismatch: " + search_feat.shape_str() + " vs " +
                         template_feat.shape_str());
    if (template_feat.h > search_feat.h || template_feat.w > search_feat.w)
        throw ShapeError("xcorr_depthwise template " + template_feat.shape_str() +
                         " larger than search " + search_feat.shape_str());

    const int oh = search_feat.h - template_feat.h + 1;
    const int ow = search_feat.w - template_feat.w + 1;
    Tensor out(search_feat.n, search_feat.c, oh, ow);
    for (int in = 0; in < search_feat.n; ++in) {
        for (int ic = 0; ic < search_feat.c; ++ic) {
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < template_feat.h; ++ky) {
                        const float* srow = &search_feat.v[search_feat.idx(in, ic, y + ky, x)];
                        const float* trow = &template_feat.v[template_feat.idx(0, ic, ky, 0)];
                        for (int kx = 0; kx < template_feat.w; ++kx) acc += srow[kx] * trow[kx];
                    }
                    out.at(in, ic, y, x) = acc;
                }
            }
        }
    }
    return out;
}

Matrix flat_similarity(const Tensor& q, const Tensor& k) {
    if (q.n != 1 || k.n != 1) throw ShapeError("flat_similarity requires batch size 1");
    if (!q.same_shape(k))
        throw ShapeError("flat_similarity shape mismatch: " + q.shape_str() + " vs " +
                         k.shape_str());
    const int hw = q.h * q.w;
    Matrix out(hw, hw);
    for (int i = 0; i < hw; ++i) {
        for (int j = 0; j < hw; ++j) {
            float acc = 0.0f;
            for (int ic = 0; ic < q.c; ++ic)
                acc += q.v[static_cast<std::size_t>(ic) * hw + i] *
                       k.v[static_cast<std::size_t>(ic) * hw + j];
            out.at(i, j) = acc;
        }
    }
    return out;
}

}  // namespace taat
