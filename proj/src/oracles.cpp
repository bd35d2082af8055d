#include "taat/oracles.hpp"

#include <algorithm>
#include <cmath>

namespace taat::oracle {

Tensor rand_tensor(int n, int c, int h, int w, Rng& rng, double lo, double hi) {
    Tensor t(n, c, h, w);
    for (float& x : t.v) x = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

std::vector<float> rand_vector(int len, Rng& rng, double lo, double hi) {
    std::vector<float> v(static_cast<std::size_t>(len));
    for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const std::vector<float>& bias,
              int stride, int padding) {
    // explicit zero-padded copy, then a plain sliding window
    const int ph = input.h + 2 * padding, pw = input.w + 2 * padding;
    Tensor padded(input.n, input.c, ph, pw);
    for (int n = 0; n < input.n; ++n)
        for (int c = 0; c < input.c; ++c)
            for (int y = 0; y < input.h; ++y)
                for (int x = 0; x < input.w; ++x)
                    padded.at(n, c, y + padding, x + padding) = input.at(n, c, y, x);

    const int oh = (ph - kernel.h) / stride + 1;
    const int ow = (pw - kernel.w) / stride + 1;
    Tensor out(input.n, kernel.n, oh, ow);
    for (int n = 0; n < input.n; ++n)
        for (int co = 0; co < kernel.n; ++co)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    float acc = bias[static_cast<std::size_t>(co)];
                    for (int ci = 0; ci < input.c; ++ci)
                        for (int ky = 0; ky < kernel.h; ++ky)
                            for (int kx = 0; kx < kernel.w; ++kx)
                                acc += padded.at(n, ci, y * stride + ky, x * stride + kx) *
                                       kernel.at(co, ci, ky, kx);
                    out.at(n, co, y, x) = acc;
                }
    return out;
}

Tensor batchnorm(const Tensor& input, const std::vector<float>& mean,
                 const std::vector<float>& var, const std::vector<float>& gamma,
                 const std::vector<float>& beta, float eps) {
    Tensor out = input;
    for (int n = 0; n < input.n; ++n)
        for (int c = 0; c < input.c; ++c)
            for (int y = 0; y < input.h; ++y)
                for (int x = 0; x < input.w; ++x) {
                    const std::size_t ci = static_cast<std::size_t>(c);
                    out.at(n, c, y, x) = gamma[ci] * (input.at(n, c, y, x) - mean[ci]) /
                                             std::sqrt(var[ci] + eps) +
                                         beta[ci];
                }
    return out;
}

Tensor relu(const Tensor& input) {
    Tensor out = input;
    for (float& x : out.v)
        if (x < 0.0f) x = 0.0f;
    return out;
}

Tensor global_pool_max(const Tensor& input) {
    Tensor out(input.n, input.c, 1, 1);
    for (int n = 0; n < input.n; ++n)
        for (int c = 0; c < input.c; ++c) {
            float best = input.at(n, c, 0, 0);
            for (int y = 0; y < input.h; ++y)
                for (int x = 0; x < input.w; ++x) best = std::max(best, input.at(n, c, y, x));
            out.at(n, c, 0, 0) = best;
        }
    return out;
}

Tensor global_pool_avg(const Tensor& input) {
    Tensor out(input.n, input.c, 1, 1);
    for (int n = 0; n < input.n; ++n)
        for (int c = 0; c < input.c; ++c) {
            float sum = 0.0f;
            for (int y = 0; y < input.h; ++y)
                for (int x = 0; x < input.w; ++x) sum += input.at(n, c, y, x);
            out.at(n, c, 0, 0) = sum / static_cast<float>(input.h * input.w);
        }
    return out;
}

Tensor xcorr_depthwise(const Tensor& search, const Tensor& templ) {
    const int oh = search.h - templ.h + 1;
    const int ow = search.w - templ.w + 1;
    Tensor out(search.n, search.c, oh, ow);
    for (int n = 0; n < search.n; ++n)
        for (int c = 0; c < search.c; ++c)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < templ.h; ++ky)
                        for (int kx = 0; kx < templ.w; ++kx)
                            acc += search.at(n, c, y + ky, x + kx) * templ.at(0, c, ky, kx);
                    out.at(n, c, y, x) = acc;
                }
    return out;
}

Matrix flat_similarity(const Tensor& q, const Tensor& k) {
    const int hw = q.h * q.w;
    Matrix out(hw, hw);
    for (int i = 0; i < hw; ++i) {
        const int iy = i / q.w, ix = i % q.w;
        for (int j = 0; j < hw; ++j) {
            const int jy = j / k.w, jx = j % k.w;
            float acc = 0.0f;
            for (int c = 0; c < q.c; ++c) acc += q.at(0, c, iy, ix) * k.at(0, c, jy, jx);
            out.at(i, j) = acc;
        }
    }
    return out;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        const double av = a.v[i], bv = b.v[i];
        const double denom = std::max({std::abs(av), std::abs(bv), floor});
        worst = std::max(worst, std::abs(av - bv) / denom);
    }
    return worst;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i)
        worst = std::max(worst, std::abs(static_cast<double>(a.v[i]) - b.v[i]));
    return worst;
}

double iou_rasterized(const BoundingBox& a, const BoundingBox& b, double cell) {
    const double x0 = std::min(a.x0(), b.x0()) - 1.0;
    const double x1 = std::max(a.x1(), b.x1()) + 1.0;
    const double y0 = std::min(a.y0(), b.y0()) - 1.0;
    const double y1 = std::max(a.y1(), b.y1()) + 1.0;
    long long inter = 0, in_a = 0, in_b = 0;
    for (double y = y0 + cell / 2; y < y1; y += cell)
        for (double x = x0 + cell / 2; x < x1; x += cell) {
            const bool ia = x >= a.x0() && x < a.x1() && y >= a.y0() && y < a.y1();
            const bool ib = x >= b.x0() && x < b.x1() && y >= b.y0() && y < b.y1();
            in_a += ia;
            in_b += ib;
            inter += ia && ib;
        }
    const long long uni = in_a + in_b - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

double iou_closed_form(const BoundingBox& a, const BoundingBox& b) {
    const double iw = std::max(0.0, static_cast<double>(std::min(a.x1(), b.x1())) -
                                        std::max(a.x0(), b.x0()));
    const double ih = std::max(0.0, static_cast<double>(std::min(a.y1(), b.y1())) -
                                        std::max(a.y0(), b.y0()));
    const double inter = iw * ih;
    const double uni = static_cast<double>(a.w) * a.h + static_cast<double>(b.w) * b.h - inter;
    return uni > 0 ? inter / uni : 0.0;
}

int count_inside_ellipse(const BoundingBox& gt, const GridGeometry& grid, float ax, float ay) {
    int count = 0;
    for (int r = 0; r < grid.size; ++r)
        for (int c = 0; c < grid.size; ++c) {
            const double dx = grid.point_x(c) - gt.cx;
            const double dy = grid.point_y(r) - gt.cy;
            if (dx * dx / (static_cast<double>(ax) * ax) +
                    dy * dy / (static_cast<double>(ay) * ay) <=
                1.0)
                ++count;
        }
    return count;
}

double precision_bruteforce(const std::vector<BoundingBox>& results,
                            const std::vector<BoundingBox>& gt, double tau) {
    int hits = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const double dx = results[i].cx - gt[i].cx;
        const double dy = results[i].cy - gt[i].cy;
        if (std::hypot(dx, dy) < tau) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

double success_rate_bruteforce(const std::vector<BoundingBox>& results,
                               const std::vector<BoundingBox>& gt, double tau) {
    int hits = 0;
    for (std::size_t i = 0; i < results.size(); ++i)
        if (iou_closed_form(results[i], gt[i]) > tau) ++hits;
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

namespace {

using Plane = std::vector<std::vector<double>>;  // [channel][pixel]

Plane to_plane(const Tensor& t) {
    Plane p(static_cast<std::size_t>(t.c));
    const int hw = t.h * t.w;
    for (int c = 0; c < t.c; ++c) {
        p[static_cast<std::size_t>(c)].resize(static_cast<std::size_t>(hw));
        for (int i = 0; i < hw; ++i)
            p[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)] =
                t.v[t.idx(0, c, 0, 0) + static_cast<std::size_t>(i)];
    }
    return p;
}

Plane conv3x3_f64(const Plane& in, int h, int w, const ConvParam& p, double lambda,
                  bool act) {
    const int cout = p.kernel.n, cin = p.kernel.c;
    Plane out(static_cast<std::size_t>(cout));
    for (int co = 0; co < cout; ++co) {
        out[static_cast<std::size_t>(co)].assign(static_cast<std::size_t>(h) * w, 0.0);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double acc = p.bias[static_cast<std::size_t>(co)];
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = y + ky - 1, ix = x + kx - 1;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += in[static_cast<std::size_t>(ci)]
                                     [static_cast<std::size_t>(iy) * w + ix] *
                                   static_cast<double>(p.kernel.at(co, ci, ky, kx));
                        }
                if (act && acc < 0.0) acc *= lambda;
                out[static_cast<std::size_t>(co)][static_cast<std::size_t>(y) * w + x] = acc;
            }
    }
    return out;
}

std::vector<double> guide_weight_f64(const Plane& primary, const Plane& assist, int h, int w,
                                     const MutualGuideParams& mg, const WidthConfig& widths,
                                     double lambda, double eps) {
    const Plane g = conv3x3_f64(primary, h, w, mg.guide, lambda, true);
    const Plane a = conv3x3_f64(assist, h, w, mg.lower1, lambda, true);
    Plane mixed(a.size());
    for (std::size_t c = 0; c < a.size(); ++c) {
        mixed[c].resize(a[c].size());
        for (std::size_t i = 0; i < a[c].size(); ++i)
            mixed[c][i] = g[c][i] * a[c][i] + a[c][i];
    }
    const Plane m2 = conv3x3_f64(mixed, h, w, mg.lower2, lambda, true);
    Plane p2;
    if (widths.wt > 0) {
        const Plane p1 = conv3x3_f64(primary, h, w, mg.trans1, lambda, true);
        p2 = conv3x3_f64(p1, h, w, mg.trans2, lambda, true);
    } else {
        p2 = conv3x3_f64(primary, h, w, mg.trans1, lambda, true);
    }
    Plane merged(m2.size());
    for (std::size_t c = 0; c < m2.size(); ++c) {
        merged[c].resize(m2[c].size());
        for (std::size_t i = 0; i < m2[c].size(); ++i) merged[c][i] = p2[c][i] + m2[c][i];
    }
    const Plane z = conv3x3_f64(merged, h, w, mg.fuse, lambda, false);

    const std::vector<double>& plane = z[0];
    double mean = 0.0;
    for (double v : plane) mean += v;
    mean /= static_cast<double>(plane.size());
    double var = 0.0;
    for (double v : plane) var += (v - mean) * (v - mean);
    var /= static_cast<double>(plane.size());
    const double s = std::sqrt(var) + eps;

    std::vector<double> wmap(plane.size());
    for (std::size_t i = 0; i < plane.size(); ++i)
        wmap[i] = 1.0 / (1.0 + std::exp(-(plane[i] - mean) / s));
    return wmap;
}

}  // namespace

double dfm_loss_f64(const std::vector<DfmSample>& batch, const DfmParams& params) {
    double total = 0.0;
    for (const DfmSample& sample : batch) {
        const int h = sample.rgb.cls_pos.h, w = sample.rgb.cls_pos.w;
        const Plane rgb = to_plane(sample.rgb.cls_pos);
        const Plane tir = to_plane(sample.tir.cls_pos);

        std::vector<double> weff;
        const bool use_tar = params.orientation != DfmOrientation::rgb_to_tir;
        const bool use_rat = params.orientation != DfmOrientation::tir_to_rgb;
        if (use_tar)
            weff = guide_weight_f64(rgb, tir, h, w, params.tar, params.widths, params.lambda,
                                    params.std_eps);
        if (use_rat) {
            const auto wr = guide_weight_f64(tir, rgb, h, w, params.rat, params.widths,
                                             params.lambda, params.std_eps);
            if (use_tar)
                for (std::size_t i = 0; i < weff.size(); ++i)
                    weff[i] = 0.5 * (weff[i] + (1.0 - wr[i]));
            else {
                weff.resize(wr.size());
                for (std::size_t i = 0; i < wr.size(); ++i) weff[i] = 1.0 - wr[i];
            }
        }

        double sum = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < weff.size(); ++i) {
            const float lab = sample.labels.cls_label.v[i];
            if (lab == 0.0f) continue;
            const double fpos = rgb[0][i] * weff[i] + tir[0][i] * (1.0 - weff[i]);
            const double fneg =
                0.5 * (static_cast<double>(sample.rgb.cls_neg.v[i]) + sample.tir.cls_neg.v[i]);
            const double m = std::max(fpos, fneg);
            const double lse = m + std::log(std::exp(fpos - m) + std::exp(fneg - m));
            sum += lab > 0.0f ? lse - fpos : lse - fneg;
            ++n;
        }
        total += sum / n;
    }
    return total / static_cast<double>(batch.size());
}


}  // namespace taat::oracle
