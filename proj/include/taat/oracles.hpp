#pragma once

// Naive reference implementations used by the test suites and the CLI
// selftest. Everything here is written as directly as possible (padded
// copies, scalar loops) and never calls the library's fast paths.

#include <vector>

#include "taat/dfm.hpp"
#include "taat/rng.hpp"
#include "taat/siamese.hpp"
#include "taat/tensor.hpp"

namespace taat::oracle {

Tensor rand_tensor(int n, int c, int h, int w, Rng& rng, double lo = -1.0, double hi = 1.0);
std::vector<float> rand_vector(int len, Rng& rng, double lo = -1.0, double hi = 1.0);

Tensor conv2d(const Tensor& input, const Tensor& kernel, const std::vector<float>& bias,
              int stride, int padding);
Tensor batchnorm(const Tensor& input, const std::vector<float>& mean,
                 const std::vector<float>& var, const std::vector<float>& gamma,
                 const std::vector<float>& beta, float eps);
Tensor relu(const Tensor& input);
Tensor global_pool_max(const Tensor& input);
Tensor global_pool_avg(const Tensor& input);
Tensor xcorr_depthwise(const Tensor& search, const Tensor& templ);
Matrix flat_similarity(const Tensor& q, const Tensor& k);

// Largest relative difference |a-b| / max(|a|, |b|, floor).
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-3);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Overlap of two boxes by counting subpixel raster cells.
double iou_rasterized(const BoundingBox& a, const BoundingBox& b, double cell = 1.0);
double iou_closed_form(const BoundingBox& a, const BoundingBox& b);

// Brute-force count of grid points inside the ellipse with the given
// semi-axes around the box center.
int count_inside_ellipse(const BoundingBox& gt, const GridGeometry& grid, float ax, float ay);

double precision_bruteforce(const std::vector<BoundingBox>& results,
                            const std::vector<BoundingBox>& gt, double tau);
double success_rate_bruteforce(const std::vector<BoundingBox>& results,
                               const std::vector<BoundingBox>& gt, double tau);

// Independent double-precision forward of the fusion module's training
// loss, written from the formulas. Low-noise target for central finite
// differences against the float32 analytic gradients.
double dfm_loss_f64(const std::vector<DfmSample>& batch, const DfmParams& params);

}  // namespace taat::oracle
