#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "taat/errors.hpp"
#include "taat/oracles.hpp"
#include "taat/rng.hpp"
#include "taat/tensor.hpp"

using namespace taat;

namespace {

bool all_finite(const Tensor& t) {
    return std::all_of(t.v.begin(), t.v.end(), [](float x) { return std::isfinite(x); });
}

}  // namespace

TEST_CASE("conv2d identity and constant cases") {
    Rng rng(1);
    Tensor x = oracle::rand_tensor(1, 3, 4, 4, rng);

    // 1x1 kernel = channel identity
    Tensor ident(3, 3, 1, 1);
    for (int c = 0; c < 3; ++c) ident.at(c, c, 0, 0) = 1.0f;
    Tensor y = conv2d(x, ident, {0.0f, 0.0f, 0.0f}, 1, 0);
    CHECK(y.same_shape(x));
    CHECK(oracle::max_abs_diff(y, x) == 0.0);

    // all-zero kernel, bias b -> constant per channel
    Tensor zero(2, 3, 3, 3);
    Tensor z = conv2d(x, zero, {1.5f, -2.0f}, 1, 1);
    for (int r = 0; r < z.h; ++r)
        for (int c = 0; c < z.w; ++c) {
            CHECK(z.at(0, 0, r, c) == 1.5f);
            CHECK(z.at(0, 1, r, c) == -2.0f);
        }
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    Rng rng(2);
    Tensor x = oracle::rand_tensor(1, 3, 5, 5, rng);
    Tensor k = oracle::rand_tensor(2, 3, 3, 3, rng);
    auto bias = oracle::rand_vector(2, rng);
    for (int stride : {1, 2})
        for (int pad : {0, 1, 2}) {
            Tensor got = conv2d(x, k, bias, stride, pad);
            Tensor want = oracle::conv2d(x, k, bias, stride, pad);
            CHECK(got.same_shape(want));
            CHECK(oracle::max_rel_diff(got, want) < 1e-5);
            CHECK(all_finite(got));
        }
}

TEST_CASE("conv2d oracle equivalence over random shapes") {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const int cin = static_cast<int>(rng.uniform_int(1, 4));
        const int cout = static_cast<int>(rng.uniform_int(1, 4));
        const int k = static_cast<int>(rng.uniform_int(1, 3));
        const int h = static_cast<int>(rng.uniform_int(k, 7));
        const int w = static_cast<int>(rng.uniform_int(k, 7));
        const int stride = static_cast<int>(rng.uniform_int(1, 2));
        const int pad = static_cast<int>(rng.uniform_int(0, 1));
        Tensor x = oracle::rand_tensor(1, cin, h, w, rng);
        Tensor ker = oracle::rand_tensor(cout, cin, k, k, rng);
        auto bias = oracle::rand_vector(cout, rng);
        Tensor got = conv2d(x, ker, bias, stride, pad);
        Tensor want = oracle::conv2d(x, ker, bias, stride, pad);
        REQUIRE(oracle::max_rel_diff(got, want) < 1e-5);
    }
}

TEST_CASE("conv2d is linear in its input") {
    Rng rng(4);
    Tensor x = oracle::rand_tensor(1, 2, 6, 6, rng);
    Tensor y = oracle::rand_tensor(1, 2, 6, 6, rng);
    Tensor k = oracle::rand_tensor(3, 2, 3, 3, rng);
    const std::vector<float> bias(3, 0.0f);
    const float a = 0.7f, b = -1.3f;

    Tensor mix = elementwise(x, y, EwOp::add);  // build a*x + b*y
    for (std::size_t i = 0; i < mix.v.size(); ++i) mix.v[i] = a * x.v[i] + b * y.v[i];
    Tensor lhs = conv2d(mix, k, bias, 1, 1);
    Tensor cx = conv2d(x, k, bias, 1, 1);
    Tensor cy = conv2d(y, k, bias, 1, 1);
    for (std::size_t i = 0; i < lhs.v.size(); ++i) {
        const float rhs = a * cx.v[i] + b * cy.v[i];
        CHECK(std::abs(lhs.v[i] - rhs) < 1e-4f);
    }
}

TEST_CASE("conv2d shape errors carry both shapes") {
    Tensor x(1, 3, 4, 4);
    Tensor k(2, 2, 3, 3);
    try {
        conv2d(x, k, {0.0f, 0.0f}, 1, 0);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(1,3,4,4)") != std::string::npos);
        CHECK(msg.find("(2,2,3,3)") != std::string::npos);
    }
}

TEST_CASE("batchnorm identity, constant and oracle cases") {
    Rng rng(5);
    Tensor x = oracle::rand_tensor(1, 3, 4, 5, rng);
    const float eps = 1e-5f;

    std::vector<float> zeros(3, 0.0f), ones(3, 1.0f);
    std::vector<float> var_ident(3, 1.0f - eps);
    Tensor ident = batchnorm_inference(x, zeros, var_ident, ones, zeros, eps);
    CHECK(oracle::max_abs_diff(ident, x) < 1e-7);

    std::vector<float> beta = {0.5f, -1.0f, 2.0f};
    Tensor flat = batchnorm_inference(x, zeros, ones, zeros, beta, eps);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < x.h * x.w; ++i)
            CHECK(flat.v[flat.idx(0, c, 0, 0) + static_cast<std::size_t>(i)] == beta[static_cast<std::size_t>(c)]);

    auto mean = oracle::rand_vector(3, rng);
    auto var = oracle::rand_vector(3, rng, 0.1, 2.0);
    auto gamma = oracle::rand_vector(3, rng);
    auto beta2 = oracle::rand_vector(3, rng);
    Tensor got = batchnorm_inference(x, mean, var, gamma, beta2, eps);
    Tensor want = oracle::batchnorm(x, mean, var, gamma, beta2, eps);
    CHECK(oracle::max_rel_diff(got, want, 1e-4) < 1e-6);

    var[1] = -0.5f;
    CHECK_THROWS_AS(batchnorm_inference(x, mean, var, gamma, beta2, eps), ParameterError);
}

TEST_CASE("activation elementwise values") {
    Tensor x(1, 1, 1, 3);
    x.v = {-2.0f, 0.0f, 3.0f};
    Tensor r = activation(x, Act::relu);
    CHECK(r.v[0] == 0.0f);
    CHECK(r.v[2] == 3.0f);

    Tensor l = activation(x, Act::leaky_relu, 0.1f);
    CHECK(l.v[0] == doctest::Approx(-0.2f));
    CHECK(l.v[2] == 3.0f);

    Tensor s = activation(x, Act::sigmoid);
    CHECK(s.v[1] == doctest::Approx(0.5f));

    CHECK_THROWS_AS(activation(x, Act::leaky_relu, 1.5f), ParameterError);
    CHECK_THROWS_AS(activation(x, Act::leaky_relu, -0.1f), ParameterError);
}

TEST_CASE("leaky_relu with zero slope bit-equals relu") {
    Rng rng(6);
    Tensor x = oracle::rand_tensor(2, 3, 5, 5, rng, -2.0, 2.0);
    Tensor a = activation(x, Act::relu);
    Tensor b = activation(x, Act::leaky_relu, 0.0f);
    CHECK(a.v == b.v);
}

TEST_CASE("global_pool modes and invariances") {
    Tensor t(1, 1, 2, 2);
    t.v = {1.0f, 2.0f, 3.0f, 4.0f};
    CHECK(global_pool(t, PoolMode::max).v[0] == 4.0f);
    CHECK(global_pool(t, PoolMode::avg).v[0] == doctest::Approx(2.5f));

    Tensor c(1, 2, 3, 3, 7.5f);
    CHECK(global_pool(c, PoolMode::max).v[1] == 7.5f);
    CHECK(global_pool(c, PoolMode::avg).v[1] == 7.5f);

    Rng rng(7);
    Tensor x = oracle::rand_tensor(2, 4, 5, 3, rng);
    CHECK(oracle::max_abs_diff(global_pool(x, PoolMode::max), oracle::global_pool_max(x)) == 0.0);
    CHECK(oracle::max_abs_diff(global_pool(x, PoolMode::avg), oracle::global_pool_avg(x)) < 1e-6);

    // max pooling is invariant under spatial permutation
    Tensor shuffled = x;
    for (int n = 0; n < x.n; ++n)
        for (int ch = 0; ch < x.c; ++ch) {
            std::vector<float> plane(static_cast<std::size_t>(x.h) * x.w);
            std::copy_n(&x.v[x.idx(n, ch, 0, 0)], plane.size(), plane.begin());
            rng.shuffle(plane);
            std::copy_n(plane.begin(), plane.size(), &shuffled.v[shuffled.idx(n, ch, 0, 0)]);
        }
    CHECK(global_pool(x, PoolMode::max).v == global_pool(shuffled, PoolMode::max).v);

    Tensor empty(1, 1, 0, 3);
    CHECK_THROWS_AS(global_pool(empty, PoolMode::max), ShapeError);
}

TEST_CASE("elementwise ops") {
    Rng rng(8);
    Tensor a = oracle::rand_tensor(1, 2, 4, 4, rng);
    Tensor b = oracle::rand_tensor(1, 2, 4, 4, rng);

    Tensor zero = elementwise(a, a, EwOp::sub);
    for (float x : zero.v) CHECK(x == 0.0f);

    Tensor z(1, 2, 4, 4);
    CHECK(elementwise(a, z, EwOp::add).v == a.v);

    Tensor prod = elementwise(a, b, EwOp::mul);
    for (std::size_t i = 0; i < prod.v.size(); ++i) CHECK(prod.v[i] == a.v[i] * b.v[i]);

    Tensor small(1, 2, 4, 3);
    CHECK_THROWS_AS(elementwise(a, small, EwOp::add), ShapeError);
}

TEST_CASE("concat_channels layout") {
    Rng rng(9);
    Tensor a = oracle::rand_tensor(1, 2, 4, 4, rng);
    Tensor b = oracle::rand_tensor(1, 3, 4, 4, rng);

    Tensor dup = concat_channels(a, a);
    for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 16; ++i)
            CHECK(dup.v[dup.idx(0, c, 0, 0) + static_cast<std::size_t>(i)] ==
                  dup.v[dup.idx(0, c + 2, 0, 0) + static_cast<std::size_t>(i)]);

    Tensor cat = concat_channels(a, b);
    CHECK(cat.c == 5);
    for (int c = 0; c < 5; ++c)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x) {
                const float want = c < 2 ? a.at(0, c, y, x) : b.at(0, c - 2, y, x);
                CHECK(cat.at(0, c, y, x) == want);
            }

    Tensor bad(1, 3, 5, 4);
    CHECK_THROWS_AS(concat_channels(a, bad), ShapeError);
}

TEST_CASE("standardize_spatial moments and idempotence") {
    Tensor flat(1, 2, 3, 3, 4.2f);
    Tensor z = standardize_spatial(flat);
    for (float x : z.v) CHECK(x == 0.0f);

    Rng rng(10);
    Tensor x = oracle::rand_tensor(2, 3, 6, 5, rng, -3.0, 3.0);
    Tensor s = standardize_spatial(x);
    const int plane = s.h * s.w;
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c) {
            double mean = 0.0;
            for (int i = 0; i < plane; ++i) mean += s.v[s.idx(n, c, 0, 0) + static_cast<std::size_t>(i)];
            mean /= plane;
            double var = 0.0;
            for (int i = 0; i < plane; ++i) {
                const double d = s.v[s.idx(n, c, 0, 0) + static_cast<std::size_t>(i)] - mean;
                var += d * d;
            }
            var /= plane;
            CHECK(std::abs(mean) < 1e-4);
            CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-3);
        }

    Tensor twice = standardize_spatial(s);
    CHECK(oracle::max_abs_diff(twice, s) < 1e-4);
}

TEST_CASE("xcorr_depthwise examples and oracle") {
    Rng rng(11);
    Tensor search = oracle::rand_tensor(1, 3, 6, 6, rng);

    Tensor ones(1, 3, 1, 1, 1.0f);
    Tensor same = xcorr_depthwise(search, ones);
    CHECK(oracle::max_abs_diff(same, search) == 0.0);

    // autocorrelation peak at center
    Tensor templ = oracle::rand_tensor(1, 2, 3, 3, rng);
    Tensor padded(1, 2, 7, 7);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 3; ++y)
            for (int x = 0; x < 3; ++x) padded.at(0, c, y + 2, x + 2) = templ.at(0, c, y, x);
    Tensor corr = xcorr_depthwise(padded, templ);
    for (int c = 0; c < 2; ++c) {
        float best = -1e30f;
        int best_idx = -1;
        for (int i = 0; i < corr.h * corr.w; ++i) {
            const float v = corr.v[corr.idx(0, c, 0, 0) + static_cast<std::size_t>(i)];
            if (v > best) {
                best = v;
                best_idx = i;
            }
        }
        CHECK(best_idx == (corr.h / 2) * corr.w + corr.w / 2);
    }

    Tensor t2 = oracle::rand_tensor(1, 3, 3, 4, rng);
    Tensor got = xcorr_depthwise(search, t2);
    Tensor want = oracle::xcorr_depthwise(search, t2);
    CHECK(oracle::max_rel_diff(got, want) < 1e-5);

    Tensor big(1, 3, 8, 8);
    CHECK_THROWS_AS(xcorr_depthwise(search, big), ShapeError);
}

TEST_CASE("flat_similarity examples and oracle") {
    // orthonormal channel vectors -> identity matrix
    Tensor q(1, 4, 2, 2);
    for (int pos = 0; pos < 4; ++pos) q.v[static_cast<std::size_t>(pos) * 4 + pos] = 1.0f;
    Matrix ident = flat_similarity(q, q);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(ident.at(i, j) == (i == j ? 1.0f : 0.0f));

    Rng rng(12);
    Tensor a = oracle::rand_tensor(1, 3, 3, 4, rng);
    Tensor zero(1, 3, 3, 4);
    Matrix z = flat_similarity(a, zero);
    for (float x : z.v) CHECK(x == 0.0f);

    Tensor b = oracle::rand_tensor(1, 3, 3, 4, rng);
    Matrix got = flat_similarity(a, b);
    Matrix want = oracle::flat_similarity(a, b);
    for (std::size_t i = 0; i < got.v.size(); ++i)
        CHECK(std::abs(got.v[i] - want.v[i]) < 1e-5f);

    Tensor batch2 = oracle::rand_tensor(2, 3, 3, 4, rng);
    CHECK_THROWS_AS(flat_similarity(batch2, batch2), ShapeError);
}

TEST_CASE("remaining ops match oracles over random instances") {
    Rng rng(13);
    for (int trial = 0; trial < 100; ++trial) {
        const int c = static_cast<int>(rng.uniform_int(1, 5));
        const int h = static_cast<int>(rng.uniform_int(1, 6));
        const int w = static_cast<int>(rng.uniform_int(1, 6));
        Tensor x = oracle::rand_tensor(1, c, h, w, rng);

        CHECK(oracle::max_abs_diff(global_pool(x, PoolMode::max), oracle::global_pool_max(x)) ==
              0.0);
        CHECK(oracle::max_rel_diff(global_pool(x, PoolMode::avg), oracle::global_pool_avg(x)) <
              1e-5);

        const int th = static_cast<int>(rng.uniform_int(1, h));
        const int tw = static_cast<int>(rng.uniform_int(1, w));
        Tensor templ = oracle::rand_tensor(1, c, th, tw, rng);
        CHECK(oracle::max_rel_diff(xcorr_depthwise(x, templ),
                                   oracle::xcorr_depthwise(x, templ)) < 1e-5);

        Tensor y = oracle::rand_tensor(1, c, h, w, rng);
        Matrix got = flat_similarity(x, y);
        Matrix want = oracle::flat_similarity(x, y);
        for (std::size_t i = 0; i < got.v.size(); ++i)
            REQUIRE(std::abs(got.v[i] - want.v[i]) < 1e-5f);
    }
}
