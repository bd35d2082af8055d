#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "taat/blocks.hpp"
#include "taat/errors.hpp"
#include "taat/oracles.hpp"

using namespace taat;
namespace fs = std::filesystem;

namespace {

ConvBlockParams random_block(int cout, int cin, int k, Act act, Rng& rng) {
    ConvBlockParams p;
    p.kernel = oracle::rand_tensor(cout, cin, k, k, rng, -0.5, 0.5);
    p.bias = oracle::rand_vector(cout, rng, -0.5, 0.5);
    p.bn_mean = oracle::rand_vector(cout, rng, -0.3, 0.3);
    p.bn_var = oracle::rand_vector(cout, rng, 0.5, 1.5);
    p.bn_gamma = oracle::rand_vector(cout, rng, 0.5, 1.5);
    p.bn_beta = oracle::rand_vector(cout, rng, -0.3, 0.3);
    p.act = act;
    return p;
}

fs::path temp_file(const char* name) {
    const fs::path dir = fs::temp_directory_path() / "taat_block_tests";
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("conv_block composes its primitives") {
    Rng rng(20);
    Tensor x = oracle::rand_tensor(1, 3, 6, 6, rng);

    // identity kernel + identity BN + no activation leaves the input alone
    ConvBlockParams ident;
    ident.kernel = Tensor(3, 3, 1, 1);
    for (int c = 0; c < 3; ++c) ident.kernel.at(c, c, 0, 0) = 1.0f;
    ident.bias.assign(3, 0.0f);
    ident.bn_mean.assign(3, 0.0f);
    ident.bn_var.assign(3, 1.0f - ident.bn_eps);
    ident.bn_gamma.assign(3, 1.0f);
    ident.bn_beta.assign(3, 0.0f);
    Tensor same = conv_block(x, ident, 1, 0);
    CHECK(oracle::max_abs_diff(same, x) < 1e-6);

    // relu on an all-negative pre-activation gives zeros
    ConvBlockParams neg = random_block(2, 3, 3, Act::relu, rng);
    neg.bn_gamma.assign(2, 0.0f);
    neg.bn_beta.assign(2, -1.0f);
    Tensor zeros = conv_block(x, neg, 1, 1);
    for (float v : zeros.v) CHECK(v == 0.0f);

    // random parameters match the composed oracle
    ConvBlockParams p = random_block(4, 3, 3, Act::relu, rng);
    Tensor got = conv_block(x, p, 2, 1);
    Tensor want = oracle::relu(oracle::batchnorm(oracle::conv2d(x, p.kernel, p.bias, 2, 1),
                                                 p.bn_mean, p.bn_var, p.bn_gamma, p.bn_beta,
                                                 p.bn_eps));
    CHECK(oracle::max_rel_diff(got, want) < 1e-5);
}

TEST_CASE("channel_attention values and invariances") {
    Rng rng(21);
    const int c = 8;
    Tensor x = oracle::rand_tensor(1, c, 5, 5, rng);

    AttentionParams zero2 = init_attention(c, 4, PoolMode::max, rng);
    zero2.fc2 = Matrix(c, 2, 0.0f);
    for (float v : channel_attention(x, zero2)) CHECK(v == doctest::Approx(0.5f));

    AttentionParams p = init_attention(c, 4, PoolMode::max, rng);
    // GMP attention ignores spatial order
    Tensor shuffled = x;
    for (int ch = 0; ch < c; ++ch) {
        std::vector<float> plane(25);
        std::copy_n(&x.v[x.idx(0, ch, 0, 0)], 25, plane.begin());
        rng.shuffle(plane);
        std::copy_n(plane.begin(), 25, &shuffled.v[shuffled.idx(0, ch, 0, 0)]);
    }
    CHECK(channel_attention(x, p) == channel_attention(shuffled, p));

    // matrix-vector oracle
    const auto attn = channel_attention(x, p);
    const Tensor pooled = oracle::global_pool_max(x);
    std::vector<float> hidden(2, 0.0f);
    for (int i = 0; i < 2; ++i) {
        float acc = 0.0f;
        for (int j = 0; j < c; ++j) acc += p.fc1.at(i, j) * pooled.v[static_cast<std::size_t>(j)];
        hidden[static_cast<std::size_t>(i)] = std::max(0.0f, acc);
    }
    for (int i = 0; i < c; ++i) {
        float acc = 0.0f;
        for (int j = 0; j < 2; ++j) acc += p.fc2.at(i, j) * hidden[static_cast<std::size_t>(j)];
        const float want = 1.0f / (1.0f + std::exp(-acc));
        CHECK(std::abs(attn[static_cast<std::size_t>(i)] - want) < 1e-5f);
    }

    // outputs stay strictly inside (0,1)
    for (int trial = 0; trial < 50; ++trial) {
        Tensor t = oracle::rand_tensor(1, c, 4, 4, rng, -5.0, 5.0);
        AttentionParams q = init_attention(c, 2, trial % 2 ? PoolMode::max : PoolMode::avg, rng);
        for (float v : channel_attention(t, q)) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
    }

    AttentionParams bad = init_attention(c, 4, PoolMode::max, rng);
    bad.reduction = 3;
    CHECK_THROWS_AS(channel_attention(x, bad), ParameterError);
}

TEST_CASE("apply_attention scales channels") {
    Rng rng(22);
    Tensor x = oracle::rand_tensor(1, 3, 4, 4, rng);

    CHECK(apply_attention(x, {1.0f, 1.0f, 1.0f}).v == x.v);
    for (float v : apply_attention(x, {0.0f, 0.0f, 0.0f}).v) CHECK(v == 0.0f);

    const std::vector<float> a = {0.3f, 1.7f, 0.9f};
    Tensor got = apply_attention(x, a);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 16; ++i)
            CHECK(got.v[got.idx(0, c, 0, 0) + static_cast<std::size_t>(i)] ==
                  x.v[x.idx(0, c, 0, 0) + static_cast<std::size_t>(i)] * a[static_cast<std::size_t>(c)]);

    CHECK_THROWS_AS(apply_attention(x, {1.0f, 2.0f}), ShapeError);
}

TEST_CASE("non_local residual, row sums and convexity bound") {
    Rng rng(23);
    const int c = 6;
    Tensor qk = oracle::rand_tensor(1, c, 4, 4, rng);
    Tensor value = oracle::rand_tensor(1, c, 4, 4, rng);

    NonLocalParams zeroed = init_non_local(c, c, 3, rng);
    for (float& v : zeroed.embed_v.kernel.v) v = 0.0f;
    for (float& v : zeroed.project_out.kernel.v) v = 0.0f;
    Tensor out = non_local(qk, value, zeroed);
    CHECK(oracle::max_abs_diff(out, value) == 0.0);

    NonLocalParams p = init_non_local(c, c, 3, rng);
    const NonLocalTrace trace = non_local_traced(qk, value, p);
    for (int i = 0; i < trace.similarity.rows; ++i) {
        double sum = 0.0;
        for (int j = 0; j < trace.similarity.cols; ++j) sum += trace.similarity.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-5);
    }

    // pre-projection rows are convex combinations of embedded value rows
    const Tensor ev = conv_block(value, p.embed_v, 1, 0);
    for (int ch = 0; ch < ev.c; ++ch) {
        float lo = 1e30f, hi = -1e30f;
        for (int i = 0; i < 16; ++i) {
            const float v = ev.v[ev.idx(0, ch, 0, 0) + static_cast<std::size_t>(i)];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        for (int i = 0; i < 16; ++i) {
            const float v = trace.aggregated.v[trace.aggregated.idx(0, ch, 0, 0) +
                                               static_cast<std::size_t>(i)];
            CHECK(v >= lo - 1e-5f);
            CHECK(v <= hi + 1e-5f);
        }
    }

    Tensor small(1, c, 3, 4);
    CHECK_THROWS_AS(non_local(qk, small, p), ShapeError);
}

TEST_CASE("weight files round-trip bit-exactly") {
    Rng rng(24);
    for (int trial = 0; trial < 100; ++trial) {
        ModelWeights w;
        const int entries = static_cast<int>(rng.uniform_int(1, 6));
        for (int e = 0; e < entries; ++e) {
            const std::string name = "block" + std::to_string(trial) + "/w" + std::to_string(e);
            const int rank = static_cast<int>(rng.uniform_int(1, 4));
            WeightArray arr;
            std::size_t numel = 1;
            for (int d = 0; d < rank; ++d) {
                arr.dims.push_back(static_cast<std::uint32_t>(rng.uniform_int(1, 4)));
                numel *= arr.dims.back();
            }
            arr.v = oracle::rand_vector(static_cast<int>(numel), rng, -10.0, 10.0);
            w[name] = arr;
        }
        const auto path = temp_file("roundtrip.taatw");
        save_weights(w, path.string());
        const ModelWeights loaded = load_weights(path.string());
        REQUIRE(loaded.size() == w.size());
        for (const auto& [name, arr] : w) {
            REQUIRE(loaded.count(name) == 1);
            REQUIRE(loaded.at(name).dims == arr.dims);
            REQUIRE(loaded.at(name).v == arr.v);
        }
    }
}

TEST_CASE("weight file format errors") {
    Rng rng(25);
    ModelWeights w;
    w["a/kernel"] = WeightArray::from_vector(oracle::rand_vector(8, rng));
    w["a/bias"] = WeightArray::from_vector(oracle::rand_vector(4, rng));
    const auto path = temp_file("format.taatw");
    save_weights(w, path.string());

    // truncation
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        const auto cut = temp_file("truncated.taatw");
        std::ofstream out(cut, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 7));
        out.close();
        CHECK_THROWS_AS(load_weights(cut.string()), FormatError);
    }

    // bad magic
    {
        const auto bad = temp_file("magic.taatw");
        std::ofstream out(bad, std::ios::binary);
        out << "NOTTAATW\x02\x00\x00\x00";
        out.close();
        try {
            load_weights(bad.string());
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
        }
    }

    // duplicate entry name
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::string dup = bytes;
        dup.append(bytes.begin() + 12, bytes.end());  // replay both entries
        dup[8] = 4;                                   // entry count 4
        const auto dpath = temp_file("dup.taatw");
        std::ofstream out(dpath, std::ios::binary);
        out.write(dup.data(), static_cast<std::streamsize>(dup.size()));
        out.close();
        CHECK_THROWS_AS(load_weights(dpath.string()), FormatError);
    }
}

TEST_CASE("initialization is deterministic and bounded") {
    Rng a(42), b(42), c(43);
    ConvBlockParams pa = init_conv_block(8, 4, 3, Act::relu, 0.0f, a);
    ConvBlockParams pb = init_conv_block(8, 4, 3, Act::relu, 0.0f, b);
    ConvBlockParams pc = init_conv_block(8, 4, 3, Act::relu, 0.0f, c);
    CHECK(pa.kernel.v == pb.kernel.v);
    CHECK(pa.kernel.v != pc.kernel.v);

    const double s = std::sqrt(1.0 / (4.0 * 9.0));
    for (float v : pa.kernel.v) {
        CHECK(v <= s);
        CHECK(v >= -s);
    }
    // batch norm starts as the identity
    for (float v : pa.bn_var) CHECK(v == 1.0f);
    for (float v : pa.bn_gamma) CHECK(v == 1.0f);
    for (float v : pa.bn_mean) CHECK(v == 0.0f);
}

TEST_CASE("weight reader rejects missing and unconsumed names") {
    Rng rng(26);
    ModelWeights w;
    put_conv_block(w, "cb", init_conv_block(2, 2, 3, Act::none, 0.0f, rng));
    w["stray"] = WeightArray::from_vector({1.0f});

    WeightReader r(w);
    take_conv_block(r, "cb", Act::none, 0.0f);
    CHECK_THROWS_AS(r.finish(), FormatError);

    WeightReader r2(w);
    CHECK_THROWS_AS(take_conv_block(r2, "missing", Act::none, 0.0f), FormatError);
}
