#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "taat/errors.hpp"
#include "taat/oracles.hpp"
#include "taat/siamese.hpp"

using namespace taat;

namespace {

BackboneParams make_backbone(Rng& rng, int d = 64) {
    BackboneParams b;
    b.convs.push_back(init_conv_block(16, 3, 3, Act::relu, 0.0f, rng));
    b.convs.push_back(init_conv_block(32, 16, 3, Act::relu, 0.0f, rng));
    b.convs.push_back(init_conv_block(64, 32, 3, Act::relu, 0.0f, rng));
    b.convs.push_back(init_conv_block(64, 64, 3, Act::relu, 0.0f, rng));
    b.neck = init_conv_block(d, 64, 1, Act::none, 0.0f, rng);
    return b;
}

HeadParams make_head(Rng& rng, int d = 16, int stride = 8) {
    HeadParams h;
    h.cls_template = init_conv_block(d, d, 3, Act::relu, 0.0f, rng);
    h.cls_search = init_conv_block(d, d, 3, Act::relu, 0.0f, rng);
    h.reg_template = init_conv_block(d, d, 3, Act::relu, 0.0f, rng);
    h.reg_search = init_conv_block(d, d, 3, Act::relu, 0.0f, rng);
    h.cls_out_kernel = oracle::rand_tensor(2, d, 1, 1, rng, -0.2, 0.2);
    h.cls_out_bias = {0.0f, 0.0f};
    h.reg_out_kernel = oracle::rand_tensor(4, d, 1, 1, rng, -0.2, 0.2);
    h.reg_out_bias = {0.0f, 0.0f, 0.0f, 0.0f};
    h.stride = stride;
    return h;
}

ResponseMaps delta_response(int s, int peak_r, int peak_c, float l, float t, float r, float b,
                            int stride = 8) {
    ResponseMaps m;
    m.cls_pos = Tensor(1, 1, s, s, 0.0f);
    m.cls_neg = Tensor(1, 1, s, s, 0.0f);
    m.cls_pos.at(0, 0, peak_r, peak_c) = 25.0f;
    m.reg = Tensor(1, 4, s, s, static_cast<float>(stride));
    m.reg.at(0, 0, peak_r, peak_c) = l;
    m.reg.at(0, 1, peak_r, peak_c) = t;
    m.reg.at(0, 2, peak_r, peak_c) = r;
    m.reg.at(0, 3, peak_r, peak_c) = b;
    return m;
}

}  // namespace

TEST_CASE("extract_features stride arithmetic and determinism") {
    Rng rng(30);
    BackboneParams b = make_backbone(rng);

    Tensor img = oracle::rand_tensor(1, 3, 96, 96, rng, 0.0, 1.0);
    Tensor f1 = extract_features(img, b);
    CHECK(f1.c == 64);
    CHECK(f1.h == 12);
    CHECK(f1.w == 12);

    Tensor f2 = extract_features(img, b);
    CHECK(f1.v == f2.v);

    Tensor zero(1, 3, 96, 96);
    Tensor fz = extract_features(zero, b);
    for (float v : fz.v) CHECK(v == 0.0f);

    Tensor odd(1, 3, 90, 96);
    CHECK_THROWS_AS(extract_features(odd, b), ShapeError);
}

TEST_CASE("head_forward grid size, reg positivity and zeroed convs") {
    Rng rng(31);
    const int d = 16;
    HeadParams h = make_head(rng, d);
    Tensor templ = oracle::rand_tensor(1, d, 12, 12, rng);
    Tensor search = oracle::rand_tensor(1, d, 24, 24, rng);

    ResponseMaps maps = head_forward(templ, search, h);
    CHECK(maps.size() == 13);
    CHECK(maps.reg.c == 4);
    for (float v : maps.reg.v) CHECK(v > 0.0f);

    HeadParams zeroed = h;
    for (float& v : zeroed.cls_out_kernel.v) v = 0.0f;
    for (float& v : zeroed.reg_out_kernel.v) v = 0.0f;
    ResponseMaps zmaps = head_forward(templ, search, zeroed);
    for (float v : zmaps.cls_pos.v) CHECK(v == 0.0f);
    for (float v : zmaps.cls_neg.v) CHECK(v == 0.0f);
    for (float v : zmaps.reg.v) CHECK(v == 8.0f);
}

TEST_CASE("assign_labels ellipse rules") {
    const GridGeometry grid = GridGeometry::centered(13, 8, 192);
    BoundingBox gt{96.0f, 96.0f, 32.0f, 32.0f};
    // a grid point lands exactly on the box center
    CHECK(grid.point_x(6) == 96.0f);

    LabelMaps labels = assign_labels(gt, grid);
    CHECK(labels.cls_label.at(0, 0, 6, 6) == 1.0f);
    CHECK(labels.reg_target.at(0, 0, 6, 6) == doctest::Approx(16.0f));
    CHECK(labels.reg_target.at(0, 1, 6, 6) == doctest::Approx(16.0f));
    CHECK(labels.reg_target.at(0, 2, 6, 6) == doctest::Approx(16.0f));
    CHECK(labels.reg_target.at(0, 3, 6, 6) == doctest::Approx(16.0f));

    // far corner is well outside E1
    CHECK(labels.cls_label.at(0, 0, 0, 0) == -1.0f);

    // counts match brute-force ellipse membership
    int pos = 0, ignore = 0;
    for (float v : labels.cls_label.v) {
        pos += v > 0.0f;
        ignore += v == 0.0f;
    }
    const int in_e2 = oracle::count_inside_ellipse(gt, grid, 8.0f, 8.0f);
    const int in_e1 = oracle::count_inside_ellipse(gt, grid, 16.0f, 16.0f);
    CHECK(pos == in_e2);
    CHECK(ignore == in_e1 - in_e2);

    // positives sit inside E1 and have strictly positive reg targets
    Rng rng(32);
    for (int trial = 0; trial < 25; ++trial) {
        BoundingBox g;
        g.cx = static_cast<float>(rng.uniform(40.0, 150.0));
        g.cy = static_cast<float>(rng.uniform(40.0, 150.0));
        g.w = static_cast<float>(rng.uniform(16.0, 64.0));
        g.h = static_cast<float>(rng.uniform(16.0, 64.0));
        LabelMaps lm = assign_labels(g, grid);
        for (int r = 0; r < 13; ++r)
            for (int c = 0; c < 13; ++c) {
                if (lm.cls_label.at(0, 0, r, c) <= 0.0f) continue;
                const double dx = grid.point_x(c) - g.cx, dy = grid.point_y(r) - g.cy;
                CHECK(dx * dx / (0.25 * g.w * g.w) + dy * dy / (0.25 * g.h * g.h) <= 1.0 + 1e-6);
                for (int ch = 0; ch < 4; ++ch) CHECK(lm.reg_target.at(0, ch, r, c) > 0.0f);
            }
    }

    BoundingBox outside{500.0f, 500.0f, 20.0f, 20.0f};
    CHECK_THROWS_AS(assign_labels(outside, grid), LabelError);
}

TEST_CASE("cls_loss limits and oracle") {
    const GridGeometry grid = GridGeometry::centered(13, 8, 192);
    const BoundingBox gt{96.0f, 96.0f, 40.0f, 40.0f};
    LabelMaps labels = assign_labels(gt, grid);

    // near-perfect logits drive the loss toward zero
    ResponseMaps sharp;
    sharp.cls_pos = Tensor(1, 1, 13, 13);
    sharp.cls_neg = Tensor(1, 1, 13, 13);
    sharp.reg = Tensor(1, 4, 13, 13, 8.0f);
    for (std::size_t i = 0; i < labels.cls_label.v.size(); ++i) {
        const float lab = labels.cls_label.v[i];
        sharp.cls_pos.v[i] = lab > 0.0f ? 30.0f : -30.0f;
        sharp.cls_neg.v[i] = lab > 0.0f ? -30.0f : 30.0f;
    }
    CHECK(cls_loss(sharp, labels) < 1e-6f);

    // uniform logits give ln 2
    ResponseMaps flat = sharp;
    for (float& v : flat.cls_pos.v) v = 0.7f;
    for (float& v : flat.cls_neg.v) v = 0.7f;
    CHECK(cls_loss(flat, labels) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    // random logits against an independent scalar loop
    Rng rng(33);
    ResponseMaps rnd = sharp;
    rnd.cls_pos = oracle::rand_tensor(1, 1, 13, 13, rng, -2.0, 2.0);
    rnd.cls_neg = oracle::rand_tensor(1, 1, 13, 13, rng, -2.0, 2.0);
    double want = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < labels.cls_label.v.size(); ++i) {
        const float lab = labels.cls_label.v[i];
        if (lab == 0.0f) continue;
        const double ep = std::exp(rnd.cls_pos.v[i]);
        const double en = std::exp(rnd.cls_neg.v[i]);
        const double p = lab > 0.0f ? ep / (ep + en) : en / (ep + en);
        want += -std::log(p);
        ++n;
    }
    want /= n;
    CHECK(cls_loss(rnd, labels) == doctest::Approx(want).epsilon(1e-5));

    LabelMaps ignored = labels;
    for (float& v : ignored.cls_label.v) v = 0.0f;
    CHECK_THROWS_AS(cls_loss(rnd, ignored), LossError);
}

TEST_CASE("iou_loss boundary values and oracle") {
    const GridGeometry grid = GridGeometry::centered(13, 8, 192);
    const BoundingBox gt{96.0f, 96.0f, 40.0f, 40.0f};
    LabelMaps labels = assign_labels(gt, grid);

    ResponseMaps exact;
    exact.cls_pos = Tensor(1, 1, 13, 13);
    exact.cls_neg = Tensor(1, 1, 13, 13);
    exact.reg = labels.reg_target;
    CHECK(iou_loss(exact, labels) == doctest::Approx(0.0).epsilon(1e-9));

    // halved offsets give a concentric box with a quarter of the area
    ResponseMaps halved = exact;
    for (float& v : halved.reg.v) v *= 0.5f;
    CHECK(iou_loss(halved, labels) == doctest::Approx(0.75).epsilon(1e-6));

    Rng rng(34);
    ResponseMaps rnd = exact;
    rnd.reg = oracle::rand_tensor(1, 4, 13, 13, rng, 1.0, 30.0);
    double want = 0.0;
    int n = 0;
    for (int r = 0; r < 13; ++r)
        for (int c = 0; c < 13; ++c) {
            if (labels.cls_label.at(0, 0, r, c) <= 0.0f) continue;
            const float px = grid.point_x(c), py = grid.point_y(r);
            BoundingBox pred;
            pred.cx = px + 0.5f * (rnd.reg.at(0, 2, r, c) - rnd.reg.at(0, 0, r, c));
            pred.cy = py + 0.5f * (rnd.reg.at(0, 3, r, c) - rnd.reg.at(0, 1, r, c));
            pred.w = rnd.reg.at(0, 0, r, c) + rnd.reg.at(0, 2, r, c);
            pred.h = rnd.reg.at(0, 1, r, c) + rnd.reg.at(0, 3, r, c);
            want += 1.0 - oracle::iou_closed_form(pred, gt);
            ++n;
        }
    want /= n;
    CHECK(iou_loss(rnd, labels) == doctest::Approx(want).epsilon(1e-6));
    CHECK(iou_loss(rnd, labels) >= 0.0f);
    CHECK(iou_loss(rnd, labels) <= 1.0f);
}

TEST_CASE("decode_box peak selection and smoothing") {
    const GridGeometry grid = GridGeometry::centered(13, 8, 192);
    const BoundingBox prev{96.0f, 96.0f, 30.0f, 30.0f};

    PostProcessConfig raw;
    raw.window_weight = 0.0f;
    raw.size_lr = 1.0f;
    raw.penalty_k = 0.0f;

    ResponseMaps peak = delta_response(13, 4, 9, 10.0f, 12.0f, 14.0f, 8.0f);
    const DecodedBox d = decode_box(peak, grid, raw, prev);
    CHECK(d.row == 4);
    CHECK(d.col == 9);
    const float px = grid.point_x(9), py = grid.point_y(4);
    CHECK(d.box.cx == doctest::Approx(px + 0.5f * (14.0f - 10.0f)));
    CHECK(d.box.cy == doctest::Approx(py + 0.5f * (8.0f - 12.0f)));
    CHECK(d.box.w == doctest::Approx(24.0f));
    CHECK(d.box.h == doctest::Approx(20.0f));
    CHECK(d.confidence > 0.0f);
    CHECK(d.confidence < 1.0f);

    // full window weight with uniform scores picks the center cell
    PostProcessConfig windowed = raw;
    windowed.window_weight = 1.0f;
    ResponseMaps uniform = delta_response(13, 0, 0, 8.0f, 8.0f, 8.0f, 8.0f);
    for (float& v : uniform.cls_pos.v) v = 0.0f;
    const DecodedBox dc = decode_box(uniform, grid, windowed, prev);
    CHECK(dc.row == 6);
    CHECK(dc.col == 6);

    // softmax shift invariance
    Rng rng(35);
    ResponseMaps m;
    m.cls_pos = oracle::rand_tensor(1, 1, 13, 13, rng, -2.0, 2.0);
    m.cls_neg = oracle::rand_tensor(1, 1, 13, 13, rng, -2.0, 2.0);
    m.reg = oracle::rand_tensor(1, 4, 13, 13, rng, 2.0, 30.0);
    PostProcessConfig post;  // defaults
    const DecodedBox base = decode_box(m, grid, post, prev);
    ResponseMaps shifted = m;
    for (float& v : shifted.cls_pos.v) v += 3.25f;
    for (float& v : shifted.cls_neg.v) v += 3.25f;
    const DecodedBox moved = decode_box(shifted, grid, post, prev);
    CHECK(moved.row == base.row);
    CHECK(moved.col == base.col);

    // size smoothing mixes decoded and previous sizes
    PostProcessConfig smooth = raw;
    smooth.size_lr = 0.25f;
    const DecodedBox ds = decode_box(peak, grid, smooth, prev);
    CHECK(ds.box.w == doctest::Approx(0.25f * 24.0f + 0.75f * 30.0f));
    CHECK(ds.box.h == doctest::Approx(0.25f * 20.0f + 0.75f * 30.0f));
}

TEST_CASE("decode_box against a brute-force argmax oracle") {
    Rng rng(36);
    const GridGeometry grid = GridGeometry::centered(9, 8, 128);
    const BoundingBox prev{64.0f, 64.0f, 24.0f, 24.0f};
    PostProcessConfig raw;
    raw.window_weight = 0.0f;
    raw.size_lr = 1.0f;
    raw.penalty_k = 0.0f;

    for (int trial = 0; trial < 50; ++trial) {
        ResponseMaps m;
        m.cls_pos = oracle::rand_tensor(1, 1, 9, 9, rng, -3.0, 3.0);
        m.cls_neg = oracle::rand_tensor(1, 1, 9, 9, rng, -3.0, 3.0);
        m.reg = oracle::rand_tensor(1, 4, 9, 9, rng, 1.0, 40.0);

        int br = 0, bc = 0;
        double best = -1.0;
        for (int r = 0; r < 9; ++r)
            for (int c = 0; c < 9; ++c) {
                const double ep = std::exp(static_cast<double>(m.cls_pos.at(0, 0, r, c)));
                const double en = std::exp(static_cast<double>(m.cls_neg.at(0, 0, r, c)));
                const double p = ep / (ep + en);
                if (p > best) {
                    best = p;
                    br = r;
                    bc = c;
                }
            }
        const DecodedBox d = decode_box(m, grid, raw, prev);
        REQUIRE(d.row == br);
        REQUIRE(d.col == bc);
        const float l = m.reg.at(0, 0, br, bc), t = m.reg.at(0, 1, br, bc);
        const float rr = m.reg.at(0, 2, br, bc), b = m.reg.at(0, 3, br, bc);
        REQUIRE(d.box.w == doctest::Approx(l + rr));
        REQUIRE(d.box.h == doctest::Approx(t + b));
        REQUIRE(d.box.cx == doctest::Approx(grid.point_x(bc) + 0.5f * (rr - l)));
        REQUIRE(d.box.cy == doctest::Approx(grid.point_y(br) + 0.5f * (b - t)));
    }
}
