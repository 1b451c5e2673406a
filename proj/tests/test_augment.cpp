#include "cellpilot/augment.hpp"
#include "cellpilot/errors.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <functional>
#include <set>

using namespace cellpilot;
using namespace cellpilot::augment;

namespace {

// Reference coordinate maps written out per element.
std::pair<int, int> ref_map(D4 g, int r, int c, int n) {
    const int m = n - 1;
    switch (g) {
    case D4::e: return {r, c};
    case D4::r90: return {c, m - r};  // clockwise
    case D4::r180: return {m - r, m - c};
    case D4::r270: return {m - c, r};
    case D4::fh: return {r, m - c};   // mirror left/right
    case D4::fv: return {m - r, c};   // mirror top/bottom
    case D4::fd: return {c, r};       // main diagonal
    case D4::fa: return {m - c, m - r}; // anti-diagonal
    }
    return {r, c};
}

BinaryMask ref_apply(D4 g, const BinaryMask& in) {
    BinaryMask out(in.height(), in.width());
    for (int r = 0; r < in.height(); ++r)
        for (int c = 0; c < in.width(); ++c) {
            auto [rr, cc] = ref_map(g, r, c, in.height());
            out.set(rr, cc, in(r, c));
        }
    return out;
}

// HSV <-> RGB from the textbook definition, independent of the library.
void ref_hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    const double c = v * s;
    const double hp = std::fmod(h, 360.0) / 60.0;
    const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1) r1 = c, g1 = x;
    else if (hp < 2) r1 = x, g1 = c;
    else if (hp < 3) g1 = c, b1 = x;
    else if (hp < 4) g1 = x, b1 = c;
    else if (hp < 5) r1 = x, b1 = c;
    else r1 = c, b1 = x;
    const double m = v - c;
    r = r1 + m, g = g1 + m, b = b1 + m;
}

void ref_rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b}), d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0;
    if (d == 0) h = 0;
    else if (mx == r) h = 60 * std::fmod((g - b) / d, 6.0);
    else if (mx == g) h = 60 * ((b - r) / d + 2);
    else h = 60 * ((r - g) / d + 4);
    if (h < 0) h += 360;
}

Image random_image(int h, int w, Rng& rng) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(h, w, 3);
    for (auto& v : img.data()) v = u(rng);
    return img;
}

} // namespace

TEST_CASE("d4 elements match the reference coordinate maps") {
    Rng rng(1);
    const auto m = oracle::random_mask(7, 7, 0.4, rng);
    for (D4 g : kD4All) {
        CHECK_MESSAGE(apply_d4(g, m) == ref_apply(g, m), to_string(g));
        for (int r = 0; r < 7; ++r)
            for (int c = 0; c < 7; ++c) CHECK(map_coord(g, r, c, 7) == ref_map(g, r, c, 7));
    }
}

TEST_CASE("d4 identity and four quarter turns") {
    Rng rng(2);
    const auto m = oracle::random_mask(9, 9, 0.5, rng);
    CHECK(apply_d4(D4::e, m) == m);
    auto x = m;
    for (int i = 0; i < 4; ++i) x = apply_d4(D4::r90, x);
    CHECK(x == m);
}

TEST_CASE("point (0,0) under r90") {
    const int n = 10;
    CHECK(map_coord(D4::r90, 0, 0, n) == std::pair{0, n - 1});
    const auto p = std::get<PointPrompt>(apply_d4(D4::r90, Prompt{PointPrompt{0, 0, Polarity::negative}}, n));
    CHECK(p == PointPrompt{0, n - 1, Polarity::negative});
}

TEST_CASE("d4 composition table against explicit composition") {
    Rng rng(3);
    const auto m = oracle::random_mask(6, 6, 0.5, rng);
    int checked = 0;
    for (D4 a : kD4All)
        for (D4 b : kD4All) {
            CHECK(apply_d4(compose(a, b), m) == ref_apply(a, ref_apply(b, m)));
            ++checked;
        }
    CHECK(checked == 64);
}

TEST_CASE("d4 inverse restores") {
    Rng rng(4);
    for (int t = 0; t < 100; ++t) {
        const auto m = oracle::random_mask(8, 8, 0.3, rng);
        for (D4 g : kD4All) {
            CHECK(apply_d4(inverse(g), apply_d4(g, m)) == m);
            CHECK(compose(inverse(g), g) == D4::e);
        }
    }
}

TEST_CASE("d4 boxes follow their masks") {
    Rng rng(5);
    BinaryMask m(12, 12);
    for (int r = 2; r <= 5; ++r)
        for (int c = 3; c <= 9; ++c) m.set(r, c);
    const Prompt box{box_from_mask(m)};
    for (D4 g : kD4All) {
        const auto mapped = std::get<BoxPrompt>(apply_d4(g, box, 12));
        CHECK(mapped == box_from_mask(apply_d4(g, m)));
    }
}

TEST_CASE("d4 sample keeps image, masks and prompts aligned") {
    Rng rng(6);
    Sample s{random_image(8, 8, rng), {oracle::random_mask(8, 8, 0.3, rng)}, {PointPrompt{1, 6, Polarity::positive}}};
    const auto out = apply_d4(D4::fd, s);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c)
            for (int ch = 0; ch < 3; ++ch) CHECK(out.image.at(c, r, ch) == s.image.at(r, c, ch));
    CHECK(out.masks[0] == ref_apply(D4::fd, s.masks[0]));
    CHECK(std::get<PointPrompt>(out.prompts[0]) == PointPrompt{6, 1, Polarity::positive});
}

TEST_CASE("d4 rejects non-square input") {
    CHECK_THROWS_AS(apply_d4(D4::r90, BinaryMask(4, 5)), ShapeError);
}

TEST_CASE("full-window crop is an identity") {
    Rng rng(7);
    Sample s{random_image(32, 32, rng), {oracle::random_mask(32, 32, 0.2, rng)}, {}};
    AugmentationConfig cfg;
    cfg.scale_min = cfg.scale_max = 1.0;
    cfg.aspect_min = cfg.aspect_max = 1.0;
    const auto res = random_resized_crop(s, cfg, rng, 32);
    CHECK(res.window.height == 32);
    CHECK(res.window.width == 32);
    CHECK(res.sample.masks[0] == s.masks[0]);
    for (std::size_t i = 0; i < s.image.data().size(); ++i)
        CHECK(res.sample.image.data()[i] == doctest::Approx(s.image.data()[i]).epsilon(1e-6));
}

TEST_CASE("instances outside the crop are dropped") {
    BinaryMask inside(40, 40), outside(40, 40);
    for (int r = 5; r < 10; ++r)
        for (int c = 5; c < 10; ++c) inside.set(r, c);
    for (int r = 30; r < 35; ++r)
        for (int c = 30; c < 35; ++c) outside.set(r, c);
    Sample s{Image(40, 40, 3), {inside, outside}, {}};
    const auto res = crop_and_resize(s, {0, 0, 20, 20}, 20);
    REQUIRE(res.sample.masks.size() == 1);
    CHECK(res.kept == std::vector<std::size_t>{0});
    CHECK(res.sample.masks[0].area() == 25);
}

TEST_CASE("crop rescales instance extents with the window") {
    Rng rng(8);
    std::uniform_int_distribution<int> pos(0, 63);
    int checked = 0;
    for (int t = 0; t < 200; ++t) {
        int r0 = pos(rng), r1 = pos(rng), c0 = pos(rng), c1 = pos(rng);
        if (r0 > r1) std::swap(r0, r1);
        if (c0 > c1) std::swap(c0, c1);
        BinaryMask m(64, 64);
        for (int r = r0; r <= r1; ++r)
            for (int c = c0; c <= c1; ++c) m.set(r, c);
        std::uniform_int_distribution<int> side(16, 64);
        const int wh = side(rng), ww = side(rng);
        const CropWindow win{std::uniform_int_distribution<int>(0, 64 - wh)(rng),
                             std::uniform_int_distribution<int>(0, 64 - ww)(rng), wh, ww};
        const int out = 48;
        const auto res = crop_and_resize(Sample{Image(64, 64, 3), {m}, {}}, win, out);
        // overlap of the rectangle with the window, in window pixels
        const int a = std::max(0, std::min(r1, win.row + wh - 1) - std::max(r0, win.row) + 1);
        const int b = std::max(0, std::min(c1, win.col + ww - 1) - std::max(c0, win.col) + 1);
        if (res.sample.masks.empty()) {
            // may vanish only when the overlap is thinner than one output pixel
            CHECK((a * out < wh + wh || b * out < ww + ww || a == 0 || b == 0));
            continue;
        }
        const auto bb = box_from_mask(res.sample.masks[0]);
        const double want_h = a * double(out) / wh, want_w = b * double(out) / ww;
        CHECK(std::abs((bb.row_max - bb.row_min + 1) - want_h) <= 1.0);
        CHECK(std::abs((bb.col_max - bb.col_min + 1) - want_w) <= 1.0);
        CHECK(res.sample.masks[0].area() == std::size_t(bb.row_max - bb.row_min + 1) * (bb.col_max - bb.col_min + 1));
        ++checked;
    }
    CHECK(checked > 100);
}

TEST_CASE("random crop windows respect the configured ranges") {
    Rng rng(9);
    AugmentationConfig cfg;
    Sample s{Image(100, 100, 3), {}, {}};
    for (int t = 0; t < 200; ++t) {
        const auto res = random_resized_crop(s, cfg, rng, 50);
        const double area = res.window.height * double(res.window.width) / 1e4;
        const double aspect = res.window.width / double(res.window.height);
        CHECK(res.window.row >= 0);
        CHECK(res.window.col >= 0);
        CHECK(res.window.row + res.window.height <= 100);
        CHECK(res.window.col + res.window.width <= 100);
        // integer rounding of the sides moves area and aspect slightly
        CHECK(area >= 0.5 - 0.03);
        CHECK(area <= 1.0);
        CHECK(aspect >= 0.9 - 0.03);
        CHECK(aspect <= 1.1 + 0.03);
        CHECK(res.sample.image.height() == 50);
    }
}

TEST_CASE("hsv shift on a known pixel") {
    double r, g, b;
    ref_hsv_to_rgb(100.0, 0.5, 0.5, r, g, b);
    Image img(1, 1, 3);
    img.at(0, 0, 0) = static_cast<float>(r);
    img.at(0, 0, 1) = static_cast<float>(g);
    img.at(0, 0, 2) = static_cast<float>(b);
    const auto out = shift_hsv(img, 10.0, 0.1, -0.1);
    double h, s, v;
    ref_rgb_to_hsv(out.at(0, 0, 0), out.at(0, 0, 1), out.at(0, 0, 2), h, s, v);
    CHECK(h == doctest::Approx(110.0).epsilon(1e-5));
    CHECK(s == doctest::Approx(0.6).epsilon(1e-5));
    CHECK(v == doctest::Approx(0.4).epsilon(1e-5));
}

TEST_CASE("hsv conversions agree with the textbook formulas") {
    Rng rng(10);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int i = 0; i < 1000; ++i) {
        const float r = u(rng), g = u(rng), b = u(rng);
        double h, s, v, hr, sr, vr;
        rgb_to_hsv(r, g, b, h, s, v);
        ref_rgb_to_hsv(r, g, b, hr, sr, vr);
        CHECK(s == doctest::Approx(sr).epsilon(1e-6));
        CHECK(v == doctest::Approx(vr).epsilon(1e-6));
        if (sr > 1e-3) CHECK(std::min(std::abs(h - hr), 360 - std::abs(h - hr)) < 1e-3);
        float r2, g2, b2;
        hsv_to_rgb(h, s, v, r2, g2, b2);
        CHECK(std::abs(r2 - r) < 1e-5);
        CHECK(std::abs(g2 - g) < 1e-5);
        CHECK(std::abs(b2 - b) < 1e-5);
    }
}

TEST_CASE("zero and full-turn hsv shifts leave the image alone") {
    Rng rng(11);
    const auto img = random_image(6, 6, rng);
    const auto same = shift_hsv(img, 0.0, 0.0, 0.0);
    const auto turned = shift_hsv(img, 360.0, 0.0, 0.0);
    for (std::size_t i = 0; i < img.data().size(); ++i) {
        CHECK(std::abs(same.data()[i] - img.data()[i]) < 1e-5);
        CHECK(std::abs(turned.data()[i] - img.data()[i]) < 1e-5);
    }
    AugmentationConfig cfg;
    cfg.hue_limit_deg = cfg.saturation_limit = cfg.value_limit = 0.0;
    const auto j = hsv_jitter(img, cfg, rng);
    for (std::size_t i = 0; i < img.data().size(); ++i) CHECK(std::abs(j.data()[i] - img.data()[i]) < 1e-5);
}

TEST_CASE("saturation and value are clamped") {
    Image img(1, 1, 3);
    img.at(0, 0, 0) = 0.9f;
    img.at(0, 0, 1) = 0.2f;
    img.at(0, 0, 2) = 0.1f;
    const auto out = shift_hsv(img, 0.0, 1.0, 1.0);
    double h, s, v;
    rgb_to_hsv(out.at(0, 0, 0), out.at(0, 0, 1), out.at(0, 0, 2), h, s, v);
    CHECK(s == doctest::Approx(1.0));
    CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("augmented samples stay consistent") {
    Rng rng(12);
    Sample s{random_image(64, 64, rng), {}, {}};
    for (int k = 0; k < 4; ++k) {
        BinaryMask m(64, 64);
        for (int r = 10 * k; r < 10 * k + 8; ++r)
            for (int c = 5; c < 20; ++c) m.set(r, c);
        s.masks.push_back(m);
    }
    AugmentationConfig cfg;
    for (int t = 0; t < 50; ++t) {
        const auto out = augment_sample(s, cfg, rng, 64);
        CHECK(out.image.height() == 64);
        CHECK(out.masks.size() <= s.masks.size());
        for (const auto& m : out.masks) CHECK(m.any());
        for (float v : out.image.data()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    Rng a(3), b(3);
    const auto x = augment_sample(s, cfg, a, 64), y = augment_sample(s, cfg, b, 64);
    CHECK(x.image == y.image);
    CHECK(x.masks == y.masks);
}

TEST_CASE("augmentation config validation") {
    AugmentationConfig cfg;
    cfg.scale_min = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.crop_probability = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
