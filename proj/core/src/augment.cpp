#include "cellpilot/augment.hpp"

#include "cellpilot/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cellpilot::augment {

namespace {

// Signed permutation matrices acting on centred coordinates (u, v) = (2r-(n-1), 2c-(n-1)).
struct M2 {
    int a, b, c, d;
    bool operator==(const M2&) const = default;
};

constexpr M2 matrix_of(D4 g) {
    switch (g) {
    case D4::e: return {1, 0, 0, 1};
    case D4::r90: return {0, 1, -1, 0};   // (r, c) -> (c, n-1-r)
    case D4::r180: return {-1, 0, 0, -1};
    case D4::r270: return {0, -1, 1, 0};  // (r, c) -> (n-1-c, r)
    case D4::fh: return {1, 0, 0, -1};    // mirror columns
    case D4::fv: return {-1, 0, 0, 1};    // mirror rows
    case D4::fd: return {0, 1, 1, 0};     // transpose
    case D4::fa: return {0, -1, -1, 0};   // anti-transpose
    }
    return {1, 0, 0, 1};
}

D4 element_of(const M2& m) {
    for (D4 g : kD4All)
        if (matrix_of(g) == m) return g;
    throw Error("matrix is not an element of D4");
}

M2 multiply(const M2& x, const M2& y) {
    return {x.a * y.a + x.b * y.c, x.a * y.b + x.b * y.d, x.c * y.a + x.d * y.c, x.c * y.b + x.d * y.d};
}

void require_square(int h, int w) {
    if (h != w) throw ShapeError("D4 transforms are defined on square images only");
}

bool coin(double p, Rng& rng) {
    if (p <= 0.0) return false;
    if (p >= 1.0) return true;
    return std::bernoulli_distribution(p)(rng);
}

} // namespace

std::string to_string(D4 g) {
    static const char* names[] = {"e", "r90", "r180", "r270", "fh", "fv", "fd", "fa"};
    return names[static_cast<int>(g)];
}

D4 compose(D4 a, D4 b) { return element_of(multiply(matrix_of(a), matrix_of(b))); }

D4 inverse(D4 g) {
    const M2 m = matrix_of(g);
    return element_of({m.a, m.c, m.b, m.d}); // orthogonal: inverse = transpose
}

std::pair<int, int> map_coord(D4 g, int row, int col, int n) {
    const M2 m = matrix_of(g);
    const int u = 2 * row - (n - 1), v = 2 * col - (n - 1);
    const int u2 = m.a * u + m.b * v, v2 = m.c * u + m.d * v;
    return {(u2 + (n - 1)) / 2, (v2 + (n - 1)) / 2};
}

BinaryMask apply_d4(D4 g, const BinaryMask& m) {
    require_square(m.height(), m.width());
    const int n = m.height();
    BinaryMask out(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            if (m(r, c)) {
                const auto [r2, c2] = map_coord(g, r, c, n);
                out.set(r2, c2);
            }
    return out;
}

Image apply_d4(D4 g, const Image& img) {
    require_square(img.height(), img.width());
    const int n = img.height();
    Image out(n, n, img.channels());
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const auto [r2, c2] = map_coord(g, r, c, n);
            for (int k = 0; k < img.channels(); ++k) out.at(r2, c2, k) = img.at(r, c, k);
        }
    return out;
}

Prompt apply_d4(D4 g, const Prompt& p, int n) {
    if (const auto* pt = std::get_if<PointPrompt>(&p)) {
        const auto [r, c] = map_coord(g, pt->row, pt->col, n);
        return PointPrompt{r, c, pt->polarity};
    }
    const auto& b = std::get<BoxPrompt>(p);
    const auto [r0, c0] = map_coord(g, b.row_min, b.col_min, n);
    const auto [r1, c1] = map_coord(g, b.row_max, b.col_max, n);
    return BoxPrompt{std::min(r0, r1), std::min(c0, c1), std::max(r0, r1), std::max(c0, c1)};
}

Sample apply_d4(D4 g, const Sample& s) {
    require_square(s.image.height(), s.image.width());
    Sample out;
    out.image = apply_d4(g, s.image);
    for (const auto& m : s.masks) {
        if (m.height() != s.image.height() || m.width() != s.image.width())
            throw ShapeError("mask does not match image size");
        out.masks.push_back(apply_d4(g, m));
    }
    for (const auto& p : s.prompts) out.prompts.push_back(apply_d4(g, p, s.image.height()));
    return out;
}

void AugmentationConfig::validate() const {
    if (!(scale_min > 0 && scale_min <= scale_max && scale_max <= 1.0))
        throw ConfigError("crop scale range must satisfy 0 < min <= max <= 1");
    if (!(aspect_min > 0 && aspect_min <= aspect_max)) throw ConfigError("crop aspect range is empty");
    if (hue_limit_deg < 0 || saturation_limit < 0 || value_limit < 0) throw ConfigError("HSV limits must be >= 0");
    for (double p : {d4_probability, crop_probability, hsv_probability})
        if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("probabilities must lie in [0, 1]");
}

BinaryMask resize_nearest(const BinaryMask& m, int height, int width) {
    if (m.height() == height && m.width() == width) return m;
    BinaryMask out(height, width);
    const double sy = static_cast<double>(m.height()) / height;
    const double sx = static_cast<double>(m.width()) / width;
    for (int r = 0; r < height; ++r) {
        const int y = std::min(static_cast<int>((r + 0.5) * sy), m.height() - 1);
        for (int c = 0; c < width; ++c) {
            const int x = std::min(static_cast<int>((c + 0.5) * sx), m.width() - 1);
            if (m(y, x)) out.set(r, c);
        }
    }
    return out;
}

CropResult crop_and_resize(const Sample& s, const CropWindow& w, int output_size) {
    CropResult res;
    res.window = w;
    res.sample.image = resize_bilinear(crop(s.image, w.row, w.col, w.height, w.width), output_size, output_size);
    for (std::size_t i = 0; i < s.masks.size(); ++i) {
        const auto& m = s.masks[i];
        BinaryMask sub(w.height, w.width);
        for (int r = 0; r < w.height; ++r)
            for (int c = 0; c < w.width; ++c)
                if (m(w.row + r, w.col + c)) sub.set(r, c);
        BinaryMask out = resize_nearest(sub, output_size, output_size);
        if (!out.any()) continue;
        res.sample.masks.push_back(std::move(out));
        res.kept.push_back(i);
    }
    return res;
}

CropResult random_resized_crop(const Sample& s, const AugmentationConfig& cfg, Rng& rng, int output_size) {
    cfg.validate();
    const int h = s.image.height(), w = s.image.width();
    const double area = static_cast<double>(h) * w;
    std::uniform_real_distribution<double> scale(cfg.scale_min, cfg.scale_max);
    std::uniform_real_distribution<double> log_ratio(std::log(cfg.aspect_min), std::log(cfg.aspect_max));
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * scale(rng);
        const double ratio = std::exp(log_ratio(rng));
        const int cw = static_cast<int>(std::lround(std::sqrt(target * ratio)));
        const int ch = static_cast<int>(std::lround(std::sqrt(target / ratio)));
        if (cw > 0 && ch > 0 && cw <= w && ch <= h) {
            const int row = std::uniform_int_distribution<int>(0, h - ch)(rng);
            const int col = std::uniform_int_distribution<int>(0, w - cw)(rng);
            return crop_and_resize(s, {row, col, ch, cw}, output_size);
        }
    }
    // Fallback: largest centred window with an admissible aspect ratio.
    const double in_ratio = static_cast<double>(w) / h;
    int cw = w, ch = h;
    if (in_ratio < cfg.aspect_min) {
        ch = static_cast<int>(std::lround(w / cfg.aspect_min));
    } else if (in_ratio > cfg.aspect_max) {
        cw = static_cast<int>(std::lround(h * cfg.aspect_max));
    }
    return crop_and_resize(s, {(h - ch) / 2, (w - cw) / 2, ch, cw}, output_size);
}

void rgb_to_hsv(float r, float g, float b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double d = mx - mn;
    v = mx;
    s = mx > 0 ? d / mx : 0.0;
    if (d <= 0) {
        h = 0.0;
        return;
    }
    if (mx == r) {
        h = 60.0 * std::fmod((g - b) / d, 6.0);
    } else if (mx == g) {
        h = 60.0 * ((b - r) / d + 2.0);
    } else {
        h = 60.0 * ((r - g) / d + 4.0);
    }
    if (h < 0) h += 360.0;
}

void hsv_to_rgb(double h, double s, double v, float& r, float& g, float& b) {
    h = std::fmod(h, 360.0);
    if (h < 0) h += 360.0;
    const double c = v * s;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    switch (static_cast<int>(hp) % 6) {
    case 0: r1 = c, g1 = x; break;
    case 1: r1 = x, g1 = c; break;
    case 2: g1 = c, b1 = x; break;
    case 3: g1 = x, b1 = c; break;
    case 4: r1 = x, b1 = c; break;
    default: r1 = c, b1 = x; break;
    }
    const double m = v - c;
    r = static_cast<float>(r1 + m);
    g = static_cast<float>(g1 + m);
    b = static_cast<float>(b1 + m);
}

Image shift_hsv(const Image& img, double hue_deg, double saturation, double value) {
    if (img.channels() < 3) throw ShapeError("HSV jitter needs a colour image");
    if (hue_deg == 0.0 && saturation == 0.0 && value == 0.0) return img;
    Image out = img;
    for (int r = 0; r < img.height(); ++r)
        for (int c = 0; c < img.width(); ++c) {
            double h, s, v;
            rgb_to_hsv(img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2), h, s, v);
            h = std::fmod(h + hue_deg, 360.0);
            if (h < 0) h += 360.0;
            s = std::clamp(s + saturation, 0.0, 1.0);
            v = std::clamp(v + value, 0.0, 1.0);
            hsv_to_rgb(h, s, v, out.at(r, c, 0), out.at(r, c, 1), out.at(r, c, 2));
        }
    return out;
}

Image hsv_jitter(const Image& img, const AugmentationConfig& cfg, Rng& rng) {
    auto draw = [&rng](double limit) {
        return limit > 0 ? std::uniform_real_distribution<double>(-limit, limit)(rng) : 0.0;
    };
    const double dh = draw(cfg.hue_limit_deg);
    const double ds = draw(cfg.saturation_limit);
    const double dv = draw(cfg.value_limit);
    return shift_hsv(img, dh, ds, dv);
}

Sample augment_sample(const Sample& s, const AugmentationConfig& cfg, Rng& rng, int output_size) {
    cfg.validate();
    Sample cur{s.image, s.masks, {}};
    if (cur.image.height() == cur.image.width() && coin(cfg.d4_probability, rng)) {
        const D4 g = kD4All[std::uniform_int_distribution<int>(0, 7)(rng)];
        cur = apply_d4(g, cur);
    }
    if (coin(cfg.crop_probability, rng)) {
        cur = random_resized_crop(cur, cfg, rng, output_size).sample;
    } else if (cur.image.height() != output_size || cur.image.width() != output_size) {
        cur = crop_and_resize(cur, {0, 0, cur.image.height(), cur.image.width()}, output_size).sample;
    }
    if (coin(cfg.hsv_probability, rng)) cur.image = hsv_jitter(cur.image, cfg, rng);
    return cur;
}

} // namespace cellpilot::augment
