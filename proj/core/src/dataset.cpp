#include "cellpilot/dataset.hpp"

#include "cellpilot/errors.hpp"
#include "cellpilot/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

namespace cellpilot {

AnnotatedImage to_model_frame(const AnnotatedImage& src, int input_size) {
    const Preprocessed pre = preprocess(src.image, input_size);
    AnnotatedImage out{src.id, pre.image, {}};
    for (const auto& m : src.instances) {
        BinaryMask mm = mask_to_model_space(m, pre.record);
        if (mm.any()) out.instances.push_back(std::move(mm));
    }
    return out;
}

std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](unsigned char b) {
        h ^= b;
        h *= 1099511628211ULL;
    };
    for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>(seed >> (8 * i)));
    for (char c : text) mix(static_cast<unsigned char>(c));
    return h;
}

std::vector<bool> split_validation(const std::vector<std::string>& ids, double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ConfigError("validation fraction must lie in [0, 1]");
    const std::size_t n = ids.size();
    const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::uint64_t> h(n);
    for (std::size_t i = 0; i < n; ++i) h[i] = fnv1a64(ids[i], seed);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return h[a] != h[b] ? h[a] < h[b] : ids[a] < ids[b];
    });
    std::vector<bool> val(n, false);
    for (std::size_t i = 0; i < n_val; ++i) val[order[i]] = true;
    return val;
}

std::vector<BinaryMask> instances_from_label_map(const LabelMap& labels) {
    std::map<std::int32_t, BinaryMask> by_id;
    for (int r = 0; r < labels.height; ++r)
        for (int c = 0; c < labels.width; ++c) {
            const std::int32_t v = labels.labels[static_cast<std::size_t>(r) * labels.width + c];
            if (v <= 0) continue;
            auto it = by_id.find(v);
            if (it == by_id.end()) it = by_id.emplace(v, BinaryMask(labels.height, labels.width)).first;
            it->second.set(r, c);
        }
    std::vector<BinaryMask> out;
    out.reserve(by_id.size());
    for (auto& [id, m] : by_id) out.push_back(std::move(m));
    return out;
}

LabelMap label_map_from_instances(const std::vector<BinaryMask>& instances, int height, int width) {
    LabelMap lm{height, width, std::vector<std::int32_t>(static_cast<std::size_t>(height) * width, 0)};
    std::int32_t next = 1;
    for (const auto& m : instances) {
        if (m.height() != height || m.width() != width) throw ShapeError("instance size differs from label map");
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c)
                if (m(r, c)) lm.labels[static_cast<std::size_t>(r) * width + c] = next;
        ++next;
    }
    return lm;
}

void BlobConfig::validate() const {
    if (count < 0 || size < 16) throw ConfigError("blob dataset needs count >= 0 and size >= 16");
    if (min_instances < 1 || max_instances < min_instances) throw ConfigError("invalid instance count range");
    if (!(min_semi_axis >= 1.0 && max_semi_axis >= min_semi_axis)) throw ConfigError("invalid semi-axis range");
    if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
}

AnnotatedImage make_blob_image(const BlobConfig& cfg, Rng& rng, std::string id) {
    const int n = cfg.size;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, cfg.noise_std);

    // Pale pink background, purple-ish nuclei with per-instance shade.
    const double bg[3] = {0.85 + 0.1 * u01(rng), 0.75 + 0.1 * u01(rng), 0.80 + 0.1 * u01(rng)};
    AnnotatedImage out{std::move(id), Image(n, n, 3), {}};
    std::vector<std::uint8_t> occupied(static_cast<std::size_t>(n) * n, 0);

    const int want = std::uniform_int_distribution<int>(cfg.min_instances, cfg.max_instances)(rng);
    std::uniform_real_distribution<double> axis(cfg.min_semi_axis, cfg.max_semi_axis);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::vector<std::array<double, 3>> shades;
    for (int attempt = 0; attempt < 2000 && static_cast<int>(out.instances.size()) < want; ++attempt) {
        const double a = axis(rng), b = axis(rng), th = angle(rng);
        const double reach = std::max(a, b);
        std::uniform_real_distribution<double> centre(reach + 1, n - reach - 2);
        const double cy = centre(rng), cx = centre(rng);
        const double ct = std::cos(th), st = std::sin(th);
        BinaryMask m(n, n);
        bool clash = false;
        const int r0 = std::max(0, static_cast<int>(cy - reach - 2)), r1 = std::min(n - 1, static_cast<int>(cy + reach + 2));
        const int c0 = std::max(0, static_cast<int>(cx - reach - 2)), c1 = std::min(n - 1, static_cast<int>(cx + reach + 2));
        for (int r = r0; r <= r1 && !clash; ++r)
            for (int c = c0; c <= c1; ++c) {
                const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
                const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
                const double d = u * u + v * v;
                // one-pixel moat keeps instances separable
                if (d <= 1.0 + 2.0 / std::min(a, b) && occupied[static_cast<std::size_t>(r) * n + c]) {
                    clash = true;
                    break;
                }
                if (d <= 1.0) m.set(r, c);
            }
        if (clash || m.area() < 8) continue;
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c)
                if (m(r, c)) occupied[static_cast<std::size_t>(r) * n + c] = 1;
        const double k = 0.8 * u01(rng);
        shades.push_back({0.35 + 0.15 * k, 0.15 + 0.1 * k, 0.45 + 0.15 * k});
        out.instances.push_back(std::move(m));
    }

    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c)
            for (int ch = 0; ch < 3; ++ch) out.image.at(r, c, ch) = static_cast<float>(bg[ch]);
    for (std::size_t i = 0; i < out.instances.size(); ++i)
        for (int r = 0; r < n; ++r)
            for (int c = 0; c < n; ++c)
                if (out.instances[i](r, c))
                    for (int ch = 0; ch < 3; ++ch) out.image.at(r, c, ch) = static_cast<float>(shades[i][ch]);
    for (auto& v : out.image.data()) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
    return out;
}

std::vector<AnnotatedImage> make_blob_dataset(const BlobConfig& cfg) {
    cfg.validate();
    std::vector<AnnotatedImage> out;
    out.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        Rng rng(fnv1a64("blob:" + std::to_string(i), cfg.seed));
        char name[32];
        std::snprintf(name, sizeof name, "blob_%04d", i);
        out.push_back(make_blob_image(cfg, rng, name));
    }
    return out;
}

} // namespace cellpilot
