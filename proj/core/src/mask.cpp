#include "cellpilot/mask.hpp"

#include "cellpilot/errors.hpp"

#include <algorithm>
#include <cstring>
#include <limits>
#include <numeric>

namespace cellpilot {

BinaryMask::BinaryMask(int height, int width) : height_(height), width_(width) {
    if (height <= 0 || width <= 0) {
        throw ShapeError("mask dimensions must be positive, got " + std::to_string(height) + "x" +
                         std::to_string(width));
    }
    data_.assign(static_cast<std::size_t>(height) * width, 0);
}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> data)
    : height_(height), width_(width), data_(std::move(data)) {
    if (height <= 0 || width <= 0) {
        throw ShapeError("mask dimensions must be positive");
    }
    if (data_.size() != static_cast<std::size_t>(height) * width) {
        throw ShapeError("mask data length " + std::to_string(data_.size()) + " != " +
                         std::to_string(height) + "x" + std::to_string(width));
    }
    for (auto& v : data_) v = v ? 1 : 0;
}

std::size_t BinaryMask::area() const noexcept {
    return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

bool BinaryMask::any() const noexcept {
    return std::any_of(data_.begin(), data_.end(), [](std::uint8_t v) { return v != 0; });
}

namespace {

void require_same_shape(const BinaryMask& a, const BinaryMask& b) {
    if (a.height() != b.height() || a.width() != b.width()) {
        throw ShapeError("mask shape mismatch: " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()));
    }
}

struct Overlap {
    std::size_t inter = 0;
    std::size_t a = 0;
    std::size_t b = 0;
};

Overlap overlap(const BinaryMask& a, const BinaryMask& b) {
    require_same_shape(a, b);
    Overlap o;
    auto da = a.data();
    auto db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i) {
        o.a += da[i];
        o.b += db[i];
        o.inter += da[i] & db[i];
    }
    return o;
}

} // namespace

double iou(const BinaryMask& a, const BinaryMask& b) {
    const auto o = overlap(a, b);
    const std::size_t uni = o.a + o.b - o.inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(o.inter) / static_cast<double>(uni);
}

double dice_coefficient(const BinaryMask& a, const BinaryMask& b) {
    const auto o = overlap(a, b);
    if (o.a + o.b == 0) return 1.0;
    return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.a + o.b);
}

ComponentLabels label_components(const BinaryMask& m, Connectivity connectivity) {
    ComponentLabels out;
    out.height = m.height();
    out.width = m.width();
    out.labels.assign(m.size(), 0);
    if (m.empty()) return out;

    const int h = m.height();
    const int w = m.width();
    std::vector<int> stack;
    int next = 0;
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t idx = static_cast<std::size_t>(r) * w + c;
            if (!m(r, c) || out.labels[idx] != 0) continue;
            ++next;
            std::size_t area = 0;
            out.labels[idx] = next;
            stack.push_back(static_cast<int>(idx));
            while (!stack.empty()) {
                const int p = stack.back();
                stack.pop_back();
                ++area;
                const int pr = p / w;
                const int pc = p % w;
                for (int dr = -1; dr <= 1; ++dr) {
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        if (connectivity == Connectivity::four && dr != 0 && dc != 0) continue;
                        const int nr = pr + dr;
                        const int nc = pc + dc;
                        if (nr < 0 || nc < 0 || nr >= h || nc >= w) continue;
                        const std::size_t nidx = static_cast<std::size_t>(nr) * w + nc;
                        if (m(nr, nc) && out.labels[nidx] == 0) {
                            out.labels[nidx] = next;
                            stack.push_back(static_cast<int>(nidx));
                        }
                    }
                }
            }
            out.areas.push_back(area);
            out.first.push_back(idx);
        }
    }
    return out;
}

std::vector<BinaryMask> connected_components(const BinaryMask& m, Connectivity connectivity) {
    const auto lab = label_components(m, connectivity);
    const std::size_t n = lab.areas.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    // Labels are already in raster order of first pixel, so a stable sort on
    // area keeps that as the tie-break.
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return lab.areas[x] > lab.areas[y]; });

    std::vector<BinaryMask> comps;
    comps.reserve(n);
    std::vector<int> slot(n + 1, -1);
    for (std::size_t k = 0; k < n; ++k) {
        comps.emplace_back(m.height(), m.width());
        slot[order[k] + 1] = static_cast<int>(k);
    }
    for (std::size_t i = 0; i < lab.labels.size(); ++i) {
        if (lab.labels[i] != 0) comps[slot[lab.labels[i]]].data()[i] = 1;
    }
    return comps;
}

ErrorRegions error_regions(const BinaryMask& pred, const BinaryMask& gt) {
    require_same_shape(pred, gt);
    ErrorRegions out{BinaryMask(gt.height(), gt.width()), BinaryMask(gt.height(), gt.width())};
    auto p = pred.data();
    auto g = gt.data();
    auto fn = out.false_negative.data();
    auto fp = out.false_positive.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        fn[i] = g[i] & static_cast<std::uint8_t>(!p[i]);
        fp[i] = p[i] & static_cast<std::uint8_t>(!g[i]);
    }
    return out;
}

namespace {

// One-dimensional squared distance transform of sampled function f
// (lower envelope of parabolas).
void distance_1d(const std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
                 std::vector<double>& z) {
    const int n = static_cast<int>(f.size());
    constexpr double inf = std::numeric_limits<double>::infinity();
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    d.assign(n, 0.0);
    int k = 0;
    v[0] = 0;
    z[0] = -inf;
    z[1] = inf;
    auto intersect = [&](int q, int p) {
        return ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) /
               (2.0 * (q - p));
    };
    for (int q = 1; q < n; ++q) {
        double s = intersect(q, v[k]);
        while (s <= z[k]) {
            --k;
            s = intersect(q, v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = inf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double diff = q - v[k];
        d[q] = diff * diff + f[v[k]];
    }
}

} // namespace

std::vector<std::int64_t> squared_distance_to_background(const BinaryMask& m) {
    // Work on a grid padded by one background pixel on every side.
    const int h = m.height() + 2;
    const int w = m.width() + 2;
    const double big = 4.0 * (static_cast<double>(h) * h + static_cast<double>(w) * w) + 1.0;
    std::vector<double> grid(static_cast<std::size_t>(h) * w, 0.0);
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c)
            if (m(r, c)) grid[static_cast<std::size_t>(r + 1) * w + (c + 1)] = big;

    std::vector<double> f, d, z;
    std::vector<int> v;
    f.resize(h);
    for (int c = 0; c < w; ++c) {
        for (int r = 0; r < h; ++r) f[r] = grid[static_cast<std::size_t>(r) * w + c];
        distance_1d(f, d, v, z);
        for (int r = 0; r < h; ++r) grid[static_cast<std::size_t>(r) * w + c] = d[r];
    }
    f.resize(w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) f[c] = grid[static_cast<std::size_t>(r) * w + c];
        distance_1d(f, d, v, z);
        for (int c = 0; c < w; ++c) grid[static_cast<std::size_t>(r) * w + c] = d[c];
    }

    std::vector<std::int64_t> out(m.size(), 0);
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c)
            out[static_cast<std::size_t>(r) * m.width() + c] =
                static_cast<std::int64_t>(grid[static_cast<std::size_t>(r + 1) * w + (c + 1)] + 0.5);
    return out;
}

std::optional<ErrorComponent> largest_error_component(const BinaryMask& pred, const BinaryMask& gt) {
    const auto regions = error_regions(pred, gt);
    const auto fn = label_components(regions.false_negative, Connectivity::four);
    const auto fp = label_components(regions.false_positive, Connectivity::four);

    // (area, side, first pixel) with side 0 = false negative.
    struct Candidate {
        std::size_t area;
        int side;
        std::size_t first;
        int label;
    };
    std::optional<Candidate> best;
    auto consider = [&](const ComponentLabels& lab, int side) {
        for (std::size_t k = 0; k < lab.areas.size(); ++k) {
            Candidate c{lab.areas[k], side, lab.first[k], static_cast<int>(k) + 1};
            if (!best || c.area > best->area ||
                (c.area == best->area &&
                 (c.side < best->side || (c.side == best->side && c.first < best->first)))) {
                best = c;
            }
        }
    };
    consider(fn, 0);
    consider(fp, 1);
    if (!best) return std::nullopt;

    const auto& lab = best->side == 0 ? fn : fp;
    BinaryMask region(gt.height(), gt.width());
    for (std::size_t i = 0; i < lab.labels.size(); ++i)
        if (lab.labels[i] == best->label) region.data()[i] = 1;
    return ErrorComponent{std::move(region),
                          best->side == 0 ? Polarity::positive : Polarity::negative};
}

PointPrompt component_center(const BinaryMask& component, Polarity polarity) {
    const auto dist = squared_distance_to_background(component);
    std::int64_t best = -1;
    std::size_t best_idx = 0;
    for (std::size_t i = 0; i < dist.size(); ++i) {
        if (component.data()[i] && dist[i] > best) {
            best = dist[i];
            best_idx = i;
        }
    }
    if (best < 0) throw EmptyMaskError();
    return PointPrompt{static_cast<int>(best_idx / component.width()),
                       static_cast<int>(best_idx % component.width()), polarity};
}

std::optional<PointPrompt> sample_correction_click(const BinaryMask& pred, const BinaryMask& gt,
                                                   Rng& rng, ClickPlacement placement) {
    auto comp = largest_error_component(pred, gt);
    if (!comp) return std::nullopt;
    if (placement == ClickPlacement::center) return component_center(comp->region, comp->polarity);
    auto p = sample_point_in_mask(comp->region, rng);
    p.polarity = comp->polarity;
    return p;
}

BoxPrompt box_from_mask(const BinaryMask& m, int margin) {
    if (margin < 0) throw RangeError("box margin must be non-negative");
    int rmin = m.height(), cmin = m.width(), rmax = -1, cmax = -1;
    for (int r = 0; r < m.height(); ++r) {
        for (int c = 0; c < m.width(); ++c) {
            if (!m(r, c)) continue;
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            cmin = std::min(cmin, c);
            cmax = std::max(cmax, c);
        }
    }
    if (rmax < 0) throw EmptyMaskError();
    return BoxPrompt{std::max(0, rmin - margin), std::max(0, cmin - margin),
                     std::min(m.height() - 1, rmax + margin), std::min(m.width() - 1, cmax + margin)};
}

PointPrompt sample_point_in_mask(const BinaryMask& m, Rng& rng) {
    const std::size_t n = m.area();
    if (n == 0) throw EmptyMaskError();
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::size_t target = pick(rng);
    auto d = m.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!d[i]) continue;
        if (target == 0) {
            return PointPrompt{static_cast<int>(i / m.width()), static_cast<int>(i % m.width()),
                               Polarity::positive};
        }
        --target;
    }
    throw EmptyMaskError(); // unreachable
}

BinaryMask mask_from_box(const BoxPrompt& box, int height, int width) {
    BinaryMask m(height, width);
    const int r0 = std::max(0, box.row_min), r1 = std::min(height - 1, box.row_max);
    const int c0 = std::max(0, box.col_min), c1 = std::min(width - 1, box.col_max);
    for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) m.set(r, c);
    return m;
}

Rle rle_encode(const BinaryMask& m) {
    Rle rle{m.height(), m.width(), {}};
    const int h = m.height(), w = m.width();
    const auto px = m.data();
    auto on = [&](int r, int c) { return px[static_cast<std::size_t>(r) * w + c] != 0; };
    // Counts run in column-major order. Collect the rows where each column
    // changes value by comparing whole rows, which keeps the scan row-major;
    // identical neighbouring rows are skipped with one memcmp.
    std::vector<std::vector<int>> changes(static_cast<std::size_t>(w));
    for (int c = 0; c < w; ++c) {
        const bool prev = c > 0 && on(h - 1, c - 1);
        if (on(0, c) != prev) changes[static_cast<std::size_t>(c)].push_back(0);
    }
    for (int r = 1; r < h; ++r) {
        const auto* above = px.data() + static_cast<std::size_t>(r - 1) * w;
        const auto* row = above + w;
        if (std::memcmp(above, row, static_cast<std::size_t>(w)) == 0) continue;
        for (int c = 0; c < w; ++c)
            if ((above[c] != 0) != (row[c] != 0)) changes[static_cast<std::size_t>(c)].push_back(r);
    }
    std::size_t last = 0;
    for (int c = 0; c < w; ++c) {
        for (int r : changes[static_cast<std::size_t>(c)]) {
            const std::size_t at = static_cast<std::size_t>(c) * h + r;
            rle.counts.push_back(static_cast<std::uint32_t>(at - last));
            last = at;
        }
    }
    rle.counts.push_back(static_cast<std::uint32_t>(px.size() - last));
    return rle;
}

BinaryMask rle_decode(const Rle& rle) {
    BinaryMask m(rle.height, rle.width);
    const std::size_t total = m.size();
    std::size_t pos = 0;
    std::uint8_t value = 0;
    for (std::size_t i = 0; i < rle.counts.size(); ++i) {
        const std::size_t run = rle.counts[i];
        if (pos + run > total) {
            throw FormatError("RLE counts exceed mask size", i);
        }
        if (value) {
            for (std::size_t k = pos; k < pos + run; ++k) {
                const std::size_t c = k / rle.height;
                const std::size_t r = k % rle.height;
                m.set(static_cast<int>(r), static_cast<int>(c));
            }
        }
        pos += run;
        value ^= 1;
    }
    if (pos != total) throw FormatError("RLE counts do not cover the mask", rle.counts.size());
    return m;
}

std::string rle_counts_to_string(const Rle& rle) {
    std::string s;
    const auto& cnts = rle.counts;
    for (std::size_t i = 0; i < cnts.size(); ++i) {
        std::int64_t x = cnts[i];
        if (i > 2) x -= static_cast<std::int64_t>(cnts[i - 2]);
        bool more = true;
        while (more) {
            char c = static_cast<char>(x & 0x1f);
            x >>= 5;
            more = (c & 0x10) ? x != -1 : x != 0;
            if (more) c |= 0x20;
            s.push_back(static_cast<char>(c + 48));
        }
    }
    return s;
}

Rle rle_from_string(int height, int width, const std::string& counts) {
    Rle rle{height, width, {}};
    std::size_t p = 0;
    while (p < counts.size()) {
        std::int64_t x = 0;
        int k = 0;
        bool more = true;
        const std::size_t start = p;
        while (more) {
            if (p >= counts.size()) throw FormatError("truncated RLE string", start);
            const int c = static_cast<int>(counts[p]) - 48;
            if (c < 0 || c > 63) throw FormatError("invalid RLE character", p);
            x |= static_cast<std::int64_t>(c & 0x1f) << (5 * k);
            more = (c & 0x20) != 0;
            ++p;
            ++k;
            if (!more && (c & 0x10)) x |= static_cast<std::int64_t>(-1) << (5 * k);
        }
        const std::size_t m = rle.counts.size();
        if (m > 2) x += static_cast<std::int64_t>(rle.counts[m - 2]);
        if (x < 0) throw FormatError("negative RLE run", start);
        rle.counts.push_back(static_cast<std::uint32_t>(x));
    }
    return rle;
}

} // namespace cellpilot
