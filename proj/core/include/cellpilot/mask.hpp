#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace cellpilot {

using Rng = std::mt19937_64;

// Binary instance mask, row-major, 1 = foreground.
class BinaryMask {
  public:
    BinaryMask() = default;
    BinaryMask(int height, int width);
    BinaryMask(int height, int width, std::vector<std::uint8_t> data);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    bool operator()(int row, int col) const noexcept {
        return data_[static_cast<std::size_t>(row) * width_ + col] != 0;
    }
    void set(int row, int col, bool value = true) noexcept {
        data_[static_cast<std::size_t>(row) * width_ + col] = value ? 1 : 0;
    }
    bool contains(int row, int col) const noexcept {
        return row >= 0 && col >= 0 && row < height_ && col < width_;
    }

    std::span<const std::uint8_t> data() const noexcept { return data_; }
    std::span<std::uint8_t> data() noexcept { return data_; }

    std::size_t area() const noexcept;
    bool any() const noexcept;

    bool operator==(const BinaryMask&) const = default;

  private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
};

enum class Polarity { positive, negative };

struct PointPrompt {
    int row = 0;
    int col = 0;
    Polarity polarity = Polarity::positive;

    bool operator==(const PointPrompt&) const = default;
};

// Inclusive pixel bounds.
struct BoxPrompt {
    int row_min = 0;
    int col_min = 0;
    int row_max = 0;
    int col_max = 0;

    bool operator==(const BoxPrompt&) const = default;
};

using Prompt = std::variant<PointPrompt, BoxPrompt>;

struct ErrorRegions {
    BinaryMask false_negative; // gt and not pred
    BinaryMask false_positive; // pred and not gt
};

enum class Connectivity { four = 4, eight = 8 };

// How a corrective click is placed inside the selected error component.
enum class ClickPlacement {
    center, // pixel farthest from the component boundary
    random, // uniform over the component
};

double iou(const BinaryMask& a, const BinaryMask& b);
double dice_coefficient(const BinaryMask& a, const BinaryMask& b);

struct ComponentLabels {
    int height = 0;
    int width = 0;
    std::vector<int> labels;         // 0 = background, k = component k (1-based)
    std::vector<std::size_t> areas;  // areas[k-1]
    std::vector<std::size_t> first;  // raster index of the first pixel of component k
};

// Raw labeling in raster order of first pixel.
ComponentLabels label_components(const BinaryMask& m, Connectivity connectivity);

// Components sorted by area descending, ties by raster position of first pixel.
std::vector<BinaryMask> connected_components(const BinaryMask& m,
                                             Connectivity connectivity = Connectivity::four);

ErrorRegions error_regions(const BinaryMask& pred, const BinaryMask& gt);

// Squared Euclidean distance from each foreground pixel to the nearest
// background pixel; pixels outside the image count as background.
std::vector<std::int64_t> squared_distance_to_background(const BinaryMask& m);

struct ErrorComponent {
    BinaryMask region;
    Polarity polarity; // positive for a false-negative component
};

// Largest 4-connected component over both error sides; ties go to the
// false-negative side, then to the earliest first pixel. nullopt when pred == gt.
std::optional<ErrorComponent> largest_error_component(const BinaryMask& pred, const BinaryMask& gt);

// Interior pixel maximising distance to the boundary, ties by smallest (row, col).
PointPrompt component_center(const BinaryMask& component, Polarity polarity);

// nullopt signals convergence (pred == gt).
std::optional<PointPrompt> sample_correction_click(const BinaryMask& pred, const BinaryMask& gt,
                                                   Rng& rng,
                                                   ClickPlacement placement = ClickPlacement::center);

BoxPrompt box_from_mask(const BinaryMask& m, int margin = 0);
PointPrompt sample_point_in_mask(const BinaryMask& m, Rng& rng);

// Rasterise a box into a mask of the given size (clamped to bounds).
BinaryMask mask_from_box(const BoxPrompt& box, int height, int width);

// COCO-style run-length encoding: column-major order, counts alternate
// background/foreground starting with background.
struct Rle {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> counts;

    bool operator==(const Rle&) const = default;
};

Rle rle_encode(const BinaryMask& m);
BinaryMask rle_decode(const Rle& rle);

// COCO compressed string form of the counts.
std::string rle_counts_to_string(const Rle& rle);
Rle rle_from_string(int height, int width, const std::string& counts);

} // namespace cellpilot
