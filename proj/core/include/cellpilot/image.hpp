#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cellpilot {

// Interleaved float image (HWC), values nominally in [0, 1].
class Image {
  public:
    Image() = default;
    Image(int height, int width, int channels = 3);
    Image(int height, int width, int channels, std::vector<float> data);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    bool empty() const noexcept { return data_.empty(); }

    float& at(int row, int col, int ch) noexcept {
        return data_[(static_cast<std::size_t>(row) * width_ + col) * channels_ + ch];
    }
    float at(int row, int col, int ch) const noexcept {
        return data_[(static_cast<std::size_t>(row) * width_ + col) * channels_ + ch];
    }

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }

    // FNV-1a over dimensions and pixel bytes; identifies image content.
    std::uint64_t content_hash() const noexcept;

    bool operator==(const Image&) const = default;

  private:
    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<float> data_;
};

// Bilinear resampling with half-pixel centres (align_corners = false).
Image resize_bilinear(const Image& src, int height, int width);

// Copy `src` into the top-left corner of a zero-filled height x width canvas.
Image pad_bottom_right(const Image& src, int height, int width);

Image crop(const Image& src, int row, int col, int height, int width);

// Codec access (PNG, TIFF, JPEG, PNM). 8/16-bit inputs are scaled to [0, 1];
// greyscale is expanded to three channels.
Image read_image(const std::string& path);
Image decode_image(std::span<const std::uint8_t> bytes);
void write_image(const std::string& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);

// Integer label map (0 = background). Reads 8/16-bit single-channel files.
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::int32_t> labels;
};
LabelMap read_label_map(const std::string& path);
void write_label_map(const std::string& path, const LabelMap& labels);

} // namespace cellpilot
