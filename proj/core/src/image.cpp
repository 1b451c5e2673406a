#include "cellpilot/image.hpp"

#include "cellpilot/errors.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace cellpilot {

Image::Image(int height, int width, int channels)
    : height_(height), width_(width), channels_(channels) {
    if (height <= 0 || width <= 0 || channels <= 0) throw ShapeError("image dimensions must be positive");
    data_.assign(static_cast<std::size_t>(height) * width * channels, 0.0f);
}

Image::Image(int height, int width, int channels, std::vector<float> data)
    : height_(height), width_(width), channels_(channels), data_(std::move(data)) {
    if (height <= 0 || width <= 0 || channels <= 0) throw ShapeError("image dimensions must be positive");
    if (data_.size() != static_cast<std::size_t>(height) * width * channels)
        throw ShapeError("image data length does not match dimensions");
}

std::uint64_t Image::content_hash() const noexcept {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ULL;
        }
    };
    const int dims[3] = {height_, width_, channels_};
    mix(dims, sizeof dims);
    mix(data_.data(), data_.size() * sizeof(float));
    return h;
}

Image resize_bilinear(const Image& src, int height, int width) {
    if (src.empty()) throw ShapeError("cannot resize an empty image");
    if (height <= 0 || width <= 0) throw ShapeError("resize target must be positive");
    if (height == src.height() && width == src.width()) return src;

    Image dst(height, width, src.channels());
    const double sy = static_cast<double>(src.height()) / height;
    const double sx = static_cast<double>(src.width()) / width;
    const int ch = src.channels();

    struct Tap {
        int i0, i1;
        float w1;
    };
    auto taps = [](int n_out, int n_in, double scale) {
        std::vector<Tap> t(n_out);
        for (int o = 0; o < n_out; ++o) {
            double x = (o + 0.5) * scale - 0.5;
            x = std::clamp(x, 0.0, static_cast<double>(n_in - 1));
            const int i0 = static_cast<int>(std::floor(x));
            const int i1 = std::min(i0 + 1, n_in - 1);
            t[o] = {i0, i1, static_cast<float>(x - i0)};
        }
        return t;
    };
    const auto ty = taps(height, src.height(), sy);
    const auto tx = taps(width, src.width(), sx);

    for (int r = 0; r < height; ++r) {
        const auto& a = ty[r];
        for (int c = 0; c < width; ++c) {
            const auto& b = tx[c];
            for (int k = 0; k < ch; ++k) {
                const float top = src.at(a.i0, b.i0, k) * (1 - b.w1) + src.at(a.i0, b.i1, k) * b.w1;
                const float bot = src.at(a.i1, b.i0, k) * (1 - b.w1) + src.at(a.i1, b.i1, k) * b.w1;
                dst.at(r, c, k) = top * (1 - a.w1) + bot * a.w1;
            }
        }
    }
    return dst;
}

Image pad_bottom_right(const Image& src, int height, int width) {
    if (height < src.height() || width < src.width()) throw ShapeError("padding target smaller than image");
    Image dst(height, width, src.channels());
    const std::size_t row_len = static_cast<std::size_t>(src.width()) * src.channels();
    for (int r = 0; r < src.height(); ++r) {
        std::memcpy(dst.data().data() + r * std::size_t(width) * src.channels(), src.data().data() + r * row_len,
                    row_len * sizeof(float));
    }
    return dst;
}

Image crop(const Image& src, int row, int col, int height, int width) {
    if (row < 0 || col < 0 || height <= 0 || width <= 0 || row + height > src.height() ||
        col + width > src.width()) {
        throw RangeError("crop window outside image");
    }
    Image dst(height, width, src.channels());
    const std::size_t row_len = static_cast<std::size_t>(width) * src.channels();
    for (int r = 0; r < height; ++r) {
        const std::size_t from = (static_cast<std::size_t>(row + r) * src.width() + col) * src.channels();
        std::memcpy(dst.data().data() + r * row_len, src.data().data() + from, row_len * sizeof(float));
    }
    return dst;
}

namespace {

Image from_mat(const cv::Mat& mat, const std::string& what) {
    if (mat.empty()) throw IoError("could not decode image " + what);
    double scale = 1.0;
    switch (mat.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    case CV_32F: scale = 1.0; break;
    default: throw IoError("unsupported pixel depth in " + what);
    }
    cv::Mat f;
    mat.convertTo(f, CV_32F, scale);
    const int h = f.rows, w = f.cols, cn = f.channels();
    Image img(h, w, 3);
    for (int r = 0; r < h; ++r) {
        const float* row = f.ptr<float>(r);
        for (int c = 0; c < w; ++c) {
            if (cn == 1) {
                for (int k = 0; k < 3; ++k) img.at(r, c, k) = row[c];
            } else {
                // OpenCV stores BGR(A)
                img.at(r, c, 0) = row[c * cn + 2];
                img.at(r, c, 1) = row[c * cn + 1];
                img.at(r, c, 2) = row[c * cn + 0];
            }
        }
    }
    return img;
}

cv::Mat to_mat8(const Image& image) {
    const int cn = image.channels() >= 3 ? 3 : 1;
    cv::Mat mat(image.height(), image.width(), cn == 3 ? CV_8UC3 : CV_8UC1);
    for (int r = 0; r < image.height(); ++r) {
        auto* row = mat.ptr<std::uint8_t>(r);
        for (int c = 0; c < image.width(); ++c) {
            auto q = [&](int k) {
                return static_cast<std::uint8_t>(
                    std::lround(std::clamp(image.at(r, c, k), 0.0f, 1.0f) * 255.0f));
            };
            if (cn == 3) {
                row[c * 3 + 0] = q(2);
                row[c * 3 + 1] = q(1);
                row[c * 3 + 2] = q(0);
            } else {
                row[c] = q(0);
            }
        }
    }
    return mat;
}

} // namespace

Image read_image(const std::string& path) {
    return from_mat(cv::imread(path, cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR), path);
}

Image decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) throw IoError("empty image buffer");
    cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
    return from_mat(cv::imdecode(buf, cv::IMREAD_ANYDEPTH | cv::IMREAD_ANYCOLOR), "from buffer");
}

void write_image(const std::string& path, const Image& image) {
    if (!cv::imwrite(path, to_mat8(image))) throw IoError("could not write image " + path);
}

std::vector<std::uint8_t> encode_png(const Image& image) {
    std::vector<std::uint8_t> out;
    if (!cv::imencode(".png", to_mat8(image), out)) throw IoError("PNG encoding failed");
    return out;
}

LabelMap read_label_map(const std::string& path) {
    cv::Mat mat = cv::imread(path, cv::IMREAD_UNCHANGED);
    if (mat.empty()) throw IoError("could not read label map " + path);
    if (mat.channels() != 1) throw IoError("label map must be single-channel: " + path);
    cv::Mat labels;
    mat.convertTo(labels, CV_32S);
    LabelMap out{labels.rows, labels.cols, {}};
    out.labels.resize(static_cast<std::size_t>(labels.rows) * labels.cols);
    for (int r = 0; r < labels.rows; ++r) {
        std::memcpy(&out.labels[static_cast<std::size_t>(r) * labels.cols], labels.ptr<std::int32_t>(r),
                    labels.cols * sizeof(std::int32_t));
    }
    return out;
}

void write_label_map(const std::string& path, const LabelMap& labels) {
    cv::Mat mat(labels.height, labels.width, CV_16UC1);
    for (int r = 0; r < labels.height; ++r) {
        auto* row = mat.ptr<std::uint16_t>(r);
        for (int c = 0; c < labels.width; ++c) {
            const auto v = labels.labels[static_cast<std::size_t>(r) * labels.width + c];
            if (v < 0 || v > 65535) throw RangeError("label id does not fit in 16 bits");
            row[c] = static_cast<std::uint16_t>(v);
        }
    }
    if (!cv::imwrite(path, mat)) throw IoError("could not write label map " + path);
}

} // namespace cellpilot
