#include "cellpilot/detector.hpp"

#include "cellpilot/errors.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <sys/wait.h>

namespace cellpilot {

std::vector<DetectorBox> parse_detector_json(const std::string& text, int height, int width) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("detector output is not JSON: ") + e.what(), e.byte);
    }
    if (!j.is_array()) throw FormatError("detector output must be a JSON list", 0);
    std::vector<DetectorBox> out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& e = j[i];
        try {
            DetectorBox b;
            b.box.row_min = e.at("row_min").get<int>();
            b.box.col_min = e.at("col_min").get<int>();
            b.box.row_max = e.at("row_max").get<int>();
            b.box.col_max = e.at("col_max").get<int>();
            b.score = e.at("score").get<double>();
            if (b.score < 0.0 || b.score > 1.0) throw RangeError("score outside [0, 1]");
            if (b.box.row_min < 0 || b.box.col_min < 0 || b.box.row_max >= height || b.box.col_max >= width ||
                b.box.row_min > b.box.row_max || b.box.col_min > b.box.col_max)
                throw RangeError("box outside image bounds");
            out.push_back(b);
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("detector box " + std::to_string(i) + ": " + ex.what(), 0);
        } catch (const RangeError& ex) {
            throw FormatError("detector box " + std::to_string(i) + ": " + ex.what(), 0);
        }
    }
    return out;
}

std::string detector_json(const std::vector<DetectorBox>& boxes) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& b : boxes) {
        j.push_back({{"row_min", b.box.row_min},
                     {"col_min", b.box.col_min},
                     {"row_max", b.box.row_max},
                     {"col_max", b.box.col_max},
                     {"score", b.score}});
    }
    return j.dump();
}

OracleDetector::OracleDetector(std::vector<BinaryMask> instances, int margin)
    : instances_(std::move(instances)), margin_(margin) {}

std::vector<DetectorBox> OracleDetector::detect(const Image& image) const {
    std::vector<DetectorBox> out;
    for (const auto& m : instances_) {
        if (m.height() != image.height() || m.width() != image.width())
            throw ShapeError("oracle instance does not match image size");
        if (!m.any()) continue;
        out.push_back({box_from_mask(m, margin_), 1.0});
    }
    return out;
}

std::vector<DetectorBox> BlobDetector::detect(const Image& image) const {
    const int h = image.height(), w = image.width();
    std::vector<int> gray(static_cast<std::size_t>(h) * w);
    std::array<std::size_t, 256> hist{};
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double s = 0;
            for (int k = 0; k < image.channels(); ++k) s += image.at(r, c, k);
            const int g = std::clamp(static_cast<int>(s / image.channels() * 255.0 + 0.5), 0, 255);
            gray[static_cast<std::size_t>(r) * w + c] = g;
            ++hist[g];
        }
    // Otsu
    const double total = static_cast<double>(gray.size());
    double sum_all = 0;
    for (int i = 0; i < 256; ++i) sum_all += i * static_cast<double>(hist[i]);
    double w0 = 0, sum0 = 0, best = -1;
    int thr = 127;
    for (int t = 0; t < 256; ++t) {
        w0 += hist[t];
        if (w0 == 0) continue;
        const double w1 = total - w0;
        if (w1 == 0) break;
        sum0 += t * static_cast<double>(hist[t]);
        const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
        const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            thr = t;
        }
    }
    std::size_t above = 0;
    for (int g : gray) above += g > thr;
    const bool bright = above * 2 <= gray.size();
    BinaryMask fg(h, w);
    for (std::size_t i = 0; i < gray.size(); ++i) fg.data()[i] = bright ? gray[i] > thr : gray[i] <= thr;

    std::vector<DetectorBox> out;
    for (const auto& comp : connected_components(fg, Connectivity::four)) {
        const auto area = comp.area();
        if (area < static_cast<std::size_t>(min_area_)) break; // sorted by area
        const auto box = box_from_mask(comp);
        const double box_area =
            static_cast<double>(box.row_max - box.row_min + 1) * (box.col_max - box.col_min + 1);
        out.push_back({box, std::clamp(static_cast<double>(area) / box_area, 0.0, 1.0)});
    }
    std::sort(out.begin(), out.end(), [](const DetectorBox& a, const DetectorBox& b) {
        return std::tie(a.box.row_min, a.box.col_min) < std::tie(b.box.row_min, b.box.col_min);
    });
    return out;
}

ProcessDetector::ProcessDetector(std::string command, std::chrono::seconds timeout)
    : command_(std::move(command)), timeout_(timeout) {}

std::vector<DetectorBox> ProcessDetector::detect(const Image& image) const {
    namespace fs = std::filesystem;
    std::random_device rd;
    const fs::path tmp = fs::temp_directory_path() / ("cellpilot_detect_" + std::to_string(rd()) + ".png");
    write_image(tmp.string(), image);
    const std::string cmd = "timeout " + std::to_string(timeout_.count()) + " " + command_ + " '" +
                            tmp.string() + "'";
    std::string output;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (!pipe) {
        fs::remove(tmp);
        throw ModelError("could not start detector process");
    }
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) output.append(buf.data(), n);
    const int status = ::pclose(pipe);
    fs::remove(tmp);
    if (WIFEXITED(status) && WEXITSTATUS(status) == 124)
        throw ModelError("detector timed out after " + std::to_string(timeout_.count()) + " s; retry later");
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
        throw ModelError("detector process failed with status " + std::to_string(status));
    try {
        return parse_detector_json(output, image.height(), image.width());
    } catch (const FormatError& e) {
        throw ModelError(std::string("detector returned malformed output: ") + e.what());
    }
}

HttpDetector::HttpDetector(std::string url, std::chrono::seconds timeout)
    : url_(std::move(url)), timeout_(timeout) {}

std::vector<DetectorBox> HttpDetector::detect(const Image& image) const {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(url_, m, re)) throw ConfigError("invalid detector URL '" + url_ + "'");
    httplib::Client cli(m[1].str());
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    const std::string path = m[2].matched ? m[2].str() : "/";
    const auto png = encode_png(image);
    auto res = cli.Post(path, std::string(png.begin(), png.end()), "image/png");
    if (!res) {
        throw ModelError("detector unreachable (" + httplib::to_string(res.error()) + "); retry later");
    }
    if (res->status != 200) throw ModelError("detector returned HTTP " + std::to_string(res->status));
    try {
        return parse_detector_json(res->body, image.height(), image.width());
    } catch (const FormatError& e) {
        throw ModelError(std::string("detector returned malformed output: ") + e.what());
    }
}

} // namespace cellpilot
