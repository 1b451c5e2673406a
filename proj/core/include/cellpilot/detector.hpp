#pragma once

#include "cellpilot/image.hpp"
#include "cellpilot/mask.hpp"

#include <chrono>
#include <string>
#include <vector>

namespace cellpilot {

struct DetectorBox {
    BoxPrompt box;
    double score = 1.0;

    bool operator==(const DetectorBox&) const = default;
};

// Source of candidate cell boxes for automatic segmentation (original image
// coordinates).
class CellDetector {
  public:
    virtual ~CellDetector() = default;
    virtual std::vector<DetectorBox> detect(const Image& image) const = 0;
};

// Wire format: JSON list of {row_min, col_min, row_max, col_max, score}.
std::vector<DetectorBox> parse_detector_json(const std::string& text, int height, int width);
std::string detector_json(const std::vector<DetectorBox>& boxes);

// Tight boxes around known instances, score 1.
class OracleDetector final : public CellDetector {
  public:
    explicit OracleDetector(std::vector<BinaryMask> instances, int margin = 0);
    std::vector<DetectorBox> detect(const Image& image) const override;

  private:
    std::vector<BinaryMask> instances_;
    int margin_;
};

// Weight-free baseline: Otsu threshold on intensity, minority side taken as
// foreground, 4-connected components above a minimum area. Score is the
// fraction of the bounding box the component fills.
class BlobDetector final : public CellDetector {
  public:
    explicit BlobDetector(int min_area = 12) : min_area_(min_area) {}
    std::vector<DetectorBox> detect(const Image& image) const override;

  private:
    int min_area_;
};

// Runs `command <image.png>` and parses its stdout as detector JSON.
class ProcessDetector final : public CellDetector {
  public:
    ProcessDetector(std::string command, std::chrono::seconds timeout = std::chrono::seconds(30));
    std::vector<DetectorBox> detect(const Image& image) const override;

  private:
    std::string command_;
    std::chrono::seconds timeout_;
};

// POSTs the image as PNG to `url` (http://host:port/path) and parses the
// JSON response.
class HttpDetector final : public CellDetector {
  public:
    HttpDetector(std::string url, std::chrono::seconds timeout = std::chrono::seconds(30));
    std::vector<DetectorBox> detect(const Image& image) const override;

  private:
    std::string url_;
    std::chrono::seconds timeout_;
};

} // namespace cellpilot
