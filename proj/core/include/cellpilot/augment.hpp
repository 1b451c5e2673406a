#pragma once

#include "cellpilot/image.hpp"
#include "cellpilot/mask.hpp"

#include <array>
#include <string>
#include <vector>

namespace cellpilot::augment {

// Symmetries of the square: rotations (clockwise) and reflections.
enum class D4 { e, r90, r180, r270, fh, fv, fd, fa };

inline constexpr std::array<D4, 8> kD4All = {D4::e, D4::r90, D4::r180, D4::r270,
                                             D4::fh, D4::fv, D4::fd, D4::fa};

std::string to_string(D4 g);

// compose(a, b) applies b first, then a.
D4 compose(D4 a, D4 b);
D4 inverse(D4 g);

// Pixel coordinate map on an n x n grid.
std::pair<int, int> map_coord(D4 g, int row, int col, int n);

struct Sample {
    Image image;
    std::vector<BinaryMask> masks;
    std::vector<Prompt> prompts;
};

// Same transform applied to image, every mask and every prompt. Square inputs only.
Sample apply_d4(D4 g, const Sample& s);
BinaryMask apply_d4(D4 g, const BinaryMask& m);
Image apply_d4(D4 g, const Image& img);
Prompt apply_d4(D4 g, const Prompt& p, int n);

struct AugmentationConfig {
    double scale_min = 0.5;
    double scale_max = 1.0;
    double aspect_min = 0.9;
    double aspect_max = 1.1;
    double hue_limit_deg = 20.0;
    double saturation_limit = 0.3;
    double value_limit = 0.2;
    double d4_probability = 1.0;
    double crop_probability = 0.5;
    double hsv_probability = 0.5;

    void validate() const;
};

struct CropWindow {
    int row = 0;
    int col = 0;
    int height = 0;
    int width = 0;
};

struct CropResult {
    Sample sample;
    CropWindow window;
    std::vector<std::size_t> kept; // indices of instances that survived the crop
};

// Random window (area fraction in the scale range, aspect in the aspect
// range) resized to output_size x output_size; masks use nearest neighbour and
// instances left empty are dropped. Prompts are not carried through.
CropResult random_resized_crop(const Sample& s, const AugmentationConfig& cfg, Rng& rng, int output_size);

// Deterministic crop of a given window, same resize rules.
CropResult crop_and_resize(const Sample& s, const CropWindow& window, int output_size);

// Additive HSV shift: hue in degrees (cyclic), saturation and value clamped to [0, 1].
Image shift_hsv(const Image& img, double hue_deg, double saturation, double value);
Image hsv_jitter(const Image& img, const AugmentationConfig& cfg, Rng& rng);

void rgb_to_hsv(float r, float g, float b, double& h, double& s, double& v);
void hsv_to_rgb(double h, double s, double v, float& r, float& g, float& b);

BinaryMask resize_nearest(const BinaryMask& m, int height, int width);

// Full training-time pipeline: D4, crop, colour jitter with the configured
// probabilities. Prompts on the input are discarded.
Sample augment_sample(const Sample& s, const AugmentationConfig& cfg, Rng& rng, int output_size);

} // namespace cellpilot::augment
