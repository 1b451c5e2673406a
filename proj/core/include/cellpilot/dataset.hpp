#pragma once

#include "cellpilot/image.hpp"
#include "cellpilot/mask.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cellpilot {

// An image with its instance masks at the same resolution.
struct AnnotatedImage {
    std::string id;
    Image image;
    std::vector<BinaryMask> instances;
};

// Resize/pad image and instances into the model's square input frame.
// Instances that vanish at the new resolution are dropped.
AnnotatedImage to_model_frame(const AnnotatedImage& src, int input_size);

std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0);

// Marks round(fraction * n) ids as validation: the ones with the smallest
// seeded hash. Independent of input order and of the machine.
std::vector<bool> split_validation(const std::vector<std::string>& ids, double fraction, std::uint64_t seed);

// One mask per positive label, ascending by label; empty labels skipped.
std::vector<BinaryMask> instances_from_label_map(const LabelMap& labels);
// Later instances overwrite earlier ones where they overlap.
LabelMap label_map_from_instances(const std::vector<BinaryMask>& instances, int height, int width);

struct BlobConfig {
    int count = 200;
    int size = 128;
    int min_instances = 3;
    int max_instances = 8;
    double min_semi_axis = 5.0;
    double max_semi_axis = 14.0;
    double noise_std = 0.04;
    std::uint64_t seed = 0;

    void validate() const;
};

// Synthetic "cells": non-overlapping stained ellipses on a noisy background.
std::vector<AnnotatedImage> make_blob_dataset(const BlobConfig& cfg);
AnnotatedImage make_blob_image(const BlobConfig& cfg, Rng& rng, std::string id);

} // namespace cellpilot
