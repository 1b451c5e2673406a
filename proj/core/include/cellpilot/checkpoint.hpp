#pragma once

#include "cellpilot/autograd.hpp"
#include "cellpilot/toy_model.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <vector>

namespace cellpilot {

inline constexpr int kCheckpointFormatVersion = 1;

struct NamedArray {
    std::string name;
    Matrix value;
    bool trainable = false;
};

// Self-describing container:
//   "CPCK" | u32 format version | u64 header length | header JSON |
//   float64 payload (little endian) | u32 CRC-32 of all preceding bytes.
// The header holds caller metadata under "meta" and the array table.
void write_container(const std::string& path, const nlohmann::json& meta, const std::vector<NamedArray>& arrays);

struct Container {
    nlohmann::json meta;
    std::vector<NamedArray> arrays;
};
Container read_container(const std::string& path);

void save_checkpoint(const ToyModel& model, const std::string& path);

// Rebuilds the model from the recorded configuration.
std::unique_ptr<ToyModel> load_checkpoint(const std::string& path);

// Loads parameters into an existing model; the recorded configuration must
// match the model's (ConfigError otherwise).
void load_weights(ToyModel& model, const std::string& path);

} // namespace cellpilot
