#pragma once

#include "cellpilot/model.hpp"

#include <map>
#include <mutex>
#include <vector>

namespace cellpilot {

// Test double that answers every prompt with a registered ground-truth
// instance: the instance whose tight box best overlaps the prompt box, or the
// instance containing the first positive point. A box that equals an
// instance box grown by a uniform margin selects that instance outright. Logits are +10 on the
// instance and -10 elsewhere.
class OracleModel final : public PromptableModel {
  public:
    explicit OracleModel(int input_size = 128) : input_size_(input_size) {}

    int input_size() const override { return input_size_; }

    // Register an image at original resolution; the image and masks are
    // mapped through the standard preprocessing.
    void add_image(const Image& original, const std::vector<BinaryMask>& instances);

  protected:
    ImageEmbedding do_encode(const Image& image) const override;
    LogitGrid do_decode(const ImageEmbedding& embedding, const PromptGroup& prompts) const override;

  private:
    int input_size_;
    mutable std::mutex mutex_;
    std::map<std::uint64_t, std::vector<BinaryMask>> instances_;
};

} // namespace cellpilot
