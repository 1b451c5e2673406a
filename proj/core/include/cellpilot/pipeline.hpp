#pragma once

#include "cellpilot/detector.hpp"
#include "cellpilot/image.hpp"
#include "cellpilot/mask.hpp"
#include "cellpilot/model.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cellpilot {

inline constexpr int kDefaultModelSide = 1024;

// Longest side scaled to `target`, content at top-left, zero padding
// bottom/right.
struct PreprocessRecord {
    int original_height = 0;
    int original_width = 0;
    double scale = 1.0;
    int scaled_height = 0;
    int scaled_width = 0;
    int padded_size = kDefaultModelSide;

    int pad_bottom() const { return padded_size - scaled_height; }
    int pad_right() const { return padded_size - scaled_width; }

    bool operator==(const PreprocessRecord&) const = default;
};

struct Preprocessed {
    Image image;
    PreprocessRecord record;
};

PreprocessRecord make_preprocess_record(int height, int width, int target = kDefaultModelSide);
Preprocessed preprocess(const Image& image, int target = kDefaultModelSide);

// Crop the padding, resize logits bilinearly to the original size and
// threshold (logit 0 == probability 0.5).
BinaryMask postprocess_mask(const LogitGrid& logits, const PreprocessRecord& rec, double threshold = 0.0);

// Nearest-neighbour transfer of an original-resolution mask into model space.
BinaryMask mask_to_model_space(const BinaryMask& mask, const PreprocessRecord& rec);

PointPrompt to_model_space(const PointPrompt& p, const PreprocessRecord& rec);
BoxPrompt to_model_space(const BoxPrompt& b, const PreprocessRecord& rec);
Prompt to_model_space(const Prompt& p, const PreprocessRecord& rec);
PointPrompt to_original_space(const PointPrompt& p, const PreprocessRecord& rec);

PromptGroup model_space_group(const std::vector<Prompt>& history, const PreprocessRecord& rec);

enum class MaskSource { automatic, user };
std::string to_string(MaskSource s);
MaskSource mask_source_from_string(const std::string& s);

struct MaskRecord {
    int id = 0;
    BinaryMask mask;             // original resolution
    std::vector<Prompt> history; // original-image coordinates, in order
    MaskSource source = MaskSource::user;
    std::optional<double> score; // detector confidence for automatic masks
    LogitGrid logits;            // model-resolution logits of the current mask
    std::vector<BinaryMask> previous; // masks before each refinement, for undo
    std::int64_t created_ms = 0;
    std::int64_t updated_ms = 0;
};

// Live annotation state for one image. Not internally synchronised: callers
// serialise mutations on a session.
class Session {
  public:
    Session(std::shared_ptr<const PromptableModel> model, Image image);

    const Image& image() const noexcept { return image_; }
    const PreprocessRecord& record() const noexcept { return record_; }
    const ImageEmbedding& embedding() const noexcept { return embedding_; }
    const std::vector<MaskRecord>& masks() const noexcept { return masks_; }
    const MaskRecord& mask(int id) const;
    int next_id() const noexcept { return next_id_; }

    // Replace all automatic masks with one box-prompted decode per detector box
    // scoring at least `min_score`. Returns the new ids.
    std::vector<int> auto_segment(const CellDetector& detector, double min_score = 0.5);
    const MaskRecord& add_mask(const Prompt& prompt);
    const MaskRecord& refine_mask(int id, const Prompt& prompt);
    const MaskRecord& undo_last(int id);
    void remove_mask(int id);

    // Decode a prompt history from scratch.
    BinaryMask replay(const std::vector<Prompt>& history) const;

    // Rebuild a record from stored state (used when importing sessions). A
    // stored mask is kept as is; otherwise the history is decoded. The undo
    // stack is rebuilt by replaying history prefixes.
    struct StoredMask {
        int id = 0;
        MaskSource source = MaskSource::user;
        std::vector<Prompt> history;
        std::optional<double> score;
        std::optional<BinaryMask> mask;
        std::int64_t created_ms = 0;
        std::int64_t updated_ms = 0;
    };
    const MaskRecord& restore_mask(StoredMask stored);

  private:
    std::pair<LogitGrid, BinaryMask> decode(const std::vector<Prompt>& history) const;
    void check_prompt(const Prompt& p) const;
    MaskRecord& find(int id);

    std::shared_ptr<const PromptableModel> model_;
    Image image_;
    PreprocessRecord record_;
    ImageEmbedding embedding_;
    std::vector<MaskRecord> masks_;
    int next_id_ = 1;
};

std::int64_t now_ms();

} // namespace cellpilot
