#include "cellpilot/oracle_model.hpp"

#include "cellpilot/errors.hpp"
#include "cellpilot/pipeline.hpp"

#include <algorithm>

namespace cellpilot {

void OracleModel::add_image(const Image& original, const std::vector<BinaryMask>& instances) {
    Preprocessed pre = preprocess(original, input_size_);
    std::vector<BinaryMask> mapped;
    mapped.reserve(instances.size());
    for (const auto& m : instances) mapped.push_back(mask_to_model_space(m, pre.record));
    std::lock_guard lock(mutex_);
    instances_[pre.image.content_hash()] = std::move(mapped);
}

ImageEmbedding OracleModel::do_encode(const Image& image) const {
    (void)image;
    ImageEmbedding emb;
    emb.grid_h = emb.grid_w = 1;
    emb.channels = 0;
    return emb;
}

namespace {

double box_iou(const BoxPrompt& a, const BoxPrompt& b) {
    const int r0 = std::max(a.row_min, b.row_min), r1 = std::min(a.row_max, b.row_max);
    const int c0 = std::max(a.col_min, b.col_min), c1 = std::min(a.col_max, b.col_max);
    const double inter = (r1 >= r0 && c1 >= c0) ? static_cast<double>(r1 - r0 + 1) * (c1 - c0 + 1) : 0.0;
    auto area = [](const BoxPrompt& x) {
        return static_cast<double>(x.row_max - x.row_min + 1) * (x.col_max - x.col_min + 1);
    };
    return inter / (area(a) + area(b) - inter);
}

// True when `prompt` equals `tight` grown by one uniform margin and clamped to
// the image, i.e. the box the simulator would have produced for this instance.
bool uniform_margin_match(const BoxPrompt& tight, const BoxPrompt& prompt, int size) {
    const int m = std::max({tight.row_min - prompt.row_min, tight.col_min - prompt.col_min,
                            prompt.row_max - tight.row_max, prompt.col_max - tight.col_max});
    if (m < 0) return false;
    const BoxPrompt grown{std::max(tight.row_min - m, 0), std::max(tight.col_min - m, 0),
                          std::min(tight.row_max + m, size - 1), std::min(tight.col_max + m, size - 1)};
    return grown == prompt;
}

} // namespace

LogitGrid OracleModel::do_decode(const ImageEmbedding& embedding, const PromptGroup& prompts) const {
    std::lock_guard lock(mutex_);
    const auto it = instances_.find(embedding.image_key);
    if (it == instances_.end()) throw ModelError("oracle model has no ground truth for this image");
    const auto& inst = it->second;

    const BinaryMask* chosen = nullptr;
    if (!prompts.boxes.empty()) {
        const BoxPrompt& prompt = prompts.boxes.front();
        for (const auto& m : inst) {
            if (m.any() && uniform_margin_match(box_from_mask(m), prompt, input_size_)) {
                chosen = &m;
                break;
            }
        }
        double best = 0.0;
        for (const auto& m : inst) {
            if (chosen || !m.any()) continue;
            const double s = box_iou(box_from_mask(m), prompt);
            if (s > best) {
                best = s;
                chosen = &m;
            }
        }
    } else {
        for (const auto& p : prompts.points) {
            if (p.polarity != Polarity::positive) continue;
            for (const auto& m : inst)
                if (m(p.row, p.col)) {
                    chosen = &m;
                    break;
                }
            break;
        }
    }
    LogitGrid out{Matrix::Constant(input_size_, input_size_, -10.0)};
    if (chosen) {
        for (int r = 0; r < input_size_; ++r)
            for (int c = 0; c < input_size_; ++c)
                if ((*chosen)(r, c)) out.values(r, c) = 10.0;
    }
    return out;
}

} // namespace cellpilot
