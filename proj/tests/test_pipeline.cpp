#include "cellpilot/checkpoint.hpp"
#include "cellpilot/dataset.hpp"
#include "cellpilot/errors.hpp"
#include "cellpilot/oracle_model.hpp"
#include "cellpilot/pipeline.hpp"
#include "cellpilot/toy_model.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace cellpilot;

namespace {

class FixedDetector final : public CellDetector {
  public:
    explicit FixedDetector(std::vector<DetectorBox> boxes) : boxes_(std::move(boxes)) {}
    std::vector<DetectorBox> detect(const Image&) const override { return boxes_; }

  private:
    std::vector<DetectorBox> boxes_;
};

AnnotatedImage blob(std::uint64_t seed, int size = 128) {
    BlobConfig bc;
    bc.count = 1;
    bc.size = size;
    bc.seed = seed;
    return make_blob_dataset(bc).at(0);
}

std::shared_ptr<const ToyModel> trained_model() {
    static std::shared_ptr<const ToyModel> m = load_checkpoint(CELLPILOT_TEST_DATA_DIR "/toy_blobs.ckpt");
    return m;
}

LogitGrid logits_from(const BinaryMask& m, double on, double off) {
    LogitGrid g;
    g.values = Matrix::Constant(m.height(), m.width(), off);
    for (int r = 0; r < m.height(); ++r)
        for (int c = 0; c < m.width(); ++c)
            if (m(r, c)) g.values(r, c) = on;
    return g;
}

} // namespace

TEST_CASE("preprocess record arithmetic") {
    const auto a = make_preprocess_record(2048, 1024, 1024);
    CHECK(a.scaled_height == 1024);
    CHECK(a.scaled_width == 512);
    CHECK(a.pad_bottom() == 0);
    CHECK(a.pad_right() == 512);
    CHECK(a.scale == 0.5);

    const auto b = make_preprocess_record(1024, 1024, 1024);
    CHECK(b.scaled_height == 1024);
    CHECK(b.scaled_width == 1024);
    CHECK(b.pad_bottom() == 0);
    CHECK(b.pad_right() == 0);

    // 300 * 1024 / 500 = 614.4
    const auto c = make_preprocess_record(500, 300, 1024);
    CHECK(c.scaled_height == 1024);
    CHECK(c.scaled_width == 614);
    // 1000 * 128 / 1280 = 100 exactly; 1000 * 128 / 1536 = 83.33
    CHECK(make_preprocess_record(1000, 1280, 128).scaled_height == 100);
    CHECK(make_preprocess_record(1000, 1536, 128).scaled_height == 83);
    // a half rounds up: 5 * 128 / 256 = 2.5
    CHECK(make_preprocess_record(5, 256, 128).scaled_height == 3);

    CHECK_THROWS_AS(make_preprocess_record(0, 10), ShapeError);
}

TEST_CASE("preprocess places content top-left and zero pads") {
    Image img(20, 10, 3);
    for (auto& v : img.data()) v = 0.75f;
    const auto pre = preprocess(img, 40);
    CHECK(pre.image.height() == 40);
    CHECK(pre.image.width() == 40);
    CHECK(pre.record.scaled_width == 20);
    CHECK(pre.image.at(0, 0, 0) == doctest::Approx(0.75f));
    CHECK(pre.image.at(39, 19, 2) == doctest::Approx(0.75f));
    CHECK(pre.image.at(0, 20, 0) == 0.0f);
    CHECK(pre.image.at(39, 39, 1) == 0.0f);
}

TEST_CASE("postprocess thresholds at logit zero") {
    const auto rec = make_preprocess_record(10, 10, 10);
    LogitGrid all_neg{Matrix::Constant(10, 10, -3.0)};
    CHECK_FALSE(postprocess_mask(all_neg, rec).any());
    LogitGrid slightly_pos{Matrix::Constant(10, 10, 1e-3)};
    CHECK(postprocess_mask(slightly_pos, rec).area() == 100);
    LogitGrid slightly_neg{Matrix::Constant(10, 10, -1e-3)};
    CHECK(postprocess_mask(slightly_neg, rec).area() == 0);
    LogitGrid wrong{Matrix::Zero(8, 8)};
    CHECK_THROWS_AS(postprocess_mask(wrong, rec), ShapeError);
}

TEST_CASE("rectangles survive preprocess and postprocess") {
    Rng rng(1);
    for (auto [h, w] : std::vector<std::pair<int, int>>{{300, 500}, {500, 300}, {777, 1201}, {1024, 1024}, {130, 90}}) {
        for (int t = 0; t < 5; ++t) {
            std::uniform_int_distribution<int> rr(0, h - 1), cc(0, w - 1);
            int r0 = rr(rng), r1 = rr(rng), c0 = cc(rng), c1 = cc(rng);
            if (r0 > r1) std::swap(r0, r1);
            if (c0 > c1) std::swap(c0, c1);
            if ((r1 - r0) < h / 5 || (c1 - c0) < w / 5) {
                --t;
                continue;
            }
            BinaryMask m(h, w);
            for (int r = r0; r <= r1; ++r)
                for (int c = c0; c <= c1; ++c) m.set(r, c);
            const auto rec = make_preprocess_record(h, w, 1024);
            const auto model_mask = mask_to_model_space(m, rec);
            const auto back = postprocess_mask(logits_from(model_mask, 8.0, -8.0), rec);
            CHECK(iou(back, m) >= 0.99);
        }
    }
}

TEST_CASE("prompt coordinates map into model space") {
    const auto rec = make_preprocess_record(500, 300, 1024);
    const auto p = to_model_space(PointPrompt{250, 150, Polarity::negative}, rec);
    CHECK(p.polarity == Polarity::negative);
    CHECK(std::abs(p.row - 250 * rec.scale) <= 1.0);
    CHECK(std::abs(p.col - 150 * rec.scale) <= 1.0);
    const auto q = to_original_space(p, rec);
    CHECK(std::abs(q.row - 250) <= 1);
    CHECK(std::abs(q.col - 150) <= 1);
    const auto b = to_model_space(BoxPrompt{0, 0, 499, 299}, rec);
    CHECK(b.row_min == 0);
    CHECK(b.row_max == rec.scaled_height - 1);
    CHECK(b.col_max == rec.scaled_width - 1);
}

TEST_CASE("oracle detector and oracle model reproduce the instances") {
    const auto item = blob(2);
    auto model = std::make_shared<OracleModel>();
    model->add_image(item.image, item.instances);
    Session s(model, item.image);
    OracleDetector det(item.instances);
    const auto ids = s.auto_segment(det);
    REQUIRE(ids.size() == item.instances.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& rec = s.mask(ids[i]);
        CHECK(rec.mask == item.instances[i]);
        CHECK(rec.source == MaskSource::automatic);
        CHECK(rec.score == 1.0);
        CHECK(rec.history.size() == 1);
    }
}

TEST_CASE("auto segmentation with no boxes") {
    const auto item = blob(3);
    Session s(std::make_shared<ToyModel>(), item.image);
    FixedDetector none({});
    CHECK(s.auto_segment(none).empty());
    CHECK(s.masks().empty());
}

TEST_CASE("many boxes share one embedding") {
    const auto item = blob(4);
    auto model = std::make_shared<ToyModel>();
    std::vector<DetectorBox> boxes;
    for (int i = 0; i < 50; ++i) boxes.push_back({{i, i, i + 40, i + 50}, 0.9});
    Session s(model, item.image);
    model->reset_counters();
    FixedDetector det(boxes);
    s.auto_segment(det);
    CHECK(model->encoder_calls() == 0);
    CHECK(model->decoder_calls() == 50);
}

TEST_CASE("auto segmentation respects the score threshold and replaces old automatic masks") {
    const auto item = blob(5);
    auto model = std::make_shared<OracleModel>();
    model->add_image(item.image, item.instances);
    Session s(model, item.image);
    const auto user = s.add_mask(PointPrompt{0, 0, Polarity::positive}).id;
    std::vector<DetectorBox> boxes;
    for (std::size_t i = 0; i < item.instances.size(); ++i)
        boxes.push_back({box_from_mask(item.instances[i]), i == 0 ? 0.2 : 0.8});
    FixedDetector det(boxes);
    const auto first = s.auto_segment(det, 0.5);
    CHECK(first.size() == item.instances.size() - 1);
    const auto second = s.auto_segment(det, 0.5);
    CHECK(second.size() == first.size());
    for (int id : second)
        for (int old : first) CHECK(id != old);
    CHECK(s.masks().size() == second.size() + 1);
    CHECK_NOTHROW(s.mask(user));
}

TEST_CASE("refine, undo and replay") {
    const auto item = blob(6);
    Session s(trained_model(), item.image);
    const auto& gt = item.instances.at(0);
    const auto bb = box_from_mask(gt);
    const int id = s.add_mask(BoxPrompt{bb.row_min, bb.col_min, bb.row_max, bb.col_max}).id;
    const auto before = s.mask(id).mask;

    const auto& refined = s.refine_mask(id, PointPrompt{bb.row_min, bb.col_min, Polarity::negative});
    CHECK(refined.history.size() == 2);
    CHECK(s.replay(refined.history) == refined.mask);

    const auto& undone = s.undo_last(id);
    CHECK(undone.history.size() == 1);
    CHECK(undone.mask == before);
    CHECK_THROWS_AS(s.undo_last(id), RangeError);
}

TEST_CASE("replayed histories equal incremental masks") {
    const auto item = blob(7);
    Session s(trained_model(), item.image);
    Rng rng(8);
    std::uniform_int_distribution<int> coord(0, 127);
    std::bernoulli_distribution pos(0.5);
    for (int seq = 0; seq < 10; ++seq) {
        const auto& gt = item.instances.at(seq % item.instances.size());
        int id = s.add_mask(box_from_mask(gt, seq % 4)).id;
        for (int k = 0; k < 4; ++k) {
            const auto& rec = s.refine_mask(
                id, PointPrompt{coord(rng), coord(rng), pos(rng) ? Polarity::positive : Polarity::negative});
            CHECK(rec.history.size() == static_cast<std::size_t>(k + 2));
            CHECK(s.replay(rec.history) == rec.mask);
        }
    }
}

TEST_CASE("masks from the trained toy model follow their prompts") {
    // Box masks are judged in aggregate: where two blobs touch, a model at
    // this scale may bleed into the neighbour for the odd instance.
    int checked = 0, contained = 0;
    double inside_sum = 0.0;
    for (std::uint64_t seed = 20; seed < 25; ++seed) {
        const auto item = blob(seed);
        Session s(trained_model(), item.image);
        for (const auto& gt : item.instances) {
            // point at the deepest interior pixel
            const auto centre = component_center(gt, Polarity::positive);
            const auto& m = s.add_mask(centre).mask;
            CHECK(m.any());
            CHECK(m(centre.row, centre.col));

            const auto box = box_from_mask(gt, 2);
            const auto& bm = s.add_mask(box).mask;
            REQUIRE(bm.any());
            const auto grown = mask_from_box({box.row_min - 8, box.col_min - 8, box.row_max + 8, box.col_max + 8},
                                             bm.height(), bm.width());
            std::size_t inside = 0;
            for (int r = 0; r < bm.height(); ++r)
                for (int c = 0; c < bm.width(); ++c) inside += bm(r, c) && grown(r, c);
            const double frac = static_cast<double>(inside) / static_cast<double>(bm.area());
            inside_sum += frac;
            contained += frac >= 0.9;
            ++checked;
        }
    }
    REQUIRE(checked > 10);
    CHECK(inside_sum / checked >= 0.9);
    CHECK(contained >= 0.8 * checked);
}

TEST_CASE("mask ids and removal") {
    const auto item = blob(9);
    Session s(std::make_shared<ToyModel>(), item.image);
    const int a = s.add_mask(PointPrompt{10, 10, Polarity::positive}).id;
    const int b = s.add_mask(PointPrompt{20, 20, Polarity::positive}).id;
    CHECK(a != b);

    const auto before = s.masks().size();
    const int c = s.add_mask(BoxPrompt{5, 5, 40, 40}).id;
    s.remove_mask(c);
    CHECK(s.masks().size() == before);
    CHECK(s.masks()[0].id == a);
    CHECK(s.masks()[1].id == b);
    CHECK_THROWS_AS(s.remove_mask(c), NotFoundError);
    CHECK_THROWS_AS(s.mask(c), NotFoundError);
    CHECK_THROWS_AS(s.refine_mask(c, PointPrompt{1, 1, Polarity::positive}), NotFoundError);

    FixedDetector det({{{30, 30, 60, 60}, 1.0}});
    const auto ids = s.auto_segment(det, 0.0);
    for (int id : ids) CHECK_NOTHROW(s.remove_mask(id));
}

TEST_CASE("prompts outside the image are rejected") {
    const auto item = blob(10);
    Session s(std::make_shared<ToyModel>(), item.image);
    CHECK_THROWS_AS(s.add_mask(PointPrompt{128, 0, Polarity::positive}), RangeError);
    CHECK_THROWS_AS(s.add_mask(BoxPrompt{10, 10, 5, 20}), RangeError);
    CHECK(s.masks().empty());
}

TEST_CASE("sessions on non-square images work in original coordinates") {
    BlobConfig bc;
    bc.count = 1;
    bc.size = 128;
    bc.seed = 11;
    auto item = make_blob_dataset(bc).at(0);
    // crop to a 128 x 96 image
    Image img = crop(item.image, 0, 0, 128, 96);
    auto model = std::make_shared<ToyModel>();
    Session s(model, img);
    CHECK(s.record().scaled_height == 128);
    CHECK(s.record().scaled_width == 96);
    const auto& m = s.add_mask(PointPrompt{100, 90, Polarity::positive});
    CHECK(m.mask.height() == 128);
    CHECK(m.mask.width() == 96);
}

TEST_CASE("restoring stored masks rebuilds undo state") {
    const auto item = blob(12);
    auto model = trained_model();
    Session s(model, item.image);
    const auto bb = box_from_mask(item.instances.at(0));
    const int id = s.add_mask(bb).id;
    s.refine_mask(id, PointPrompt{bb.row_min, bb.col_min, Polarity::negative});
    const auto& orig = s.mask(id);

    Session t(model, item.image);
    Session::StoredMask stored{orig.id, orig.source, orig.history, orig.score, orig.mask, 5, 6};
    const auto& r = t.restore_mask(stored);
    CHECK(r.mask == orig.mask);
    CHECK(r.created_ms == 5);
    CHECK(r.updated_ms == 6);
    CHECK(t.next_id() == id + 1);
    CHECK(t.undo_last(id).mask == s.undo_last(id).mask);

    Session::StoredMask dup{id, MaskSource::user, {bb}, std::nullopt, std::nullopt, 0, 0};
    CHECK_THROWS_AS(t.restore_mask(dup), FormatError);
    Session::StoredMask empty{id + 5, MaskSource::user, {}, std::nullopt, std::nullopt, 0, 0};
    CHECK_THROWS_AS(t.restore_mask(empty), FormatError);
}
