#include "cellpilot/dataio.hpp"
#include "cellpilot/errors.hpp"
#include "cellpilot/toy_model.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

using namespace cellpilot;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cellpilot_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

AnnotatedImage blob(std::uint64_t seed, int size = 64) {
    BlobConfig bc;
    bc.count = 1;
    bc.size = size;
    bc.seed = seed;
    return make_blob_dataset(bc).at(0);
}

} // namespace

TEST_CASE("label maps split into one mask per label") {
    TempDir tmp("labels");
    LabelMap lm{6, 5, std::vector<std::int32_t>(30, 0)};
    auto at = [&](int r, int c) -> std::int32_t& { return lm.labels[static_cast<std::size_t>(r) * 5 + c]; };
    at(0, 0) = 1;
    at(0, 1) = 1;
    at(2, 2) = 2;
    at(5, 4) = 5;
    at(4, 4) = 5;
    const auto path = (tmp.path / "lm.png").string();
    write_label_map(path, lm);

    const auto masks = dataio::load_annotations(path, dataio::AnnotationKind::labelmap);
    REQUIRE(masks.size() == 3);
    CHECK(oracle::pixels(masks[0]) == std::set<std::pair<int, int>>{{0, 0}, {0, 1}});
    CHECK(oracle::pixels(masks[1]) == std::set<std::pair<int, int>>{{2, 2}});
    CHECK(oracle::pixels(masks[2]) == std::set<std::pair<int, int>>{{4, 4}, {5, 4}});

    // labels above 255 survive the 16-bit file
    at(3, 3) = 1000;
    write_label_map(path, lm);
    const auto back = read_label_map(path);
    CHECK(back.labels == lm.labels);

    LabelMap zero{4, 4, std::vector<std::int32_t>(16, 0)};
    write_label_map(path, zero);
    CHECK(dataio::load_annotations(path, dataio::AnnotationKind::labelmap).empty());
}

TEST_CASE("RLE JSON round trip") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto m = oracle::random_mask(7 + static_cast<int>(seed % 5), 11, 0.3, rng);
        const auto rle = rle_encode(m);
        const auto j = dataio::rle_to_json(rle);
        CHECK(j.at("size") == nlohmann::json::array({m.height(), m.width()}));
        CHECK(rle_decode(dataio::rle_from_json(nlohmann::json::parse(j.dump()))) == m);
        // COCO string counts are accepted as well
        const nlohmann::json js{{"size", {m.height(), m.width()}}, {"counts", rle_counts_to_string(rle)}};
        CHECK(rle_decode(dataio::rle_from_json(js)) == m);
    }
    CHECK_THROWS_AS(dataio::rle_from_json({{"size", {3}}, {"counts", {9}}}), FormatError);
    CHECK_THROWS_AS(dataio::rle_from_json({{"size", {3, 3}}, {"counts", {4, 4}}}), FormatError);
    CHECK_THROWS_AS(dataio::rle_from_json({{"size", {3, 3}}}), FormatError);
}

TEST_CASE("prompt JSON") {
    const Prompt p = PointPrompt{3, 4, Polarity::negative};
    const auto j = dataio::prompt_to_json(p);
    CHECK(j == nlohmann::json{{"type", "point"}, {"row", 3}, {"col", 4}, {"polarity", "negative"}});
    CHECK(dataio::prompt_from_json(j) == p);
    const Prompt b = BoxPrompt{1, 2, 3, 4};
    CHECK(dataio::prompt_from_json(dataio::prompt_to_json(b)) == b);
    CHECK_THROWS_AS(dataio::prompt_from_json({{"type", "lasso"}}), FormatError);
    CHECK_THROWS_AS(dataio::prompt_from_json({{"type", "point"}, {"row", 1}}), FormatError);
    CHECK_THROWS_AS(dataio::prompt_from_json({{"type", "point"}, {"row", 1}, {"col", 1}, {"polarity", "maybe"}}),
                    FormatError);
    CHECK_THROWS_AS(
        dataio::prompt_from_json({{"type", "box"}, {"row_min", 5}, {"col_min", 0}, {"row_max", 1}, {"col_max", 3}}),
        FormatError);
}

TEST_CASE("manifests split by hash and list rejects") {
    TempDir tmp("manifest");
    std::vector<AnnotatedImage> items;
    for (int i = 0; i < 100; ++i) {
        auto it = blob(static_cast<std::uint64_t>(i), 32);
        it.id = "img" + std::to_string(1000 + i);
        items.push_back(std::move(it));
    }
    dataio::ManifestRules rules;
    rules.name = "blobs";
    rules.val_fraction = 0.1;
    const auto path = dataio::write_dataset(tmp.path.string(), items, rules);
    // an image without a label file
    fs::copy_file(tmp.path / "images" / "img1000.png", tmp.path / "images" / "orphan.png");

    const auto m = dataio::make_manifest(tmp.path.string(), rules);
    REQUIRE(m.entries.size() == 100);
    std::size_t val = 0;
    for (const auto& e : m.entries) val += e.split == "val";
    CHECK(val == 10);
    REQUIRE(m.rejects.size() == 1);
    CHECK(m.rejects[0].image == "images/orphan.png");

    // same split no matter how often or where it is computed
    const auto again = dataio::make_manifest(tmp.path.string(), rules);
    for (std::size_t i = 0; i < m.entries.size(); ++i) CHECK(again.entries[i].split == m.entries[i].split);

    dataio::write_manifest(path, m);
    const auto read = dataio::read_manifest(path);
    CHECK(read.name == "blobs");
    REQUIRE(read.entries.size() == 100);
    CHECK(read.entries[7].image == m.entries[7].image);
    CHECK(read.entries[7].split == m.entries[7].split);

    const auto val_items = dataio::load_split(read, "val");
    CHECK(val_items.size() == 10);
    const auto all = dataio::load_split(read, "");
    CHECK(all.size() == 100);
    // pixels survive as 8-bit PNG, instances exactly
    for (const auto& it : all) {
        const auto stem = fs::path(it.id).stem().string();
        const int idx = std::stoi(stem.substr(3)) - 1000;
        CHECK(it.instances == items[static_cast<std::size_t>(idx)].instances);
    }

    rules.test_fraction = 0.2;
    const auto three = dataio::make_manifest(tmp.path.string(), rules);
    std::size_t v = 0, t = 0;
    for (const auto& e : three.entries) {
        v += e.split == "val";
        t += e.split == "test";
    }
    CHECK(v + t == 30);
    CHECK(t == 20);
}

TEST_CASE("manifest errors") {
    TempDir tmp("manifest_err");
    CHECK_THROWS_AS(dataio::read_manifest((tmp.path / "none.jsonl").string()), IoError);
    CHECK_THROWS_AS(dataio::make_manifest((tmp.path / "none").string()), IoError);

    write_file(tmp.path / "a.png", "x");
    write_file(tmp.path / "a.json", "{}");
    write_file(tmp.path / "m1.jsonl", "{\"image\":\"a.png\",\"annotation\":\"a.json\",\"kind\":\"rle-json\"}\n{oops\n");
    try {
        dataio::read_manifest((tmp.path / "m1.jsonl").string());
        FAIL("expected a FormatError");
    } catch (const FormatError& e) {
        // the first line is 57 bytes plus its newline
        CHECK(e.offset() >= 58);
        CHECK(e.offset() < 58 + 5);
    }
    write_file(tmp.path / "m2.jsonl", "{\"image\":\"a.png\",\"annotation\":\"b.json\"}\n");
    CHECK_THROWS_AS(dataio::read_manifest((tmp.path / "m2.jsonl").string()), IoError);
    write_file(tmp.path / "m3.jsonl", "{\"image\":\"a.png\",\"annotation\":\"a.json\",\"split\":\"dev\"}\n");
    CHECK_THROWS_AS(dataio::read_manifest((tmp.path / "m3.jsonl").string()), FormatError);
    write_file(tmp.path / "m4.jsonl", "\n\n");
    CHECK_THROWS_AS(dataio::read_manifest((tmp.path / "m4.jsonl").string()), FormatError);
}

namespace {

std::unique_ptr<Session> annotated_session(std::shared_ptr<const PromptableModel> model, const AnnotatedImage& item) {
    auto s = std::make_unique<Session>(model, item.image);
    OracleDetector det(item.instances);
    s->auto_segment(det, 0.0);
    const int id = s->add_mask(PointPrompt{10, 12, Polarity::positive}).id;
    s->refine_mask(id, PointPrompt{30, 30, Polarity::negative});
    s->refine_mask(id, BoxPrompt{2, 2, 40, 50});
    return s;
}

} // namespace

TEST_CASE("export and import are lossless") {
    auto model = std::make_shared<ToyModel>();
    const auto item = blob(3, 128);
    auto s = annotated_session(model, item);
    const auto f = dataio::export_session(*s, "images/x.png");
    CHECK(f.image.content_hash == item.image.content_hash());

    const auto text = dataio::to_json(f).dump();
    const auto parsed = dataio::parse_annotation(text);
    CHECK(parsed.image.content_hash == f.image.content_hash);
    CHECK(parsed.image.path == "images/x.png");
    CHECK(dataio::to_json(parsed).dump() == text);

    auto t = dataio::import_session(model, item.image, parsed);
    REQUIRE(t->masks().size() == s->masks().size());
    for (std::size_t i = 0; i < s->masks().size(); ++i) {
        const auto& a = s->masks()[i];
        const auto& b = t->masks()[i];
        CHECK(a.id == b.id);
        CHECK(a.mask == b.mask);
        CHECK(a.history == b.history);
        CHECK(a.source == b.source);
        CHECK(a.score == b.score);
        CHECK(a.created_ms == b.created_ms);
        CHECK(a.updated_ms == b.updated_ms);
        CHECK(a.previous == b.previous);
    }
    CHECK(t->next_id() == s->next_id());
    // re-export is identical apart from the export time
    auto f2 = dataio::export_session(*t, "images/x.png");
    f2.exported_ms = f.exported_ms;
    CHECK(dataio::to_json(f2).dump() == text);

    // undo continues to work after the import
    const int refined = s->masks().back().id;
    CHECK(t->undo_last(refined).mask == s->undo_last(refined).mask);
}

TEST_CASE("export of an empty session") {
    auto model = std::make_shared<ToyModel>();
    const auto item = blob(4);
    Session s(model, item.image);
    const auto j = dataio::to_json(dataio::export_session(s));
    CHECK(j.at("schema") == 1);
    CHECK(j.at("masks").is_array());
    CHECK(j.at("masks").empty());
    CHECK(j.at("image").at("height") == 64);
    CHECK(j.at("image").at("content_hash").get<std::string>().size() == 16);
    auto t = dataio::import_session(model, item.image, dataio::annotation_from_json(j));
    CHECK(t->masks().empty());
}

TEST_CASE("exporting 100 masks of a 1024 x 1024 image is fast") {
    auto model = std::make_shared<ToyModel>();
    Image img(1024, 1024, 3);
    Session s(model, img);
    Rng rng(5);
    std::uniform_int_distribution<int> pos(0, 900);
    for (int i = 1; i <= 100; ++i) {
        const int r = pos(rng), c = pos(rng);
        const BoxPrompt box{r, c, r + 100, c + 100};
        s.restore_mask({i, MaskSource::user, {box}, std::nullopt, mask_from_box(box, 1024, 1024), 1, 1});
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto text = dataio::to_json(dataio::export_session(s)).dump();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    CHECK(secs < 1.0);
    CHECK(dataio::parse_annotation(text).masks.size() == 100);
}

TEST_CASE("annotation schema validation") {
    auto model = std::make_shared<ToyModel>();
    const auto item = blob(5);
    Session s(model, item.image);
    s.add_mask(BoxPrompt{1, 1, 30, 30});
    const auto good = dataio::to_json(dataio::export_session(s));
    CHECK_NOTHROW(dataio::annotation_from_json(good));

    auto bad = good;
    bad["schema"] = 2;
    CHECK_THROWS_AS(dataio::annotation_from_json(bad), FormatError);
    bad = good;
    bad.erase("masks");
    CHECK_THROWS_AS(dataio::annotation_from_json(bad), FormatError);
    bad = good;
    bad["image"]["content_hash"] = 12345;
    CHECK_THROWS_AS(dataio::annotation_from_json(bad), FormatError);
    bad = good;
    bad["masks"][0]["rle"]["size"] = {10, 10};
    bad["masks"][0]["rle"]["counts"] = {100};
    CHECK_THROWS_AS(dataio::annotation_from_json(bad), FormatError);
    bad = good;
    bad["masks"][0]["source"] = "magic";
    CHECK_THROWS(dataio::annotation_from_json(bad));
    bad = good;
    bad["masks"][0]["prompts"][0]["type"] = "scribble";
    CHECK_THROWS_AS(dataio::annotation_from_json(bad), FormatError);
    CHECK_THROWS_AS(dataio::parse_annotation("{\"schema\": 1,"), FormatError);
    CHECK_THROWS_AS(dataio::parse_annotation("[]"), FormatError);

    // the annotation must belong to the image it is imported onto
    auto other = blob(6).image;
    CHECK_THROWS_AS(dataio::import_session(model, other, dataio::annotation_from_json(good)), FormatError);
    CHECK_THROWS_AS(dataio::import_session(model, blob(6, 32).image, dataio::annotation_from_json(good)), ShapeError);
    bad = good;
    bad["masks"][0]["prompts"] = nlohmann::json::array();
    CHECK_THROWS_AS(dataio::import_session(model, item.image, dataio::annotation_from_json(bad)), FormatError);
}

TEST_CASE("rle-json annotation files drop empty instances") {
    TempDir tmp("rlejson");
    auto model = std::make_shared<ToyModel>();
    const auto item = blob(7);
    dataio::AnnotationFile f;
    f.image = {"x.png", 64, 64, 0};
    f.masks.push_back({1, item.instances[0], MaskSource::user, std::nullopt, {}, 0, 0});
    f.masks.push_back({2, BinaryMask(64, 64), MaskSource::user, std::nullopt, {}, 0, 0});
    const auto path = (tmp.path / "a.json").string();
    dataio::write_annotation(path, f);
    const auto masks = dataio::load_annotations(path, dataio::AnnotationKind::rle_json);
    REQUIRE(masks.size() == 1);
    CHECK(masks[0] == item.instances[0]);
}
