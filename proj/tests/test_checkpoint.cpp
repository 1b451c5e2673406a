#include "cellpilot/checkpoint.hpp"
#include "cellpilot/errors.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

using namespace cellpilot;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("cellpilot-ckpt-" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void perturb(ToyModel& m) {
    Rng rng(3);
    std::normal_distribution<double> n(0, 0.1);
    for (auto* p : m.parameters())
        for (int i = 0; i < p->value.size(); ++i) p->value.data()[i] += n(rng);
}

} // namespace

TEST_CASE("checkpoint round trip is bitwise") {
    TempDir dir;
    ToyModel m;
    m.inject_lora();
    perturb(m);
    const auto path = (dir.path / "m.ckpt").string();
    save_checkpoint(m, path);
    auto loaded = load_checkpoint(path);
    CHECK(loaded->config() == m.config());
    CHECK(loaded->lora_injected());
    const auto a = m.parameters();
    const auto b = loaded->parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i]->name == b[i]->name);
        CHECK(a[i]->trainable == b[i]->trainable);
        CHECK(a[i]->value == b[i]->value);
    }
    CHECK(fs::file_size(path) < 50u * 1024 * 1024);
}

TEST_CASE("loading into a model with a different lora rank fails") {
    TempDir dir;
    ToyModel m;
    m.inject_lora();
    const auto path = (dir.path / "m.ckpt").string();
    save_checkpoint(m, path);

    ModelConfig cfg;
    cfg.lora_rank = 8;
    ToyModel other(cfg);
    other.inject_lora();
    CHECK_THROWS_AS(load_weights(other, path), ConfigError);

    ToyModel plain;
    CHECK_THROWS_AS(load_weights(plain, path), ConfigError);
}

TEST_CASE("corrupted checkpoints are detected") {
    TempDir dir;
    ToyModel m;
    const auto path = (dir.path / "m.ckpt").string();
    save_checkpoint(m, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(fs::file_size(path) / 2));
        char c = 0;
        f.read(&c, 1);
        f.seekp(static_cast<std::streamoff>(fs::file_size(path) / 2));
        c ^= 0x5a;
        f.write(&c, 1);
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);

    fs::resize_file(path, 10);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    CHECK_THROWS_AS(load_checkpoint((dir.path / "missing.ckpt").string()), IoError);
}

TEST_CASE("generic containers keep metadata and arrays") {
    TempDir dir;
    const auto path = (dir.path / "c.bin").string();
    Matrix a(2, 3);
    a << 1, 2, 3, 4, 5, 6.5;
    write_container(path, {{"kind", "test"}, {"step", 7}}, {{"a", a, true}, {"empty", Matrix(0, 0), false}});
    const auto c = read_container(path);
    CHECK(c.meta.at("kind") == "test");
    CHECK(c.meta.at("step") == 7);
    REQUIRE(c.arrays.size() == 2);
    CHECK(c.arrays[0].value == a);
    CHECK(c.arrays[0].trainable);
    CHECK(c.arrays[1].value.size() == 0);
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
}
