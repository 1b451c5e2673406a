#include "cellpilot/checkpoint.hpp"
#include "cellpilot/dataset.hpp"
#include "cellpilot/errors.hpp"
#include "cellpilot/training.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include <unistd.h>

using namespace cellpilot;
using namespace cellpilot::training;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("cellpilot-train-" + tag + "-" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<AnnotatedImage> blobs(int count, std::uint64_t seed) {
    BlobConfig bc;
    bc.count = count;
    bc.seed = seed;
    return make_blob_dataset(bc);
}

TrainConfig small_config() {
    TrainConfig c;
    c.epochs = 1;
    c.batch_size = 1;
    c.grad_accumulation_steps = 1;
    c.learning_rate = 1e-3;
    c.points_per_image = 1;
    c.boxes_per_image = 1;
    c.max_corrections = 2;
    c.validation_fraction = 0.25;
    c.val_instances_per_image = 2;
    return c;
}

std::vector<Matrix> snapshot(ToyModel& m) {
    std::vector<Matrix> out;
    for (auto* p : m.parameters()) out.push_back(p->value);
    return out;
}

} // namespace

// ---- loss ---------------------------------------------------------------------

TEST_CASE("saturated perfect prediction has near-zero loss") {
    BinaryMask gt(8, 8);
    for (int r = 2; r < 6; ++r)
        for (int c = 1; c < 7; ++c) gt.set(r, c);
    Matrix logits(8, 8);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) logits(r, c) = gt(r, c) ? 40.0 : -40.0;
    CHECK(segmentation_loss(logits, gt) < 1e-6);
}

TEST_CASE("zero logits on a half-covered mask") {
    const int n = 16;
    BinaryMask gt(n, n);
    for (int r = 0; r < n / 2; ++r)
        for (int c = 0; c < n; ++c) gt.set(r, c);
    const double N = n * n, eps = 1.0;
    const auto t = segmentation_loss_terms(Matrix::Zero(n, n), gt, eps);
    CHECK(t.bce == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // soft dice with p = 0.5 everywhere and |gt| = N/2
    const double want_dice = 1.0 - (2.0 * 0.5 * N / 2 + eps) / (0.5 * N + N / 2 + eps);
    CHECK(t.dice == doctest::Approx(want_dice).epsilon(1e-12));
    CHECK(t.dice == doctest::Approx(0.5).epsilon(0.01));
    CHECK(t.total() == doctest::Approx(t.bce + t.dice));
}

TEST_CASE("empty ground truth with confident background") {
    BinaryMask gt(10, 10);
    CHECK(segmentation_loss(Matrix::Constant(10, 10, -40.0), gt) < 1e-6);
}

TEST_CASE("loss gradient with respect to logits") {
    Rng rng(1);
    std::normal_distribution<double> n(0, 2);
    BinaryMask gt(6, 7);
    Matrix logits(6, 7);
    for (int r = 0; r < 6; ++r)
        for (int c = 0; c < 7; ++c) {
            gt.set(r, c, (r + 2 * c) % 3 == 0);
            logits(r, c) = n(rng);
        }
    ag::Tape tape;
    ag::Parameter p("logits", logits);
    auto loss = segmentation_loss(tape.param(p), gt);
    CHECK(loss.scalar() == doctest::Approx(segmentation_loss(logits, gt)).epsilon(1e-12));
    tape.backward(loss);
    const double h = 1e-6;
    for (int i = 0; i < logits.size(); ++i) {
        Matrix up = logits, down = logits;
        up.data()[i] += h;
        down.data()[i] -= h;
        const double fd = (segmentation_loss(up, gt) - segmentation_loss(down, gt)) / (2 * h);
        CHECK(p.grad.data()[i] == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("loss rejects mismatched shapes") {
    CHECK_THROWS_AS(segmentation_loss(Matrix::Zero(3, 3), BinaryMask(3, 4)), ShapeError);
}

// ---- config --------------------------------------------------------------------

TEST_CASE("config defaults") {
    TrainConfig c;
    CHECK(c.epochs == 20);
    CHECK(c.batch_size == 4);
    CHECK(c.grad_accumulation_steps == 4);
    CHECK(c.effective_batch() == 16);
    CHECK(c.learning_rate == 1e-5);
    CHECK(c.points_per_image == 10);
    CHECK(c.boxes_per_image == 10);
    CHECK(c.max_corrections == 5);
    CHECK(c.optimizer == OptimizerKind::schedule_free_adamw);
    CHECK(c.model.lora_rank == 4);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config text round trip") {
    TrainConfig c = small_config();
    c.learning_rate = 3.25e-4;
    c.quota_mode = QuotaMode::per_instance;
    c.optimizer = OptimizerKind::sgd;
    c.augmentation.hue_limit_deg = 12.5;
    c.model.lora_rank = 2;
    const auto parsed = parse_train_config(format_train_config(c));
    CHECK(format_train_config(parsed) == format_train_config(c));
    CHECK(parsed.learning_rate == c.learning_rate);
    CHECK(parsed.quota_mode == QuotaMode::per_instance);
    CHECK(parsed.model.lora_rank == 2);
    CHECK(parsed.augmentation.hue_limit_deg == 12.5);
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(parse_train_config("no_such_key = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("epochs = many\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("batch_size = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("model.mask_feedback = true\n"), ConfigError);
    CHECK_NOTHROW(parse_train_config("# comment only\n\nepochs = 3  # trailing\n"));
}

// ---- trainer ---------------------------------------------------------------------

TEST_CASE("simulation quotas sample instances without replacement") {
    ToyModel m;
    TrainConfig c = small_config();
    c.points_per_image = 10;
    c.boxes_per_image = 10;
    Trainer t(m, c);
    Rng rng(2);
    const auto plan = t.plan_simulations(3, rng);
    CHECK(plan.point_instances.size() == 3);
    CHECK(plan.box_instances.size() == 3);
    CHECK(std::set<std::size_t>(plan.point_instances.begin(), plan.point_instances.end()).size() == 3);
    CHECK(std::set<std::size_t>(plan.box_instances.begin(), plan.box_instances.end()).size() == 3);

    c.points_per_image = 2;
    c.boxes_per_image = 4;
    Trainer t2(m, c);
    for (int i = 0; i < 20; ++i) {
        const auto p = t2.plan_simulations(7, rng);
        CHECK(p.point_instances.size() == 2);
        CHECK(p.box_instances.size() == 4);
        CHECK(std::set<std::size_t>(p.box_instances.begin(), p.box_instances.end()).size() == 4);
        for (auto k : p.box_instances) CHECK(k < 7);
    }

    c.quota_mode = QuotaMode::per_instance;
    Trainer t3(m, c);
    const auto p3 = t3.plan_simulations(3, rng);
    CHECK(p3.point_instances.size() == 6);
    CHECK(p3.box_instances.size() == 12);
}

TEST_CASE("optimizer steps every accumulation window") {
    ToyModel m;
    m.inject_lora();
    TrainConfig c = small_config();
    c.grad_accumulation_steps = 4;
    Trainer t(m, c);
    const auto data = blobs(1, 3);
    const AnnotatedImage* item = &data[0];
    for (int call = 1; call <= 12; ++call) {
        const std::uint64_t seed = call;
        const auto r = t.train_step(std::span<const AnnotatedImage* const>(&item, 1), std::span<const std::uint64_t>(&seed, 1));
        CHECK(r.optimizer_stepped == (call % 4 == 0));
        CHECK(t.optimizer().steps() == static_cast<std::size_t>(call / 4));
    }
}

TEST_CASE("gradient accumulation matches the large batch") {
    const auto data = blobs(4, 4);
    std::vector<const AnnotatedImage*> ptrs;
    for (const auto& d : data) ptrs.push_back(&d);
    const std::vector<std::uint64_t> seeds = {11, 12, 13, 14};

    TrainConfig c = small_config();
    c.optimizer = OptimizerKind::sgd;
    c.learning_rate = 0.05;

    ToyModel big;
    big.inject_lora();
    c.batch_size = 4;
    c.grad_accumulation_steps = 1;
    Trainer tb(big, c);
    const auto rb = tb.train_step(ptrs, seeds);
    CHECK(rb.optimizer_stepped);

    ToyModel small;
    small.inject_lora();
    c.batch_size = 1;
    c.grad_accumulation_steps = 4;
    Trainer ts(small, c);
    for (int i = 0; i < 4; ++i) {
        const auto r = ts.train_step(std::span<const AnnotatedImage* const>(&ptrs[i], 1),
                                     std::span<const std::uint64_t>(&seeds[i], 1));
        CHECK(r.optimizer_stepped == (i == 3));
    }
    const auto a = snapshot(big), b = snapshot(small);
    double worst = 0.0;
    bool moved = false;
    ToyModel fresh;
    fresh.inject_lora();
    const auto f = snapshot(fresh);
    for (std::size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, (a[i] - b[i]).cwiseAbs().maxCoeff());
        moved = moved || (a[i] - f[i]).cwiseAbs().maxCoeff() > 1e-9;
    }
    CHECK(moved);
    CHECK(worst <= 1e-6);
}

TEST_CASE("frozen weights never move") {
    ToyModel m;
    m.inject_lora();
    std::vector<std::pair<ag::Parameter*, Matrix>> frozen;
    for (auto* p : m.parameters())
        if (!p->trainable) frozen.emplace_back(p, p->value);
    REQUIRE_FALSE(frozen.empty());
    TrainConfig c = small_config();
    c.learning_rate = 1e-2;
    Trainer t(m, c);
    const auto data = blobs(3, 5);
    Rng rng(1);
    for (const auto& d : data) {
        const AnnotatedImage* ptr = &d;
        t.train_step(std::span<const AnnotatedImage* const>(&ptr, 1), rng);
    }
    for (const auto& [p, v] : frozen) CHECK_MESSAGE(p->value == v, p->name);
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto data = blobs(6, 6);
    auto run = [&] {
        ToyModel m;
        std::vector<double> losses;
        TrainOptions o;
        o.on_step = [&](const StepRecord& r) { losses.push_back(r.loss); };
        const auto h = train(m, data, small_config(), o);
        CHECK(h.epochs.size() == 1);
        return losses;
    };
    const auto a = run(), b = run();
    REQUIRE_FALSE(a.empty());
    CHECK(a == b);
}

TEST_CASE("zero epochs leaves the model untouched") {
    ToyModel m;
    const auto before = snapshot(m);
    TrainConfig c = small_config();
    c.epochs = 0;
    const auto h = train(m, blobs(2, 1), c);
    CHECK(h.steps.empty());
    CHECK(h.epochs.empty());
    CHECK(snapshot(m) == before);
}

TEST_CASE("resume mid-epoch reproduces the uninterrupted run") {
    const auto data = blobs(9, 7);
    TrainConfig c = small_config();
    c.epochs = 2;
    c.batch_size = 2;
    c.grad_accumulation_steps = 2;
    c.validation_fraction = 0.2;

    std::vector<double> full;
    ToyModel a;
    {
        TrainOptions o;
        o.on_step = [&](const StepRecord& r) { full.push_back(r.loss); };
        train(a, data, c, o);
    }

    TempDir dir("resume");
    std::vector<double> first, second;
    {
        ToyModel b;
        TrainOptions o;
        o.out_dir = dir.path.string();
        o.stop_after_steps = 3; // inside an accumulation window and inside epoch 0
        o.on_step = [&](const StepRecord& r) { first.push_back(r.loss); };
        train(b, data, c, o);
    }
    REQUIRE(fs::exists(dir.path / "train_state.ckpt"));
    ToyModel resumed;
    {
        TrainOptions o;
        o.out_dir = dir.path.string();
        o.resume_state = (dir.path / "train_state.ckpt").string();
        o.on_step = [&](const StepRecord& r) { second.push_back(r.loss); };
        train(resumed, data, c, o);
    }
    CHECK(first.size() == 3);
    std::vector<double> joined = first;
    joined.insert(joined.end(), second.begin(), second.end());
    REQUIRE(joined.size() == full.size());
    for (std::size_t i = 0; i < full.size(); ++i) CHECK(joined[i] == full[i]);
    const auto pa = snapshot(a), pr = snapshot(resumed);
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == pr[i]);
}

TEST_CASE("training writes checkpoints and metrics") {
    TempDir dir("outputs");
    ToyModel m;
    TrainOptions o;
    o.out_dir = dir.path.string();
    const auto h = train(m, blobs(5, 8), small_config(), o);
    CHECK(fs::exists(dir.path / "best.ckpt"));
    CHECK(fs::exists(dir.path / "last.ckpt"));
    CHECK(fs::exists(dir.path / "metrics.jsonl"));
    CHECK(h.best_epoch == 0);
    auto last = load_checkpoint((dir.path / "last.ckpt").string());
    CHECK(last->lora_injected());
}

TEST_CASE("schedule-free adamw follows the reference update") {
    // Reference recurrence of schedule-free AdamW written out per scalar:
    // y is where gradients are taken, z the base sequence.
    ScheduleFreeAdamW::Options o;
    o.lr = 0.05;
    o.weight_decay = 0.01;
    o.warmup_steps = 5;
    ScheduleFreeAdamW opt(o);
    ag::Parameter p("w", Matrix::Constant(2, 1, 3.0));
    p.value(1, 0) = -1.5;
    std::vector<ag::Parameter*> ps{&p};

    double y[2] = {3.0, -1.5}, z[2] = {3.0, -1.5}, v[2] = {0.0, 0.0};
    double lr_max = -1.0, weight_sum = 0.0;
    for (int k = 0; k < 60; ++k) {
        double g[2];
        for (int i = 0; i < 2; ++i) g[i] = 2.0 * y[i] + 0.3;
        p.grad(0, 0) = g[0];
        p.grad(1, 0) = g[1];
        opt.step(ps);

        const double sched = k < o.warmup_steps ? (k + 1.0) / o.warmup_steps : 1.0;
        const double lr = o.lr * sched;
        const double bias2 = 1.0 - std::pow(o.beta2, k + 1);
        lr_max = std::max(lr_max, lr);
        const double weight = lr_max * lr_max;
        weight_sum += weight;
        const double ckp1 = weight / weight_sum;
        for (int i = 0; i < 2; ++i) {
            v[i] = o.beta2 * v[i] + (1 - o.beta2) * g[i] * g[i];
            const double gn = g[i] / (std::sqrt(v[i] / bias2) + o.eps) + o.weight_decay * y[i];
            y[i] = (1 - ckp1) * y[i] + ckp1 * z[i];
            y[i] += lr * (o.beta1 * (1 - ckp1) - 1) * gn;
            z[i] -= lr * gn;
        }
        CHECK(p.value(0, 0) == doctest::Approx(y[0]).epsilon(1e-12));
        CHECK(p.value(1, 0) == doctest::Approx(y[1]).epsilon(1e-12));
    }
    // evaluation point x = y + (1 - 1/beta1)(z - y), and back
    opt.eval_mode(ps);
    for (int i = 0; i < 2; ++i)
        CHECK(p.value(i, 0) == doctest::Approx(y[i] + (1 - 1 / o.beta1) * (z[i] - y[i])).epsilon(1e-10));
    opt.train_mode(ps);
    for (int i = 0; i < 2; ++i) CHECK(p.value(i, 0) == doctest::Approx(y[i]).epsilon(1e-10));
    CHECK(opt.steps() == 60);
}

TEST_CASE("schedule-free adamw approaches the minimum") {
    ScheduleFreeAdamW::Options o;
    o.lr = 0.1;
    o.weight_decay = 0.0;
    ScheduleFreeAdamW opt(o);
    ag::Parameter p("w", Matrix::Constant(3, 1, 5.0));
    std::vector<ag::Parameter*> ps{&p};
    for (int i = 0; i < 500; ++i) {
        p.grad = 2.0 * p.value;
        opt.step(ps);
    }
    opt.eval_mode(ps);
    // uniform averaging keeps some memory of the starting point
    CHECK(p.value.cwiseAbs().maxCoeff() < 0.25);
}

TEST_CASE("sgd step") {
    Sgd opt(0.5);
    ag::Parameter p("w", Matrix::Constant(2, 2, 1.0));
    p.grad = Matrix::Constant(2, 2, 0.2);
    ag::Parameter frozen("f", Matrix::Constant(1, 1, 3.0), false);
    frozen.grad = Matrix::Constant(1, 1, 1.0);
    std::vector<ag::Parameter*> ps{&p, &frozen};
    opt.step(ps);
    CHECK(p.value(0, 0) == doctest::Approx(0.9));
    CHECK(frozen.value(0, 0) == 3.0);
}
