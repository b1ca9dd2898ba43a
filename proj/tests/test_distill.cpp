#include <doctest.h>

#include <cmath>

#include "kdx/distill.hpp"
#include "kdx/errors.hpp"
#include "kdx/ops.hpp"
#include "kdx/rng.hpp"
#include "testutil.hpp"

using namespace kdx;
using namespace kdx::testutil;

namespace {

// Two-conv-layer toy network on 4x4 inputs, per the gradient-check scale.
ModelSpec tiny_spec(size_t classes) {
    ModelSpec spec;
    spec.name = "tiny";
    spec.input_shape = {1, 4, 4};
    spec.num_classes = classes;
    spec.layers = {LayerSpec::conv(3, 3, 1, 1), LayerSpec::relu(),
                   LayerSpec::conv(2, 3, 1, 1), LayerSpec::relu(),
                   LayerSpec::maxpool(2, 2),    LayerSpec::global_avgpool(),
                   LayerSpec::dense(classes)};
    return spec;
}

Dataset tiny_dataset(size_t n, size_t classes, uint64_t seed) {
    Dataset ds;
    ds.name = "tiny";
    for (size_t c = 0; c < classes; ++c) ds.class_names.push_back("c" + std::to_string(c));
    Rng rng(seed);
    for (size_t i = 0; i < n; ++i) {
        Sample s;
        s.id = "s" + std::to_string(i);
        s.label = i % classes;
        s.image = Tensor({1, 4, 4});
        // Class signal: brighten one corner so the task is learnable.
        for (double& v : s.image.data) v = rng.uniform(0.0, 0.3);
        const size_t y0 = (s.label / 2) * 2, x0 = (s.label % 2) * 2;
        for (size_t dy = 0; dy < 2; ++dy) {
            for (size_t dx = 0; dx < 2; ++dx) {
                s.image.at(0, y0 + dy, x0 + dx) = rng.uniform(0.7, 1.0);
            }
        }
        ds.split_assignment[s.id] = i % 4 == 3 ? Split::Val : Split::Train;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

bool params_bitwise_equal(const Model& a, const Model& b) {
    if (a.params.size() != b.params.size()) return false;
    for (size_t i = 0; i < a.params.size(); ++i) {
        if (a.params[i].has_params() != b.params[i].has_params()) return false;
        if (!a.params[i].has_params()) continue;
        if (!bitwise_equal(a.params[i].weights, b.params[i].weights)) return false;
        if (!bitwise_equal(a.params[i].bias, b.params[i].bias)) return false;
    }
    return true;
}

DistillConfig quick_config(uint64_t seed) {
    DistillConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("hard loss is zero for a perfect prediction") {
    Tensor probs({1, 2}, {1.0, 0.0});
    Tensor label({1, 2}, {1.0, 0.0});
    CHECK(hard_loss(probs, label) <= 1e-11);
}

TEST_CASE("hard loss of a 50/50 prediction is ln 2") {
    Tensor probs({1, 2}, {0.5, 0.5});
    Tensor label({1, 2}, {1.0, 0.0});
    CHECK(hard_loss(probs, label) == doctest::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("hard loss of concatenated batches is the sample-weighted mean") {
    Rng rng(8);
    Tensor a({3, 4});
    Tensor b({5, 4});
    Tensor ya({3, 4});
    Tensor yb({5, 4});
    auto fill = [&](Tensor& probs, Tensor& onehot) {
        for (size_t i = 0; i < probs.shape[0]; ++i) {
            double sum = 0.0;
            for (size_t c = 0; c < 4; ++c) sum += (probs.at(i, c) = rng.uniform(0.05, 1.0));
            for (size_t c = 0; c < 4; ++c) probs.at(i, c) /= sum;
            onehot.at(i, rng.index(4)) = 1.0;
        }
    };
    fill(a, ya);
    fill(b, yb);

    Tensor both({8, 4});
    Tensor yboth({8, 4});
    std::copy(a.data.begin(), a.data.end(), both.data.begin());
    std::copy(b.data.begin(), b.data.end(), both.data.begin() + 12);
    std::copy(ya.data.begin(), ya.data.end(), yboth.data.begin());
    std::copy(yb.data.begin(), yb.data.end(), yboth.data.begin() + 12);

    const double expect = (3.0 * hard_loss(a, ya) + 5.0 * hard_loss(b, yb)) / 8.0;
    CHECK(hard_loss(both, yboth) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("hard loss rejects shape mismatches") {
    CHECK_THROWS_AS(hard_loss(Tensor({1, 2}), Tensor({1, 3})), ShapeError);
}

TEST_CASE("teacher-vs-student soft loss at equal logits is the soft target entropy") {
    Tensor y({2}, {1.0, 0.0});
    Tensor logits({2}, {2.0, 0.0});
    const double loss = soft_loss(y, logits, logits, 1.0, SoftMode::TeacherVsStudent);
    Tensor q = softmax_t(logits, 1.0);
    const double entropy = -(q[0] * std::log(q[0]) + q[1] * std::log(q[1]));
    CHECK(loss == doctest::Approx(entropy).epsilon(1e-12));
    CHECK(loss - entropy == doctest::Approx(0.0));  // KL(q||q) = 0
}

TEST_CASE("literal soft loss ignores the student logits") {
    Tensor y({3}, {0.0, 1.0, 0.0});
    Tensor teacher({3}, {1.0, 3.0, -2.0});
    Tensor student_a({3}, {5.0, -1.0, 0.0});
    Tensor student_b({3}, {-9.0, 2.0, 7.0});
    const double a = soft_loss(y, teacher, student_a, 4.0, SoftMode::Literal);
    const double b = soft_loss(y, teacher, student_b, 4.0, SoftMode::Literal);
    CHECK(a == b);
}

TEST_CASE("literal soft loss matches its closed-form value") {
    Tensor y({2}, {1.0, 0.0});
    Tensor teacher({2}, {2.0, 0.0});
    Tensor student({2}, {0.0, 0.0});
    // softmax([1,0]) = [0.73106, 0.26894] against log softmax([2,0]).
    const double loss = soft_loss(y, teacher, student, 1.0, SoftMode::Literal);
    CHECK(loss == doctest::Approx(0.6648108537829628).epsilon(1e-9));
}

TEST_CASE("soft loss rejects non-positive temperature") {
    Tensor v({2});
    CHECK_THROWS_AS(soft_loss(v, v, v, 0.0, SoftMode::Literal), DomainError);
}

TEST_CASE("distill loss blends linearly in alpha") {
    CHECK(distill_loss(0.1, 0.3, 1.0) == 0.1);
    CHECK(distill_loss(0.1, 0.3, 0.0) == 0.3);
    CHECK(distill_loss(0.1, 0.3, 0.7) == doctest::Approx(0.16).epsilon(1e-12));

    const double hard = 0.825, soft = 2.125;  // exactly representable
    const double at0 = distill_loss(hard, soft, 0.0);
    const double at1 = distill_loss(hard, soft, 1.0);
    for (int k = 0; k <= 10; ++k) {
        const double alpha = k / 10.0;
        const double expect = at0 + alpha * (at1 - at0);
        CHECK(std::abs(distill_loss(hard, soft, alpha) - expect) < 1e-12);
    }
}

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
    Model m = init_weights(tiny_spec(2), 4);
    Model before = m;
    AdamState state = AdamState::init(m.params, {});
    std::vector<LayerParams> zeros = m.params;
    for (LayerParams& p : zeros) {
        if (!p.has_params()) continue;
        std::fill(p.weights.data.begin(), p.weights.data.end(), 0.0);
        std::fill(p.bias.data.begin(), p.bias.data.end(), 0.0);
    }
    adam_step(state, m.params, zeros);
    CHECK(params_bitwise_equal(m, before));
    CHECK(state.step == 1);
}

TEST_CASE("the first adam step moves by about lr against the gradient sign") {
    Model m = init_weights(tiny_spec(2), 4);
    Model before = m;
    AdamConfig cfg;
    cfg.learning_rate = 1e-4;
    AdamState state = AdamState::init(m.params, cfg);
    std::vector<LayerParams> grads = m.params;
    Rng rng(17);
    for (LayerParams& p : grads) {
        if (!p.has_params()) continue;
        for (double& v : p.weights.data) v = rng.uniform() < 0.5 ? -0.37 : 0.52;
        for (double& v : p.bias.data) v = 0.11;
    }
    adam_step(state, m.params, grads);
    for (size_t i = 0; i < m.params.size(); ++i) {
        if (!m.params[i].has_params()) continue;
        for (size_t k = 0; k < m.params[i].weights.numel(); ++k) {
            const double delta = m.params[i].weights[k] - before.params[i].weights[k];
            const double g = grads[i].weights[k];
            CHECK(std::abs(std::abs(delta) - cfg.learning_rate) < 1e-3 * cfg.learning_rate);
            CHECK(delta * g < 0.0);
        }
    }
}

TEST_CASE("training is deterministic in (seed, config, data)") {
    Dataset ds = tiny_dataset(16, 2, 1);
    ModelSpec spec = tiny_spec(2);
    DistillConfig cfg = quick_config(7);
    TrainResult a = train_teacher(spec, ds, cfg);
    TrainResult b = train_teacher(spec, ds, cfg);
    CHECK(params_bitwise_equal(a.model, b.model));
    REQUIRE(a.report.epochs.size() == b.report.epochs.size());
    for (size_t e = 0; e < a.report.epochs.size(); ++e) {
        CHECK(a.report.epochs[e].train_loss == b.report.epochs[e].train_loss);
        CHECK(a.report.epochs[e].val_accuracy == b.report.epochs[e].val_accuracy);
    }
}

TEST_CASE("alpha = 1 distillation reproduces plain training bit for bit") {
    Dataset ds = tiny_dataset(16, 2, 2);
    ModelSpec student = tiny_spec(2);
    Model teacher = init_weights(tiny_spec(2), 999);

    DistillConfig cfg = quick_config(11);
    cfg.alpha = 1.0;
    TrainResult plain = train_teacher(student, ds, cfg);
    TrainResult distilled = distill(teacher, student, ds, cfg);
    CHECK(params_bitwise_equal(plain.model, distilled.model));
    for (size_t e = 0; e < cfg.epochs; ++e) {
        CHECK(plain.report.epochs[e].train_loss == distilled.report.epochs[e].train_loss);
    }
}

TEST_CASE("the teacher is bitwise unchanged by distillation") {
    Dataset ds = tiny_dataset(12, 2, 3);
    Model teacher = init_weights(tiny_spec(2), 55);
    std::vector<uint8_t> before = encode_model(teacher);
    DistillConfig cfg = quick_config(5);
    cfg.alpha = 0.5;
    distill(teacher, tiny_spec(2), ds, cfg);
    CHECK(encode_model(teacher) == before);
}

TEST_CASE("literal soft mode contributes zero gradient to the student") {
    Dataset ds = tiny_dataset(12, 2, 4);

    SUBCASE("alpha 0 with the literal mode never moves the parameters") {
        DistillConfig cfg = quick_config(21);
        cfg.alpha = 0.0;
        cfg.soft_mode = SoftMode::Literal;
        Model teacher = init_weights(tiny_spec(2), 77);
        TrainResult r = distill(teacher, tiny_spec(2), ds, cfg);
        Model fresh = init_weights(tiny_spec(2), cfg.seed);
        CHECK(params_bitwise_equal(r.model, fresh));
    }
    SUBCASE("the trajectory is independent of the teacher logits") {
        DistillConfig cfg = quick_config(22);
        cfg.alpha = 0.5;
        cfg.soft_mode = SoftMode::Literal;
        TeacherLogits table_a, table_b;
        Rng rng(3);
        for (const Sample& s : ds.samples) {
            table_a[s.id] = Tensor({2}, {rng.uniform(-2, 2), rng.uniform(-2, 2)});
            table_b[s.id] = Tensor({2}, {rng.uniform(-2, 2), rng.uniform(-2, 2)});
        }
        TrainResult a = distill(table_a, tiny_spec(2), ds, cfg);
        TrainResult b = distill(table_b, tiny_spec(2), ds, cfg);
        CHECK(params_bitwise_equal(a.model, b.model));
        // Loss values do depend on the table; the weights must not.
        CHECK(a.report.epochs[0].train_loss != b.report.epochs[0].train_loss);
    }
}

TEST_CASE("objective gradients match finite differences in both soft modes") {
    Dataset ds = tiny_dataset(6, 2, 6);
    std::vector<size_t> batch{0, 1, 2, 3, 4, 5};
    Model teacher = init_weights(tiny_spec(2), 31);
    TeacherLogits table;
    for (const Sample& s : ds.samples) table[s.id] = forward(teacher, s.image, false).logits;

    for (SoftMode mode : {SoftMode::TeacherVsStudent, SoftMode::Literal}) {
        DistillConfig cfg = quick_config(3);
        cfg.alpha = 0.6;
        cfg.temperature = 3.0;
        cfg.soft_mode = mode;

        Model student = init_weights(tiny_spec(2), 13);
        ObjectiveEval eval = distill_objective(student, ds, batch, &table, cfg);

        for (size_t layer = 0; layer < student.params.size(); ++layer) {
            if (!student.params[layer].has_params()) continue;
            for (Tensor LayerParams::*field : {&LayerParams::weights, &LayerParams::bias}) {
                Tensor& param = student.params[layer].*field;
                const Tensor& analytic = eval.grad_sum[layer].*field;
                Tensor fd = fd_gradient(param, [&](const Tensor& t) {
                    Model probe = student;
                    probe.params[layer].*field = t;
                    return distill_objective(probe, ds, batch, &table, cfg).loss_sum;
                });
                CHECK(max_rel_err(analytic, fd) < 1e-3);
            }
        }
    }
}

TEST_CASE("plain-training objective gradient matches finite differences") {
    Dataset ds = tiny_dataset(5, 2, 9);
    std::vector<size_t> batch{0, 1, 2, 3, 4};
    Model student = init_weights(tiny_spec(2), 19);
    DistillConfig cfg = quick_config(1);
    ObjectiveEval eval = distill_objective(student, ds, batch, nullptr, cfg);
    // Spot-check the first conv layer.
    Tensor fd = fd_gradient(student.params[0].weights, [&](const Tensor& t) {
        Model probe = student;
        probe.params[0].weights = t;
        return distill_objective(probe, ds, batch, nullptr, cfg).loss_sum;
    });
    CHECK(max_rel_err(eval.grad_sum[0].weights, fd) < 1e-3);
}

TEST_CASE("reports carry one entry per epoch with a valid best index") {
    Dataset ds = tiny_dataset(16, 2, 10);
    DistillConfig cfg = quick_config(2);
    cfg.epochs = 4;
    TrainResult r = train_teacher(tiny_spec(2), ds, cfg);
    CHECK(r.report.epochs.size() == 4);
    CHECK(r.report.best_epoch < 4);
    double best = -1.0;
    for (const EpochStats& e : r.report.epochs) {
        CHECK(std::isfinite(e.train_loss));
        CHECK(std::isfinite(e.val_loss));
        best = std::max(best, e.val_accuracy);
    }
    CHECK(r.report.epochs[r.report.best_epoch].val_accuracy == best);
    CHECK(r.report.wall_seconds >= 0.0);
}

TEST_CASE("tiny training learns the corner-brightness task") {
    Dataset ds = tiny_dataset(64, 2, 12);
    DistillConfig cfg = quick_config(3);
    cfg.epochs = 12;
    cfg.learning_rate = 5e-3;
    TrainResult r = train_teacher(tiny_spec(2), ds, cfg);
    double best = 0.0;
    for (const EpochStats& e : r.report.epochs) best = std::max(best, e.val_accuracy);
    CHECK(best >= 0.9);
}

TEST_CASE("distillation from a csv table matches distillation from the live model") {
    Dataset ds = tiny_dataset(16, 2, 13);
    Model teacher = init_weights(tiny_spec(2), 21);
    DistillConfig cfg = quick_config(14);
    cfg.alpha = 0.7;
    cfg.temperature = 10.0;

    TeacherLogits table;
    for (size_t i : ds.indices(Split::Train)) {
        const Sample& s = ds.samples[i];
        table[s.id] = forward(teacher, s.image, false).logits;
    }
    auto path = std::filesystem::temp_directory_path() / "kdx_teacher_logits.csv";
    write_teacher_logits_csv(table, 2, path);
    TeacherLogits loaded = load_teacher_logits_csv(path);
    REQUIRE(loaded.size() == table.size());
    for (const auto& [id, logits] : table) {
        CHECK(bitwise_equal(loaded.at(id), logits));
    }

    TrainResult live = distill(teacher, tiny_spec(2), ds, cfg);
    TrainResult from_csv = distill(loaded, tiny_spec(2), ds, cfg);
    CHECK(params_bitwise_equal(live.model, from_csv.model));
}

TEST_CASE("a missing teacher logit row is a data error naming the sample") {
    Dataset ds = tiny_dataset(8, 2, 15);
    TeacherLogits table;
    for (size_t i : ds.indices(Split::Train)) {
        const Sample& s = ds.samples[i];
        table[s.id] = Tensor({2});
    }
    table.erase(table.begin());
    DistillConfig cfg = quick_config(16);
    try {
        distill(table, tiny_spec(2), ds, cfg);
        FAIL("expected a throw");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("s0") != std::string::npos);
    }
}

TEST_CASE("config validation rejects out-of-range fields") {
    DistillConfig cfg;
    cfg.alpha = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DistillConfig{};
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = DistillConfig{};
    cfg.epochs = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("training rejects an empty split") {
    Dataset ds = tiny_dataset(8, 2, 17);
    for (auto& [id, split] : ds.split_assignment) split = Split::Val;
    CHECK_THROWS_AS(train_teacher(tiny_spec(2), ds, quick_config(1)), ConfigError);
}
