// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "gdl/rng.hpp"
#include "gdl/schedule.hpp"
#include "gdl/tasks.hpp"
#include "gdl/train.hpp"

using namespace gdl;

namespace {

bool params_bitwise_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].shape() != b[i].shape()) return false;
        for (std::size_t j = 0; j < a[i].size(); ++j)
            if (a[i].at(j) != b[i].at(j)) return false;
    }
    return true;
}

std::vector<Tensor> snapshot(const std::vector<Tensor>& params) {
    std::vector<Tensor> copy;
    for (const Tensor& p : params) copy.push_back(p.clone());
    return copy;
}

EpsilonModel tiny_epsilon(int max_timestep, std::uint64_t seed) {
    MlpSpec spec;
    spec.input_dim = 1;
    spec.output_dim = 1;
    spec.hidden_dims = {32};
    spec.time_embed_dim = 8;
    Rng rng(seed, "init");
    return EpsilonModel(spec, max_timestep, rng);
}

ExpertBank small_class_bank(int experts, int max_timestep, std::uint64_t seed) {
    MlpSpec spec;
    spec.input_dim = 2;
    spec.hidden_dims = {32};
    spec.output_dim = 4;
    Rng rng(seed, "init");
    Mlp backbone(spec, rng);
    return ExpertBank(std::move(backbone), experts, max_timestep, 2, 8.0, rng);
}

}  // namespace

TEST_CASE("adamw descends a quadratic") {
    Tensor w = Tensor::row({5.0, -3.0});
    AdamW opt({w}, 0.1, 0.0);
    for (int i = 0; i < 400; ++i) {
        w.zero_grad();
        GradTape tape;
        w.set_requires_grad(true);
        const Tensor loss = mse(w, Tensor::row({1.0, 2.0}));
        tape.backward(loss);
        opt.step();
    }
    CHECK(w.at(0) == doctest::Approx(1.0).epsilon(1e-2));
    CHECK(w.at(1) == doctest::Approx(2.0).epsilon(1e-2));
}

TEST_CASE("kt loss values") {
    // identical logits, tau = 1 -> zero
    const Tensor logits = Tensor::row({0.3, -1.2, 0.9});
    CHECK(kt_loss(logits, logits.clone(), GuidanceSpec::LossKind::kClassNll, 1.0).item() ==
          doctest::Approx(0.0).epsilon(1e-12));

    // regression: identical -> 0, [1,2] vs [0,0] -> mean L1 = 1.5
    const Tensor teacher = Tensor::row({1.0, 2.0});
    CHECK(kt_loss(teacher, teacher.clone(), GuidanceSpec::LossKind::kRegressionL1, 1.0)
              .item() == doctest::Approx(0.0));
    CHECK(kt_loss(teacher, Tensor::row({0.0, 0.0}), GuidanceSpec::LossKind::kRegressionL1,
                  1.0)
              .item() == doctest::Approx(1.5));

    // tau = 2 softens the teacher only: KL(softmax([1,0]) || softmax([0,0]))
    // evaluated from the definition: p = (e/(1+e), 1/(1+e)), q = (1/2, 1/2).
    const double p0 = std::exp(1.0) / (1.0 + std::exp(1.0));
    const double expected =
        p0 * std::log(p0 / 0.5) + (1.0 - p0) * std::log((1.0 - p0) / 0.5);
    CHECK(kt_loss(Tensor::row({2.0, 0.0}), Tensor::row({0.0, 0.0}),
                  GuidanceSpec::LossKind::kClassNll, 2.0)
              .item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(expected == doctest::Approx(0.110938).epsilon(1e-4));

    CHECK_THROWS_AS(
        (void)kt_loss(teacher, teacher, GuidanceSpec::LossKind::kClassNll, 0.0),
        std::invalid_argument);

    // a teacher that still tracks gradients violates the stop-gradient contract
    Tensor tracked = Tensor::row({1.0, 2.0});
    tracked.set_requires_grad(true);
    CHECK_THROWS_AS(
        (void)kt_loss(tracked, teacher, GuidanceSpec::LossKind::kRegressionL1, 1.0),
        std::invalid_argument);
}

TEST_CASE("zero training iterations leave the model unchanged bitwise") {
    const NoiseSchedule sched = make_linear_schedule(50, 1e-3, 0.05);
    EpsilonModel model = tiny_epsilon(50, 3);
    const auto before = snapshot(model.net().parameters());
    TrainConfig cfg;
    cfg.iterations = 0;
    Rng rng(4, "data");
    const Tensor data = Tensor::gaussian({100, 1}, rng);
    const LossCurve curve = train_epsilon(sched, model, data, cfg);
    CHECK(curve.empty());
    CHECK(params_bitwise_equal(before, model.net().parameters()));
}

TEST_CASE("fixed seed reproduces the loss curve and final parameters") {
    const NoiseSchedule sched = make_linear_schedule(50, 1e-3, 0.05);
    Rng rng(5, "data");
    const Tensor data = Tensor::gaussian({200, 1}, rng);
    TrainConfig cfg;
    cfg.iterations = 40;
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-3;
    cfg.seed = 11;

    EpsilonModel a = tiny_epsilon(50, 7);
    EpsilonModel b = tiny_epsilon(50, 7);
    const LossCurve ca = train_epsilon(sched, a, data, cfg);
    const LossCurve cb = train_epsilon(sched, b, data, cfg);
    CHECK(ca == cb);  // bit-identical losses
    CHECK(params_bitwise_equal(a.net().parameters(), b.net().parameters()));
}

TEST_CASE("epsilon training on a constant dataset concentrates samples") {
    const int T = 50;
    const NoiseSchedule sched = make_linear_schedule(T, 1e-3, 0.08);
    EpsilonModel model = tiny_epsilon(T, 9);
    const double c = 1.5;
    const Tensor data = Tensor::full({256, 1}, c);
    TrainConfig cfg;
    cfg.iterations = 3000;
    cfg.batch_size = 64;
    cfg.learning_rate = 1e-3;
    cfg.weight_decay = 0.0;
    cfg.seed = 13;
    const LossCurve curve = train_epsilon(sched, model, data, cfg);
    CHECK(curve.back() < 0.5);

    SamplerConfig scfg;
    scfg.kind = SamplerConfig::Kind::kDdpm;
    scfg.steps = T;
    scfg.seed = 77;
    const SampleResult res = sample(sched, model, nullptr, nullptr, scfg, 5000, 1);
    double mean = 0.0;
    for (std::size_t i = 0; i < 5000; ++i) mean += res.x0.at(i);
    mean /= 5000.0;
    CHECK(std::abs(mean - c) < 0.1);
}

TEST_CASE("supervised expert training stays in range and in its own adapter") {
    const int T = 100;
    const NoiseSchedule sched = make_linear_schedule(T, 1e-3, 0.05);
    ExpertBank bank = small_class_bank(4, T, 21);
    const GmmTask task = make_gmm_task(4, 3.0, 0.3);
    Rng rng(22, "data");
    const LabeledSamples data = sample_gmm(task, 512, rng);

    const auto other_before = snapshot(bank.adapter(3).parameters());
    const auto backbone_before = snapshot(bank.backbone().parameters());

    std::set<int> seen;
    set_timestep_draw_hook([&](int expert, int t) {
        CHECK(expert == 2);
        seen.insert(t);
    });
    TrainConfig cfg;
    cfg.iterations = 30;
    cfg.batch_size = 32;
    cfg.seed = 23;
    train_expert_supervised(sched, bank, 2, data.x, data.y, cfg);
    set_timestep_draw_hook({});

    const TimestepRange range = expert_range(4, T, 2);
    for (int t : seen) CHECK(range.contains(t));
    CHECK(seen.size() > 5);

    CHECK(params_bitwise_equal(other_before, bank.adapter(3).parameters()));
    CHECK(params_bitwise_equal(backbone_before, bank.backbone().parameters()));
}

TEST_CASE("data-free training never touches the backbone") {
    const int T = 100;
    const NoiseSchedule sched = make_linear_schedule(T, 1e-3, 0.05);
    ExpertBank bank = small_class_bank(2, T, 31);
    Rng rng(32, "data");
    const Tensor kt = Tensor::gaussian({256, 2}, rng, 2.0);

    const auto backbone_before = snapshot(bank.backbone().parameters());
    TrainConfig cfg;
    cfg.iterations = 25;
    cfg.batch_size = 32;
    cfg.seed = 33;
    cfg.loss_kind = GuidanceSpec::LossKind::kClassNll;
    train_expert_data_free(sched, bank, 1, kt, cfg);

    CHECK(params_bitwise_equal(backbone_before, bank.backbone().parameters()));
    for (const Tensor& p : bank.backbone().parameters()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("data-free loss starts at zero when t is forced to the clean end") {
    // With zero-initialized adapters the student equals the teacher, so the
    // KL at t ~ 0 corruption of the same input is exactly zero.
    const int T = 100;
    const NoiseSchedule sched = make_linear_schedule(T, 1e-3, 0.05);
    ExpertBank bank = small_class_bank(1, T, 41);
    Rng rng(42, "data");
    const Tensor x0 = Tensor::gaussian({8, 2}, rng);
    const Tensor teacher = bank.forward(x0, std::nullopt);
    const Tensor student = bank.forward(x0, 1);  // same input, zero-init adapter
    const Tensor loss = kt_loss(teacher, student, GuidanceSpec::LossKind::kClassNll, 1.0);
    CHECK(loss.item() == doctest::Approx(0.0).epsilon(1e-14));
}

TEST_CASE("data-free training shrinks the transfer loss") {
    const int T = 100;
    const NoiseSchedule sched = make_linear_schedule(T, 1e-3, 0.05);
    ExpertBank bank = small_class_bank(1, T, 51);
    Rng rng(52, "data");
    const Tensor kt = Tensor::gaussian({512, 2}, rng, 2.0);

    TrainConfig cfg;
    cfg.iterations = 400;
    cfg.batch_size = 64;
    cfg.learning_rate = 1e-3;
    cfg.seed = 53;
    const LossCurve curve = train_expert_data_free(sched, bank, 1, kt, cfg);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 50; ++i) head += curve[std::size_t(i)];
    for (int i = 0; i < 50; ++i) tail += curve[curve.size() - 1 - std::size_t(i)];
    CHECK(tail < head);
}

TEST_CASE("kt dataset generation is deterministic and sized") {
    const int T = 50;
    const NoiseSchedule sched = make_linear_schedule(T, 1e-3, 0.05);
    EpsilonModel model = tiny_epsilon(T, 61);
    SamplerConfig scfg;
    scfg.kind = SamplerConfig::Kind::kDdim;
    scfg.steps = 10;
    scfg.seed = 62;
    const Tensor a = generate_kt_dataset(sched, model, 700, scfg, 1);
    const Tensor b = generate_kt_dataset(sched, model, 700, scfg, 1);
    CHECK(a.shape() == Shape{700, 1});
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));

    const Tensor empty = generate_kt_dataset(sched, model, 0, scfg, 1);
    CHECK(empty.shape() == Shape{0, 1});
}

TEST_CASE("teacher training reaches high clean accuracy") {
    const GmmTask task = make_gmm_task(4, 3.0, 0.3);
    Rng rng(71, "data");
    const LabeledSamples train = sample_gmm(task, 2000, rng);
    const LabeledSamples held = sample_gmm(task, 500, rng);

    MlpSpec spec;
    spec.input_dim = 2;
    spec.hidden_dims = {32, 32};
    spec.output_dim = 4;
    Rng init(72, "init");
    Mlp net(spec, init);
    TrainConfig cfg;
    cfg.iterations = 800;
    cfg.batch_size = 64;
    cfg.learning_rate = 1e-3;
    cfg.seed = 73;
    train_teacher_classifier(net, train.x, train.y, cfg);

    const Tensor logits = net.forward(held.x);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < 500; ++i) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < 4; ++k)
            if (logits.at(i * 4 + k) > logits.at(i * 4 + best)) best = k;
        correct += int(best) == held.y[i];
    }
    CHECK(double(correct) / 500.0 > 0.95);
}

TEST_CASE("train config validation") {
    TrainConfig cfg;
    cfg.iterations = -1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.iterations = 10;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.batch_size = 8;
    cfg.temperature = 0.0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.temperature = 1.0;
    CHECK_NOTHROW(cfg.validate());
}
