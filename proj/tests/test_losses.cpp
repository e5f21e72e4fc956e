#include <doctest.h>

#include <cmath>

#include "mmen/losses.hpp"

using namespace mmen;

TEST_CASE("sparsity identities") {
    CHECK(std::abs(sparsity_loss({0, 0, 1, 0})) < 1e-9);
    CHECK(std::abs(sparsity_loss({0.25, 0.25, 0.25, 0.25}) - std::log(4.0)) < 1e-9);
    CHECK(std::abs(sparsity_loss({0.2, 0.2, 0.2, 0.2, 0.2}) - std::log(5.0)) < 1e-9);
}

TEST_CASE("negative-entropy identities") {
    // Every row the same one-hot: mean is one-hot, entropy 0.
    CHECK(std::abs(nentropy_loss({{1, 0, 0}, {1, 0, 0}, {1, 0, 0}})) < 1e-9);
    // One-hot rows covering all slots equally: mean is uniform, -ln n.
    CHECK(std::abs(nentropy_loss({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}}) +
                   std::log(4.0)) < 1e-9);
    CHECK(std::abs(nentropy_loss({{1, 0, 0, 0, 0},
                                  {0, 1, 0, 0, 0},
                                  {0, 0, 1, 0, 0},
                                  {0, 0, 0, 1, 0},
                                  {0, 0, 0, 0, 1}}) +
                   std::log(5.0)) < 1e-9);
    // Bounds: -ln n <= nentropy <= 0.
    const double v = nentropy_loss({{0.7, 0.2, 0.1}, {0.1, 0.1, 0.8}});
    CHECK(v <= 0.0);
    CHECK(v >= -std::log(3.0));
    CHECK_THROWS_AS(nentropy_loss({}), ConfigError);
}

TEST_CASE("gate label reductions") {
    CHECK(scalar_gate_label({0, 0, 0, 0, 1}) == doctest::Approx(1.0));
    CHECK(scalar_gate_label({1, 0, 0, 0, 0}) == doctest::Approx(-1.0));
    CHECK(std::abs(scalar_gate_label({0.2, 0.2, 0.2, 0.2, 0.2})) < 1e-12);
    CHECK(scalar_gate_label({0, 0.5, 0, 0.5, 0}) == doctest::Approx(0.0));
    CHECK_THROWS_AS(scalar_gate_label({0.5, 0.5}), ConfigError);

    CHECK(onehot_gate_label({0.1, 0.6, 0.2, 0.1}) == 1);
    CHECK(onehot_gate_label({0.4, 0.4, 0.2}) == 0);  // tie -> lowest index
}

TEST_CASE("prediction loss is squared error") {
    CHECK(prediction_loss(0.5, -0.5) == doctest::Approx(1.0));
    CHECK(prediction_loss(0.3, 0.3) == doctest::Approx(0.0));
}

TEST_CASE("combined objective matches the host-side pieces") {
    Tape tape;
    Tensor pred({3, 1});
    pred.data = {0.2f, -0.4f, 0.9f};
    Tensor probs({3, 4});
    probs.data = {0.7f, 0.1f, 0.1f, 0.1f, 0.25f, 0.25f, 0.25f, 0.25f, 0.1f, 0.2f, 0.3f, 0.4f};
    const std::vector<float> targets = {0.0f, -0.5f, 1.0f};
    const LossWeights w{0.001, 0.0016};
    const int loss = combined_loss(tape, tape.leaf(pred), targets, tape.leaf(probs), w);

    double lp = 0, ls = 0;
    std::vector<std::vector<double>> rows;
    for (int i = 0; i < 3; ++i) {
        lp += prediction_loss(targets[static_cast<size_t>(i)], pred[i]) / 3.0;
        std::vector<double> row;
        for (int j = 0; j < 4; ++j) row.push_back(probs[i * 4 + j]);
        ls += sparsity_loss(row) / 3.0;
        rows.push_back(row);
    }
    const double expect = lp + w.alpha * ls + w.beta * nentropy_loss(rows);
    CHECK(tape.val(loss)[0] == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("softened targets are proper distributions") {
    const std::vector<float> logits = {2.0f, 0.0f, -1.0f, 0.5f, 1.0f, 1.0f, 1.0f, 1.0f};
    for (double t : {1.0, 2.0, 4.0}) {
        const auto p = soften(logits, 4, t);
        for (int r = 0; r < 2; ++r) {
            float s = 0;
            for (int j = 0; j < 4; ++j) s += p[static_cast<size_t>(r * 4 + j)];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
    // Higher temperature flattens the distribution.
    const auto sharp = soften(logits, 4, 1.0);
    const auto soft = soften(logits, 4, 4.0);
    CHECK(soft[0] < sharp[0]);
    // The uniform row stays uniform at any temperature.
    CHECK(soften(logits, 4, 3.0)[5] == doctest::Approx(0.25));
}

TEST_CASE("distillation loss vanishes when the student equals the teacher") {
    Tape tape;
    Tensor logits({2, 5});
    logits.data = {1.0f, 0.5f, -0.2f, 0.0f, 2.0f, -1.0f, 0.1f, 0.3f, 0.7f, -0.5f};
    const std::vector<float> teacher(logits.data.begin(), logits.data.end());

    DistillConfig cfg;
    cfg.student_loss = DistillConfig::StudentLoss::Mse;
    cfg.temperature = 2.0;
    cfg.kd_weight = 1.0;  // isolate the KL term
    const int loss = distill_loss(tape, tape.leaf(logits), teacher, cfg);
    CHECK(std::abs(tape.val(loss)[0]) < 1e-6);
}

TEST_CASE("kd_weight zero degenerates to the pure student loss") {
    Tape tape;
    Tensor logits({1, 5});
    logits.data = {0.0f, 0.0f, 5.0f, 0.0f, 0.0f};  // g ~ one-hot at center, scalar ~ 0
    std::vector<float> teacher = {5.0f, 0.0f, 0.0f, 0.0f, 0.0f};  // scalar label ~ -1

    DistillConfig cfg;
    cfg.student_loss = DistillConfig::StudentLoss::Mse;
    cfg.kd_weight = 0.0;
    const int loss = distill_loss(tape, tape.leaf(logits), teacher, cfg);
    // MSE between scalar gate values: close to (0 - (-1))^2 = 1.
    CHECK(tape.val(loss)[0] == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("cross-entropy student loss uses the teacher argmax") {
    Tape tape;
    Tensor logits({1, 4});
    logits.data = {0.0f, 10.0f, 0.0f, 0.0f};
    DistillConfig cfg;
    cfg.student_loss = DistillConfig::StudentLoss::CrossEntropy;
    cfg.temperature = 4.0;
    cfg.kd_weight = 0.0;

    const std::vector<float> agree = {-1.0f, 3.0f, 0.0f, 0.5f};  // argmax 1, matches
    CHECK(tape.val(distill_loss(tape, tape.leaf(logits), agree, cfg))[0] < 0.01f);
    const std::vector<float> disagree = {3.0f, -1.0f, 0.0f, 0.5f};  // argmax 0
    CHECK(tape.val(distill_loss(tape, tape.leaf(logits), disagree, cfg))[0] > 5.0f);
}
