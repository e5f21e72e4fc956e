#include <doctest.h>

#include <random>

#include "mmen/models.hpp"

using namespace mmen;

namespace {

Tensor random_tensor(std::vector<int> shape, uint32_t seed) {
    Tensor t(std::move(shape));
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> d(-0.5f, 0.5f);
    for (auto& v : t.data) v = d(rng);
    return t;
}

float sum_row(const Tensor& t, int row) {
    float s = 0;
    for (int j = 0; j < t.dim(1); ++j) s += t[static_cast<int64_t>(row) * t.dim(1) + j];
    return s;
}

}  // namespace

TEST_CASE("crop window math on the full-size profile") {
    const Profile p = Profile::paper();
    CHECK(p.seg_w == 150);
    CHECK(crop_start_col(-1.0, p) == 0);
    CHECK(crop_start_col(0.0, p) == 150);
    CHECK(crop_start_col(0.2, p) == 180);
    CHECK(crop_start_col(1.0, p) == 300);
    // Out-of-range gate values clamp to the edges.
    CHECK(crop_start_col(-3.0, p) == 0);
    CHECK(crop_start_col(3.0, p) == 300);
}

TEST_CASE("crop start is monotone and always in range") {
    for (const Profile& p : {Profile::paper(), Profile::tiny()}) {
        int prev = -1;
        for (int i = 0; i <= 200; ++i) {
            const double g = -1.0 + 2.0 * i / 200.0;
            const int s = crop_start_col(g, p);
            CHECK(s >= 0);
            CHECK(s <= p.lidar_w - p.seg_w);
            CHECK(s >= prev);
            prev = s;
        }
    }
}

TEST_CASE("fixed segment offsets cover the sweep half-overlapping") {
    const Profile p = Profile::paper();
    CHECK(p.seg_offsets == std::array<int, 5>{0, 75, 150, 225, 300});
    CHECK(p.seg_offsets.back() + p.seg_w == p.lidar_w);
    for (size_t i = 1; i < p.seg_offsets.size(); ++i)
        CHECK(p.seg_offsets[i] - p.seg_offsets[i - 1] == p.seg_w / 2);
}

TEST_CASE("argmax_row breaks ties toward the lowest index") {
    const float a[4] = {0.2f, 0.4f, 0.4f, 0.1f};
    CHECK(argmax_row(a, 4) == 1);
    const float b[3] = {1.0f, 1.0f, 1.0f};
    CHECK(argmax_row(b, 3) == 0);
}

TEST_CASE("segmented lidar network forward shapes and gate normalization") {
    const Profile p = Profile::tiny();
    ParamStore store;
    init_step1_params(store, p, 1);
    Tape tape;
    ParamBinder binder(tape, store);
    const int x4 = tape.leaf(random_tensor({2, 2, p.lidar_h, p.lidar_w}, 3));
    const auto out = forward_step1(tape, binder, p, x4, false);
    CHECK(tape.val(out.pred).shape == std::vector<int>{2, 1});
    CHECK(tape.val(out.gate_probs).shape == std::vector<int>{2, 5});
    for (int i = 0; i < 2; ++i) {
        CHECK(sum_row(tape.val(out.gate_probs), i) == doctest::Approx(1.0).epsilon(1e-5));
        CHECK(std::abs(tape.val(out.pred)[i]) <= 1.0f);
    }
}

TEST_CASE("lidar gate scalar stays on the value grid's hull") {
    const Profile p = Profile::tiny();
    ParamStore store;
    init_lidar_gate_params(store, p, 2);
    Tape tape;
    ParamBinder binder(tape, store);
    const int x4 = tape.leaf(random_tensor({3, 2, p.lidar_h, p.lidar_w}, 4));
    const auto out = forward_lidar_gate(tape, binder, p, x4, false);
    const auto& s = tape.val(out.scalar);
    CHECK(s.shape == std::vector<int>{3, 1});
    for (int i = 0; i < 3; ++i) {
        CHECK(s[i] >= -1.0f);
        CHECK(s[i] <= 1.0f);
    }
}

TEST_CASE("gated lidar forward crops where the gate points") {
    const Profile p = Profile::tiny();
    ParamStore store;
    init_lidar_gate_params(store, p, 5);
    init_lidar_with_gating_params(store, p, 6);
    Tape tape;
    ParamBinder binder(tape, store);
    const int x4 = tape.leaf(random_tensor({2, 2, p.lidar_h, p.lidar_w}, 7));
    const auto out = forward_lidar_with_gating(tape, binder, p, x4, false);
    REQUIRE(out.starts.size() == 2);
    const auto& gl = tape.val(out.gate.scalar);
    for (int i = 0; i < 2; ++i) CHECK(out.starts[static_cast<size_t>(i)] == crop_start_col(gl[i], p));
    CHECK(tape.val(out.pred).shape == std::vector<int>{2, 1});
}

TEST_CASE("four-sensor fusion and main gate forwards") {
    const Profile p = Profile::tiny();
    ParamStore store;
    init_foursensor_params(store, p, 8);
    init_main_gate_params(store, p, 9);
    Tape tape;
    ParamBinder binder(tape, store);
    const int x1 = tape.leaf(random_tensor({2, 3, p.img_h, p.img_w}, 11));
    const int x2 = tape.leaf(random_tensor({2, 3, p.img_h, p.img_w}, 12));
    const int x3 = tape.leaf(random_tensor({2, 3, p.img_h, p.img_w}, 13));
    const int x4 = tape.leaf(random_tensor({2, 2, p.lidar_h, p.lidar_w}, 14));

    const auto fused = forward_foursensor(tape, binder, p, x1, x2, x3, x4, false);
    CHECK(tape.val(fused.pred).shape == std::vector<int>{2, 1});
    CHECK(tape.val(fused.gate_probs).shape == std::vector<int>{2, 4});

    const auto gm = forward_main_gate(tape, binder, p, x1, x2, x3, x4, false);
    CHECK(tape.val(gm.gate_probs).shape == std::vector<int>{2, 4});
    for (int i = 0; i < 2; ++i)
        CHECK(sum_row(tape.val(gm.gate_probs), i) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("branch features share one length and the head consumes both") {
    const Profile p = Profile::tiny();
    ParamStore store;
    std::mt19937 rng(21);
    init_network_params(store, feature_spec("camera_expert", p), "cam2.", rng);
    init_lidar_gate_params(store, p, 22);
    init_lidar_with_gating_params(store, p, 23);
    init_final_head_params(store, p, 24);

    Tape tape;
    ParamBinder binder(tape, store);
    const int ximg = tape.leaf(random_tensor({2, 3, p.img_h, p.img_w}, 25));
    const int x4 = tape.leaf(random_tensor({2, 2, p.lidar_h, p.lidar_w}, 26));

    const int vc = camera_branch_feature(tape, binder, p, ximg, 2, false);
    const auto lb = lidar_branch_feature(tape, binder, p, x4, false);
    const int e1 = expert_feature_len(p) + 1;
    CHECK(tape.val(vc).shape == std::vector<int>{2, e1});
    CHECK(tape.val(lb.feature).shape == std::vector<int>{2, e1});
    // Camera padding slot is exactly zero.
    CHECK(tape.val(vc)[e1 - 1] == 0.0f);
    CHECK(tape.val(vc)[2 * e1 - 1] == 0.0f);

    const int yc = final_head(tape, binder, p, vc, {1, 1});
    const int yl = final_head(tape, binder, p, lb.feature, {3, 3});
    CHECK(tape.val(yc).shape == std::vector<int>{2, 1});
    CHECK(tape.val(yl).shape == std::vector<int>{2, 1});
    CHECK_THROWS_AS(final_head(tape, binder, p, vc, {4, 0}), ConfigError);
}

TEST_CASE("conditional inference runs exactly one expert and matches the batched path") {
    const Profile p = Profile::tiny();
    ParamStore store;
    std::mt19937 rng(31);
    const auto cam = feature_spec("camera_expert", p);
    for (int i = 1; i <= 3; ++i) init_network_params(store, cam, "cam" + std::to_string(i) + ".", rng);
    init_lidar_gate_params(store, p, 32);
    init_lidar_with_gating_params(store, p, 33);
    init_main_gate_params(store, p, 34);
    init_final_head_params(store, p, 35);

    const Tensor x1 = random_tensor({3, p.img_h, p.img_w}, 41);
    const Tensor x2 = random_tensor({3, p.img_h, p.img_w}, 42);
    const Tensor x3 = random_tensor({3, p.img_h, p.img_w}, 43);
    const Tensor x4 = random_tensor({2, p.lidar_h, p.lidar_w}, 44);

    const auto inf = final_infer(store, p, x1, x2, x3, x4);
    CHECK(inf.experts_executed == 1);
    CHECK(std::abs(inf.pred) <= 1.0f);
    float s = 0;
    for (float v : inf.gate.main_probs) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    CHECK(inf.gate.selected ==
          argmax_row(inf.gate.main_probs.data(), 4));

    // Replaying the selected branch by hand reproduces the prediction.
    Tape tape;
    ParamBinder binder(tape, store);
    auto batch1 = [&](const Tensor& t) {
        Tensor b = t;
        b.shape.insert(b.shape.begin(), 1);
        return tape.leaf(std::move(b));
    };
    int v;
    if (inf.gate.selected < 3) {
        const Tensor& img = inf.gate.selected == 0 ? x1 : inf.gate.selected == 1 ? x2 : x3;
        v = camera_branch_feature(tape, binder, p, batch1(img), inf.gate.selected + 1, false);
    } else {
        v = lidar_branch_feature(tape, binder, p, batch1(x4), false).feature;
    }
    const int y = final_head(tape, binder, p, v, {inf.gate.selected});
    CHECK(tape.val(y)[0] == inf.pred);
}

TEST_CASE("identical seeds give bitwise-identical parameters and outputs") {
    const Profile p = Profile::tiny();
    ParamStore a, b;
    init_step1_params(a, p, 77);
    init_step1_params(b, p, 77);
    CHECK(a.checksum("") == b.checksum(""));

    const Tensor x = random_tensor({2, 2, p.lidar_h, p.lidar_w}, 78);
    float ya, yb;
    {
        Tape tape;
        ParamBinder binder(tape, a);
        ya = tape.val(forward_step1(tape, binder, p, tape.leaf(x), false).pred)[0];
    }
    {
        Tape tape;
        ParamBinder binder(tape, b);
        yb = tape.val(forward_step1(tape, binder, p, tape.leaf(x), false).pred)[0];
    }
    CHECK(ya == yb);

    ParamStore c;
    init_step1_params(c, p, 78);
    CHECK(a.checksum("") != c.checksum(""));
}

TEST_CASE("baseline concatenation forward") {
    const Profile p = Profile::tiny();
    ParamStore store;
    init_baseline_params(store, p, 50);
    Tape tape;
    ParamBinder binder(tape, store);
    const int x1 = tape.leaf(random_tensor({2, 3, p.img_h, p.img_w}, 51));
    const int x2 = tape.leaf(random_tensor({2, 3, p.img_h, p.img_w}, 52));
    const int x3 = tape.leaf(random_tensor({2, 3, p.img_h, p.img_w}, 53));
    const int x4 = tape.leaf(random_tensor({2, 2, p.lidar_h, p.lidar_w}, 54));
    const int y = forward_baseline(tape, binder, p, x1, x2, x3, x4, false);
    CHECK(tape.val(y).shape == std::vector<int>{2, 1});
}
