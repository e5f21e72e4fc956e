#include <doctest.h>

#include <random>

#include "mmen/models.hpp"
#include "mmen/netspec.hpp"

using namespace mmen;

namespace {

// Collects the computed shape after every layer.
std::vector<std::vector<int>> shape_chain(const NetworkSpec& spec) {
    std::vector<std::vector<int>> chain;
    std::vector<int> shape = spec.input_shape;
    for (const auto& l : spec.layers) {
        shape = layer_out_shape(l, shape);
        chain.push_back(shape);
    }
    return chain;
}

// Shapes right after each conv (resp. dense/flatten) layer, i.e. the cells
// listed in the architecture tables.
std::vector<std::vector<int>> table_cells(const NetworkSpec& spec) {
    std::vector<std::vector<int>> cells;
    std::vector<int> shape = spec.input_shape;
    for (const auto& l : spec.layers) {
        shape = layer_out_shape(l, shape);
        if (l.kind == LayerSpec::Kind::Conv || l.kind == LayerSpec::Kind::Dense ||
            l.kind == LayerSpec::Kind::Flatten)
            cells.push_back(shape);
    }
    return cells;
}

// Independent FLOPs oracle: walks output elements one at a time instead of
// using closed-form products.
long long flops_oracle(const NetworkSpec& spec) {
    long long total = 0;
    std::vector<int> shape = spec.input_shape;
    for (const auto& l : spec.layers) {
        const std::vector<int> out = layer_out_shape(l, shape);
        switch (l.kind) {
            case LayerSpec::Kind::Conv:
                for (int64_t i = 0; i < numel(out); ++i) total += 2LL * l.kh * l.kw * shape[0];
                break;
            case LayerSpec::Kind::Dense:
                for (int j = 0; j < out[0]; ++j) total += 2LL * shape[0];
                break;
            case LayerSpec::Kind::Flatten:
                break;
            default:
                total += numel(out);
                break;
        }
        shape = out;
    }
    return total;
}

}  // namespace

TEST_CASE("architecture tables reproduced exactly (paper profile)") {
    const Profile p = Profile::paper();

    CHECK(table_cells(feature_spec("camera_expert", p)) ==
          std::vector<std::vector<int>>{{16, 60, 96},
                                        {32, 30, 48},
                                        {64, 16, 24},
                                        {96, 8, 12},
                                        {128, 4, 6},
                                        {256, 2, 4},
                                        {512}});

    CHECK(table_cells(feature_spec("lidar_expert", p)) ==
          std::vector<std::vector<int>>{
              {16, 16, 148}, {32, 8, 72}, {64, 4, 34}, {96, 2, 16}, {128, 1, 8}, {512}});

    CHECK(table_cells(feature_spec("lidar_full_expert", p)) ==
          std::vector<std::vector<int>>{
              {16, 16, 222}, {32, 8, 106}, {64, 4, 50}, {96, 2, 24}, {128, 1, 12}, {768}, {512}});

    CHECK(table_cells(feature_spec("lidar_gate_feature", p)) ==
          std::vector<std::vector<int>>{{16, 10, 18}, {32, 8, 6}, {64, 4, 2}, {128}});

    CHECK(table_cells(feature_spec("camera_gate_feature", p)) ==
          std::vector<std::vector<int>>{{16, 13, 20}, {32, 6, 10}, {64, 2, 4}, {128}});
}

TEST_CASE("pooled shapes of the LiDAR expert chain") {
    const auto chain = shape_chain(feature_spec("lidar_expert", Profile::paper()));
    // conv5 output 128x1x8 halved by the 1x2 pool to 128x1x4 before flatten.
    bool saw = false;
    for (size_t i = 0; i + 1 < chain.size(); ++i)
        if (chain[i] == std::vector<int>{128, 1, 8} && chain[i + 1] == std::vector<int>{128, 1, 4})
            saw = true;
    CHECK(saw);
}

TEST_CASE("tiny profile specs finalize with shared expert feature length") {
    const Profile t = Profile::tiny();
    CHECK(feature_spec("camera_expert", t).output_len() == 384);
    CHECK(feature_spec("lidar_expert", t).output_len() == 384);
    CHECK(feature_spec("lidar_full_expert", t).output_len() == 384);
    CHECK(feature_spec("lidar_gate_feature", t).output_len() == 64);
    CHECK(feature_spec("camera_gate_feature", t).output_len() == 64);
    CHECK(expert_feature_len(t) == 384);
    CHECK(expert_feature_len(Profile::paper()) == 512);
}

TEST_CASE("declared-shape mismatch is rejected") {
    NetworkSpec s;
    s.name = "bad";
    s.input_shape = {3, 8, 8};
    LayerSpec c;
    c.kind = LayerSpec::Kind::Conv;
    c.out_ch = 4;
    c.kh = c.kw = 3;
    c.declared_out = {4, 8, 8};  // actual is {4,6,6}: no padding
    s.layers.push_back(c);
    CHECK_THROWS_AS(finalize_spec(s), ConfigError);
}

TEST_CASE("flops counter agrees with element-walking oracle") {
    const Profile p = Profile::paper();
    for (const char* n : {"camera_expert", "lidar_expert", "lidar_full_expert",
                          "lidar_gate_feature", "camera_gate_feature"}) {
        const auto s = feature_spec(n, p);
        CHECK(count_flops(s) == flops_oracle(s));
    }
    CHECK(count_flops(mlp_spec("h", 517, {128, 64, 1}, "tanh")) ==
          flops_oracle(mlp_spec("h", 517, {128, 64, 1}, "tanh")));

    // Randomized small conv stacks.
    std::mt19937 rng(7);
    for (int trial = 0; trial < 5; ++trial) {
        NetworkSpec s;
        s.name = "rand";
        s.input_shape = {static_cast<int>(rng() % 3 + 1), static_cast<int>(rng() % 6 + 8),
                         static_cast<int>(rng() % 6 + 8)};
        for (int l = 0; l < 3; ++l) {
            LayerSpec c;
            c.kind = LayerSpec::Kind::Conv;
            c.out_ch = static_cast<int>(rng() % 4 + 2);
            c.kh = static_cast<int>(rng() % 2 + 2);
            c.kw = static_cast<int>(rng() % 2 + 2);
            c.ph = c.pw = 1;
            s.layers.push_back(c);
            LayerSpec r;
            r.kind = LayerSpec::Kind::ReLU;
            s.layers.push_back(r);
        }
        LayerSpec f;
        f.kind = LayerSpec::Kind::Flatten;
        s.layers.push_back(f);
        finalize_spec(s);
        CHECK(count_flops(s) == flops_oracle(s));
    }
}

TEST_CASE("model flops match the published table within 25 percent") {
    const Profile p = Profile::paper();
    auto within = [&](const char* name, double ref) {
        const double got = static_cast<double>(model_flops(name, p));
        CHECK(std::abs(got - ref) / ref < 0.25);
    };
    within("lidar_only", published_ref::flops_lidar_only);
    within("single_camera", published_ref::flops_single_camera);
    within("three_cameras", published_ref::flops_three_cameras);
    within("baseline_concat", published_ref::flops_baseline);
    within("lidar_with_gating", published_ref::flops_lidar_with_gating);
    within("final_net_lidar", published_ref::flops_ours_lidar);
    within("final_net_camera", published_ref::flops_ours_camera);
}

TEST_CASE("flops reduction ratios match within 10 percent") {
    const Profile p = Profile::paper();
    const double r1 = static_cast<double>(model_flops("final_net_lidar", p)) /
                      static_cast<double>(model_flops("baseline_concat", p));
    const double r2 = static_cast<double>(model_flops("lidar_with_gating", p)) /
                      static_cast<double>(model_flops("lidar_only", p));
    CHECK(std::abs(r1 - 0.174) / 0.174 < 0.10);
    CHECK(std::abs(r2 - 0.539) / 0.539 < 0.10);
}
