#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "mmen/eval.hpp"

using namespace mmen;

namespace {

Frame random_frame(const Profile& p, uint32_t seed, float y) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Frame f;
    f.x1 = Tensor({3, p.img_h, p.img_w});
    f.x2 = Tensor({3, p.img_h, p.img_w});
    f.x3 = Tensor({3, p.img_h, p.img_w});
    f.x4 = Tensor({2, p.lidar_h, p.lidar_w});
    for (auto* t : {&f.x1, &f.x2, &f.x3, &f.x4})
        for (auto& v : t->data) v = u(rng);
    f.y = y;
    return f;
}

// Two frames in each of the seven steering bins.
std::vector<Frame> bin_covering_frames(const Profile& p) {
    const float ys[] = {-0.9f, -0.5f, -0.1f, 0.0f, 0.1f, 0.5f, 0.9f};
    std::vector<Frame> frames;
    uint32_t seed = 100;
    for (float y : ys)
        for (int k = 0; k < 2; ++k) frames.push_back(random_frame(p, seed++, y));
    return frames;
}

bool all_zero(const Tensor& t) {
    for (float v : t.data)
        if (v != 0.0f) return false;
    return true;
}

}  // namespace

TEST_CASE("scenario masking") {
    const Profile p = Profile::tiny();
    const Frame f = random_frame(p, 7, 0.2f);

    SUBCASE("case 2 disables the LiDAR only") {
        const Frame m = apply_scenario(f, 2, 11);
        CHECK(all_zero(m.x4));
        CHECK(m.x1.data == f.x1.data);
        CHECK(m.x2.data == f.x2.data);
        CHECK(m.x3.data == f.x3.data);
    }

    SUBCASE("cases 3..5 zero the matching LiDAR third") {
        const int third = p.lidar_w / 3;
        for (int c = 3; c <= 5; ++c) {
            const Frame m = apply_scenario(f, c, 11);
            const int lo = (c - 3) * third;
            const int hi = (c == 5) ? p.lidar_w : lo + third;
            for (int ch = 0; ch < 2; ++ch)
                for (int r = 0; r < p.lidar_h; ++r)
                    for (int col = 0; col < p.lidar_w; ++col) {
                        const int64_t i = (static_cast<int64_t>(ch) * p.lidar_h + r) * p.lidar_w + col;
                        if (col >= lo && col < hi)
                            CHECK(m.x4[i] == 0.0f);
                        else
                            CHECK(m.x4[i] == f.x4[i]);
                    }
            CHECK(m.x1.data == f.x1.data);
        }
    }

    SUBCASE("case 1 keeps LiDAR and disables at most one camera, keyed by index") {
        int disabled_total = 0;
        for (uint64_t idx = 0; idx < 64; ++idx) {
            const Frame a = apply_scenario(f, 1, idx);
            const Frame b = apply_scenario(f, 1, idx);
            CHECK(a.x1.data == b.x1.data);  // pure function of the index
            CHECK(a.x4.data == f.x4.data);
            const int off = static_cast<int>(all_zero(a.x1)) + static_cast<int>(all_zero(a.x2)) +
                            static_cast<int>(all_zero(a.x3));
            CHECK(off <= 1);
            disabled_total += off;
        }
        // The index hash must actually hit the camera-off choices.
        CHECK(disabled_total > 10);
        CHECK(disabled_total < 64);
    }

    SUBCASE("masking is idempotent and rejects bad cases") {
        const Frame once = apply_scenario(f, 4, 3);
        const Frame twice = apply_scenario(once, 4, 3);
        CHECK(once.x4.data == twice.x4.data);
        CHECK_THROWS_AS(apply_scenario(f, 0, 0), ConfigError);
        CHECK_THROWS_AS(apply_scenario(f, 6, 0), ConfigError);
    }
}

TEST_CASE("batch stacking") {
    const Profile p = Profile::tiny();
    std::vector<Frame> frames = {random_frame(p, 1, 0.1f), random_frame(p, 2, -0.3f),
                                 random_frame(p, 3, 0.7f)};
    const std::vector<int> idx = {2, 0};
    const Tensor x4 = stack_input(frames, idx, 4);
    CHECK(x4.shape == std::vector<int>{2, 2, p.lidar_h, p.lidar_w});
    CHECK(x4[0] == frames[2].x4[0]);
    CHECK(x4[x4.size() / 2] == frames[0].x4[0]);
    const Tensor x1 = stack_input(frames, idx, 1);
    CHECK(x1.shape == std::vector<int>{2, 3, p.img_h, p.img_w});
    const auto y = stack_targets(frames, idx);
    CHECK(y == std::vector<float>{0.7f, 0.1f});
}

TEST_CASE("config defaults and JSON overrides") {
    const PipelineConfig d = PipelineConfig::defaults("paper");
    CHECK(d.s11.lr == doctest::Approx(1e-3));
    CHECK(d.s21.lr == doctest::Approx(1e-4));
    CHECK(d.s3.lr == doctest::Approx(1e-4));
    CHECK(d.s11.weights.alpha == doctest::Approx(0.001));
    CHECK(d.s11.weights.beta == doctest::Approx(0.0016));
    CHECK(d.s21.weights.alpha == doctest::Approx(0.002));
    CHECK(d.s21.weights.beta == doctest::Approx(0.0));
    CHECK(d.s12.distill.temperature == doctest::Approx(2.0));
    CHECK(d.s22.distill.temperature == doctest::Approx(4.0));
    CHECK(d.s12.distill.kd_weight == doctest::Approx(0.9));

    const PipelineConfig t = PipelineConfig::defaults("tiny");
    CHECK(t.frames < d.frames);

    const char* path = "test_cfg.json";
    {
        std::ofstream os(path);
        os << R"({"seed": 9, "frames": 123, "s11": {"epochs": 2, "alpha": 0.5},)"
           << R"( "s22": {"temperature": 3.0}})";
    }
    const PipelineConfig c = load_pipeline_config(path, "tiny");
    CHECK(c.seed == 9);
    CHECK(c.frames == 123);
    CHECK(c.s11.epochs == 2);
    CHECK(c.s11.weights.alpha == doctest::Approx(0.5));
    CHECK(c.s11.weights.beta == doctest::Approx(0.0016));  // untouched keys keep defaults
    CHECK(c.s22.distill.temperature == doctest::Approx(3.0));
    CHECK(c.s21.lr == doctest::Approx(1e-4));
    std::remove(path);
}

TEST_CASE("teacher labels are a pure function of checkpoint and dataset") {
    const Profile p = Profile::tiny();
    const auto frames = bin_covering_frames(p);
    ParamStore store;
    init_step1_params(store, p, 42);
    const auto a = step1_teacher_logits(store, frames, p);
    const auto b = step1_teacher_logits(store, frames, p, /*batch=*/5);
    REQUIRE(a.size() == frames.size() * 5);
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-5));

    ParamStore fs;
    init_foursensor_params(fs, p, 42);
    const auto c = foursensor_teacher_logits(fs, frames, 3, p);
    const auto d2 = foursensor_teacher_logits(fs, frames, 3, p, /*batch=*/3);
    REQUIRE(c.size() == frames.size() * 4);
    for (size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(d2[i]).epsilon(1e-5));
}

TEST_CASE("stage 1.3 trains the expert but never the adopted gate") {
    const Profile p = Profile::tiny();
    const auto frames = bin_covering_frames(p);
    ParamStore gl;
    init_lidar_gate_params(gl, p, 5);
    const uint64_t before = gl.checksum("gl.");

    StageConfig cfg;
    cfg.epochs = 1;
    cfg.per_bin = 1;
    cfg.batch = 4;
    const auto out = train_stage_1_3(frames, frames, gl, p, cfg, 5);
    CHECK(out.metrics.at("gate_frozen") == doctest::Approx(1.0));
    CHECK(out.store.checksum("gl.") == before);
    // The expert and head did move.
    ParamStore fresh;
    init_lidar_with_gating_params(fresh, p, 5);
    CHECK(out.store.checksum("lidar.") != fresh.checksum("lidar."));
}

TEST_CASE("identical stage runs produce identical parameters") {
    const Profile p = Profile::tiny();
    const auto frames = bin_covering_frames(p);
    StageConfig cfg;
    cfg.epochs = 1;
    cfg.per_bin = 1;
    cfg.batch = 4;
    const auto a = train_stage_1_1(frames, p, cfg, 77);
    const auto b = train_stage_1_1(frames, p, cfg, 77);
    CHECK(a.store.checksum() == b.store.checksum());
    CHECK(a.metrics.at("train_loss") == doctest::Approx(b.metrics.at("train_loss")));
    const auto c = train_stage_1_1(frames, p, cfg, 78);
    CHECK(a.store.checksum() != c.store.checksum());
}

TEST_CASE("metrics CSV and manifest formatting") {
    MetricsReport rep;
    rep.cases.push_back({1, 0.02, 0.95, 100});
    rep.cases.push_back({2, 0.03, -1.0, 100});
    rep.scalars["final_mean_mse"] = 0.025;
    const std::string csv = rep.to_csv();
    CHECK(csv.find("case,mse,gate_acc,n_frames\n1,0.020000,0.950000,100\n") != std::string::npos);
    CHECK(csv.find("\n2,0.030000,,100\n") != std::string::npos);  // no teacher -> blank
    CHECK(csv.find("final_mean_mse,0.025000") != std::string::npos);

    RunManifest man;
    man.command = "pipeline";
    man.seed = 4;
    man.config_snapshot = "{\"frames\":10}";
    man.outputs = {"a.mmen"};
    const std::string j = man.to_json();
    CHECK(j.find("\"command\": \"pipeline\"") != std::string::npos);
    CHECK(j.find("\"frames\": 10") != std::string::npos);

    const char* path = "digest_probe.bin";
    {
        std::ofstream os(path, std::ios::binary);
        os << "hello";
    }
    CHECK(file_digest(path) == file_digest(path));
    CHECK(file_digest(path).size() == 16);
    std::remove(path);
}
