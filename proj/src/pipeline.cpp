#include "mmen/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace mmen {

PipelineConfig PipelineConfig::defaults(const std::string& profile) {
    PipelineConfig c;
    c.profile = profile;
    c.s11 = {1e-3, 6, 50, 10, {0.001, 0.0016}, {}};
    c.s12 = {1e-3, 8, 60, 20, {}, {2.0, 0.9, DistillConfig::StudentLoss::Mse}};
    c.s13 = {1e-3, 6, 50, 10, {}, {}};
    c.s21 = {1e-4, 3, 40, 8, {0.002, 0.0}, {}};
    c.s22 = {1e-3, 6, 30, 20, {}, {4.0, 0.9, DistillConfig::StudentLoss::CrossEntropy}};
    c.s3 = {1e-4, 3, 45, 8, {}, {}};
    c.e2e = {1e-3, 1, 40, 8, {}, {}};
    if (profile == "tiny") {
        c.frames = 400;
        c.teacher_subset = 150;
        for (StageConfig* s : {&c.s11, &c.s12, &c.s13, &c.s21, &c.s22, &c.s3, &c.e2e}) {
            s->epochs = std::max(1, s->epochs / 2);
            s->per_bin = std::max(4, s->per_bin / 4);
        }
    }
    return c;
}

// ---- scenarios ----

namespace {

void zero_tensor(Tensor& t) { t.fill(0.0f); }

void zero_lidar_third(Tensor& x4, int third) {
    const int rows = x4.dim(1), cols = x4.dim(2);
    const int c0 = third * cols / 3, c1 = (third + 1) * cols / 3;
    for (int ch = 0; ch < 2; ++ch)
        for (int r = 0; r < rows; ++r)
            for (int c = c0; c < c1; ++c)
                x4[(static_cast<int64_t>(ch) * rows + r) * cols + c] = 0.0f;
}

int case1_camera_choice(uint64_t frame_index) {
    uint32_t h = static_cast<uint32_t>(frame_index) * 2654435761u + 0x9e3779b9u;
    h ^= h >> 16;
    return static_cast<int>(h % 4);  // 0 = none, 1..3 = that camera off
}

}  // namespace

Frame apply_scenario(const Frame& f, int case_id, uint64_t frame_index) {
    Frame out = f;
    switch (case_id) {
        case 1: {
            const int off = case1_camera_choice(frame_index);
            if (off == 1) zero_tensor(out.x1);
            if (off == 2) zero_tensor(out.x2);
            if (off == 3) zero_tensor(out.x3);
            break;
        }
        case 2:
            zero_tensor(out.x4);
            break;
        case 3:
        case 4:
        case 5:
            zero_lidar_third(out.x4, case_id - 3);
            break;
        default:
            throw ConfigError("unknown scenario case " + std::to_string(case_id));
    }
    return out;
}

// ---- batching ----

Tensor stack_input(const std::vector<Frame>& frames, const std::vector<int>& idx, int which) {
    if (idx.empty()) throw ConfigError("empty batch");
    auto pick = [&](const Frame& f) -> const Tensor& {
        switch (which) {
            case 1: return f.x1;
            case 2: return f.x2;
            case 3: return f.x3;
            case 4: return f.x4;
        }
        throw ConfigError("bad input selector");
    };
    const Tensor& first = pick(frames[static_cast<size_t>(idx[0])]);
    std::vector<int> shape = first.shape;
    shape.insert(shape.begin(), static_cast<int>(idx.size()));
    Tensor out(shape);
    const int64_t stride = first.size();
    for (size_t i = 0; i < idx.size(); ++i) {
        const Tensor& t = pick(frames[static_cast<size_t>(idx[i])]);
        if (t.shape != first.shape) throw ConfigError("ragged batch shapes");
        std::copy(t.data.begin(), t.data.end(), out.data.begin() + static_cast<int64_t>(i) * stride);
    }
    return out;
}

std::vector<float> stack_targets(const std::vector<Frame>& frames, const std::vector<int>& idx) {
    std::vector<float> y;
    y.reserve(idx.size());
    for (int i : idx) y.push_back(frames[static_cast<size_t>(i)].y);
    return y;
}

namespace {

// Balanced epoch indices split into shuffled batches of at least 2.
std::vector<std::vector<int>> make_batches(const std::vector<Frame>& frames, const StageConfig& cfg,
                                           std::mt19937& rng) {
    std::vector<int> idx = balanced_epoch_sample(frames, cfg.per_bin, rng());
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<std::vector<int>> batches;
    for (size_t i = 0; i + 1 < idx.size(); i += static_cast<size_t>(cfg.batch)) {
        const size_t end = std::min(idx.size(), i + static_cast<size_t>(cfg.batch));
        if (end - i < 2) break;
        batches.emplace_back(idx.begin() + static_cast<int64_t>(i),
                             idx.begin() + static_cast<int64_t>(end));
    }
    return batches;
}

std::vector<int> iota_batch(size_t from, size_t to) {
    std::vector<int> v;
    for (size_t i = from; i < to; ++i) v.push_back(static_cast<int>(i));
    return v;
}

// Masked copies of the selected frames; indices key the case-1 choice.
std::vector<Frame> masked_frames(const std::vector<Frame>& frames, const std::vector<int>& idx,
                                 int case_id) {
    std::vector<Frame> out;
    out.reserve(idx.size());
    for (int i : idx)
        out.push_back(apply_scenario(frames[static_cast<size_t>(i)], case_id,
                                     static_cast<uint64_t>(i)));
    return out;
}

}  // namespace

// ---- stage 1.1 ----

StageOutput train_stage_1_1(const std::vector<Frame>& train, const Profile& profile,
                            const StageConfig& cfg, uint32_t seed) {
    StageOutput out;
    init_step1_params(out.store, profile, seed);
    std::mt19937 rng(seed ^ 0x5a11u);
    double last_loss = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        double sum = 0;
        int n = 0;
        for (const auto& batch : make_batches(train, cfg, rng)) {
            Tape tape;
            ParamBinder binder(tape, out.store);
            const int x4 = tape.leaf(stack_input(train, batch, 4));
            const auto fwd = forward_step1(tape, binder, profile, x4, true);
            const int loss =
                combined_loss(tape, fwd.pred, stack_targets(train, batch), fwd.gate_probs, cfg.weights);
            tape.backward(loss);
            out.store.adam_step(binder.grads(), static_cast<float>(cfg.lr));
            sum += tape.val(loss)[0];
            ++n;
        }
        last_loss = sum / std::max(1, n);
    }
    out.metrics["train_loss"] = last_loss;
    out.metrics["mean_max_gate"] = mean_max_gate_step1(out.store, train, profile);
    return out;
}

std::vector<float> step1_teacher_logits(ParamStore& store, const std::vector<Frame>& frames,
                                        const Profile& profile, int batch) {
    std::vector<float> logits;
    logits.reserve(frames.size() * 5);
    for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(batch)) {
        const auto idx = iota_batch(i, std::min(frames.size(), i + static_cast<size_t>(batch)));
        Tape tape;
        ParamBinder binder(tape, store);
        const auto fwd = forward_step1(tape, binder, profile, tape.leaf(stack_input(frames, idx, 4)),
                                       false);
        const auto& v = tape.val(fwd.gate_logits);
        logits.insert(logits.end(), v.data.begin(), v.data.end());
    }
    return logits;
}

// ---- stage 1.2 ----

StageOutput distill_1_2(const std::vector<Frame>& train, const std::vector<float>& teacher5,
                        const Profile& profile, const StageConfig& cfg, uint32_t seed) {
    if (teacher5.size() != train.size() * 5)
        throw ConfigError("teacher label count does not match dataset");
    StageOutput out;
    init_lidar_gate_params(out.store, profile, seed);
    std::mt19937 rng(seed ^ 0x5a12u);
    for (int e = 0; e < cfg.epochs; ++e) {
        for (const auto& batch : make_batches(train, cfg, rng)) {
            std::vector<float> t;
            t.reserve(batch.size() * 5);
            for (int i : batch)
                t.insert(t.end(), teacher5.begin() + static_cast<int64_t>(i) * 5,
                         teacher5.begin() + static_cast<int64_t>(i) * 5 + 5);
            Tape tape;
            ParamBinder binder(tape, out.store);
            const auto fwd = forward_lidar_gate(tape, binder, profile,
                                                tape.leaf(stack_input(train, batch, 4)), true);
            const int loss = distill_loss(tape, fwd.logits, t, cfg.distill);
            tape.backward(loss);
            out.store.adam_step(binder.grads(), static_cast<float>(cfg.lr));
        }
    }
    // Mean absolute scalar-gate error against the teacher on a probe subset.
    const size_t probe = std::min<size_t>(train.size(), 200);
    double err = 0;
    for (size_t i = 0; i < probe; i += 16) {
        const auto idx = iota_batch(i, std::min(probe, i + 16));
        Tape tape;
        ParamBinder binder(tape, out.store);
        const auto fwd = forward_lidar_gate(tape, binder, profile,
                                            tape.leaf(stack_input(train, idx, 4)), false);
        const auto& s = tape.val(fwd.scalar);
        for (size_t j = 0; j < idx.size(); ++j) {
            const int64_t r = static_cast<int64_t>(idx[j]) * 5;
            const auto g = soften({teacher5.begin() + r, teacher5.begin() + r + 5}, 5, 1.0);
            std::vector<double> gd(g.begin(), g.end());
            err += std::abs(double(s[static_cast<int64_t>(j)]) - scalar_gate_label(gd));
        }
    }
    out.metrics["scalar_gate_mae"] = err / static_cast<double>(probe);
    return out;
}

// ---- stage 1.3 ----

StageOutput train_stage_1_3(const std::vector<Frame>& train, const std::vector<Frame>& test,
                            const ParamStore& gl_store, const Profile& profile,
                            const StageConfig& cfg, uint32_t seed) {
    StageOutput out;
    out.store.adopt(gl_store, "gl.", "gl.");
    out.store.set_trainable("gl.", false);
    init_lidar_with_gating_params(out.store, profile, seed);
    const uint64_t gl_before = out.store.checksum("gl.");

    std::mt19937 rng(seed ^ 0x5a13u);
    for (int e = 0; e < cfg.epochs; ++e) {
        for (const auto& batch : make_batches(train, cfg, rng)) {
            Tape tape;
            ParamBinder binder(tape, out.store);
            const auto fwd = forward_lidar_with_gating(tape, binder, profile,
                                                       tape.leaf(stack_input(train, batch, 4)), true);
            const int loss = tape.mse_loss(fwd.pred, stack_targets(train, batch));
            tape.backward(loss);
            out.store.adam_step(binder.grads(), static_cast<float>(cfg.lr));
        }
    }
    if (out.store.checksum("gl.") != gl_before)
        throw ConfigError("frozen LiDAR gate changed during stage 1.3");
    out.metrics["gate_frozen"] = 1.0;
    out.metrics["test_mse"] = eval_lwg_mse(out.store, test, profile);
    return out;
}

double eval_lwg_mse(ParamStore& store, const std::vector<Frame>& frames, const Profile& profile,
                    int batch) {
    double sum = 0;
    for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(batch)) {
        const auto idx = iota_batch(i, std::min(frames.size(), i + static_cast<size_t>(batch)));
        Tape tape;
        ParamBinder binder(tape, store);
        const auto fwd = forward_lidar_with_gating(tape, binder, profile,
                                                   tape.leaf(stack_input(frames, idx, 4)), false);
        const auto& p = tape.val(fwd.pred);
        for (size_t j = 0; j < idx.size(); ++j)
            sum += prediction_loss(frames[static_cast<size_t>(idx[j])].y,
                                   p[static_cast<int64_t>(j)]);
    }
    return sum / static_cast<double>(frames.size());
}

// ---- stage 2.1 ----

StageOutput train_stage_2_1(const std::vector<Frame>& train, int case_id, const Profile& profile,
                            const StageConfig& cfg, uint32_t seed) {
    StageOutput out;
    init_foursensor_params(out.store, profile, seed + static_cast<uint32_t>(case_id));
    std::mt19937 rng(seed ^ (0x5a210u + static_cast<uint32_t>(case_id)));
    double last_loss = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        double sum = 0;
        int n = 0;
        for (const auto& batch : make_batches(train, cfg, rng)) {
            const auto masked = masked_frames(train, batch, case_id);
            const auto all = iota_batch(0, masked.size());
            Tape tape;
            ParamBinder binder(tape, out.store);
            const auto fwd = forward_foursensor(
                tape, binder, profile, tape.leaf(stack_input(masked, all, 1)),
                tape.leaf(stack_input(masked, all, 2)), tape.leaf(stack_input(masked, all, 3)),
                tape.leaf(stack_input(masked, all, 4)), true);
            const int loss =
                combined_loss(tape, fwd.pred, stack_targets(masked, all), fwd.gate_probs, cfg.weights);
            tape.backward(loss);
            out.store.adam_step(binder.grads(), static_cast<float>(cfg.lr));
            sum += tape.val(loss)[0];
            ++n;
        }
        last_loss = sum / std::max(1, n);
    }
    out.metrics["train_loss"] = last_loss;
    return out;
}

std::vector<float> foursensor_teacher_logits(ParamStore& store, const std::vector<Frame>& frames,
                                             int case_id, const Profile& profile, int batch) {
    std::vector<float> logits;
    logits.reserve(frames.size() * 4);
    for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(batch)) {
        const auto idx = iota_batch(i, std::min(frames.size(), i + static_cast<size_t>(batch)));
        const auto masked = masked_frames(frames, idx, case_id);
        const auto all = iota_batch(0, masked.size());
        Tape tape;
        ParamBinder binder(tape, store);
        const auto fwd = forward_foursensor(
            tape, binder, profile, tape.leaf(stack_input(masked, all, 1)),
            tape.leaf(stack_input(masked, all, 2)), tape.leaf(stack_input(masked, all, 3)),
            tape.leaf(stack_input(masked, all, 4)), false);
        const auto& v = tape.val(fwd.gate_logits);
        logits.insert(logits.end(), v.data.begin(), v.data.end());
    }
    return logits;
}

// ---- stage 2.2 ----

StageOutput distill_2_2(const std::vector<Frame>& subset,
                        const std::array<std::vector<float>, 5>& teacher4, const Profile& profile,
                        const StageConfig& cfg, uint32_t seed) {
    for (const auto& t : teacher4)
        if (t.size() != subset.size() * 4)
            throw ConfigError("teacher label count does not match dataset");
    StageOutput out;
    init_main_gate_params(out.store, profile, seed);
    std::mt19937 rng(seed ^ 0x5a22u);
    for (int e = 0; e < cfg.epochs; ++e) {
        // Mix the five scenarios inside every batch: with single-case
        // batches the train-mode batch statistics of the zeroed-LiDAR case
        // diverge from the running statistics used at eval time, and the
        // gate learns a representation it never sees when deployed.
        std::vector<std::pair<int, int>> pool;  // (case, frame index)
        for (int case_id = 1; case_id <= 5; ++case_id)
            for (const auto& batch : make_batches(subset, cfg, rng))
                for (int i : batch) pool.emplace_back(case_id, i);
        std::shuffle(pool.begin(), pool.end(), rng);
        for (size_t start = 0; start + 2 <= pool.size();
             start += static_cast<size_t>(cfg.batch)) {
            const size_t end = std::min(pool.size(), start + static_cast<size_t>(cfg.batch));
            if (end - start < 2) break;
            std::vector<Frame> masked;
            std::vector<float> t;
            masked.reserve(end - start);
            for (size_t k = start; k < end; ++k) {
                const auto [case_id, i] = pool[k];
                masked.push_back(apply_scenario(subset[static_cast<size_t>(i)], case_id,
                                                static_cast<uint64_t>(i)));
                const auto& teach = teacher4[static_cast<size_t>(case_id - 1)];
                t.insert(t.end(), teach.begin() + static_cast<int64_t>(i) * 4,
                         teach.begin() + static_cast<int64_t>(i) * 4 + 4);
            }
            const auto all = iota_batch(0, masked.size());
            Tape tape;
            ParamBinder binder(tape, out.store);
            const auto fwd = forward_main_gate(
                tape, binder, profile, tape.leaf(stack_input(masked, all, 1)),
                tape.leaf(stack_input(masked, all, 2)), tape.leaf(stack_input(masked, all, 3)),
                tape.leaf(stack_input(masked, all, 4)), true);
            const int loss = distill_loss(tape, fwd.gate_logits, t, cfg.distill);
            tape.backward(loss);
            out.store.adam_step(binder.grads(), static_cast<float>(cfg.lr));
        }
    }
    return out;
}

double final_gate_accuracy(ParamStore& store, const std::vector<Frame>& frames, int case_id,
                           const std::vector<float>& teacher4, const Profile& profile, int batch) {
    if (teacher4.size() != frames.size() * 4)
        throw ConfigError("teacher label count does not match dataset");
    int64_t hits = 0;
    for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(batch)) {
        const auto idx = iota_batch(i, std::min(frames.size(), i + static_cast<size_t>(batch)));
        const auto masked = masked_frames(frames, idx, case_id);
        const auto all = iota_batch(0, masked.size());
        Tape tape;
        ParamBinder binder(tape, store);
        const auto fwd = forward_main_gate(
            tape, binder, profile, tape.leaf(stack_input(masked, all, 1)),
            tape.leaf(stack_input(masked, all, 2)), tape.leaf(stack_input(masked, all, 3)),
            tape.leaf(stack_input(masked, all, 4)), false);
        const auto& p = tape.val(fwd.gate_probs);
        for (size_t j = 0; j < idx.size(); ++j) {
            const int got = argmax_row(p.data.data() + j * 4, 4);
            const int want =
                argmax_row(teacher4.data() + static_cast<size_t>(idx[j]) * 4, 4);
            if (got == want) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(frames.size());
}

double final_lidar_selection_rate(ParamStore& store, const std::vector<Frame>& frames,
                                  const Profile& profile, int batch) {
    int64_t lidar = 0;
    for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(batch)) {
        const auto idx = iota_batch(i, std::min(frames.size(), i + static_cast<size_t>(batch)));
        Tape tape;
        ParamBinder binder(tape, store);
        const auto fwd = forward_main_gate(
            tape, binder, profile, tape.leaf(stack_input(frames, idx, 1)),
            tape.leaf(stack_input(frames, idx, 2)), tape.leaf(stack_input(frames, idx, 3)),
            tape.leaf(stack_input(frames, idx, 4)), false);
        const auto& p = tape.val(fwd.gate_probs);
        for (size_t j = 0; j < idx.size(); ++j)
            if (argmax_row(p.data.data() + j * 4, 4) == 3) ++lidar;
    }
    return static_cast<double>(lidar) / static_cast<double>(frames.size());
}

// ---- stage 3 ----

namespace {

// Hard-gated training step shared by stage 3: groups the batch by the main
// gate's selection and runs only the selected branch per group.
double hard_gated_step(ParamStore& store, const std::vector<Frame>& masked, const Profile& profile,
                       double lr) {
    const auto all = iota_batch(0, masked.size());
    Tape tape;
    ParamBinder binder(tape, store);
    const int x1 = tape.leaf(stack_input(masked, all, 1));
    const int x2 = tape.leaf(stack_input(masked, all, 2));
    const int x3 = tape.leaf(stack_input(masked, all, 3));
    const int x4 = tape.leaf(stack_input(masked, all, 4));
    const auto gm = forward_main_gate(tape, binder, profile, x1, x2, x3, x4, false);
    const auto& probs = tape.val(gm.gate_probs);

    std::array<std::vector<int>, 4> groups;
    for (size_t j = 0; j < masked.size(); ++j)
        groups[static_cast<size_t>(argmax_row(probs.data.data() + j * 4, 4))].push_back(
            static_cast<int>(j));

    std::vector<std::pair<float, int>> terms;
    for (int sel = 0; sel < 4; ++sel) {
        const auto& g = groups[static_cast<size_t>(sel)];
        if (g.empty()) continue;
        int v;
        if (sel < 3)
            v = camera_branch_feature(tape, binder, profile,
                                      tape.leaf(stack_input(masked, g, sel + 1)), sel + 1, false);
        else
            v = lidar_branch_feature(tape, binder, profile, tape.leaf(stack_input(masked, g, 4)),
                                     false)
                    .feature;
        const int pred = final_head(tape, binder, profile, v,
                                    std::vector<int>(g.size(), sel));
        const int mse = tape.mse_loss(pred, stack_targets(masked, g));
        terms.emplace_back(static_cast<float>(g.size()) / static_cast<float>(masked.size()), mse);
    }
    const int loss = tape.combine(terms);
    tape.backward(loss);
    store.adam_step(binder.grads(), static_cast<float>(lr));
    return tape.val(loss)[0];
}

}  // namespace

StageOutput train_stage_3(const std::vector<Frame>& train, const ParamStore& lwg_store,
                          const ParamStore& case2_store, const ParamStore& gm_store,
                          const Profile& profile, const StageConfig& cfg, uint32_t seed) {
    StageOutput out;
    out.store.adopt(case2_store, "cam1.", "cam1.");
    out.store.adopt(case2_store, "cam2.", "cam2.");
    out.store.adopt(case2_store, "cam3.", "cam3.");
    out.store.adopt(lwg_store, "lidar.", "lidar.");
    out.store.adopt(lwg_store, "gl.", "gl.");
    out.store.adopt(gm_store, "gm.", "gm.");
    init_final_head_params(out.store, profile, seed);
    out.store.set_trainable("gl.", false);
    out.store.set_trainable("gm.", false);
    const uint64_t gl_before = out.store.checksum("gl.");
    const uint64_t gm_before = out.store.checksum("gm.");

    std::mt19937 rng(seed ^ 0x5a30u);
    std::uniform_int_distribution<int> pick_case(1, 5);
    double last_loss = 0;
    for (int e = 0; e < cfg.epochs; ++e) {
        double sum = 0;
        int n = 0;
        for (const auto& batch : make_batches(train, cfg, rng)) {
            // Per-frame uniform scenario draw.
            std::vector<Frame> masked;
            masked.reserve(batch.size());
            for (int i : batch)
                masked.push_back(apply_scenario(train[static_cast<size_t>(i)], pick_case(rng),
                                                static_cast<uint64_t>(i)));
            sum += hard_gated_step(out.store, masked, profile, cfg.lr);
            ++n;
        }
        last_loss = sum / std::max(1, n);
    }
    if (out.store.checksum("gl.") != gl_before)
        throw ConfigError("frozen LiDAR gate changed during stage 3");
    if (out.store.checksum("gm.") != gm_before)
        throw ConfigError("frozen main gate changed during stage 3");
    out.metrics["gates_frozen"] = 1.0;
    out.metrics["train_loss"] = last_loss;
    return out;
}

double eval_final_mse(ParamStore& store, const std::vector<Frame>& frames, const Profile& profile,
                      int case_id) {
    double sum = 0;
    for (size_t i = 0; i < frames.size(); ++i) {
        const Frame f = apply_scenario(frames[i], case_id, i);
        const auto inf = final_infer(store, profile, f.x1, f.x2, f.x3, f.x4);
        sum += prediction_loss(f.y, inf.pred);
    }
    return sum / static_cast<double>(frames.size());
}

// ---- end-to-end ablation ----

StageOutput run_e2e_ablation(const std::vector<Frame>& train, const Profile& profile,
                             const StageConfig& cfg, uint32_t seed) {
    StageOutput out;
    std::mt19937 prng(seed ^ 0x5ae2u);
    const auto cam = feature_spec("camera_expert", profile);
    for (int i = 1; i <= 3; ++i)
        init_network_params(out.store, cam, "cam" + std::to_string(i) + ".", prng);
    init_lidar_gate_params(out.store, profile, seed + 1);
    init_lidar_with_gating_params(out.store, profile, seed + 2);
    init_main_gate_params(out.store, profile, seed + 3);
    init_final_head_params(out.store, profile, seed + 4);

    std::mt19937 rng(seed ^ 0x5ae3u);
    std::uniform_int_distribution<int> pick_case(1, 5);
    for (int e = 0; e < cfg.epochs; ++e) {
        for (const auto& batch : make_batches(train, cfg, rng)) {
            std::vector<Frame> masked;
            masked.reserve(batch.size());
            for (int i : batch)
                masked.push_back(apply_scenario(train[static_cast<size_t>(i)], pick_case(rng),
                                                static_cast<uint64_t>(i)));
            const auto all = iota_batch(0, masked.size());
            Tape tape;
            ParamBinder binder(tape, out.store);
            const int x1 = tape.leaf(stack_input(masked, all, 1));
            const int x2 = tape.leaf(stack_input(masked, all, 2));
            const int x3 = tape.leaf(stack_input(masked, all, 3));
            const int x4 = tape.leaf(stack_input(masked, all, 4));
            const auto gm = forward_main_gate(tape, binder, profile, x1, x2, x3, x4, true);
            // Soft gating: every branch runs, features mixed by gate mass.
            std::vector<int> scaled;
            for (int sel = 0; sel < 3; ++sel)
                scaled.push_back(tape.scale_rows(
                    camera_branch_feature(tape, binder, profile,
                                          sel == 0 ? x1 : sel == 1 ? x2 : x3, sel + 1, false),
                    gm.gate_probs, sel));
            scaled.push_back(tape.scale_rows(
                lidar_branch_feature(tape, binder, profile, x4, false).feature, gm.gate_probs, 3));
            int mix = tape.add(scaled[0], scaled[1]);
            mix = tape.add(mix, scaled[2]);
            mix = tape.add(mix, scaled[3]);
            const int head_in = tape.concat({mix, gm.gate_probs});
            const int pred = run_network(tape, binder,
                                         mlp_spec("final_head", expert_feature_len(profile) + 1 + 4,
                                                  {128, 64, 1}, "tanh"),
                                         head_in, "f.", false);
            const int loss = tape.mse_loss(pred, stack_targets(masked, all));
            tape.backward(loss);
            out.store.adam_step(binder.grads(), static_cast<float>(cfg.lr));
        }
    }
    return out;
}

double mean_max_gate_step1(ParamStore& store, const std::vector<Frame>& frames,
                           const Profile& profile, int batch) {
    double sum = 0;
    for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(batch)) {
        const auto idx = iota_batch(i, std::min(frames.size(), i + static_cast<size_t>(batch)));
        Tape tape;
        ParamBinder binder(tape, store);
        const auto fwd =
            forward_step1(tape, binder, profile, tape.leaf(stack_input(frames, idx, 4)), false);
        const auto& p = tape.val(fwd.gate_probs);
        for (size_t j = 0; j < idx.size(); ++j) {
            float mx = 0;
            for (int k = 0; k < 5; ++k) mx = std::max(mx, p[static_cast<int64_t>(j) * 5 + k]);
            sum += mx;
        }
    }
    return sum / static_cast<double>(frames.size());
}

}  // namespace mmen
