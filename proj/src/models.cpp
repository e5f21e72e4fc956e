#include "mmen/models.hpp"

#include <algorithm>
#include <cmath>

namespace mmen {

namespace {

NetworkSpec cam_spec(const Profile& p) { return feature_spec("camera_expert", p); }
NetworkSpec lidar_spec(const Profile& p) { return feature_spec("lidar_expert", p); }
NetworkSpec lfull_spec(const Profile& p) { return feature_spec("lidar_full_expert", p); }
NetworkSpec glf_spec(const Profile& p) { return feature_spec("lidar_gate_feature", p); }
NetworkSpec cgf_spec(const Profile& p) { return feature_spec("camera_gate_feature", p); }

NetworkSpec gate_head_spec(int in, int k) { return mlp_spec("gate_head", in, {64, k}, "logits"); }
NetworkSpec gl_head_spec(int in) { return mlp_spec("lidar_gate_head", in, {32, 5}, "logits"); }
NetworkSpec pred_head_spec(int in) { return mlp_spec("pred_head", in, {128, 1}, "tanh"); }
NetworkSpec final_head_spec(int in) { return mlp_spec("final_head", in, {128, 64, 1}, "tanh"); }

// Constant per-sample crop starts for the k-th fixed segment.
std::vector<int> fixed_starts(int n, int offset) { return std::vector<int>(static_cast<size_t>(n), offset); }

int batch_of(const Tape& tape, int node) { return tape.val(node).dim(0); }

}  // namespace

int expert_feature_len(const Profile& profile) { return lidar_spec(profile).output_len(); }

int crop_start_col(double g_l, const Profile& profile) {
    g_l = std::clamp(g_l, -1.0, 1.0);
    const double deg_left = 60.0 * g_l - 30.0 + 90.0;  // left edge relative to the leftmost beam
    int start = static_cast<int>(std::floor(deg_left * profile.cols_per_degree + 0.5));
    return std::clamp(start, 0, profile.lidar_w - profile.seg_w);
}

int argmax_row(const float* row, int k) {
    int best = 0;
    for (int i = 1; i < k; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

// ---- step 1.1 ----

void init_step1_params(ParamStore& store, const Profile& profile, uint32_t seed) {
    std::mt19937 rng(seed);
    const auto expert = lidar_spec(profile);
    const int e = expert.output_len();
    for (int i = 1; i <= 5; ++i)
        init_network_params(store, expert, "e" + std::to_string(i) + ".", rng);
    init_network_params(store, gate_head_spec(5 * e, 5), "gate.", rng);
    init_network_params(store, pred_head_spec(5 * e), "pred.", rng);
}

ForwardOut forward_step1(Tape& tape, ParamBinder& binder, const Profile& profile, int x4, bool train) {
    const auto expert = lidar_spec(profile);
    const int n = batch_of(tape, x4);
    std::vector<int> feats;
    for (int i = 0; i < 5; ++i) {
        const int seg = tape.crop_cols(x4, fixed_starts(n, profile.seg_offsets[static_cast<size_t>(i)]),
                                       profile.seg_w);
        feats.push_back(run_network(tape, binder, expert, seg, "e" + std::to_string(i + 1) + ".", train));
    }
    ForwardOut out;
    const int all = tape.concat(feats);
    out.gate_logits = run_network(tape, binder, gate_head_spec(5 * expert.output_len(), 5), all, "gate.", train);
    out.gate_probs = tape.softmax(out.gate_logits);
    std::vector<int> scaled;
    for (int i = 0; i < 5; ++i) scaled.push_back(tape.scale_rows(feats[static_cast<size_t>(i)], out.gate_probs, i));
    out.pred = run_network(tape, binder, pred_head_spec(5 * expert.output_len()),
                           tape.concat(scaled), "pred.", train);
    return out;
}

// ---- G^L ----

void init_lidar_gate_params(ParamStore& store, const Profile& profile, uint32_t seed) {
    std::mt19937 rng(seed);
    const auto feat = glf_spec(profile);
    init_network_params(store, feat, "gl.feat.", rng);
    init_network_params(store, gl_head_spec(feat.output_len()), "gl.head.", rng);
}

GlOut forward_lidar_gate(Tape& tape, ParamBinder& binder, const Profile& profile, int x4, bool train) {
    const auto feat = glf_spec(profile);
    GlOut out;
    const int f = run_network(tape, binder, feat, x4, "gl.feat.", train);
    out.logits = run_network(tape, binder, gl_head_spec(feat.output_len()), f, "gl.head.", train);
    out.probs = tape.softmax(out.logits);
    out.scalar = tape.dot_rows(out.probs, gate_value_grid());
    return out;
}

// ---- LiDAR with gating ----

void init_lidar_with_gating_params(ParamStore& store, const Profile& profile, uint32_t seed) {
    std::mt19937 rng(seed);
    const auto expert = lidar_spec(profile);
    init_network_params(store, expert, "lidar.", rng);
    init_network_params(store, pred_head_spec(expert.output_len() + 1), "head.", rng);
}

LwgOut forward_lidar_with_gating(Tape& tape, ParamBinder& binder, const Profile& profile, int x4,
                                 bool train) {
    LwgOut out;
    // The gate runs in eval mode: it is trained in an earlier stage and its
    // weights (including BN statistics) stay fixed here.
    out.gate = forward_lidar_gate(tape, binder, profile, x4, /*train=*/false);
    const auto& gl = tape.val(out.gate.scalar);
    const int n = batch_of(tape, x4);
    out.starts.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.starts.push_back(crop_start_col(gl[i], profile));
    const int seg = tape.crop_cols(x4, out.starts, profile.seg_w);
    const auto expert = lidar_spec(profile);
    const int feat = run_network(tape, binder, expert, seg, "lidar.", train);
    const int head_in = tape.concat({feat, out.gate.scalar});
    out.pred = run_network(tape, binder, pred_head_spec(expert.output_len() + 1), head_in, "head.", train);
    return out;
}

// ---- step 2.1 four-sensor network ----

void init_foursensor_params(ParamStore& store, const Profile& profile, uint32_t seed) {
    std::mt19937 rng(seed);
    const auto cam = cam_spec(profile);
    const auto lfull = lfull_spec(profile);
    for (int i = 1; i <= 3; ++i)
        init_network_params(store, cam, "cam" + std::to_string(i) + ".", rng);
    init_network_params(store, lfull, "lfull.", rng);
    const int in = 3 * cam.output_len() + lfull.output_len();
    init_network_params(store, gate_head_spec(in, 4), "gate.", rng);
    init_network_params(store, pred_head_spec(in), "pred.", rng);
}

ForwardOut forward_foursensor(Tape& tape, ParamBinder& binder, const Profile& profile, int x1,
                              int x2, int x3, int x4, bool train) {
    const auto cam = cam_spec(profile);
    const auto lfull = lfull_spec(profile);
    std::vector<int> feats = {
        run_network(tape, binder, cam, x1, "cam1.", train),
        run_network(tape, binder, cam, x2, "cam2.", train),
        run_network(tape, binder, cam, x3, "cam3.", train),
        run_network(tape, binder, lfull, x4, "lfull.", train),
    };
    const int in = 3 * cam.output_len() + lfull.output_len();
    ForwardOut out;
    const int all = tape.concat(feats);
    out.gate_logits = run_network(tape, binder, gate_head_spec(in, 4), all, "gate.", train);
    out.gate_probs = tape.softmax(out.gate_logits);
    std::vector<int> scaled;
    for (int i = 0; i < 4; ++i) scaled.push_back(tape.scale_rows(feats[static_cast<size_t>(i)], out.gate_probs, i));
    out.pred = run_network(tape, binder, pred_head_spec(in), tape.concat(scaled), "pred.", train);
    return out;
}

// ---- Main Gating Network ----

void init_main_gate_params(ParamStore& store, const Profile& profile, uint32_t seed) {
    std::mt19937 rng(seed);
    const auto cgf = cgf_spec(profile);
    const auto glf = glf_spec(profile);
    for (int i = 1; i <= 3; ++i)
        init_network_params(store, cgf, "gm.cam" + std::to_string(i) + ".", rng);
    init_network_params(store, glf, "gm.lidar.", rng);
    init_network_params(store, gate_head_spec(3 * cgf.output_len() + glf.output_len(), 4), "gm.head.", rng);
}

ForwardOut forward_main_gate(Tape& tape, ParamBinder& binder, const Profile& profile, int x1,
                             int x2, int x3, int x4, bool train) {
    const auto cgf = cgf_spec(profile);
    const auto glf = glf_spec(profile);
    const int all = tape.concat({
        run_network(tape, binder, cgf, x1, "gm.cam1.", train),
        run_network(tape, binder, cgf, x2, "gm.cam2.", train),
        run_network(tape, binder, cgf, x3, "gm.cam3.", train),
        run_network(tape, binder, glf, x4, "gm.lidar.", train),
    });
    ForwardOut out;
    out.gate_logits = run_network(tape, binder,
                                  gate_head_spec(3 * cgf.output_len() + glf.output_len(), 4), all,
                                  "gm.head.", train);
    out.gate_probs = tape.softmax(out.gate_logits);
    return out;
}

// ---- final network pieces ----

void init_final_head_params(ParamStore& store, const Profile& profile, uint32_t seed) {
    std::mt19937 rng(seed);
    init_network_params(store, final_head_spec(expert_feature_len(profile) + 1 + 4), "f.", rng);
}

int camera_branch_feature(Tape& tape, ParamBinder& binder, const Profile& profile, int x_img,
                          int cam_index, bool train) {
    if (cam_index < 1 || cam_index > 3) throw ConfigError("camera index out of range");
    const int feat = run_network(tape, binder, cam_spec(profile), x_img,
                                 "cam" + std::to_string(cam_index) + ".", train);
    // Pad with one trailing zero so camera and LiDAR branch features share
    // a length and the head F is a single network.
    const int zero = tape.leaf(Tensor({batch_of(tape, x_img), 1}));
    return tape.concat({feat, zero});
}

LidarBranchOut lidar_branch_feature(Tape& tape, ParamBinder& binder, const Profile& profile,
                                    int x4, bool train) {
    LidarBranchOut out;
    out.gate = forward_lidar_gate(tape, binder, profile, x4, /*train=*/false);
    const auto& gl = tape.val(out.gate.scalar);
    const int n = batch_of(tape, x4);
    for (int i = 0; i < n; ++i) out.starts.push_back(crop_start_col(gl[i], profile));
    const int seg = tape.crop_cols(x4, out.starts, profile.seg_w);
    const int feat = run_network(tape, binder, lidar_spec(profile), seg, "lidar.", train);
    out.feature = tape.concat({feat, out.gate.scalar});
    return out;
}

int final_head(Tape& tape, ParamBinder& binder, const Profile& profile, int v,
               const std::vector<int>& selected) {
    const int n = tape.val(v).dim(0);
    if (static_cast<int>(selected.size()) != n) throw ConfigError("final_head needs one selection per sample");
    Tensor onehot({n, 4});
    for (int i = 0; i < n; ++i) {
        if (selected[static_cast<size_t>(i)] < 0 || selected[static_cast<size_t>(i)] > 3)
            throw ConfigError("selection index out of range");
        onehot[static_cast<int64_t>(i) * 4 + selected[static_cast<size_t>(i)]] = 1.0f;
    }
    const int in = tape.concat({v, tape.leaf(std::move(onehot))});
    return run_network(tape, binder, final_head_spec(expert_feature_len(profile) + 1 + 4), in, "f.", false);
}

FinalInference final_infer(ParamStore& store, const Profile& profile, const Tensor& x1,
                           const Tensor& x2, const Tensor& x3, const Tensor& x4) {
    Tape tape;
    ParamBinder binder(tape, store);
    auto batched = [&](const Tensor& t) {
        Tensor b = t;
        b.shape.insert(b.shape.begin(), 1);
        return tape.leaf(std::move(b));
    };
    const int n1 = batched(x1), n2 = batched(x2), n3 = batched(x3), n4 = batched(x4);

    FinalInference out;
    const auto gm = forward_main_gate(tape, binder, profile, n1, n2, n3, n4, false);
    const auto& probs = tape.val(gm.gate_probs);
    for (int i = 0; i < 4; ++i) out.gate.main_probs[static_cast<size_t>(i)] = probs[i];
    out.gate.selected = argmax_row(probs.data.data(), 4);

    int v;
    if (out.gate.selected < 3) {
        const int ximg = out.gate.selected == 0 ? n1 : out.gate.selected == 1 ? n2 : n3;
        v = camera_branch_feature(tape, binder, profile, ximg, out.gate.selected + 1, false);
        out.experts_executed = 1;
    } else {
        const auto branch = lidar_branch_feature(tape, binder, profile, n4, false);
        v = branch.feature;
        for (int i = 0; i < 5; ++i) out.gate.lidar_probs[static_cast<size_t>(i)] = tape.val(branch.gate.probs)[i];
        out.gate.lidar_scalar = tape.val(branch.gate.scalar)[0];
        out.experts_executed = 1;
    }
    const int pred = final_head(tape, binder, profile, v, {out.gate.selected});
    out.pred = tape.val(pred)[0];
    return out;
}

// ---- baseline ----

void init_baseline_params(ParamStore& store, const Profile& profile, uint32_t seed) {
    std::mt19937 rng(seed);
    const auto cam = cam_spec(profile);
    const auto lfull = lfull_spec(profile);
    for (int i = 1; i <= 3; ++i)
        init_network_params(store, cam, "cam" + std::to_string(i) + ".", rng);
    init_network_params(store, lfull, "lfull.", rng);
    init_network_params(store, pred_head_spec(3 * cam.output_len() + lfull.output_len()), "pred.", rng);
}

int forward_baseline(Tape& tape, ParamBinder& binder, const Profile& profile, int x1, int x2,
                     int x3, int x4, bool train) {
    const auto cam = cam_spec(profile);
    const auto lfull = lfull_spec(profile);
    const int all = tape.concat({
        run_network(tape, binder, cam, x1, "cam1.", train),
        run_network(tape, binder, cam, x2, "cam2.", train),
        run_network(tape, binder, cam, x3, "cam3.", train),
        run_network(tape, binder, lfull, x4, "lfull.", train),
    });
    return run_network(tape, binder, pred_head_spec(3 * cam.output_len() + lfull.output_len()), all,
                       "pred.", train);
}

// ---- FLOPs over compositions ----

long long model_flops(const std::string& name, const Profile& p) {
    const long long cam = count_flops(cam_spec(p));
    const long long lidar = count_flops(lidar_spec(p));
    const long long lfull = count_flops(lfull_spec(p));
    const long long glf = count_flops(glf_spec(p));
    const long long cgf = count_flops(cgf_spec(p));
    const int e = expert_feature_len(p);
    const int cam_len = cam_spec(p).output_len();
    const int lfull_len = lfull_spec(p).output_len();
    const int fusion_in = 3 * cam_len + lfull_len;
    const int gm_in = 3 * cgf_spec(p).output_len() + glf_spec(p).output_len();

    // Gate value heads include their softmax; the scalar reduction of G^L
    // costs 2*5 MACs, counted as 2*5*2 FLOPs via dot convention below.
    const long long gl = glf + count_flops(gl_head_spec(glf_spec(p).output_len())) + 5 + 2LL * 5;
    const long long gm = 3 * cgf + glf + count_flops(gate_head_spec(gm_in, 4)) + 4;
    const long long f = count_flops(final_head_spec(e + 1 + 4));

    if (name == "camera_expert") return cam;
    if (name == "lidar_expert") return lidar;
    if (name == "lidar_full_expert") return lfull;
    if (name == "lidar_gate") return gl;
    if (name == "main_gate") return gm;
    if (name == "step1_net")
        return 5 * lidar + count_flops(gate_head_spec(5 * e, 5)) + 5 +
               count_flops(pred_head_spec(5 * e)) + 5LL * e;
    if (name == "lidar_with_gating") return gl + lidar + count_flops(pred_head_spec(e + 1));
    if (name == "foursensor_net")
        return 3 * cam + lfull + count_flops(gate_head_spec(fusion_in, 4)) + 4 +
               count_flops(pred_head_spec(fusion_in)) + fusion_in;
    if (name == "final_net_lidar") return gm + gl + lidar + f;
    if (name == "final_net_camera") return gm + cam + f;
    if (name == "baseline_concat") return 3 * cam + lfull + count_flops(pred_head_spec(fusion_in));
    if (name == "lidar_only") return lfull + count_flops(pred_head_spec(lfull_len));
    if (name == "single_camera") return cam + count_flops(pred_head_spec(cam_len));
    if (name == "three_cameras") return 3 * cam + count_flops(pred_head_spec(3 * cam_len));
    throw ConfigError("unknown model name " + name);
}

}  // namespace mmen
