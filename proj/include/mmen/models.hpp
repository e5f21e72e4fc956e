#pragma once

#include <array>
#include <optional>

#include "mmen/losses.hpp"
#include "mmen/netspec.hpp"
#include "mmen/runner.hpp"

namespace mmen {

// Main gate distribution plus hard selection, and the LiDAR gate's 5-way
// source distribution with its derived scalar in [-1,1].
struct GateDecision {
    std::array<float, 4> main_probs{};
    int selected = 0;  // argmax, ties -> lowest index
    std::array<float, 5> lidar_probs{};
    float lidar_scalar = 0.0f;
};

// Start column of the 60-degree crop window centred at 60*g_l degrees off
// the forward axis; round-half-up, clamped to the valid range.
int crop_start_col(double g_l, const Profile& profile);

// Hard argmax with lowest-index tie breaking.
int argmax_row(const float* row, int k);

// ---- composed networks ----
// Each network owns a ParamStore with fixed prefixes; forwards are pure
// given the store and may run on any tape.

struct ForwardOut {
    int pred = -1;         // [N,1]
    int gate_logits = -1;  // [N,K]
    int gate_probs = -1;   // [N,K]
};

struct GlOut {
    int logits = -1;  // [N,5]
    int probs = -1;   // [N,5]
    int scalar = -1;  // [N,1], g_L
};

// Step 1.1 network: five segment experts (prefixes e1..e5), gate head
// ("gate."), prediction head ("pred.").
void init_step1_params(ParamStore& store, const Profile& profile, uint32_t seed);
ForwardOut forward_step1(Tape& tape, ParamBinder& binder, const Profile& profile, int x4, bool train);

// LiDAR Gating Network G^L (prefixes gl.feat., gl.head.).
void init_lidar_gate_params(ParamStore& store, const Profile& profile, uint32_t seed);
GlOut forward_lidar_gate(Tape& tape, ParamBinder& binder, const Profile& profile, int x4, bool train);

// "LiDAR with gating": frozen G^L + LiDAR expert ("lidar.") + head
// ("head."); the head input is [E4 features, g_L].
void init_lidar_with_gating_params(ParamStore& store, const Profile& profile, uint32_t seed);
struct LwgOut {
    int pred = -1;
    GlOut gate;
    std::vector<int> starts;
};
LwgOut forward_lidar_with_gating(Tape& tape, ParamBinder& binder, const Profile& profile, int x4,
                                 bool train);

// Step 2.1 four-sensor fusion network (cam1..cam3, lfull, gate., pred.).
void init_foursensor_params(ParamStore& store, const Profile& profile, uint32_t seed);
ForwardOut forward_foursensor(Tape& tape, ParamBinder& binder, const Profile& profile, int x1,
                              int x2, int x3, int x4, bool train);

// Main Gating Network G^M (prefixes gm.cam1..gm.cam3, gm.lidar, gm.head.).
void init_main_gate_params(ParamStore& store, const Profile& profile, uint32_t seed);
ForwardOut forward_main_gate(Tape& tape, ParamBinder& binder, const Profile& profile, int x1,
                             int x2, int x3, int x4, bool train);

// Final head F ("f."), consuming [v (E+1), g^M (4)].
void init_final_head_params(ParamStore& store, const Profile& profile, uint32_t seed);

// Baseline: plain concatenation of all four experts, no gating
// (cam1..cam3, lfull, pred.).
void init_baseline_params(ParamStore& store, const Profile& profile, uint32_t seed);
int forward_baseline(Tape& tape, ParamBinder& binder, const Profile& profile, int x1, int x2,
                     int x3, int x4, bool train);

// Branch features of the final network, each [N, E+1]: camera features are
// padded with one trailing zero; the LiDAR branch appends g_L and uses the
// gate-driven crop.
int camera_branch_feature(Tape& tape, ParamBinder& binder, const Profile& profile, int x_img,
                          int cam_index, bool train);
struct LidarBranchOut {
    int feature = -1;  // [N, E+1]
    GlOut gate;
    std::vector<int> starts;
};
LidarBranchOut lidar_branch_feature(Tape& tape, ParamBinder& binder, const Profile& profile,
                                    int x4, bool train);

// F head on [v, one-hot selection].
int final_head(Tape& tape, ParamBinder& binder, const Profile& profile, int v,
               const std::vector<int>& selected);

// Single-frame conditional inference of the final network: the main gate
// picks a branch and exactly one expert runs.
struct FinalInference {
    float pred = 0.0f;
    GateDecision gate;
    int experts_executed = 0;
};
FinalInference final_infer(ParamStore& store, const Profile& profile, const Tensor& x1,
                           const Tensor& x2, const Tensor& x3, const Tensor& x4);

// ---- FLOPs accounting over composed models ----
// Names: camera_expert, lidar_expert, lidar_full_expert, lidar_gate,
// main_gate, step1_net, lidar_with_gating, foursensor_net, final_net
// (paths final_net_lidar / final_net_camera), baseline_concat, lidar_only,
// single_camera, three_cameras.
long long model_flops(const std::string& name, const Profile& profile);

// Expert feature length for the profile (camera and cropped-LiDAR experts
// share it by construction).
int expert_feature_len(const Profile& profile);

// Reference constants from the published comparison tables; rendered in
// reports, never asserted against the synthetic runs.
namespace published_ref {
inline constexpr std::array<double, 5> gate_accuracy_pct = {100.0, 93.41, 97.69, 94.33, 96.98};
inline constexpr std::array<double, 5> mse_ours = {0.020, 0.033, 0.026, 0.029, 0.024};
inline constexpr std::array<double, 5> mse_baseline = {0.026, 0.026, 0.026, 0.025, 0.025};
inline constexpr std::array<double, 5> mse_netgated = {0.023, 0.023, 0.022, 0.022, 0.022};
inline constexpr std::array<double, 5> mse_sensor_dropout = {0.023, 0.045, 0.038, 0.024, 0.026};
inline constexpr double mse_avg_ours = 0.026, mse_avg_baseline = 0.026, mse_avg_netgated = 0.022,
                        mse_avg_sensor_dropout = 0.031;
inline constexpr double flops_lidar_only = 52.23e6, flops_single_camera = 50.58e6,
                        flops_three_cameras = 151.48e6, flops_baseline = 204.69e6,
                        flops_netgated = 204.90e6, flops_sensor_dropout = 204.69e6,
                        flops_lidar_with_gating = 28.15e6, flops_ours_lidar = 35.71e6,
                        flops_ours_camera = 58.15e6;
}  // namespace published_ref

}  // namespace mmen
