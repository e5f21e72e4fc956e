#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "mmen/dataset.hpp"
#include "mmen/models.hpp"

namespace mmen {

// Per-stage knobs. `per_bin` balanced draws from each of the seven steering
// bins form one epoch; batches below size 2 are dropped (batch-norm needs
// batch statistics).
struct StageConfig {
    double lr = 1e-3;
    int epochs = 4;
    int per_bin = 50;
    int batch = 10;
    LossWeights weights;
    DistillConfig distill;
};

struct PipelineConfig {
    std::string profile = "paper";
    uint32_t seed = 1;
    int frames = 2000;
    double test_fraction = 0.15;
    double steer_noise = 0.10;
    // Teacher labels for the gate distillation are computed on the first
    // `teacher_subset` training frames (full nets are expensive to run).
    int teacher_subset = 500;
    bool loss_ablation = false;  // alpha = beta = 0 in stages 1.1 and 2.1
    StageConfig s11, s12, s13, s21, s22, s3, e2e;

    static PipelineConfig defaults(const std::string& profile);
};

// Deterministic sensor masking for the five robustness cases:
//   1: LiDAR on, at most one camera off (index-keyed pseudo-random choice)
//   2: LiDAR fully off
//   3/4/5: left/center/right LiDAR third off
// frame_index keys the case-1 camera choice so label files are pure
// functions of (checkpoint, dataset).
Frame apply_scenario(const Frame& f, int case_id, uint64_t frame_index);

// Batch assembly: stacks x1..x4 (which = 1..4) or labels for the given
// frame indices.
Tensor stack_input(const std::vector<Frame>& frames, const std::vector<int>& idx, int which);
std::vector<float> stack_targets(const std::vector<Frame>& frames, const std::vector<int>& idx);

struct StageOutput {
    ParamStore store;
    std::map<std::string, double> metrics;
};

// ---- stage 1: segmented LiDAR network and its gate ----

StageOutput train_stage_1_1(const std::vector<Frame>& train, const Profile& profile,
                            const StageConfig& cfg, uint32_t seed);
// Per-frame 5-way gate logits of the stage-1.1 network (eval mode).
std::vector<float> step1_teacher_logits(ParamStore& store, const std::vector<Frame>& frames,
                                        const Profile& profile, int batch = 16);
StageOutput distill_1_2(const std::vector<Frame>& train, const std::vector<float>& teacher5,
                        const Profile& profile, const StageConfig& cfg, uint32_t seed);
StageOutput train_stage_1_3(const std::vector<Frame>& train, const std::vector<Frame>& test,
                            const ParamStore& gl_store, const Profile& profile,
                            const StageConfig& cfg, uint32_t seed);

// ---- stage 2: four-sensor teachers and the main gate ----

StageOutput train_stage_2_1(const std::vector<Frame>& train, int case_id, const Profile& profile,
                            const StageConfig& cfg, uint32_t seed);
// Per-frame 4-way gate logits under the given scenario (eval mode).
std::vector<float> foursensor_teacher_logits(ParamStore& store, const std::vector<Frame>& frames,
                                             int case_id, const Profile& profile, int batch = 8);
StageOutput distill_2_2(const std::vector<Frame>& subset,
                        const std::array<std::vector<float>, 5>& teacher4, const Profile& profile,
                        const StageConfig& cfg, uint32_t seed);

// ---- stage 3: final network assembly and fine-tuning ----

// Camera experts come from the LiDAR-disabled (case 2) teacher; the LiDAR
// branch and its gate from stage 1.3; the main gate from 2.2. Both gates
// are frozen; experts and the head F train on the prediction loss with a
// per-frame uniform scenario draw.
StageOutput train_stage_3(const std::vector<Frame>& train, const ParamStore& lwg_store,
                          const ParamStore& case2_store, const ParamStore& gm_store,
                          const Profile& profile, const StageConfig& cfg, uint32_t seed);

// End-to-end ablation: the same final architecture trained from scratch in
// one pass with soft gating, nothing distilled or frozen.
StageOutput run_e2e_ablation(const std::vector<Frame>& train, const Profile& profile,
                             const StageConfig& cfg, uint32_t seed);

// ---- evaluation helpers ----

double eval_lwg_mse(ParamStore& store, const std::vector<Frame>& frames, const Profile& profile,
                    int batch = 16);
// Conditional-execution MSE of the final network under a scenario.
double eval_final_mse(ParamStore& store, const std::vector<Frame>& frames, const Profile& profile,
                      int case_id);
// Fraction of frames where the main gate picks the LiDAR expert, all
// sensors enabled (no masking).
double final_lidar_selection_rate(ParamStore& store, const std::vector<Frame>& frames,
                                  const Profile& profile, int batch = 8);
// Agreement of the main gate's argmax with the teacher's argmax.
double final_gate_accuracy(ParamStore& store, const std::vector<Frame>& frames, int case_id,
                           const std::vector<float>& teacher4, const Profile& profile,
                           int batch = 8);
// Mean over frames of the largest 5-way gate probability of a stage-1.1
// network (confidence measure for the loss ablation).
double mean_max_gate_step1(ParamStore& store, const std::vector<Frame>& frames,
                           const Profile& profile, int batch = 16);

}  // namespace mmen
