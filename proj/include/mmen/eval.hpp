#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmen/pipeline.hpp"
#include "mmen/sim.hpp"

namespace mmen {

// Flat named metrics plus the per-scenario table rendered into metrics.csv.
struct MetricsReport {
    // columns: case, mse, gate_acc (-1 when no teacher), n_frames
    struct CaseRow {
        int case_id;
        double mse;
        double gate_acc;
        int n_frames;
    };
    std::vector<CaseRow> cases;
    std::map<std::string, double> scalars;

    std::string to_csv() const;
};

// Reproducibility record written next to every command's outputs.
struct RunManifest {
    std::string command;
    std::string config_snapshot;
    uint32_t seed = 0;
    std::map<std::string, std::string> input_digests;  // path -> fnv1a hex
    std::vector<std::string> outputs;
    double wall_time_s = 0;

    std::string to_json() const;
    void write(const std::string& path) const;
};

std::string file_digest(const std::string& path);

// JSON config overrides for PipelineConfig (missing keys keep defaults).
PipelineConfig load_pipeline_config(const std::string& path, const std::string& profile);

// ---- command implementations (shared by the CLI and the test suites) ----

struct PipelineResult {
    MetricsReport report;
    std::vector<std::string> checkpoints;   // six stage checkpoints
    std::vector<std::string> label_files;   // two gate label tables
    std::string metrics_csv_path;
    std::string manifest_path;
};

// One-command end-to-end run: dataset (generated unless data_path is given)
// -> stages 1.1..3 -> evaluation. Writes checkpoints, label files,
// metrics.csv and a manifest under out_dir.
PipelineResult run_pipeline(const PipelineConfig& cfg, const std::string& out_dir,
                            const std::string& data_path = "");

int cmd_gen_data(const std::string& world_path, const std::string& profile, int count,
                 uint32_t seed, double steer_noise, const std::string& out_path);
int cmd_train(const std::string& stage, const std::string& data_path,
              const std::vector<std::string>& ckpts, const std::string& config_path,
              const std::string& profile, int case_id, uint32_t seed, const std::string& out_path);
int cmd_distill(const std::string& stage, const std::string& data_path,
                const std::vector<std::string>& ckpts, const std::string& config_path,
                const std::string& profile, uint32_t seed, const std::string& out_path);
int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::vector<std::string>& label_files, const std::string& profile, int case_id,
             const std::string& out_path);
int cmd_flops(const std::string& profile, const std::string& out_path);
int cmd_rollout(const std::string& ckpt, const std::string& profile, int steps, uint32_t seed,
                const std::string& out_path);
int cmd_trace(const std::string& ckpt, const std::string& data_path, const std::string& profile,
              const std::string& out_path);
int cmd_pipeline(const std::string& config_path, const std::string& data_path,
                 const std::string& profile, uint32_t seed, const std::string& out_dir);
int cmd_ablate(const std::string& kind, const std::string& data_path,
               const std::string& pipeline_dir, const std::string& config_path,
               const std::string& profile, uint32_t seed, const std::string& out_dir);

}  // namespace mmen
