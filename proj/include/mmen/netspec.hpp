#pragma once

#include <array>
#include <string>
#include <vector>

#include "mmen/tensor.hpp"

namespace mmen {

// Input geometry and crop layout. "paper" matches the sensor shapes the
// architectures were designed for; "tiny" is a reduced CI profile with
// proportionally scaled networks (non-paper shapes).
struct Profile {
    std::string name = "paper";
    int img_h = 120, img_w = 192;
    int lidar_h = 16, lidar_w = 450;
    int seg_w = 150;                                      // 60-degree crop width in columns
    std::array<int, 5> seg_offsets{0, 75, 150, 225, 300};  // half-overlapping segments
    double cols_per_degree = 2.5;

    static Profile paper() { return Profile{}; }
    static Profile tiny() {
        Profile p;
        p.name = "tiny";
        p.img_h = 60;
        p.img_w = 96;
        p.lidar_h = 8;
        p.lidar_w = 226;
        p.seg_w = 76;
        p.seg_offsets = {0, 38, 75, 113, 150};
        p.cols_per_degree = 226.0 / 180.0;
        return p;
    }
    static Profile named(const std::string& n) {
        if (n == "paper") return paper();
        if (n == "tiny") return tiny();
        throw ConfigError("unknown profile " + n);
    }
};

struct LayerSpec {
    enum class Kind { Conv, Pool, Dense, BatchNorm, ReLU, Tanh, Softmax, Flatten };
    Kind kind;
    int out_ch = 0;                      // conv channels / dense units
    int kh = 0, kw = 0;                  // conv/pool kernel
    int sh = 1, sw = 1;                  // stride
    int ph = 0, pw = 0;                  // zero padding (-inf for pool)
    std::vector<int> declared_out;       // optional shape check, without batch dim
};

struct NetworkSpec {
    std::string name;
    std::vector<int> input_shape;  // without batch dim: [C,H,W] or [F]
    std::vector<LayerSpec> layers;
    std::vector<int> output_shape;  // computed at build time

    int output_len() const { return static_cast<int>(numel(output_shape)); }
};

// Shape propagation for a single layer; throws ConfigError on mismatch.
std::vector<int> layer_out_shape(const LayerSpec& layer, const std::vector<int>& in);

// Verifies declared shapes and fills output_shape.
void finalize_spec(NetworkSpec& spec);

// Feature-extractor architectures: camera_expert, lidar_expert,
// lidar_full_expert, lidar_gate_feature, camera_gate_feature.
NetworkSpec feature_spec(const std::string& name, const Profile& profile);

// Small fully-connected chain. `hidden` layers use ReLU; `final` is one of
// "tanh", "softmax", "logits".
NetworkSpec mlp_spec(const std::string& name, int in, const std::vector<int>& dims,
                     const std::string& final_act);

// FLOPs per single inference. Convention: one multiply-accumulate = 2
// FLOPs; BN/ReLU/Tanh/pool/softmax cost one FLOP per output element.
long long count_flops(const NetworkSpec& spec);

}  // namespace mmen
