#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmen/tensor.hpp"

namespace mmen {

// One synchronized multi-sensor sample: three RGB camera images
// (left/center/right), the LiDAR depth map (distance + reflectivity), and
// the expert steering label in [-1,1] (+1 = full right).
struct Frame {
    Tensor x1, x2, x3, x4;
    float y = 0.0f;
};

// ---- dataset file (magic "MMED") ----
// version u32, frame count u64, four shape records (rank u8 + dims u32),
// then per frame the x1..x4 payloads as little-endian f32 followed by y.
void save_dataset(const std::string& path, const std::vector<Frame>& frames);
std::vector<Frame> load_dataset(const std::string& path);

// ---- teacher label file (magic "MMEL") ----
// version u32, frame count u64, label arity u32, then count*arity f32.
void save_labels(const std::string& path, int arity, const std::vector<float>& flat);
std::vector<float> load_labels(const std::string& path, int expected_arity);

// ---- steering bins ----
// Seven categories: [-1,-0.67) [-0.67,-0.33) [-0.33,0) {0} (0,0.33]
// (0.33,0.67] (0.67,1].
int bin_of(float y);
std::array<int64_t, 7> bin_histogram(const std::vector<Frame>& frames);

// Per-bin uniform draws with replacement, `per_bin` from each of the seven
// bins; deterministic given seed. Throws naming the first empty bin.
std::vector<int> balanced_epoch_sample(const std::vector<Frame>& frames, int per_bin, uint32_t seed);

}  // namespace mmen
