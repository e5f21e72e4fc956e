#pragma once

#include <vector>

#include "mmen/autodiff.hpp"

namespace mmen {

struct LossWeights {
    double alpha = 0.0;  // sparsity weight
    double beta = 0.0;   // negative-entropy weight
};

struct DistillConfig {
    enum class StudentLoss { Mse, CrossEntropy };
    double temperature = 2.0;
    double kd_weight = 0.9;
    StudentLoss student_loss = StudentLoss::Mse;
};

// Segment centers of the five half-overlapping crops, leftmost to
// rightmost; also the value grid behind the scalar gate.
inline const std::vector<float>& gate_value_grid() {
    static const std::vector<float> r = {-1.0f, -0.5f, 0.0f, 0.5f, 1.0f};
    return r;
}

// ---- pure scalar helpers (host side, no tape) ----

double prediction_loss(double y, double y_hat);
double sparsity_loss(const std::vector<double>& g);
double nentropy_loss(const std::vector<std::vector<double>>& gate_batch);
double scalar_gate_label(const std::vector<double>& teacher_g);
int onehot_gate_label(const std::vector<double>& teacher_g);  // returns argmax index, ties -> lowest

// ---- tape compositions ----

// Eq-style combined objective: prediction + alpha * sparsity + beta *
// nentropy. `pred` is [N,1]; `gate_probs` is [N,K].
int combined_loss(Tape& tape, int pred, const std::vector<float>& targets, int gate_probs,
                  const LossWeights& w);

// Distillation objective: kd_weight * T^2 * KL(softmax(teacher/T) ||
// softmax(student/T)) + (1 - kd_weight) * student loss. For Mse the student
// loss is the MSE between the student's scalar gate value and the teacher's
// scalar label; for CrossEntropy it is cross-entropy against the teacher's
// argmax one-hot.
int distill_loss(Tape& tape, int student_logits, const std::vector<float>& teacher_logits,
                 const DistillConfig& cfg);

// Softened teacher probabilities at the given temperature, row-major.
std::vector<float> soften(const std::vector<float>& logits, int arity, double temperature);

}  // namespace mmen
