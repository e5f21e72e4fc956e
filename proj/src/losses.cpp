#include "mmen/losses.hpp"

#include <cmath>

namespace mmen {

double prediction_loss(double y, double y_hat) {
    const double d = y - y_hat;
    return d * d;
}

double sparsity_loss(const std::vector<double>& g) {
    double s = 0;
    for (double v : g)
        if (v > 0) s -= v * std::log(v);
    return s;
}

double nentropy_loss(const std::vector<std::vector<double>>& gate_batch) {
    if (gate_batch.empty()) throw ConfigError("nentropy_loss on empty batch");
    const size_t k = gate_batch.front().size();
    std::vector<double> p(k, 0.0);
    for (const auto& row : gate_batch) {
        if (row.size() != k) throw ConfigError("nentropy_loss ragged batch");
        for (size_t i = 0; i < k; ++i) p[i] += row[i];
    }
    double s = 0;
    for (double v : p) {
        v /= static_cast<double>(gate_batch.size());
        if (v > 0) s += v * std::log(v);
    }
    return s;
}

double scalar_gate_label(const std::vector<double>& teacher_g) {
    if (teacher_g.size() != 5) throw ConfigError("scalar_gate_label expects 5 probabilities");
    const auto& r = gate_value_grid();
    double s = 0;
    for (size_t i = 0; i < 5; ++i) s += teacher_g[i] * r[i];
    return s;
}

int onehot_gate_label(const std::vector<double>& teacher_g) {
    if (teacher_g.empty()) throw ConfigError("onehot_gate_label on empty distribution");
    int best = 0;
    for (size_t i = 1; i < teacher_g.size(); ++i)
        if (teacher_g[i] > teacher_g[best]) best = static_cast<int>(i);
    return best;
}

int combined_loss(Tape& tape, int pred, const std::vector<float>& targets, int gate_probs,
                  const LossWeights& w) {
    const int lp = tape.mse_loss(pred, targets);
    const int ls = tape.mean_row_entropy(gate_probs);
    const int ln = tape.neg_entropy_of_mean(gate_probs);
    return tape.combine({{1.0f, lp}, {static_cast<float>(w.alpha), ls}, {static_cast<float>(w.beta), ln}});
}

std::vector<float> soften(const std::vector<float>& logits, int arity, double temperature) {
    if (logits.size() % static_cast<size_t>(arity) != 0) throw ConfigError("soften: ragged logits");
    std::vector<float> out(logits.size());
    const size_t rows = logits.size() / static_cast<size_t>(arity);
    for (size_t i = 0; i < rows; ++i) {
        const float* row = logits.data() + i * static_cast<size_t>(arity);
        float* orow = out.data() + i * static_cast<size_t>(arity);
        double mx = row[0] / temperature;
        for (int j = 1; j < arity; ++j) mx = std::max(mx, row[j] / temperature);
        double z = 0;
        for (int j = 0; j < arity; ++j) z += std::exp(row[j] / temperature - mx);
        for (int j = 0; j < arity; ++j)
            orow[j] = static_cast<float>(std::exp(row[j] / temperature - mx) / z);
    }
    return out;
}

int distill_loss(Tape& tape, int student_logits, const std::vector<float>& teacher_logits,
                 const DistillConfig& cfg) {
    const auto& lv = tape.val(student_logits);
    if (lv.rank() != 2) throw ConfigError("distill_loss expects rank-2 student logits");
    const int n = lv.dim(0), k = lv.dim(1);
    if (static_cast<int>(teacher_logits.size()) != n * k)
        throw ConfigError("distill_loss teacher/student size mismatch");
    if (cfg.temperature <= 0) throw ConfigError("distillation temperature must be positive");

    const std::vector<float> soft_targets = soften(teacher_logits, k, cfg.temperature);
    const int kl = tape.kl_to_const(student_logits, soft_targets, static_cast<float>(cfg.temperature));
    const float t2 = static_cast<float>(cfg.temperature * cfg.temperature);

    int student;
    if (cfg.student_loss == DistillConfig::StudentLoss::Mse) {
        if (k != 5) throw ConfigError("scalar-gate student loss expects 5 logits");
        const std::vector<float> hard = soften(teacher_logits, k, 1.0);
        std::vector<float> labels(static_cast<size_t>(n));
        const auto& r = gate_value_grid();
        for (int i = 0; i < n; ++i) {
            double s = 0;
            for (int j = 0; j < k; ++j) s += hard[static_cast<size_t>(i * k + j)] * r[static_cast<size_t>(j)];
            labels[static_cast<size_t>(i)] = static_cast<float>(s);
        }
        const int probs = tape.softmax(student_logits);
        const int scalar = tape.dot_rows(probs, std::vector<float>(r));
        student = tape.mse_loss(scalar, labels);
    } else {
        const std::vector<float> hard = soften(teacher_logits, k, 1.0);
        std::vector<int> labels(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            std::vector<double> row(hard.begin() + i * k, hard.begin() + (i + 1) * k);
            labels[static_cast<size_t>(i)] = onehot_gate_label(row);
        }
        student = tape.cross_entropy_index(student_logits, std::move(labels));
    }
    return tape.combine({{static_cast<float>(cfg.kd_weight) * t2, kl},
                         {static_cast<float>(1.0 - cfg.kd_weight), student}});
}

}  // namespace mmen
