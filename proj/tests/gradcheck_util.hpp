#pragma once

#include <functional>
#include <random>
#include <vector>

#include "mmen/autodiff.hpp"

// Central finite-difference oracle, 64-bit. The builder constructs a fresh
// graph from the given leaf tensors and returns the scalar loss node; it
// must be a pure function of its inputs.
namespace gradcheck {

using DTensor = mmen::TensorT<double>;
using DTape = mmen::TapeT<double>;
using Builder = std::function<int(DTape&, const std::vector<int>&)>;

struct Report {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
};

inline double eval(const Builder& build, const std::vector<DTensor>& inputs) {
    DTape tape;
    std::vector<int> ids;
    for (const auto& t : inputs) ids.push_back(tape.leaf(t, true));
    return tape.val(build(tape, ids))[0];
}

inline Report check(const Builder& build, std::vector<DTensor> inputs, double h = 1e-5) {
    DTape tape;
    std::vector<int> ids;
    for (const auto& t : inputs) ids.push_back(tape.leaf(t, true));
    const int loss = build(tape, ids);
    tape.backward(loss);

    Report rep;
    for (size_t k = 0; k < inputs.size(); ++k) {
        for (int64_t i = 0; i < inputs[k].size(); ++i) {
            const double orig = inputs[k][i];
            inputs[k][i] = orig + h;
            const double fp = eval(build, inputs);
            inputs[k][i] = orig - h;
            const double fm = eval(build, inputs);
            inputs[k][i] = orig;
            const double numeric = (fp - fm) / (2 * h);
            const double analytic = tape.grad(ids[k])[i];
            const double abs_err = std::abs(numeric - analytic);
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            rep.max_rel_err = std::max(rep.max_rel_err, abs_err / denom);
        }
    }
    return rep;
}

// Inputs in [-1,1], nudged away from 0 to avoid ReLU kinks.
inline DTensor random_input(std::vector<int> shape, std::mt19937& rng, double min_abs = 0.05) {
    DTensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (double& v : t.data) {
        v = dist(rng);
        if (std::abs(v) < min_abs) v = v < 0 ? v - min_abs : v + min_abs;
    }
    return t;
}

}  // namespace gradcheck
