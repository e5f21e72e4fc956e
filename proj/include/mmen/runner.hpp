#pragma once

#include <map>
#include <random>
#include <string>

#include "mmen/autodiff.hpp"
#include "mmen/netspec.hpp"
#include "mmen/params.hpp"

namespace mmen {

// Binds store parameters onto a tape on demand and gathers their gradients
// back after backward(). Frozen parameters are bound without gradient
// tracking, so backward skips their subtrees entirely.
struct ParamBinder {
    Tape& tape;
    ParamStore& store;
    std::map<std::string, int> bound;

    ParamBinder(Tape& t, ParamStore& s) : tape(t), store(s) {}

    int operator()(const std::string& name) {
        auto it = bound.find(name);
        if (it != bound.end()) return it->second;
        auto& entry = store.entries.at(name);
        const int id = tape.leaf(entry.value, entry.trainable);
        bound.emplace(name, id);
        return id;
    }

    std::map<std::string, Tensor> grads() const {
        std::map<std::string, Tensor> g;
        for (const auto& [name, id] : bound)
            if (tape.requires_grad(id)) g.emplace(name, tape.grad(id));
        return g;
    }
};

// Creates fresh parameters for every conv/BN/dense layer of a spec under
// `prefix`. Naming: conv1.w, conv1.b, bn1.gamma/.beta/.rmean/.rvar, fc1.w,
// fc1.b, numbered in layer order.
void init_network_params(ParamStore& store, const NetworkSpec& spec, const std::string& prefix,
                         std::mt19937& rng);

// Runs a spec forward. Input is a tape node ([N,C,H,W] or [N,F]); returns
// the output node. In train mode BN uses batch statistics and updates the
// store's running statistics in place.
int run_network(Tape& tape, ParamBinder& binder, const NetworkSpec& spec, int input,
                const std::string& prefix, bool train);

}  // namespace mmen
