#include <CLI11.hpp>
#include <Eigen/Core>
#include <cstdio>
#include <cstdlib>

#include "mmen/eval.hpp"

using namespace mmen;

int main(int argc, char** argv) {
    int threads = 1;
    if (const char* env = std::getenv("MME_THREADS")) {
        threads = std::max(1, std::atoi(env));
    }
    Eigen::setNbThreads(threads);

    CLI::App app{"multi-modal mixture-of-experts steering toolkit"};
    app.require_subcommand(1);

    std::string config, data, out, profile = "paper", world, stage, kind;
    std::vector<std::string> ckpts;
    int case_id = 0, count = 2000, steps = 200;
    uint32_t seed = 1;
    double steer_noise = 0.10;

    auto add_common = [&](CLI::App* c, bool with_case = false) {
        c->add_option("--config", config, "JSON config overrides");
        c->add_option("--data", data, "dataset path (.mmed)");
        c->add_option("--ckpt", ckpts, "checkpoint path(s), repeatable");
        c->add_option("--seed", seed, "random seed");
        c->add_option("--out", out, "output path");
        c->add_option("--profile", profile, "paper|tiny")
            ->check(CLI::IsMember({"paper", "tiny"}));
        if (with_case) c->add_option("--case", case_id, "scenario case 1..5 (0 = all)");
    };

    auto* gen = app.add_subcommand("gen-data", "drive the expert and record a dataset");
    add_common(gen);
    gen->add_option("--world", world, "world description file (default: built-in demo)");
    gen->add_option("--count", count, "number of frames");
    gen->add_option("--steer-noise", steer_noise, "expert steering noise sigma");

    auto* train = app.add_subcommand("train", "train one stage");
    add_common(train, true);
    train->add_option("stage", stage, "1.1 | 1.3 | 2.1 | 3 | e2e")->required();

    auto* distill = app.add_subcommand("distill", "gate distillation stages");
    add_common(distill);
    distill->add_option("stage", stage, "1.2 | 2.2")->required();

    auto* evalc = app.add_subcommand("eval", "per-scenario metrics of a final checkpoint");
    add_common(evalc, true);  // extra --ckpt entries are gate label tables, case order

    auto* flops = app.add_subcommand("flops", "per-model FLOPs table and ratios");
    add_common(flops);

    auto* roll = app.add_subcommand("rollout", "closed-loop drive in the demo world");
    add_common(roll);
    roll->add_option("--steps", steps, "control ticks to log");

    auto* trace = app.add_subcommand("trace", "per-frame gate/prediction trace");
    add_common(trace);

    auto* pipe = app.add_subcommand("pipeline", "full multi-stage training run");
    add_common(pipe);

    auto* abl = app.add_subcommand("ablate", "loss or end-to-end ablation");
    add_common(abl);
    abl->add_option("kind", kind, "loss | e2e")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;  // help prints and exits 0, usage errors exit 1
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(world, profile, count, seed, steer_noise,
                                out.empty() ? "dataset.mmed" : out);
        if (train->parsed()) {
            if (data.empty()) throw ConfigError("train needs --data");
            return cmd_train(stage, data, ckpts, config, profile, case_id, seed,
                             out.empty() ? "ckpt.mmen" : out);
        }
        if (distill->parsed()) {
            if (data.empty()) throw ConfigError("distill needs --data");
            return cmd_distill(stage, data, ckpts, config, profile, seed,
                               out.empty() ? "ckpt.mmen" : out);
        }
        if (evalc->parsed()) {
            if (data.empty() || ckpts.empty()) throw ConfigError("eval needs --data and --ckpt");
            std::vector<std::string> labels(ckpts.begin() + 1, ckpts.end());
            return cmd_eval(ckpts[0], data, labels, profile, case_id, out);
        }
        if (flops->parsed()) return cmd_flops(profile, out);
        if (roll->parsed()) return cmd_rollout(ckpts.empty() ? "" : ckpts[0], profile, steps, seed, out);
        if (trace->parsed()) {
            if (data.empty() || ckpts.empty()) throw ConfigError("trace needs --data and --ckpt");
            return cmd_trace(ckpts[0], data, profile, out);
        }
        if (pipe->parsed())
            return cmd_pipeline(config, data, profile, seed, out.empty() ? "run" : out);
        if (abl->parsed()) {
            if (data.empty()) throw ConfigError("ablate needs --data");
            return cmd_ablate(kind, data, ckpts.empty() ? "" : ckpts[0], config, profile, seed,
                              out.empty() ? "ablation" : out);
        }
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
}
