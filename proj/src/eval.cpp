#include "mmen/eval.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace mmen {

namespace {

using nlohmann::json;

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << text;
    if (!os) throw FormatError("write failed for " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

double now_s() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void split_frames(std::vector<Frame>& all, double test_fraction, std::vector<Frame>& test) {
    const size_t ntest =
        std::max<size_t>(1, static_cast<size_t>(static_cast<double>(all.size()) * test_fraction));
    if (ntest >= all.size()) throw ConfigError("dataset too small to split");
    test.assign(all.end() - static_cast<int64_t>(ntest), all.end());
    all.resize(all.size() - ntest);
}

StageConfig stage_from_json(const json& j, StageConfig base) {
    if (j.contains("lr")) base.lr = j["lr"].get<double>();
    if (j.contains("epochs")) base.epochs = j["epochs"].get<int>();
    if (j.contains("per_bin")) base.per_bin = j["per_bin"].get<int>();
    if (j.contains("batch")) base.batch = j["batch"].get<int>();
    if (j.contains("alpha")) base.weights.alpha = j["alpha"].get<double>();
    if (j.contains("beta")) base.weights.beta = j["beta"].get<double>();
    if (j.contains("temperature")) base.distill.temperature = j["temperature"].get<double>();
    if (j.contains("kd_weight")) base.distill.kd_weight = j["kd_weight"].get<double>();
    return base;
}

json stage_to_json(const StageConfig& s) {
    return json{{"lr", s.lr},       {"epochs", s.epochs},
                {"per_bin", s.per_bin}, {"batch", s.batch},
                {"alpha", s.weights.alpha}, {"beta", s.weights.beta},
                {"temperature", s.distill.temperature}, {"kd_weight", s.distill.kd_weight}};
}

json config_to_json(const PipelineConfig& c) {
    return json{{"profile", c.profile},
                {"seed", c.seed},
                {"frames", c.frames},
                {"test_fraction", c.test_fraction},
                {"steer_noise", c.steer_noise},
                {"teacher_subset", c.teacher_subset},
                {"loss_ablation", c.loss_ablation},
                {"s11", stage_to_json(c.s11)},
                {"s12", stage_to_json(c.s12)},
                {"s13", stage_to_json(c.s13)},
                {"s21", stage_to_json(c.s21)},
                {"s22", stage_to_json(c.s22)},
                {"s3", stage_to_json(c.s3)},
                {"e2e", stage_to_json(c.e2e)}};
}

// Extracts the stage-2.1 case stores from either a combined checkpoint
// (prefixes c1..c5) or a single-case checkpoint.
ParamStore extract_case(const ParamStore& s21, int case_id) {
    const std::string prefix = "c" + std::to_string(case_id) + ".";
    ParamStore out;
    if (s21.entries.count(prefix + "cam1.conv1.w")) {
        out.adopt(s21, prefix, "");
        return out;
    }
    if (s21.entries.count("cam1.conv1.w")) {
        out.adopt(s21, "", "");
        return out;
    }
    throw FormatError("checkpoint holds no four-sensor network for case " + std::to_string(case_id));
}

}  // namespace

// ---- report / manifest ----

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << "case,mse,gate_acc,n_frames\n";
    for (const auto& r : cases)
        os << r.case_id << "," << fmt(r.mse) << ","
           << (r.gate_acc < 0 ? std::string("") : fmt(r.gate_acc)) << "," << r.n_frames << "\n";
    os << "metric,value\n";
    for (const auto& [k, v] : scalars) os << k << "," << fmt(v) << "\n";
    return os.str();
}

std::string RunManifest::to_json() const {
    json j;
    j["command"] = command;
    j["seed"] = seed;
    j["config"] = config_snapshot.empty() ? json{} : json::parse(config_snapshot);
    j["inputs"] = input_digests;
    j["outputs"] = outputs;
    j["wall_time_s"] = wall_time_s;
    return j.dump(2) + "\n";
}

void RunManifest::write(const std::string& path) const { write_text(path, to_json()); }

std::string file_digest(const std::string& path) {
    const std::string bytes = read_text(path);
    uint64_t h = 1469598103934665603ull;
    for (char c : bytes) h = (h ^ static_cast<uint8_t>(c)) * 1099511628211ull;
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

PipelineConfig load_pipeline_config(const std::string& path, const std::string& profile) {
    PipelineConfig c = PipelineConfig::defaults(profile);
    if (path.empty()) return c;
    json j = json::parse(read_text(path));
    if (j.contains("profile")) {
        c = PipelineConfig::defaults(j["profile"].get<std::string>());
        c.profile = j["profile"].get<std::string>();
    }
    if (j.contains("seed")) c.seed = j["seed"].get<uint32_t>();
    if (j.contains("frames")) c.frames = j["frames"].get<int>();
    if (j.contains("test_fraction")) c.test_fraction = j["test_fraction"].get<double>();
    if (j.contains("steer_noise")) c.steer_noise = j["steer_noise"].get<double>();
    if (j.contains("teacher_subset")) c.teacher_subset = j["teacher_subset"].get<int>();
    if (j.contains("loss_ablation")) c.loss_ablation = j["loss_ablation"].get<bool>();
    if (j.contains("s11")) c.s11 = stage_from_json(j["s11"], c.s11);
    if (j.contains("s12")) c.s12 = stage_from_json(j["s12"], c.s12);
    if (j.contains("s13")) c.s13 = stage_from_json(j["s13"], c.s13);
    if (j.contains("s21")) c.s21 = stage_from_json(j["s21"], c.s21);
    if (j.contains("s22")) c.s22 = stage_from_json(j["s22"], c.s22);
    if (j.contains("s3")) c.s3 = stage_from_json(j["s3"], c.s3);
    if (j.contains("e2e")) c.e2e = stage_from_json(j["e2e"], c.e2e);
    return c;
}

// ---- pipeline ----

PipelineResult run_pipeline(const PipelineConfig& cfg_in, const std::string& out_dir,
                            const std::string& data_path) {
    const double t0 = now_s();
    PipelineConfig cfg = cfg_in;
    if (cfg.loss_ablation) {
        cfg.s11.weights = {0, 0};
        cfg.s21.weights = {0, 0};
    }
    const Profile prof = Profile::named(cfg.profile);
    std::filesystem::create_directories(out_dir);
    auto path = [&](const std::string& name) { return out_dir + "/" + name; };

    RunManifest man;
    man.command = "pipeline";
    man.seed = cfg.seed;
    man.config_snapshot = config_to_json(cfg).dump();

    std::vector<Frame> train;
    if (data_path.empty()) {
        const World world(WorldSpec::demo(cfg.seed));
        train = generate_frames(world, SensorRig::from_profile(prof), cfg.frames, cfg.seed, nullptr,
                                cfg.steer_noise);
        save_dataset(path("dataset.mmed"), train);
        man.outputs.push_back(path("dataset.mmed"));
    } else {
        train = load_dataset(data_path);
        man.input_digests[data_path] = file_digest(data_path);
    }
    std::vector<Frame> test;
    split_frames(train, cfg.test_fraction, test);

    PipelineResult res;
    MetricsReport& rep = res.report;

    // Stage 1.1: segmented LiDAR network, the gate teacher for 1.2.
    auto s11 = train_stage_1_1(train, prof, cfg.s11, cfg.seed);
    save_checkpoint(path("s11.mmen"), s11.store);
    const auto teach5 = step1_teacher_logits(s11.store, train, prof);
    save_labels(path("labels_gl.mmel"), 5, teach5);
    rep.scalars["s11_train_loss"] = s11.metrics.at("train_loss");
    rep.scalars["s11_mean_max_gate"] = s11.metrics.at("mean_max_gate");

    // Stage 1.2: distill the small LiDAR gate.
    auto s12 = distill_1_2(train, teach5, prof, cfg.s12, cfg.seed);
    save_checkpoint(path("s12.mmen"), s12.store);
    rep.scalars["s12_scalar_gate_mae"] = s12.metrics.at("scalar_gate_mae");

    // Stage 1.3: LiDAR-with-gating branch, gate frozen.
    auto s13 = train_stage_1_3(train, test, s12.store, prof, cfg.s13, cfg.seed);
    save_checkpoint(path("s13.mmen"), s13.store);
    rep.scalars["s13_test_mse"] = s13.metrics.at("test_mse");
    rep.scalars["s13_gate_frozen"] = s13.metrics.at("gate_frozen");

    // Stage 2.1: five scenario teachers, combined into one checkpoint.
    const std::vector<Frame> subset(
        train.begin(),
        train.begin() + std::min<size_t>(train.size(), static_cast<size_t>(cfg.teacher_subset)));
    ParamStore s21_all;
    ParamStore case2;
    std::array<std::vector<float>, 5> teach_sub, teach_test;
    std::vector<float> gm_labels;
    for (int c = 1; c <= 5; ++c) {
        auto t = train_stage_2_1(train, c, prof, cfg.s21, cfg.seed);
        s21_all.adopt(t.store, "", "c" + std::to_string(c) + ".");
        if (c == 2) case2.adopt(t.store, "", "");
        teach_sub[static_cast<size_t>(c - 1)] = foursensor_teacher_logits(t.store, subset, c, prof);
        teach_test[static_cast<size_t>(c - 1)] = foursensor_teacher_logits(t.store, test, c, prof);
        const auto& ts = teach_sub[static_cast<size_t>(c - 1)];
        gm_labels.insert(gm_labels.end(), ts.begin(), ts.end());
        rep.scalars["s21_case" + std::to_string(c) + "_train_loss"] = t.metrics.at("train_loss");
    }
    save_checkpoint(path("s21.mmen"), s21_all);
    save_labels(path("labels_gm.mmel"), 4, gm_labels);

    // Stage 2.2: main gate distilled from the five teachers.
    auto s22 = distill_2_2(subset, teach_sub, prof, cfg.s22, cfg.seed);
    save_checkpoint(path("s22.mmen"), s22.store);
    rep.scalars["lidar_selection_rate"] =
        final_lidar_selection_rate(s22.store, test, prof);

    // Stage 3: final network.
    auto s3 = train_stage_3(train, s13.store, case2, s22.store, prof, cfg.s3, cfg.seed);
    save_checkpoint(path("final.mmen"), s3.store);
    rep.scalars["s3_train_loss"] = s3.metrics.at("train_loss");
    rep.scalars["s3_gates_frozen"] = s3.metrics.at("gates_frozen");

    double mean = 0;
    for (int c = 1; c <= 5; ++c) {
        MetricsReport::CaseRow row;
        row.case_id = c;
        row.mse = eval_final_mse(s3.store, test, prof, c);
        row.gate_acc = final_gate_accuracy(s3.store, test, c,
                                           teach_test[static_cast<size_t>(c - 1)], prof);
        row.n_frames = static_cast<int>(test.size());
        rep.cases.push_back(row);
        mean += row.mse / 5.0;
    }
    rep.scalars["final_mean_mse"] = mean;

    res.metrics_csv_path = path("metrics.csv");
    write_text(res.metrics_csv_path, rep.to_csv());
    res.checkpoints = {path("s11.mmen"), path("s12.mmen"), path("s13.mmen"),
                       path("s21.mmen"), path("s22.mmen"), path("final.mmen")};
    res.label_files = {path("labels_gl.mmel"), path("labels_gm.mmel")};

    for (const auto& p : res.checkpoints) man.outputs.push_back(p);
    for (const auto& p : res.label_files) man.outputs.push_back(p);
    man.outputs.push_back(res.metrics_csv_path);
    man.wall_time_s = now_s() - t0;
    res.manifest_path = path("manifest.json");
    man.write(res.manifest_path);
    return res;
}

// ---- commands ----

int cmd_gen_data(const std::string& world_path, const std::string& profile, int count,
                 uint32_t seed, double steer_noise, const std::string& out_path) {
    const double t0 = now_s();
    const Profile prof = Profile::named(profile);
    WorldSpec spec = world_path.empty() ? WorldSpec::demo(seed) : WorldSpec::parse(read_text(world_path));
    const World world(spec);
    GenStats st;
    const auto frames =
        generate_frames(world, SensorRig::from_profile(prof), count, seed, &st, steer_noise);
    save_dataset(out_path, frames);

    std::printf("wrote %zu frames to %s\n", frames.size(), out_path.c_str());
    std::printf("steering bins:");
    for (auto c : st.bin_counts) std::printf(" %lld", static_cast<long long>(c));
    std::printf("\nleft-turn arclength fraction: %.3f, episodes: %d\n", st.left_turn_fraction,
                st.episodes);

    RunManifest man;
    man.command = "gen-data";
    man.seed = seed;
    man.config_snapshot = json{{"profile", profile}, {"count", count},
                               {"steer_noise", steer_noise}, {"world", spec.serialize()}}
                              .dump();
    if (!world_path.empty()) man.input_digests[world_path] = file_digest(world_path);
    man.outputs = {out_path};
    man.wall_time_s = now_s() - t0;
    man.write(out_path + ".manifest.json");
    return 0;
}

int cmd_train(const std::string& stage, const std::string& data_path,
              const std::vector<std::string>& ckpts, const std::string& config_path,
              const std::string& profile, int case_id, uint32_t seed, const std::string& out_path) {
    const double t0 = now_s();
    PipelineConfig cfg = load_pipeline_config(config_path, profile);
    cfg.seed = seed;
    const Profile prof = Profile::named(cfg.profile);
    std::vector<Frame> train = load_dataset(data_path);
    std::vector<Frame> test;
    split_frames(train, cfg.test_fraction, test);

    StageOutput out;
    if (stage == "1.1") {
        out = train_stage_1_1(train, prof, cfg.s11, seed);
    } else if (stage == "1.3") {
        if (ckpts.empty()) throw ConfigError("stage 1.3 needs the gate checkpoint (--ckpt)");
        const auto gl = load_checkpoint<float>(ckpts[0]);
        out = train_stage_1_3(train, test, gl, prof, cfg.s13, seed);
    } else if (stage == "2.1") {
        if (case_id < 1 || case_id > 5) throw ConfigError("stage 2.1 needs --case 1..5");
        out = train_stage_2_1(train, case_id, prof, cfg.s21, seed);
    } else if (stage == "3") {
        if (ckpts.size() != 3)
            throw ConfigError("stage 3 needs --ckpt lwg --ckpt s21 --ckpt gate, in that order");
        const auto lwg = load_checkpoint<float>(ckpts[0]);
        const auto case2 = extract_case(load_checkpoint<float>(ckpts[1]), 2);
        const auto gm = load_checkpoint<float>(ckpts[2]);
        out = train_stage_3(train, lwg, case2, gm, prof, cfg.s3, seed);
    } else if (stage == "e2e") {
        out = run_e2e_ablation(train, prof, cfg.e2e, seed);
    } else {
        throw ConfigError("unknown training stage " + stage);
    }
    save_checkpoint(out_path, out.store);
    for (const auto& [k, v] : out.metrics) std::printf("%s: %s\n", k.c_str(), fmt(v).c_str());

    RunManifest man;
    man.command = "train " + stage;
    man.seed = seed;
    man.config_snapshot = config_to_json(cfg).dump();
    man.input_digests[data_path] = file_digest(data_path);
    for (const auto& c : ckpts) man.input_digests[c] = file_digest(c);
    man.outputs = {out_path};
    man.wall_time_s = now_s() - t0;
    man.write(out_path + ".manifest.json");
    return 0;
}

int cmd_distill(const std::string& stage, const std::string& data_path,
                const std::vector<std::string>& ckpts, const std::string& config_path,
                const std::string& profile, uint32_t seed, const std::string& out_path) {
    const double t0 = now_s();
    PipelineConfig cfg = load_pipeline_config(config_path, profile);
    const Profile prof = Profile::named(cfg.profile);
    std::vector<Frame> train = load_dataset(data_path);
    std::vector<Frame> test;
    split_frames(train, cfg.test_fraction, test);
    if (ckpts.empty()) throw ConfigError("distillation needs a teacher checkpoint (--ckpt)");

    StageOutput out;
    std::string labels_path;
    if (stage == "1.2") {
        auto teacher = load_checkpoint<float>(ckpts[0]);
        const auto teach5 = step1_teacher_logits(teacher, train, prof);
        labels_path = out_path + ".labels.mmel";
        save_labels(labels_path, 5, teach5);
        out = distill_1_2(train, teach5, prof, cfg.s12, seed);
    } else if (stage == "2.2") {
        auto s21 = load_checkpoint<float>(ckpts[0]);
        const std::vector<Frame> subset(
            train.begin(),
            train.begin() + std::min<size_t>(train.size(), static_cast<size_t>(cfg.teacher_subset)));
        std::array<std::vector<float>, 5> teach;
        std::vector<float> flat;
        for (int c = 1; c <= 5; ++c) {
            auto inst = extract_case(s21, c);
            teach[static_cast<size_t>(c - 1)] = foursensor_teacher_logits(inst, subset, c, prof);
            flat.insert(flat.end(), teach[static_cast<size_t>(c - 1)].begin(),
                        teach[static_cast<size_t>(c - 1)].end());
        }
        labels_path = out_path + ".labels.mmel";
        save_labels(labels_path, 4, flat);
        out = distill_2_2(subset, teach, prof, cfg.s22, seed);
    } else {
        throw ConfigError("unknown distillation stage " + stage);
    }
    save_checkpoint(out_path, out.store);
    for (const auto& [k, v] : out.metrics) std::printf("%s: %s\n", k.c_str(), fmt(v).c_str());

    RunManifest man;
    man.command = "distill " + stage;
    man.seed = seed;
    man.config_snapshot = config_to_json(cfg).dump();
    man.input_digests[data_path] = file_digest(data_path);
    for (const auto& c : ckpts) man.input_digests[c] = file_digest(c);
    man.outputs = {out_path, labels_path};
    man.wall_time_s = now_s() - t0;
    man.write(out_path + ".manifest.json");
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_path,
             const std::vector<std::string>& label_files, const std::string& profile, int case_id,
             const std::string& out_path) {
    const double t0 = now_s();
    const Profile prof = Profile::named(profile);
    auto store = load_checkpoint<float>(ckpt);
    const auto frames = load_dataset(data_path);
    if (frames.empty()) throw ConfigError("empty dataset");

    MetricsReport rep;
    std::vector<int> case_list;
    if (case_id == 0)
        case_list = {1, 2, 3, 4, 5};
    else
        case_list = {case_id};
    double mean = 0;
    for (size_t i = 0; i < case_list.size(); ++i) {
        MetricsReport::CaseRow row;
        row.case_id = case_list[i];
        row.mse = eval_final_mse(store, frames, prof, row.case_id);
        row.gate_acc = -1;
        if (i < label_files.size()) {
            const auto teach = load_labels(label_files[i], 4);
            row.gate_acc = final_gate_accuracy(store, frames, row.case_id, teach, prof);
        }
        row.n_frames = static_cast<int>(frames.size());
        rep.cases.push_back(row);
        mean += row.mse / static_cast<double>(case_list.size());
    }
    rep.scalars["mean_mse"] = mean;
    rep.scalars["lidar_selection_rate"] = final_lidar_selection_rate(store, frames, prof);
    const std::string csv = rep.to_csv();
    std::fputs(csv.c_str(), stdout);
    if (!out_path.empty()) {
        write_text(out_path, csv);
        RunManifest man;
        man.command = "eval";
        man.input_digests[data_path] = file_digest(data_path);
        man.input_digests[ckpt] = file_digest(ckpt);
        man.outputs = {out_path};
        man.wall_time_s = now_s() - t0;
        man.write(out_path + ".manifest.json");
    }
    return 0;
}

int cmd_flops(const std::string& profile, const std::string& out_path) {
    const Profile prof = Profile::named(profile);
    std::ostringstream os;
    os << "# convention: 1 multiply-accumulate = 2 FLOPs; BN/ReLU/Tanh/pool/softmax = 1 FLOP per "
          "element\n";
    os << "model,flops\n";
    for (const char* n :
         {"camera_expert", "lidar_expert", "lidar_full_expert", "lidar_gate", "main_gate",
          "step1_net", "lidar_with_gating", "foursensor_net", "final_net_lidar",
          "final_net_camera", "baseline_concat", "lidar_only", "single_camera", "three_cameras"})
        os << n << "," << model_flops(n, prof) << "\n";
    os << "ratio,value\n";
    os << "final_net_lidar/baseline_concat,"
       << fmt(static_cast<double>(model_flops("final_net_lidar", prof)) /
              static_cast<double>(model_flops("baseline_concat", prof)))
       << "\n";
    os << "lidar_with_gating/lidar_only,"
       << fmt(static_cast<double>(model_flops("lidar_with_gating", prof)) /
              static_cast<double>(model_flops("lidar_only", prof)))
       << "\n";
    std::fputs(os.str().c_str(), stdout);
    if (!out_path.empty()) write_text(out_path, os.str());
    return 0;
}

int cmd_rollout(const std::string& ckpt, const std::string& profile, int steps, uint32_t seed,
                const std::string& out_path) {
    const double t0 = now_s();
    const Profile prof = Profile::named(profile);
    const World world(WorldSpec::demo(seed));
    const SensorRig rig = SensorRig::from_profile(prof);
    ParamStore store;
    const bool use_model = !ckpt.empty();
    if (use_model) store = load_checkpoint<float>(ckpt);

    Pose pose = world.centerline_pose(0.8);
    if (!world.inside(pose)) throw ConfigError("rollout start pose outside corridor");
    std::ostringstream os;
    os << "step,x,y,heading,lateral,steer,selected,g_l\n";
    double abs_lat = 0;
    int off = 0;
    for (int step = 0; step < steps; ++step) {
        const auto loc = world.locate(pose);
        // Wrap to the corridor start when the end is reached so every run
        // logs exactly `steps` rows.
        if (loc.s + 3.0 > world.total_length()) pose = world.centerline_pose(0.8);

        double steer;
        int selected = -1;
        double g_l = 0;
        if (use_model) {
            const Frame f = capture_frame(world, pose, rig);
            const auto inf = final_infer(store, prof, f.x1, f.x2, f.x3, f.x4);
            steer = inf.pred;
            selected = inf.gate.selected;
            g_l = inf.gate.lidar_scalar;
        } else {
            steer = expert_steer(world, pose);
        }
        const auto here = world.locate(pose);
        abs_lat += std::abs(here.lateral);
        os << step << "," << fmt(pose.x) << "," << fmt(pose.y) << "," << fmt(pose.heading) << ","
           << fmt(here.lateral) << "," << fmt(steer) << "," << selected << "," << fmt(g_l) << "\n";

        pose = step_vehicle(pose, steer);
        if (!world.inside(pose)) {
            ++off;
            // Recover to the nearest centerline point and keep logging.
            pose = world.centerline_pose(std::min(world.locate(pose).s, world.total_length()));
        }
    }
    os << "# mean_abs_lateral=" << fmt(abs_lat / steps)
       << " off_corridor_rate=" << fmt(static_cast<double>(off) / steps) << "\n";
    std::fputs(os.str().c_str(), stdout);
    if (!out_path.empty()) {
        write_text(out_path, os.str());
        RunManifest man;
        man.command = "rollout";
        man.seed = seed;
        if (use_model) man.input_digests[ckpt] = file_digest(ckpt);
        man.outputs = {out_path};
        man.wall_time_s = now_s() - t0;
        man.write(out_path + ".manifest.json");
    }
    return 0;
}

int cmd_trace(const std::string& ckpt, const std::string& data_path, const std::string& profile,
              const std::string& out_path) {
    const double t0 = now_s();
    const Profile prof = Profile::named(profile);
    auto store = load_checkpoint<float>(ckpt);
    const auto frames = load_dataset(data_path);
    std::ostringstream os;
    os << "frame,y,y_hat,g_l,gm_1,gm_2,gm_3,gm_4,selected\n";
    for (size_t i = 0; i < frames.size(); ++i) {
        const Frame& f = frames[i];
        const auto inf = final_infer(store, prof, f.x1, f.x2, f.x3, f.x4);
        // g_L is reported for every frame, also when a camera is selected.
        Tape tape;
        ParamBinder binder(tape, store);
        Tensor x4b = f.x4;
        x4b.shape.insert(x4b.shape.begin(), 1);
        const auto gl = forward_lidar_gate(tape, binder, prof, tape.leaf(std::move(x4b)), false);
        os << i << "," << fmt(f.y) << "," << fmt(inf.pred) << "," << fmt(tape.val(gl.scalar)[0]);
        for (int k = 0; k < 4; ++k) os << "," << fmt(inf.gate.main_probs[static_cast<size_t>(k)]);
        os << "," << inf.gate.selected << "\n";
    }
    std::fputs(os.str().c_str(), stdout);
    if (!out_path.empty()) {
        write_text(out_path, os.str());
        RunManifest man;
        man.command = "trace";
        man.input_digests[data_path] = file_digest(data_path);
        man.input_digests[ckpt] = file_digest(ckpt);
        man.outputs = {out_path};
        man.wall_time_s = now_s() - t0;
        man.write(out_path + ".manifest.json");
    }
    return 0;
}

int cmd_pipeline(const std::string& config_path, const std::string& data_path,
                 const std::string& profile, uint32_t seed, const std::string& out_dir) {
    PipelineConfig cfg = load_pipeline_config(config_path, profile);
    if (config_path.empty() || seed != 0) cfg.seed = seed ? seed : cfg.seed;
    const auto res = run_pipeline(cfg, out_dir, data_path);
    std::fputs(read_text(res.metrics_csv_path).c_str(), stdout);
    std::printf("pipeline outputs in %s\n", out_dir.c_str());
    return 0;
}

int cmd_ablate(const std::string& kind, const std::string& data_path,
               const std::string& pipeline_dir, const std::string& config_path,
               const std::string& profile, uint32_t seed, const std::string& out_dir) {
    const double t0 = now_s();
    PipelineConfig cfg = load_pipeline_config(config_path, profile);
    cfg.seed = seed ? seed : cfg.seed;
    const Profile prof = Profile::named(cfg.profile);
    std::filesystem::create_directories(out_dir);
    std::vector<Frame> train = load_dataset(data_path);
    std::vector<Frame> test;
    split_frames(train, cfg.test_fraction, test);

    std::ostringstream os;
    RunManifest man;
    man.command = "ablate " + kind;
    man.seed = cfg.seed;
    man.config_snapshot = config_to_json(cfg).dump();
    man.input_digests[data_path] = file_digest(data_path);
    std::string out_csv;

    if (kind == "loss") {
        auto full = train_stage_1_1(train, prof, cfg.s11, cfg.seed);
        StageConfig ablated = cfg.s11;
        ablated.weights = {0, 0};
        auto zero = train_stage_1_1(train, prof, ablated, cfg.seed);
        os << "variant,mean_max_gate,train_loss\n";
        os << "full," << fmt(full.metrics.at("mean_max_gate")) << ","
           << fmt(full.metrics.at("train_loss")) << "\n";
        os << "alpha_beta_zero," << fmt(zero.metrics.at("mean_max_gate")) << ","
           << fmt(zero.metrics.at("train_loss")) << "\n";
        out_csv = out_dir + "/ablation_loss.csv";
    } else if (kind == "e2e") {
        if (pipeline_dir.empty())
            throw ConfigError("e2e ablation needs --ckpt <pipeline output dir> for the teachers");
        auto s21 = load_checkpoint<float>(pipeline_dir + "/s21.mmen");
        auto gm = load_checkpoint<float>(pipeline_dir + "/s22.mmen");
        auto e2e = run_e2e_ablation(train, prof, cfg.e2e, cfg.seed);
        os << "case,acc_multistep,acc_e2e,mse_e2e\n";
        for (int c = 1; c <= 5; ++c) {
            auto inst = extract_case(s21, c);
            const auto teach = foursensor_teacher_logits(inst, test, c, prof);
            os << c << "," << fmt(final_gate_accuracy(gm, test, c, teach, prof)) << ","
               << fmt(final_gate_accuracy(e2e.store, test, c, teach, prof)) << ","
               << fmt(eval_final_mse(e2e.store, test, prof, c)) << "\n";
        }
        save_checkpoint(out_dir + "/e2e.mmen", e2e.store);
        man.outputs.push_back(out_dir + "/e2e.mmen");
        out_csv = out_dir + "/ablation_e2e.csv";
    } else {
        throw ConfigError("unknown ablation kind " + kind + " (expected loss|e2e)");
    }
    write_text(out_csv, os.str());
    std::fputs(os.str().c_str(), stdout);
    man.outputs.push_back(out_csv);
    man.wall_time_s = now_s() - t0;
    man.write(out_dir + "/ablation_" + kind + ".manifest.json");
    return 0;
}

}  // namespace mmen
