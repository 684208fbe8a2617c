// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance gate: prints one PASS/FAIL line per criterion and exits nonzero when
// any hard criterion fails. Criteria 9-11 train fresh models through the CLI.

#include <torch/torch.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "oracles.h"
#include "reflgen/aux_encoder.h"
#include "reflgen/checkpoint.h"
#include "reflgen/cli.h"
#include "reflgen/conditioning.h"
#include "reflgen/dataset.h"
#include "reflgen/diffusion.h"
#include "reflgen/errors.h"
#include "reflgen/evaluation.h"
#include "reflgen/geometry.h"

using namespace reflgen;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Settings {
    fs::path work;
    int n = 2300;
    double test_fraction = 0.1;
    int aux_epochs = 10;
    int diffusion_steps = 20000;
    int ablation_steps = 2000;
    std::set<int> only;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s.precision(prec);
    s << v;
    return s.str();
}

// Runs one CLI command, appending its output to the run log.
int cli_run(const Settings& s, std::vector<std::string> args) {
    args.insert(args.begin(), "reflgen");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ofstream log(s.work / "cli.log", std::ios::app);
    log << "$";
    for (const auto& a : args) log << " " << a;
    log << "\n" << std::flush;
    return cli::run(static_cast<int>(argv.size()), argv.data(), log, log);
}

json read_json(const fs::path& p) {
    std::ifstream f(p);
    return json::parse(f);
}

Outcome c1_round_trip() {
    std::mt19937_64 rng(101);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto o = oracle::random_box(rng), r = oracle::random_box(rng);
        const auto back = geometry::decode_regression(o, geometry::encode_regression(o, r));
        worst = std::max(worst, oracle::corner_set_distance(back, r));
    }
    return {worst < 1e-6, "max corner error " + fmt(worst) + " px over 1000 pairs"};
}

Outcome c2_kfiou_ceiling() {
    std::mt19937_64 rng(102);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto b = oracle::random_box(rng);
        worst = std::max(worst, std::abs(geometry::kfiou(b, b) - 1.0 / 3.0));
    }
    return {worst <= 1e-9, "max |kfiou(b,b) - 1/3| = " + fmt(worst)};
}

Outcome c3_kfiou_oracle() {
    std::mt19937_64 rng(103);
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
        const auto a = oracle::random_box(rng, 4.0, 30.0, 10.0);
        const auto b = oracle::random_box(rng, 4.0, 30.0, 10.0);
        const double quad = oracle::gaussian_product_mass(a, b, 1200);
        worst = std::max(worst, std::abs(geometry::kfiou_overlap(a, b) / quad - 1.0));
    }
    return {worst < 1e-3, "max relative error " + fmt(worst) + " over 50 pairs"};
}

Outcome c4_loss_floor() {
    const double floor = std::exp(2.0 / 3.0);
    std::mt19937_64 rng(104);
    double worst_floor = 0.0;
    for (int i = 0; i < 100; ++i) {
        const auto b = oracle::random_box(rng);
        worst_floor = std::max(worst_floor, std::abs(geometry::kfiou_loss(b, b) - floor));
    }
    // Pairs within overlap range: far beyond it the overlap underflows and the loss rounds to e.
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < 1000; ++i) {
        const auto a = oracle::random_box(rng, 4, 40, 12), b = oracle::random_box(rng, 4, 40, 12);
        const double l = geometry::kfiou_loss(a, b);
        lo = std::min(lo, l);
        hi = std::max(hi, l);
    }
    const bool ok = worst_floor <= 1e-9 && lo >= floor - 1e-12 && hi < std::numbers::e;
    return {ok, "floor error " + fmt(worst_floor) + ", sampled range [" + fmt(lo, 8) + ", " + fmt(hi, 8) + "]"};
}

Outcome c5_rasterization() {
    std::mt19937_64 rng(105);
    std::uniform_real_distribution<double> c(-10, 138), sz(1, 90), t(-90, 90);
    int mismatched = 0;
    for (int i = 0; i < 50; ++i) {
        const geometry::RotatedBox b{c(rng), c(rng), sz(rng), sz(rng), t(rng)};
        if (!(geometry::rasterize_box(b, 128, 128) == oracle::rasterize_half_planes(b, 128, 128))) ++mismatched;
    }
    return {mismatched == 0, std::to_string(mismatched) + " of 50 boxes differ from the half-plane oracle"};
}

Outcome c6_attention() {
    using conditioning::DecoupledWeights;
    torch::manual_seed(106);
    const auto o = torch::TensorOptions().dtype(torch::kFloat64);
    const int64_t c = 8, d = 8;
    auto rand_w = [&] {
        return DecoupledWeights{torch::randn({c, d}, o) * 0.5, torch::randn({d, d}, o) * 0.5,
                                torch::randn({d, c}, o) * 0.5, torch::randn({d, d}, o) * 0.5,
                                torch::randn({d, c}, o) * 0.5};
    };
    const auto q = torch::randn({2, 5, c}, o);
    const auto type = torch::randn({2, 1, d}, o), ref = torch::randn({2, 7, d}, o);

    auto w0 = rand_w();
    w0.w_v2.zero_();
    const double collapse = (conditioning::decoupled_cross_attention(q, type, ref, w0, 2) -
                             conditioning::decoupled_cross_attention(q, type, {}, w0, 2))
                                .abs()
                                .max()
                                .item<double>();

    auto w = rand_w();
    const auto probe = torch::randn({2, 5, c}, o);
    auto objective = [&](const DecoupledWeights& ww) {
        return (conditioning::decoupled_cross_attention(q, type, ref, ww, 2) * probe).sum();
    };
    w.w_k2.requires_grad_(true);
    objective(w).backward();
    const auto grad = w.w_k2.grad().clone();
    w.w_k2 = w.w_k2.detach();
    const double h = 1e-4;
    double worst = 0.0;
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) {
            auto wp = w, wm = w;
            wp.w_k2 = w.w_k2.clone();
            wm.w_k2 = w.w_k2.clone();
            wp.w_k2[i][j] += h;
            wm.w_k2[i][j] -= h;
            const double fd = (objective(wp).item<double>() - objective(wm).item<double>()) / (2 * h);
            const double g = grad[i][j].item<double>();
            worst = std::max(worst, std::abs(fd - g) / std::max(1e-6, std::abs(g)));
        }
    return {collapse <= 1e-6 && worst < 1e-4,
            "collapse diff " + fmt(collapse) + ", reference-key gradient rel error " + fmt(worst)};
}

Outcome c7_control_identity() {
    torch::manual_seed(107);
    diffusion::Denoiser net(diffusion::DenoiserConfig{});
    net->eval();
    torch::NoGradGuard ng;
    double worst = 0.0;
    for (int trial = 0; trial < 3; ++trial) {
        const int64_t B = 2, S = 64;
        const auto z = torch::randn({B, 3, S, S});
        const auto t = torch::randint(0, 1000, {B}, torch::kInt64);
        const auto control = diffusion::make_control(torch::rand({B, 3, S, S}),
                                                     (torch::rand({B, 1, S, S}) > 0.5).to(torch::kFloat32),
                                                     (torch::rand({B, 1, S, S}) > 0.5).to(torch::kFloat32));
        const auto bundle = net->condition(torch::rand({B, 3, 32, 32}), torch::randint(0, 2, {B}, torch::kInt64));
        const auto a = net(z, t, control, bundle);
        const auto b = net(z, t, torch::zeros_like(control), bundle);
        const auto c = net(z, t, torch::Tensor(), bundle);
        worst = std::max({worst, (a - b).abs().max().item<double>(), (a - c).abs().max().item<double>()});
    }
    return {worst <= 1e-6, "max output change under control input " + fmt(worst)};
}

Outcome c8_moments() {
    torch::manual_seed(108);
    const auto s = diffusion::NoiseSchedule::linear();
    const auto x0 = torch::rand({3, 8, 8}, torch::kFloat64) * 2 - 1;
    double worst = 0.0;
    for (int t : {s.T / 4, s.T / 2, 3 * s.T / 4}) {
        const auto eps = torch::randn({10000, 3, 8, 8}, torch::kFloat64);
        const auto z = diffusion::add_noise(x0.expand({10000, 3, 8, 8}), t, eps, s);
        const double expected = 1.0 - s.alpha_bar[t];
        worst = std::max(worst, std::abs(z.var(0).mean().item<double>() - expected) / expected);
    }
    return {worst < 0.02, "max relative variance error " + fmt(worst) + " at t = T/4, T/2, 3T/4"};
}

Outcome c12_metrics() {
    std::mt19937_64 rng(112);
    std::uniform_int_distribution<int> k(0, 190);
    dataset::DataTuple tuple;
    for (std::uint64_t seed = 1;; ++seed) {
        std::mt19937_64 r(seed);
        try {
            tuple = dataset::generate_scene(dataset::random_scene_spec(r, dataset::ReflectionType::Vertical));
            break;
        } catch (const reflgen::Error&) {
        }
    }
    const auto m = evaluation::score(tuple.target, tuple, evaluation::EvalOptions{});
    const bool identical = m.gr == 0.0 && m.lr == 0.0 && m.gs == 1.0 && m.ls == 1.0;

    // Dyadic values so the float storage holds both images exactly.
    Image base(48, 48, 3);
    for (auto& v : base.data) v = static_cast<float>(k(rng)) / 256.0f;
    double worst = 0.0;
    for (double offset : {1.0 / 64, 10.0 / 256, 0.25}) {
        Image shifted = base;
        for (auto& v : shifted.data) v += static_cast<float>(offset);
        worst = std::max(worst, std::abs(evaluation::rmse(shifted, base) - 255.0 * offset));
    }
    return {identical && worst <= 1e-9, "identical: GR " + fmt(m.gr) + " LR " + fmt(m.lr) + " GS " + fmt(m.gs) +
                                            " LS " + fmt(m.ls) + "; offset RMSE error " + fmt(worst)};
}

fs::path train_manifest(const Settings& s) { return s.work / "data" / "train_manifest.json"; }
fs::path test_manifest(const Settings& s) { return s.work / "data" / "test_manifest.json"; }
fs::path aux_ckpt(const Settings& s) { return s.work / "aux" / "aux.ckpt"; }

bool ensure_data(const Settings& s, std::string& why) {
    if (fs::exists(test_manifest(s))) return true;
    if (cli_run(s, {"--deterministic", "dataset", "generate", "--n", std::to_string(s.n), "--seed", "2026",
                    "--type_ratio", "0.9", "--out", (s.work / "data").string()}) != 0 ||
        cli_run(s, {"dataset", "split", "--manifest", (s.work / "data" / "manifest.json").string(),
                    "--test_fraction", fmt(s.test_fraction), "--seed", "1"}) != 0) {
        why = "dataset generation failed (see cli.log)";
        return false;
    }
    return true;
}

bool ensure_aux(const Settings& s, std::string& why) {
    if (!ensure_data(s, why)) return false;
    if (fs::exists(aux_ckpt(s))) return true;
    if (cli_run(s, {"--deterministic", "train-aux", "--train", train_manifest(s).string(), "--epochs",
                    std::to_string(s.aux_epochs), "--seed", "9", "--out", (s.work / "aux").string()}) != 0) {
        why = "train-aux failed (see cli.log)";
        return false;
    }
    return true;
}

Outcome c9_aux(const Settings& s) {
    std::string why;
    if (!ensure_aux(s, why)) return {false, why};
    const auto train = dataset::read_manifest(train_manifest(s));
    const auto test = dataset::read_manifest(test_manifest(s));
    std::size_t others = 0;
    for (const auto& e : train.entries) others += e.type_label == dataset::ReflectionType::Others;
    auto aux = aux_encoder::AuxModel::from_checkpoint(checkpoint::load(aux_ckpt(s), "aux"));
    const auto ev = aux_encoder::evaluate_aux(aux, dataset::load_all(test));
    const bool ok = train.entries.size() >= 2000 && ev.type_accuracy >= 0.90 && ev.mean_kfiou >= 0.20;
    return {ok, "train " + std::to_string(train.entries.size()) + " (" + std::to_string(others) +
                    " others), held-out " + std::to_string(ev.n) + ": type accuracy " + fmt(ev.type_accuracy) +
                    ", mean KFIoU " + fmt(ev.mean_kfiou)};
}

Outcome c10_end_to_end(const Settings& s) {
    std::string why;
    if (!ensure_aux(s, why)) return {false, why};
    const fs::path model = s.work / "diffusion" / "diffusion.ckpt";
    if (cli_run(s, {"--deterministic", "train-diffusion", "--train", train_manifest(s).string(), "--aux",
                    aux_ckpt(s).string(), "--train_steps", std::to_string(s.diffusion_steps), "--seed", "11",
                    "--out", (s.work / "diffusion").string()}) != 0) {
        return {false, "train-diffusion failed (see cli.log)"};
    }
    const int rc = cli_run(s, {"--deterministic", "evaluate", "--test", test_manifest(s).string(), "--aux",
                               aux_ckpt(s).string(), "--model", model.string(), "--out",
                               (s.work / "evaluate").string()});
    const auto report = read_json(s.work / "evaluate" / "report.json");
    const auto n = report["model"]["n"].get<std::size_t>();
    const double win = report["win_rate"].get<double>();
    const double gr_out = report["model"]["GR_outside"].get<double>();
    const bool ok = rc == 0 && s.diffusion_steps >= 20000 && n >= 100 && win >= 0.80 && gr_out <= 15.0;
    return {ok, std::to_string(s.diffusion_steps) + " steps, " + std::to_string(n) + " held-out tuples: LR below baseline on " +
                    fmt(100.0 * win, 3) + "% (model LR " + fmt(report["model"]["LR"].get<double>()) +
                    ", baseline LR " + fmt(report["baseline"]["LR"].get<double>()) + "), GR outside mask " +
                    fmt(gr_out)};
}

Outcome c11_ablation(const Settings& s) {
    std::string why;
    if (!ensure_aux(s, why)) return {false, why};
    const fs::path out = s.work / "ablate";
    const int rc = cli_run(s, {"--deterministic", "ablate", "--train", train_manifest(s).string(), "--test",
                               test_manifest(s).string(), "--aux", aux_ckpt(s).string(), "--train_steps",
                               std::to_string(s.ablation_steps), "--seed", "11", "--out", out.string()});
    if (!fs::exists(out / "ablation.json")) return {false, "ablate produced no report (see cli.log)"};
    const auto report = read_json(out / "ablation.json");
    bool columns = report["rows"].size() == 5;
    std::ostringstream lrs;
    for (const auto& row : report["rows"]) {
        for (const char* key : {"GR", "LR", "GS", "LS"}) columns = columns && row.contains(key);
        lrs << " " << row["label"].get<std::string>() << "=" << fmt(row["LR"].get<double>());
    }
    const bool directional = report["directional_check"].get<bool>();
    return {rc == 0 && columns,
            std::to_string(report["rows"].size()) + " rows x GR/LR/GS/LS; LR" + lrs.str() +
                "; directional check (soft): " + (directional ? "PASS" : "FAIL")};
}

}  // namespace

int main(int argc, char** argv) {
    Settings s;
    const char* root = std::getenv(cli::kOutputRootEnv);
    std::string work = (fs::path(root != nullptr && *root != '\0' ? root : "runs") / "acceptance").string();
    std::vector<int> only;
    CLI::App app{"Acceptance criteria 1-12", "reflgen_acceptance"};
    app.add_option("--work", work, "Working directory for datasets, checkpoints and reports")->capture_default_str();
    app.add_option("--n", s.n, "Synthetic tuples to generate")->capture_default_str();
    app.add_option("--test_fraction", s.test_fraction)->capture_default_str();
    app.add_option("--aux_epochs", s.aux_epochs)->capture_default_str();
    app.add_option("--diffusion_steps", s.diffusion_steps)->capture_default_str();
    app.add_option("--ablation_steps", s.ablation_steps)->capture_default_str();
    app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 12));
    app.add_flag("--fresh", "Delete the working directory first so every model is trained anew");
    CLI11_PARSE(app, argc, argv);
    s.work = work;
    s.only = {only.begin(), only.end()};
    if (app.count("--fresh") > 0) fs::remove_all(s.work);
    fs::create_directories(s.work);
    torch::set_num_threads(1);

    using Check = std::function<Outcome()>;
    const std::vector<std::pair<int, Check>> checks{
        {1, c1_round_trip},
        {2, c2_kfiou_ceiling},
        {3, c3_kfiou_oracle},
        {4, c4_loss_floor},
        {5, c5_rasterization},
        {6, c6_attention},
        {7, c7_control_identity},
        {8, c8_moments},
        {9, [&] { return c9_aux(s); }},
        {10, [&] { return c10_end_to_end(s); }},
        {11, [&] { return c11_ablation(s); }},
        {12, c12_metrics},
    };
    // Stated runtime budgets in seconds.
    const std::map<int, double> budget{{1, 1}, {2, 1}, {3, 30}, {4, 1}, {5, 5}, {6, 10}, {7, 10}, {8, 30}, {9, 7200}, {10, 14400}};

    int failures = 0;
    json summary = json::array();
    for (const auto& [id, check] : checks) {
        if (!s.only.empty() && !s.only.count(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (budget.count(id) && secs > budget.at(id)) {
            o.pass = false;
            o.detail += "; over the " + fmt(budget.at(id)) + " s budget";
        }
        failures += o.pass ? 0 : 1;
        std::printf("criterion %2d: %s  %s (%.1f s)\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
        std::fflush(stdout);
        summary.push_back({{"criterion", id}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", secs}});
    }
    std::ofstream(s.work / "acceptance.json") << summary.dump(2) << "\n";
    return failures == 0 ? 0 : 1;
}
