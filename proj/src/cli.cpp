// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/cli.h"

#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "reflgen/aux_encoder.h"
#include "reflgen/checkpoint.h"
#include "reflgen/dataset.h"
#include "reflgen/diffusion.h"
#include "reflgen/errors.h"
#include "reflgen/evaluation.h"
#include "reflgen/image.h"

namespace reflgen::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct GenerateArgs {
    int n = 100;
    std::uint64_t seed = 0;
    double type_ratio = 0.9;
    int height = 64;
    int width = 64;
    std::string out;
};

struct SplitArgs {
    std::string manifest;
    double test_fraction = 0.1;
    std::uint64_t seed = 0;
};

struct TrainAuxArgs {
    std::string train;
    std::string val;
    std::string out;
    aux_encoder::AuxConfig cfg;
};

struct TrainDiffusionArgs {
    std::string train;
    std::string aux;
    std::string out;
    diffusion::DenoiserConfig model;
    diffusion::DiffusionTrainConfig train_cfg;
};

struct InferArgs {
    std::string aux;
    std::string model;
    std::string composite;
    std::string fg_mask;
    std::vector<std::uint64_t> seeds{0};
    double strength = -1.0;  // negative: take the checkpoint's value
    int steps = -1;
    std::string out;
};

struct EvalArgs {
    std::string local_rmse = "mask";
    std::string local_ssim = "bbox";
    evaluation::EvalOptions opts;

    evaluation::EvalOptions resolved() const {
        evaluation::EvalOptions o = opts;
        o.local_rmse = evaluation::parse_local_region(local_rmse);
        o.local_ssim = evaluation::parse_local_region(local_ssim);
        return o;
    }
};

struct EvaluateArgs {
    std::string test;
    std::string aux;
    std::string model;
    std::string out;
    EvalArgs eval;
};

struct AblateArgs {
    std::string train;
    std::string test;
    std::string aux;
    std::string out;
    diffusion::DenoiserConfig model;
    diffusion::DiffusionTrainConfig train_cfg;
    EvalArgs eval;
};

void add_eval_options(CLI::App* cmd, EvalArgs& a) {
    cmd->add_option("--strength", a.opts.strength, "Re-noising strength in (0, 1]")->capture_default_str();
    cmd->add_option("--steps", a.opts.steps, "Sampler steps")->capture_default_str();
    cmd->add_option("--eval_seed", a.opts.seed, "Sampling seed; tuple i uses eval_seed + i")->capture_default_str();
    cmd->add_option("--local_rmse", a.local_rmse, "Local RMSE region")
        ->check(CLI::IsMember({"mask", "bbox"}))
        ->capture_default_str();
    cmd->add_option("--local_ssim", a.local_ssim, "Local SSIM region")
        ->check(CLI::IsMember({"mask", "bbox"}))
        ->capture_default_str();
    cmd->add_option("--eval_batch_size", a.opts.batch_size, "Tuples per sampling batch")->capture_default_str();
}

void add_model_options(CLI::App* cmd, diffusion::DenoiserConfig& m, bool sampler) {
    cmd->add_option("--base_channels", m.base_channels)->capture_default_str();
    cmd->add_option("--channel_multipliers", m.channel_multipliers)->capture_default_str();
    cmd->add_option("--attention_resolutions", m.attention_resolutions)->capture_default_str();
    cmd->add_option("--image_size", m.image_size)->capture_default_str();
    cmd->add_option("--context_dim", m.context_dim)->capture_default_str();
    cmd->add_option("--heads", m.heads)->capture_default_str();
    cmd->add_option("--reference_size", m.reference_size)->capture_default_str();
    cmd->add_option("--T", m.T, "Diffusion timesteps")->capture_default_str();
    if (!sampler) return;
    cmd->add_option("--sampler_steps", m.sampler_steps)->capture_default_str();
    cmd->add_option("--strength", m.strength)->capture_default_str();
}

void add_flag_options(CLI::App* cmd, diffusion::DenoiserConfig& m) {
    cmd->add_option("--use_box_mask", m.use_box_mask)->capture_default_str();
    cmd->add_option("--use_ref_features", m.use_ref_features)->capture_default_str();
    cmd->add_option("--use_type_embedding", m.use_type_embedding)->capture_default_str();
}

void add_train_options(CLI::App* cmd, diffusion::DiffusionTrainConfig& t) {
    cmd->add_option("--train_steps", t.steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--batch_size", t.batch_size)->capture_default_str();
    cmd->add_option("--learning_rate", t.learning_rate)->capture_default_str();
    cmd->add_option("--warmup_steps", t.warmup_steps)->capture_default_str();
    cmd->add_option("--ema_decay", t.ema_decay)->capture_default_str();
    cmd->add_option("--grad_clip", t.grad_clip)->capture_default_str();
    cmd->add_option("--augment", t.augment)->capture_default_str();
    cmd->add_option("--use_gt_boxes", t.use_gt_boxes)->capture_default_str();
    cmd->add_option("--log_every", t.log_every)->capture_default_str();
}

fs::path output_dir(const std::string& flag, const std::string& command) {
    if (!flag.empty()) return flag;
    const char* root = std::getenv(kOutputRootEnv);
    return fs::path(root != nullptr && *root != '\0' ? root : "runs") / command;
}

// Section header plus every option of the subcommand except the output location, so
// two runs that differ only in where they write produce identical files.
void persist_config(const CLI::App* cmd, const std::string& section, const fs::path& dir, bool deterministic) {
    fs::create_directories(dir);
    std::istringstream dump(cmd->config_to_str(true, false));
    std::ostringstream body;
    body << "deterministic=" << (deterministic ? "true" : "false") << "\n[" << section << "]\n";
    std::string line;
    while (std::getline(dump, line)) {
        if (line.rfind("out=", 0) == 0) continue;
        body << line << "\n";
    }
    std::string name = section;
    for (char& c : name) {
        if (c == '.' || c == '-') c = '_';
    }
    std::ofstream f(dir / ("resolved_" + name + ".ini"), std::ios::binary);
    if (!f) throw Error(ErrorCode::Io, "cannot write resolved config in " + dir.string());
    f << body.str();
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::Io, "cannot write " + path.string());
    f << text;
}

std::vector<dataset::DataTuple> load_manifest_tuples(const std::string& path) {
    if (path.empty()) return {};
    return dataset::load_all(dataset::read_manifest(path));
}

aux_encoder::AuxModel load_aux(const std::string& path) {
    return aux_encoder::AuxModel::from_checkpoint(checkpoint::load(path, "aux"));
}

diffusion::DiffusionModel load_diffusion(const std::string& path) {
    return diffusion::DiffusionModel::from_checkpoint(checkpoint::load(path, "diffusion"));
}

json loss_curve_json(const diffusion::DiffusionTrainResult& r) {
    json curve = json::array();
    for (const auto& p : r.loss_curve) curve.push_back({{"step", p.step}, {"loss", p.loss}});
    return {{"initial_loss", r.initial_loss}, {"loss_curve", curve}};
}

int cmd_generate(const GenerateArgs& a, const fs::path& out_dir, std::ostream& out) {
    dataset::SampleOptions opts;
    opts.n = a.n;
    opts.seed = a.seed;
    opts.type_ratio = a.type_ratio;
    opts.height = a.height;
    opts.width = a.width;
    opts.out_dir = out_dir;
    const auto manifest = dataset::sample_dataset(opts);
    out << "wrote " << manifest.entries.size() << " tuples to " << out_dir.string() << "\n";
    return kOk;
}

int cmd_split(const SplitArgs& a, std::ostream& out) {
    const auto manifest = dataset::read_manifest(a.manifest);
    const auto [train, test] = dataset::split_dataset(manifest, a.test_fraction, a.seed);
    const fs::path dir = fs::path(a.manifest).parent_path();
    dataset::write_manifest(train, dir / "train_manifest.json");
    dataset::write_manifest(test, dir / "test_manifest.json");
    out << "train " << train.entries.size() << " / test " << test.entries.size() << " in " << dir.string() << "\n";
    return kOk;
}

int cmd_train_aux(const TrainAuxArgs& a, const fs::path& out_dir, std::ostream& out) {
    a.cfg.validate();
    const auto train = load_manifest_tuples(a.train);
    const auto val = load_manifest_tuples(a.val);
    auto result = aux_encoder::train_aux(train, val, a.cfg, [&](const aux_encoder::AuxEpochMetrics& m) {
        out << "epoch " << m.epoch << " loss " << m.train_loss << " train_acc " << m.train.type_accuracy
            << " train_kfiou " << m.train.mean_kfiou;
        if (m.val.n > 0) out << " val_acc " << m.val.type_accuracy << " val_kfiou " << m.val.mean_kfiou;
        out << "\n";
    });
    checkpoint::save(result.checkpoint, out_dir / "aux.ckpt");
    json hist = json::array();
    for (const auto& m : result.history) {
        hist.push_back({{"epoch", m.epoch},
                        {"train_loss", m.train_loss},
                        {"train_type_accuracy", m.train.type_accuracy},
                        {"train_mean_kfiou", m.train.mean_kfiou},
                        {"val_type_accuracy", m.val.type_accuracy},
                        {"val_mean_kfiou", m.val.mean_kfiou},
                        {"val_n", m.val.n}});
    }
    write_text(out_dir / "aux_history.json", hist.dump(2) + "\n");
    out << "checkpoint " << (out_dir / "aux.ckpt").string() << "\n";
    return kOk;
}

diffusion::DiffusionTrainResult train_one(const std::vector<dataset::DataTuple>& train, aux_encoder::AuxModel* aux,
                                          const diffusion::DenoiserConfig& model,
                                          const diffusion::DiffusionTrainConfig& cfg, std::ostream& out,
                                          const std::string& tag) {
    return diffusion::train_diffusion(train, aux, model, cfg, [&](const diffusion::LossPoint& p) {
        out << tag << "step " << p.step << " loss " << p.loss << "\n" << std::flush;
    });
}

int cmd_train_diffusion(TrainDiffusionArgs a, const fs::path& out_dir, std::ostream& out) {
    a.train_cfg.seed = a.model.seed;
    const auto train = load_manifest_tuples(a.train);
    std::optional<aux_encoder::AuxModel> aux;
    if (!a.aux.empty()) aux.emplace(load_aux(a.aux));
    if (!aux && !a.train_cfg.use_gt_boxes) {
        throw Error(ErrorCode::InvalidArgument, "--aux is required unless use_gt_boxes is true");
    }
    auto result = train_one(train, aux ? &*aux : nullptr, a.model, a.train_cfg, out, "");
    checkpoint::save(result.checkpoint, out_dir / "diffusion.ckpt");
    write_text(out_dir / "loss_curve.json", loss_curve_json(result).dump(2) + "\n");
    out << "initial loss " << result.initial_loss << "\ncheckpoint " << (out_dir / "diffusion.ckpt").string()
        << "\n";
    return kOk;
}

int cmd_infer(const InferArgs& a, const fs::path& out_dir, std::ostream& out) {
    auto aux = load_aux(a.aux);
    auto model = load_diffusion(a.model);
    const Image composite = read_png_image(a.composite);
    const Mask fg = read_png_mask(a.fg_mask);
    const double strength = a.strength < 0 ? model.config.strength : a.strength;
    const int steps = a.steps < 0 ? model.config.sampler_steps : a.steps;
    const auto prepared = diffusion::prepare_inference(composite, fg, aux, model.config.reference_size);
    const std::vector<diffusion::PreparedSample> batch(a.seeds.size(), prepared);
    const auto images = diffusion::infer_prepared(model, batch, a.seeds, strength, steps);
    const std::string stem = fs::path(a.composite).stem().string();
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < images.size(); ++i) {
        const fs::path p = out_dir / (stem + "_seed" + std::to_string(a.seeds[i]) + ".png");
        write_png(p, images[i]);
        out << p.string() << "\n";
    }
    return kOk;
}

int report_failures(const evaluation::EvaluationResult& r, std::ostream& err) {
    const auto failed = r.failed_ids();
    if (failed.empty()) return kOk;
    err << "error: " << failed.size() << " tuple(s) failed:";
    for (const auto& rec : r.records) {
        if (!rec.ok) err << "\n  " << rec.tuple_id << ": " << rec.error;
    }
    err << "\n";
    return kRuntimeError;
}

int cmd_evaluate(const EvaluateArgs& a, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
    const auto opts = a.eval.resolved();
    auto aux = load_aux(a.aux);
    auto model = load_diffusion(a.model);
    const auto samples = evaluation::load_samples(dataset::read_manifest(a.test));
    const auto result = evaluation::evaluate_models(samples, aux, model, opts, "model");
    const std::string table =
        evaluation::format_table({result.model, result.baseline, evaluation::published_reference()}, opts);
    json report = result.to_json();
    report["reference"] = evaluation::published_reference().to_json();
    write_text(out_dir / "report.json", report.dump(2) + "\n");
    write_text(out_dir / "report.txt", table + "win rate " + std::to_string(result.win_rate) + "\n");
    out << table << "win rate " << result.win_rate << "\n";
    return report_failures(result, err);
}

struct AblationRow {
    const char* label;
    bool box;
    bool features;
    bool type;
};

constexpr AblationRow kAblationRows[] = {
    {"base", false, false, false},
    {"+box", true, false, false},
    {"+features", false, true, false},
    {"+box+features", true, true, false},
    {"full", true, true, true},
};

int cmd_ablate(AblateArgs a, const fs::path& out_dir, std::ostream& out, std::ostream& err) {
    a.train_cfg.seed = a.model.seed;
    const auto opts = a.eval.resolved();
    auto aux = load_aux(a.aux);
    const auto train = load_manifest_tuples(a.train);
    const auto samples = evaluation::load_samples(dataset::read_manifest(a.test));

    std::vector<evaluation::MetricsReport> rows;
    json rows_json = json::array();
    int status = kOk;
    for (const auto& row : kAblationRows) {
        diffusion::DenoiserConfig cfg = a.model;
        cfg.use_box_mask = row.box;
        cfg.use_ref_features = row.features;
        cfg.use_type_embedding = row.type;
        out << "== " << row.label << "\n" << std::flush;
        auto trained = train_one(train, &aux, cfg, a.train_cfg, out, std::string(row.label) + " ");
        std::string dir_name = row.label;
        for (char& c : dir_name) {
            if (c == '+') c = '_';
        }
        checkpoint::save(trained.checkpoint, out_dir / dir_name / "diffusion.ckpt");
        auto model = diffusion::DiffusionModel::from_checkpoint(trained.checkpoint);
        const auto result = evaluation::evaluate_models(samples, aux, model, opts, row.label);
        rows.push_back(result.model);
        json rj = result.model.to_json();
        rj["use_box_mask"] = row.box;
        rj["use_ref_features"] = row.features;
        rj["use_type_embedding"] = row.type;
        rj["win_rate"] = result.win_rate;
        rj["final_loss"] = trained.loss_curve.empty() ? trained.initial_loss : trained.loss_curve.back().loss;
        rows_json.push_back(rj);
        if (report_failures(result, err) != kOk) status = kRuntimeError;
    }

    const auto& full = rows.back();
    bool directional = true;
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) directional = directional && full.lr <= rows[i].lr;
    const std::string verdict = std::string("directional check (full LR <= every ablated LR): ") +
                                (directional ? "PASS" : "FAIL") + " (soft)\n";
    const std::string table = evaluation::format_table(rows, opts);
    json report = {{"rows", rows_json}, {"directional_check", directional}, {"options", opts.to_json()}};
    write_text(out_dir / "ablation.json", report.dump(2) + "\n");
    write_text(out_dir / "ablation.txt", table + verdict);
    out << table << verdict;
    return status;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Reflection generation: dataset, training, inference and evaluation", "reflgen"};
    app.set_config("--config", "", "INI file with one section per command; flags override it");
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.require_subcommand(1);
    app.fallthrough();
    bool deterministic = false;
    app.add_flag("--deterministic", deterministic, "Single thread and deterministic kernels");

    auto* ds = app.add_subcommand("dataset", "Synthetic dataset tools");
    ds->require_subcommand(1);

    GenerateArgs gen;
    auto* gen_cmd = ds->add_subcommand("generate", "Render synthetic tuples and a manifest");
    gen_cmd->add_option("--n", gen.n, "Number of tuples")->check(CLI::PositiveNumber)->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed)->capture_default_str();
    gen_cmd->add_option("--type_ratio", gen.type_ratio, "Fraction of vertical reflections")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    gen_cmd->add_option("--height", gen.height)->capture_default_str();
    gen_cmd->add_option("--width", gen.width)->capture_default_str();
    gen_cmd->add_option("--out", gen.out, "Dataset directory");

    SplitArgs split;
    auto* split_cmd = ds->add_subcommand("split", "Write train/test manifests next to a manifest");
    split_cmd->add_option("--manifest", split.manifest)->required();
    split_cmd->add_option("--test_fraction", split.test_fraction)->check(CLI::Range(0.0, 1.0))->capture_default_str();
    split_cmd->add_option("--seed", split.seed)->capture_default_str();

    TrainAuxArgs ta;
    auto* ta_cmd = app.add_subcommand("train-aux", "Train the box and type predictor");
    ta_cmd->add_option("--train", ta.train, "Training manifest")->required();
    ta_cmd->add_option("--val", ta.val, "Validation manifest");
    ta_cmd->add_option("--out", ta.out, "Output directory");
    ta_cmd->add_option("--backbone", ta.cfg.backbone)->check(CLI::IsMember({"residual", "resnet18"}))->capture_default_str();
    ta_cmd->add_option("--backbone_width", ta.cfg.backbone_width)->capture_default_str();
    ta_cmd->add_option("--depth", ta.cfg.depth)->capture_default_str();
    ta_cmd->add_option("--activation", ta.cfg.activation)->check(CLI::IsMember({"relu", "silu"}))->capture_default_str();
    ta_cmd->add_option("--learning_rate", ta.cfg.learning_rate)->capture_default_str();
    ta_cmd->add_option("--epochs", ta.cfg.epochs)->capture_default_str();
    ta_cmd->add_option("--batch_size", ta.cfg.batch_size)->capture_default_str();
    ta_cmd->add_option("--seed", ta.cfg.seed)->capture_default_str();
    ta_cmd->add_option("--augment", ta.cfg.augment)->capture_default_str();
    ta_cmd->add_option("--height", ta.cfg.height)->capture_default_str();
    ta_cmd->add_option("--width", ta.cfg.width)->capture_default_str();

    TrainDiffusionArgs td;
    auto* td_cmd = app.add_subcommand("train-diffusion", "Train the conditioned denoiser");
    td_cmd->add_option("--train", td.train, "Training manifest")->required();
    td_cmd->add_option("--aux", td.aux, "Aux checkpoint");
    td_cmd->add_option("--out", td.out, "Output directory");
    td_cmd->add_option("--seed", td.model.seed)->capture_default_str();
    add_model_options(td_cmd, td.model, true);
    add_flag_options(td_cmd, td.model);
    add_train_options(td_cmd, td.train_cfg);

    InferArgs inf;
    auto* inf_cmd = app.add_subcommand("infer", "Generate reflections for one composite");
    inf_cmd->add_option("--aux", inf.aux, "Aux checkpoint")->required();
    inf_cmd->add_option("--model", inf.model, "Diffusion checkpoint")->required();
    inf_cmd->add_option("--composite", inf.composite, "Composite PNG")->required();
    inf_cmd->add_option("--fg_mask", inf.fg_mask, "Foreground mask PNG")->required();
    inf_cmd->add_option("--seed", inf.seeds, "One output per seed")->capture_default_str();
    inf_cmd->add_option("--strength", inf.strength, "Negative uses the checkpoint value")->capture_default_str();
    inf_cmd->add_option("--steps", inf.steps, "Negative uses the checkpoint value")->capture_default_str();
    inf_cmd->add_option("--out", inf.out, "Output directory");

    EvaluateArgs ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "Score a model on a test manifest");
    ev_cmd->add_option("--test", ev.test, "Test manifest")->required();
    ev_cmd->add_option("--aux", ev.aux, "Aux checkpoint")->required();
    ev_cmd->add_option("--model", ev.model, "Diffusion checkpoint")->required();
    ev_cmd->add_option("--out", ev.out, "Output directory");
    add_eval_options(ev_cmd, ev.eval);

    AblateArgs ab;
    ab.train_cfg.steps = 2000;
    auto* ab_cmd = app.add_subcommand("ablate", "Train and score the conditioning flag matrix");
    ab_cmd->add_option("--train", ab.train, "Training manifest")->required();
    ab_cmd->add_option("--test", ab.test, "Test manifest")->required();
    ab_cmd->add_option("--aux", ab.aux, "Aux checkpoint")->required();
    ab_cmd->add_option("--out", ab.out, "Output directory");
    ab_cmd->add_option("--seed", ab.model.seed)->capture_default_str();
    // Sampling settings come from the evaluation options here.
    add_model_options(ab_cmd, ab.model, false);
    add_train_options(ab_cmd, ab.train_cfg);
    add_eval_options(ab_cmd, ab.eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsageError;
    }

    if (deterministic) {
        torch::set_num_threads(1);
        at::globalContext().setDeterministicAlgorithms(true, false);
    }

    try {
        if (*gen_cmd) {
            const fs::path dir = output_dir(gen.out, "dataset");
            const int rc = cmd_generate(gen, dir, out);
            persist_config(gen_cmd, "dataset.generate", dir, deterministic);
            return rc;
        }
        if (*split_cmd) {
            persist_config(split_cmd, "dataset.split", fs::path(split.manifest).parent_path(), deterministic);
            return cmd_split(split, out);
        }
        if (*ta_cmd) {
            const fs::path dir = output_dir(ta.out, "train-aux");
            persist_config(ta_cmd, "train-aux", dir, deterministic);
            return cmd_train_aux(ta, dir, out);
        }
        if (*td_cmd) {
            const fs::path dir = output_dir(td.out, "train-diffusion");
            td.model.validate();
            td.train_cfg.validate();
            persist_config(td_cmd, "train-diffusion", dir, deterministic);
            return cmd_train_diffusion(td, dir, out);
        }
        if (*inf_cmd) {
            const fs::path dir = output_dir(inf.out, "infer");
            persist_config(inf_cmd, "infer", dir, deterministic);
            return cmd_infer(inf, dir, out);
        }
        if (*ev_cmd) {
            const fs::path dir = output_dir(ev.out, "evaluate");
            persist_config(ev_cmd, "evaluate", dir, deterministic);
            return cmd_evaluate(ev, dir, out, err);
        }
        if (*ab_cmd) {
            const fs::path dir = output_dir(ab.out, "ablate");
            ab.model.validate();
            ab.train_cfg.validate();
            persist_config(ab_cmd, "ablate", dir, deterministic);
            return cmd_ablate(ab, dir, out, err);
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return kUsageError;
}

}  // namespace reflgen::cli
