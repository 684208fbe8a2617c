// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include "reflgen/evaluation.h"

#include <opencv2/imgproc.hpp>

#include <cmath>
#include <iomanip>
#include <sstream>

#include "reflgen/errors.h"

namespace reflgen::evaluation {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = (0.01 * 255.0) * (0.01 * 255.0);
constexpr double kC2 = (0.03 * 255.0) * (0.03 * 255.0);

void check_shapes(const Image& a, const Image& b, const Mask* region) {
    if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, "metric inputs differ in shape");
    if (region && (region->height != a.height || region->width != a.width))
        throw Error(ErrorCode::ShapeMismatch, "metric region differs in shape from the images");
    if (region && region->empty()) throw Error(ErrorCode::EmptyRegion, "metric region is empty");
}

cv::Mat channel(const Image& img, int c, const PixelRect& r) {
    cv::Mat m(r.rows(), r.cols(), CV_64F);
    for (int i = 0; i < r.rows(); ++i)
        for (int j = 0; j < r.cols(); ++j) m.at<double>(i, j) = 255.0 * img.at(r.row0 + i, r.col0 + j, c);
    return m;
}

double ssim_formula(double mx, double my, double vx, double vy, double cxy) {
    return ((2 * mx * my + kC1) * (2 * cxy + kC2)) / ((mx * mx + my * my + kC1) * (vx + vy + kC2));
}

// One window with equal weights over the whole patch.
double uniform_ssim(const cv::Mat& x, const cv::Mat& y) {
    const double n = static_cast<double>(x.total());
    const double mx = cv::sum(x)[0] / n, my = cv::sum(y)[0] / n;
    const double vx = cv::sum(x.mul(x))[0] / n - mx * mx;
    const double vy = cv::sum(y.mul(y))[0] / n - my * my;
    const double cxy = cv::sum(x.mul(y))[0] / n - mx * my;
    return ssim_formula(mx, my, vx, vy, cxy);
}

// Map of per-window scores at every valid window centre (size (H-10) x (W-10)).
cv::Mat ssim_map(const cv::Mat& x, const cv::Mat& y) {
    const cv::Mat g = cv::getGaussianKernel(kWindow, kSigma, CV_64F);
    const cv::Mat kernel = g * g.t();
    auto filt = [&](const cv::Mat& m) {
        cv::Mat out;
        cv::filter2D(m, out, CV_64F, kernel, cv::Point(-1, -1), 0.0, cv::BORDER_CONSTANT);
        const int h = kWindow / 2;
        return cv::Mat(out, cv::Rect(h, h, m.cols - 2 * h, m.rows - 2 * h)).clone();
    };
    const cv::Mat mx = filt(x), my = filt(y), xx = filt(x.mul(x)), yy = filt(y.mul(y)), xy = filt(x.mul(y));
    // Element-wise so that identical inputs give exactly 1 (matrix expressions may reassociate sums).
    cv::Mat map(mx.size(), CV_64F);
    for (int i = 0; i < map.rows; ++i)
        for (int j = 0; j < map.cols; ++j) {
            const double a = mx.at<double>(i, j), b = my.at<double>(i, j);
            map.at<double>(i, j) = ssim_formula(a, b, xx.at<double>(i, j) - a * a, yy.at<double>(i, j) - b * b,
                                                xy.at<double>(i, j) - a * b);
        }
    return map;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

double rmse(const Image& pred, const Image& gt, const Mask* region) {
    check_shapes(pred, gt, region);
    double acc = 0.0;
    std::size_t n = 0;
    for (int i = 0; i < pred.height; ++i)
        for (int j = 0; j < pred.width; ++j) {
            if (region && !region->at(i, j)) continue;
            for (int c = 0; c < pred.channels; ++c) {
                const double d = 255.0 * (static_cast<double>(pred.at(i, j, c)) - gt.at(i, j, c));
                acc += d * d;
            }
            n += static_cast<std::size_t>(pred.channels);
        }
    if (n == 0) throw Error(ErrorCode::EmptyRegion, "rmse over zero pixels");
    return std::sqrt(acc / static_cast<double>(n));
}

std::string_view to_string(LocalRegion r) { return r == LocalRegion::Mask ? "mask" : "bbox"; }

LocalRegion parse_local_region(std::string_view s) {
    if (s == "mask") return LocalRegion::Mask;
    if (s == "bbox") return LocalRegion::BoundingBox;
    throw Error(ErrorCode::InvalidArgument, "local region must be 'mask' or 'bbox', got '" + std::string(s) + "'");
}

SsimResult ssim(const Image& pred, const Image& gt, const Mask* region, LocalRegion mode) {
    check_shapes(pred, gt, region);
    const PixelRect full{0, 0, pred.height, pred.width};
    const PixelRect box = region ? mask_bounds(*region) : full;
    SsimResult res;
    std::vector<double> per_channel;
    const bool mask_mode = region && mode == LocalRegion::Mask;
    const PixelRect area = mask_mode ? full : box;
    const bool fits = area.rows() >= kWindow && area.cols() >= kWindow;

    for (int c = 0; c < pred.channels; ++c) {
        if (mask_mode && fits) {
            const cv::Mat map = ssim_map(channel(pred, c, full), channel(gt, c, full));
            const int h = kWindow / 2;
            double acc = 0.0;
            std::size_t n = 0;
            for (int i = 0; i < map.rows; ++i)
                for (int j = 0; j < map.cols; ++j)
                    if (region->at(i + h, j + h)) {
                        acc += map.at<double>(i, j);
                        ++n;
                    }
            if (n > 0) {
                per_channel.push_back(acc / static_cast<double>(n));
                continue;
            }
        } else if (fits) {
            const cv::Mat map = ssim_map(channel(pred, c, area), channel(gt, c, area));
            // cv::mean scales by a reciprocal, which is not exact.
            per_channel.push_back(cv::sum(map)[0] / static_cast<double>(map.total()));
            continue;
        }
        res.uniform_fallback = true;
        per_channel.push_back(uniform_ssim(channel(pred, c, box), channel(gt, c, box)));
    }
    res.value = mean_of(per_channel);
    return res;
}

nlohmann::json EvalOptions::to_json() const {
    return {{"strength", strength},
            {"steps", steps},
            {"seed", seed},
            {"local_rmse", std::string(to_string(local_rmse))},
            {"local_ssim", std::string(to_string(local_ssim))},
            {"batch_size", batch_size}};
}

TupleMetrics score(const Image& pred, const dataset::DataTuple& tuple, const EvalOptions& opts) {
    TupleMetrics m;
    const Mask& refl = tuple.refl_mask;
    m.gr = rmse(pred, tuple.target);
    if (opts.local_rmse == LocalRegion::Mask) {
        m.lr = rmse(pred, tuple.target, &refl);
    } else {
        const PixelRect r = mask_bounds(refl);
        Mask box(refl.height, refl.width);
        for (int i = r.row0; i < r.row1; ++i)
            for (int j = r.col0; j < r.col1; ++j) box.at(i, j) = 1;
        m.lr = rmse(pred, tuple.target, &box);
    }
    m.gs = ssim(pred, tuple.target).value;
    const auto ls = ssim(pred, tuple.target, &refl, opts.local_ssim);
    m.ls = ls.value;
    m.ssim_fallback = ls.uniform_fallback;
    Mask outside(refl.height, refl.width);
    for (std::size_t i = 0; i < refl.data.size(); ++i) outside.data[i] = refl.data[i] ? 0 : 1;
    m.gr_outside = outside.empty() ? 0.0 : rmse(pred, tuple.target, &outside);
    return m;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json j = {{"label", label}, {"GR", gr}, {"LR", lr}, {"GS", gs}, {"LS", ls}, {"n", n}};
    if (!reference_only) {
        j["GR_outside"] = gr_outside;
        j["n_failed"] = n_failed;
        j["ssim_fallbacks"] = ssim_fallbacks;
        if (type_accuracy >= 0.0) j["type_accuracy"] = type_accuracy;
        if (mean_kfiou >= 0.0) j["mean_kfiou"] = mean_kfiou;
    } else {
        j["reference_only"] = true;
        j["note"] = "published full-scale numbers; not reproducible at this scale";
    }
    return j;
}

std::vector<std::string> EvaluationResult::failed_ids() const {
    std::vector<std::string> ids;
    for (const auto& r : records)
        if (!r.ok) ids.push_back(r.tuple_id);
    return ids;
}

nlohmann::json EvaluationResult::to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records) {
        nlohmann::json j = {{"tuple_id", r.tuple_id}, {"seed", r.seed}, {"ok", r.ok}};
        if (r.ok) {
            j["GR"] = r.metrics.gr;
            j["LR"] = r.metrics.lr;
            j["GS"] = r.metrics.gs;
            j["LS"] = r.metrics.ls;
            j["GR_outside"] = r.metrics.gr_outside;
            j["ssim_fallback"] = r.metrics.ssim_fallback;
            j["baseline_LR"] = r.baseline.lr;
        } else {
            j["error"] = r.error;
        }
        recs.push_back(j);
    }
    return {{"options", options.to_json()},
            {"local_region", {{"LR", std::string(to_string(options.local_rmse))},
                              {"LS", std::string(to_string(options.local_ssim))}}},
            {"model", model.to_json()},
            {"baseline", baseline.to_json()},
            {"reference", published_reference().to_json()},
            {"win_rate", win_rate},
            {"failed", failed_ids()},
            {"records", recs}};
}

std::vector<EvalSample> load_samples(const dataset::DatasetManifest& manifest) {
    std::vector<EvalSample> out;
    for (const auto& e : manifest.entries) {
        EvalSample s;
        s.tuple_id = e.tuple_id;
        try {
            s.tuple = dataset::load_tuple(manifest, e);
        } catch (const Error& err) {
            s.load_error = err.what();
        }
        out.push_back(std::move(s));
    }
    return out;
}

MetricsReport aggregate(const std::string& label, const std::vector<TupleRecord>& records, bool baseline) {
    MetricsReport r;
    r.label = label;
    std::vector<double> gr, lr, gs, ls, gro;
    for (const auto& rec : records) {
        if (!rec.ok) {
            ++r.n_failed;
            continue;
        }
        const TupleMetrics& m = baseline ? rec.baseline : rec.metrics;
        gr.push_back(m.gr);
        lr.push_back(m.lr);
        gs.push_back(m.gs);
        ls.push_back(m.ls);
        gro.push_back(m.gr_outside);
        if (m.ssim_fallback) ++r.ssim_fallbacks;
    }
    r.n = gr.size();
    r.gr = mean_of(gr);
    r.lr = mean_of(lr);
    r.gs = mean_of(gs);
    r.ls = mean_of(ls);
    r.gr_outside = mean_of(gro);
    return r;
}

EvaluationResult evaluate(const std::vector<EvalSample>& samples, const Generator& generator, const EvalOptions& opts,
                          const std::string& label) {
    if (opts.batch_size < 1) throw Error(ErrorCode::InvalidArgument, "evaluation batch_size must be positive");
    EvaluationResult res;
    res.options = opts;
    res.records.resize(samples.size());
    std::vector<std::size_t> pending;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        auto& rec = res.records[i];
        rec.tuple_id = samples[i].tuple_id;
        rec.seed = opts.seed + i;
        if (!samples[i].load_error.empty()) {
            rec.error = samples[i].load_error;
            continue;
        }
        pending.push_back(i);
    }
    const auto bs = static_cast<std::size_t>(opts.batch_size);
    for (std::size_t start = 0; start < pending.size(); start += bs) {
        std::vector<const dataset::DataTuple*> tuples;
        std::vector<std::uint64_t> seeds;
        const std::size_t end = std::min(pending.size(), start + bs);
        for (std::size_t k = start; k < end; ++k) {
            tuples.push_back(&samples[pending[k]].tuple);
            seeds.push_back(res.records[pending[k]].seed);
        }
        std::vector<GeneratedImage> outs;
        try {
            outs = generator(tuples, seeds);
            if (outs.size() != tuples.size())
                throw Error(ErrorCode::ShapeMismatch, "generator returned the wrong number of images");
        } catch (const Error& e) {
            outs.assign(tuples.size(), GeneratedImage{{}, e.what()});
        }
        for (std::size_t k = start; k < end; ++k) {
            auto& rec = res.records[pending[k]];
            const auto& out = outs[k - start];
            if (!out.error.empty()) {
                rec.error = out.error;
                continue;
            }
            try {
                const auto& t = samples[pending[k]].tuple;
                rec.metrics = score(out.image, t, opts);
                rec.baseline = score(t.composite, t, opts);
                rec.ok = true;
            } catch (const Error& e) {
                rec.error = e.what();
            }
        }
    }
    res.model = aggregate(label, res.records, false);
    res.baseline = aggregate("no-edit baseline", res.records, true);
    std::size_t wins = 0;
    for (const auto& r : res.records)
        if (r.ok && r.metrics.lr < r.baseline.lr) ++wins;
    res.win_rate = res.model.n ? static_cast<double>(wins) / static_cast<double>(res.model.n) : 0.0;
    return res;
}

Generator checkpoint_generator(aux_encoder::AuxModel& aux, diffusion::DiffusionModel& model, const EvalOptions& opts) {
    return [&aux, &model, opts](const std::vector<const dataset::DataTuple*>& tuples,
                                const std::vector<std::uint64_t>& seeds) {
        std::vector<GeneratedImage> out(tuples.size());
        std::vector<diffusion::PreparedSample> prepared;
        std::vector<std::uint64_t> used_seeds;
        std::vector<std::size_t> where;
        for (std::size_t i = 0; i < tuples.size(); ++i) {
            try {
                prepared.push_back(diffusion::prepare_inference(tuples[i]->composite, tuples[i]->fg_mask, aux,
                                                                model.config.reference_size));
                used_seeds.push_back(seeds[i]);
                where.push_back(i);
            } catch (const Error& e) {
                out[i].error = e.what();
            }
        }
        if (!prepared.empty()) {
            auto images = diffusion::infer_prepared(model, prepared, used_seeds, opts.strength, opts.steps);
            for (std::size_t k = 0; k < where.size(); ++k) out[where[k]].image = std::move(images[k]);
        }
        return out;
    };
}

EvaluationResult evaluate_models(const std::vector<EvalSample>& samples, aux_encoder::AuxModel& aux,
                                 diffusion::DiffusionModel& model, const EvalOptions& opts, const std::string& label) {
    auto res = evaluate(samples, checkpoint_generator(aux, model, opts), opts, label);
    std::vector<dataset::DataTuple> ok;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (res.records[i].ok) ok.push_back(samples[i].tuple);
    if (!ok.empty()) {
        const auto ev = aux_encoder::evaluate_aux(aux, ok);
        res.model.type_accuracy = ev.type_accuracy;
        res.model.mean_kfiou = ev.mean_kfiou;
    }
    return res;
}

MetricsReport published_reference() {
    MetricsReport r;
    r.label = "published reference (full scale)";
    r.gr = 11.522;
    r.lr = 53.430;
    r.gs = 0.923;
    r.ls = 0.144;
    r.reference_only = true;
    return r;
}

std::string format_table(const std::vector<MetricsReport>& rows, const EvalOptions& opts) {
    std::size_t label_w = 5;
    for (const auto& r : rows) label_w = std::max(label_w, r.label.size());
    std::ostringstream os;
    os << "# LR over the reflection " << (opts.local_rmse == LocalRegion::Mask ? "mask pixels" : "mask bounding box")
       << "; LS over the reflection "
       << (opts.local_ssim == LocalRegion::Mask ? "mask pixels (window centres)" : "mask bounding box crop")
       << "; RMSE on the 0-255 scale\n";
    os << std::left << std::setw(static_cast<int>(label_w)) << "row" << std::right;
    for (const char* h : {"GR", "LR", "GS", "LS", "GR_out", "type_acc", "kfiou", "n", "failed"})
        os << std::setw(10) << h;
    os << '\n';
    os << std::fixed;
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(label_w)) << r.label << std::right << std::setprecision(3)
           << std::setw(10) << r.gr << std::setw(10) << r.lr << std::setw(10) << r.gs << std::setw(10) << r.ls;
        auto opt = [&](double v, bool have) {
            if (have)
                os << std::setw(10) << v;
            else
                os << std::setw(10) << "-";
        };
        opt(r.gr_outside, !r.reference_only);
        opt(r.type_accuracy, r.type_accuracy >= 0.0);
        opt(r.mean_kfiou, r.mean_kfiou >= 0.0);
        if (r.reference_only)
            os << std::setw(10) << "-" << std::setw(10) << "-" << "  (not reproducible at this scale)";
        else
            os << std::setw(10) << r.n << std::setw(10) << r.n_failed;
        os << '\n';
    }
    return os.str();
}

}  // namespace reflgen::evaluation
