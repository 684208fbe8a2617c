// Copyright (C) 2026 The reflgen Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "reflgen/errors.h"
#include "reflgen/evaluation.h"
#include "test_util.h"

using namespace reflgen;
using namespace reflgen::evaluation;

namespace {

Image random_image(std::mt19937_64& rng, int h, int w) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(h, w);
    for (auto& v : img.data) v = u(rng);
    return img;
}

Image smooth_image(std::mt19937_64& rng, int h, int w) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double a = u(rng), b = u(rng), c = u(rng);
    Image img(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int ch = 0; ch < 3; ++ch)
                img.at(i, j, ch) = static_cast<float>(0.5 + 0.4 * std::sin(a * i + b * j + c * ch) * std::cos(0.1 * j));
    return img;
}

// Direct windowed evaluation: explicit Gaussian weights, every valid window, double precision.
double oracle_ssim(const Image& x, const Image& y, int r0, int c0, int rows, int cols) {
    const double sigma = 1.5, C1 = std::pow(0.01 * 255, 2), C2 = std::pow(0.03 * 255, 2);
    double w[11][11], total = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2 * sigma * sigma));
            total += w[i][j];
        }
    double acc = 0.0;
    int windows = 0;
    for (int c = 0; c < 3; ++c)
        for (int i = r0; i + 11 <= r0 + rows; ++i)
            for (int j = c0; j + 11 <= c0 + cols; ++j) {
                double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (int a = 0; a < 11; ++a)
                    for (int b = 0; b < 11; ++b) {
                        const double wt = w[a][b] / total;
                        const double p = 255.0 * x.at(i + a, j + b, c), q = 255.0 * y.at(i + a, j + b, c);
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
                acc += ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
                ++windows;
            }
    return acc / windows;
}

std::vector<dataset::DataTuple> make_tuples(int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<dataset::DataTuple> out;
    while (static_cast<int>(out.size()) < n) {
        try {
            out.push_back(dataset::generate_scene(dataset::random_scene_spec(
                rng, out.size() % 4 == 3 ? dataset::ReflectionType::Others : dataset::ReflectionType::Vertical)));
        } catch (const Error&) {
        }
    }
    return out;
}

std::vector<EvalSample> as_samples(const std::vector<dataset::DataTuple>& tuples) {
    std::vector<EvalSample> s;
    for (std::size_t i = 0; i < tuples.size(); ++i) s.push_back({"t" + std::to_string(i), tuples[i], ""});
    return s;
}

Generator returning_target() {
    return [](const std::vector<const dataset::DataTuple*>& ts, const std::vector<std::uint64_t>&) {
        std::vector<GeneratedImage> out;
        for (const auto* t : ts) out.push_back({t->target, ""});
        return out;
    };
}

}  // namespace

TEST(RmseTest, IdenticalAndConstantOffset) {
    std::mt19937_64 rng(1);
    const auto a = random_image(rng, 20, 30);
    EXPECT_EQ(rmse(a, a), 0.0);
    // Offsets exactly representable in the float image storage.
    for (double offset : {1.0 / 64, 10.0 / 256, 0.25}) {
        Image base(20, 30, 3, 0.5f), shifted(20, 30, 3, static_cast<float>(0.5 + offset));
        EXPECT_NEAR(rmse(shifted, base), 255.0 * offset, 1e-9);
        EXPECT_NEAR(rmse(base, shifted), 255.0 * offset, 1e-9);
    }
    // 10/255 is not a float; the storage rounding is about 1e-6 on the 0-255 scale.
    Image zero(8, 8), ten(8, 8, 3, 10.0f / 255.0f);
    EXPECT_NEAR(rmse(ten, zero), 10.0, 1e-5);
}

TEST(RmseTest, MatchesPixelLoopAndIsSymmetric) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const auto a = random_image(rng, 17, 23), b = random_image(rng, 17, 23);
        Mask m(17, 23);
        for (auto& v : m.data) v = rng() % 3 == 0;
        double full = 0.0, part = 0.0;
        int n_part = 0;
        for (int i = 0; i < 17; ++i)
            for (int j = 0; j < 23; ++j)
                for (int c = 0; c < 3; ++c) {
                    const double d = (static_cast<double>(a.at(i, j, c)) - b.at(i, j, c)) * 255.0;
                    full += d * d;
                    if (m.at(i, j)) {
                        part += d * d;
                        ++n_part;
                    }
                }
        EXPECT_NEAR(rmse(a, b), std::sqrt(full / (17 * 23 * 3)), 1e-9);
        EXPECT_NEAR(rmse(a, b, &m), std::sqrt(part / n_part), 1e-9);
        EXPECT_EQ(rmse(a, b, &m), rmse(b, a, &m));
    }
}

TEST(RmseTest, Errors) {
    Image a(4, 4), b(4, 5);
    EXPECT_REFLGEN_ERROR(rmse(a, b), ErrorCode::ShapeMismatch);
    Mask empty(4, 4);
    EXPECT_REFLGEN_ERROR(rmse(a, a, &empty), ErrorCode::EmptyRegion);
    Mask wrong(3, 4);
    wrong.at(0, 0) = 1;
    EXPECT_REFLGEN_ERROR(rmse(a, a, &wrong), ErrorCode::ShapeMismatch);
}

TEST(SsimTest, SelfSimilarityIsExactlyOne) {
    std::mt19937_64 rng(3);
    const auto a = random_image(rng, 32, 32);
    EXPECT_EQ(ssim(a, a).value, 1.0);
    const Image flat(32, 32, 3, 0.3f);
    EXPECT_EQ(ssim(flat, flat).value, 1.0);
    Mask m(32, 32);
    for (int i = 4; i < 25; ++i)
        for (int j = 6; j < 20; ++j) m.at(i, j) = 1;
    EXPECT_EQ(ssim(a, a, &m).value, 1.0);
    EXPECT_EQ(ssim(a, a, &m, LocalRegion::Mask).value, 1.0);
    Mask tiny(32, 32);
    tiny.at(3, 3) = tiny.at(4, 5) = 1;
    const auto t = ssim(a, a, &tiny);
    EXPECT_EQ(t.value, 1.0);
    EXPECT_TRUE(t.uniform_fallback);
}

TEST(SsimTest, NegativeCheckerboard) {
    Image x(32, 32), neg(32, 32);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j)
            for (int c = 0; c < 3; ++c) {
                x.at(i, j, c) = ((i / 4 + j / 4) % 2) ? 0.9f : 0.1f;
                neg.at(i, j, c) = 1.0f - x.at(i, j, c);
            }
    const double v = ssim(x, neg).value;
    EXPECT_LT(v, 0.0);
    EXPECT_EQ(v, ssim(neg, x).value);
}

TEST(SsimTest, MatchesWindowedOracle) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 3; ++trial) {
        const auto a = smooth_image(rng, 24, 28);
        auto b = a;
        std::normal_distribution<float> nd(0.0f, 0.05f);
        for (auto& v : b.data) v += nd(rng);
        EXPECT_NEAR(ssim(a, b).value, oracle_ssim(a, b, 0, 0, 24, 28), 1e-9);
        EXPECT_NEAR(ssim(a, b).value, ssim(b, a).value, 1e-12);
        // Local variant: the oracle over the mask's bounding box.
        Mask m(24, 28);
        for (int i = 3; i < 19; ++i)
            for (int j = 5; j < 22; ++j)
                if ((i + j) % 5 != 0) m.at(i, j) = 1;
        const auto local = ssim(a, b, &m);
        EXPECT_FALSE(local.uniform_fallback);
        EXPECT_NEAR(local.value, oracle_ssim(a, b, 3, 5, 16, 17), 1e-9);
    }
}

TEST(SsimTest, UniformFallbackAndMaskMode) {
    std::mt19937_64 rng(5);
    const auto a = smooth_image(rng, 30, 30);
    auto b = a;
    for (auto& v : b.data) v = 0.8f * v + 0.1f;
    Mask m(30, 30);
    for (int i = 10; i < 16; ++i)
        for (int j = 12; j < 20; ++j) m.at(i, j) = 1;
    const auto fb = ssim(a, b, &m);
    EXPECT_TRUE(fb.uniform_fallback);
    double acc = 0.0;
    const double C1 = std::pow(0.01 * 255, 2), C2 = std::pow(0.03 * 255, 2);
    for (int c = 0; c < 3; ++c) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        const int n = 6 * 8;
        for (int i = 10; i < 16; ++i)
            for (int j = 12; j < 20; ++j) {
                const double p = 255.0 * a.at(i, j, c), q = 255.0 * b.at(i, j, c);
                mx += p / n;
                my += q / n;
                xx += p * p / n;
                yy += q * q / n;
                xy += p * q / n;
            }
        acc += ((2 * mx * my + C1) * (2 * (xy - mx * my) + C2)) /
               ((mx * mx + my * my + C1) * (xx - mx * mx + yy - my * my + C2));
    }
    EXPECT_NEAR(fb.value, acc / 3, 1e-9);

    // Mask mode: windows centred on mask pixels of the full-image map.
    const auto mm = ssim(a, b, &m, LocalRegion::Mask);
    EXPECT_FALSE(mm.uniform_fallback);
    double sum = 0.0;
    int count = 0;
    for (int i = 10; i < 16; ++i)
        for (int j = 12; j < 20; ++j) {
            sum += oracle_ssim(a, b, i - 5, j - 5, 11, 11);
            ++count;
        }
    EXPECT_NEAR(mm.value, sum / count, 1e-9);
    EXPECT_EQ(parse_local_region("mask"), LocalRegion::Mask);
    EXPECT_EQ(parse_local_region(to_string(LocalRegion::BoundingBox)), LocalRegion::BoundingBox);
    EXPECT_REFLGEN_ERROR(parse_local_region("box"), ErrorCode::InvalidArgument);
}

TEST(EvaluateTest, PerfectOutputs) {
    const auto tuples = make_tuples(6, 6);
    const auto res = evaluate(as_samples(tuples), returning_target(), EvalOptions{});
    EXPECT_EQ(res.model.n, 6u);
    EXPECT_EQ(res.model.gr, 0.0);
    EXPECT_EQ(res.model.lr, 0.0);
    EXPECT_EQ(res.model.gs, 1.0);
    EXPECT_EQ(res.model.ls, 1.0);
    EXPECT_EQ(res.win_rate, 1.0);
    for (const auto& r : res.records) {
        EXPECT_TRUE(r.ok);
        EXPECT_GT(r.baseline.lr, 0.0);
        EXPECT_EQ(r.baseline.gr_outside, 0.0);  // the composite equals the target off the reflection
    }
    EXPECT_GT(res.baseline.lr, 0.0);
}

TEST(EvaluateTest, AggregatesAreMeansAndFailuresAreExcluded) {
    auto tuples = make_tuples(7, 7);
    auto samples = as_samples(tuples);
    samples[2].load_error = "corrupt tuple";
    std::mt19937_64 rng(8);
    Generator noisy = [&](const std::vector<const dataset::DataTuple*>& ts, const std::vector<std::uint64_t>& seeds) {
        std::vector<GeneratedImage> out;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (seeds[i] == 104) {
                out.push_back({{}, "boom"});
                continue;
            }
            Image img = ts[i]->target;
            std::normal_distribution<float> nd(0.0f, 0.05f);
            for (auto& v : img.data) v = std::clamp(v + nd(rng), 0.0f, 1.0f);
            out.push_back({img, ""});
        }
        return out;
    };
    EvalOptions opts;
    opts.seed = 100;
    opts.batch_size = 3;
    const auto res = evaluate(samples, noisy, opts, "noisy");
    EXPECT_EQ(res.failed_ids(), (std::vector<std::string>{"t2", "t4"}));
    EXPECT_EQ(res.model.n, 5u);
    EXPECT_EQ(res.model.n_failed, 2u);
    double gr = 0, lr = 0, gs = 0, ls = 0;
    for (const auto& r : res.records) {
        EXPECT_EQ(r.seed, 100 + static_cast<std::uint64_t>(std::stoi(r.tuple_id.substr(1))));
        if (!r.ok) continue;
        gr += r.metrics.gr / 5;
        lr += r.metrics.lr / 5;
        gs += r.metrics.gs / 5;
        ls += r.metrics.ls / 5;
    }
    EXPECT_NEAR(res.model.gr, gr, 1e-9);
    EXPECT_NEAR(res.model.lr, lr, 1e-9);
    EXPECT_NEAR(res.model.gs, gs, 1e-9);
    EXPECT_NEAR(res.model.ls, ls, 1e-9);
    const auto j = res.to_json();
    EXPECT_EQ(j["failed"].size(), 2u);
    EXPECT_EQ(j["records"][2]["error"], "corrupt tuple");
    EXPECT_EQ(j["model"]["label"], "noisy");

    Generator throwing = [](const std::vector<const dataset::DataTuple*>&, const std::vector<std::uint64_t>&)
        -> std::vector<GeneratedImage> { throw Error(ErrorCode::Numeric, "bad batch"); };
    const auto all_failed = evaluate(as_samples(tuples), throwing, EvalOptions{});
    EXPECT_EQ(all_failed.model.n, 0u);
    EXPECT_EQ(all_failed.failed_ids().size(), tuples.size());
}

TEST(EvaluateTest, ReferenceRowAndTable) {
    const auto ref = published_reference();
    EXPECT_EQ(ref.gr, 11.522);
    EXPECT_EQ(ref.lr, 53.430);
    EXPECT_EQ(ref.gs, 0.923);
    EXPECT_EQ(ref.ls, 0.144);
    EXPECT_TRUE(ref.reference_only);
    const auto res = evaluate(as_samples(make_tuples(3, 9)), returning_target(), EvalOptions{});
    const auto table = format_table({res.model, res.baseline, ref}, res.options);
    std::istringstream is(table);
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(is, line)) lines.push_back(line);
    ASSERT_EQ(lines.size(), 5u);  // note, header, three rows
    EXPECT_NE(lines[0].find("mask pixels"), std::string::npos);
    EXPECT_NE(lines[1].find("GR"), std::string::npos);
    EXPECT_NE(lines[4].find("not reproducible"), std::string::npos);
    EXPECT_EQ(lines[2].size(), lines[3].size());
    EXPECT_TRUE(res.to_json()["reference"]["reference_only"].get<bool>());
}

TEST(EvaluateTest, BoundingBoxLocalRmseOption) {
    const auto tuples = make_tuples(2, 10);
    EvalOptions opts;
    opts.local_rmse = LocalRegion::BoundingBox;
    const auto& t = tuples[0];
    const auto m = score(t.composite, t, opts);
    const PixelRect r = mask_bounds(t.refl_mask);
    Mask box(64, 64);
    for (int i = r.row0; i < r.row1; ++i)
        for (int j = r.col0; j < r.col1; ++j) box.at(i, j) = 1;
    EXPECT_EQ(m.lr, rmse(t.composite, t.target, &box));
}

TEST(EvaluateTest, LoadSamplesRecordsUnreadableTuples) {
    testutil::TempDir dir;
    dataset::SampleOptions so;
    so.n = 3;
    so.seed = 11;
    so.out_dir = dir.path();
    const auto manifest = dataset::sample_dataset(so);
    {
        std::ofstream f(dir / manifest.entries[1].target, std::ios::binary | std::ios::trunc);
        f << "not a png";
    }
    const auto samples = load_samples(dataset::read_manifest(dir / "manifest.json"));
    ASSERT_EQ(samples.size(), 3u);
    EXPECT_TRUE(samples[0].load_error.empty());
    EXPECT_FALSE(samples[1].load_error.empty());
    EXPECT_EQ(samples[1].tuple_id, manifest.entries[1].tuple_id);
}

TEST(EvaluateTest, ModelPipelineSmoke) {
    torch::manual_seed(12);
    aux_encoder::AuxModel aux(aux_encoder::AuxConfig{});
    diffusion::DiffusionModel model(diffusion::DenoiserConfig{});
    auto samples = as_samples(make_tuples(2, 13));
    samples[1].tuple.fg_mask = Mask(64, 64);  // inference cannot run without a foreground
    EvalOptions opts;
    opts.steps = 2;
    const auto res = evaluate_models(samples, aux, model, opts);
    EXPECT_EQ(res.model.n, 1u);
    EXPECT_EQ(res.failed_ids(), std::vector<std::string>{"t1"});
    EXPECT_GE(res.model.type_accuracy, 0.0);
    EXPECT_GT(res.model.mean_kfiou, 0.0);
    EXPECT_LE(res.model.mean_kfiou, 1.0 / 3.0 + 1e-12);
}
