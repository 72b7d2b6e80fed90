#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "vmim/config.hpp"
#include "vmim/train.hpp"

using namespace vmim;
namespace fs = std::filesystem;

namespace {

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

ModelConfig tiny(Method m) {
    ModelConfig mc;
    mc.method = m;
    mc.vit.embed_dim = 24;
    mc.vit.depth = 4;
    mc.vit.num_heads = 2;
    mc.mae = mae_decoder_tiny();
    mc.mae.decoder_dim = 12;
    mc.mae.decoder_depth = 1;
    mc.mae.decoder_heads = 2;
    mc.unetr.num_classes = 3;
    mc.unetr.base_channels = 4;
    return mc;
}

TrainConfig quick() {
    TrainConfig tc;
    tc.base_lr = 1e-3;
    tc.window = 16;
    tc.batch_size = 2;
    tc.warmup_epochs = 1;
    tc.total_epochs = 3;
    tc.seed = 11;
    return tc;
}

std::vector<LabeledVolume> labeled(std::size_t n, std::uint64_t seed) {
    SynthOptions opt;
    return synth_generate(seed, n, {24, 24, 24}, 3, opt);
}

std::vector<Volume> images(const std::vector<LabeledVolume>& data) {
    std::vector<Volume> out;
    for (const auto& d : data) out.push_back(d.image);
    return out;
}

fs::path fresh_dir(const char* name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST(AdamW, ZeroGradientFixedPointAndDecay) {
    Params p{{"w", Tensor({3}, {1.0, -2.0, 0.5}, true)}};
    const Grads g{{"w", Tensor({3}, {0.0, 0.0, 0.0})}};
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    OptState st;
    adamw_step(p, g, st, 0.1, cfg);
    EXPECT_EQ(p.at("w")[0], 1.0);
    EXPECT_EQ(p.at("w")[1], -2.0);
    EXPECT_EQ(st.t, 1u);

    cfg.weight_decay = 0.05;
    OptState st2;
    adamw_step(p, g, st2, 0.1, cfg);
    EXPECT_DOUBLE_EQ(p.at("w")[0], 0.995);
    EXPECT_DOUBLE_EQ(p.at("w")[1], -2.0 * 0.995);
}

TEST(AdamW, ScalarHandStep) {
    Params p{{"w", Tensor({1}, {1.0}, true)}};
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    OptState st;
    adamw_step(p, {{"w", Tensor({1}, {1.0})}}, st, 0.1, cfg);
    EXPECT_NEAR(p.at("w")[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
    EXPECT_NEAR(p.at("w")[0], 0.9, 1e-8);
}

TEST(AdamW, MatchesIndependentAdamOnScalars) {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    Params p{{"a", Tensor({1}, {0.3}, true)}, {"b", Tensor({1}, {-1.2}, true)}};
    OptState st;
    double a = 0.3, b = -1.2;
    double ma = 0, va = 0, mb = 0, vb = 0;
    Rng rng(5);
    for (int t = 1; t <= 50; ++t) {
        const double ga = rng.normal(), gb = rng.normal();
        const double lr = 0.01 * (1.0 + 0.1 * t);
        adamw_step(p, {{"a", Tensor({1}, {ga})}, {"b", Tensor({1}, {gb})}}, st, lr, cfg);
        auto adam = [&](double& w, double& m, double& v, double g) {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            const double mh = m / (1.0 - std::pow(0.9, t));
            const double vh = v / (1.0 - std::pow(0.999, t));
            w -= lr * mh / (std::sqrt(vh) + 1e-8);
        };
        adam(a, ma, va, ga);
        adam(b, mb, vb, gb);
    }
    EXPECT_NEAR(p.at("a")[0], a, 1e-12);
    EXPECT_NEAR(p.at("b")[0], b, 1e-12);
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
    Params p{{"encoder.x", Tensor({2}, {1.0, 2.0}, true)}};
    OptState st;
    try {
        adamw_step(p, {{"encoder.x", Tensor({2}, {0.0, std::nan("")})}}, st, 0.1, TrainConfig{});
        FAIL() << "expected a throw";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("encoder.x"), std::string::npos);
    }
    EXPECT_EQ(p.at("encoder.x")[0], 1.0);
}

TEST(Schedule, EndpointsAndContinuity) {
    EXPECT_EQ(lr_at(0, 10, 100, 3e-4), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(10, 10, 100, 3e-4), 3e-4);
    EXPECT_NEAR(lr_at(100, 10, 100, 3e-4, 1e-5), 1e-5, 1e-18);
    EXPECT_NEAR(lr_at(11, 10, 100, 3e-4), 3e-4, 1e-7);
    EXPECT_NEAR(lr_at(55, 10, 100, 1.0), 0.5, 1e-12);
    for (std::size_t s = 0; s <= 100; ++s) EXPECT_GE(lr_at(s, 10, 100, 3e-4), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(0, 0, 100, 2.0), 2.0);
}

TEST(Crop, WholeVolumeAndPairedLabels) {
    auto data = labeled(1, 3);
    Rng rng(1);
    const Crop whole = crop_sampler(data[0].image, &data[0].labels, 24, rng);
    EXPECT_EQ(whole.image.data, data[0].image.data);
    EXPECT_EQ(whole.labels->data, data[0].labels.data);

    const Crop part = crop_sampler(data[0].image, &data[0].labels, 8, rng);
    for (std::size_t z = 0; z < 8; ++z)
        for (std::size_t y = 0; y < 8; ++y)
            for (std::size_t x = 0; x < 8; ++x) {
                const std::size_t src = ((part.start[0] + z) * 24 + part.start[1] + y) * 24 + part.start[2] + x;
                EXPECT_EQ(part.image.at(0, z, y, x), data[0].image.data[src]);
                EXPECT_EQ(part.labels->data[(z * 8 + y) * 8 + x], data[0].labels.data[src]);
            }
    EXPECT_THROW(crop_sampler(data[0].image, nullptr, 25, rng), std::invalid_argument);
}

TEST(Crop, StartsAreUniformAndSeeded) {
    // Only the depth axis has room: starts 0..16.
    const Volume thin(1, {20, 4, 4});
    const int draws = 10000;
    std::vector<int> freq(17, 0);
    Rng rng(9);
    for (int i = 0; i < draws; ++i) {
        const Crop c = crop_sampler(thin, nullptr, 4, rng);
        ASSERT_EQ(c.start[1], 0u);
        ++freq[c.start[0]];
    }
    const double p = 1.0 / 17.0;
    const double sigma = std::sqrt(draws * p * (1.0 - p));
    for (int f : freq) EXPECT_LT(std::abs(f - draws * p), 4.0 * sigma);

    Rng a(42), b(42);
    for (int i = 0; i < 20; ++i) {
        EXPECT_EQ(crop_sampler(thin, nullptr, 4, a).start, crop_sampler(thin, nullptr, 4, b).start);
    }
}

TEST(Subset, HalfOfTwentyFourAndIdentity) {
    std::vector<std::size_t> ids(24);
    for (std::size_t i = 0; i < 24; ++i) ids[i] = 100 + i;
    const auto half = subset_labeled(ids, 0.5, 7);
    EXPECT_EQ(half.size(), 12u);
    EXPECT_TRUE(std::is_sorted(half.begin(), half.end()));
    EXPECT_EQ(std::set<std::size_t>(half.begin(), half.end()).size(), 12u);
    EXPECT_EQ(half, subset_labeled(ids, 0.5, 7));
    EXPECT_EQ(subset_labeled(ids, 1.0, 7), ids);
    EXPECT_THROW(subset_labeled(ids, 0.01, 7), std::invalid_argument);
    EXPECT_THROW(subset_labeled(ids, 0.0, 7), std::invalid_argument);
    EXPECT_THROW(subset_labeled(ids, 1.5, 7), std::invalid_argument);
}

TEST(TrainConfigCheck, RejectsInvalid) {
    TrainConfig tc = quick();
    EXPECT_NO_THROW(validate(tc, 8));
    tc.window = 20;
    EXPECT_THROW(validate(tc, 8), std::invalid_argument);
    tc = quick();
    tc.warmup_epochs = 4;
    EXPECT_THROW(validate(tc, 8), std::invalid_argument);
    tc = quick();
    tc.base_lr = 0.0;
    EXPECT_THROW(validate(tc, 8), std::invalid_argument);
}

TEST(TrainConfigCheck, JsonRoundTripAndUnknownKey) {
    TrainConfig tc = quick();
    tc.weight_decay = 0.005;
    const Json j = tc;
    EXPECT_EQ(j.get<TrainConfig>(), tc);
    Json bad = j;
    bad["learning_rate"] = 1.0;
    EXPECT_THROW(bad.get<TrainConfig>(), std::invalid_argument);
}

TEST(Pretrain, DeterministicTraceAndCheckpoints) {
    const auto data = images(labeled(3, 21));
    const ModelConfig mc = tiny(Method::MAE);
    const TrainConfig tc = quick();
    const MaskingConfig mask{8, 0.5};
    const fs::path d1 = fresh_dir("vmim_pretrain_a");
    const fs::path d2 = fresh_dir("vmim_pretrain_b");
    const PretrainResult a = pretrain(mc, tc, mask, data, {d1});
    const PretrainResult b = pretrain(mc, tc, mask, data, {d2});
    EXPECT_EQ(a.steps_per_epoch, 2u);
    EXPECT_EQ(a.trace.size(), a.steps_per_epoch * tc.total_epochs);
    EXPECT_EQ(file_bytes(d1 / "final.ckpt"), file_bytes(d2 / "final.ckpt"));
    EXPECT_EQ(file_bytes(d1 / "loss_trace.jsonl"), file_bytes(d2 / "loss_trace.jsonl"));
    EXPECT_EQ(a.checkpoints.size(), 3u);
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].step, i + 1);
        EXPECT_TRUE(std::isfinite(a.trace[i].loss));
    }

    const Checkpoint loaded = load_checkpoint(d1 / "final.ckpt");
    const fs::path again = d1 / "again.ckpt";
    save_checkpoint(loaded, again);
    EXPECT_EQ(file_bytes(again), file_bytes(d1 / "final.ckpt"));

    TrainConfig other = tc;
    other.seed = 12;
    const PretrainResult c = pretrain(mc, other, mask, data);
    EXPECT_NE(c.trace.back().loss, a.trace.back().loss);
}

TEST(Pretrain, SimMIMAndSimCLRRun) {
    const auto data = images(labeled(2, 22));
    TrainConfig tc = quick();
    tc.total_epochs = 2;
    const PretrainResult s = pretrain(tiny(Method::SimMIM), tc, {8, 0.5}, data);
    EXPECT_EQ(s.trace.size(), 2u);
    const PretrainResult c = pretrain(tiny(Method::SimCLR), tc, {8, 0.5}, data);
    EXPECT_EQ(c.trace.size(), 2u);
    for (const auto& r : c.trace) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(Pretrain, RejectsBadInputs) {
    const auto data = images(labeled(1, 23));
    EXPECT_THROW(pretrain(tiny(Method::MAE), quick(), {8, 0.5}, {}), std::invalid_argument);
    EXPECT_THROW(pretrain(tiny(Method::UNETR), quick(), {8, 0.5}, data), std::invalid_argument);
    EXPECT_THROW(pretrain(tiny(Method::MAE), quick(), {16, 0.4}, data), std::invalid_argument);
    TrainConfig big = quick();
    big.window = 32;
    EXPECT_THROW(pretrain(tiny(Method::MAE), big, {8, 0.5}, data), std::invalid_argument);
}

TEST(Pretrain, DivergenceNamesStep) {
    const auto data = images(labeled(1, 24));
    TrainConfig tc = quick();
    tc.base_lr = 1e300;
    tc.warmup_epochs = 0;
    try {
        pretrain(tiny(Method::MAE), tc, {8, 0.5}, data);
        FAIL() << "expected divergence";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
    }
}

TEST(Finetune, DiceTraceInRangeAndScratchMatchesExceptEncoder) {
    const auto train = labeled(2, 31);
    const auto val = labeled(1, 32);
    const ModelConfig seg = tiny(Method::UNETR);
    TrainConfig tc = quick();
    tc.total_epochs = 2;
    const SlidingWindowConfig swi{24, 0.5};

    ModelConfig mae = tiny(Method::MAE);
    const Checkpoint pre{mae, init_params(mae, 99), 0};
    const fs::path dir = fresh_dir("vmim_finetune");
    const FinetuneResult with = finetune(pre, seg, tc, train, val, swi, {dir});
    ASSERT_EQ(with.dice_trace.size(), 2u);
    for (const auto& rec : with.dice_trace) {
        EXPECT_EQ(rec.per_class.size(), 2u);
        for (const auto& [id, d] : rec.per_class) {
            EXPECT_GE(d, 0.0);
            EXPECT_LE(d, 1.0);
        }
        EXPECT_GE(rec.average, 0.0);
        EXPECT_LE(rec.average, 1.0);
    }
    EXPECT_TRUE(fs::exists(dir / "dice_trace.jsonl"));

    // A vanishing learning rate leaves the initial weights in place up to
    // denormal-sized updates.
    TrainConfig still = tc;
    still.base_lr = 1e-300;
    still.total_epochs = 1;
    const auto a = finetune(pre, seg, still, train, {}, swi).checkpoint.params;
    const auto b = finetune(std::nullopt, seg, still, train, {}, swi).checkpoint.params;
    auto max_diff = [](const Tensor& x, const Tensor& y) {
        double m = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
        return m;
    };
    std::size_t changed = 0;
    for (const auto& [name, t] : a) {
        ASSERT_EQ(t.shape(), b.at(name).shape()) << name;
        if (name.rfind("encoder.", 0) == 0) {
            EXPECT_LT(max_diff(t, pre.params.at(name)), 1e-200) << name;
            changed += max_diff(t, b.at(name)) > 1e-3;
        } else {
            EXPECT_LT(max_diff(t, b.at(name)), 1e-200) << name;
        }
    }
    EXPECT_GT(changed, 0u);
}

TEST(Finetune, ConfigMismatchIsRejected) {
    const auto train = labeled(1, 33);
    ModelConfig mae = tiny(Method::MAE);
    mae.vit.embed_dim = 36;
    const Checkpoint pre{mae, init_params(mae, 1), 0};
    EXPECT_THROW(finetune(pre, tiny(Method::UNETR), quick(), train, {}, {24, 0.5}), std::invalid_argument);
    EXPECT_THROW(finetune(std::nullopt, tiny(Method::MAE), quick(), train, {}, {24, 0.5}), std::invalid_argument);
    ModelConfig four = tiny(Method::UNETR);
    four.unetr.num_classes = 4;
    EXPECT_THROW(finetune(std::nullopt, four, quick(), train, {}, {24, 0.5}), std::invalid_argument);
}

TEST(Finetune, LabeledRatioSelectsSubset) {
    const auto train = labeled(4, 34);
    TrainConfig tc = quick();
    tc.total_epochs = 1;
    tc.labeled_ratio = 0.5;
    const FinetuneResult r = finetune(std::nullopt, tiny(Method::UNETR), tc, train, {}, {24, 0.5});
    EXPECT_EQ(r.train_ids.size(), 2u);
    EXPECT_EQ(r.steps_per_epoch, 1u);
}

TEST(Records, JsonLines) {
    const LossRecord l{3, 1, 0.5, 0.25};
    EXPECT_EQ(to_json_line(l), R"({"step":3,"epoch":1,"lr":0.5,"loss":0.25})");
    const DiceRecord d{4, 2, {{1, 0.5}, {2, 1.0}}, 0.75};
    EXPECT_EQ(to_json_line(d), R"({"step":4,"epoch":2,"dice":{"1":0.5,"2":1.0},"average":0.75})");
}
