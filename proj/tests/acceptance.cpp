// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <sys/wait.h>

#include "gradcheck_cases.hpp"
#include "vmim/infer.hpp"
#include "vmim/objectives.hpp"
#include "vmim/patch.hpp"
#include "vmim/train.hpp"

#ifndef VMIM_CLI_PATH
#error "VMIM_CLI_PATH must name the vmim executable"
#endif

using namespace vmim;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, x);
    return buf;
}

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

fs::path scratch_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("vmim_acceptance_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

ModelConfig tiny_mim(Method m) {
    ModelConfig mc;
    mc.method = m;
    mc.vit = vit_tiny();
    mc.vit.token_patch = 8;
    mc.mae = mae_decoder_tiny();
    mc.recon_norm = ReconNorm::L1;
    return mc;
}

// 1 ------------------------------------------------------------------------

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string worst_name;
    std::size_t checked = 0;
    for (const auto& c : vmim::testing::gradient_cases()) {
        for (std::uint64_t s = 0; s < 20; ++s) {
            const double e = finite_diff_check(c.op, c.sample(1000 + s), 1e-5, 20, s);
            if (e > worst) {
                worst = e;
                worst_name = c.name;
            }
        }
        ++checked;
    }
    // Composed tiny ViT3D forward plus masked loss, probed through several parameter tensors.
    Rng rng(5);
    Volume v(1, {16, 16, 16});
    for (double& x : v.data) x = rng.uniform(0.0, 1.0);
    for (Method method : {Method::MAE, Method::SimMIM}) {
        const ModelConfig mc = tiny_mim(method);
        const Params p = init_params(mc, 6);
        Rng mrng(7);
        const Mask mask = sample_mask(make_grid(v.extents(), 1, 8), {8, 0.5}, mrng);
        std::vector<std::string> names{"encoder.patch_embed.weight", "encoder.blocks.0.attn.qkv.weight",
                                       "encoder.blocks.3.mlp.fc2.weight", "encoder.norm.weight"};
        names.push_back(method == Method::MAE ? "mae.pred.weight" : "simmim.mask_token");
        for (const auto& name : names) {
            auto f = [&](const Tensor& w) {
                Params q = p;
                q[name] = w;
                return mim_forward(mc, q, v, mask).loss;
            };
            const double e = finite_diff_check(f, p.at(name), 1e-5, 20, 8);
            if (e > worst) {
                worst = e;
                worst_name = to_string(method) + ":" + name;
            }
            ++checked;
        }
    }
    const double secs = seconds_since(t0);
    Outcome o;
    o.pass = worst < 1e-4 && secs < 120.0;
    o.detail = std::to_string(checked) + " cases x 20 probes, worst rel err " + fmt("%.2e", worst) + " (" +
               worst_name + "), " + fmt("%.1f", secs) + " s";
    return o;
}

// 2 ------------------------------------------------------------------------

Outcome masking_exactness() {
    Rng rng(11);
    std::size_t mismatches = 0;
    std::size_t configs = 0;
    while (configs < 500) {
        const std::size_t p = std::size_t{1} << rng.uniform_index(4);  // 1..8
        const std::size_t f = 1 + rng.uniform_index(3);
        const std::size_t q = p * f;
        Extents e{};
        for (auto& x : e) x = q * (1 + rng.uniform_index(4));
        const double r = rng.uniform();
        const PatchGrid grid = make_grid(e, 1, p);
        const MaskingConfig cfg{q, r};
        const std::size_t cells = super_cells(grid, cfg);
        const auto expected = static_cast<std::size_t>(std::floor(r * static_cast<double>(cells))) * f * f * f;
        if (expected == 0) continue;
        const Mask m = sample_mask(grid, cfg, rng);
        if (m.masked.size() != expected || expected_masked_count(grid, cfg) != expected) ++mismatches;
        ++configs;
    }

    // Frequency test on a 6^3 grid at r = 0.5.
    const PatchGrid g6 = make_grid({6, 6, 6}, 1, 1);
    const MaskingConfig half{1, 0.5};
    const int draws = 10000;
    std::vector<int> hits(216, 0);
    Rng frng(12);
    for (int i = 0; i < draws; ++i)
        for (std::size_t t : sample_mask(g6, half, frng).masked) ++hits[t];
    const double pr = 108.0 / 216.0;
    const double sigma = std::sqrt(draws * pr * (1.0 - pr));
    double worst_z = 0.0;
    for (int h : hits) worst_z = std::max(worst_z, std::abs(h - draws * pr) / sigma);

    const PatchGrid full = make_grid({96, 96, 96}, 1, 16);
    const std::size_t full_masked = expected_masked_count(full, {16, 0.75});

    Outcome o;
    o.pass = mismatches == 0 && worst_z < 4.0 && full.tokens() == 216 && full_masked == 162;
    o.detail = "500 configs, " + std::to_string(mismatches) + " count mismatches; 6^3 frequency max |z| " +
               fmt("%.2f", worst_z) + "; 96^3/p16 -> " + std::to_string(full.tokens()) + " tokens, " +
               std::to_string(full_masked) + " masked";
    return o;
}

// 3 ------------------------------------------------------------------------

Outcome loss_locality() {
    Rng rng(21);
    std::size_t violations = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 8 + rng.uniform_index(40);
        const std::size_t d = 1 + rng.uniform_index(64);
        std::vector<bool> flags(n, false);
        std::vector<std::size_t> masked;
        for (std::size_t i = 0; i < n; ++i) {
            if (rng.uniform() < 0.5) masked.push_back(i);
        }
        if (masked.empty()) masked.push_back(rng.uniform_index(n));
        for (std::size_t i : masked) flags[i] = true;
        const Mask mask{masked, n};
        std::vector<double> pred(n * d), target(n * d);
        for (double& x : pred) x = rng.uniform(-3.0, 3.0);
        for (double& x : target) x = rng.uniform(-3.0, 3.0);
        std::vector<double> pred2 = pred, target2 = target;
        for (std::size_t i = 0; i < n; ++i) {
            if (flags[i]) continue;
            for (std::size_t j = 0; j < d; ++j) {
                pred2[i * d + j] = rng.uniform(-1e6, 1e6);
                target2[i * d + j] = rng.uniform(-1e6, 1e6);
            }
        }
        const ReconNorm norm = trial % 2 ? ReconNorm::L1 : ReconNorm::L2;
        const double a = masked_recon_loss(Tensor({n, d}, pred), Tensor({n, d}, target), mask, norm).item();
        const double b = masked_recon_loss(Tensor({n, d}, pred2), Tensor({n, d}, target2), mask, norm).item();
        if (std::memcmp(&a, &b, sizeof a) != 0) ++violations;
    }
    return {violations == 0, "100 trials (L1/L2 alternating), " + std::to_string(violations) + " bitwise differences"};
}

// 4 ------------------------------------------------------------------------

double naive_dice(const LabelVolume& g, const LabelVolume& p, std::uint16_t c) {
    double inter = 0.0, gs = 0.0, ps = 0.0;
    const std::size_t n = g.extents()[0];
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const std::size_t i = (z * n + y) * n + x;
                const bool gi = g.data[i] == c;
                const bool pi = p.data[i] == c;
                inter += gi && pi;
                gs += gi;
                ps += pi;
            }
    if (gs + ps == 0.0) return 1.0;
    return 2.0 * inter / (gs + ps);
}

Outcome dice_oracle() {
    Rng rng(31);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t k = 2 + rng.uniform_index(4);
        LabelVolume g({8, 8, 8}, k), p({8, 8, 8}, k);
        for (auto& x : g.data) x = static_cast<std::uint16_t>(rng.uniform_index(k));
        for (auto& x : p.data) x = static_cast<std::uint16_t>(rng.uniform_index(k));
        for (std::uint16_t c = 1; c < k; ++c) worst = std::max(worst, std::abs(dice(g, p, c) - naive_dice(g, p, c)));
    }
    const std::vector<std::uint16_t> hg{1, 1, 0, 0}, hp{1, 0, 1, 0};
    const double hand = dice(std::span<const std::uint16_t>(hg), std::span<const std::uint16_t>(hp), 1);
    return {worst <= 1e-12 && hand == 0.5,
            "200 random 8^3 pairs, max |diff| " + fmt("%.1e", worst) + "; hand case " + fmt("%.3f", hand)};
}

// 5 ------------------------------------------------------------------------

Outcome sliding_identity() {
    const SegmentFn identity = [](const Volume& w) {
        return Tensor({w.channels, w.depth, w.height, w.width}, w.data);
    };
    double worst = 0.0;
    std::uint32_t min_cover = ~0u;
    Rng rng(41);
    const std::vector<std::pair<Extents, std::size_t>> cases{
        {{96, 96, 96}, 64}, {{40, 48, 57}, 16}, {{20, 33, 18}, 24}, {{32, 32, 32}, 32}};
    for (const auto& [e, w] : cases) {
        Volume v(1, e);
        for (double& x : v.data) x = rng.uniform(-1000.0, 1000.0);
        const SlidingWindowResult r = sliding_window_infer(identity, v, {w, 0.5});
        for (std::size_t i = 0; i < v.data.size(); ++i) worst = std::max(worst, std::abs(r.logits[i] - v.data[i]));
        for (auto c : r.coverage) min_cover = std::min(min_cover, c);
    }
    return {worst <= 1e-12 && min_cover >= 1,
            "4 volumes, max |diff| " + fmt("%.1e", worst) + ", min coverage " + std::to_string(min_cover)};
}

// 6 ------------------------------------------------------------------------

Outcome determinism() {
    const auto data = synth_generate(61, 8, {32, 32, 32}, 3, SynthOptions{});
    std::vector<Volume> images;
    for (const auto& d : data) images.push_back(d.image);
    const ModelConfig mc = tiny_mim(Method::MAE);
    TrainConfig tc;
    tc.base_lr = 1e-3;
    tc.window = 32;
    tc.batch_size = 2;
    tc.warmup_epochs = 5;
    tc.total_epochs = 50;  // 4 steps per epoch
    tc.seed = 62;
    const fs::path a = scratch_dir("det_a");
    const fs::path b = scratch_dir("det_b");
    const PretrainResult ra = pretrain(mc, tc, {8, 0.75}, images, {a});
    const PretrainResult rb = pretrain(mc, tc, {8, 0.75}, images, {b});
    const bool same_ckpt = file_bytes(a / "final.ckpt") == file_bytes(b / "final.ckpt");
    const bool same_trace = file_bytes(a / "loss_trace.jsonl") == file_bytes(b / "loss_trace.jsonl");
    bool same_periodic = ra.checkpoints.size() == rb.checkpoints.size();
    for (std::size_t i = 0; same_periodic && i < ra.checkpoints.size(); ++i) {
        same_periodic = file_bytes(ra.checkpoints[i]) == file_bytes(rb.checkpoints[i]);
    }
    return {ra.trace.size() == 200 && same_ckpt && same_trace && same_periodic,
            std::to_string(ra.trace.size()) + " steps; final checkpoint " + (same_ckpt ? "identical" : "DIFFERS") +
                ", trace " + (same_trace ? "identical" : "DIFFERS") + ", " +
                std::to_string(ra.checkpoints.size()) + " periodic checkpoints " +
                (same_periodic ? "identical" : "DIFFER")};
}

// 7 ------------------------------------------------------------------------

// One fixed batch (two 16^3 volumes with fixed masks), masked L1 objective.
Outcome overfit_one(Method method) {
    const auto t0 = Clock::now();
    const ModelConfig mc = tiny_mim(method);
    const auto data = synth_generate(71, 2, {16, 16, 16}, 3, SynthOptions{});
    const PatchGrid grid = make_grid({16, 16, 16}, 1, 8);
    Rng rng(72);
    std::vector<Mask> masks;
    for (std::size_t i = 0; i < data.size(); ++i) masks.push_back(sample_mask(grid, {8, 0.75}, rng));
    Params params = init_params(mc, 73);
    TrainConfig tc;
    tc.weight_decay = 0.0;
    OptState opt;
    const std::size_t steps = 500;
    double loss = 0.0;
    std::size_t first_below = 0;
    for (std::size_t s = 1; s <= steps; ++s) {
        Graph g;
        Grads grads;
        {
            ActiveGraph scope(g);
            Tensor total;
            for (std::size_t i = 0; i < data.size(); ++i) {
                const Tensor l = mim_forward(mc, params, data[i].image, masks[i]).loss;
                total = total.defined() ? add(total, l) : l;
            }
            total = scale(total, 1.0 / static_cast<double>(data.size()));
            loss = total.item();
            grads = collect_grads(g.backward(total), params);
        }
        if (loss < 0.01 && first_below == 0) first_below = s;
        adamw_step(params, grads, opt, lr_at(s, 25, steps, 3e-3), tc);
    }
    // Loss after the last update.
    double final_loss = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) final_loss += mim_forward(mc, params, data[i].image, masks[i]).loss.item();
    final_loss /= static_cast<double>(data.size());
    const double secs = seconds_since(t0);
    return {final_loss < 0.01 && secs < 300.0,
            to_string(method) + ": final masked L1 " + fmt("%.2e", final_loss) + ", first < 0.01 at step " +
                (first_below ? std::to_string(first_below) : std::string("never")) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome overfit_sanity() {
    const Outcome mae = overfit_one(Method::MAE);
    const Outcome simmim = overfit_one(Method::SimMIM);
    return {mae.pass && simmim.pass, mae.detail + "; " + simmim.detail};
}

// 8 ------------------------------------------------------------------------

// Per seed: SimMIM pretraining on 64 unlabeled volumes, then UNETR fine-tuning
// from the pretrained encoder and from scratch with identical schedules.
struct TransferSeed {
    bool reached = false;
    bool not_worse = false;
    std::string line;
};

TransferSeed transfer_seed(std::uint64_t seed) {
    const Extents extent{48, 48, 48};
    const std::size_t classes = 4;
    const auto unlabeled = synth_generate(derive_seed(seed, 1), 64, extent, classes, SynthOptions{});
    const auto train = synth_generate(derive_seed(seed, 2), 8, extent, classes, SynthOptions{});
    const auto val = synth_generate(derive_seed(seed, 3), 4, extent, classes, SynthOptions{});
    std::vector<Volume> images;
    for (const auto& u : unlabeled) images.push_back(u.image);

    ModelConfig mim = tiny_mim(Method::SimMIM);
    mim.recon_norm = ReconNorm::L2;
    TrainConfig pt;
    pt.base_lr = 2e-3;
    pt.batch_size = 4;
    pt.window = 32;
    pt.warmup_epochs = 12;
    pt.total_epochs = 120;  // 16 steps per epoch
    pt.seed = seed;
    const PretrainResult pre = pretrain(mim, pt, {8, 0.75}, images);

    ModelConfig seg = tiny_mim(Method::UNETR);
    seg.unetr.num_classes = classes;
    TrainConfig ft;
    ft.base_lr = 3e-3;
    ft.batch_size = 2;
    ft.window = 32;
    ft.warmup_epochs = 15;
    ft.total_epochs = 150;  // 4 steps per epoch
    ft.eval_every = 10;
    ft.seed = seed;
    const SlidingWindowConfig sw{48, 0.5};
    const FinetuneResult warm = finetune(pre.checkpoint, seg, ft, train, val, sw);
    const FinetuneResult cold = finetune(std::nullopt, seg, ft, train, val, sw);

    const double target = cold.dice_trace.back().average;
    const std::size_t cold_steps = cold.dice_trace.back().step;
    std::size_t reached_at = 0;
    for (const auto& r : warm.dice_trace) {
        if (r.average >= target) {
            reached_at = r.step;
            break;
        }
    }
    TransferSeed out;
    out.reached = reached_at != 0 && static_cast<double>(reached_at) <= 0.8 * static_cast<double>(cold_steps);
    out.not_worse = warm.dice_trace.back().average >= target;
    out.line = "seed " + std::to_string(seed) + ": pretrain loss " + fmt("%.4f", pre.trace.front().loss) + " -> " +
               fmt("%.4f", pre.trace.back().loss) + ", scratch " + fmt("%.4f", target) + " at step " +
               std::to_string(cold_steps) + ", pretrained " + fmt("%.4f", warm.dice_trace.back().average) +
               ", reached scratch final at " + (reached_at ? "step " + std::to_string(reached_at) : std::string("never"));
    return out;
}

Outcome transfer_experiment() {
    const auto t0 = Clock::now();
    std::size_t wins = 0;
    std::string detail;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const TransferSeed r = transfer_seed(800 + seed);
        wins += r.reached && r.not_worse;
        std::cout << "  " << r.line << std::endl;
    }
    const double secs = seconds_since(t0);
    return {wins >= 4 && secs <= 2700.0,
            std::to_string(wins) + "/5 seeds faster and not worse, " + fmt("%.0f", secs) + " s"};
}

// 9 ------------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(VMIM_CLI_PATH) + " " + args + " > \"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome ablation_harness() {
    const auto t0 = Clock::now();
    const fs::path dir = scratch_dir("ablate");
    const fs::path log = dir / "cli.log";
    const std::string d = dir.string();
    for (const auto& [name, seed, count] : std::vector<std::tuple<std::string, int, int>>{
             {"unlabeled", 91, 4}, {"labeled", 92, 2}, {"val", 93, 2}}) {
        const int rc = run_cli("synth --seed " + std::to_string(seed) + " --count " + std::to_string(count) +
                                   " --shape 64 --classes 3 --out " + d + "/" + name,
                               log);
        if (rc != 0) return {false, "synth exited " + std::to_string(rc) + ": " + file_bytes(log)};
    }
    const std::string common = " --data " + d + "/unlabeled --labeled " + d + "/labeled --val " + d +
                               "/val --method mae --window 64 --pretrain-epochs 2 --finetune-epochs 2"
                               " --set pretrain.batch_size=2 --set finetune.window=32 --seed 9";
    // An invalid cell is rejected before training.
    const int bad = run_cli("ablate" + common + " --patches 16,24 --ratios 0.75 --out " + d + "/bad", log);
    const bool bad_rejected = bad == 2 && !fs::exists(dir / "bad" / "ablation.md");

    const int rc = run_cli("ablate" + common + " --patches 16,32 --ratios 0.15,0.75 --out " + d + "/run", log);
    if (rc != 0) return {false, "ablate exited " + std::to_string(rc) + ": " + file_bytes(log)};
    const std::string table = file_bytes(dir / "run" / "ablation.md");
    std::istringstream lines(table);
    std::string line;
    std::vector<std::string> rows;
    while (std::getline(lines, line)) rows.push_back(line);
    const bool header = !rows.empty() && rows[0] == "| Method | Masked patch size | Masking ratio | Dice score Avg. |";
    const std::vector<std::string> cells{"| mae | 16 | 0.15 |", "| mae | 16 | 0.75 |", "| mae | 32 | 0.15 |",
                                         "| mae | 32 | 0.75 |"};
    bool layout = rows.size() == 6;
    for (std::size_t i = 0; layout && i < cells.size(); ++i) layout = rows[i + 2].rfind(cells[i], 0) == 0;
    const bool manifest = fs::exists(dir / "run" / "manifest.json");
    return {header && layout && bad_rejected && manifest,
            "4-cell table " + std::string(header && layout ? "in ablation layout" : "MALFORMED") +
                ", invalid grid exit " + std::to_string(bad) + ", " + fmt("%.0f", seconds_since(t0)) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
    // Optional argument: comma-separated criterion numbers to run.
    std::vector<int> only;
    if (argc > 1) {
        std::stringstream ss(argv[1]);
        std::string item;
        while (std::getline(ss, item, ',')) only.push_back(std::stoi(item));
    }
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"masking exactness and uniformity", masking_exactness},
        {"loss locality", loss_locality},
        {"dice oracle", dice_oracle},
        {"sliding-window identity", sliding_identity},
        {"determinism", determinism},
        {"overfit sanity", overfit_sanity},
        {"desk-scale transfer", transfer_experiment},
        {"ablation harness", ablation_harness},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << ": " << o.detail
                  << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
