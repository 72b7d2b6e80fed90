#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vmim/infer.hpp"
#include "vmim/models.hpp"
#include "vmim/patch.hpp"
#include "vmim/rng.hpp"
#include "vmim/volume.hpp"

namespace vmim {

struct TrainConfig {
    double base_lr = 3e-4;
    double min_lr = 0.0;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global L2 norm; 0 disables
    std::size_t batch_size = 2;
    std::size_t warmup_epochs = 1;
    std::size_t total_epochs = 10;
    std::size_t window = 32;
    std::size_t checkpoint_every = 0;  // epochs; 0 means max(1, total_epochs / 10)
    std::size_t eval_every = 1;        // fine-tuning validation cadence in epochs
    double labeled_ratio = 1.0;
    double dice_weight = 0.5;
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& cfg, std::size_t token_patch);

struct OptState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    std::uint64_t t = 0;
};

using Grads = std::map<std::string, Tensor>;

Grads collect_grads(const GradientMap& grads, const Params& params);

// Decoupled weight decay (w -= lr * wd * w) followed by the bias-corrected
// Adam step; advances state.t. Throws on a non-finite gradient, naming it.
void adamw_step(Params& params, const Grads& grads, OptState& state, double lr, const TrainConfig& cfg);

// Linear warmup from 0 to base_lr, then half-cosine down to min_lr.
double lr_at(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr,
             double min_lr = 0.0);

struct Crop {
    Volume image;
    std::optional<LabelVolume> labels;
    Extents start{};
};

Crop crop_sampler(const Volume& v, const LabelVolume* labels, std::size_t window, Rng& rng);

// floor(ratio * n) ids drawn without replacement, returned in ascending
// order; ratio 1 returns ids unchanged.
std::vector<std::size_t> subset_labeled(const std::vector<std::size_t>& ids, double ratio, std::uint64_t seed);

struct LossRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct DiceRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    std::map<std::size_t, double> per_class;
    double average = 0.0;
};

std::string to_json_line(const LossRecord& r);
std::string to_json_line(const DiceRecord& r);

struct TrainOutputs {
    // When set, traces and periodic checkpoints are written here.
    std::optional<std::filesystem::path> dir;
    bool verbose = false;
};

struct PretrainResult {
    Checkpoint checkpoint;
    std::vector<LossRecord> trace;
    std::vector<std::filesystem::path> checkpoints;
    std::size_t steps_per_epoch = 0;
};

PretrainResult pretrain(const ModelConfig& model, const TrainConfig& train, const MaskingConfig& masking,
                        const std::vector<Volume>& dataset, const TrainOutputs& outputs = {});

struct FinetuneResult {
    Checkpoint checkpoint;
    std::vector<LossRecord> trace;
    std::vector<DiceRecord> dice_trace;
    std::vector<std::size_t> train_ids;
    std::size_t steps_per_epoch = 0;
};

// Segmentation config `model` must be a UNETR config; when `pretrained` is
// given its ViT config must match and its encoder weights replace the
// freshly initialised ones.
FinetuneResult finetune(const std::optional<Checkpoint>& pretrained, const ModelConfig& model,
                        const TrainConfig& train, const std::vector<LabeledVolume>& train_set,
                        const std::vector<LabeledVolume>& val_set, const SlidingWindowConfig& swi,
                        const TrainOutputs& outputs = {});

}  // namespace vmim
