#include "vmim/train.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"
#include "vmim/objectives.hpp"

namespace vmim {

void validate(const TrainConfig& cfg, std::size_t token_patch) {
    if (!(cfg.base_lr > 0.0) || cfg.min_lr < 0.0 || cfg.min_lr > cfg.base_lr) {
        throw std::invalid_argument("train: need base_lr > 0 and 0 <= min_lr <= base_lr");
    }
    if (cfg.weight_decay < 0.0 || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
        !(cfg.eps > 0.0) || cfg.grad_clip < 0.0) {
        throw std::invalid_argument("train: optimizer hyperparameters out of range");
    }
    if (cfg.total_epochs == 0 || cfg.warmup_epochs > cfg.total_epochs) {
        throw std::invalid_argument("train: need total_epochs >= 1 and warmup_epochs <= total_epochs");
    }
    if (cfg.batch_size == 0 || cfg.eval_every == 0) {
        throw std::invalid_argument("train: batch_size and eval_every must be positive");
    }
    if (cfg.window == 0 || cfg.window % token_patch != 0) {
        throw std::invalid_argument("train: window " + std::to_string(cfg.window) +
                                    " is not a positive multiple of token patch " + std::to_string(token_patch));
    }
    if (!(cfg.labeled_ratio > 0.0 && cfg.labeled_ratio <= 1.0)) {
        throw std::invalid_argument("train: labeled_ratio must lie in (0, 1]");
    }
    if (!(cfg.dice_weight >= 0.0 && cfg.dice_weight <= 1.0)) {
        throw std::invalid_argument("train: dice_weight must lie in [0, 1]");
    }
}

Grads collect_grads(const GradientMap& grads, const Params& params) {
    Grads out;
    for (const auto& [name, t] : params) out.emplace(name, grads.of(t));
    return out;
}

void adamw_step(Params& params, const Grads& grads, OptState& state, double lr, const TrainConfig& cfg) {
    for (const auto& [name, g] : grads) {
        const auto it = params.find(name);
        if (it == params.end() || it->second.shape() != g.shape()) {
            throw std::invalid_argument("adamw_step: gradient " + name + " does not match a parameter");
        }
        for (double x : g.data()) {
            if (!std::isfinite(x)) {
                throw std::runtime_error("adamw_step: non-finite gradient for parameter " + name);
            }
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (auto& [name, w] : params) {
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        const auto g = git->second.data();
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) {
            m.assign(g.size(), 0.0);
            v.assign(g.size(), 0.0);
        }
        std::vector<double> next(w.data().begin(), w.data().end());
        for (std::size_t i = 0; i < next.size(); ++i) {
            next[i] -= lr * cfg.weight_decay * next[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            next[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
        w = Tensor(w.shape(), std::move(next), true);
    }
}

double lr_at(std::size_t step, std::size_t warmup_steps, std::size_t total_steps, double base_lr, double min_lr) {
    if (warmup_steps > 0 && step <= warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (total_steps <= warmup_steps) {
        return base_lr;
    }
    const double progress =
        static_cast<double>(std::min(step, total_steps) - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

Crop crop_sampler(const Volume& v, const LabelVolume* labels, std::size_t window, Rng& rng) {
    if (labels && labels->extents() != v.extents()) {
        throw std::invalid_argument("crop_sampler: label extents differ from the image");
    }
    Crop out;
    for (std::size_t a = 0; a < 3; ++a) {
        const std::size_t extent = v.extents()[a];
        if (window > extent) {
            throw std::invalid_argument("crop_sampler: window " + std::to_string(window) + " exceeds extent " +
                                        std::to_string(extent) + " on axis " + std::to_string(a));
        }
        out.start[a] = rng.uniform_index(extent - window + 1);
    }
    out.image = crop_volume(v, out.start, {window, window, window});
    if (labels) {
        out.labels = crop_labels(*labels, out.start, {window, window, window});
    }
    return out;
}

std::vector<std::size_t> subset_labeled(const std::vector<std::size_t>& ids, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument("subset_labeled: ratio must lie in (0, 1]");
    }
    if (ratio == 1.0) {
        if (ids.empty()) {
            throw std::invalid_argument("subset_labeled: empty dataset");
        }
        return ids;
    }
    const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(ids.size())));
    if (k == 0) {
        throw std::invalid_argument("subset_labeled: ratio " + std::to_string(ratio) + " of " +
                                    std::to_string(ids.size()) + " ids selects nothing");
    }
    Rng rng(seed);
    auto picks = rng.sample_without_replacement(ids.size(), k);
    std::sort(picks.begin(), picks.end());
    std::vector<std::size_t> out;
    out.reserve(k);
    for (std::size_t i : picks) out.push_back(ids[i]);
    return out;
}

std::string to_json_line(const LossRecord& r) {
    nlohmann::ordered_json j{{"step", r.step}, {"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}};
    return j.dump();
}

std::string to_json_line(const DiceRecord& r) {
    nlohmann::ordered_json per_class = nlohmann::ordered_json::object();
    for (const auto& [id, d] : r.per_class) per_class[std::to_string(id)] = d;
    nlohmann::ordered_json j{{"step", r.step}, {"epoch", r.epoch}, {"dice", per_class}, {"average", r.average}};
    return j.dump();
}

namespace {

constexpr std::uint64_t kPretrainStream = 0x70726574;  // "pret"
constexpr std::uint64_t kFinetuneStream = 0x66696e65;  // "fine"

std::string epoch_name(std::size_t epoch) {
    std::string digits = std::to_string(epoch);
    if (digits.size() < 4) digits.insert(0, 4 - digits.size(), '0');
    return "checkpoint_epoch_" + digits + ".ckpt";
}

void clip_gradients(Grads& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (double x : g.data()) sq += x * x;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    for (auto& [name, g] : grads) g = scale(g, max_norm / norm);
}

// Steps through epochs of shuffled fixed-size batches; the last batch of an
// epoch wraps around to the front of the shuffled order.
class Loop {
public:
    Loop(const TrainConfig& cfg, std::size_t n, std::uint64_t stream)
        : cfg_(cfg), n_(n), rng_(derive_seed(cfg.seed, stream)) {
        steps_per_epoch_ = (n + cfg.batch_size - 1) / cfg.batch_size;
        total_steps_ = steps_per_epoch_ * cfg.total_epochs;
        warmup_steps_ = steps_per_epoch_ * cfg.warmup_epochs;
    }

    std::size_t steps_per_epoch() const { return steps_per_epoch_; }
    Rng& rng() { return rng_; }

    template <typename BatchLoss, typename EpochEnd>
    std::vector<LossRecord> run(Params& params, BatchLoss&& batch_loss, EpochEnd&& epoch_end,
                                std::ofstream* trace, bool verbose) {
        std::vector<LossRecord> records;
        OptState opt;
        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < cfg_.total_epochs; ++epoch) {
            std::vector<std::size_t> order(n_);
            for (std::size_t i = 0; i < n_; ++i) order[i] = i;
            rng_.shuffle(order);
            for (std::size_t b = 0; b < steps_per_epoch_; ++b) {
                std::vector<std::size_t> batch;
                for (std::size_t i = 0; i < cfg_.batch_size; ++i) batch.push_back(order[(b * cfg_.batch_size + i) % n_]);
                Graph graph;
                Grads grads;
                double value = 0.0;
                {
                    ActiveGraph scope(graph);
                    const Tensor loss = batch_loss(params, batch);
                    value = loss.item();
                    if (!std::isfinite(value)) {
                        throw std::runtime_error("non-finite loss at step " + std::to_string(step + 1));
                    }
                    grads = collect_grads(graph.backward(loss), params);
                }
                clip_gradients(grads, cfg_.grad_clip);
                const double lr = lr_at(step + 1, warmup_steps_, total_steps_, cfg_.base_lr, cfg_.min_lr);
                adamw_step(params, grads, opt, lr, cfg_);
                ++step;
                LossRecord rec{step, epoch, lr, value};
                if (trace) *trace << to_json_line(rec) << '\n';
                if (verbose) std::cerr << to_json_line(rec) << '\n';
                records.push_back(rec);
            }
            epoch_end(epoch, step);
        }
        return records;
    }

private:
    const TrainConfig& cfg_;
    std::size_t n_;
    Rng rng_;
    std::size_t steps_per_epoch_ = 0;
    std::size_t total_steps_ = 0;
    std::size_t warmup_steps_ = 0;
};

std::size_t checkpoint_period(const TrainConfig& cfg) {
    return cfg.checkpoint_every > 0 ? cfg.checkpoint_every : std::max<std::size_t>(1, cfg.total_epochs / 10);
}

std::optional<std::ofstream> open_trace(const TrainOutputs& outputs, const char* name) {
    if (!outputs.dir) return std::nullopt;
    std::filesystem::create_directories(*outputs.dir);
    std::ofstream f(*outputs.dir / name);
    if (!f) {
        throw std::runtime_error("cannot write " + (*outputs.dir / name).string());
    }
    return f;
}

}  // namespace

PretrainResult pretrain(const ModelConfig& model, const TrainConfig& train, const MaskingConfig& masking,
                        const std::vector<Volume>& dataset, const TrainOutputs& outputs) {
    validate(model);
    validate(train, model.vit.token_patch);
    if (dataset.empty()) {
        throw std::invalid_argument("pretrain: empty dataset");
    }
    if (model.method == Method::UNETR) {
        throw std::invalid_argument("pretrain: method must be mae, simmim or simclr");
    }
    const std::size_t w = train.window;
    const PatchGrid grid = make_grid({w, w, w}, model.vit.channels, model.vit.token_patch);
    if (model.method != Method::SimCLR && expected_masked_count(grid, masking) == 0) {
        throw std::invalid_argument("pretrain: masking config hides no patches of a " + std::to_string(w) + " window");
    }
    if (model.method == Method::SimCLR && train.batch_size < 2) {
        throw std::invalid_argument("pretrain: simclr needs batch_size >= 2");
    }

    PretrainResult result;
    result.checkpoint.model = model;
    Params params = init_params(model, train.seed);
    Loop loop(train, dataset.size(), kPretrainStream);
    result.steps_per_epoch = loop.steps_per_epoch();
    auto trace = open_trace(outputs, "loss_trace.jsonl");

    auto batch_loss = [&](const Params& p, const std::vector<std::size_t>& batch) {
        Rng& rng = loop.rng();
        if (model.method == Method::SimCLR) {
            std::vector<Volume> view1;
            std::vector<Volume> view2;
            for (std::size_t idx : batch) {
                for (auto* views : {&view1, &view2}) {
                    Volume crop = crop_sampler(dataset[idx], nullptr, w, rng).image;
                    const double gain = rng.uniform(0.9, 1.1);
                    for (double& x : crop.data) x *= gain;
                    views->push_back(std::move(crop));
                }
            }
            return simclr_forward(model, p, view1, view2);
        }
        Tensor total;
        for (std::size_t idx : batch) {
            const Crop crop = crop_sampler(dataset[idx], nullptr, w, rng);
            const Mask mask = sample_mask(grid, masking, rng);
            const Tensor l = mim_forward(model, p, crop.image, mask).loss;
            total = total.defined() ? add(total, l) : l;
        }
        return scale(total, 1.0 / static_cast<double>(batch.size()));
    };
    const std::size_t period = checkpoint_period(train);
    auto epoch_end = [&](std::size_t epoch, std::size_t step) {
        if (!outputs.dir || (epoch + 1) % period != 0) return;
        const auto path = *outputs.dir / epoch_name(epoch + 1);
        save_checkpoint({model, params, step}, path);
        result.checkpoints.push_back(path);
    };
    result.trace = loop.run(params, batch_loss, epoch_end, trace ? &*trace : nullptr, outputs.verbose);
    result.checkpoint.params = std::move(params);
    result.checkpoint.step = result.trace.size();
    if (outputs.dir) {
        save_checkpoint(result.checkpoint, *outputs.dir / "final.ckpt");
    }
    return result;
}

FinetuneResult finetune(const std::optional<Checkpoint>& pretrained, const ModelConfig& model,
                        const TrainConfig& train, const std::vector<LabeledVolume>& train_set,
                        const std::vector<LabeledVolume>& val_set, const SlidingWindowConfig& swi,
                        const TrainOutputs& outputs) {
    if (model.method != Method::UNETR) {
        throw std::invalid_argument("finetune: model config must be a unetr segmentation config");
    }
    validate(model);
    validate(train, model.vit.token_patch);
    if (train_set.empty()) {
        throw std::invalid_argument("finetune: empty labeled dataset");
    }
    const std::size_t classes = model.unetr.num_classes;
    for (const auto* set : {&train_set, &val_set}) {
        for (const auto& item : *set) {
            if (item.labels.num_classes != classes) {
                throw std::invalid_argument("finetune: labels declare " + std::to_string(item.labels.num_classes) +
                                            " classes, model predicts " + std::to_string(classes));
            }
        }
    }

    FinetuneResult result;
    std::vector<std::size_t> all(train_set.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    result.train_ids = subset_labeled(all, train.labeled_ratio, derive_seed(train.seed, kFinetuneStream + 1));

    Params params = init_params(model, train.seed);
    if (pretrained) {
        if (!(pretrained->model.vit == model.vit)) {
            throw std::invalid_argument("finetune: checkpoint encoder config does not match the segmentation config");
        }
        for (const auto& [name, t] : pretrained->params) {
            if (name.rfind("encoder.", 0) != 0) continue;
            const auto it = params.find(name);
            if (it == params.end() || it->second.shape() != t.shape()) {
                throw std::invalid_argument("finetune: checkpoint tensor " + name + " does not fit the encoder");
            }
            it->second = t.as_parameter();
        }
    }

    const std::size_t w = train.window;
    Loop loop(train, result.train_ids.size(), kFinetuneStream);
    result.steps_per_epoch = loop.steps_per_epoch();
    auto trace = open_trace(outputs, "loss_trace.jsonl");
    auto dice_trace = open_trace(outputs, "dice_trace.jsonl");

    auto batch_loss = [&](const Params& p, const std::vector<std::size_t>& batch) {
        Tensor total;
        for (std::size_t idx : batch) {
            const LabeledVolume& item = train_set[result.train_ids[idx]];
            const Crop crop = crop_sampler(item.image, &item.labels, w, loop.rng());
            const Tensor l = dice_ce_loss(unetr_segment(model, p, crop.image), crop.labels->data, train.dice_weight);
            total = total.defined() ? add(total, l) : l;
        }
        return scale(total, 1.0 / static_cast<double>(batch.size()));
    };
    const std::size_t period = checkpoint_period(train);
    auto epoch_end = [&](std::size_t epoch, std::size_t step) {
        const bool last = epoch + 1 == train.total_epochs;
        if (!val_set.empty() && ((epoch + 1) % train.eval_every == 0 || last)) {
            const SegmentFn fn = [&](const Volume& v) { return unetr_segment(model, params, v); };
            const DiceReport report = evaluate(fn, val_set, classes, swi);
            DiceRecord rec{step, epoch, report.per_class, report.average};
            if (dice_trace) *dice_trace << to_json_line(rec) << '\n';
            if (outputs.verbose) std::cerr << to_json_line(rec) << '\n';
            result.dice_trace.push_back(std::move(rec));
        }
        if (outputs.dir && (epoch + 1) % period == 0) {
            save_checkpoint({model, params, step}, *outputs.dir / epoch_name(epoch + 1));
        }
    };
    result.trace = loop.run(params, batch_loss, epoch_end, trace ? &*trace : nullptr, outputs.verbose);
    result.checkpoint = Checkpoint{model, std::move(params), result.trace.size()};
    if (outputs.dir) {
        save_checkpoint(result.checkpoint, *outputs.dir / "final.ckpt");
    }
    return result;
}

}  // namespace vmim
