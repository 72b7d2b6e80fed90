#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "vmim/config.hpp"
#include "vmim/infer.hpp"
#include "vmim/train.hpp"

#ifndef VMIM_VERSION
#define VMIM_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace vmim;

namespace {

// Bad flags, unknown config keys and invalid config values exit with 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

Json train_section(const TrainConfig& tc) {
    Json j = tc;
    j.erase("seed");
    return j;
}

Json default_config() {
    ModelConfig model;
    model.mae = mae_decoder_tiny();
    model.unetr.num_classes = 0;  // taken from the labeled data
    TrainConfig train;
    return Json{
        {"seed", 0},
        {"model", model},
        {"masking", MaskingConfig{}},
        {"pretrain", train_section(train)},
        {"finetune", train_section(train)},
        {"inference", SlidingWindowConfig{}},
        {"synth", {{"count", 4}, {"shape", {48, 48, 48}}, {"classes", 3}, {"noise_sigma", 0.1}, {"occupancy", 0.25}}},
        {"io",
         {{"data", ""}, {"val", ""}, {"labeled", ""}, {"checkpoint", ""}, {"volume", ""}, {"out", ""}}},
        {"eval", {{"class_names", Json::array()}}},
        {"reconstruct", {{"depths", Json::array()}}},
        {"ablate", {{"patches", {16, 32}}, {"ratios", {0.15, 0.75}}}},
    };
}

// Overlays `src` onto `dst`; every key must already exist in `dst`.
void merge(Json& dst, const Json& src, const std::string& where) {
    if (!src.is_object()) {
        throw UsageError("config " + (where.empty() ? std::string("document") : where) + " must be an object");
    }
    for (const auto& [key, value] : src.items()) {
        const std::string path = where.empty() ? key : where + "." + key;
        if (!dst.contains(key)) {
            throw UsageError("unknown config key '" + path + "'");
        }
        if (dst[key].is_object()) {
            merge(dst[key], value, path);
        } else {
            dst[key] = value;
        }
    }
}

Json parse_value(const std::string& text, const Json& current) {
    if (current.is_string()) return text;
    if (current.is_array()) {
        if (!text.empty() && text.front() == '[') return Json::parse(text);
        Json arr = Json::array();
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            try {
                arr.push_back(Json::parse(item));
            } catch (const Json::exception&) {
                arr.push_back(item);
            }
        }
        return arr;
    }
    try {
        return Json::parse(text);
    } catch (const Json::exception&) {
        throw UsageError("cannot parse value '" + text + "'");
    }
}

void set_dotted(Json& doc, const std::string& key, const std::string& text) {
    Json* node = &doc;
    std::stringstream ss(key);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (!node->is_object() || !node->contains(part)) {
            throw UsageError("unknown config key '" + key + "'");
        }
        node = &(*node)[part];
    }
    if (node->is_object()) {
        throw UsageError("config key '" + key + "' names a section, not a value");
    }
    *node = parse_value(text, *node);
}

template <typename T>
T section(const Json& doc, const char* key) {
    try {
        return doc.at(key).get<T>();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    } catch (const Json::exception& e) {
        throw UsageError(std::string(key) + ": " + e.what());
    }
}

TrainConfig train_config(const Json& doc, const char* key) {
    Json j = doc.at(key);
    j["seed"] = doc.at("seed");
    try {
        return j.get<TrainConfig>();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
}

std::string io(const Json& doc, const char* key, bool required = true) {
    const std::string value = doc.at("io").at(key).get<std::string>();
    if (required && value.empty()) {
        throw UsageError(std::string("missing --") + key + " (io." + key + ")");
    }
    return value;
}

// The common option block: a config file, --set overrides and named flags
// that alias dotted keys.
struct Command {
    CLI::App* app = nullptr;
    std::string config_file;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> aliases;  // flag -> key
    std::map<std::string, std::string> values;
    bool verbose = false;

    void alias(const std::string& flag, const std::string& key, const std::string& help) {
        aliases.emplace_back(flag, key);
        app->add_option("--" + flag, values[flag], help + " (" + key + ")");
    }

    Json resolve() const {
        Json doc = default_config();
        if (!config_file.empty()) {
            std::ifstream f(config_file);
            if (!f) {
                throw UsageError("cannot read config " + config_file);
            }
            Json file;
            try {
                file = Json::parse(f);
            } catch (const Json::exception& e) {
                throw UsageError("config " + config_file + ": " + e.what());
            }
            // A run manifest doubles as a config file.
            if (file.contains("manifest_version") && file.contains("config")) file = file["config"];
            merge(doc, file, "");
        }
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) {
                throw UsageError("--set expects key=value, got '" + s + "'");
            }
            set_dotted(doc, s.substr(0, eq), s.substr(eq + 1));
        }
        for (const auto& [flag, key] : aliases) {
            if (app->count("--" + flag) > 0) set_dotted(doc, key, values.at(flag));
        }
        return doc;
    }
};

Command make_command(CLI::App& root, const std::string& name, const std::string& help) {
    Command c;
    c.app = root.add_subcommand(name, help);
    return c;
}

void add_common(Command& c) {
    c.app->add_option("--config", c.config_file, "JSON config file or a previous run manifest");
    c.app->add_option("--set", c.sets, "Override any config value by dotted key, e.g. pretrain.base_lr=1e-3");
    c.app->add_flag("--verbose", c.verbose, "Echo trace records to stderr");
    c.alias("seed", "seed", "Run seed");
    c.alias("out", "io.out", "Output directory");
}

void write_manifest(const fs::path& dir, const std::string& subcommand, const Json& config,
                    const std::vector<fs::path>& artifacts) {
    fs::create_directories(dir);
    Json paths = Json::array();
    for (const auto& p : artifacts) paths.push_back(p.string());
    const Json manifest{{"manifest_version", 1},
                        {"tool", "vmim"},
                        {"version", VMIM_VERSION},
                        {"subcommand", subcommand},
                        {"seed", config.at("seed")},
                        {"config", config},
                        {"artifacts", paths}};
    std::ofstream f(dir / "manifest.json");
    if (!f) {
        throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    }
    f << manifest.dump(2) << '\n';
}

std::size_t shared_classes(const std::vector<LabeledVolume>& data, const std::string& what) {
    const std::size_t k = data.front().labels.num_classes;
    for (const auto& item : data) {
        if (item.labels.num_classes != k) {
            throw std::runtime_error(what + " mixes label maps with different class counts");
        }
    }
    return k;
}

// Fills model.unetr.num_classes from the data when left at 0.
ModelConfig segmentation_config(Json& doc, std::size_t data_classes) {
    if (doc["model"]["unetr"]["num_classes"].get<std::size_t>() == 0) {
        doc["model"]["unetr"]["num_classes"] = data_classes;
    }
    ModelConfig seg = section<ModelConfig>(doc, "model");
    seg.method = Method::UNETR;
    try {
        validate(seg);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    return seg;
}

std::string format_dice(double d) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", d);
    return buf;
}

int run_synth(const Command& c) {
    Json doc = c.resolve();
    const Json& s = doc.at("synth");
    const auto shape_list = s.at("shape").get<std::vector<std::size_t>>();
    Extents shape{};
    if (shape_list.size() == 1) {
        shape = {shape_list[0], shape_list[0], shape_list[0]};
    } else if (shape_list.size() == 3) {
        shape = {shape_list[0], shape_list[1], shape_list[2]};
    } else {
        throw UsageError("synth.shape takes one edge or three extents");
    }
    SynthOptions opt;
    opt.noise_sigma = s.at("noise_sigma").get<double>();
    opt.occupancy = s.at("occupancy").get<double>();
    const auto count = s.at("count").get<std::size_t>();
    const auto classes = s.at("classes").get<std::size_t>();
    const fs::path out = io(doc, "out");

    std::vector<fs::path> artifacts;
    for (std::size_t i = 0; i < count; ++i) {
        const fs::path stem = cli::case_stem(out, i);
        artifacts.push_back(fs::path(stem).replace_extension(".vol"));
        artifacts.push_back(fs::path(stem).replace_extension(".lab"));
    }
    std::vector<LabeledVolume> data;
    try {
        data = synth_generate(doc.at("seed").get<std::uint64_t>(), count, shape, classes, opt);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    write_manifest(out, "synth", doc, artifacts);
    for (std::size_t i = 0; i < data.size(); ++i) cli::save_case(out, i, data[i]);
    std::cout << "wrote " << count << " cases to " << out.string() << '\n';
    return 0;
}

int run_pretrain(const Command& c) {
    Json doc = c.resolve();
    const ModelConfig model = section<ModelConfig>(doc, "model");
    const MaskingConfig masking = section<MaskingConfig>(doc, "masking");
    const TrainConfig train = train_config(doc, "pretrain");
    const fs::path out = io(doc, "out");
    try {
        validate(model);
        validate(train, model.vit.token_patch);
        if (model.method == Method::UNETR) throw std::invalid_argument("pretrain method must be mae, simmim or simclr");
        if (model.method != Method::SimCLR) {
            validate_masking(make_grid({train.window, train.window, train.window}, model.vit.channels,
                                       model.vit.token_patch),
                             masking);
        }
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto data = cli::load_images(io(doc, "data"));
    write_manifest(out, "pretrain", doc, {out / "loss_trace.jsonl", out / "final.ckpt"});
    const PretrainResult r = pretrain(model, train, masking, data, {out, c.verbose});
    std::cout << "pretrained " << r.trace.size() << " steps, final loss " << r.trace.back().loss << ", checkpoint "
              << (out / "final.ckpt").string() << '\n';
    return 0;
}

int run_finetune(const Command& c) {
    Json doc = c.resolve();
    const auto train_set = cli::load_labeled(io(doc, "data"));
    const std::string val_dir = io(doc, "val", false);
    const auto val_set = val_dir.empty() ? std::vector<LabeledVolume>{} : cli::load_labeled(val_dir);
    const ModelConfig seg = segmentation_config(doc, shared_classes(train_set, "training data"));
    const TrainConfig train = train_config(doc, "finetune");
    const SlidingWindowConfig swi = section<SlidingWindowConfig>(doc, "inference");
    try {
        validate(train, seg.vit.token_patch);
        (void)swi.stride();
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const std::string ckpt_path = io(doc, "checkpoint", false);
    std::optional<Checkpoint> pretrained;
    if (!ckpt_path.empty()) pretrained = load_checkpoint(ckpt_path);
    const fs::path out = io(doc, "out");
    write_manifest(out, "finetune", doc, {out / "loss_trace.jsonl", out / "dice_trace.jsonl", out / "final.ckpt"});
    const FinetuneResult r = finetune(pretrained, seg, train, train_set, val_set, swi, {out, c.verbose});
    std::cout << "finetuned " << r.trace.size() << " steps on " << r.train_ids.size() << " labeled volumes";
    if (!r.dice_trace.empty()) std::cout << ", final dice avg " << format_dice(r.dice_trace.back().average);
    std::cout << '\n';
    return 0;
}

int run_eval(const Command& c) {
    Json doc = c.resolve();
    const SlidingWindowConfig swi = section<SlidingWindowConfig>(doc, "inference");
    const auto names = doc.at("eval").at("class_names").get<std::vector<std::string>>();
    const Checkpoint ckpt = load_checkpoint(io(doc, "checkpoint"));
    const auto data = cli::load_labeled(io(doc, "data"));
    const std::string out = io(doc, "out", false);
    if (!out.empty()) write_manifest(out, "eval", doc, {fs::path(out) / "dice.json"});
    const DiceReport report = evaluate(ckpt, data, swi, names);
    const std::string text = report.to_json();
    if (!out.empty()) {
        std::ofstream(fs::path(out) / "dice.json") << text << '\n';
    }
    std::cout << text << '\n';
    return 0;
}

int run_reconstruct(const Command& c) {
    Json doc = c.resolve();
    const MaskingConfig masking = section<MaskingConfig>(doc, "masking");
    const auto depths = doc.at("reconstruct").at("depths").get<std::vector<std::size_t>>();
    if (depths.empty()) {
        throw UsageError("missing --depths (reconstruct.depths)");
    }
    const Checkpoint ckpt = load_checkpoint(io(doc, "checkpoint"));
    const Volume v = load_volume(io(doc, "volume"));
    const fs::path out = io(doc, "out");
    std::vector<fs::path> artifacts;
    for (std::size_t d : depths) {
        for (const char* kind : {"original", "masked", "recon"}) {
            char name[48];
            std::snprintf(name, sizeof name, "slice_%03zu_%s.pgm", d, kind);
            artifacts.push_back(out / name);
        }
    }
    write_manifest(out, "reconstruct", doc, artifacts);
    const auto written = reconstruct_dump(ckpt, v, masking, depths, out, doc.at("seed").get<std::uint64_t>());
    std::cout << "wrote " << written.size() << " slices to " << out.string() << '\n';
    return 0;
}

int run_ablate(const Command& c) {
    Json doc = c.resolve();
    const ModelConfig model = section<ModelConfig>(doc, "model");
    const auto patches = doc.at("ablate").at("patches").get<std::vector<std::size_t>>();
    const auto ratios = doc.at("ablate").at("ratios").get<std::vector<double>>();
    const TrainConfig pre = train_config(doc, "pretrain");
    const TrainConfig fine = train_config(doc, "finetune");
    const SlidingWindowConfig swi = section<SlidingWindowConfig>(doc, "inference");
    if (patches.empty() || ratios.empty()) {
        throw UsageError("ablate needs at least one masked patch size and one ratio");
    }
    if (model.method != Method::MAE && model.method != Method::SimMIM) {
        throw UsageError("ablate sweeps masking, so model.method must be mae or simmim");
    }

    // Every cell is checked before any training starts.
    const std::size_t w = pre.window;
    try {
        validate(model);
        validate(pre, model.vit.token_patch);
        validate(fine, model.vit.token_patch);
        (void)swi.stride();
        const PatchGrid grid = make_grid({w, w, w}, model.vit.channels, model.vit.token_patch);
        for (std::size_t q : patches)
            for (double r : ratios) {
                const MaskingConfig cell{q, r};
                validate_masking(grid, cell);
                if (expected_masked_count(grid, cell) == 0) {
                    throw std::invalid_argument("cell " + std::to_string(q) + "/" + format_dice(r) +
                                                " masks no patch of a " + std::to_string(w) + " window");
                }
            }
    } catch (const std::invalid_argument& e) {
        throw UsageError("ablate: " + std::string(e.what()));
    }

    const auto unlabeled = cli::load_images(io(doc, "data"));
    const auto labeled = cli::load_labeled(io(doc, "labeled"));
    const auto val = cli::load_labeled(io(doc, "val"));
    const ModelConfig seg = segmentation_config(doc, shared_classes(labeled, "labeled data"));
    const fs::path out = io(doc, "out");
    write_manifest(out, "ablate", doc, {out / "ablation.md", out / "ablation.json"});

    std::ostringstream table;
    table << "| Method | Masked patch size | Masking ratio | Dice score Avg. |\n";
    table << "|---|---|---|---|\n";
    Json rows = Json::array();
    std::uint64_t cell_index = 0;
    for (std::size_t q : patches)
        for (double r : ratios) {
            const std::uint64_t cell_seed = derive_seed(pre.seed, cell_index++);
            TrainConfig cell_pre = pre;
            TrainConfig cell_fine = fine;
            cell_pre.seed = cell_seed;
            cell_fine.seed = cell_seed;
            const PretrainResult p = pretrain(model, cell_pre, {q, r}, unlabeled, {std::nullopt, c.verbose});
            const FinetuneResult f = finetune(p.checkpoint, seg, cell_fine, labeled, {}, swi, {std::nullopt, c.verbose});
            const DiceReport report = evaluate(f.checkpoint, val, swi);
            char ratio[16];
            std::snprintf(ratio, sizeof ratio, "%.2f", r);
            table << "| " << to_string(model.method) << " | " << q << " | " << ratio << " | "
                  << format_dice(report.average) << " |\n";
            rows.push_back({{"method", to_string(model.method)},
                            {"masked_patch", q},
                            {"ratio", r},
                            {"seed", cell_seed},
                            {"dice", nlohmann::ordered_json::parse(report.to_json())}});
            std::cerr << "cell " << q << "/" << ratio << " dice avg " << format_dice(report.average) << '\n';
        }
    std::ofstream(out / "ablation.md") << table.str();
    std::ofstream(out / "ablation.json") << rows.dump(2) << '\n';
    std::cout << table.str();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Volumetric masked image modeling: pretraining, fine-tuning and evaluation", "vmim"};
    app.set_version_flag("--version", VMIM_VERSION);
    app.require_subcommand(1);

    Command synth = make_command(app, "synth", "Generate a synthetic labeled dataset");
    add_common(synth);
    synth.alias("count", "synth.count", "Number of volumes");
    synth.alias("shape", "synth.shape", "Volume edge, or D,H,W");
    synth.alias("classes", "synth.classes", "Label classes including background");
    synth.alias("noise-sigma", "synth.noise_sigma", "Gaussian noise sigma");

    Command pre = make_command(app, "pretrain", "Self-supervised pretraining (mae, simmim, simclr)");
    add_common(pre);
    pre.alias("data", "io.data", "Dataset directory");
    pre.alias("method", "model.method", "mae | simmim | simclr");
    pre.alias("mask-ratio", "masking.ratio", "Masking ratio");
    pre.alias("masked-patch", "masking.masked_patch", "Masked patch size in voxels");
    pre.alias("token-patch", "model.vit.token_patch", "Token patch size");
    pre.alias("epochs", "pretrain.total_epochs", "Epochs");
    pre.alias("warmup-epochs", "pretrain.warmup_epochs", "Warmup epochs");
    pre.alias("batch-size", "pretrain.batch_size", "Batch size");
    pre.alias("lr", "pretrain.base_lr", "Base learning rate");
    pre.alias("weight-decay", "pretrain.weight_decay", "AdamW weight decay");
    pre.alias("window", "pretrain.window", "Crop edge");

    Command fine = make_command(app, "finetune", "Fine-tune a UNETR segmenter, optionally from a checkpoint");
    add_common(fine);
    fine.alias("data", "io.data", "Labeled training directory");
    fine.alias("val", "io.val", "Labeled validation directory");
    fine.alias("checkpoint", "io.checkpoint", "Pretrained checkpoint; omit to train from scratch");
    fine.alias("classes", "model.unetr.num_classes", "Segmentation classes (0 = from labels)");
    fine.alias("labeled-ratio", "finetune.labeled_ratio", "Fraction of labeled volumes used");
    fine.alias("epochs", "finetune.total_epochs", "Epochs");
    fine.alias("warmup-epochs", "finetune.warmup_epochs", "Warmup epochs");
    fine.alias("batch-size", "finetune.batch_size", "Batch size");
    fine.alias("lr", "finetune.base_lr", "Base learning rate");
    fine.alias("weight-decay", "finetune.weight_decay", "AdamW weight decay");
    fine.alias("window", "finetune.window", "Crop edge");
    fine.alias("eval-every", "finetune.eval_every", "Validation cadence in epochs");
    fine.alias("sw-window", "inference.window", "Sliding-window edge for validation");
    fine.alias("overlap", "inference.overlap", "Sliding-window overlap");

    Command eval = make_command(app, "eval", "Sliding-window Dice evaluation of a segmentation checkpoint");
    add_common(eval);
    eval.alias("checkpoint", "io.checkpoint", "Segmentation checkpoint");
    eval.alias("data", "io.data", "Labeled dataset directory");
    eval.alias("window", "inference.window", "Sliding-window edge");
    eval.alias("overlap", "inference.overlap", "Sliding-window overlap");
    eval.alias("class-names", "eval.class_names", "Comma-separated class names by label id, background first");

    Command recon = make_command(app, "reconstruct", "Dump original/masked/reconstructed slices as PGM");
    add_common(recon);
    recon.alias("checkpoint", "io.checkpoint", "MAE or SimMIM checkpoint");
    recon.alias("volume", "io.volume", "Volume payload (.vol)");
    recon.alias("depths", "reconstruct.depths", "Comma-separated depth indices");
    recon.alias("mask-ratio", "masking.ratio", "Masking ratio");
    recon.alias("masked-patch", "masking.masked_patch", "Masked patch size in voxels");

    Command abl = make_command(app, "ablate", "Masked patch size x masking ratio sweep");
    add_common(abl);
    abl.alias("data", "io.data", "Unlabeled pretraining directory");
    abl.alias("labeled", "io.labeled", "Labeled fine-tuning directory");
    abl.alias("val", "io.val", "Labeled evaluation directory");
    abl.alias("method", "model.method", "mae | simmim");
    abl.alias("patches", "ablate.patches", "Comma-separated masked patch sizes");
    abl.alias("ratios", "ablate.ratios", "Comma-separated masking ratios");
    abl.alias("pretrain-epochs", "pretrain.total_epochs", "Pretraining epochs per cell");
    abl.alias("finetune-epochs", "finetune.total_epochs", "Fine-tuning epochs per cell");
    abl.alias("window", "pretrain.window", "Pretraining crop edge");

    if (argc > 1 && argv[1][0] != '-') {
        bool known = false;
        for (const auto* sub : app.get_subcommands({})) known = known || sub->get_name() == argv[1];
        if (!known) {
            std::cerr << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
            return 2;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    const std::vector<std::pair<const Command*, int (*)(const Command&)>> commands{
        {&synth, run_synth}, {&pre, run_pretrain}, {&fine, run_finetune},
        {&eval, run_eval},   {&recon, run_reconstruct}, {&abl, run_ablate}};
    for (const auto& [cmd, fn] : commands) {
        if (!cmd->app->parsed()) continue;
        try {
            return fn(*cmd);
        } catch (const UsageError& e) {
            std::cerr << "error: " << e.what() << "\n\n" << cmd->app->help();
            return 2;
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 1;
        }
    }
    return 2;
}
