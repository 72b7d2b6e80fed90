#include "vmim/config.hpp"

#include <set>
#include <stdexcept>

namespace vmim {

namespace {

// Missing keys keep their defaults; unknown keys are an error.
class Reader {
public:
    Reader(const Json& j, const char* what) : j_(j), what_(what) {
        if (!j.is_object()) {
            throw std::invalid_argument(std::string(what) + " config must be an object");
        }
    }
    ~Reader() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (const auto& [key, value] : j_.items()) {
            if (!known_.count(key)) {
                throw std::invalid_argument("unknown " + std::string(what_) + " config key '" + key + "'");
            }
        }
    }

    template <typename T>
    void operator()(const char* key, T& field) {
        known_.insert(key);
        if (!j_.contains(key)) return;
        try {
            j_.at(key).get_to(field);
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument(std::string(what_) + "." + key + ": " + e.what());
        }
    }

private:
    const Json& j_;
    const char* what_;
    std::set<std::string> known_;
};

}  // namespace

void to_json(Json& j, const ViTConfig& c) {
    j = Json{{"embed_dim", c.embed_dim}, {"depth", c.depth},         {"num_heads", c.num_heads},
             {"token_patch", c.token_patch}, {"mlp_ratio", c.mlp_ratio}, {"channels", c.channels},
             {"learned_pos", c.learned_pos}, {"max_grid", c.max_grid}};
}

void from_json(const Json& j, ViTConfig& c) {
    Reader r(j, "vit");
    r("embed_dim", c.embed_dim);
    r("depth", c.depth);
    r("num_heads", c.num_heads);
    r("token_patch", c.token_patch);
    r("mlp_ratio", c.mlp_ratio);
    r("channels", c.channels);
    r("learned_pos", c.learned_pos);
    r("max_grid", c.max_grid);
}

void to_json(Json& j, const MAEDecoderConfig& c) {
    j = Json{{"decoder_dim", c.decoder_dim}, {"decoder_depth", c.decoder_depth}, {"decoder_heads", c.decoder_heads}};
}

void from_json(const Json& j, MAEDecoderConfig& c) {
    Reader r(j, "mae");
    r("decoder_dim", c.decoder_dim);
    r("decoder_depth", c.decoder_depth);
    r("decoder_heads", c.decoder_heads);
}

void to_json(Json& j, const SimCLRConfig& c) {
    j = Json{{"hidden_dim", c.hidden_dim}, {"proj_dim", c.proj_dim}, {"temperature", c.temperature}};
}

void from_json(const Json& j, SimCLRConfig& c) {
    Reader r(j, "simclr");
    r("hidden_dim", c.hidden_dim);
    r("proj_dim", c.proj_dim);
    r("temperature", c.temperature);
}

void to_json(Json& j, const UNETRConfig& c) {
    j = Json{{"num_classes", c.num_classes}, {"base_channels", c.base_channels}};
}

void from_json(const Json& j, UNETRConfig& c) {
    Reader r(j, "unetr");
    r("num_classes", c.num_classes);
    r("base_channels", c.base_channels);
}

void to_json(Json& j, const ModelConfig& c) {
    j = Json{{"method", to_string(c.method)}, {"vit", c.vit},   {"mae", c.mae},
             {"simclr", c.simclr},           {"unetr", c.unetr}, {"recon_norm", to_string(c.recon_norm)}};
}

void from_json(const Json& j, ModelConfig& c) {
    std::string method = to_string(c.method);
    std::string norm = to_string(c.recon_norm);
    {
        Reader r(j, "model");
        r("method", method);
        r("vit", c.vit);
        r("mae", c.mae);
        r("simclr", c.simclr);
        r("unetr", c.unetr);
        r("recon_norm", norm);
    }
    c.method = method_from_string(method);
    c.recon_norm = recon_norm_from_string(norm);
}

void to_json(Json& j, const MaskingConfig& c) {
    j = Json{{"masked_patch", c.masked_patch}, {"ratio", c.ratio}};
}

void from_json(const Json& j, MaskingConfig& c) {
    Reader r(j, "masking");
    r("masked_patch", c.masked_patch);
    r("ratio", c.ratio);
}

void to_json(Json& j, const SlidingWindowConfig& c) {
    j = Json{{"window", c.window}, {"overlap", c.overlap}};
}

void from_json(const Json& j, SlidingWindowConfig& c) {
    Reader r(j, "inference");
    r("window", c.window);
    r("overlap", c.overlap);
}

void to_json(Json& j, const TrainConfig& c) {
    j = Json{{"base_lr", c.base_lr},
             {"min_lr", c.min_lr},
             {"weight_decay", c.weight_decay},
             {"beta1", c.beta1},
             {"beta2", c.beta2},
             {"eps", c.eps},
             {"grad_clip", c.grad_clip},
             {"batch_size", c.batch_size},
             {"warmup_epochs", c.warmup_epochs},
             {"total_epochs", c.total_epochs},
             {"window", c.window},
             {"checkpoint_every", c.checkpoint_every},
             {"eval_every", c.eval_every},
             {"labeled_ratio", c.labeled_ratio},
             {"dice_weight", c.dice_weight},
             {"seed", c.seed}};
}

void from_json(const Json& j, TrainConfig& c) {
    Reader r(j, "train");
    r("base_lr", c.base_lr);
    r("min_lr", c.min_lr);
    r("weight_decay", c.weight_decay);
    r("beta1", c.beta1);
    r("beta2", c.beta2);
    r("eps", c.eps);
    r("grad_clip", c.grad_clip);
    r("batch_size", c.batch_size);
    r("warmup_epochs", c.warmup_epochs);
    r("total_epochs", c.total_epochs);
    r("window", c.window);
    r("checkpoint_every", c.checkpoint_every);
    r("eval_every", c.eval_every);
    r("labeled_ratio", c.labeled_ratio);
    r("dice_weight", c.dice_weight);
    r("seed", c.seed);
}

}  // namespace vmim
