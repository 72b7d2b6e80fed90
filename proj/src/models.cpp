#include "vmim/models.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "vmim/config.hpp"
#include "vmim/rng.hpp"

namespace vmim {

std::string to_string(Method m) {
    switch (m) {
        case Method::MAE: return "mae";
        case Method::SimMIM: return "simmim";
        case Method::SimCLR: return "simclr";
        case Method::UNETR: return "unetr";
    }
    return "mae";
}

Method method_from_string(const std::string& s) {
    if (s == "mae" || s == "MAE") return Method::MAE;
    if (s == "simmim" || s == "SimMIM") return Method::SimMIM;
    if (s == "simclr" || s == "SimCLR") return Method::SimCLR;
    if (s == "unetr" || s == "UNETR") return Method::UNETR;
    throw std::invalid_argument("unknown method '" + s + "'");
}

ViTConfig vit_tiny() {
    return {};
}

ViTConfig vit_base() {
    ViTConfig c;
    c.embed_dim = 768;
    c.depth = 12;
    c.num_heads = 12;
    c.token_patch = 16;
    return c;
}

MAEDecoderConfig mae_decoder_tiny() {
    return {32, 2, 4};
}

void validate(const ModelConfig& cfg) {
    const ViTConfig& v = cfg.vit;
    if (v.embed_dim == 0 || v.num_heads == 0 || v.embed_dim % v.num_heads != 0) {
        throw std::invalid_argument("embed_dim " + std::to_string(v.embed_dim) + " is not divisible by num_heads " +
                                    std::to_string(v.num_heads));
    }
    if (v.embed_dim < 6) {
        throw std::invalid_argument("embed_dim must be >= 6 for 3-D positional encodings");
    }
    if (v.token_patch == 0 || v.channels == 0 || v.mlp_ratio == 0) {
        throw std::invalid_argument("token_patch, channels and mlp_ratio must be positive");
    }
    if (cfg.method == Method::MAE) {
        const MAEDecoderConfig& d = cfg.mae;
        if (d.decoder_dim < 6 || d.decoder_heads == 0 || d.decoder_dim % d.decoder_heads != 0) {
            throw std::invalid_argument("decoder_dim " + std::to_string(d.decoder_dim) +
                                        " must be >= 6 and divisible by decoder_heads");
        }
    }
    if (cfg.method == Method::SimCLR && (cfg.simclr.hidden_dim == 0 || cfg.simclr.proj_dim == 0)) {
        throw std::invalid_argument("simclr head dims must be positive");
    }
    if (cfg.method == Method::UNETR) {
        const std::size_t p = v.token_patch;
        if (p < 4 || !std::has_single_bit(p)) {
            throw std::invalid_argument("UNETR-lite needs a power-of-two token patch >= 4, got " + std::to_string(p));
        }
        if (v.depth < 4) {
            throw std::invalid_argument("UNETR-lite taps 4 blocks but depth is " + std::to_string(v.depth));
        }
        if (cfg.unetr.num_classes < 2 || cfg.unetr.base_channels == 0) {
            throw std::invalid_argument("UNETR-lite needs >= 2 classes and positive base_channels");
        }
    }
}

// ---------------------------------------------------------------------------
// Initialisation

namespace {

std::uint64_t name_hash(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

class Initializer {
public:
    Initializer(Params& params, std::uint64_t seed) : params_(params), seed_(seed) {}

    void weight(const std::string& name, Shape shape) {
        Rng rng(derive_seed(seed_, name_hash(name)));
        std::vector<double> data(numel(shape));
        if (fan_in_) {
            // He normal over the input-channel axis for the convolutional decoder.
            const double sd = std::sqrt(2.0 / static_cast<double>(shape[shape.size() - 2]));
            for (double& x : data) x = rng.normal(0.0, sd);
        } else {
            for (double& x : data) x = rng.truncated_normal(0.02, 0.04);
        }
        put(name, std::move(shape), std::move(data));
    }
    void use_fan_in(bool on) { fan_in_ = on; }
    void normal(const std::string& name, Shape shape) {
        Rng rng(derive_seed(seed_, name_hash(name)));
        std::vector<double> data(numel(shape));
        for (double& x : data) x = rng.normal(0.0, 0.02);
        put(name, std::move(shape), std::move(data));
    }
    void constant(const std::string& name, Shape shape, double value) {
        put(name, shape, std::vector<double>(numel(shape), value));
    }
    void linear(const std::string& prefix, std::size_t in, std::size_t out) {
        weight(prefix + ".weight", {in, out});
        constant(prefix + ".bias", {out}, 0.0);
    }
    void deconv(const std::string& prefix, std::size_t in, std::size_t out) {
        weight(prefix + ".weight", {2, 2, 2, in, out});
        constant(prefix + ".bias", {out}, 0.0);
    }
    void norm(const std::string& prefix, std::size_t dim) {
        constant(prefix + ".weight", {dim}, 1.0);
        constant(prefix + ".bias", {dim}, 0.0);
    }
    void block(const std::string& prefix, std::size_t dim, std::size_t mlp_ratio) {
        norm(prefix + ".norm1", dim);
        linear(prefix + ".attn.qkv", dim, 3 * dim);
        linear(prefix + ".attn.proj", dim, dim);
        norm(prefix + ".norm2", dim);
        linear(prefix + ".mlp.fc1", dim, mlp_ratio * dim);
        linear(prefix + ".mlp.fc2", mlp_ratio * dim, dim);
    }

private:
    void put(const std::string& name, Shape shape, std::vector<double> data) {
        if (!params_.emplace(name, Tensor(std::move(shape), std::move(data), true)).second) {
            throw std::logic_error("duplicate parameter name " + name);
        }
    }
    Params& params_;
    std::uint64_t seed_;
    bool fan_in_ = false;
};

std::size_t stage_count(std::size_t p) {
    return static_cast<std::size_t>(std::countr_zero(p));
}

std::size_t stage_channels(const UNETRConfig& u, std::size_t stages, std::size_t s) {
    return u.base_channels << (stages - s);
}

// Decoder stage that receives tap k (1..3): tap 3 joins stage 1, tap 2 stage 2,
// tap 1 stage 3, never deeper than the last stage above voxel resolution.
std::size_t tap_stage(std::size_t k, std::size_t stages) {
    return std::min(4 - k, stages - 1);
}

std::string block_name(const std::string& prefix, std::size_t i) {
    return prefix + ".blocks." + std::to_string(i);
}

}  // namespace

Params init_params(const ModelConfig& cfg, std::uint64_t seed) {
    validate(cfg);
    Params params;
    Initializer init(params, seed);
    const ViTConfig& v = cfg.vit;
    const std::size_t e = v.embed_dim;
    const std::size_t token_dim = v.channels * v.token_patch * v.token_patch * v.token_patch;

    init.linear("encoder.patch_embed", token_dim, e);
    if (v.learned_pos) {
        init.weight("encoder.pos_embed", {v.max_grid * v.max_grid * v.max_grid, e});
    }
    for (std::size_t i = 0; i < v.depth; ++i) init.block(block_name("encoder", i), e, v.mlp_ratio);
    init.norm("encoder.norm", e);

    switch (cfg.method) {
        case Method::MAE: {
            const std::size_t d = cfg.mae.decoder_dim;
            init.linear("mae.decoder_embed", e, d);
            init.normal("mae.mask_token", {1, d});
            for (std::size_t i = 0; i < cfg.mae.decoder_depth; ++i) init.block(block_name("mae", i), d, v.mlp_ratio);
            init.norm("mae.norm", d);
            init.linear("mae.pred", d, token_dim);
            break;
        }
        case Method::SimMIM:
            init.normal("simmim.mask_token", {1, e});
            init.linear("simmim.head", e, token_dim);
            break;
        case Method::SimCLR:
            init.linear("simclr.proj1", e, cfg.simclr.hidden_dim);
            init.linear("simclr.proj2", cfg.simclr.hidden_dim, cfg.simclr.proj_dim);
            break;
        case Method::UNETR: {
            const UNETRConfig& u = cfg.unetr;
            const std::size_t stages = stage_count(v.token_patch);
            init.use_fan_in(true);
            init.linear("unetr.bottleneck", e, stage_channels(u, stages, 0));
            for (std::size_t s = 1; s <= stages; ++s) {
                const std::size_t c = stage_channels(u, stages, s);
                init.deconv("unetr.up" + std::to_string(s), stage_channels(u, stages, s - 1), c);
                std::size_t parts = 2;
                if (s < stages) {
                    parts = 1;
                    for (std::size_t k = 1; k <= 3; ++k) {
                        if (tap_stage(k, stages) != s) continue;
                        ++parts;
                        for (std::size_t j = 0; j < s; ++j) {
                            init.deconv("unetr.skip" + std::to_string(k) + "." + std::to_string(j), j == 0 ? e : c, c);
                        }
                    }
                } else {
                    init.linear("unetr.stem", v.channels, c);
                }
                init.linear("unetr.merge" + std::to_string(s), parts * c, c);
            }
            init.linear("unetr.head", stage_channels(u, stages, stages), u.num_classes);
            break;
        }
    }
    return params;
}

std::size_t parameter_count(const Params& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Transformer

namespace {

const Tensor& param(const Params& params, const std::string& name) {
    const auto it = params.find(name);
    if (it == params.end()) {
        throw std::invalid_argument("missing parameter " + name);
    }
    return it->second;
}

Tensor dense(const Params& params, const std::string& prefix, const Tensor& x) {
    return linear(x, param(params, prefix + ".weight"), param(params, prefix + ".bias"));
}

Tensor norm(const Params& params, const std::string& prefix, const Tensor& x) {
    return layernorm(x, param(params, prefix + ".weight"), param(params, prefix + ".bias"));
}

Tensor deconv(const Params& params, const std::string& prefix, const Tensor& x) {
    return transpose_conv3d(x, param(params, prefix + ".weight"), param(params, prefix + ".bias"), 2);
}

Tensor attention(const Params& params, const std::string& prefix, const Tensor& x, std::size_t heads) {
    const std::size_t n = x.dim(0);
    const std::size_t e = x.dim(1);
    const std::size_t dh = e / heads;
    const Tensor qkv = permute(reshape(dense(params, prefix + ".qkv", x), {n, 3, heads, dh}), {1, 2, 0, 3});
    const Tensor q = reshape(slice(qkv, 0, 0, 1), {heads, n, dh});
    const Tensor k = reshape(slice(qkv, 0, 1, 1), {heads, n, dh});
    const Tensor v = reshape(slice(qkv, 0, 2, 1), {heads, n, dh});
    const Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
    const Tensor out = matmul(softmax(scores, 2), v);
    return dense(params, prefix + ".proj", reshape(permute(out, {1, 0, 2}), {n, e}));
}

Tensor transformer_block(const Params& params, const std::string& prefix, const Tensor& x, std::size_t heads) {
    const Tensor h = add(x, attention(params, prefix + ".attn", norm(params, prefix + ".norm1", x), heads));
    const Tensor m = dense(params, prefix + ".mlp.fc2", gelu(dense(params, prefix + ".mlp.fc1", norm(params, prefix + ".norm2", h))));
    return add(h, m);
}

void check_volume(const ViTConfig& cfg, const Volume& v) {
    if (v.channels != cfg.channels) {
        throw std::invalid_argument("model expects " + std::to_string(cfg.channels) + " channels, volume has " +
                                    std::to_string(v.channels));
    }
}

std::vector<std::size_t> all_ids(std::size_t n) {
    std::vector<std::size_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
    return ids;
}

}  // namespace

Tensor encoder_positions(const ViTConfig& cfg, const Params& params, const PatchGrid& grid,
                         const std::vector<std::size_t>& token_ids) {
    if (!cfg.learned_pos) {
        return gather_rows(positional_encoding_padded(grid, cfg.embed_dim), token_ids);
    }
    const std::size_t m = cfg.max_grid;
    for (std::size_t a = 0; a < 3; ++a) {
        if (grid.grid[a] > m) {
            throw std::invalid_argument("token grid exceeds the learned position table (max_grid " +
                                        std::to_string(m) + ")");
        }
    }
    std::vector<std::size_t> rows;
    rows.reserve(token_ids.size());
    for (std::size_t id : token_ids) {
        const GridCoord c = grid.coord(id);
        rows.push_back((c[0] * m + c[1]) * m + c[2]);
    }
    return gather_rows(param(params, "encoder.pos_embed"), rows);
}

Tensor patch_embed(const ViTConfig&, const Params& params, const Tensor& tokens) {
    return dense(params, "encoder.patch_embed", tokens);
}

Tensor encode_embedded(const ViTConfig& cfg, const Params& params, const Tensor& x, const Tensor& positions,
                       std::vector<Tensor>* taps) {
    Tensor h = add(x, positions);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
        h = transformer_block(params, block_name("encoder", i), h, cfg.num_heads);
        if (taps) taps->push_back(h);
    }
    return norm(params, "encoder.norm", h);
}

Tensor encode(const ViTConfig& cfg, const Params& params, const Tensor& tokens, const Tensor& positions,
              std::vector<Tensor>* taps) {
    return encode_embedded(cfg, params, patch_embed(cfg, params, tokens), positions, taps);
}

// ---------------------------------------------------------------------------
// Pretraining heads

MIMOutput mae_forward(const ModelConfig& cfg, const Params& params, const Volume& v, const Mask& mask,
                      const Tensor& target) {
    check_volume(cfg.vit, v);
    if (mask.empty()) {
        throw std::invalid_argument("mae_forward: no masked patches to reconstruct");
    }
    const TokenBatch tb = patchify(v, cfg.vit.token_patch);
    const std::size_t n = tb.grid.tokens();
    if (mask.total != n) {
        throw std::invalid_argument("mae_forward: mask covers " + std::to_string(mask.total) + " tokens, volume has " +
                                    std::to_string(n));
    }
    MIMOutput out;
    out.grid = tb.grid;
    out.target = target.defined() ? target : tb.tokens;
    const std::vector<std::size_t> visible = mask.visible();
    const Tensor mask_rows = gather_rows(param(params, "mae.mask_token"), std::vector<std::size_t>(mask.masked.size(), 0));
    Tensor full = scatter_rows(mask_rows, mask.masked, n);
    if (!visible.empty()) {
        const Tensor latent = encode(cfg.vit, params, gather_rows(tb.tokens, visible),
                                     encoder_positions(cfg.vit, params, tb.grid, visible));
        full = add(full, scatter_rows(dense(params, "mae.decoder_embed", latent), visible, n));
    }
    Tensor h = add(full, positional_encoding_padded(tb.grid, cfg.mae.decoder_dim));
    for (std::size_t i = 0; i < cfg.mae.decoder_depth; ++i) {
        h = transformer_block(params, block_name("mae", i), h, cfg.mae.decoder_heads);
    }
    out.prediction = dense(params, "mae.pred", norm(params, "mae.norm", h));
    out.loss = masked_recon_loss(out.prediction, out.target, mask, cfg.recon_norm);
    out.encoder_tokens = visible.size();
    out.decoder_tokens = n;
    return out;
}

MIMOutput simmim_forward(const ModelConfig& cfg, const Params& params, const Volume& v, const Mask& mask,
                         const Tensor& target) {
    check_volume(cfg.vit, v);
    if (mask.empty()) {
        throw std::invalid_argument("simmim_forward: no masked patches to reconstruct");
    }
    const TokenBatch tb = patchify(v, cfg.vit.token_patch);
    const std::size_t n = tb.grid.tokens();
    if (mask.total != n) {
        throw std::invalid_argument("simmim_forward: mask covers " + std::to_string(mask.total) +
                                    " tokens, volume has " + std::to_string(n));
    }
    MIMOutput out;
    out.grid = tb.grid;
    out.target = target.defined() ? target : tb.tokens;
    std::vector<double> keep(n, 1.0);
    std::vector<double> hide(n, 0.0);
    for (std::size_t id : mask.masked) {
        keep[id] = 0.0;
        hide[id] = 1.0;
    }
    const Tensor embedded = patch_embed(cfg.vit, params, tb.tokens);
    const Tensor x = add(mul(embedded, Tensor({n, 1}, std::move(keep))),
                         mul(param(params, "simmim.mask_token"), Tensor({n, 1}, std::move(hide))));
    const Tensor latent = encode_embedded(cfg.vit, params, x, encoder_positions(cfg.vit, params, tb.grid, all_ids(n)));
    out.prediction = dense(params, "simmim.head", latent);
    out.loss = masked_recon_loss(out.prediction, out.target, mask, cfg.recon_norm);
    out.encoder_tokens = n;
    out.decoder_tokens = 0;
    return out;
}

MIMOutput mim_forward(const ModelConfig& cfg, const Params& params, const Volume& v, const Mask& mask,
                      const Tensor& target) {
    switch (cfg.method) {
        case Method::MAE: return mae_forward(cfg, params, v, mask, target);
        case Method::SimMIM: return simmim_forward(cfg, params, v, mask, target);
        default: break;
    }
    throw std::invalid_argument("mim_forward: method " + to_string(cfg.method) + " is not a masked image model");
}

Tensor simclr_embeddings(const ModelConfig& cfg, const Params& params, const std::vector<Volume>& view1,
                         const std::vector<Volume>& view2) {
    if (view1.size() != view2.size()) {
        throw std::invalid_argument("simclr: views hold different batch sizes");
    }
    if (view1.size() < 2) {
        throw std::invalid_argument("simclr: batch size must be >= 2 to provide negatives");
    }
    std::vector<Tensor> pooled;
    for (const auto* views : {&view1, &view2}) {
        for (const Volume& v : *views) {
            check_volume(cfg.vit, v);
            const TokenBatch tb = patchify(v, cfg.vit.token_patch);
            const Tensor latent = encode(cfg.vit, params, tb.tokens,
                                         encoder_positions(cfg.vit, params, tb.grid, all_ids(tb.grid.tokens())));
            pooled.push_back(reshape(mean(latent, 0), {1, cfg.vit.embed_dim}));
        }
    }
    const Tensor z = dense(params, "simclr.proj2", gelu(dense(params, "simclr.proj1", concat(pooled, 0))));
    const Tensor norms = sqrt(sum(square(z), 1));
    return div(z, reshape(norms, {z.dim(0), 1}));
}

Tensor simclr_forward(const ModelConfig& cfg, const Params& params, const std::vector<Volume>& view1,
                      const std::vector<Volume>& view2) {
    return ntxent(simclr_embeddings(cfg, params, view1, view2), cfg.simclr.temperature);
}

// ---------------------------------------------------------------------------
// Segmentation

std::vector<std::size_t> unetr_taps(std::size_t depth) {
    if (depth < 4) {
        throw std::invalid_argument("UNETR-lite taps 4 blocks but depth is " + std::to_string(depth));
    }
    std::vector<std::size_t> taps;
    for (std::size_t k = 1; k <= 4; ++k) taps.push_back((depth * k + 3) / 4);
    return taps;
}

Tensor unetr_segment(const ModelConfig& cfg, const Params& params, const Volume& v) {
    validate(cfg);
    check_volume(cfg.vit, v);
    const ViTConfig& vc = cfg.vit;
    const TokenBatch tb = patchify(v, vc.token_patch);
    const PatchGrid& g = tb.grid;
    std::vector<Tensor> blocks;
    const Tensor latent =
        encode(vc, params, tb.tokens, encoder_positions(vc, params, g, all_ids(g.tokens())), &blocks);
    const std::vector<std::size_t> taps = unetr_taps(vc.depth);
    const std::size_t stages = stage_count(vc.token_patch);
    auto to_grid = [&](const Tensor& t) { return reshape(t, {g.grid[0], g.grid[1], g.grid[2], vc.embed_dim}); };

    Tensor f = dense(params, "unetr.bottleneck", to_grid(latent));
    for (std::size_t s = 1; s <= stages; ++s) {
        const std::string stage = std::to_string(s);
        std::vector<Tensor> parts{deconv(params, "unetr.up" + stage, f)};
        if (s < stages) {
            for (std::size_t k = 3; k >= 1; --k) {
                if (tap_stage(k, stages) != s) continue;
                Tensor t = to_grid(blocks[taps[k - 1] - 1]);
                for (std::size_t j = 0; j < s; ++j) {
                    t = gelu(deconv(params, "unetr.skip" + std::to_string(k) + "." + std::to_string(j), t));
                }
                parts.push_back(t);
            }
        } else {
            std::vector<double> raw(v.data.size());
            const std::size_t vox = v.voxels();
            for (std::size_t c = 0; c < v.channels; ++c)
                for (std::size_t i = 0; i < vox; ++i) raw[i * v.channels + c] = v.data[c * vox + i];
            const Tensor voxels({v.depth, v.height, v.width, v.channels}, std::move(raw));
            parts.push_back(gelu(dense(params, "unetr.stem", voxels)));
        }
        f = gelu(dense(params, "unetr.merge" + stage, concat(parts, 3)));
    }
    return permute(dense(params, "unetr.head", f), {3, 0, 1, 2});
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[] = "VMIM1";

template <typename T>
void put_le(std::string& out, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

class ByteReader {
public:
    ByteReader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

    template <typename T>
    T get() {
        using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
        need(sizeof(T));
        U bits = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b) {
            bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
        }
        pos_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }
    std::string take(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) {
            throw std::runtime_error("checkpoint " + path_ + " is truncated");
        }
    }
    std::string bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const Json header{{"format", kMagic}, {"model", ckpt.model}, {"step", ckpt.step}};
    const std::string text = header.dump();
    std::string out(kMagic);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out += text;
    put_le<std::uint64_t>(out, ckpt.params.size());
    for (const auto& [name, t] : ckpt.params) {
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
        for (double x : t.data()) put_le<double>(out, x);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot write checkpoint " + path.string());
    }
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open checkpoint " + path.string());
    }
    ByteReader in(std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()), path.string());
    if (in.take(5) != kMagic) {
        throw std::runtime_error("checkpoint " + path.string() + " does not start with " + kMagic);
    }
    Checkpoint ckpt;
    try {
        const Json header = Json::parse(in.take(in.get<std::uint32_t>()));
        ckpt.model = header.at("model").get<ModelConfig>();
        ckpt.step = header.value("step", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("checkpoint " + path.string() + " has a garbled header: " + e.what());
    }
    const auto count = in.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = in.take(in.get<std::uint32_t>());
        Shape shape(in.get<std::uint32_t>());
        for (auto& d : shape) d = in.get<std::uint64_t>();
        std::vector<double> data(numel(shape));
        for (double& x : data) x = in.get<double>();
        ckpt.params.emplace(std::move(name), Tensor(std::move(shape), std::move(data), true));
    }
    if (!in.done()) {
        throw std::runtime_error("checkpoint " + path.string() + " has trailing bytes");
    }
    return ckpt;
}

}  // namespace vmim
