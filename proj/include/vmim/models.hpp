#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vmim/objectives.hpp"
#include "vmim/patch.hpp"
#include "vmim/tensor.hpp"
#include "vmim/volume.hpp"

namespace vmim {

struct ViTConfig {
    std::size_t embed_dim = 64;
    std::size_t depth = 4;
    std::size_t num_heads = 4;
    std::size_t token_patch = 8;
    std::size_t mlp_ratio = 4;
    std::size_t channels = 1;
    bool learned_pos = false;
    std::size_t max_grid = 16;  // learned table covers max_grid^3 positions

    bool operator==(const ViTConfig&) const = default;
};

struct MAEDecoderConfig {
    std::size_t decoder_dim = 512;
    std::size_t decoder_depth = 8;
    std::size_t decoder_heads = 16;

    bool operator==(const MAEDecoderConfig&) const = default;
};

struct SimCLRConfig {
    std::size_t hidden_dim = 64;
    std::size_t proj_dim = 32;
    double temperature = 0.5;

    bool operator==(const SimCLRConfig&) const = default;
};

struct UNETRConfig {
    std::size_t num_classes = 14;
    std::size_t base_channels = 8;

    bool operator==(const UNETRConfig&) const = default;
};

enum class Method { MAE, SimMIM, SimCLR, UNETR };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct ModelConfig {
    Method method = Method::MAE;
    ViTConfig vit;
    MAEDecoderConfig mae;
    SimCLRConfig simclr;
    UNETRConfig unetr;
    ReconNorm recon_norm = ReconNorm::L1;

    bool operator==(const ModelConfig&) const = default;
};

ViTConfig vit_tiny();
ViTConfig vit_base();
MAEDecoderConfig mae_decoder_tiny();

// Throws std::invalid_argument for inconsistent head counts and similar.
void validate(const ModelConfig& cfg);

using Params = std::map<std::string, Tensor>;

// Every leaf is drawn from a stream keyed by (seed, name), so a parameter's
// initial value does not depend on which other heads exist.
Params init_params(const ModelConfig& cfg, std::uint64_t seed);
std::size_t parameter_count(const Params& params);

// Positions for the given token ids: fixed sin/cos rows or rows of the
// learned table.
Tensor encoder_positions(const ViTConfig& cfg, const Params& params, const PatchGrid& grid,
                         const std::vector<std::size_t>& token_ids);
Tensor patch_embed(const ViTConfig& cfg, const Params& params, const Tensor& tokens);

// layernorm(blocks(x + positions)) for already embedded rows x [n, embed_dim].
// When taps is non-null it receives the output of every block.
Tensor encode_embedded(const ViTConfig& cfg, const Params& params, const Tensor& x, const Tensor& positions,
                       std::vector<Tensor>* taps = nullptr);
Tensor encode(const ViTConfig& cfg, const Params& params, const Tensor& tokens, const Tensor& positions,
              std::vector<Tensor>* taps = nullptr);

struct MIMOutput {
    Tensor prediction;  // [N, channels * p^3]
    Tensor target;
    Tensor loss;
    PatchGrid grid;
    std::size_t encoder_tokens = 0;
    std::size_t decoder_tokens = 0;
};

// `target` overrides the reconstruction target (patchified volume by default).
MIMOutput mae_forward(const ModelConfig& cfg, const Params& params, const Volume& v, const Mask& mask,
                      const Tensor& target = {});
MIMOutput simmim_forward(const ModelConfig& cfg, const Params& params, const Volume& v, const Mask& mask,
                         const Tensor& target = {});
MIMOutput mim_forward(const ModelConfig& cfg, const Params& params, const Volume& v, const Mask& mask,
                      const Tensor& target = {});

// Mean-pooled encoder features of each view, projected and L2-normalized:
// rows [view1..., view2...].
Tensor simclr_embeddings(const ModelConfig& cfg, const Params& params, const std::vector<Volume>& view1,
                         const std::vector<Volume>& view2);
Tensor simclr_forward(const ModelConfig& cfg, const Params& params, const std::vector<Volume>& view1,
                      const std::vector<Volume>& view2);

// Tap block indices (1-based) ceil(depth * k / 4) for k = 1..4.
std::vector<std::size_t> unetr_taps(std::size_t depth);
// logits [num_classes, D, H, W].
Tensor unetr_segment(const ModelConfig& cfg, const Params& params, const Volume& v);

struct Checkpoint {
    ModelConfig model;
    Params params;
    std::uint64_t step = 0;
};

// "VMIM1", u32 header length, JSON header, u64 tensor count, then per tensor
// u32 name length, name, u32 rank, u64 extents, f64 payload; little-endian.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vmim
