#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "vmim/rng.hpp"
#include "vmim/tensor.hpp"
#include "vmim/volume.hpp"

namespace vmim {

using GridCoord = std::array<std::size_t, 3>;

struct PatchGrid {
    std::size_t token_patch = 16;
    Extents grid{1, 1, 1};
    std::size_t channels = 1;

    std::size_t tokens() const { return grid[0] * grid[1] * grid[2]; }
    std::size_t token_dim() const { return channels * token_patch * token_patch * token_patch; }
    Extents extents() const { return {grid[0] * token_patch, grid[1] * token_patch, grid[2] * token_patch}; }
    GridCoord coord(std::size_t token) const {
        return {token / (grid[1] * grid[2]), (token / grid[2]) % grid[1], token % grid[2]};
    }
    bool operator==(const PatchGrid&) const = default;
};

// Throws std::invalid_argument naming the first axis not divisible by p.
PatchGrid make_grid(Extents extents, std::size_t channels, std::size_t p);

struct TokenBatch {
    Tensor tokens;                  // [N, channels * p^3]
    std::vector<GridCoord> coords;  // row-major over the grid
    PatchGrid grid;
};

// Row n holds the channels x p x p x p block at grid cell n, flattened
// channel-major then depth, height, width.
TokenBatch patchify(const Volume& v, std::size_t p);
Volume unpatchify(const Tensor& tokens, const PatchGrid& grid);
Volume unpatchify(const TokenBatch& batch);

struct MaskingConfig {
    std::size_t masked_patch = 16;  // q, a multiple of the token patch
    double ratio = 0.75;
};

struct Mask {
    std::vector<std::size_t> masked;  // sorted token ids
    std::size_t total = 0;

    bool empty() const { return masked.empty(); }
    std::vector<bool> flags() const;
    std::vector<std::size_t> visible() const;
};

// Checks q % p == 0, ratio in [0, 1] and grid divisibility by q / p.
void validate_masking(const PatchGrid& grid, const MaskingConfig& cfg);
std::size_t super_cells(const PatchGrid& grid, const MaskingConfig& cfg);
std::size_t expected_masked_count(const PatchGrid& grid, const MaskingConfig& cfg);

// Draws floor(ratio * super_cells) super-cells without replacement and masks
// every token inside them.
Mask sample_mask(const PatchGrid& grid, const MaskingConfig& cfg, Rng& rng);

// Fixed 3-D sin/cos table [N, dim]: dim / 3 columns per axis (depth, height,
// width), each split into dim / 6 sines then dim / 6 cosines with
// frequencies 10000^(-k / (dim / 6)). Requires dim % 6 == 0.
Tensor positional_encoding(const PatchGrid& grid, std::size_t dim);
// Same table at the largest multiple of 6 not above dim, right-padded with zeros.
Tensor positional_encoding_padded(const PatchGrid& grid, std::size_t dim);

}  // namespace vmim
