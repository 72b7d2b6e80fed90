#include "vmim/patch.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace vmim {

namespace {

const char* axis_name(std::size_t a) {
    static const char* names[] = {"depth", "height", "width"};
    return names[a];
}

}  // namespace

PatchGrid make_grid(Extents extents, std::size_t channels, std::size_t p) {
    if (p == 0) {
        throw std::invalid_argument("patch size must be positive");
    }
    PatchGrid g;
    g.token_patch = p;
    g.channels = channels;
    for (std::size_t a = 0; a < 3; ++a) {
        if (extents[a] % p != 0 || extents[a] == 0) {
            throw std::invalid_argument(std::string(axis_name(a)) + " extent " + std::to_string(extents[a]) +
                                        " is not divisible by patch size " + std::to_string(p));
        }
        g.grid[a] = extents[a] / p;
    }
    return g;
}

TokenBatch patchify(const Volume& v, std::size_t p) {
    TokenBatch out;
    out.grid = make_grid(v.extents(), v.channels, p);
    const PatchGrid& g = out.grid;
    const std::size_t n = g.tokens();
    const std::size_t dim = g.token_dim();
    std::vector<double> rows(n * dim);
    out.coords.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
        const GridCoord c = g.coord(t);
        out.coords.push_back(c);
        double* row = rows.data() + t * dim;
        for (std::size_t ch = 0; ch < v.channels; ++ch)
            for (std::size_t dz = 0; dz < p; ++dz)
                for (std::size_t dy = 0; dy < p; ++dy) {
                    const double* src = &v.data[v.index(ch, c[0] * p + dz, c[1] * p + dy, c[2] * p)];
                    std::copy(src, src + p, row);
                    row += p;
                }
    }
    out.tokens = Tensor({n, dim}, std::move(rows));
    return out;
}

Volume unpatchify(const Tensor& tokens, const PatchGrid& g) {
    if (tokens.rank() != 2 || tokens.dim(0) != g.tokens() || tokens.dim(1) != g.token_dim()) {
        throw ShapeError("unpatchify: tokens " + to_string(tokens.shape()) + " do not match grid [" +
                         std::to_string(g.tokens()) + ", " + std::to_string(g.token_dim()) + "]");
    }
    const std::size_t p = g.token_patch;
    Volume v(g.channels, g.extents());
    const auto data = tokens.data();
    for (std::size_t t = 0; t < g.tokens(); ++t) {
        const GridCoord c = g.coord(t);
        const double* row = data.data() + t * g.token_dim();
        for (std::size_t ch = 0; ch < g.channels; ++ch)
            for (std::size_t dz = 0; dz < p; ++dz)
                for (std::size_t dy = 0; dy < p; ++dy) {
                    std::copy(row, row + p, &v.data[v.index(ch, c[0] * p + dz, c[1] * p + dy, c[2] * p)]);
                    row += p;
                }
    }
    return v;
}

Volume unpatchify(const TokenBatch& batch) {
    return unpatchify(batch.tokens, batch.grid);
}

std::vector<bool> Mask::flags() const {
    std::vector<bool> f(total, false);
    for (std::size_t id : masked) f[id] = true;
    return f;
}

std::vector<std::size_t> Mask::visible() const {
    std::vector<std::size_t> out;
    out.reserve(total - masked.size());
    std::size_t j = 0;
    for (std::size_t i = 0; i < total; ++i) {
        if (j < masked.size() && masked[j] == i) {
            ++j;
        } else {
            out.push_back(i);
        }
    }
    return out;
}

void validate_masking(const PatchGrid& grid, const MaskingConfig& cfg) {
    const std::size_t p = grid.token_patch;
    if (cfg.masked_patch == 0 || cfg.masked_patch % p != 0) {
        throw std::invalid_argument("masked patch size " + std::to_string(cfg.masked_patch) +
                                    " is not a positive multiple of token patch size " + std::to_string(p));
    }
    if (!(cfg.ratio >= 0.0 && cfg.ratio <= 1.0)) {
        throw std::invalid_argument("masking ratio must lie in [0, 1]");
    }
    const std::size_t m = cfg.masked_patch / p;
    for (std::size_t a = 0; a < 3; ++a) {
        if (grid.grid[a] % m != 0) {
            throw std::invalid_argument(std::string(axis_name(a)) + " token count " + std::to_string(grid.grid[a]) +
                                        " is not divisible by masked-patch span " + std::to_string(m));
        }
    }
}

std::size_t super_cells(const PatchGrid& grid, const MaskingConfig& cfg) {
    validate_masking(grid, cfg);
    const std::size_t m = cfg.masked_patch / grid.token_patch;
    return (grid.grid[0] / m) * (grid.grid[1] / m) * (grid.grid[2] / m);
}

namespace {

std::size_t cells_to_mask(std::size_t cells, double ratio) {
    return std::min(cells, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(cells))));
}

}  // namespace

std::size_t expected_masked_count(const PatchGrid& grid, const MaskingConfig& cfg) {
    const std::size_t m = cfg.masked_patch / grid.token_patch;
    return cells_to_mask(super_cells(grid, cfg), cfg.ratio) * m * m * m;
}

Mask sample_mask(const PatchGrid& grid, const MaskingConfig& cfg, Rng& rng) {
    const std::size_t cells = super_cells(grid, cfg);
    const std::size_t m = cfg.masked_patch / grid.token_patch;
    const Extents sg{grid.grid[0] / m, grid.grid[1] / m, grid.grid[2] / m};
    Mask mask;
    mask.total = grid.tokens();
    for (std::size_t cell : rng.sample_without_replacement(cells, cells_to_mask(cells, cfg.ratio))) {
        const std::size_t cz = cell / (sg[1] * sg[2]);
        const std::size_t cy = (cell / sg[2]) % sg[1];
        const std::size_t cx = cell % sg[2];
        for (std::size_t z = cz * m; z < (cz + 1) * m; ++z)
            for (std::size_t y = cy * m; y < (cy + 1) * m; ++y)
                for (std::size_t x = cx * m; x < (cx + 1) * m; ++x) {
                    mask.masked.push_back((z * grid.grid[1] + y) * grid.grid[2] + x);
                }
    }
    std::sort(mask.masked.begin(), mask.masked.end());
    return mask;
}

Tensor positional_encoding(const PatchGrid& grid, std::size_t dim) {
    if (dim == 0 || dim % 6 != 0) {
        throw std::invalid_argument("positional encoding dim " + std::to_string(dim) + " is not divisible by 6");
    }
    const std::size_t per_axis = dim / 3;
    const std::size_t freqs = dim / 6;
    std::vector<double> omega(freqs);
    for (std::size_t k = 0; k < freqs; ++k) {
        omega[k] = 1.0 / std::pow(10000.0, static_cast<double>(k) / static_cast<double>(freqs));
    }
    const std::size_t n = grid.tokens();
    std::vector<double> table(n * dim);
    for (std::size_t t = 0; t < n; ++t) {
        const GridCoord c = grid.coord(t);
        for (std::size_t a = 0; a < 3; ++a) {
            double* out = table.data() + t * dim + a * per_axis;
            const double pos = static_cast<double>(c[a]);
            for (std::size_t k = 0; k < freqs; ++k) {
                out[k] = std::sin(pos * omega[k]);
                out[freqs + k] = std::cos(pos * omega[k]);
            }
        }
    }
    return Tensor({n, dim}, std::move(table));
}

Tensor positional_encoding_padded(const PatchGrid& grid, std::size_t dim) {
    const std::size_t used = dim - dim % 6;
    if (used == 0) {
        throw std::invalid_argument("positional encoding dim " + std::to_string(dim) + " is below 6");
    }
    if (used == dim) {
        return positional_encoding(grid, dim);
    }
    const Tensor base = positional_encoding(grid, used);
    const std::size_t n = grid.tokens();
    std::vector<double> table(n * dim, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        std::copy_n(base.data().data() + t * used, used, table.data() + t * dim);
    }
    return Tensor({n, dim}, std::move(table));
}

}  // namespace vmim
