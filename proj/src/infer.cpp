#include "vmim/infer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "vmim/patch.hpp"

namespace vmim {

std::size_t SlidingWindowConfig::stride() const {
    if (window == 0) {
        throw std::invalid_argument("sliding window: window must be positive");
    }
    if (!(overlap >= 0.0 && overlap < 1.0)) {
        throw std::invalid_argument("sliding window: overlap must lie in [0, 1)");
    }
    const auto s = static_cast<std::size_t>(std::llround(static_cast<double>(window) * (1.0 - overlap)));
    if (s == 0) {
        throw std::invalid_argument("sliding window: stride rounds to zero");
    }
    return s;
}

std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window, std::size_t stride) {
    if (extent <= window) {
        return {0};
    }
    std::vector<std::size_t> starts;
    for (std::size_t s = 0;; s += stride) {
        if (s + window >= extent) {
            starts.push_back(extent - window);
            break;
        }
        starts.push_back(s);
    }
    return starts;
}

SlidingWindowResult sliding_window_infer(const SegmentFn& model, const Volume& v, const SlidingWindowConfig& cfg) {
    const std::size_t stride = cfg.stride();
    const std::size_t w = cfg.window;
    const Volume padded = pad_volume(v, {w, w, w});
    const Extents pe = padded.extents();
    const Extents ve = v.extents();
    const std::size_t vox = v.voxels();

    std::array<std::vector<std::size_t>, 3> starts;
    for (std::size_t a = 0; a < 3; ++a) starts[a] = window_starts(pe[a], w, stride);

    SlidingWindowResult out;
    out.coverage.assign(vox, 0);
    std::vector<double> sums;
    std::size_t classes = 0;
    for (std::size_t z0 : starts[0])
        for (std::size_t y0 : starts[1])
            for (std::size_t x0 : starts[2]) {
                const Tensor logits = model(crop_volume(padded, {z0, y0, x0}, {w, w, w}));
                if (logits.rank() != 4 || logits.dim(1) != w || logits.dim(2) != w || logits.dim(3) != w) {
                    throw ShapeError("sliding_window_infer: model returned " + to_string(logits.shape()) +
                                     " for a window of " + std::to_string(w));
                }
                if (classes == 0) {
                    classes = logits.dim(0);
                    sums.assign(classes * vox, 0.0);
                } else if (logits.dim(0) != classes) {
                    throw ShapeError("sliding_window_infer: class count changed between windows");
                }
                const auto data = logits.data();
                for (std::size_t z = 0; z < w && z0 + z < ve[0]; ++z)
                    for (std::size_t y = 0; y < w && y0 + y < ve[1]; ++y)
                        for (std::size_t x = 0; x < w && x0 + x < ve[2]; ++x) {
                            const std::size_t dst = ((z0 + z) * ve[1] + (y0 + y)) * ve[2] + (x0 + x);
                            const std::size_t src = (z * w + y) * w + x;
                            for (std::size_t k = 0; k < classes; ++k) sums[k * vox + dst] += data[k * w * w * w + src];
                            ++out.coverage[dst];
                        }
                ++out.windows;
            }
    for (std::size_t k = 0; k < classes; ++k)
        for (std::size_t i = 0; i < vox; ++i) sums[k * vox + i] /= static_cast<double>(out.coverage[i]);
    out.logits = Tensor({classes, ve[0], ve[1], ve[2]}, std::move(sums));
    return out;
}

LabelVolume argmax_labels(const Tensor& logits, Spacing spacing) {
    if (logits.rank() != 4) {
        throw ShapeError("argmax_labels: expected [K, D, H, W], got " + to_string(logits.shape()));
    }
    const std::size_t k = logits.dim(0);
    LabelVolume out({logits.dim(1), logits.dim(2), logits.dim(3)}, k, spacing);
    const std::size_t vox = out.voxels();
    const auto data = logits.data();
    for (std::size_t i = 0; i < vox; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (data[c * vox + i] > data[best * vox + i]) best = c;
        }
        out.data[i] = static_cast<std::uint16_t>(best);
    }
    return out;
}

DiceReport evaluate(const SegmentFn& model, const std::vector<LabeledVolume>& dataset, std::size_t num_classes,
                    const SlidingWindowConfig& cfg, const std::vector<std::string>& class_names) {
    if (dataset.empty()) {
        throw std::invalid_argument("evaluate: empty dataset");
    }
    std::vector<std::vector<double>> scores;
    for (const auto& item : dataset) {
        if (item.labels.num_classes != num_classes) {
            throw std::invalid_argument("evaluate: model predicts " + std::to_string(num_classes) +
                                        " classes but labels declare " + std::to_string(item.labels.num_classes));
        }
        const SlidingWindowResult r = sliding_window_infer(model, item.image, cfg);
        if (r.logits.dim(0) != num_classes) {
            throw std::invalid_argument("evaluate: model returned " + std::to_string(r.logits.dim(0)) +
                                        " class channels, expected " + std::to_string(num_classes));
        }
        const LabelVolume pred = argmax_labels(r.logits, item.labels.spacing);
        std::vector<double> per_class;
        for (std::size_t c = 1; c < num_classes; ++c) per_class.push_back(dice(item.labels, pred, c));
        scores.push_back(std::move(per_class));
    }
    return make_dice_report(scores, class_names);
}

DiceReport evaluate(const Checkpoint& ckpt, const std::vector<LabeledVolume>& dataset,
                    const SlidingWindowConfig& cfg, const std::vector<std::string>& class_names) {
    if (ckpt.model.method != Method::UNETR) {
        throw std::invalid_argument("evaluate: checkpoint holds a " + to_string(ckpt.model.method) +
                                    " model, not a segmentation model");
    }
    const SegmentFn fn = [&](const Volume& v) { return unetr_segment(ckpt.model, ckpt.params, v); };
    return evaluate(fn, dataset, ckpt.model.unetr.num_classes, cfg, class_names);
}

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels) {
    if (pixels.size() != width * height) {
        throw std::invalid_argument("write_pgm: pixel count does not match " + std::to_string(width) + "x" +
                                    std::to_string(height));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot write " + path.string());
    }
    f << "P5\n" << width << ' ' << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

namespace {

std::uint8_t to_byte(double x, double lo, double hi) {
    if (!(hi > lo)) {
        return 0;
    }
    const double t = std::clamp((x - lo) / (hi - lo), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(255.0 * t));
}

std::string slice_name(std::size_t d, const char* kind) {
    std::string digits = std::to_string(d);
    if (digits.size() < 3) digits.insert(0, 3 - digits.size(), '0');
    return "slice_" + digits + "_" + kind + ".pgm";
}

}  // namespace

std::vector<std::filesystem::path> reconstruct_dump(const Checkpoint& ckpt, const Volume& v,
                                                    const MaskingConfig& mask_cfg,
                                                    const std::vector<std::size_t>& depth_indices,
                                                    const std::filesystem::path& out_dir, std::uint64_t seed) {
    if (ckpt.model.method != Method::MAE && ckpt.model.method != Method::SimMIM) {
        throw std::invalid_argument("reconstruct_dump: checkpoint method must be mae or simmim, got " +
                                    to_string(ckpt.model.method));
    }
    for (std::size_t d : depth_indices) {
        if (d >= v.depth) {
            throw std::out_of_range("reconstruct_dump: depth " + std::to_string(d) + " outside [0, " +
                                    std::to_string(v.depth) + ")");
        }
    }
    const std::size_t p = ckpt.model.vit.token_patch;
    const PatchGrid grid = make_grid(v.extents(), v.channels, p);
    Rng rng(seed);
    const Mask mask = sample_mask(grid, mask_cfg, rng);

    // Reconstruction: model prediction on masked tokens, original elsewhere.
    Volume recon = v;
    if (!mask.empty()) {
        const MIMOutput out = mim_forward(ckpt.model, ckpt.params, v, mask);
        const Volume predicted = unpatchify(out.prediction, grid);
        const auto flags = mask.flags();
        for (std::size_t t = 0; t < grid.tokens(); ++t) {
            if (!flags[t]) continue;
            const GridCoord c = grid.coord(t);
            for (std::size_t ch = 0; ch < v.channels; ++ch)
                for (std::size_t z = c[0] * p; z < (c[0] + 1) * p; ++z)
                    for (std::size_t y = c[1] * p; y < (c[1] + 1) * p; ++y)
                        for (std::size_t x = c[2] * p; x < (c[2] + 1) * p; ++x) {
                            recon.at(ch, z, y, x) = predicted.at(ch, z, y, x);
                        }
        }
    }

    const std::size_t vox = v.voxels();
    const auto [lo_it, hi_it] = std::minmax_element(v.data.begin(), v.data.begin() + static_cast<std::ptrdiff_t>(vox));
    const double lo = *lo_it;
    const double hi = *hi_it;
    const auto flags = mask.flags();

    std::filesystem::create_directories(out_dir);
    std::vector<std::filesystem::path> written;
    for (std::size_t d : depth_indices) {
        std::vector<std::uint8_t> original(v.height * v.width);
        std::vector<std::uint8_t> masked(original.size());
        std::vector<std::uint8_t> rebuilt(original.size());
        for (std::size_t y = 0; y < v.height; ++y)
            for (std::size_t x = 0; x < v.width; ++x) {
                const std::size_t i = y * v.width + x;
                original[i] = to_byte(v.at(0, d, y, x), lo, hi);
                const std::size_t token = ((d / p) * grid.grid[1] + y / p) * grid.grid[2] + x / p;
                masked[i] = flags[token] ? 128 : original[i];
                rebuilt[i] = to_byte(recon.at(0, d, y, x), lo, hi);
            }
        for (const auto& [kind, pixels] : {std::pair{"original", &original}, std::pair{"masked", &masked},
                                           std::pair{"recon", &rebuilt}}) {
            const auto path = out_dir / slice_name(d, kind);
            write_pgm(path, v.width, v.height, *pixels);
            written.push_back(path);
        }
    }
    return written;
}

}  // namespace vmim
