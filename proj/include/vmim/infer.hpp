#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "vmim/models.hpp"
#include "vmim/objectives.hpp"
#include "vmim/tensor.hpp"
#include "vmim/volume.hpp"

namespace vmim {

struct SlidingWindowConfig {
    std::size_t window = 32;
    double overlap = 0.5;

    // round(window * (1 - overlap)), validated >= 1.
    std::size_t stride() const;
};

// Window starts along one axis: 0, stride, 2 stride, ... with the last window
// clamped to end exactly at the extent. An extent below the window gives {0}.
std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window, std::size_t stride);

// Maps a window-sized volume to logits [K, w, w, w].
using SegmentFn = std::function<Tensor(const Volume&)>;

struct SlidingWindowResult {
    Tensor logits;                       // [K, D, H, W]
    std::vector<std::uint32_t> coverage; // windows covering each voxel
    std::size_t windows = 0;
};

// Volumes smaller than the window are zero-padded for the model and the
// output is cropped back. Logits are the per-voxel mean over covering windows.
SlidingWindowResult sliding_window_infer(const SegmentFn& model, const Volume& v, const SlidingWindowConfig& cfg);

// Argmax over the class axis of [K, D, H, W] logits.
LabelVolume argmax_labels(const Tensor& logits, Spacing spacing = {1.0, 1.0, 1.0});

// Per-volume foreground Dice of the sliding-window argmax, averaged per class.
DiceReport evaluate(const SegmentFn& model, const std::vector<LabeledVolume>& dataset, std::size_t num_classes,
                    const SlidingWindowConfig& cfg, const std::vector<std::string>& class_names = {});
DiceReport evaluate(const Checkpoint& ckpt, const std::vector<LabeledVolume>& dataset,
                    const SlidingWindowConfig& cfg, const std::vector<std::string>& class_names = {});

// Writes binary 8-bit PGM (P5).
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels);

// For each depth index writes slice_<d>_original.pgm, slice_<d>_masked.pgm
// (masked voxels at 128) and slice_<d>_recon.pgm (visible voxels pasted from
// the original). Channel 0 is rendered, scaled by the original's min/max.
std::vector<std::filesystem::path> reconstruct_dump(const Checkpoint& ckpt, const Volume& v,
                                                    const MaskingConfig& mask_cfg,
                                                    const std::vector<std::size_t>& depth_indices,
                                                    const std::filesystem::path& out_dir, std::uint64_t seed = 0);

}  // namespace vmim
