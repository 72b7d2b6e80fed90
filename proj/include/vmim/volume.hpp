#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace vmim {

enum class Modality { CT, MRI, SYNTH };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

// Physical voxel size in mm along (depth, height, width).
using Spacing = std::array<double, 3>;
using Extents = std::array<std::size_t, 3>;

class VolumeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// channels x depth x height x width, row-major.
struct Volume {
    std::size_t channels = 1;
    std::size_t depth = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> data;
    Spacing spacing{1.0, 1.0, 1.0};
    Modality modality = Modality::SYNTH;

    Volume() = default;
    Volume(std::size_t c, Extents e, Spacing s = {1.0, 1.0, 1.0}, Modality m = Modality::SYNTH);

    Extents extents() const { return {depth, height, width}; }
    std::size_t voxels() const { return depth * height * width; }
    std::size_t index(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const {
        return ((c * depth + z) * height + y) * width + x;
    }
    double& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) { return data[index(c, z, y, x)]; }
    double at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const { return data[index(c, z, y, x)]; }

    // Throws VolumeError if extents, spacing, or data violate the invariants.
    void validate() const;
};

struct LabelVolume {
    std::size_t depth = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint16_t> data;
    std::size_t num_classes = 2;
    Spacing spacing{1.0, 1.0, 1.0};

    LabelVolume() = default;
    LabelVolume(Extents e, std::size_t classes, Spacing s = {1.0, 1.0, 1.0});

    Extents extents() const { return {depth, height, width}; }
    std::size_t voxels() const { return depth * height * width; }
    std::size_t index(std::size_t z, std::size_t y, std::size_t x) const { return (z * height + y) * width + x; }
    std::uint16_t at(std::size_t z, std::size_t y, std::size_t x) const { return data[index(z, y, x)]; }

    void validate() const;
};

struct LabeledVolume {
    Volume image;
    LabelVolume labels;
};

// <stem>.vol holds little-endian f32 voxels; <stem>.volh is a JSON header
// with shape, spacing, modality, dtype ("f32le") and byte_order ("little").
// Labels use <stem>.lab / <stem>.labh with dtype "u16le".
Volume load_volume(const std::filesystem::path& payload);
void save_volume(const Volume& v, const std::filesystem::path& payload);
LabelVolume load_labels(const std::filesystem::path& payload);
void save_labels(const LabelVolume& l, const std::filesystem::path& payload);

std::filesystem::path header_path(const std::filesystem::path& payload);

// clamp((x - lo) / (hi - lo), 0, 1) voxelwise.
Volume normalize_ct(const Volume& v, double lo = -175.0, double hi = 200.0);
// Per-channel (x - mean) / std with population std; channels with std < 1e-8 become zero.
Volume normalize_zscore(const Volume& v);

// Output extent per axis is max(1, round(n * in_spacing / target_spacing)).
// Voxel centres keep their physical alignment; images are trilinear,
// labels nearest-neighbour.
Extents resampled_extents(Extents in, Spacing from, Spacing to);
Volume resample(const Volume& v, Spacing target);
LabelVolume resample_labels(const LabelVolume& l, Spacing target);

// Sub-block of the given size starting at voxel `start`; must lie inside the volume.
Volume crop_volume(const Volume& v, Extents start, Extents size);
LabelVolume crop_labels(const LabelVolume& l, Extents start, Extents size);
// Zero-pads at the far end of each axis up to `size` (never shrinks).
Volume pad_volume(const Volume& v, Extents size);

struct SynthOptions {
    std::size_t channels = 1;
    double background_mean = 0.2;
    double foreground_low = 0.45;   // mean intensity of class 1
    double foreground_high = 0.85;  // mean intensity of the last class
    double noise_sigma = 0.1;
    double occupancy = 0.25;        // target fraction of voxels covered by ellipsoids
    std::size_t max_retries = 200;
};

// Each sample holds num_classes - 1 disjoint axis-aligned ellipsoids, one per
// foreground class, with Gaussian noise over every voxel.
std::vector<LabeledVolume> synth_generate(std::uint64_t seed, std::size_t count, Extents shape,
                                          std::size_t num_classes, const SynthOptions& options = {});

}  // namespace vmim
