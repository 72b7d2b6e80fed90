#include "vmim/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "vmim/rng.hpp"

namespace vmim {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(Modality m) {
    switch (m) {
        case Modality::CT: return "CT";
        case Modality::MRI: return "MRI";
        case Modality::SYNTH: return "SYNTH";
    }
    return "SYNTH";
}

Modality modality_from_string(const std::string& s) {
    if (s == "CT") return Modality::CT;
    if (s == "MRI") return Modality::MRI;
    if (s == "SYNTH") return Modality::SYNTH;
    throw VolumeError("unknown modality '" + s + "'");
}

Volume::Volume(std::size_t c, Extents e, Spacing s, Modality m)
    : channels(c), depth(e[0]), height(e[1]), width(e[2]), data(c * e[0] * e[1] * e[2], 0.0), spacing(s), modality(m) {}

namespace {

void validate_geometry(std::size_t c, Extents e, const Spacing& s, const char* what) {
    if (c == 0 || e[0] == 0 || e[1] == 0 || e[2] == 0) {
        throw VolumeError(std::string(what) + ": all extents must be >= 1");
    }
    for (double v : s) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw VolumeError(std::string(what) + ": spacing components must be finite and > 0");
        }
    }
}

}  // namespace

void Volume::validate() const {
    validate_geometry(channels, extents(), spacing, "Volume");
    if (data.size() != channels * voxels()) {
        throw VolumeError("Volume: data length does not match extents");
    }
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw VolumeError("Volume: non-finite voxel value");
        }
    }
}

LabelVolume::LabelVolume(Extents e, std::size_t classes, Spacing s)
    : depth(e[0]), height(e[1]), width(e[2]), data(e[0] * e[1] * e[2], 0), num_classes(classes), spacing(s) {}

void LabelVolume::validate() const {
    validate_geometry(1, extents(), spacing, "LabelVolume");
    if (num_classes == 0) {
        throw VolumeError("LabelVolume: num_classes must be positive");
    }
    if (data.size() != voxels()) {
        throw VolumeError("LabelVolume: data length does not match extents");
    }
    for (auto id : data) {
        if (id >= num_classes) {
            throw VolumeError("LabelVolume: class id " + std::to_string(id) + " outside [0, " +
                              std::to_string(num_classes) + ")");
        }
    }
}

// ---------------------------------------------------------------------------
// File IO

fs::path header_path(const fs::path& payload) {
    fs::path h = payload;
    h += "h";
    return h;
}

namespace {

json read_header(const fs::path& payload) {
    const fs::path hp = header_path(payload);
    std::ifstream in(hp);
    if (!in) {
        throw VolumeError("missing header " + hp.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw VolumeError("garbled header " + hp.string() + ": " + e.what());
    }
}

void write_header(const fs::path& payload, const json& header) {
    std::ofstream out(header_path(payload));
    if (!out) {
        throw VolumeError("cannot write header " + header_path(payload).string());
    }
    out << header.dump(2) << '\n';
}

std::vector<std::size_t> header_shape(const json& h, std::size_t rank, const fs::path& payload) {
    try {
        auto shape = h.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != rank) {
            throw VolumeError("header " + header_path(payload).string() + ": shape must have " +
                              std::to_string(rank) + " entries");
        }
        return shape;
    } catch (const json::exception& e) {
        throw VolumeError("garbled header " + header_path(payload).string() + ": " + e.what());
    }
}

Spacing header_spacing(const json& h, const fs::path& payload) {
    try {
        return h.value("spacing", std::array<double, 3>{1.0, 1.0, 1.0});
    } catch (const json::exception& e) {
        throw VolumeError("garbled header " + header_path(payload).string() + ": " + e.what());
    }
}

void expect_tag(const json& h, const char* key, const std::string& expected, const fs::path& payload) {
    if (!h.contains(key) || !h.at(key).is_string() || h.at(key).get<std::string>() != expected) {
        throw VolumeError("header " + header_path(payload).string() + ": " + key + " must be \"" + expected + "\"");
    }
}

std::vector<unsigned char> read_payload(const fs::path& payload, std::size_t expected_bytes) {
    std::ifstream in(payload, std::ios::binary);
    if (!in) {
        throw VolumeError("missing payload " + payload.string());
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() != expected_bytes) {
        throw VolumeError("payload " + payload.string() + ": expected " + std::to_string(expected_bytes) +
                          " bytes, got " + std::to_string(bytes.size()));
    }
    return bytes;
}

void write_payload(const fs::path& payload, const std::vector<unsigned char>& bytes) {
    std::ofstream out(payload, std::ios::binary);
    if (!out) {
        throw VolumeError("cannot write payload " + payload.string());
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

Volume load_volume(const fs::path& payload) {
    const json h = read_header(payload);
    expect_tag(h, "dtype", "f32le", payload);
    if (h.contains("byte_order")) {
        expect_tag(h, "byte_order", "little", payload);
    }
    const auto shape = header_shape(h, 4, payload);
    Modality modality = Modality::SYNTH;
    try {
        modality = modality_from_string(h.value("modality", std::string("SYNTH")));
    } catch (const json::exception& e) {
        throw VolumeError("garbled header " + header_path(payload).string() + ": " + e.what());
    }
    Volume v(shape[0], {shape[1], shape[2], shape[3]}, header_spacing(h, payload), modality);
    validate_geometry(v.channels, v.extents(), v.spacing, "load_volume");
    const auto bytes = read_payload(payload, v.data.size() * 4);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(bytes[4 * i]) |
                                   static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8 |
                                   static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16 |
                                   static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24;
        const float f = std::bit_cast<float>(bits);
        if (!std::isfinite(f)) {
            throw VolumeError("payload " + payload.string() + ": non-finite voxel at index " + std::to_string(i));
        }
        v.data[i] = static_cast<double>(f);
    }
    return v;
}

void save_volume(const Volume& v, const fs::path& payload) {
    v.validate();
    json h;
    h["shape"] = {v.channels, v.depth, v.height, v.width};
    h["spacing"] = v.spacing;
    h["modality"] = to_string(v.modality);
    h["dtype"] = "f32le";
    h["byte_order"] = "little";
    std::vector<unsigned char> bytes(v.data.size() * 4);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v.data[i]));
        for (int b = 0; b < 4; ++b) {
            bytes[4 * i + static_cast<std::size_t>(b)] = static_cast<unsigned char>(bits >> (8 * b));
        }
    }
    write_payload(payload, bytes);
    write_header(payload, h);
}

LabelVolume load_labels(const fs::path& payload) {
    const json h = read_header(payload);
    expect_tag(h, "dtype", "u16le", payload);
    const auto shape = header_shape(h, 3, payload);
    std::size_t classes = 0;
    try {
        classes = h.at("num_classes").get<std::size_t>();
    } catch (const json::exception& e) {
        throw VolumeError("garbled header " + header_path(payload).string() + ": " + e.what());
    }
    LabelVolume l({shape[0], shape[1], shape[2]}, classes, header_spacing(h, payload));
    validate_geometry(1, l.extents(), l.spacing, "load_labels");
    const auto bytes = read_payload(payload, l.data.size() * 2);
    for (std::size_t i = 0; i < l.data.size(); ++i) {
        l.data[i] = static_cast<std::uint16_t>(bytes[2 * i] | bytes[2 * i + 1] << 8);
    }
    l.validate();
    return l;
}

void save_labels(const LabelVolume& l, const fs::path& payload) {
    l.validate();
    json h;
    h["shape"] = {l.depth, l.height, l.width};
    h["spacing"] = l.spacing;
    h["num_classes"] = l.num_classes;
    h["dtype"] = "u16le";
    h["byte_order"] = "little";
    std::vector<unsigned char> bytes(l.data.size() * 2);
    for (std::size_t i = 0; i < l.data.size(); ++i) {
        bytes[2 * i] = static_cast<unsigned char>(l.data[i] & 0xFF);
        bytes[2 * i + 1] = static_cast<unsigned char>(l.data[i] >> 8);
    }
    write_payload(payload, bytes);
    write_header(payload, h);
}

// ---------------------------------------------------------------------------
// Intensity normalisation

Volume normalize_ct(const Volume& v, double lo, double hi) {
    if (!(lo < hi)) {
        throw std::invalid_argument("normalize_ct: lo must be < hi");
    }
    Volume out = v;
    const double range = hi - lo;
    for (double& x : out.data) {
        x = std::clamp((x - lo) / range, 0.0, 1.0);
    }
    return out;
}

Volume normalize_zscore(const Volume& v) {
    Volume out = v;
    const std::size_t n = v.voxels();
    for (std::size_t c = 0; c < v.channels; ++c) {
        double* ch = out.data.data() + c * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += ch[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (ch[i] - mu) * (ch[i] - mu);
        const double sd = std::sqrt(var / static_cast<double>(n));
        if (sd < 1e-8) {
            std::fill(ch, ch + n, 0.0);
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) ch[i] = (ch[i] - mu) / sd;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling

Extents resampled_extents(Extents in, Spacing from, Spacing to) {
    Extents out{};
    for (std::size_t a = 0; a < 3; ++a) {
        if (!(to[a] > 0.0)) {
            throw std::invalid_argument("resample: target spacing must be > 0");
        }
        const double n = std::round(static_cast<double>(in[a]) * from[a] / to[a]);
        out[a] = std::max<std::size_t>(1, static_cast<std::size_t>(n));
    }
    return out;
}

namespace {

struct AxisSamples {
    std::vector<std::size_t> lo;
    std::vector<std::size_t> hi;
    std::vector<double> t;
    std::vector<std::size_t> nearest;
};

// Source coordinate of output voxel i: centres keep their physical position.
AxisSamples axis_samples(std::size_t n_in, std::size_t n_out, double from, double to) {
    AxisSamples s;
    const double ratio = to / from;
    const double last = static_cast<double>(n_in - 1);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double x = std::clamp((static_cast<double>(i) + 0.5) * ratio - 0.5, 0.0, last);
        const auto i0 = static_cast<std::size_t>(std::floor(x));
        s.lo.push_back(i0);
        s.hi.push_back(std::min(i0 + 1, n_in - 1));
        s.t.push_back(x - static_cast<double>(i0));
        s.nearest.push_back(std::min(static_cast<std::size_t>(std::floor(x + 0.5)), n_in - 1));
    }
    return s;
}

}  // namespace

Volume resample(const Volume& v, Spacing target) {
    const Extents out_e = resampled_extents(v.extents(), v.spacing, target);
    if (target == v.spacing) {
        return v;
    }
    Volume out(v.channels, out_e, target, v.modality);
    const auto sz = axis_samples(v.depth, out_e[0], v.spacing[0], target[0]);
    const auto sy = axis_samples(v.height, out_e[1], v.spacing[1], target[1]);
    const auto sx = axis_samples(v.width, out_e[2], v.spacing[2], target[2]);
    for (std::size_t c = 0; c < v.channels; ++c)
        for (std::size_t z = 0; z < out_e[0]; ++z)
            for (std::size_t y = 0; y < out_e[1]; ++y)
                for (std::size_t x = 0; x < out_e[2]; ++x) {
                    const double tz = sz.t[z], ty = sy.t[y], tx = sx.t[x];
                    auto g = [&](std::size_t zz, std::size_t yy, std::size_t xx) { return v.at(c, zz, yy, xx); };
                    const double c00 = g(sz.lo[z], sy.lo[y], sx.lo[x]) * (1 - tx) + g(sz.lo[z], sy.lo[y], sx.hi[x]) * tx;
                    const double c01 = g(sz.lo[z], sy.hi[y], sx.lo[x]) * (1 - tx) + g(sz.lo[z], sy.hi[y], sx.hi[x]) * tx;
                    const double c10 = g(sz.hi[z], sy.lo[y], sx.lo[x]) * (1 - tx) + g(sz.hi[z], sy.lo[y], sx.hi[x]) * tx;
                    const double c11 = g(sz.hi[z], sy.hi[y], sx.lo[x]) * (1 - tx) + g(sz.hi[z], sy.hi[y], sx.hi[x]) * tx;
                    const double c0 = c00 * (1 - ty) + c01 * ty;
                    const double c1 = c10 * (1 - ty) + c11 * ty;
                    out.at(c, z, y, x) = c0 * (1 - tz) + c1 * tz;
                }
    return out;
}

LabelVolume resample_labels(const LabelVolume& l, Spacing target) {
    const Extents out_e = resampled_extents(l.extents(), l.spacing, target);
    if (target == l.spacing) {
        return l;
    }
    LabelVolume out(out_e, l.num_classes, target);
    const auto sz = axis_samples(l.depth, out_e[0], l.spacing[0], target[0]);
    const auto sy = axis_samples(l.height, out_e[1], l.spacing[1], target[1]);
    const auto sx = axis_samples(l.width, out_e[2], l.spacing[2], target[2]);
    for (std::size_t z = 0; z < out_e[0]; ++z)
        for (std::size_t y = 0; y < out_e[1]; ++y)
            for (std::size_t x = 0; x < out_e[2]; ++x) {
                out.data[out.index(z, y, x)] = l.at(sz.nearest[z], sy.nearest[y], sx.nearest[x]);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Cropping

namespace {

void check_crop(Extents extents, Extents start, Extents size, const char* what) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (size[a] == 0 || start[a] + size[a] > extents[a]) {
            throw std::invalid_argument(std::string(what) + ": window exceeds the volume along axis " +
                                        std::to_string(a));
        }
    }
}

}  // namespace

Volume crop_volume(const Volume& v, Extents start, Extents size) {
    check_crop(v.extents(), start, size, "crop_volume");
    Volume out(v.channels, size, v.spacing, v.modality);
    for (std::size_t c = 0; c < v.channels; ++c)
        for (std::size_t z = 0; z < size[0]; ++z)
            for (std::size_t y = 0; y < size[1]; ++y) {
                const double* src = &v.data[v.index(c, start[0] + z, start[1] + y, start[2])];
                std::copy(src, src + size[2], &out.data[out.index(c, z, y, 0)]);
            }
    return out;
}

LabelVolume crop_labels(const LabelVolume& l, Extents start, Extents size) {
    check_crop(l.extents(), start, size, "crop_labels");
    LabelVolume out(size, l.num_classes, l.spacing);
    for (std::size_t z = 0; z < size[0]; ++z)
        for (std::size_t y = 0; y < size[1]; ++y) {
            const std::uint16_t* src = &l.data[l.index(start[0] + z, start[1] + y, start[2])];
            std::copy(src, src + size[2], &out.data[out.index(z, y, 0)]);
        }
    return out;
}

Volume pad_volume(const Volume& v, Extents size) {
    Extents e = v.extents();
    for (std::size_t a = 0; a < 3; ++a) e[a] = std::max(e[a], size[a]);
    if (e == v.extents()) {
        return v;
    }
    Volume out(v.channels, e, v.spacing, v.modality);
    for (std::size_t c = 0; c < v.channels; ++c)
        for (std::size_t z = 0; z < v.depth; ++z)
            for (std::size_t y = 0; y < v.height; ++y) {
                const double* src = &v.data[v.index(c, z, y, 0)];
                std::copy(src, src + v.width, &out.data[out.index(c, z, y, 0)]);
            }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

struct Ellipsoid {
    std::array<double, 3> centre;
    std::array<double, 3> radii;
};

bool try_place(LabelVolume& labels, const Ellipsoid& e, std::uint16_t id) {
    std::array<std::size_t, 3> lo{};
    std::array<std::size_t, 3> hi{};
    const Extents ext = labels.extents();
    for (std::size_t a = 0; a < 3; ++a) {
        lo[a] = static_cast<std::size_t>(std::max(0.0, std::floor(e.centre[a] - e.radii[a])));
        hi[a] = std::min(ext[a] - 1, static_cast<std::size_t>(std::ceil(e.centre[a] + e.radii[a])));
    }
    std::vector<std::size_t> inside;
    for (std::size_t z = lo[0]; z <= hi[0]; ++z)
        for (std::size_t y = lo[1]; y <= hi[1]; ++y)
            for (std::size_t x = lo[2]; x <= hi[2]; ++x) {
                const double dz = (static_cast<double>(z) - e.centre[0]) / e.radii[0];
                const double dy = (static_cast<double>(y) - e.centre[1]) / e.radii[1];
                const double dx = (static_cast<double>(x) - e.centre[2]) / e.radii[2];
                if (dz * dz + dy * dy + dx * dx <= 1.0) {
                    const std::size_t i = labels.index(z, y, x);
                    if (labels.data[i] != 0) {
                        return false;
                    }
                    inside.push_back(i);
                }
            }
    if (inside.empty()) {
        return false;
    }
    for (std::size_t i : inside) labels.data[i] = id;
    return true;
}

}  // namespace

std::vector<LabeledVolume> synth_generate(std::uint64_t seed, std::size_t count, Extents shape,
                                          std::size_t num_classes, const SynthOptions& opt) {
    for (std::size_t a = 0; a < 3; ++a) {
        if (shape[a] < 16) {
            throw std::invalid_argument("synth_generate: every axis must be >= 16 voxels");
        }
    }
    if (num_classes < 2 || num_classes > 65535) {
        throw std::invalid_argument("synth_generate: num_classes must be in [2, 65535]");
    }
    if (opt.channels == 0) {
        throw std::invalid_argument("synth_generate: channels must be >= 1");
    }
    const std::size_t foreground = num_classes - 1;
    const double total = static_cast<double>(shape[0] * shape[1] * shape[2]);
    const double base_radius =
        std::cbrt(3.0 * opt.occupancy * total / (4.0 * std::numbers::pi * static_cast<double>(foreground)));

    std::vector<double> class_mean(num_classes, opt.background_mean);
    for (std::size_t k = 1; k < num_classes; ++k) {
        const double t = foreground == 1 ? 0.0 : static_cast<double>(k - 1) / static_cast<double>(foreground - 1);
        class_mean[k] = opt.foreground_low + t * (opt.foreground_high - opt.foreground_low);
    }

    std::vector<LabeledVolume> samples;
    samples.reserve(count);
    for (std::size_t s = 0; s < count; ++s) {
        Rng rng(derive_seed(seed, s));
        LabelVolume labels(shape, num_classes);
        bool placed_all = false;
        for (std::size_t attempt = 0; attempt < 20 && !placed_all; ++attempt) {
            std::fill(labels.data.begin(), labels.data.end(), 0);
            placed_all = true;
            for (std::size_t k = 1; k <= foreground && placed_all; ++k) {
                bool placed = false;
                for (std::size_t r = 0; r < opt.max_retries && !placed; ++r) {
                    Ellipsoid e{};
                    for (std::size_t a = 0; a < 3; ++a) {
                        const double cap = static_cast<double>(shape[a]) / 2.0 - 1.0;
                        e.radii[a] = std::clamp(rng.uniform(0.55, 0.9) * base_radius, 1.5, cap);
                        e.centre[a] = rng.uniform(e.radii[a], static_cast<double>(shape[a]) - 1.0 - e.radii[a]);
                    }
                    placed = try_place(labels, e, static_cast<std::uint16_t>(k));
                }
                placed_all = placed;
            }
        }
        if (!placed_all) {
            throw VolumeError("synth_generate: could not place " + std::to_string(foreground) +
                              " disjoint ellipsoids in sample " + std::to_string(s));
        }
        Volume image(opt.channels, shape, {1.0, 1.0, 1.0}, Modality::SYNTH);
        for (std::size_t c = 0; c < opt.channels; ++c) {
            const double gain = 1.0 + 0.1 * static_cast<double>(c);
            for (std::size_t i = 0; i < labels.voxels(); ++i) {
                image.data[c * labels.voxels() + i] = gain * class_mean[labels.data[i]] + rng.normal(0.0, opt.noise_sigma);
            }
        }
        samples.push_back({std::move(image), std::move(labels)});
    }
    return samples;
}

}  // namespace vmim
