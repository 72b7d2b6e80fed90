#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vmim/patch.hpp"
#include "vmim/tensor.hpp"
#include "vmim/volume.hpp"

namespace vmim {

enum class ReconNorm { L1, L2 };

std::string to_string(ReconNorm n);
ReconNorm recon_norm_from_string(const std::string& s);

// Mean over every voxel of the masked token rows of |pred - target| (L1) or
// (pred - target)^2 (L2). pred and target are [N, token_dim].
Tensor masked_recon_loss(const Tensor& pred, const Tensor& target, const Mask& mask, ReconNorm norm = ReconNorm::L1);

// 2 |G & P| / (|G| + |P|) for class c; 1.0 when the class is absent from both.
double dice(std::span<const std::uint16_t> g, std::span<const std::uint16_t> p, std::size_t c);
double dice(const LabelVolume& g, const LabelVolume& p, std::size_t c);

struct DiceCELoss {
    Tensor loss;
    Tensor dice_term;  // 1 - mean soft Dice over classes
    Tensor ce_term;    // mean voxel cross-entropy
};

// logits [K, ...spatial], labels in row-major spatial order with ids < K.
DiceCELoss dice_ce_terms(const Tensor& logits, std::span<const std::uint16_t> labels, double weight_dice = 0.5,
                         double smooth = 1e-5);
Tensor dice_ce_loss(const Tensor& logits, std::span<const std::uint16_t> labels, double weight_dice = 0.5);

// NT-Xent over rows [z_0 .. z_{B-1}, z'_0 .. z'_{B-1}]; row i pairs with row (i + B) mod 2B.
// Rows must be unit-norm to within 1e-6.
Tensor ntxent(const Tensor& z, double temperature);

struct DiceReport {
    std::map<std::size_t, double> per_class;  // foreground ids only
    std::map<std::size_t, std::string> names;
    double average = 0.0;

    std::string to_json() const;
};

// Averages the per-volume foreground Dice scores for each class.
DiceReport make_dice_report(const std::vector<std::vector<double>>& per_volume_scores,
                            const std::vector<std::string>& class_names = {});

}  // namespace vmim
