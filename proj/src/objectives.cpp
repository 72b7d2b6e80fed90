#include "vmim/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace vmim {

std::string to_string(ReconNorm n) {
    return n == ReconNorm::L1 ? "l1" : "l2";
}

ReconNorm recon_norm_from_string(const std::string& s) {
    if (s == "l1" || s == "L1") return ReconNorm::L1;
    if (s == "l2" || s == "L2") return ReconNorm::L2;
    throw std::invalid_argument("unknown reconstruction norm '" + s + "'");
}

Tensor masked_recon_loss(const Tensor& pred, const Tensor& target, const Mask& mask, ReconNorm norm) {
    if (mask.empty()) {
        throw std::invalid_argument("masked_recon_loss: no masked patches to reconstruct");
    }
    if (pred.shape() != target.shape() || pred.rank() != 2) {
        throw ShapeError("masked_recon_loss: pred " + to_string(pred.shape()) + " vs target " +
                         to_string(target.shape()));
    }
    if (mask.total != pred.dim(0)) {
        throw ShapeError("masked_recon_loss: mask covers " + std::to_string(mask.total) + " tokens, pred has " +
                         std::to_string(pred.dim(0)));
    }
    const Tensor diff = sub(gather_rows(pred, mask.masked), gather_rows(target, mask.masked));
    return mean(norm == ReconNorm::L1 ? abs(diff) : square(diff));
}

double dice(std::span<const std::uint16_t> g, std::span<const std::uint16_t> p, std::size_t c) {
    if (g.size() != p.size()) {
        throw std::invalid_argument("dice: label maps differ in size (" + std::to_string(g.size()) + " vs " +
                                    std::to_string(p.size()) + ")");
    }
    std::size_t both = 0;
    std::size_t ng = 0;
    std::size_t np = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const bool gi = g[i] == c;
        const bool pi = p[i] == c;
        both += gi && pi;
        ng += gi;
        np += pi;
    }
    if (ng + np == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(ng + np);
}

double dice(const LabelVolume& g, const LabelVolume& p, std::size_t c) {
    if (g.extents() != p.extents()) {
        throw std::invalid_argument("dice: label volumes differ in shape");
    }
    return dice(g.data, p.data, c);
}

DiceCELoss dice_ce_terms(const Tensor& logits, std::span<const std::uint16_t> labels, double weight_dice,
                         double smooth) {
    if (logits.rank() < 2) {
        throw ShapeError("dice_ce_loss: logits must be [K, ...], got " + to_string(logits.shape()));
    }
    const std::size_t k = logits.dim(0);
    const std::size_t v = logits.numel() / k;
    if (labels.size() != v) {
        throw ShapeError("dice_ce_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(v) +
                         " voxels");
    }
    std::vector<double> onehot(k * v, 0.0);
    std::vector<double> counts(k, smooth);
    for (std::size_t i = 0; i < v; ++i) {
        if (labels[i] >= k) {
            throw std::invalid_argument("dice_ce_loss: label id " + std::to_string(labels[i]) + " outside [0, " +
                                        std::to_string(k) + ")");
        }
        onehot[labels[i] * v + i] = 1.0;
        counts[labels[i]] += 1.0;
    }
    const Tensor y({k, v}, std::move(onehot));
    const Tensor flat = reshape(logits, {k, v});
    const Tensor logp = log_softmax(flat, 0);
    const Tensor prob = softmax(flat, 0);

    DiceCELoss out;
    out.ce_term = scale(sum(mul(logp, y)), -1.0 / static_cast<double>(v));
    const Tensor inter = sum(mul(prob, y), 1);
    const Tensor numer = add(scale(inter, 2.0), Tensor::scalar(smooth));
    const Tensor denom = add(sum(prob, 1), Tensor({k}, std::move(counts)));
    out.dice_term = sub(Tensor::scalar(1.0), mean(div(numer, denom)));
    out.loss = add(scale(out.dice_term, weight_dice), scale(out.ce_term, 1.0 - weight_dice));
    return out;
}

Tensor dice_ce_loss(const Tensor& logits, std::span<const std::uint16_t> labels, double weight_dice) {
    return dice_ce_terms(logits, labels, weight_dice).loss;
}

Tensor ntxent(const Tensor& z, double temperature) {
    if (z.rank() != 2 || z.dim(0) % 2 != 0) {
        throw ShapeError("ntxent: expected [2B, dim], got " + to_string(z.shape()));
    }
    const std::size_t n = z.dim(0);
    const std::size_t b = n / 2;
    if (b < 2) {
        throw std::invalid_argument("ntxent: batch size must be >= 2 to provide negatives");
    }
    if (!(temperature > 0.0)) {
        throw std::invalid_argument("ntxent: temperature must be > 0");
    }
    const std::size_t d = z.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += z[i * d + j] * z[i * d + j];
        if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
            throw std::invalid_argument("ntxent: row " + std::to_string(i) + " is not L2-normalized");
        }
    }
    std::vector<double> self(n * n, 0.0);
    std::vector<double> positive(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        self[i * n + i] = -1e9;
        positive[i * n + (i + b) % n] = 1.0;
    }
    const Tensor sim = scale(matmul(z, transpose(z)), 1.0 / temperature);
    const Tensor logp = log_softmax(add(sim, Tensor({n, n}, std::move(self))), 1);
    return scale(sum(mul(logp, Tensor({n, n}, std::move(positive)))), -1.0 / static_cast<double>(n));
}

std::string DiceReport::to_json() const {
    nlohmann::ordered_json j;
    j["classes"] = nlohmann::ordered_json::array();
    for (const auto& [id, score] : per_class) {
        const auto it = names.find(id);
        j["classes"].push_back({{"class", id},
                                {"name", it == names.end() ? "class_" + std::to_string(id) : it->second},
                                {"dice", score}});
    }
    j["average"] = average;
    return j.dump(2);
}

DiceReport make_dice_report(const std::vector<std::vector<double>>& per_volume_scores,
                            const std::vector<std::string>& class_names) {
    if (per_volume_scores.empty() || per_volume_scores.front().empty()) {
        throw std::invalid_argument("make_dice_report: no scores");
    }
    const std::size_t fg = per_volume_scores.front().size();
    DiceReport r;
    for (std::size_t k = 0; k < fg; ++k) {
        double s = 0.0;
        for (const auto& vol : per_volume_scores) {
            if (vol.size() != fg) {
                throw std::invalid_argument("make_dice_report: inconsistent class counts");
            }
            s += vol[k];
        }
        r.per_class[k + 1] = s / static_cast<double>(per_volume_scores.size());
        if (k + 1 < class_names.size()) {
            r.names[k + 1] = class_names[k + 1];
        }
    }
    double total = 0.0;
    for (const auto& [id, score] : r.per_class) total += score;
    r.average = total / static_cast<double>(fg);
    return r;
}

}  // namespace vmim
