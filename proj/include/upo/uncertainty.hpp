#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "upo/autodiff.hpp"
#include "upo/common.hpp"
#include "upo/models.hpp"

namespace upo {

struct McPrediction {
    std::string triple_id;
    std::vector<double> probs;  // p(c=1) per stochastic pass

    int passes() const { return static_cast<int>(probs.size()); }
};

struct UncertaintyRecord {
    std::string triple_id;
    double info_gain = 0.0;       // B-hat, bits
    double certainty = 0.0;       // (1 - B)^mu
    double sampling_weight = 0.0; // normalized P
    double alpha = 0.0;
};

enum class AlphaMode { Smoothing, PaperLiteral };
enum class WeightScope { Prompt, Dataset };

// T stochastic forward passes under fresh dropout masks.
inline McPrediction mc_predict(const EstimatorModel& est, const Sequence& tmpl, int passes,
                               double rate, std::uint64_t seed,
                               const std::string& triple_id = "") {
    require(passes >= 2, "mc_predict: need at least 2 passes (variance undefined below)");
    require(rate > 0.0 && rate < 1.0, "mc_predict: rate must be in (0,1)");
    const auto masks = sample_dropout_masks(backbone_mask_layout(est.descriptor), rate, seed, passes);
    McPrediction out;
    out.triple_id = triple_id;
    out.probs.reserve(static_cast<std::size_t>(passes));
    for (const auto& m : masks) out.probs.push_back(estimator_prob(est, tmpl, &m));
    return out;
}

// Binary entropy in bits, with 0 log 0 := 0.
inline double binary_entropy(double p) {
    double h = 0.0;
    if (p > 0.0) h -= p * std::log2(p);
    if (p < 1.0) h -= (1.0 - p) * std::log2(1.0 - p);
    return h;
}

// BALD: entropy of the mean prediction minus mean per-pass entropy.
inline double information_gain(const McPrediction& mc) {
    require(!mc.probs.empty(), "information_gain: empty prediction");
    double mean = 0.0;
    double mean_entropy = 0.0;
    for (double p : mc.probs) {
        require(p >= 0.0 && p <= 1.0, "information_gain: probability out of [0,1]");
        mean += p;
        mean_entropy += binary_entropy(p);
    }
    const double t = static_cast<double>(mc.probs.size());
    mean /= t;
    mean_entropy /= t;
    const double gain = binary_entropy(mean) - mean_entropy;
    return std::min(1.0, std::max(0.0, gain));
}

// P_j = (1 - B_j)^mu / sum_k (1 - B_k)^mu.
inline std::vector<double> sampling_weights(const std::vector<double>& gains, double mu) {
    require(mu > 0.0, "sampling_weights: mu must be > 0");
    require(!gains.empty(), "sampling_weights: empty gain list");
    std::vector<double> w(gains.size());
    double total = 0.0;
    for (std::size_t j = 0; j < gains.size(); ++j) {
        require(gains[j] >= 0.0 && gains[j] <= 1.0, "sampling_weights: gain out of [0,1]");
        w[j] = std::pow(1.0 - gains[j], mu);
        total += w[j];
    }
    require(total > 0.0, "sampling_weights: degenerate: zero total certainty");
    for (auto& v : w) v /= total;
    return w;
}

inline double alpha_weight(const UncertaintyRecord& rec, AlphaMode mode) {
    if (mode == AlphaMode::PaperLiteral) return 1.0 / (rec.sampling_weight + 1.0);
    return (1.0 - rec.certainty) / 2.0;
}

}  // namespace upo
