#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "upo/autodiff.hpp"
#include "upo/common.hpp"
#include "upo/datagen.hpp"
#include "upo/models.hpp"

namespace upo {

// Floor for the |reward| normalizer in the NLL anchor term. Toy-scale reward
// magnitudes are frequently far below 1, and an unfloored 1/|r| lets a few
// near-zero-reward triples dominate the batch gradient and destroy the policy.
inline constexpr double kRewardDenomFloor = 0.5;

enum class NllSign { Corrected, PaperLiteral };

struct TripleBatch {
    std::vector<PreferenceTriple> triples;
    std::vector<double> alphas;   // empty = all zero
    std::vector<double> rewards;  // chosen-response rewards from the frozen reward model

    void validate() const {
        require(!triples.empty(), "TripleBatch: empty batch");
        require(alphas.empty() || alphas.size() == triples.size(),
                "TripleBatch: alpha count mismatch");
        require(rewards.empty() || rewards.size() == triples.size(),
                "TripleBatch: reward count mismatch");
        for (double a : alphas)
            require(a >= 0.0 && a <= 1.0, "TripleBatch: alpha out of [0,1]");
    }

    double alpha(std::size_t j) const { return alphas.empty() ? 0.0 : alphas[j]; }
};

struct LossReport {
    struct Components {
        double forward_term = 0.0;
        double reversed_term = 0.0;
        double nll_term = 0.0;
    };
    double loss = 0.0;
    std::vector<double> margins;
    std::vector<Components> components;
};

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// P(y_w > y_l) under Bradley-Terry, stable for large margins.
inline double bt_prob(double r_w, double r_l) {
    require(std::isfinite(r_w) && std::isfinite(r_l), "bt_prob: non-finite reward");
    return sigmoid(r_w - r_l);
}

// -----------------------------------------------------------------------
// Reward model loss: mean of -log sigma(r(x,y_w) - r(x,y_l)).
// -----------------------------------------------------------------------

inline LossReport reward_loss(const RewardModel& rm, const TripleBatch& batch,
                              std::vector<double>* grad_out = nullptr) {
    batch.validate();
    LossReport rep;
    const double inv_n = 1.0 / static_cast<double>(batch.triples.size());
    if (grad_out) grad_out->assign(rm.params.size(), 0.0);
    for (const auto& t : batch.triples) {
        Graph g;
        const int rw = reward_score_graph(g, rm, t.prompt, t.chosen);
        const int rl = reward_score_graph(g, rm, t.prompt, t.rejected);
        const int loss = g.scale(g.log_sigmoid(g.sub(rw, rl)), -1.0);
        const Values v = forward(g, rm.params);
        require(std::isfinite(v[rw][0]) && std::isfinite(v[rl][0]),
                "reward_loss: non-finite reward score");
        rep.margins.push_back(v[rw][0] - v[rl][0]);
        rep.components.push_back({v[loss][0], 0.0, 0.0});
        rep.loss += v[loss][0] * inv_n;
        if (grad_out) {
            const auto g_t = backward(g, loss, v, rm.params);
            for (std::size_t i = 0; i < g_t.size(); ++i) (*grad_out)[i] += g_t[i] * inv_n;
        }
    }
    return rep;
}

// -----------------------------------------------------------------------
// DPO / UPO losses over the policy.
// -----------------------------------------------------------------------

inline double dpo_margin(const PolicyModel& policy, const PolicyModel& ref,
                         const PreferenceTriple& t) {
    return (policy_logprob(policy, t.prompt, t.chosen) - policy_logprob(ref, t.prompt, t.chosen)) -
           (policy_logprob(policy, t.prompt, t.rejected) -
            policy_logprob(ref, t.prompt, t.rejected));
}

// Reference log-probs (chosen, rejected) per triple; computing them once per
// iteration keeps Eq.-margin inputs frozen while the policy trains.
inline std::vector<std::pair<double, double>> reference_logprobs(const PolicyModel& ref,
                                                                 const TripleBatch& batch) {
    std::vector<std::pair<double, double>> out;
    out.reserve(batch.triples.size());
    for (const auto& t : batch.triples)
        out.emplace_back(policy_logprob(ref, t.prompt, t.chosen),
                         policy_logprob(ref, t.prompt, t.rejected));
    return out;
}

namespace detail {

// Shared UPO/DPO/NLL worker. A triple's contribution is
//   (1-alpha) * -log sigma(beta h) + alpha * -log sigma(-beta h)
//   + lambda * sign * log pi(y_w|x) / max(|r|, eps)
// with sign = -1 for the corrected NLL and +1 for the paper-literal form.
inline LossReport preference_loss(const PolicyModel& policy, const PolicyModel& ref,
                                  const TripleBatch& batch, double beta, double lambda,
                                  NllSign nll_sign, bool use_alpha,
                                  const std::vector<std::pair<double, double>>* ref_lp,
                                  std::vector<double>* grad_out) {
    batch.validate();
    require(beta > 0.0, "preference loss: beta must be > 0");
    require(lambda >= 0.0, "preference loss: lambda must be >= 0");
    if (lambda > 0.0)
        require(batch.rewards.size() == batch.triples.size(),
                "preference loss: NLL term needs cached rewards");
    if (ref_lp)
        require(ref_lp->size() == batch.triples.size(),
                "preference loss: reference logprob count mismatch");

    LossReport rep;
    const double inv_n = 1.0 / static_cast<double>(batch.triples.size());
    if (grad_out) grad_out->assign(policy.params.size(), 0.0);

    for (std::size_t j = 0; j < batch.triples.size(); ++j) {
        const auto& t = batch.triples[j];
        const double alpha = use_alpha ? batch.alpha(j) : 0.0;
        const double rw = ref_lp ? (*ref_lp)[j].first : policy_logprob(ref, t.prompt, t.chosen);
        const double rl = ref_lp ? (*ref_lp)[j].second : policy_logprob(ref, t.prompt, t.rejected);

        Graph g;
        const int lw = policy_logprob_graph(g, policy, t.prompt, t.chosen);
        const int ll = policy_logprob_graph(g, policy, t.prompt, t.rejected);
        const int h = g.sub(g.sub(lw, g.constant(rw)), g.sub(ll, g.constant(rl)));
        const int fwd = g.scale(g.log_sigmoid(g.scale(h, beta)), -1.0);
        const int rev = g.scale(g.log_sigmoid(g.scale(h, -beta)), -1.0);
        std::vector<int> terms{g.scale(fwd, 1.0 - alpha), g.scale(rev, alpha)};
        int nll = -1;
        if (lambda > 0.0) {
            const double denom = std::max(std::abs(batch.rewards[j]), kRewardDenomFloor);
            const double sign = nll_sign == NllSign::Corrected ? -1.0 : 1.0;
            nll = g.scale(lw, sign * lambda / denom);
            terms.push_back(nll);
        }
        const int loss = g.add(terms);
        const Values v = forward(g, policy.params);
        rep.margins.push_back(v[h][0]);
        rep.components.push_back(
            {v[fwd][0], v[rev][0], nll >= 0 ? v[nll][0] : 0.0});
        rep.loss += v[loss][0] * inv_n;
        if (grad_out) {
            const auto g_t = backward(g, loss, v, policy.params);
            for (std::size_t i = 0; i < g_t.size(); ++i) (*grad_out)[i] += g_t[i] * inv_n;
        }
    }
    return rep;
}

}  // namespace detail

inline LossReport dpo_loss(const PolicyModel& policy, const PolicyModel& ref,
                           const TripleBatch& batch, double beta,
                           const std::vector<std::pair<double, double>>* ref_lp = nullptr,
                           std::vector<double>* grad_out = nullptr) {
    return detail::preference_loss(policy, ref, batch, beta, 0.0, NllSign::Corrected,
                                   /*use_alpha=*/false, ref_lp, grad_out);
}

inline LossReport upo_loss(const PolicyModel& policy, const PolicyModel& ref,
                           const TripleBatch& batch, double beta,
                           const std::vector<std::pair<double, double>>* ref_lp = nullptr,
                           std::vector<double>* grad_out = nullptr) {
    return detail::preference_loss(policy, ref, batch, beta, 0.0, NllSign::Corrected,
                                   /*use_alpha=*/true, ref_lp, grad_out);
}

// NLL regularizer alone: lambda * mean(-log pi(y_w|x) / max(|r|, eps)).
inline LossReport nll_regularizer(const PolicyModel& policy, const TripleBatch& batch,
                                  double lambda, NllSign sign = NllSign::Corrected,
                                  std::vector<double>* grad_out = nullptr) {
    batch.validate();
    require(lambda >= 0.0, "nll_regularizer: lambda must be >= 0");
    LossReport rep;
    rep.margins.assign(batch.triples.size(), 0.0);
    if (grad_out) grad_out->assign(policy.params.size(), 0.0);
    if (lambda == 0.0) {
        rep.components.assign(batch.triples.size(), {});
        return rep;
    }
    require(batch.rewards.size() == batch.triples.size(),
            "nll_regularizer: cached rewards required");
    const double inv_n = 1.0 / static_cast<double>(batch.triples.size());
    const double s = sign == NllSign::Corrected ? -1.0 : 1.0;
    for (std::size_t j = 0; j < batch.triples.size(); ++j) {
        const auto& t = batch.triples[j];
        const double denom = std::max(std::abs(batch.rewards[j]), kRewardDenomFloor);
        Graph g;
        const int lw = policy_logprob_graph(g, policy, t.prompt, t.chosen);
        const int term = g.scale(lw, s * lambda / denom);
        const Values v = forward(g, policy.params);
        rep.components.push_back({0.0, 0.0, v[term][0]});
        rep.loss += v[term][0] * inv_n;
        if (grad_out) {
            const auto g_t = backward(g, term, v, policy.params);
            for (std::size_t i = 0; i < g_t.size(); ++i) (*grad_out)[i] += g_t[i] * inv_n;
        }
    }
    return rep;
}

// Combined training objective for the policy (UPO + NLL in one pass).
inline LossReport upo_nll_loss(const PolicyModel& policy, const PolicyModel& ref,
                               const TripleBatch& batch, double beta, double lambda,
                               NllSign sign = NllSign::Corrected,
                               const std::vector<std::pair<double, double>>* ref_lp = nullptr,
                               std::vector<double>* grad_out = nullptr) {
    return detail::preference_loss(policy, ref, batch, beta, lambda, sign,
                                   /*use_alpha=*/true, ref_lp, grad_out);
}

// -----------------------------------------------------------------------
// Estimator cross-entropy.
// -----------------------------------------------------------------------

struct EstimatorExample {
    Sequence input;     // rendered template
    double label = 1.0; // target probability of class 1; 0 and 1 are hard labels
};

inline LossReport estimator_loss(const EstimatorModel& est,
                                 const std::vector<EstimatorExample>& examples,
                                 const std::vector<const MaskSet*>* masks = nullptr,
                                 std::vector<double>* grad_out = nullptr) {
    require(!examples.empty(), "estimator_loss: empty batch");
    if (masks)
        require(masks->size() == examples.size(), "estimator_loss: mask count mismatch");
    LossReport rep;
    const double inv_n = 1.0 / static_cast<double>(examples.size());
    if (grad_out) grad_out->assign(est.params.size(), 0.0);
    for (std::size_t j = 0; j < examples.size(); ++j) {
        const auto& ex = examples[j];
        require(ex.label >= 0.0 && ex.label <= 1.0, "estimator_loss: label must be in [0,1]");
        const MaskSet* m = masks ? (*masks)[j] : nullptr;
        Graph g;
        const int logits = estimator_logits_graph(g, est, ex.input, m != nullptr);
        const int ls = g.log_softmax(logits);
        const int loss = g.add(g.scale(g.select(ls, 1), -ex.label),
                               g.scale(g.select(ls, 0), ex.label - 1.0));
        const Values v = forward(g, est.params, {}, m);
        rep.components.push_back({v[loss][0], 0.0, 0.0});
        rep.margins.push_back(0.0);
        rep.loss += v[loss][0] * inv_n;
        if (grad_out) {
            const auto g_t = backward(g, loss, v, est.params, m);
            for (std::size_t i = 0; i < g_t.size(); ++i) (*grad_out)[i] += g_t[i] * inv_n;
        }
    }
    return rep;
}

}  // namespace upo
