#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "upo/autodiff.hpp"
#include "upo/common.hpp"
#include "upo/datagen.hpp"
#include "upo/models.hpp"
#include "upo/objectives.hpp"
#include "upo/uncertainty.hpp"

namespace upo {

struct IterationConfig {
    double beta = 0.1;
    double lambda = 0.0;
    double mu = 64.0;
    int mc_passes = 10;           // T
    int responses_per_prompt = 4; // N
    int iterations = 3;           // I
    int top_k = -1;               // -1 = ceil(N/2); 0 = no pre-screen (all permutations)
    double easy_fraction = 0.5;
    double hard_fraction = 0.1;
    double seed_mix_fraction = 0.4;
    int sft_epochs = 4;
    int policy_epochs = 3;
    int reward_epochs = 3;
    int estimator_epochs = 40;
    int update_epochs = 2;        // reward/estimator refresh per iteration
    double sft_lr = 0.05;
    double policy_lr = 0.02;
    double reward_lr = 0.05;
    double estimator_lr = 0.01;
    double estimator_negatives = 0.4;      // fraction of pairs that also contribute a swapped example
    double estimator_negative_target = 0.25; // soft class-1 target for swapped examples; hard 0
                                             // carves a confident wrong-side basin that the
                                             // information-gain ranking would then prefer
    double temperature = 0.8;
    double top_p = 0.9;
    double dropout_rate = 0.1;
    int batch_size = 8;
    AlphaMode alpha_mode = AlphaMode::Smoothing;
    NllSign nll_sign = NllSign::Corrected;
    WeightScope weight_scope = WeightScope::Prompt;
    bool update_rm_est = true;
    bool use_estimator = true;    // false = no-estimator ablation (all pairs, alpha 0)
    bool use_alpha = true;        // false = alpha forced to 0
    double reward_corruption = 0.3;  // fraction of generated scores reflected across the
                                     // batch mid-range (ordering-flipping label noise)

    void validate() const {
        require(beta > 0.0, "IterationConfig: beta must be > 0");
        require(lambda >= 0.0, "IterationConfig: lambda must be >= 0");
        require(mu > 0.0, "IterationConfig: mu must be > 0");
        require(mc_passes >= 2, "IterationConfig: T must be >= 2");
        require(responses_per_prompt >= 2, "IterationConfig: N must be >= 2");
        require(iterations >= 0, "IterationConfig: I must be >= 0");
        for (double f : {easy_fraction, hard_fraction, seed_mix_fraction})
            require(f >= 0.0 && f <= 1.0, "IterationConfig: fractions must be in [0,1]");
        require(dropout_rate > 0.0 && dropout_rate < 1.0,
                "IterationConfig: dropout rate must be in (0,1)");
        require(reward_corruption >= 0.0 && reward_corruption <= 1.0,
                "IterationConfig: reward corruption must be in [0,1]");
        require(estimator_negatives >= 0.0 && estimator_negatives <= 1.0,
                "IterationConfig: estimator negatives must be in [0,1]");
        require(estimator_negative_target >= 0.0 && estimator_negative_target <= 1.0,
                "IterationConfig: estimator negative target must be in [0,1]");
        require(batch_size >= 1, "IterationConfig: batch size must be >= 1");
    }

    int effective_top_k() const {
        return top_k >= 0 ? top_k : (responses_per_prompt + 1) / 2;
    }

    // Appendix-style per-iteration decay (5e-6 -> 4e-6 -> 3e-6 scaled).
    double policy_lr_at(int iteration) const {
        return policy_lr * std::max(0.2, 1.0 - 0.2 * std::max(0, iteration - 1));
    }
};

struct IterationState {
    int iteration = 0;
    PolicyModel policy;
    PolicyModel reference;  // frozen pi^(i-1)
    PolicyModel sft;        // evaluation baseline
    RewardModel reward;
    EstimatorModel estimator;
    TripleBatch dataset;    // D^(i)
    std::vector<PreferenceTriple> seed_pool;  // D^(0)
    std::uint64_t root_seed = 0;
};

// ---------------------------------------------------------------------------
// Minibatch Adam driver. GradFn(indices, grad_out) -> mean minibatch loss.
// Returns the mean loss of the final epoch. Gradient accumulation inside the
// GradFn is a fixed-order sum, so runs are reproducible.
// ---------------------------------------------------------------------------

template <class GradFn>
double train_minibatch(std::vector<double>& params, std::size_t n_examples, int epochs,
                       int batch_size, double lr, std::uint64_t seed, GradFn&& grad_fn) {
    if (epochs <= 0 || n_examples == 0) return 0.0;
    const long steps_per_epoch =
        static_cast<long>((n_examples + batch_size - 1) / batch_size);
    OptState opt = OptState::make(params.size(), lr, 0.1, steps_per_epoch * epochs);
    std::vector<std::size_t> order(n_examples);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {0x7261u}));
    double final_epoch_loss = 0.0;
    std::vector<double> grad;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = n_examples; i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(i)]);
        double epoch_loss = 0.0;
        for (std::size_t begin = 0; begin < n_examples; begin += batch_size) {
            const std::size_t end = std::min(n_examples, begin + batch_size);
            const std::vector<std::size_t> idx(order.begin() + begin, order.begin() + end);
            const double loss = grad_fn(idx, grad);
            require(std::isfinite(loss), "train_minibatch: loss diverged (non-finite) at epoch " +
                                             std::to_string(epoch));
            opt_step(params, grad, opt);
            epoch_loss += loss * static_cast<double>(idx.size());
        }
        final_epoch_loss = epoch_loss / static_cast<double>(n_examples);
    }
    return final_epoch_loss;
}

namespace detail {

inline TripleBatch subset(const TripleBatch& b, const std::vector<std::size_t>& idx) {
    TripleBatch out;
    for (std::size_t i : idx) {
        out.triples.push_back(b.triples[i]);
        if (!b.alphas.empty()) out.alphas.push_back(b.alphas[i]);
        if (!b.rewards.empty()) out.rewards.push_back(b.rewards[i]);
    }
    return out;
}

// Every labeled pair is rendered in its stored order with target class 1;
// a minority of pairs additionally contribute their swap as a soft negative.
// Keeping negatives scarce and their target soft matters: a fully balanced
// set with hard-0 negatives lets the model grow a confident "wrong-order"
// class, and confidently-wrong templates would then look certain (low
// information gain) to the MC-dropout probe. With mostly-positive,
// soft-negative training, mis-ordered templates land near the decision
// boundary instead, where dropout disagreement — and thus the gain — is high.
inline std::vector<EstimatorExample> estimator_examples(const std::vector<PreferenceTriple>& ts,
                                                        int estimator_context, double neg_fraction,
                                                        double neg_target, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0xe6u}));
    std::vector<EstimatorExample> out;
    out.reserve(ts.size());
    for (const auto& t : ts) {
        out.push_back({render_template(t.prompt, t.chosen, t.rejected, estimator_context), 1.0});
        if (rng.uniform() < neg_fraction)
            out.push_back(
                {render_template(t.prompt, t.rejected, t.chosen, estimator_context), neg_target});
    }
    return out;
}

// Weighted sampling without replacement (sequential draws).
inline std::vector<std::size_t> weighted_sample(const std::vector<double>& weights,
                                                std::size_t count, Rng& rng) {
    std::vector<std::size_t> pool(weights.size());
    std::iota(pool.begin(), pool.end(), 0);
    std::vector<double> w = weights;
    std::vector<std::size_t> out;
    count = std::min(count, pool.size());
    while (out.size() < count) {
        double total = std::accumulate(w.begin(), w.end(), 0.0);
        std::size_t pick = 0;
        if (total <= 0.0) {
            pick = rng.uniform_int(pool.size());
        } else {
            double r = rng.uniform() * total;
            for (std::size_t i = 0; i < pool.size(); ++i) {
                r -= w[i];
                if (r <= 0.0 || i + 1 == pool.size()) {
                    pick = i;
                    break;
                }
            }
        }
        out.push_back(pool[pick]);
        pool.erase(pool.begin() + pick);
        w.erase(w.begin() + pick);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Policy / reward / estimator trainers.
// ---------------------------------------------------------------------------

// Plain LM fit of chosen responses; produces the SFT baseline.
inline double train_sft(PolicyModel& policy, const std::vector<PreferenceTriple>& data,
                        int epochs, int batch_size, double lr, std::uint64_t seed) {
    return train_minibatch(
        policy.params.values, data.size(), epochs, batch_size, lr, seed,
        [&](const std::vector<std::size_t>& idx, std::vector<double>& grad) {
            grad.assign(policy.params.size(), 0.0);
            double loss = 0.0;
            const double inv = 1.0 / static_cast<double>(idx.size());
            for (std::size_t i : idx) {
                Graph g;
                const int lw = policy_logprob_graph(g, policy, data[i].prompt, data[i].chosen);
                const int nll = g.scale(lw, -1.0);
                const Values v = forward(g, policy.params);
                loss += v[nll][0] * inv;
                const auto gt = backward(g, nll, v, policy.params);
                for (std::size_t k = 0; k < gt.size(); ++k) grad[k] += gt[k] * inv;
            }
            return loss;
        });
}

inline double train_reward_model(RewardModel& rm, const TripleBatch& data, int epochs,
                                 int batch_size, double lr, std::uint64_t seed) {
    return train_minibatch(rm.params.values, data.triples.size(), epochs, batch_size, lr, seed,
                           [&](const std::vector<std::size_t>& idx, std::vector<double>& grad) {
                               return reward_loss(rm, detail::subset(data, idx), &grad).loss;
                           });
}

// Cross-entropy with a fresh dropout mask per example per step.
inline double train_estimator(EstimatorModel& est, const std::vector<EstimatorExample>& examples,
                              int epochs, int batch_size, double lr, double dropout_rate,
                              std::uint64_t seed) {
    std::uint64_t mask_counter = 0;
    const MaskLayout mask_layout = backbone_mask_layout(est.descriptor);
    return train_minibatch(
        est.params.values, examples.size(), epochs, batch_size, lr, seed,
        [&](const std::vector<std::size_t>& idx, std::vector<double>& grad) {
            std::vector<EstimatorExample> batch;
            for (std::size_t i : idx) batch.push_back(examples[i]);
            const auto masks = sample_dropout_masks(
                mask_layout, dropout_rate, derive_seed(seed, {0x6d61u, mask_counter++}),
                static_cast<int>(batch.size()));
            std::vector<const MaskSet*> mp;
            for (const auto& m : masks) mp.push_back(&m);
            return estimator_loss(est, batch, &mp, &grad).loss;
        });
}

// DPO or UPO(+NLL) policy fit against a frozen reference. Reference log-probs
// are computed once up front and never refreshed mid-training.
inline double train_policy(PolicyModel& policy, const PolicyModel& reference,
                           const TripleBatch& data, double beta, double lambda, NllSign nll_sign,
                           int epochs, int batch_size, double lr, std::uint64_t seed) {
    const auto ref_lp = reference_logprobs(reference, data);
    return train_minibatch(
        policy.params.values, data.triples.size(), epochs, batch_size, lr, seed,
        [&](const std::vector<std::size_t>& idx, std::vector<double>& grad) {
            TripleBatch batch = detail::subset(data, idx);
            std::vector<std::pair<double, double>> lp;
            for (std::size_t i : idx) lp.push_back(ref_lp[i]);
            return upo_nll_loss(policy, reference, batch, beta, lambda, nll_sign, &lp, &grad)
                .loss;
        });
}

// ---------------------------------------------------------------------------
// Algorithm stages.
// ---------------------------------------------------------------------------

struct InitMetrics {
    double sft_loss = 0.0;
    double dpo_loss = 0.0;
    double reward_loss = 0.0;
    double estimator_loss = 0.0;
};

inline IterationState init_stage(const std::vector<PreferenceTriple>& seed_data,
                                 const BackboneDescriptor& desc, const IterationConfig& config,
                                 std::uint64_t root_seed, InitMetrics* metrics = nullptr) {
    require(!seed_data.empty(), "init_stage: empty seed data");
    config.validate();
    desc.validate();

    BackboneDescriptor est_desc = desc;
    est_desc.context = 2 * desc.context + 4;
    est_desc.dropout_rate = config.dropout_rate;

    IterationState s;
    s.iteration = 0;
    s.root_seed = root_seed;
    s.seed_pool = seed_data;
    s.dataset.triples = seed_data;

    s.sft = PolicyModel::init(desc, derive_seed(root_seed, {1}));
    InitMetrics m;
    m.sft_loss = train_sft(s.sft, seed_data, config.sft_epochs, config.batch_size, config.sft_lr,
                           derive_seed(root_seed, {2}));

    s.policy = s.sft;
    s.reference = s.sft;  // reference stays the SFT snapshot for iteration 0
    m.dpo_loss = train_policy(s.policy, s.reference, s.dataset, config.beta, 0.0,
                              config.nll_sign, config.policy_epochs, config.batch_size,
                              config.policy_lr, derive_seed(root_seed, {3}));

    s.reward = RewardModel::init(desc, derive_seed(root_seed, {4}));
    m.reward_loss = train_reward_model(s.reward, s.dataset, config.reward_epochs,
                                       config.batch_size, config.reward_lr,
                                       derive_seed(root_seed, {5}));

    s.estimator = EstimatorModel::init(est_desc, derive_seed(root_seed, {6}));
    m.estimator_loss = train_estimator(
        s.estimator,
        detail::estimator_examples(seed_data, est_desc.context, config.estimator_negatives,
                                   config.estimator_negative_target, derive_seed(root_seed, {7})),
        config.estimator_epochs, config.batch_size, config.estimator_lr, config.dropout_rate,
        derive_seed(root_seed, {7}));

    if (metrics) *metrics = m;
    return s;
}

// D_easy by P, D_hard by 1-P, plus a uniform draw from the seed pool; union
// deduplicated by id, alpha attached.
inline TripleBatch select_data(const TripleBatch& pairs,
                               const std::vector<UncertaintyRecord>& records,
                               const std::vector<PreferenceTriple>& seed_pool,
                               const IterationConfig& config, std::uint64_t seed) {
    require(records.size() == pairs.triples.size(), "select_data: record count mismatch");
    Rng rng(derive_seed(seed, {0x5e1u}));

    std::vector<double> p(records.size()), q(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        p[i] = records[i].sampling_weight;
        q[i] = 1.0 - records[i].sampling_weight;
    }

    auto count_of = [&](double frac, std::size_t n) {
        return static_cast<std::size_t>(std::llround(frac * static_cast<double>(n)));
    };
    const std::size_t easy_want = count_of(config.easy_fraction, pairs.triples.size());
    const std::size_t hard_want = count_of(config.hard_fraction, pairs.triples.size());
    if (easy_want > pairs.triples.size() || hard_want > pairs.triples.size())
        std::cerr << "select_data: requested sample larger than population, taking all\n";

    std::set<std::size_t> chosen;
    for (std::size_t i : detail::weighted_sample(p, easy_want, rng)) chosen.insert(i);
    for (std::size_t i : detail::weighted_sample(q, hard_want, rng)) chosen.insert(i);

    TripleBatch out;
    for (std::size_t i : chosen) {
        out.triples.push_back(pairs.triples[i]);
        out.alphas.push_back(config.use_alpha ? records[i].alpha : 0.0);
    }

    const std::size_t mix_want = count_of(config.seed_mix_fraction, seed_pool.size());
    if (mix_want > 0 && !seed_pool.empty()) {
        std::vector<double> uniform(seed_pool.size(), 1.0);
        for (std::size_t i : detail::weighted_sample(uniform, mix_want, rng)) {
            out.triples.push_back(seed_pool[i]);
            out.alphas.push_back(0.0);
        }
    }
    require(!out.triples.empty(), "select_data: selection produced an empty batch");
    return out;
}

struct IterationMetrics {
    int iteration = 0;
    std::size_t candidate_pairs = 0;
    std::size_t selected_size = 0;
    double mean_info_gain = 0.0;
    double loss_final = 0.0;
    double reward_loss_final = 0.0;
    double estimator_loss_final = 0.0;
};

struct IterationResult {
    IterationState state;
    IterationMetrics metrics;
    std::vector<UncertaintyRecord> records;  // aligned with candidates
    TripleBatch candidates;                  // D_u^(i)
};

inline IterationResult run_iteration(const IterationState& state,
                                     const std::vector<Sequence>& prompts,
                                     const IterationConfig& config, std::uint64_t seed) {
    config.validate();
    require(!prompts.empty(), "run_iteration: empty prompt set");
    const int next_iter = state.iteration + 1;

    // (a)+(b) generate, reward, pre-screen
    TripleBatch candidates;
    std::vector<std::size_t> prompt_group;  // candidate -> prompt index
    Rng corrupt_rng(derive_seed(seed, {0xc0u}));
    for (std::size_t j = 0; j < prompts.size(); ++j) {
        const auto responses = policy_sample(state.policy, prompts[j], config.temperature,
                                             config.top_p, config.responses_per_prompt,
                                             derive_seed(seed, {1, j}));
        std::vector<RewardedResponse> rewarded;
        for (std::size_t k = 0; k < responses.size(); ++k) {
            RewardedResponse r;
            r.response = responses[k];
            r.reward = reward_score(state.reward, prompts[j], responses[k]);
            r.id = static_cast<int>(k);
            rewarded.push_back(std::move(r));
        }
        if (config.reward_corruption > 0.0) {
            double lo = rewarded.front().reward, hi = lo;
            for (const auto& r : rewarded) {
                lo = std::min(lo, r.reward);
                hi = std::max(hi, r.reward);
            }
            // Reflect across the batch mid-range: corrupted scores stay inside
            // the clean interval but flip pairwise orderings (see the noise
            // study's corruption for the same rationale).
            for (auto& r : rewarded)
                if (corrupt_rng.uniform() < config.reward_corruption)
                    r.reward = lo + hi - r.reward;
        }
        auto built = build_pairs(prompts[j], std::move(rewarded), config.effective_top_k(),
                                 "gen" + std::to_string(next_iter) + "_p" + std::to_string(j));
        for (auto& t : built.triples) {
            t.provenance = "generated(" + std::to_string(next_iter) + ")";
            candidates.triples.push_back(std::move(t));
            prompt_group.push_back(j);
        }
    }
    require(!candidates.triples.empty(), "run_iteration: no candidate pairs were generated");

    // (c) uncertainty estimation
    std::vector<UncertaintyRecord> records(candidates.triples.size());
    IterationMetrics metrics;
    metrics.iteration = next_iter;
    metrics.candidate_pairs = candidates.triples.size();
    if (config.use_estimator) {
        std::vector<double> gains(candidates.triples.size());
        for (std::size_t i = 0; i < candidates.triples.size(); ++i) {
            const auto& t = candidates.triples[i];
            const Sequence tmpl =
                render_template(t.prompt, t.chosen, t.rejected, state.estimator.descriptor.context);
            const McPrediction mc =
                mc_predict(state.estimator, tmpl, config.mc_passes, config.dropout_rate,
                           derive_seed(seed, {2, i}), t.id);
            gains[i] = information_gain(mc);
            records[i].triple_id = t.id;
            records[i].info_gain = gains[i];
            records[i].certainty = std::pow(1.0 - gains[i], config.mu);
            metrics.mean_info_gain += gains[i] / static_cast<double>(gains.size());
        }
        // normalize sampling weights per scope group; a group where every
        // pair maxes out the info gain degrades to uniform weights
        auto safe_weights = [&](const std::vector<double>& g) {
            for (double v : g)
                if (v < 1.0) return sampling_weights(g, config.mu);
            return std::vector<double>(g.size(), 1.0 / static_cast<double>(g.size()));
        };
        if (config.weight_scope == WeightScope::Dataset) {
            const auto w = safe_weights(gains);
            for (std::size_t i = 0; i < w.size(); ++i) records[i].sampling_weight = w[i];
        } else {
            for (std::size_t j = 0; j < prompts.size(); ++j) {
                std::vector<std::size_t> members;
                std::vector<double> g;
                for (std::size_t i = 0; i < prompt_group.size(); ++i)
                    if (prompt_group[i] == j) {
                        members.push_back(i);
                        g.push_back(gains[i]);
                    }
                if (members.empty()) continue;
                const auto w = safe_weights(g);
                for (std::size_t k = 0; k < members.size(); ++k)
                    records[members[k]].sampling_weight = w[k];
            }
        }
        if (config.use_alpha)
            for (auto& r : records) r.alpha = alpha_weight(r, config.alpha_mode);
    } else {
        for (std::size_t i = 0; i < records.size(); ++i) {
            records[i].triple_id = candidates.triples[i].id;
            records[i].certainty = 1.0;
            records[i].sampling_weight = 1.0 / static_cast<double>(records.size());
        }
    }

    // (d) selection
    TripleBatch selected;
    if (config.use_estimator) {
        selected = select_data(candidates, records, state.seed_pool, config,
                               derive_seed(seed, {3}));
    } else {
        selected.triples = candidates.triples;
        selected.alphas.assign(candidates.triples.size(), 0.0);
        Rng rng(derive_seed(seed, {3}));
        const std::size_t mix =
            static_cast<std::size_t>(std::llround(config.seed_mix_fraction *
                                                  static_cast<double>(state.seed_pool.size())));
        std::vector<double> uniform(state.seed_pool.size(), 1.0);
        for (std::size_t i : detail::weighted_sample(uniform, mix, rng)) {
            selected.triples.push_back(state.seed_pool[i]);
            selected.alphas.push_back(0.0);
        }
    }
    metrics.selected_size = selected.triples.size();

    // cache chosen-response rewards from the frozen reward model for the NLL term
    selected.rewards.clear();
    for (const auto& t : selected.triples)
        selected.rewards.push_back(reward_score(state.reward, t.prompt, t.chosen));

    // (e) train the policy with the reference frozen at pi^(i-1)
    IterationResult result;
    result.state = state;
    result.state.iteration = next_iter;
    result.state.reference = state.policy;
    result.state.dataset = selected;
    metrics.loss_final = train_policy(result.state.policy, state.policy, selected, config.beta,
                                      config.lambda, config.nll_sign, config.policy_epochs,
                                      config.batch_size, config.policy_lr_at(next_iter),
                                      derive_seed(seed, {4}));

    // (f) optional reward / estimator refresh
    if (config.update_rm_est) {
        metrics.reward_loss_final =
            train_reward_model(result.state.reward, selected, config.update_epochs,
                               config.batch_size, config.reward_lr, derive_seed(seed, {5}));
        metrics.estimator_loss_final = train_estimator(
            result.state.estimator,
            detail::estimator_examples(selected.triples, state.estimator.descriptor.context,
                                       config.estimator_negatives, config.estimator_negative_target,
                                       derive_seed(seed, {6})),
            config.update_epochs, config.batch_size, config.estimator_lr, config.dropout_rate,
            derive_seed(seed, {6}));
    }

    result.metrics = metrics;
    result.records = std::move(records);
    result.candidates = std::move(candidates);
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation against the hidden utility.
// ---------------------------------------------------------------------------

struct EvalResult {
    double win_rate = 0.0;
    double mean_true_utility = 0.0;
};

inline EvalResult evaluate(const PolicyModel& policy, const PolicyModel& baseline,
                           const SyntheticWorld& world, const std::vector<Sequence>& prompts,
                           std::uint64_t seed) {
    require(prompts.size() >= 100, "evaluate: need at least 100 prompts");
    double wins = 0.0, utility = 0.0;
    for (std::size_t j = 0; j < prompts.size(); ++j) {
        const std::uint64_t s = derive_seed(seed, {j});
        const Sequence a = policy_sample(policy, prompts[j], 1.0, 1.0, 1, s, /*greedy=*/true)[0];
        const Sequence b = policy_sample(baseline, prompts[j], 1.0, 1.0, 1, s, /*greedy=*/true)[0];
        if (a == b)
            wins += 0.5;  // ties split evenly, so a policy scores 0.5 against itself
        else
            wins += true_preference(world, prompts[j], a, b) == a ? 1.0 : 0.0;
        utility += world.utility(prompts[j], a);
    }
    EvalResult out;
    out.win_rate = wins / static_cast<double>(prompts.size());
    out.mean_true_utility = utility / static_cast<double>(prompts.size());
    return out;
}

// ---------------------------------------------------------------------------
// Persistence. Checkpoint: "UPOCKPT1" magic, JSON header, little-endian f64
// parameter array.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'U', 'P', 'O', 'C', 'K', 'P', 'T', '1'};

inline nlohmann::json descriptor_to_json(const BackboneDescriptor& d) {
    return {{"vocab", d.vocab},
            {"context", d.context},
            {"embed_dim", d.embed_dim},
            {"hidden_dim", d.hidden_dim},
            {"dropout_rate", d.dropout_rate}};
}

inline BackboneDescriptor descriptor_from_json(const nlohmann::json& j) {
    BackboneDescriptor d;
    d.vocab = j.at("vocab").get<int>();
    d.context = j.at("context").get<int>();
    d.embed_dim = j.at("embed_dim").get<int>();
    d.hidden_dim = j.at("hidden_dim").get<int>();
    d.dropout_rate = j.at("dropout_rate").get<double>();
    return d;
}

inline void save_checkpoint(const std::string& path, const ParamVector& params,
                            const BackboneDescriptor& desc, int head_dim, int iteration,
                            std::uint64_t seed) {
    nlohmann::json header;
    header["architecture"] = descriptor_to_json(desc);
    header["head_dim"] = head_dim;
    header["iteration"] = iteration;
    header["seed"] = seed;
    header["param_count"] = params.size();
    nlohmann::json segments = nlohmann::json::array();
    for (const auto& s : params.layout.segments())
        segments.push_back({{"name", s.name}, {"length", s.length}});
    header["segments"] = segments;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    require(f.good(), "save_checkpoint: cannot open " + path);
    f.write(kCheckpointMagic, 8);
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    f.write(reinterpret_cast<const char*>(&hlen), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(reinterpret_cast<const char*>(params.values.data()),
            static_cast<std::streamsize>(params.values.size() * sizeof(double)));
    require(f.good(), "save_checkpoint: write failed for " + path);
}

struct Checkpoint {
    ParamVector params;
    BackboneDescriptor descriptor;
    int head_dim = 0;
    int iteration = 0;
    std::uint64_t seed = 0;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    require(f.gcount() == 8, "load_checkpoint: truncated file " + path);
    require(std::memcmp(magic, kCheckpointMagic, 8) == 0,
            "load_checkpoint: magic/version mismatch in " + path + " (expected UPOCKPT1)");
    std::uint32_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 4);
    require(f.gcount() == 4, "load_checkpoint: truncated header length in " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), hlen);
    require(static_cast<std::uint32_t>(f.gcount()) == hlen,
            "load_checkpoint: truncated header in " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception&) {
        throw Error("load_checkpoint: corrupt header JSON in " + path);
    }

    Checkpoint c;
    c.descriptor = descriptor_from_json(header.at("architecture"));
    c.head_dim = header.at("head_dim").get<int>();
    c.iteration = header.at("iteration").get<int>();
    c.seed = header.at("seed").get<std::uint64_t>();
    const std::size_t count = header.at("param_count").get<std::size_t>();

    std::vector<std::pair<std::string, std::size_t>> spec;
    for (const auto& s : header.at("segments"))
        spec.emplace_back(s.at("name").get<std::string>(), s.at("length").get<std::size_t>());
    c.params = ParamVector::zeros(ParamLayout(spec));
    require(c.params.size() == count, "load_checkpoint: segment/param count mismatch in " + path);
    f.read(reinterpret_cast<char*>(c.params.values.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    require(static_cast<std::size_t>(f.gcount()) == count * sizeof(double),
            "load_checkpoint: truncated parameter array in " + path);
    return c;
}

inline void save_state(const IterationState& s, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto& d = s.policy.descriptor;
    save_checkpoint(dir + "/policy.ckpt", s.policy.params, d, d.vocab, s.iteration, s.root_seed);
    save_checkpoint(dir + "/reference.ckpt", s.reference.params, d, d.vocab, s.iteration,
                    s.root_seed);
    save_checkpoint(dir + "/sft.ckpt", s.sft.params, d, d.vocab, s.iteration, s.root_seed);
    save_checkpoint(dir + "/reward.ckpt", s.reward.params, s.reward.descriptor, 1, s.iteration,
                    s.root_seed);
    save_checkpoint(dir + "/estimator.ckpt", s.estimator.params, s.estimator.descriptor, 2,
                    s.iteration, s.root_seed);
    save_triples_jsonl(dir + "/data.jsonl", s.dataset.triples);
    save_triples_jsonl(dir + "/seed_data.jsonl", s.seed_pool);
    nlohmann::json aux;
    aux["iteration"] = s.iteration;
    aux["root_seed"] = s.root_seed;
    aux["alphas"] = s.dataset.alphas;
    aux["rewards"] = s.dataset.rewards;
    std::ofstream f(dir + "/state.json");
    f << aux.dump(2) << "\n";
}

inline IterationState load_state(const std::string& dir) {
    IterationState s;
    const Checkpoint pol = load_checkpoint(dir + "/policy.ckpt");
    const Checkpoint ref = load_checkpoint(dir + "/reference.ckpt");
    const Checkpoint sft = load_checkpoint(dir + "/sft.ckpt");
    const Checkpoint rm = load_checkpoint(dir + "/reward.ckpt");
    const Checkpoint est = load_checkpoint(dir + "/estimator.ckpt");
    s.policy = {pol.descriptor, pol.params};
    s.reference = {ref.descriptor, ref.params};
    s.sft = {sft.descriptor, sft.params};
    s.reward = {rm.descriptor, rm.params};
    s.estimator = {est.descriptor, est.params};
    s.iteration = pol.iteration;
    s.root_seed = pol.seed;
    s.dataset.triples = load_triples_jsonl(dir + "/data.jsonl");
    s.seed_pool = load_triples_jsonl(dir + "/seed_data.jsonl");
    std::ifstream f(dir + "/state.json");
    require(f.good(), "load_state: cannot open " + dir + "/state.json");
    nlohmann::json aux = nlohmann::json::parse(f);
    s.dataset.alphas = aux.at("alphas").get<std::vector<double>>();
    s.dataset.rewards = aux.at("rewards").get<std::vector<double>>();
    return s;
}

}  // namespace upo
