#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "upo/loop.hpp"

namespace upo {

// ---------------------------------------------------------------------------
// Experiment configuration: one JSON file drives everything. Unknown keys are
// rejected so typos fail loudly instead of silently using a default.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    BackboneDescriptor model;
    IterationConfig training;
    std::uint64_t root_seed = 1;
    std::uint64_t world_seed = 7;
    int seed_data_size = 256;
    double label_noise = 0.1;
    int max_response_len = 8;
    int prompts_per_iteration = 16;
    int eval_prompts = 128;
    int noise_study_pool = 200;
    std::vector<std::string> strategies = {"random", "cb_rr", "margin", "uncertainty"};
    std::string output_dir = "run";

    void validate() const {
        model.validate();
        training.validate();
        require(seed_data_size >= 2, "ExperimentConfig: seed_data_size must be >= 2");
        require(max_response_len >= 1, "ExperimentConfig: max_response_len must be >= 1");
        require(label_noise >= 0.0 && label_noise < 0.5,
                "ExperimentConfig: label_noise must be in [0,0.5)");
        require(prompts_per_iteration >= 1, "ExperimentConfig: prompts_per_iteration must be >= 1");
        require(eval_prompts >= 100, "ExperimentConfig: eval_prompts must be >= 100");
        require(noise_study_pool >= 2, "ExperimentConfig: noise_study_pool must be >= 2");
        require(!output_dir.empty(), "ExperimentConfig: output_dir must be set");
    }
};

inline const std::vector<std::string> kStrategyNames = {"random", "cb_rr", "margin",
                                                        "uncertainty"};
inline const std::vector<std::string> kAblationVariants = {"no_rule", "no_estimator", "no_alpha",
                                                           "no_nll"};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& where) {
    require(j.is_object(), "config: '" + where + "' must be a JSON object");
    for (const auto& [key, value] : j.items())
        if (!known.count(key))
            throw Error("config: unknown key '" + key + "' in " + where);
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void parse_enum(const nlohmann::json& j, const char* key, AlphaMode& out) {
    if (!j.contains(key)) return;
    const std::string v = j.at(key).get<std::string>();
    if (v == "smoothing") out = AlphaMode::Smoothing;
    else if (v == "paper_literal") out = AlphaMode::PaperLiteral;
    else throw Error("config: " + std::string(key) + " must be 'smoothing' or 'paper_literal'");
}

inline void parse_enum(const nlohmann::json& j, const char* key, NllSign& out) {
    if (!j.contains(key)) return;
    const std::string v = j.at(key).get<std::string>();
    if (v == "corrected") out = NllSign::Corrected;
    else if (v == "paper_literal") out = NllSign::PaperLiteral;
    else throw Error("config: " + std::string(key) + " must be 'corrected' or 'paper_literal'");
}

inline void parse_enum(const nlohmann::json& j, const char* key, WeightScope& out) {
    if (!j.contains(key)) return;
    const std::string v = j.at(key).get<std::string>();
    if (v == "prompt") out = WeightScope::Prompt;
    else if (v == "dataset") out = WeightScope::Dataset;
    else throw Error("config: " + std::string(key) + " must be 'prompt' or 'dataset'");
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::reject_unknown_keys(
        j,
        {"model", "training", "root_seed", "world_seed", "seed_data_size", "label_noise",
         "max_response_len", "prompts_per_iteration", "eval_prompts", "noise_study_pool",
         "strategies", "output_dir"},
        "top level");
    detail::maybe(j, "root_seed", c.root_seed);
    detail::maybe(j, "world_seed", c.world_seed);
    detail::maybe(j, "seed_data_size", c.seed_data_size);
    detail::maybe(j, "label_noise", c.label_noise);
    detail::maybe(j, "max_response_len", c.max_response_len);
    detail::maybe(j, "prompts_per_iteration", c.prompts_per_iteration);
    detail::maybe(j, "eval_prompts", c.eval_prompts);
    detail::maybe(j, "noise_study_pool", c.noise_study_pool);
    detail::maybe(j, "strategies", c.strategies);
    detail::maybe(j, "output_dir", c.output_dir);

    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown_keys(m, {"vocab", "context", "embed_dim", "hidden_dim",
                                        "dropout_rate"},
                                    "model");
        detail::maybe(m, "vocab", c.model.vocab);
        detail::maybe(m, "context", c.model.context);
        detail::maybe(m, "embed_dim", c.model.embed_dim);
        detail::maybe(m, "hidden_dim", c.model.hidden_dim);
        detail::maybe(m, "dropout_rate", c.model.dropout_rate);
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        detail::reject_unknown_keys(
            t,
            {"beta", "lambda", "mu", "mc_passes", "responses_per_prompt", "iterations", "top_k",
             "easy_fraction", "hard_fraction", "seed_mix_fraction", "sft_epochs", "policy_epochs",
             "reward_epochs", "estimator_epochs", "update_epochs", "sft_lr", "policy_lr",
             "reward_lr", "estimator_lr", "estimator_negatives", "estimator_negative_target",
             "temperature", "top_p",
             "dropout_rate", "batch_size",
             "alpha_mode", "nll_sign", "weight_scope", "update_rm_est", "use_estimator",
             "use_alpha", "reward_corruption"},
            "training");
        auto& g = c.training;
        detail::maybe(t, "beta", g.beta);
        detail::maybe(t, "lambda", g.lambda);
        detail::maybe(t, "mu", g.mu);
        detail::maybe(t, "mc_passes", g.mc_passes);
        detail::maybe(t, "responses_per_prompt", g.responses_per_prompt);
        detail::maybe(t, "iterations", g.iterations);
        detail::maybe(t, "top_k", g.top_k);
        detail::maybe(t, "easy_fraction", g.easy_fraction);
        detail::maybe(t, "hard_fraction", g.hard_fraction);
        detail::maybe(t, "seed_mix_fraction", g.seed_mix_fraction);
        detail::maybe(t, "sft_epochs", g.sft_epochs);
        detail::maybe(t, "policy_epochs", g.policy_epochs);
        detail::maybe(t, "reward_epochs", g.reward_epochs);
        detail::maybe(t, "estimator_epochs", g.estimator_epochs);
        detail::maybe(t, "update_epochs", g.update_epochs);
        detail::maybe(t, "sft_lr", g.sft_lr);
        detail::maybe(t, "policy_lr", g.policy_lr);
        detail::maybe(t, "reward_lr", g.reward_lr);
        detail::maybe(t, "estimator_lr", g.estimator_lr);
        detail::maybe(t, "estimator_negatives", g.estimator_negatives);
        detail::maybe(t, "estimator_negative_target", g.estimator_negative_target);
        detail::maybe(t, "temperature", g.temperature);
        detail::maybe(t, "top_p", g.top_p);
        detail::maybe(t, "dropout_rate", g.dropout_rate);
        detail::maybe(t, "batch_size", g.batch_size);
        detail::maybe(t, "update_rm_est", g.update_rm_est);
        detail::maybe(t, "use_estimator", g.use_estimator);
        detail::maybe(t, "use_alpha", g.use_alpha);
        detail::maybe(t, "reward_corruption", g.reward_corruption);
        detail::parse_enum(t, "alpha_mode", g.alpha_mode);
        detail::parse_enum(t, "nll_sign", g.nll_sign);
        detail::parse_enum(t, "weight_scope", g.weight_scope);
    }
    for (const auto& s : c.strategies)
        require(std::find(kStrategyNames.begin(), kStrategyNames.end(), s) != kStrategyNames.end(),
                "config: unknown strategy '" + s +
                    "' (valid: random, cb_rr, margin, uncertainty)");
    // UPO_SEED wins over whatever the file says
    if (const char* env = std::getenv("UPO_SEED")) c.root_seed = std::strtoull(env, nullptr, 10);
    c.validate();
    return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json t;
    const auto& g = c.training;
    t["beta"] = g.beta;
    t["lambda"] = g.lambda;
    t["mu"] = g.mu;
    t["mc_passes"] = g.mc_passes;
    t["responses_per_prompt"] = g.responses_per_prompt;
    t["iterations"] = g.iterations;
    t["top_k"] = g.top_k;
    t["easy_fraction"] = g.easy_fraction;
    t["hard_fraction"] = g.hard_fraction;
    t["seed_mix_fraction"] = g.seed_mix_fraction;
    t["sft_epochs"] = g.sft_epochs;
    t["policy_epochs"] = g.policy_epochs;
    t["reward_epochs"] = g.reward_epochs;
    t["estimator_epochs"] = g.estimator_epochs;
    t["update_epochs"] = g.update_epochs;
    t["sft_lr"] = g.sft_lr;
    t["policy_lr"] = g.policy_lr;
    t["reward_lr"] = g.reward_lr;
    t["estimator_lr"] = g.estimator_lr;
    t["estimator_negatives"] = g.estimator_negatives;
    t["estimator_negative_target"] = g.estimator_negative_target;
    t["temperature"] = g.temperature;
    t["top_p"] = g.top_p;
    t["dropout_rate"] = g.dropout_rate;
    t["batch_size"] = g.batch_size;
    t["alpha_mode"] = g.alpha_mode == AlphaMode::Smoothing ? "smoothing" : "paper_literal";
    t["nll_sign"] = g.nll_sign == NllSign::Corrected ? "corrected" : "paper_literal";
    t["weight_scope"] = g.weight_scope == WeightScope::Prompt ? "prompt" : "dataset";
    t["update_rm_est"] = g.update_rm_est;
    t["use_estimator"] = g.use_estimator;
    t["use_alpha"] = g.use_alpha;
    t["reward_corruption"] = g.reward_corruption;

    nlohmann::json j;
    j["model"] = descriptor_to_json(c.model);
    j["training"] = t;
    j["root_seed"] = c.root_seed;
    j["world_seed"] = c.world_seed;
    j["seed_data_size"] = c.seed_data_size;
    j["label_noise"] = c.label_noise;
    j["max_response_len"] = c.max_response_len;
    j["prompts_per_iteration"] = c.prompts_per_iteration;
    j["eval_prompts"] = c.eval_prompts;
    j["noise_study_pool"] = c.noise_study_pool;
    j["strategies"] = c.strategies;
    j["output_dir"] = c.output_dir;
    return j;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "config: cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw Error("config: invalid JSON in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Run-directory helpers and CSV emission. Doubles are printed with 17
// significant digits so identical runs yield byte-identical files.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string iter_dir(const std::string& run_dir, int i) {
    return run_dir + "/iter_" + std::to_string(i);
}

inline int latest_iteration(const std::string& run_dir) {
    namespace fs = std::filesystem;
    int best = -1;
    if (!fs::exists(run_dir)) return best;
    for (const auto& e : fs::directory_iterator(run_dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("iter_", 0) == 0) {
            try {
                best = std::max(best, std::stoi(name.substr(5)));
            } catch (const std::exception&) {
            }
        }
    }
    return best;
}

inline std::vector<Sequence> derived_prompts(const BackboneDescriptor& d, int n,
                                             std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sequence> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(random_prompt(rng, d));
    return out;
}

inline void write_uncertainty_csv(const std::string& path,
                                  const std::vector<UncertaintyRecord>& records) {
    std::ofstream f(path);
    require(f.good(), "cannot open " + path);
    f << "triple_id,b_hat,s,p_weight,alpha\n";
    for (const auto& r : records)
        f << r.triple_id << "," << fmt(r.info_gain) << "," << fmt(r.certainty) << ","
          << fmt(r.sampling_weight) << "," << fmt(r.alpha) << "\n";
}

struct MetricsRow {
    int iter = 0;
    double win_rate_vs_sft = 0.0;
    double noise_rate_selected = 0.0;
    double mean_b_hat = 0.0;
    double loss_final = 0.0;
};

inline void write_metrics_json(const std::string& path, const MetricsRow& m,
                               const nlohmann::json& extra = {}) {
    nlohmann::json j;
    j["iter"] = m.iter;
    j["win_rate_vs_sft"] = m.win_rate_vs_sft;
    j["noise_rate_selected"] = m.noise_rate_selected;
    j["mean_b_hat"] = m.mean_b_hat;
    j["loss_final"] = m.loss_final;
    if (!extra.is_null()) for (const auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream f(path);
    require(f.good(), "cannot open " + path);
    f << j.dump(2) << "\n";
}

inline MetricsRow read_metrics_json(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "cannot open " + path);
    const nlohmann::json j = nlohmann::json::parse(f);
    MetricsRow m;
    m.iter = j.at("iter").get<int>();
    m.win_rate_vs_sft = j.at("win_rate_vs_sft").get<double>();
    m.noise_rate_selected = j.at("noise_rate_selected").get<double>();
    m.mean_b_hat = j.at("mean_b_hat").get<double>();
    m.loss_final = j.at("loss_final").get<double>();
    return m;
}

// Rebuilds metrics.csv from the per-iteration metrics.json files, so re-runs
// and resumed runs converge on identical bytes.
inline void rebuild_metrics_csv(const std::string& run_dir) {
    std::ofstream f(run_dir + "/metrics.csv");
    require(f.good(), "cannot open " + run_dir + "/metrics.csv");
    f << "iter,win_rate_vs_sft,noise_rate_selected,mean_b_hat,loss_final\n";
    const int last = latest_iteration(run_dir);
    for (int i = 0; i <= last; ++i) {
        const std::string path = iter_dir(run_dir, i) + "/metrics.json";
        if (!std::filesystem::exists(path)) continue;
        const MetricsRow m = read_metrics_json(path);
        f << m.iter << "," << fmt(m.win_rate_vs_sft) << "," << fmt(m.noise_rate_selected) << ","
          << fmt(m.mean_b_hat) << "," << fmt(m.loss_final) << "\n";
    }
}

inline std::vector<Sequence> eval_prompt_set(const ExperimentConfig& cfg) {
    return derived_prompts(cfg.model, cfg.eval_prompts, derive_seed(cfg.world_seed, {0xe7a1u}));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands. Each returns void and throws Error on failure; the CLI wrapper
// maps exceptions to exit codes.
// ---------------------------------------------------------------------------

inline void cmd_init(const std::string& config_path) {
    const ExperimentConfig cfg = load_config(config_path);
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    {
        std::ofstream f(cfg.output_dir + "/config.json");
        require(f.good(), "cannot open " + cfg.output_dir + "/config.json");
        f << config_to_json(cfg).dump(2) << "\n";
    }

    const SyntheticWorld world = make_world(cfg.world_seed, cfg.model);
    const auto seed_data = label_seed_data(world, cfg.seed_data_size, cfg.label_noise,
                                           derive_seed(cfg.root_seed, {0xdaa0u}),
                                           static_cast<std::size_t>(cfg.max_response_len));
    InitMetrics im;
    const IterationState s = init_stage(seed_data, cfg.model, cfg.training, cfg.root_seed, &im);

    const std::string dir = detail::iter_dir(cfg.output_dir, 0);
    save_state(s, dir);
    detail::write_uncertainty_csv(dir + "/uncertainty.csv", {});

    const auto eval_prompts = detail::eval_prompt_set(cfg);
    const EvalResult ev =
        evaluate(s.policy, s.sft, world, eval_prompts, derive_seed(cfg.root_seed, {0xeeu, 0}));
    detail::MetricsRow row;
    row.iter = 0;
    row.win_rate_vs_sft = ev.win_rate;
    row.noise_rate_selected = noise_rate(s.dataset.triples, world);
    row.mean_b_hat = 0.0;
    row.loss_final = im.dpo_loss;
    nlohmann::json extra;
    extra["sft_loss"] = im.sft_loss;
    extra["reward_loss"] = im.reward_loss;
    extra["estimator_loss"] = im.estimator_loss;
    extra["mean_true_utility"] = ev.mean_true_utility;
    detail::write_metrics_json(dir + "/metrics.json", row, extra);
    detail::rebuild_metrics_csv(cfg.output_dir);
    std::cout << "initialized " << dir << " (win_rate_vs_sft=" << detail::fmt(ev.win_rate) << ")\n";
}

inline void cmd_iterate(const std::string& run_dir, int count,
                        const IterationConfig* override_cfg = nullptr,
                        const std::string& variant = "") {
    require(count >= 0, "iterate: count must be >= 0");
    ExperimentConfig cfg = load_config(run_dir + "/config.json");
    if (override_cfg) cfg.training = *override_cfg;
    const int last = detail::latest_iteration(run_dir);
    require(last >= 0, "iterate: no iteration state found in " + run_dir);
    if (count == 0) return;

    const SyntheticWorld world = make_world(cfg.world_seed, cfg.model);
    const auto eval_prompts = detail::eval_prompt_set(cfg);
    IterationState state = load_state(detail::iter_dir(run_dir, last));

    for (int step = 0; step < count; ++step) {
        const int next = state.iteration + 1;
        const auto prompts =
            detail::derived_prompts(cfg.model, cfg.prompts_per_iteration,
                                    derive_seed(cfg.root_seed, {0x9e0u, (std::uint64_t)next}));
        IterationResult r =
            run_iteration(state, prompts, cfg.training,
                          derive_seed(cfg.root_seed, {0x17e8u, (std::uint64_t)next}));
        const std::string dir = detail::iter_dir(run_dir, next);
        save_state(r.state, dir);
        detail::write_uncertainty_csv(dir + "/uncertainty.csv", r.records);

        const EvalResult ev = evaluate(r.state.policy, r.state.sft, world, eval_prompts,
                                       derive_seed(cfg.root_seed, {0xeeu, (std::uint64_t)next}));
        detail::MetricsRow row;
        row.iter = next;
        row.win_rate_vs_sft = ev.win_rate;
        row.noise_rate_selected = noise_rate(r.state.dataset.triples, world);
        row.mean_b_hat = r.metrics.mean_info_gain;
        row.loss_final = r.metrics.loss_final;
        nlohmann::json extra;
        extra["candidate_pairs"] = r.metrics.candidate_pairs;
        extra["selected_size"] = r.metrics.selected_size;
        extra["mean_true_utility"] = ev.mean_true_utility;
        extra["lambda"] = cfg.training.lambda;
        if (!variant.empty()) extra["variant"] = variant;
        detail::write_metrics_json(dir + "/metrics.json", row, extra);
        detail::rebuild_metrics_csv(run_dir);
        std::cout << "iter " << next << ": win_rate_vs_sft=" << detail::fmt(ev.win_rate)
                  << " noise_rate=" << detail::fmt(row.noise_rate_selected)
                  << " mean_b_hat=" << detail::fmt(row.mean_b_hat) << "\n";
        state = std::move(r.state);
    }
}

// ---------------------------------------------------------------------------
// Sampling-strategy noise study. Candidates are generated once per seed with
// reward corruption injected; each strategy then draws `sample_size` pairs
// from the same pool and is scored against the hidden utility.
// ---------------------------------------------------------------------------

struct NoiseStudyRow {
    std::string strategy;
    std::uint64_t seed = 0;
    double noise = 0.0;
    std::size_t selected = 0;
};

namespace detail {

struct StudyPool {
    TripleBatch pairs;                       // pre-screened ordered pairs
    std::vector<double> weights;             // uncertainty weights, aligned
    std::vector<std::vector<RewardedResponse>> by_prompt;  // corrupted rewards
    std::vector<Sequence> prompts;
};

inline StudyPool build_study_pool(const IterationState& state, const ExperimentConfig& cfg,
                                  double corruption, int pool_target, std::uint64_t seed) {
    StudyPool pool;
    IterationConfig tc = cfg.training;
    const int per_prompt =
        std::max(1, tc.effective_top_k() * (tc.responses_per_prompt - tc.effective_top_k()));
    const int n_prompts = (pool_target + per_prompt - 1) / per_prompt;
    pool.prompts = derived_prompts(cfg.model, n_prompts, derive_seed(seed, {0x90u}));
    Rng corrupt_rng(derive_seed(seed, {0xc1u}));

    std::vector<double> gains;
    std::vector<std::size_t> group;
    for (std::size_t j = 0; j < pool.prompts.size(); ++j) {
        // The candidate pool draws responses from the world's own sampler, not
        // the policy: policy samples after tuning are near-ties under the true
        // utility, which would make "noise" mostly irreducible ambiguity
        // rather than the injected corruption the study is meant to measure.
        Rng resp_rng(derive_seed(seed, {0x91u, j}));
        const std::size_t room =
            static_cast<std::size_t>(cfg.model.context) - pool.prompts[j].size();
        const std::size_t cap = std::min(static_cast<std::size_t>(cfg.max_response_len), room);
        std::vector<RewardedResponse> rewarded;
        for (int k = 0; k < tc.responses_per_prompt; ++k) {
            Sequence y = random_sequence(resp_rng, cfg.model, 1, cap, Role::Response);
            while (std::any_of(rewarded.begin(), rewarded.end(),
                               [&](const RewardedResponse& r) { return r.response == y; }))
                y = random_sequence(resp_rng, cfg.model, 1, cap, Role::Response);
            rewarded.push_back(
                {y, reward_score(state.reward, pool.prompts[j], y), -1, k});
        }
        double lo = rewarded.front().reward, hi = lo;
        for (const auto& r : rewarded) {
            lo = std::min(lo, r.reward);
            hi = std::max(hi, r.reward);
        }
        // Corruption reflects a score across the batch mid-range rather than
        // replacing it with an out-of-range draw: reflected scores stay inside
        // the clean score interval (so a margin filter cannot trivially spot
        // them) while still flipping pairwise orderings.
        for (auto& r : rewarded)
            if (corrupt_rng.uniform() < corruption) r.reward = lo + hi - r.reward;
        auto built = build_pairs(pool.prompts[j], rewarded, tc.effective_top_k(),
                                 "study_p" + std::to_string(j));
        for (auto& t : built.triples) {
            const Sequence tmpl =
                render_template(t.prompt, t.chosen, t.rejected, state.estimator.descriptor.context);
            const McPrediction mc =
                mc_predict(state.estimator, tmpl, tc.mc_passes, tc.dropout_rate,
                           derive_seed(seed, {0x92u, pool.pairs.triples.size()}), t.id);
            gains.push_back(information_gain(mc));
            group.push_back(j);
            pool.pairs.triples.push_back(std::move(t));
        }
        pool.by_prompt.push_back(std::move(rewarded));
    }
    require(!pool.pairs.triples.empty(), "noise study: empty candidate pool");
    pool.weights.assign(gains.size(), 0.0);
    bool any_certain = false;
    for (double g : gains)
        if (g < 1.0) any_certain = true;
    if (any_certain) {
        const auto w = sampling_weights(gains, cfg.training.mu);
        pool.weights = w;
    } else {
        pool.weights.assign(gains.size(), 1.0 / static_cast<double>(gains.size()));
    }
    return pool;
}

inline std::vector<PreferenceTriple> draw_strategy(const StudyPool& pool,
                                                   const std::string& strategy,
                                                   std::size_t sample_size, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x57u}));
    std::vector<PreferenceTriple> out;
    if (strategy == "random") {
        std::vector<double> uniform(pool.pairs.triples.size(), 1.0);
        for (std::size_t i : weighted_sample(uniform, sample_size, rng))
            out.push_back(pool.pairs.triples[i]);
    } else if (strategy == "uncertainty") {
        for (std::size_t i : weighted_sample(pool.weights, sample_size, rng))
            out.push_back(pool.pairs.triples[i]);
    } else if (strategy == "cb_rr") {
        // best-reward response as chosen, a random strictly worse one as rejected
        for (std::size_t j = 0; j < pool.by_prompt.size() && out.size() < sample_size; ++j) {
            auto rs = pool.by_prompt[j];
            std::sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) {
                if (a.reward != b.reward) return a.reward > b.reward;
                return a.id < b.id;
            });
            std::vector<std::size_t> lower;
            for (std::size_t k = 1; k < rs.size(); ++k)
                if (rs[k].reward < rs[0].reward && !(rs[k].response == rs[0].response))
                    lower.push_back(k);
            if (lower.empty()) continue;
            const std::size_t pick = lower[rng.uniform_int(lower.size())];
            PreferenceTriple t;
            t.id = "cbrr_p" + std::to_string(j);
            t.prompt = pool.prompts[j];
            t.chosen = rs[0].response;
            t.rejected = rs[pick].response;
            t.provenance = "cb_rr";
            out.push_back(std::move(t));
        }
    } else if (strategy == "margin") {
        // single pair per prompt with the largest reward margin
        for (std::size_t j = 0; j < pool.by_prompt.size() && out.size() < sample_size; ++j) {
            auto rs = pool.by_prompt[j];
            std::sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) {
                if (a.reward != b.reward) return a.reward > b.reward;
                return a.id < b.id;
            });
            if (rs.front().response == rs.back().response) continue;
            if (rs.front().reward == rs.back().reward) continue;
            PreferenceTriple t;
            t.id = "margin_p" + std::to_string(j);
            t.prompt = pool.prompts[j];
            t.chosen = rs.front().response;
            t.rejected = rs.back().response;
            t.provenance = "margin";
            out.push_back(std::move(t));
        }
    } else {
        throw Error("noise study: unknown strategy '" + strategy +
                    "' (valid: random, cb_rr, margin, uncertainty)");
    }
    require(!out.empty(), "noise study: strategy '" + strategy + "' selected nothing");
    return out;
}

}  // namespace detail

inline std::vector<NoiseStudyRow> noise_study(const IterationState& state,
                                              const ExperimentConfig& cfg,
                                              const std::vector<std::string>& strategies,
                                              std::size_t sample_size,
                                              const std::vector<std::uint64_t>& seeds,
                                              double corruption) {
    const SyntheticWorld world = make_world(cfg.world_seed, cfg.model);
    std::vector<NoiseStudyRow> rows;
    for (std::uint64_t seed : seeds) {
        const detail::StudyPool pool =
            detail::build_study_pool(state, cfg, corruption, cfg.noise_study_pool, seed);
        for (const auto& strategy : strategies) {
            const auto selected = detail::draw_strategy(pool, strategy, sample_size, seed);
            rows.push_back({strategy, seed, noise_rate(selected, world), selected.size()});
        }
    }
    return rows;
}

inline void cmd_noise_study(const std::string& run_dir, std::vector<std::string> strategies,
                            std::size_t sample_size, std::vector<std::uint64_t> seeds,
                            double corruption = 0.3) {
    const ExperimentConfig cfg = load_config(run_dir + "/config.json");
    if (strategies.empty()) strategies = cfg.strategies;
    if (seeds.empty()) seeds = {1, 2, 3, 4, 5};
    if (sample_size == 0) sample_size = static_cast<std::size_t>(cfg.noise_study_pool) / 4;
    for (const auto& s : strategies)
        require(std::find(kStrategyNames.begin(), kStrategyNames.end(), s) != kStrategyNames.end(),
                "noise study: unknown strategy '" + s +
                    "' (valid: random, cb_rr, margin, uncertainty)");
    const int last = detail::latest_iteration(run_dir);
    require(last >= 0, "noise study: no iteration state found in " + run_dir);
    const IterationState state = load_state(detail::iter_dir(run_dir, last));

    const auto rows = noise_study(state, cfg, strategies, sample_size, seeds, corruption);
    std::ofstream f(run_dir + "/noise_study.csv");
    require(f.good(), "cannot open " + run_dir + "/noise_study.csv");
    f << "strategy,seed,noise_rate,selected\n";
    for (const auto& r : rows)
        f << r.strategy << "," << r.seed << "," << detail::fmt(r.noise) << "," << r.selected
          << "\n";
    std::map<std::string, std::pair<double, int>> means;
    for (const auto& r : rows) {
        means[r.strategy].first += r.noise;
        means[r.strategy].second += 1;
    }
    for (const auto& [name, acc] : means)
        std::cout << name << ": mean noise rate "
                  << detail::fmt(acc.first / std::max(1, acc.second)) << "\n";
}

inline void cmd_ablate(const std::string& run_dir, const std::string& variant) {
    require(std::find(kAblationVariants.begin(), kAblationVariants.end(), variant) !=
                kAblationVariants.end(),
            "ablate: unknown variant '" + variant +
                "' (valid: no_rule, no_estimator, no_alpha, no_nll)");
    const ExperimentConfig base = load_config(run_dir + "/config.json");
    IterationConfig cfg = base.training;
    if (variant == "no_rule") cfg.top_k = 0;
    else if (variant == "no_estimator") cfg.use_estimator = false;
    else if (variant == "no_alpha") cfg.use_alpha = false;
    else cfg.lambda = 0.0;

    // run the variant in its own directory, branched from iter_0
    const std::string out = run_dir + "/ablate_" + variant;
    namespace fs = std::filesystem;
    fs::create_directories(out);
    fs::copy(run_dir + "/config.json", out + "/config.json",
             fs::copy_options::overwrite_existing);
    const std::string src = detail::iter_dir(run_dir, 0);
    require(fs::exists(src), "ablate: missing " + src);
    fs::copy(src, detail::iter_dir(out, 0),
             fs::copy_options::overwrite_existing | fs::copy_options::recursive);
    cmd_iterate(out, 1, &cfg, variant);
}

inline void cmd_export_plots(const std::string& run_dir) {
    const std::string run_name = std::filesystem::path(run_dir).filename().string();
    std::ofstream f(run_dir + "/plots.csv");
    require(f.good(), "cannot open " + run_dir + "/plots.csv");
    f << "run,iter,step,metric,value\n";
    const int last = detail::latest_iteration(run_dir);
    for (int i = 0; i <= last; ++i) {
        const std::string path = detail::iter_dir(run_dir, i) + "/metrics.json";
        if (!std::filesystem::exists(path)) continue;
        const detail::MetricsRow m = detail::read_metrics_json(path);
        f << run_name << "," << i << ",0,win_rate_vs_sft," << detail::fmt(m.win_rate_vs_sft)
          << "\n";
        f << run_name << "," << i << ",0,noise_rate_selected,"
          << detail::fmt(m.noise_rate_selected) << "\n";
        f << run_name << "," << i << ",0,mean_b_hat," << detail::fmt(m.mean_b_hat) << "\n";
        f << run_name << "," << i << ",0,loss_final," << detail::fmt(m.loss_final) << "\n";
    }
}

}  // namespace upo
