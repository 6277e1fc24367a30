#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "upo/common.hpp"
#include "upo/models.hpp"

namespace upo {

enum class OracleLabel { None, Correct, Flipped };

struct PreferenceTriple {
    std::string id;
    Sequence prompt;
    Sequence chosen;
    Sequence rejected;
    std::string provenance = "seed";
    OracleLabel oracle_label = OracleLabel::None;
};

// ---------------------------------------------------------------------------
// Synthetic world: hidden utility over bag-of-token and hashed-bigram
// features of (x, y). The unigram block gives the toy reward model a
// learnable signal; the bigram block keeps the map non-trivial.
// ---------------------------------------------------------------------------

class SyntheticWorld {
public:
    static constexpr std::size_t kBigramBuckets = 64;
    // The bigram block is deliberately attenuated: it keeps the utility map
    // non-trivial for the reward model while leaving enough unigram signal
    // for pooled-feature models to rank most pairs correctly.
    static constexpr double kBigramScale = 0.25;

    SyntheticWorld() = default;

    SyntheticWorld(std::uint64_t seed, BackboneDescriptor descriptor)
        : seed_(seed), descriptor_(descriptor) {
        descriptor_.validate();
        const std::size_t f = feature_dim();
        Rng rng(derive_seed(seed, {0xb0a7}));
        linear_.resize(f);
        wobble_.resize(f);
        for (auto& v : linear_) v = rng.uniform(-1.0, 1.0);
        for (auto& v : wobble_) v = rng.uniform(-1.0, 1.0);
    }

    std::uint64_t seed() const { return seed_; }
    const BackboneDescriptor& descriptor() const { return descriptor_; }
    std::size_t feature_dim() const {
        return static_cast<std::size_t>(descriptor_.vocab) + kBigramBuckets;
    }

    double utility(const Sequence& x, const Sequence& y) const {
        const std::vector<double> f = features(x, y);
        double lin = 0.0, wob = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) {
            lin += linear_[i] * f[i];
            wob += wobble_[i] * f[i];
        }
        return lin + 0.25 * std::sin(wob);
    }

    std::vector<double> features(const Sequence& x, const Sequence& y) const {
        const std::size_t V = descriptor_.vocab;
        std::vector<double> f(feature_dim(), 0.0);
        const double yn = 1.0 / static_cast<double>(std::max<std::size_t>(1, y.size()));
        for (int t : y.tokens) f[static_cast<std::size_t>(t)] += yn;
        std::vector<int> joint;
        joint.push_back(kBos);
        joint.insert(joint.end(), x.tokens.begin(), x.tokens.end());
        joint.push_back(kSep);
        joint.insert(joint.end(), y.tokens.begin(), y.tokens.end());
        joint.push_back(kEos);
        const double bn = 1.0 / static_cast<double>(joint.size() - 1);
        for (std::size_t i = 0; i + 1 < joint.size(); ++i) {
            std::uint64_t h = static_cast<std::uint64_t>(joint[i]) * V + joint[i + 1];
            h = derive_seed(h, {0x6b});
            f[V + h % kBigramBuckets] += kBigramScale * bn;
        }
        return f;
    }

private:
    std::uint64_t seed_ = 0;
    BackboneDescriptor descriptor_;
    std::vector<double> linear_;
    std::vector<double> wobble_;
};

inline SyntheticWorld make_world(std::uint64_t seed, const BackboneDescriptor& d) {
    return SyntheticWorld(seed, d);
}

// Oracle winner between two distinct responses; exact utility ties break by
// lexicographic token order.
inline const Sequence& true_preference(const SyntheticWorld& world, const Sequence& x,
                                       const Sequence& y1, const Sequence& y2) {
    require(!(y1 == y2), "true_preference: responses must differ");
    const double u1 = world.utility(x, y1);
    const double u2 = world.utility(x, y2);
    if (u1 > u2) return y1;
    if (u2 > u1) return y2;
    return y1 < y2 ? y1 : y2;
}

// ---------------------------------------------------------------------------
// Random sequence helpers (content tokens only, ids >= kReservedTokens).
// ---------------------------------------------------------------------------

inline Sequence random_sequence(Rng& rng, const BackboneDescriptor& d, std::size_t min_len,
                                std::size_t max_len, Role role) {
    Sequence s;
    s.role = role;
    const std::size_t len = min_len + rng.uniform_int(max_len - min_len + 1);
    s.tokens.reserve(len);
    for (std::size_t i = 0; i < len; ++i)
        s.tokens.push_back(kReservedTokens +
                           static_cast<int>(rng.uniform_int(d.vocab - kReservedTokens)));
    return s;
}

inline Sequence random_prompt(Rng& rng, const BackboneDescriptor& d) {
    return random_sequence(rng, d, 2, 5, Role::Prompt);
}

// Seed preference data: oracle labels with an independent flip probability.
inline std::vector<PreferenceTriple> label_seed_data(const SyntheticWorld& world, int n,
                                                     double noise_rate, std::uint64_t seed,
                                                     std::size_t max_response_len = 8) {
    require(noise_rate >= 0.0 && noise_rate < 0.5, "label_seed_data: noise rate must be in [0,0.5)");
    require(n >= 1, "label_seed_data: n must be >= 1");
    require(max_response_len >= 1, "label_seed_data: max response length must be >= 1");
    const BackboneDescriptor& d = world.descriptor();
    Rng rng(derive_seed(seed, {0x5eed}));
    std::vector<PreferenceTriple> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Sequence x = random_prompt(rng, d);
        const std::size_t room = static_cast<std::size_t>(d.context) - x.size();
        const std::size_t cap = std::min(max_response_len, room);
        Sequence y1 = random_sequence(rng, d, 1, cap, Role::Response);
        Sequence y2;
        do {
            y2 = random_sequence(rng, d, 1, cap, Role::Response);
        } while (y2 == y1);
        const Sequence& winner = true_preference(world, x, y1, y2);
        PreferenceTriple t;
        t.id = "seed_" + std::to_string(i);
        t.prompt = x;
        t.provenance = "seed";
        const bool flip = rng.uniform() < noise_rate;
        const Sequence& loser = (&winner == &y1) ? y2 : y1;
        t.chosen = flip ? loser : winner;
        t.rejected = flip ? winner : loser;
        t.oracle_label = flip ? OracleLabel::Flipped : OracleLabel::Correct;
        out.push_back(std::move(t));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Candidate pair construction (pre-screen rule).
// ---------------------------------------------------------------------------

struct RewardedResponse {
    Sequence response;
    double reward = 0.0;
    int rank = -1;  // 0 = best
    int id = 0;     // tie-break key
};

struct PairBuildResult {
    std::vector<PreferenceTriple> triples;
    bool degenerate = false;  // all rewards identical
};

// Ranks responses by reward descending (id ascending on ties) and emits
// chosen from rank < top_k vs rejected from rank >= top_k. top_k = 0 keeps
// every ordered pair (no pre-screen).
inline PairBuildResult build_pairs(const Sequence& prompt, std::vector<RewardedResponse> responses,
                                   int top_k, const std::string& id_prefix = "pair") {
    require(responses.size() >= 2, "build_pairs: need at least 2 responses");
    const int n = static_cast<int>(responses.size());
    require(top_k >= 0 && top_k < n, "build_pairs: top_k must be in [0, N)");
    std::sort(responses.begin(), responses.end(), [](const auto& a, const auto& b) {
        if (a.reward != b.reward) return a.reward > b.reward;
        return a.id < b.id;
    });
    for (int r = 0; r < n; ++r) responses[r].rank = r;

    PairBuildResult out;
    out.degenerate =
        std::all_of(responses.begin(), responses.end(),
                    [&](const auto& r) { return r.reward == responses.front().reward; });
    int k = 0;
    for (int i = 0; i < n; ++i) {
        const int j_begin = (top_k == 0) ? i + 1 : top_k;
        if (top_k != 0 && i >= top_k) break;
        for (int j = std::max(j_begin, i + 1); j < n; ++j) {
            if (responses[i].response == responses[j].response) continue;
            PreferenceTriple t;
            t.id = id_prefix + "_" + std::to_string(k++);
            t.prompt = prompt;
            t.chosen = responses[i].response;
            t.rejected = responses[j].response;
            t.provenance = "generated";
            out.triples.push_back(std::move(t));
        }
    }
    return out;
}

// Fraction of triples whose labeled direction disagrees with the oracle.
inline double noise_rate(const std::vector<PreferenceTriple>& batch, const SyntheticWorld& world) {
    require(!batch.empty(), "noise_rate: empty batch");
    int bad = 0;
    for (const auto& t : batch)
        if (!(true_preference(world, t.prompt, t.chosen, t.rejected) == t.chosen)) ++bad;
    return static_cast<double>(bad) / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// JSONL persistence.
// ---------------------------------------------------------------------------

inline nlohmann::json triple_to_json(const PreferenceTriple& t) {
    nlohmann::json j;
    j["id"] = t.id;
    j["prompt"] = t.prompt.tokens;
    j["chosen"] = t.chosen.tokens;
    j["rejected"] = t.rejected.tokens;
    j["provenance"] = t.provenance;
    if (t.oracle_label == OracleLabel::None)
        j["oracle_label"] = nullptr;
    else
        j["oracle_label"] = t.oracle_label == OracleLabel::Correct ? "correct" : "flipped";
    return j;
}

inline PreferenceTriple triple_from_json(const nlohmann::json& j) {
    PreferenceTriple t;
    t.id = j.at("id").get<std::string>();
    t.prompt.tokens = j.at("prompt").get<std::vector<int>>();
    t.chosen.tokens = j.at("chosen").get<std::vector<int>>();
    t.rejected.tokens = j.at("rejected").get<std::vector<int>>();
    t.chosen.role = t.rejected.role = Role::Response;
    t.provenance = j.at("provenance").get<std::string>();
    const auto& lbl = j.at("oracle_label");
    if (lbl.is_null())
        t.oracle_label = OracleLabel::None;
    else
        t.oracle_label = lbl.get<std::string>() == "correct" ? OracleLabel::Correct
                                                             : OracleLabel::Flipped;
    return t;
}

inline void save_triples_jsonl(const std::string& path, const std::vector<PreferenceTriple>& ts) {
    std::ofstream f(path);
    require(f.good(), "save_triples_jsonl: cannot open " + path);
    for (const auto& t : ts) f << triple_to_json(t).dump() << "\n";
}

inline std::vector<PreferenceTriple> load_triples_jsonl(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), "load_triples_jsonl: cannot open " + path);
    std::vector<PreferenceTriple> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        out.push_back(triple_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

}  // namespace upo
