#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "upo/autodiff.hpp"
#include "upo/common.hpp"

namespace upo {

// Reserved token ids, shared by all three models.
inline constexpr int kBos = 0;
inline constexpr int kSep = 1;
inline constexpr int kEos = 2;
inline constexpr int kEnd = 3;  // end-of-response
inline constexpr int kReservedTokens = 4;

struct BackboneDescriptor {
    int vocab = 32;
    int context = 16;
    int embed_dim = 16;
    int hidden_dim = 64;
    double dropout_rate = 0.1;

    void validate() const {
        require(vocab >= kReservedTokens, "BackboneDescriptor: vocab must be >= 4");
        require(context >= 4, "BackboneDescriptor: context must be >= 4");
        require(embed_dim >= 1 && hidden_dim >= 1, "BackboneDescriptor: dims must be >= 1");
        require(dropout_rate >= 0.0 && dropout_rate < 1.0, "BackboneDescriptor: bad dropout rate");
    }

    bool operator==(const BackboneDescriptor&) const = default;
};

enum class Role { Prompt, Response };

struct Sequence {
    std::vector<int> tokens;
    Role role = Role::Prompt;

    std::size_t size() const { return tokens.size(); }
    bool operator==(const Sequence& o) const { return tokens == o.tokens; }
    bool operator<(const Sequence& o) const { return tokens < o.tokens; }
};

inline void check_tokens(const Sequence& s, int vocab) {
    for (int t : s.tokens)
        require(t >= 0 && t < vocab, "Sequence: token id " + std::to_string(t) + " out of range");
}

// ---------------------------------------------------------------------------
// Shared backbone: token embedding -> [mean pool, position-ramp pool,
// last-token] features -> one relu hidden layer with dropout -> task head.
// The ramp channel weights token t by a zero-mean linear ramp over positions;
// without it the representation is invariant to token order, and the pair
// estimator has to tell (x, a, b) apart from (x, b, a).
// ---------------------------------------------------------------------------

inline ParamLayout backbone_layout(const BackboneDescriptor& d, int head_dim) {
    const std::size_t V = d.vocab, e = d.embed_dim, h = d.hidden_dim;
    return ParamLayout({
        {"embed", V * e},
        {"w1", h * 3 * e},
        {"b1", h},
        {"head_w", static_cast<std::size_t>(head_dim) * h},
        {"head_b", static_cast<std::size_t>(head_dim)},
    });
}

// Dropout mask layout of the backbone: one slot over the hidden layer.
inline MaskLayout backbone_mask_layout(const BackboneDescriptor& d) {
    return {static_cast<std::size_t>(d.hidden_dim)};
}

// Appends the backbone computation for one token window to `g` and returns
// the head output node (length head_dim).
inline int backbone_graph(Graph& g, const BackboneDescriptor& d, const std::vector<int>& tokens,
                          int head_dim, bool with_dropout) {
    require(!tokens.empty(), "backbone_graph: empty token window");
    const std::size_t e = d.embed_dim, h = d.hidden_dim;
    std::vector<int> embs;
    embs.reserve(tokens.size());
    for (int t : tokens) {
        require(t >= 0 && t < d.vocab, "backbone_graph: token out of range");
        embs.push_back(g.param("embed", static_cast<std::size_t>(t) * e, e));
    }
    const std::size_t n = tokens.size();
    const int mean = g.scale(g.add(embs), 1.0 / static_cast<double>(n));
    int ramp;
    if (n == 1) {
        ramp = g.scale(embs[0], 0.0);
    } else {
        // weights (t - (n-1)/2) / n: zero-mean, contrasts late against early
        std::vector<int> weighted;
        weighted.reserve(n);
        const double mid = static_cast<double>(n - 1) / 2.0;
        for (std::size_t t = 0; t < n; ++t)
            weighted.push_back(
                g.scale(embs[t], (static_cast<double>(t) - mid) / static_cast<double>(n)));
        ramp = g.add(weighted);
    }
    const int feat = g.concat({mean, ramp, embs.back()});
    const int pre = g.add(g.matvec(g.param("w1", 0, h * 3 * e), feat, h, 3 * e), g.param("b1", 0, h));
    int hid = g.relu(pre);
    if (with_dropout) hid = g.dropout(hid, 0);
    return g.add(g.matvec(g.param("head_w", 0, static_cast<std::size_t>(head_dim) * h), hid,
                          head_dim, h),
                 g.param("head_b", 0, head_dim));
}

// ---------------------------------------------------------------------------
// Policy model: per-position softmax head over the vocabulary.
// ---------------------------------------------------------------------------

struct PolicyModel {
    BackboneDescriptor descriptor;
    ParamVector params;

    static PolicyModel init(const BackboneDescriptor& d, std::uint64_t seed, double stddev = 0.1) {
        d.validate();
        return {d, ParamVector::randn(backbone_layout(d, d.vocab), stddev, seed)};
    }
};

struct RewardModel {
    BackboneDescriptor descriptor;
    ParamVector params;

    static RewardModel init(const BackboneDescriptor& d, std::uint64_t seed, double stddev = 0.1) {
        d.validate();
        return {d, ParamVector::randn(backbone_layout(d, 1), stddev, seed)};
    }
};

struct EstimatorModel {
    BackboneDescriptor descriptor;
    ParamVector params;

    static EstimatorModel init(const BackboneDescriptor& d, std::uint64_t seed, double stddev = 0.1) {
        d.validate();
        return {d, ParamVector::randn(backbone_layout(d, 2), stddev, seed)};
    }
};

// Next-token logits for one prefix (pure inference path).
inline std::vector<double> policy_logits(const PolicyModel& m, const std::vector<int>& prefix) {
    Graph g;
    const int out = backbone_graph(g, m.descriptor, prefix, m.descriptor.vocab, false);
    return forward(g, m.params)[out];
}

// Appends sum_t log p(y_t | x, y_<t) to `g`; returns the scalar node.
// Context starts at BOS so the empty-prompt prefix is well formed.
inline int policy_logprob_graph(Graph& g, const PolicyModel& m, const Sequence& x,
                                const Sequence& y) {
    check_tokens(x, m.descriptor.vocab);
    check_tokens(y, m.descriptor.vocab);
    require(x.size() + y.size() <= static_cast<std::size_t>(m.descriptor.context),
            "policy_logprob: combined length exceeds context window");
    if (y.tokens.empty()) return g.constant(0.0);
    std::vector<int> prefix;
    prefix.push_back(kBos);
    prefix.insert(prefix.end(), x.tokens.begin(), x.tokens.end());
    std::vector<int> terms;
    for (int tok : y.tokens) {
        const int logits = backbone_graph(g, m.descriptor, prefix, m.descriptor.vocab, false);
        terms.push_back(g.select(g.log_softmax(logits), static_cast<std::size_t>(tok)));
        prefix.push_back(tok);
    }
    return g.add(terms);
}

inline double policy_logprob(const PolicyModel& m, const Sequence& x, const Sequence& y) {
    Graph g;
    const int node = policy_logprob_graph(g, m, x, y);
    return forward(g, m.params)[node][0];
}

// Nucleus sampling. Reserved structural tokens (BOS/SEP/EOS) are never
// emitted; the end-of-response token terminates generation and is not kept
// in the returned sequence.
inline std::vector<Sequence> policy_sample(const PolicyModel& m, const Sequence& x,
                                           double temperature, double top_p, int n,
                                           std::uint64_t seed, bool greedy = false) {
    require(greedy || temperature > 0.0, "policy_sample: temperature must be > 0");
    require(top_p > 0.0 && top_p <= 1.0, "policy_sample: top_p must be in (0,1]");
    require(n >= 1, "policy_sample: n must be >= 1");
    check_tokens(x, m.descriptor.vocab);
    const std::size_t cap = static_cast<std::size_t>(m.descriptor.context);
    require(x.size() + 1 < cap, "policy_sample: prompt leaves no room for a response");

    std::vector<Sequence> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(k)}));
        std::vector<int> prefix;
        prefix.push_back(kBos);
        prefix.insert(prefix.end(), x.tokens.begin(), x.tokens.end());
        Sequence y;
        y.role = Role::Response;
        while (x.size() + y.size() < cap) {
            std::vector<double> logits = policy_logits(m, prefix);
            logits[kBos] = logits[kSep] = logits[kEos] = -1e30;
            int tok;
            if (greedy) {
                tok = static_cast<int>(std::max_element(logits.begin(), logits.end()) -
                                       logits.begin());
            } else {
                for (auto& v : logits) v /= temperature;
                const double mx = *std::max_element(logits.begin(), logits.end());
                std::vector<double> probs(logits.size());
                double z = 0.0;
                for (std::size_t i = 0; i < logits.size(); ++i) {
                    probs[i] = std::exp(logits[i] - mx);
                    z += probs[i];
                }
                for (auto& p : probs) p /= z;
                // nucleus: smallest prefix of the descending order with mass >= top_p
                std::vector<std::size_t> order(probs.size());
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(),
                                 [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
                double mass = 0.0;
                std::size_t keep = 0;
                while (keep < order.size() && mass < top_p) {
                    mass += probs[order[keep]];
                    ++keep;
                }
                double r = rng.uniform() * mass;
                tok = static_cast<int>(order[keep - 1]);
                for (std::size_t i = 0; i < keep; ++i) {
                    r -= probs[order[i]];
                    if (r <= 0.0) {
                        tok = static_cast<int>(order[i]);
                        break;
                    }
                }
            }
            if (tok == kEnd) break;
            y.tokens.push_back(tok);
            prefix.push_back(tok);
        }
        out.push_back(std::move(y));
    }
    return out;
}

// Scalar reward head on the joint (x, y) window.
inline int reward_score_graph(Graph& g, const RewardModel& m, const Sequence& x,
                              const Sequence& y) {
    check_tokens(x, m.descriptor.vocab);
    check_tokens(y, m.descriptor.vocab);
    require(x.size() + y.size() <= static_cast<std::size_t>(m.descriptor.context),
            "reward_score: combined length exceeds context window");
    std::vector<int> window;
    window.push_back(kBos);
    window.insert(window.end(), x.tokens.begin(), x.tokens.end());
    window.insert(window.end(), y.tokens.begin(), y.tokens.end());
    window.push_back(kEnd);
    return g.select(backbone_graph(g, m.descriptor, window, 1, false), 0);
}

inline double reward_score(const RewardModel& m, const Sequence& x, const Sequence& y) {
    Graph g;
    const int node = reward_score_graph(g, m, x, y);
    return forward(g, m.params)[node][0];
}

// Estimator input template: [BOS] x [SEP] y_w [SEP] y_l [EOS].
inline Sequence render_template(const Sequence& x, const Sequence& y_w, const Sequence& y_l,
                                int estimator_context) {
    require(x.size() + y_w.size() + y_l.size() + 4 <= static_cast<std::size_t>(estimator_context),
            "render_template: combined length exceeds estimator context");
    Sequence t;
    t.role = Role::Prompt;
    t.tokens.push_back(kBos);
    t.tokens.insert(t.tokens.end(), x.tokens.begin(), x.tokens.end());
    t.tokens.push_back(kSep);
    t.tokens.insert(t.tokens.end(), y_w.tokens.begin(), y_w.tokens.end());
    t.tokens.push_back(kSep);
    t.tokens.insert(t.tokens.end(), y_l.tokens.begin(), y_l.tokens.end());
    t.tokens.push_back(kEos);
    return t;
}

struct TemplateParts {
    Sequence x, y_w, y_l;
};

inline TemplateParts parse_template(const Sequence& t) {
    require(t.size() >= 4 && t.tokens.front() == kBos && t.tokens.back() == kEos,
            "parse_template: missing frame tokens");
    std::vector<std::size_t> seps;
    for (std::size_t i = 1; i + 1 < t.size(); ++i)
        if (t.tokens[i] == kSep) seps.push_back(i);
    require(seps.size() == 2, "parse_template: expected exactly two separators");
    TemplateParts p;
    p.x.tokens.assign(t.tokens.begin() + 1, t.tokens.begin() + seps[0]);
    p.y_w.tokens.assign(t.tokens.begin() + seps[0] + 1, t.tokens.begin() + seps[1]);
    p.y_l.tokens.assign(t.tokens.begin() + seps[1] + 1, t.tokens.end() - 1);
    p.y_w.role = p.y_l.role = Role::Response;
    return p;
}

// Two-way softmax node over the template; class 1 = "chosen genuinely
// preferred".
inline int estimator_logits_graph(Graph& g, const EstimatorModel& m, const Sequence& tmpl,
                                  bool with_dropout) {
    check_tokens(tmpl, m.descriptor.vocab);
    require(tmpl.size() <= static_cast<std::size_t>(m.descriptor.context),
            "estimator: template exceeds context window");
    return backbone_graph(g, m.descriptor, tmpl.tokens, 2, with_dropout);
}

inline double estimator_prob(const EstimatorModel& m, const Sequence& tmpl,
                             const MaskSet* masks = nullptr) {
    Graph g;
    const int probs = g.softmax(estimator_logits_graph(g, m, tmpl, masks != nullptr));
    return forward(g, m.params, {}, masks)[probs][1];
}

}  // namespace upo
