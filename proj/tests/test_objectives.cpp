#include <doctest.h>

#include <cmath>
#include <vector>

#include "upo/objectives.hpp"

using namespace upo;

namespace {

BackboneDescriptor tiny_desc() {
    BackboneDescriptor d;
    d.vocab = 8;
    d.context = 8;
    d.embed_dim = 3;
    d.hidden_dim = 4;
    return d;
}

TripleBatch tiny_batch(int n, std::uint64_t seed) {
    TripleBatch b;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        PreferenceTriple t;
        t.id = "t" + std::to_string(i);
        t.prompt.tokens = {4 + static_cast<int>(rng.uniform_int(4)),
                           4 + static_cast<int>(rng.uniform_int(4))};
        t.chosen.tokens = {4 + static_cast<int>(rng.uniform_int(4)),
                           4 + static_cast<int>(rng.uniform_int(4))};
        do {
            t.rejected.tokens = {4 + static_cast<int>(rng.uniform_int(4)),
                                 4 + static_cast<int>(rng.uniform_int(4))};
        } while (t.rejected == t.chosen);
        t.chosen.role = t.rejected.role = Role::Response;
        b.triples.push_back(std::move(t));
    }
    return b;
}

TripleBatch swapped(const TripleBatch& b) {
    TripleBatch out = b;
    for (auto& t : out.triples) std::swap(t.chosen, t.rejected);
    for (auto& a : out.alphas) a = 1.0 - a;
    return out;
}

// scalar UPO term as a plain function of the margin
double upo_term(double h, double alpha, double beta) {
    auto nls = [](double z) { return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z)); };
    return (1.0 - alpha) * nls(beta * h) + alpha * nls(-beta * h);
}

}  // namespace

TEST_CASE("bt_prob: symmetry point, ln3 margin, huge margin") {
    CHECK(bt_prob(1.7, 1.7) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(bt_prob(std::log(3.0), 0.0) == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(bt_prob(700.0, 0.0) == 1.0);
    CHECK(bt_prob(0.0, 700.0) >= 0.0);
}

TEST_CASE("bt_prob(a,b) + bt_prob(b,a) = 1 for random pairs") {
    Rng rng(5);
    for (int i = 0; i < 10000; ++i) {
        const double a = rng.uniform(-50.0, 50.0);
        const double b = rng.uniform(-50.0, 50.0);
        CHECK(bt_prob(a, b) + bt_prob(b, a) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("reward_loss: zero margins give ln 2") {
    BackboneDescriptor d = tiny_desc();
    RewardModel zero{d, ParamVector::zeros(backbone_layout(d, 1))};
    const auto rep = reward_loss(zero, tiny_batch(4, 1));
    CHECK(rep.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("reward_loss equals averaged -log bt_prob and frozen margin values hold") {
    RewardModel m = RewardModel::init(tiny_desc(), 7, 0.6);
    const TripleBatch b = tiny_batch(6, 2);
    const auto rep = reward_loss(m, b);
    double want = 0.0;
    for (const auto& t : b.triples)
        want -= std::log(bt_prob(reward_score(m, t.prompt, t.chosen),
                                 reward_score(m, t.prompt, t.rejected))) /
                b.triples.size();
    CHECK(rep.loss == doctest::Approx(want).epsilon(1e-12));

    // margins {1, -1} -> mean(-log sigma(1), -log sigma(-1)) = 0.813262
    const double frozen = 0.5 * (-std::log(sigmoid(1.0)) - std::log(sigmoid(-1.0)));
    CHECK(frozen == doctest::Approx(0.813262).epsilon(1e-6));
}

TEST_CASE("reward_loss is monotone decreasing in the margin") {
    auto nls = [](double h) { return -std::log(sigmoid(h)); };
    CHECK(nls(5.0) < nls(1.0));
    CHECK(nls(1.0) < nls(0.0));
    CHECK(nls(50.0) < 1e-20);  // margins -> +inf drive the loss to 0
}

TEST_CASE("dpo_margin: zero at theta=ref, antisymmetric under swap, matches logprob identity") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 3, 0.4);
    PolicyModel ref = PolicyModel::init(tiny_desc(), 9, 0.4);
    const TripleBatch b = tiny_batch(3, 3);
    for (const auto& t : b.triples) {
        CHECK(dpo_margin(pol, pol, t) == doctest::Approx(0.0).epsilon(1e-12));
        PreferenceTriple sw = t;
        std::swap(sw.chosen, sw.rejected);
        CHECK(dpo_margin(pol, ref, sw) == doctest::Approx(-dpo_margin(pol, ref, t)).epsilon(1e-12));
        const double want =
            (policy_logprob(pol, t.prompt, t.chosen) - policy_logprob(ref, t.prompt, t.chosen)) -
            (policy_logprob(pol, t.prompt, t.rejected) -
             policy_logprob(ref, t.prompt, t.rejected));
        CHECK(dpo_margin(pol, ref, t) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("dpo_loss: ln 2 per triple at theta=ref; beta=0 rejected") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 13, 0.4);
    const TripleBatch b = tiny_batch(5, 4);
    const auto rep = dpo_loss(pol, pol, b, 0.1);
    CHECK(rep.loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    for (const auto& c : rep.components)
        CHECK(c.forward_term == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    CHECK_THROWS_AS(dpo_loss(pol, pol, b, 0.0), Error);
}

TEST_CASE("dpo_loss: frozen h={2,-2}, beta=0.1 scalar value") {
    const double frozen = 0.5 * (upo_term(2.0, 0.0, 0.1) + upo_term(-2.0, 0.0, 0.1));
    CHECK(frozen == doctest::Approx(0.698139).epsilon(1e-6));
    CHECK(upo_term(2.0, 0.0, 0.1) == doctest::Approx(0.598139).epsilon(1e-6));
    CHECK(upo_term(-2.0, 0.0, 0.1) == doctest::Approx(0.798139).epsilon(1e-6));
}

TEST_CASE("dpo_loss equals mean of -log sigma(beta h) over reported margins") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 23, 0.5);
    PolicyModel ref = PolicyModel::init(tiny_desc(), 29, 0.5);
    const TripleBatch b = tiny_batch(6, 5);
    const auto rep = dpo_loss(pol, ref, b, 0.1);
    double want = 0.0;
    for (double h : rep.margins) want += upo_term(h, 0.0, 0.1) / rep.margins.size();
    CHECK(rep.loss == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("upo_loss: all alpha=0 equals dpo_loss exactly") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 33, 0.5);
    PolicyModel ref = PolicyModel::init(tiny_desc(), 39, 0.5);
    TripleBatch b = tiny_batch(5, 6);
    b.alphas.assign(5, 0.0);
    CHECK(upo_loss(pol, ref, b, 0.1).loss == dpo_loss(pol, ref, b, 0.1).loss);
}

TEST_CASE("upo_loss: all alpha=1 equals dpo_loss on the swapped batch") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 43, 0.5);
    PolicyModel ref = PolicyModel::init(tiny_desc(), 49, 0.5);
    TripleBatch b = tiny_batch(5, 7);
    b.alphas.assign(5, 1.0);
    TripleBatch sw = swapped(b);
    sw.alphas.clear();
    CHECK(upo_loss(pol, ref, b, 0.1).loss ==
          doctest::Approx(dpo_loss(pol, ref, sw, 0.1).loss).epsilon(1e-12));
}

TEST_CASE("upo_loss(batch, alpha) equals upo_loss(swapped batch, 1-alpha)") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 53, 0.5);
    PolicyModel ref = PolicyModel::init(tiny_desc(), 59, 0.5);
    TripleBatch b = tiny_batch(6, 8);
    b.alphas = {0.0, 0.2, 0.5, 0.7, 1.0, 0.31};
    CHECK(upo_loss(pol, ref, b, 0.1).loss ==
          doctest::Approx(upo_loss(pol, ref, swapped(b), 0.1).loss).epsilon(1e-12));
}

TEST_CASE("upo_loss rejects alpha out of range") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 63, 0.5);
    TripleBatch b = tiny_batch(2, 9);
    b.alphas = {0.5, 1.5};
    CHECK_THROWS_AS(upo_loss(pol, pol, b, 0.1), Error);
}

TEST_CASE("upo term shape: decreasing iff alpha<0.5, increasing iff alpha>0.5, argmin 0 at 0.5") {
    const double beta = 0.1;
    for (double h = -5.0; h < 5.0; h += 0.25) {
        CHECK(upo_term(h, 0.2, beta) > upo_term(h + 0.25, 0.2, beta));
        CHECK(upo_term(h, 0.8, beta) < upo_term(h + 0.25, 0.8, beta));
    }
    // numeric scan: alpha = 0.5 is minimized at h = 0 only
    double best_h = -10.0, best = 1e300;
    for (double h = -10.0; h <= 10.0; h += 0.01) {
        const double v = upo_term(h, 0.5, beta);
        if (v < best) {
            best = v;
            best_h = h;
        }
    }
    CHECK(std::abs(best_h) < 1e-9);
}

TEST_CASE("nll_regularizer: lambda=0 vanishes; scalar substitution 2/4 = 0.5; zero reward clamps") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 73, 0.5);
    TripleBatch b = tiny_batch(3, 10);
    CHECK(nll_regularizer(pol, b, 0.0).loss == 0.0);

    b.rewards = {4.0, -4.0, 0.0};
    const auto rep = nll_regularizer(pol, b, 1.0);
    for (int j = 0; j < 3; ++j) {
        const double lp = policy_logprob(pol, b.triples[j].prompt, b.triples[j].chosen);
        const double denom = std::max(std::abs(b.rewards[j]), kRewardDenomFloor);
        CHECK(rep.components[j].nll_term == doctest::Approx(-lp / denom).epsilon(1e-12));
        CHECK(std::isfinite(rep.components[j].nll_term));
    }
    // log pi = -2, |r| = 4, lambda = 1 -> 0.5 (direct substitution)
    CHECK(-(-2.0) / 4.0 == 0.5);
}

TEST_CASE("nll_regularizer: paper-literal sign flips the term") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 83, 0.5);
    TripleBatch b = tiny_batch(2, 11);
    b.rewards = {2.0, 3.0};
    CHECK(nll_regularizer(pol, b, 1.0, NllSign::PaperLiteral).loss ==
          doctest::Approx(-nll_regularizer(pol, b, 1.0, NllSign::Corrected).loss).epsilon(1e-12));
}

TEST_CASE("upo_nll_loss is upo_loss plus nll_regularizer") {
    PolicyModel pol = PolicyModel::init(tiny_desc(), 93, 0.5);
    PolicyModel ref = PolicyModel::init(tiny_desc(), 99, 0.5);
    TripleBatch b = tiny_batch(4, 12);
    b.alphas = {0.1, 0.4, 0.0, 0.25};
    b.rewards = {1.0, -2.0, 0.5, 3.0};
    const double combined = upo_nll_loss(pol, ref, b, 0.1, 1.0).loss;
    const double split = upo_loss(pol, ref, b, 0.1).loss + nll_regularizer(pol, b, 1.0).loss;
    CHECK(combined == doctest::Approx(split).epsilon(1e-12));
}

TEST_CASE("estimator_loss: symmetric output gives ln 2; identity with estimator_prob") {
    BackboneDescriptor d = tiny_desc();
    d.context = 20;
    EstimatorModel zero{d, ParamVector::zeros(backbone_layout(d, 2))};
    std::vector<EstimatorExample> ex;
    const Sequence t = render_template({{4}, Role::Prompt}, {{5}, Role::Response},
                                       {{6}, Role::Response}, d.context);
    ex.push_back({t, 1});
    CHECK(estimator_loss(zero, ex).loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    EstimatorModel m = EstimatorModel::init(d, 31, 0.7);
    std::vector<EstimatorExample> ex2{{t, 1}, {render_template({{5}, Role::Prompt},
                                                               {{6}, Role::Response},
                                                               {{4}, Role::Response}, d.context),
                                       0}};
    const auto rep = estimator_loss(m, ex2);
    const double p1 = estimator_prob(m, ex2[0].input);
    const double p0 = 1.0 - estimator_prob(m, ex2[1].input);
    CHECK(rep.loss == doctest::Approx(0.5 * (-std::log(p1) - std::log(p0))).epsilon(1e-12));

    // frozen batch of direct probabilities: mean(-log 0.9, -log 0.8) = 0.164252
    CHECK(0.5 * (-std::log(0.9) - std::log(0.8)) == doctest::Approx(0.164252).epsilon(1e-6));
}

TEST_CASE("gradients of every objective match central finite differences") {
    const BackboneDescriptor d = tiny_desc();
    TripleBatch b = tiny_batch(3, 13);
    b.alphas = {0.3, 0.0, 0.8};
    b.rewards = {1.5, -0.5, 2.0};

    SUBCASE("reward_loss") {
        RewardModel m = RewardModel::init(d, 111, 0.4);
        std::vector<double> grad;
        reward_loss(m, b, &grad);
        RewardModel probe = m;
        const double err = grad_check(
            [&](const ParamVector& q) {
                probe.params = q;
                return reward_loss(probe, b).loss;
            },
            grad, m.params, 1e-5);
        CHECK(err < 1e-4);
    }
    SUBCASE("dpo_loss / upo_loss / nll") {
        PolicyModel pol = PolicyModel::init(d, 121, 0.4);
        PolicyModel ref = PolicyModel::init(d, 131, 0.4);
        PolicyModel probe = pol;
        std::vector<double> grad;

        dpo_loss(pol, ref, b, 0.1, nullptr, &grad);
        CHECK(grad_check(
                  [&](const ParamVector& q) {
                      probe.params = q;
                      return dpo_loss(probe, ref, b, 0.1).loss;
                  },
                  grad, pol.params, 1e-5) < 1e-4);

        upo_nll_loss(pol, ref, b, 0.1, 1.0, NllSign::Corrected, nullptr, &grad);
        CHECK(grad_check(
                  [&](const ParamVector& q) {
                      probe.params = q;
                      return upo_nll_loss(probe, ref, b, 0.1, 1.0).loss;
                  },
                  grad, pol.params, 1e-5) < 1e-4);

        nll_regularizer(pol, b, 1.0, NllSign::Corrected, &grad);
        CHECK(grad_check(
                  [&](const ParamVector& q) {
                      probe.params = q;
                      return nll_regularizer(probe, b, 1.0).loss;
                  },
                  grad, pol.params, 1e-5) < 1e-4);
    }
    SUBCASE("estimator_loss with frozen dropout masks") {
        BackboneDescriptor de = d;
        de.context = 20;
        EstimatorModel m = EstimatorModel::init(de, 141, 0.4);
        const Sequence t = render_template({{4, 5}, Role::Prompt}, {{6}, Role::Response},
                                           {{7}, Role::Response}, de.context);
        const auto masks = sample_dropout_masks(backbone_mask_layout(de), 0.1, 5, 2);
        std::vector<EstimatorExample> ex{{t, 1}, {t, 0}};
        std::vector<const MaskSet*> mp{&masks[0], &masks[1]};
        std::vector<double> grad;
        estimator_loss(m, ex, &mp, &grad);
        EstimatorModel probe = m;
        CHECK(grad_check(
                  [&](const ParamVector& q) {
                      probe.params = q;
                      return estimator_loss(probe, ex, &mp).loss;
                  },
                  grad, m.params, 1e-5) < 1e-4);
    }
}
