#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "upo/uncertainty.hpp"

using namespace upo;

namespace {

BackboneDescriptor est_desc() {
    BackboneDescriptor d;
    d.vocab = 12;
    d.context = 24;
    d.embed_dim = 4;
    d.hidden_dim = 8;
    return d;
}

Sequence some_template(const BackboneDescriptor& d) {
    return render_template({{4, 5}, Role::Prompt}, {{6, 7}, Role::Response},
                           {{8}, Role::Response}, d.context);
}

}  // namespace

TEST_CASE("mc_predict: near-zero rate collapses to the deterministic output") {
    const BackboneDescriptor d = est_desc();
    EstimatorModel m = EstimatorModel::init(d, 2, 0.5);
    const Sequence t = some_template(d);
    const McPrediction mc = mc_predict(m, t, 5, 1e-12, 7);
    const double det = estimator_prob(m, t);
    for (double p : mc.probs) CHECK(p == doctest::Approx(det).epsilon(1e-6));
}

TEST_CASE("mc_predict: deterministic given seed, defaults land in [0,1]") {
    const BackboneDescriptor d = est_desc();
    EstimatorModel m = EstimatorModel::init(d, 12, 0.5);
    const Sequence t = some_template(d);
    const McPrediction a = mc_predict(m, t, 10, 0.1, 42);
    const McPrediction b = mc_predict(m, t, 10, 0.1, 42);
    CHECK(a.probs == b.probs);
    CHECK(a.passes() == 10);
    for (double p : a.probs) {
        CHECK(p >= 0.0);
        CHECK(p <= 1.0);
    }
}

TEST_CASE("mc_predict rejects T < 2") {
    const BackboneDescriptor d = est_desc();
    EstimatorModel m = EstimatorModel::init(d, 2, 0.5);
    CHECK_THROWS_AS(mc_predict(m, some_template(d), 1, 0.1, 0), Error);
}

TEST_CASE("information_gain: constant predictions have zero gain") {
    for (double p : {0.0, 0.123, 0.5, 0.9, 1.0}) {
        McPrediction mc{"x", {p, p, p, p}};
        CHECK(information_gain(mc) == doctest::Approx(0.0).epsilon(1e-12));
    }
}

TEST_CASE("information_gain: probs [1,0] give exactly 1 bit") {
    CHECK(information_gain({"x", {1.0, 0.0}}) == 1.0);
}

TEST_CASE("information_gain: all probs 0.5 give zero") {
    CHECK(information_gain({"x", {0.5, 0.5, 0.5}}) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("information_gain: Jensen bounds over random predictions") {
    Rng rng(99);
    for (int i = 0; i < 10000; ++i) {
        McPrediction mc;
        const int t = 2 + static_cast<int>(rng.uniform_int(9));
        for (int k = 0; k < t; ++k) mc.probs.push_back(rng.uniform());
        double mean = 0.0;
        for (double p : mc.probs) mean += p / t;
        const double gain = information_gain(mc);
        CHECK(gain >= 0.0);
        CHECK(gain <= binary_entropy(mean) + 1e-12);
        CHECK(gain <= 1.0);
    }
}

TEST_CASE("information_gain: zero iff all passes agree") {
    McPrediction same{"a", {0.3, 0.3, 0.3}};
    CHECK(information_gain(same) < 1e-9);
    McPrediction diff{"b", {0.3, 0.7, 0.3}};
    CHECK(information_gain(diff) > 1e-9);
}

TEST_CASE("sampling_weights: base cases from the gain examples") {
    CHECK(sampling_weights({0.4}, 1.0) == std::vector<double>{1.0});
    const auto w1 = sampling_weights({0.0, 1.0}, 1.0);
    CHECK(w1[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(w1[1] == doctest::Approx(0.0).epsilon(1e-15));
    const auto w2 = sampling_weights({0.0, 0.5}, 1.0);
    CHECK(w2[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(w2[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("sampling_weights: normalized, order preserving, sharpened by mu") {
    Rng rng(3);
    std::vector<double> gains;
    for (int i = 0; i < 50; ++i) gains.push_back(rng.uniform() * 0.95);
    double prev_ratio = 0.0;
    for (double mu : {0.5, 1.0, 2.0, 4.0}) {
        const auto w = sampling_weights(gains, mu);
        double sum = 0.0;
        for (double v : w) sum += v;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        for (std::size_t j = 0; j < gains.size(); ++j)
            for (std::size_t k = 0; k < gains.size(); ++k)
                if (gains[j] < gains[k]) CHECK(w[j] > w[k]);
        const double ratio = *std::max_element(w.begin(), w.end()) /
                             *std::min_element(w.begin(), w.end());
        CHECK(ratio >= prev_ratio - 1e-9);
        prev_ratio = ratio;
    }
}

TEST_CASE("sampling_weights: degenerate all-uncertain batch is an error") {
    CHECK_THROWS_WITH_AS(sampling_weights({1.0, 1.0}, 1.0), doctest::Contains("degenerate"),
                         Error);
    CHECK_THROWS_AS(sampling_weights({0.5}, 0.0), Error);
}

TEST_CASE("alpha_weight: paper-literal substitutions and smoothing bounds") {
    UncertaintyRecord r;
    r.sampling_weight = 1.0;
    CHECK(alpha_weight(r, AlphaMode::PaperLiteral) == doctest::Approx(0.5).epsilon(1e-15));
    r.sampling_weight = 0.0;
    CHECK(alpha_weight(r, AlphaMode::PaperLiteral) == doctest::Approx(1.0).epsilon(1e-15));

    r.certainty = 1.0;  // B=0, mu=1
    CHECK(alpha_weight(r, AlphaMode::Smoothing) == 0.0);

    double prev = 1.0;
    for (double s = 0.0; s <= 1.0; s += 0.05) {
        r.certainty = s;
        const double a = alpha_weight(r, AlphaMode::Smoothing);
        CHECK(a >= 0.0);
        CHECK(a <= 0.5);
        CHECK(a <= prev + 1e-15);  // monotone non-increasing in certainty
        prev = a;
    }
}
