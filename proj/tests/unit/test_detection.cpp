#include "wmlora/detection/stats.hpp"

#include "testing.hpp"

#include <bit>
#include <cmath>

using namespace wmlora;
using detection::fpr;
using watermark::SecretMessage;

namespace {

// P(popcount > tau) over all 2^k equiprobable vectors.
double enumerated_fpr(int k, int tau) {
    std::uint64_t hits = 0;
    for (std::uint64_t v = 0; v < (1ULL << k); ++v) {
        if (std::popcount(v) > tau) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(1ULL << k);
}

SecretMessage bits_of(std::initializer_list<int> b) {
    std::vector<std::uint8_t> v;
    for (int x : b) v.push_back(static_cast<std::uint8_t>(x));
    return SecretMessage(v);
}

}  // namespace

TEST_SUITE("detection") {

TEST_CASE("fpr matches exhaustive enumeration for k <= 20") {
    for (int k = 1; k <= 20; ++k) {
        for (int tau = 0; tau <= k; ++tau) {
            CHECK(std::abs(fpr(k, tau) - enumerated_fpr(k, tau)) <= 1e-12);
        }
    }
}

TEST_CASE("fpr closed-form cases") {
    CHECK(fpr(16, 15) == doctest::Approx(1.0 / 65536.0).epsilon(1e-15));
    CHECK(fpr(16, 16) == 0.0);
    CHECK(fpr(16, -1) == 1.0);
    CHECK_THROWS_AS(fpr(16, 17), ConfigError);
    CHECK_THROWS_AS(fpr(0, 0), ConfigError);
}

TEST_CASE("binomial tail and incomplete beta agree for k <= 64") {
    double worst = 0.0;
    for (int k = 1; k <= 64; ++k) {
        for (int tau = -1; tau <= k; ++tau) {
            worst = std::max(worst, std::abs(fpr(k, tau) - detection::fpr_incomplete_beta(k, tau)));
        }
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE("fpr is non-increasing in tau") {
    for (int k : {8, 16, 48, 64}) {
        for (int tau = 0; tau <= k; ++tau) CHECK(fpr(k, tau) <= fpr(k, tau - 1));
    }
}

TEST_CASE("threshold_for_fpr brackets the target") {
    // Scan of the k=16 tail: fpr(16,14) = 2.59e-4 > 1e-4 >= fpr(16,15) = 1.53e-5.
    CHECK(detection::threshold_for_fpr(16, 1e-4) == 15);
    CHECK(detection::threshold_for_fpr(48, 1e-6) == 40);
    for (int k : {8, 16, 32, 48}) {
        int prev = k;
        for (double f : {1e-9, 1e-6, 1e-4, 1e-2, 0.1, 0.5}) {
            int tau = detection::threshold_for_fpr(k, f);
            CHECK(tau <= prev);
            prev = tau;
            CHECK(fpr(k, tau) <= f);
            if (tau > 0) CHECK(f < fpr(k, tau - 1));
        }
    }
    // Cross-check against enumeration at k=16.
    int tau = detection::threshold_for_fpr(16, 1e-4);
    CHECK(enumerated_fpr(16, tau) <= 1e-4);
    CHECK(enumerated_fpr(16, tau - 1) > 1e-4);
}

TEST_CASE("bit accuracy") {
    auto s = SecretMessage::random(16, 3);
    CHECK(detection::bit_accuracy(s, s) == 1.0);
    CHECK(detection::bit_accuracy(s, s.complement()) == 0.0);
    CHECK(detection::bit_accuracy(bits_of({1, 0, 1, 1}), bits_of({1, 1, 0, 1})) == 0.5);
    auto t = SecretMessage::random(16, 4);
    CHECK(detection::bit_accuracy(s, t) == detection::bit_accuracy(t, s));
    CHECK(detection::bit_accuracy(s, s.to_tensor()) == 1.0);
    CHECK_THROWS_AS(detection::bit_accuracy(s, SecretMessage::random(8, 1)), PayloadError);
}

TEST_CASE("tpr uses a strict threshold") {
    auto s = SecretMessage::random(16, 9);
    auto perfect = s.to_tensor().unsqueeze(0).repeat({10, 1});
    CHECK(detection::evaluate_tpr(perfect, s, 15) == 1.0);
    // 15 of 16 correct is not above tau = 15.
    auto one_off = perfect.clone();
    one_off.index_put_({torch::indexing::Slice(), 0}, 1.0 - one_off.index({torch::indexing::Slice(), 0}));
    CHECK(detection::evaluate_tpr(one_off, s, 15) == 0.0);
    CHECK(detection::evaluate_tpr(one_off, s, 14) == 1.0);
    CHECK_THROWS(detection::evaluate_tpr(torch::empty({0, 16}), s, 15));
}

TEST_CASE("random extractions rarely pass the 1e-6 threshold") {
    auto gen = make_generator(5);
    auto s = SecretMessage::random(48, 1);
    auto random = watermark::random_bits(20000, 48, gen);
    int tau = detection::threshold_for_fpr(48, 1e-6);
    CHECK(detection::evaluate_tpr(random, s, tau) <= 1e-4);
}

TEST_CASE("detection report") {
    auto s = SecretMessage::random(16, 2);
    auto rows = s.to_tensor().unsqueeze(0).repeat({4, 1});
    auto r = detection::make_report(rows, s, 1e-4);
    CHECK(r.k == 16);
    CHECK(r.tau == 15);
    CHECK(r.tpr == 1.0);
    CHECK(r.bit_acc_mean == 1.0);
    CHECK(r.n_samples == 4);
    CHECK(r.to_json().at("achieved_fpr").get<double>() == doctest::Approx(1.0 / 65536.0));
}

TEST_CASE("collusion merge") {
    NamedTensors m1{{"w", torch::full({2, 2}, 2.0)}};
    NamedTensors m2{{"w", torch::full({2, 2}, 4.0)}};
    CHECK(torch::equal(detection::collusion_merge(m1, m2, 1.0).at("w"), m1.at("w")));
    CHECK(torch::equal(detection::collusion_merge(m1, m2, 0.0).at("w"), m2.at("w")));
    CHECK(torch::allclose(detection::collusion_merge(m1, m2, 0.5).at("w"), torch::full({2, 2}, 3.0)));
    NamedTensors m3{{"v", torch::ones({2})}};
    CHECK_THROWS_AS(detection::collusion_merge(m1, m3, 0.5), MergeError);
}

TEST_CASE("collusion table groups by bit pairs") {
    auto s1 = bits_of({0, 0, 1, 1});
    auto s2 = bits_of({0, 1, 0, 1});
    // Extraction follows model 1 on every position.
    auto ex = s1.to_tensor().unsqueeze(0).repeat({3, 1});
    auto r = detection::collusion_table(ex, s1, s2, 0.5);
    CHECK(r.expectations[0][0] == 0.0);
    CHECK(r.expectations[0][1] == 0.0);
    CHECK(r.expectations[1][0] == 1.0);
    CHECK(r.expectations[1][1] == 1.0);
    CHECK(r.positions[1][1] == 1);
    CHECK(r.n_samples == 3);
    auto j = r.to_json();
    CHECK(j.contains("expectations"));

    auto same = bits_of({1, 1, 1, 1});
    auto r2 = detection::collusion_table(ex, same, same, 0.5);
    CHECK(std::isnan(r2.expectations[0][0]));

    auto extract = [&](std::int64_t n) { return s1.to_tensor().unsqueeze(0).repeat({n, 1}); };
    CHECK_THROWS(detection::collusion_stats(extract, s1, s2, 0));
    CHECK(detection::collusion_stats(extract, s1, s2, 5).n_samples == 5);
}

}  // TEST_SUITE
