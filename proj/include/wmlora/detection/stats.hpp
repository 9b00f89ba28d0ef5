#pragma once

#include "wmlora/watermark/secret.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <functional>

namespace wmlora::detection {

/// Fraction of positions where `s` and the hard bits `extracted` (l) agree.
double bit_accuracy(const watermark::SecretMessage& s, const torch::Tensor& extracted);
double bit_accuracy(const watermark::SecretMessage& a, const watermark::SecretMessage& b);

/// Matched-bit counts (N) of hard bit rows (N, l) against `s`.
torch::Tensor matched_bits(const torch::Tensor& extracted, const watermark::SecretMessage& s);

/// P(matches > tau) for k fair coin flips: sum_{i=tau+1}^k C(k,i) / 2^k,
/// computed exactly with big integers. tau in [-1, k].
double fpr(int k, int tau);

/// Same tail through the regularized incomplete beta I_{1/2}(tau+1, k-tau),
/// evaluated by a continued fraction in double precision.
double fpr_incomplete_beta(int k, int tau);

/// Regularized incomplete beta I_x(a, b) for a, b > 0.
double regularized_incomplete_beta(double x, double a, double b);

/// Smallest tau in [0, k] with fpr(k, tau) <= target. target in (0,1).
int threshold_for_fpr(int k, double target_fpr);

/// Fraction of rows whose matched-bit count is strictly greater than tau.
double evaluate_tpr(const torch::Tensor& extracted, const watermark::SecretMessage& s, int tau);

struct DistortionScore {
    double bit_acc = 0.0;
    double tpr = 0.0;
};

struct DetectionReport {
    int k = 0;
    int tau = 0;
    double target_fpr = 0.0;
    double achieved_fpr = 0.0;
    double bit_acc_mean = 0.0;
    double tpr = 0.0;
    std::map<std::string, DistortionScore> per_distortion;
    std::int64_t n_samples = 0;

    nlohmann::json to_json() const;
};

/// Report for hard bit rows (N, l) extracted under a single secret.
DetectionReport make_report(const torch::Tensor& extracted, const watermark::SecretMessage& s, double target_fpr);

/// Layerwise ratio * W1 + (1 - ratio) * W2.
NamedTensors collusion_merge(const NamedTensors& m1, const NamedTensors& m2, double ratio);

struct CollusionReport {
    /// expectations[b1][b2]: mean extracted bit over positions where model 1
    /// carries b1 and model 2 carries b2. NaN when no position falls in the cell.
    std::array<std::array<double, 2>, 2> expectations{};
    std::array<std::array<std::int64_t, 2>, 2> positions{};
    double merge_ratio = 0.5;
    std::int64_t n_samples = 0;

    nlohmann::json to_json() const;
};

/// Groups extracted bits (N, l) by the pair of secret bits at each position.
CollusionReport collusion_table(const torch::Tensor& extracted, const watermark::SecretMessage& s1,
                                const watermark::SecretMessage& s2, double merge_ratio);

/// Draws `n_samples` extractions from the merged model via `extract` and tabulates them.
/// `extract(n)` returns hard bits (n, l).
CollusionReport collusion_stats(const std::function<torch::Tensor(std::int64_t)>& extract,
                                const watermark::SecretMessage& s1, const watermark::SecretMessage& s2,
                                std::int64_t n_samples, double merge_ratio = 0.5);

}  // namespace wmlora::detection
