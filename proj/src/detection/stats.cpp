#include "wmlora/detection/stats.hpp"

#include <boost/multiprecision/cpp_int.hpp>

#include <cmath>
#include <limits>

namespace wmlora::detection {

using boost::multiprecision::cpp_int;

double bit_accuracy(const watermark::SecretMessage& s, const torch::Tensor& extracted) {
    auto flat = extracted.flatten();
    if (flat.numel() != static_cast<std::int64_t>(s.size())) {
        throw PayloadError("bit_accuracy: secret has " + std::to_string(s.size()) + " bits, extraction " +
                           std::to_string(flat.numel()));
    }
    if (s.size() == 0) throw PayloadError("bit_accuracy: empty secret");
    return (flat.to(torch::kFloat32) == s.to_tensor()).to(torch::kFloat64).mean().item<double>();
}

double bit_accuracy(const watermark::SecretMessage& a, const watermark::SecretMessage& b) {
    return bit_accuracy(a, b.to_tensor());
}

torch::Tensor matched_bits(const torch::Tensor& extracted, const watermark::SecretMessage& s) {
    if (extracted.dim() != 2 || extracted.size(1) != static_cast<std::int64_t>(s.size())) {
        throw PayloadError("matched_bits: expected (N, " + std::to_string(s.size()) + ") bits, got " +
                           c10::str(extracted.sizes()));
    }
    return (extracted.to(torch::kFloat32) == s.to_tensor().unsqueeze(0)).to(torch::kLong).sum(1);
}

double fpr(int k, int tau) {
    if (k < 1) throw ConfigError("fpr: k must be >= 1");
    if (tau < -1 || tau > k) throw ConfigError("fpr: tau " + std::to_string(tau) + " outside [-1, " +
                                                   std::to_string(k) + "]");
    cpp_int binom = 1;  // C(k, i), starting at i = 0
    cpp_int tail = 0;
    for (int i = 0; i <= k; ++i) {
        if (i > tau) tail += binom;
        binom = binom * (k - i) / (i + 1);
    }
    // Dividing by 2^k is exact in binary floating point.
    return std::ldexp(tail.convert_to<double>(), -k);
}

double regularized_incomplete_beta(double x, double a, double b) {
    if (!(a > 0.0 && b > 0.0)) throw ConfigError("incomplete beta needs a, b > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    // Continued fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise.
    if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - regularized_incomplete_beta(1.0 - x, b, a);
    const double log_front =
        std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    // Modified Lentz.
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-16;
    double c = 1.0;
    double d = 1.0 - (a + b) * x / (a + 1.0);
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double f = d;
    for (int m = 1; m <= 10000; ++m) {
        double m2 = 2.0 * m;
        double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        f *= d * c;
        num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + num * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + num / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        double delta = d * c;
        f *= delta;
        if (std::abs(delta - 1.0) < eps) break;
    }
    return std::exp(log_front) * f / a;
}

double fpr_incomplete_beta(int k, int tau) {
    if (k < 1) throw ConfigError("fpr: k must be >= 1");
    if (tau < -1 || tau > k) throw ConfigError("fpr: tau out of range");
    if (tau == k) return 0.0;
    if (tau == -1) return 1.0;
    return regularized_incomplete_beta(0.5, tau + 1.0, static_cast<double>(k - tau));
}

int threshold_for_fpr(int k, double target_fpr) {
    if (!(target_fpr > 0.0 && target_fpr < 1.0)) throw ConfigError("threshold_for_fpr: target must lie in (0,1)");
    for (int tau = 0; tau <= k; ++tau) {
        if (fpr(k, tau) <= target_fpr) return tau;
    }
    return k;
}

double evaluate_tpr(const torch::Tensor& extracted, const watermark::SecretMessage& s, int tau) {
    if (extracted.dim() != 2 || extracted.size(0) == 0) throw ConfigError("evaluate_tpr: no extraction results");
    return (matched_bits(extracted, s) > tau).to(torch::kFloat64).mean().item<double>();
}

nlohmann::json DetectionReport::to_json() const {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [name, score] : per_distortion) per[name] = {{"bit_acc", score.bit_acc}, {"tpr", score.tpr}};
    return {{"k", k},
            {"tau", tau},
            {"target_fpr", target_fpr},
            {"achieved_fpr", achieved_fpr},
            {"bit_acc_mean", bit_acc_mean},
            {"tpr", tpr},
            {"per_distortion", per},
            {"n_samples", n_samples}};
}

DetectionReport make_report(const torch::Tensor& extracted, const watermark::SecretMessage& s, double target_fpr) {
    DetectionReport r;
    r.k = static_cast<int>(s.size());
    r.target_fpr = target_fpr;
    r.tau = threshold_for_fpr(r.k, target_fpr);
    r.achieved_fpr = fpr(r.k, r.tau);
    r.n_samples = extracted.size(0);
    r.bit_acc_mean = matched_bits(extracted, s).to(torch::kFloat64).mean().item<double>() / r.k;
    r.tpr = evaluate_tpr(extracted, s, r.tau);
    return r;
}

NamedTensors collusion_merge(const NamedTensors& m1, const NamedTensors& m2, double ratio) {
    if (m1.size() != m2.size()) throw MergeError("collusion_merge: models have different layer counts");
    NamedTensors out;
    for (const auto& [name, w1] : m1) {
        auto it = m2.find(name);
        if (it == m2.end()) throw MergeError("collusion_merge: layer '" + name + "' missing from second model");
        if (it->second.sizes() != w1.sizes()) throw MergeError("collusion_merge: layer '" + name + "' shape differs");
        if (ratio == 1.0) {
            out[name] = w1.clone();
        } else if (ratio == 0.0) {
            out[name] = it->second.clone();
        } else if (w1.is_floating_point()) {
            out[name] = ratio * w1 + (1.0 - ratio) * it->second;
        } else {
            out[name] = w1.clone();
        }
    }
    return out;
}

nlohmann::json CollusionReport::to_json() const {
    auto cell = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
    return {{"expectations", {{cell(expectations[0][0]), cell(expectations[0][1])},
                              {cell(expectations[1][0]), cell(expectations[1][1])}}},
            {"positions", {{positions[0][0], positions[0][1]}, {positions[1][0], positions[1][1]}}},
            {"merge_ratio", merge_ratio},
            {"n_samples", n_samples}};
}

CollusionReport collusion_table(const torch::Tensor& extracted, const watermark::SecretMessage& s1,
                                const watermark::SecretMessage& s2, double merge_ratio) {
    if (s1.size() != s2.size()) throw PayloadError("collusion: secrets differ in length");
    if (extracted.dim() != 2 || extracted.size(1) != static_cast<std::int64_t>(s1.size())) {
        throw PayloadError("collusion: extraction shape " + c10::str(extracted.sizes()));
    }
    CollusionReport r;
    r.merge_ratio = merge_ratio;
    r.n_samples = extracted.size(0);
    auto col_mean = extracted.to(torch::kFloat64).mean(0);
    std::array<std::array<double, 2>, 2> sums{};
    for (std::size_t i = 0; i < s1.size(); ++i) {
        sums[s1[i]][s2[i]] += col_mean[static_cast<std::int64_t>(i)].item<double>();
        r.positions[s1[i]][s2[i]] += 1;
    }
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            r.expectations[a][b] = r.positions[a][b] > 0 ? sums[a][b] / r.positions[a][b]
                                                         : std::numeric_limits<double>::quiet_NaN();
        }
    }
    return r;
}

CollusionReport collusion_stats(const std::function<torch::Tensor(std::int64_t)>& extract,
                                const watermark::SecretMessage& s1, const watermark::SecretMessage& s2,
                                std::int64_t n_samples, double merge_ratio) {
    if (n_samples <= 0) throw ConfigError("collusion_stats: n_samples must be positive");
    if (s1 == s2) throw ConfigError("collusion_stats: the two secrets are identical (degenerate experiment)");
    return collusion_table(extract(n_samples), s1, s2, merge_ratio);
}

}  // namespace wmlora::detection
