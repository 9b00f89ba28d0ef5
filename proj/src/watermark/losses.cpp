#include "wmlora/watermark/losses.hpp"

#include <cmath>

namespace wmlora::watermark {

namespace F = torch::nn::functional;

torch::Tensor prvl_loss(const torch::Tensor& reference, const torch::Tensor& watermarked, std::int64_t window) {
    if (reference.dim() == 3) return prvl_loss(reference.unsqueeze(0), watermarked.unsqueeze(0), window);
    require_same_shape(reference, watermarked, "prvl_loss");
    if (window < 1) throw ConfigError("PRVL window must be >= 1");
    if (window > reference.size(2) || window > reference.size(3)) {
        throw ConfigError("PRVL window " + std::to_string(window) + " larger than image");
    }
    auto variation = (reference - watermarked).abs().mean(1, /*keepdim=*/true);
    auto regional = F::avg_pool2d(variation, F::AvgPool2dFuncOptions(window).stride(1));
    return regional.flatten(1).amax(1).mean();
}

PerceptualProxy::PerceptualProxy(std::uint64_t seed) {
    auto gen = make_generator(seed);
    const std::vector<std::pair<std::int64_t, std::int64_t>> dims{{3, 16}, {16, 32}, {32, 64}};
    strides_ = {1, 2, 2};
    for (const auto& [in, out] : dims) {
        double std_dev = std::sqrt(2.0 / static_cast<double>(in * 9));
        weights_.push_back(torch::randn({out, in, 3, 3}, gen) * std_dev);
        biases_.push_back(torch::randn({out}, gen) * 0.1);
    }
}

std::vector<torch::Tensor> PerceptualProxy::features(const torch::Tensor& x) const {
    std::vector<torch::Tensor> out;
    auto h = x * 2.0 - 1.0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
        h = F::relu(F::conv2d(h, weights_[i], F::Conv2dFuncOptions().bias(biases_[i]).stride(strides_[i]).padding(1)));
        out.push_back(h);
    }
    return out;
}

torch::Tensor PerceptualProxy::distance(const torch::Tensor& a, const torch::Tensor& b) const {
    if (a.dim() == 3) return distance(a.unsqueeze(0), b.unsqueeze(0));
    require_same_shape(a, b, "perceptual distance");
    auto fa = features(a);
    auto fb = features(b);
    auto total = torch::zeros({a.size(0)});
    for (std::size_t i = 0; i < fa.size(); ++i) {
        auto na = fa[i] / ((fa[i].pow(2).sum(1, true) + 1e-10).sqrt() + 1e-3);
        auto nb = fb[i] / ((fb[i].pow(2).sum(1, true) + 1e-10).sqrt() + 1e-3);
        total = total + (na - nb).pow(2).sum(1).flatten(1).mean(1);
    }
    return total / static_cast<double>(fa.size());
}

torch::Tensor perceptual_loss(const PerceptualProxy& proxy, const torch::Tensor& watermarked,
                              const torch::Tensor& reconstructed) {
    return proxy.loss(watermarked, reconstructed);
}

}  // namespace wmlora::watermark
