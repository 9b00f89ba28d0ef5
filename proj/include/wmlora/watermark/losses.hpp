#pragma once

#include "wmlora/common.hpp"

namespace wmlora::watermark {

/// Peak regional variation between a reference and a watermarked image.
///
/// V(x,y) is the channel-mean absolute difference; the loss is the maximum of
/// V averaged over every fully-contained `window`x`window` region. Batched
/// inputs (N,3,H,W) return the batch mean of the per-image maxima.
torch::Tensor prvl_loss(const torch::Tensor& reference, const torch::Tensor& watermarked, std::int64_t window);

/// Frozen convolutional feature extractor with seeded random weights.
///
/// Distances compare channel-normalized activations of three layers
/// (squared difference, summed over channels, averaged over positions and
/// layers). Symmetric, deterministic, zero for identical inputs.
class PerceptualProxy {
public:
    explicit PerceptualProxy(std::uint64_t seed = 0x5EED5EEDULL);

    /// Per-image distances (N).
    torch::Tensor distance(const torch::Tensor& a, const torch::Tensor& b) const;

    /// Batch mean of `distance`.
    torch::Tensor loss(const torch::Tensor& a, const torch::Tensor& b) const { return distance(a, b).mean(); }

private:
    std::vector<torch::Tensor> features(const torch::Tensor& x) const;
    std::vector<torch::Tensor> weights_;
    std::vector<torch::Tensor> biases_;
    std::vector<std::int64_t> strides_;
};

/// Perceptual distance between the watermarked image and the autoencoder
/// reconstruction of the cover (not the cover itself).
torch::Tensor perceptual_loss(const PerceptualProxy& proxy, const torch::Tensor& watermarked,
                              const torch::Tensor& reconstructed);

}  // namespace wmlora::watermark
