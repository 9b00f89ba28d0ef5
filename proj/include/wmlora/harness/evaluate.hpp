#pragma once

#include "wmlora/detection/stats.hpp"
#include "wmlora/diffusion/autoencoder.hpp"
#include "wmlora/diffusion/sampler.hpp"
#include "wmlora/distortion/distortion.hpp"
#include "wmlora/lora/watermark_lora.hpp"
#include "wmlora/watermark/codec.hpp"
#include "wmlora/watermark/losses.hpp"

#include <functional>

namespace wmlora::harness {

/// Uniform class labels in [0, classes).
torch::Tensor random_labels(std::int64_t n, std::int64_t classes, std::uint64_t seed);

/// Samples latents for `labels` and decodes them to images. Batches use
/// seeds opts.seed, opts.seed + 1, ... so results do not depend on memory limits.
torch::Tensor generate_images(diffusion::UNet& model, diffusion::Autoencoder& ae,
                              const diffusion::DiffusionSchedule& sched, const torch::Tensor& labels,
                              const diffusion::SampleOptions& opts, std::int64_t latent_size,
                              std::int64_t batch = 128);

struct EvalSettings {
    int secrets = 8;
    int per_secret = 64;
    diffusion::SampleOptions opts;
    double alpha = 1.05;
    double target_fpr = 1e-4;
    std::uint64_t seed = 77;
    std::int64_t latent_size = 8;

    nlohmann::json to_json() const;
    static EvalSettings from_json(const nlohmann::json& j);
};

/// Evaluation secrets, deterministic in (count, length, seed).
std::vector<watermark::SecretMessage> eval_secrets(int count, std::size_t length, std::uint64_t seed);

/// Weights to sample from for a given secret (e.g. a merged checkpoint).
using WeightsForSecret = std::function<NamedTensors(const watermark::SecretMessage&)>;

struct WatermarkedSamples {
    torch::Tensor images;        // (N,3,H,W) from the weights of each row's secret
    torch::Tensor clean_images;  // same labels and seeds from the base model (if requested)
    torch::Tensor truth;         // (N,l) secret of each row
    torch::Tensor labels;
};

/// For each evaluation secret, loads `weights_for(s)` into a working copy of
/// `base` and samples `per_secret` images. Clean images reuse the exact labels
/// and sampler seeds.
WatermarkedSamples generate_watermarked(diffusion::UNet& base, diffusion::Autoencoder& ae,
                                        const diffusion::DiffusionSchedule& sched, const WeightsForSecret& weights_for,
                                        const EvalSettings& settings, std::size_t payload_bits, bool with_clean);

/// Merge-based weights for `lora` at strength `alpha` on top of `base`.
WeightsForSecret merged_weights(const diffusion::UNet& base, const lora::WatermarkLoRA& lora, double alpha);

struct Score {
    double bit_acc = 0.0;
    double tpr = 0.0;
    int tau = 0;
    std::int64_t n = 0;

    nlohmann::json to_json() const { return {{"bit_acc", bit_acc}, {"tpr", tpr}, {"tau", tau}, {"n", n}}; }
};

/// Hard bits (N,l) extracted by the decoder.
torch::Tensor extract_bits(watermark::SecretDecoder& decoder, const torch::Tensor& images);

/// Bit accuracy and TPR (matched bits strictly above the tau for `target_fpr`)
/// of extractions against row-wise truth.
Score score_rows(const torch::Tensor& extracted, const torch::Tensor& truth, double target_fpr);

Score score_images(watermark::SecretDecoder& decoder, const torch::Tensor& images, const torch::Tensor& truth,
                   double target_fpr);

/// Mean per-pixel MSE plus mean perceptual-proxy distance between paired images.
double drift(const torch::Tensor& a, const torch::Tensor& b, const watermark::PerceptualProxy& proxy);

}  // namespace wmlora::harness
