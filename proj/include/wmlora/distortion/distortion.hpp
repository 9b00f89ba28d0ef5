#pragma once

#include "wmlora/diffusion/autoencoder.hpp"
#include "wmlora/diffusion/sampler.hpp"

#include <nlohmann/json.hpp>

#include <string_view>

namespace wmlora::distortion {

enum class DistortionKind {
    identity,
    jpeg_approx,  // differentiable DCT-mask simulation
    jpeg,         // real codec round trip
    crop_resize,
    gaussian_blur,
    gaussian_noise,
    color_jitter,
    denoise_regen,
};

DistortionKind parse_kind(std::string_view name);
std::string to_string(DistortionKind kind);

/// Parameters for every kind; only the fields of the selected kind are read.
/// Ranges are sampled uniformly per image.
struct DistortionParams {
    int jpeg_quality = 50;
    double crop_min = 0.8, crop_max = 0.8;          // kept side fraction
    int blur_kernel_min = 3, blur_kernel_max = 3;   // odd sizes
    double blur_sigma_min = 4.0, blur_sigma_max = 4.0;
    double noise_var = 0.1;                         // on the [0,1] pixel scale
    double brightness_min = 0.9, brightness_max = 1.1;
    double contrast_min = 0.9, contrast_max = 1.1;
    double saturation_min = 0.9, saturation_max = 1.1;
    double hue_min = -0.1, hue_max = 0.1;           // fraction of a full turn
    double regen_strength = 0.1;
};

struct DistortionSpec {
    std::string name;
    DistortionKind kind = DistortionKind::identity;
    DistortionParams params;
    bool differentiable = true;

    nlohmann::json to_json() const;
    static DistortionSpec from_json(const nlohmann::json& j);
};

/// Clean model used by the regeneration attack.
struct RegenContext {
    diffusion::Autoencoder autoencoder{nullptr};
    diffusion::UNet model{nullptr};
    const diffusion::DiffusionSchedule* schedule = nullptr;
    /// Reverse steps per unit strength (strength 0.1 with 100 -> 10 DDIM steps).
    int steps_per_unit = 100;
};

/// Train-time menu: JPEG simulation, crop-and-resize, blur, noise, colour jitter.
std::vector<DistortionSpec> train_menu();

/// Evaluation distortion by short name: jpeg, crop, blur, noise, jitter, denoise, denoise2, identity/clean.
DistortionSpec eval_distortion(std::string_view name);

/// The seven evaluation distortions in reporting order.
std::vector<std::string> eval_suite_names();

/// Applies `spec` to images (N,3,H,W) in [0,1]. Output is clamped to [0,1]
/// and deterministic given the generator state.
torch::Tensor apply(const DistortionSpec& spec, const torch::Tensor& images, torch::Generator& gen,
                    const RegenContext* regen = nullptr);

/// Differentiable JPEG simulation: YCbCr, 8x8 block DCT, zero every
/// coefficient whose quality-scaled quantization step exceeds 40, inverse.
torch::Tensor jpeg_approx_train(const torch::Tensor& images, int quality);

/// Keep-mask (8x8) used by `jpeg_approx_train` for the luma (chroma=false) or chroma table.
torch::Tensor jpeg_keep_mask(int quality, bool chroma);

/// Encode, forward-diffuse to t = round(strength * T), denoise with the clean
/// model (unconditional DDIM), decode.
torch::Tensor denoise_regen(const torch::Tensor& images, const RegenContext& ctx, double strength,
                            torch::Generator& gen);

}  // namespace wmlora::distortion
