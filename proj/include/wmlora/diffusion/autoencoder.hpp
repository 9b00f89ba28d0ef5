#pragma once

#include "wmlora/common.hpp"

#include <nlohmann/json.hpp>

namespace wmlora::diffusion {

struct AutoencoderConfig {
    std::int64_t image_channels = 3;
    std::int64_t latent_channels = 4;
    std::int64_t channels = 16;

    nlohmann::json to_json() const;
    static AutoencoderConfig from_json(const nlohmann::json& j);
};

/// Deterministic convolutional autoencoder, 4x spatial downsampling.
///
/// `encode` maps [0,1] images to latents multiplied by the `latent_scale`
/// buffer (set after training so latents have unit standard deviation);
/// `decode` undoes the scale and returns [0,1] images.
class AutoencoderImpl : public torch::nn::Module {
public:
    explicit AutoencoderImpl(AutoencoderConfig cfg = {});

    torch::Tensor encode(const torch::Tensor& images);
    torch::Tensor decode(const torch::Tensor& latents);

    const AutoencoderConfig& config() const { return cfg_; }
    double latent_scale() const { return latent_scale_.item<double>(); }
    void set_latent_scale(double s);

private:
    AutoencoderConfig cfg_;
    torch::nn::Sequential encoder{nullptr};
    torch::nn::Sequential decoder{nullptr};
    torch::Tensor latent_scale_;
};
TORCH_MODULE(Autoencoder);

}  // namespace wmlora::diffusion
