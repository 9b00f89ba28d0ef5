#include "wmlora/diffusion/autoencoder.hpp"

namespace wmlora::diffusion {

namespace nn = torch::nn;

nlohmann::json AutoencoderConfig::to_json() const {
    return {{"image_channels", image_channels}, {"latent_channels", latent_channels}, {"channels", channels}};
}

AutoencoderConfig AutoencoderConfig::from_json(const nlohmann::json& j) {
    AutoencoderConfig c;
    c.image_channels = j.value("image_channels", c.image_channels);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.channels = j.value("channels", c.channels);
    return c;
}

AutoencoderImpl::AutoencoderImpl(AutoencoderConfig cfg) : cfg_(cfg) {
    const auto C = cfg.channels;
    encoder = register_module(
        "encoder",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(cfg.image_channels, C, 3).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(C, 2 * C, 4).stride(2).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(2 * C, 2 * C, 4).stride(2).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(2 * C, 2 * C, 3).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(2 * C, cfg.latent_channels, 3).padding(1))));
    decoder = register_module(
        "decoder",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(cfg.latent_channels, 2 * C, 3).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(2 * C, 2 * C, 3).padding(1)), nn::SiLU(),
                       nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * C, 2 * C, 4).stride(2).padding(1)),
                       nn::SiLU(),
                       nn::ConvTranspose2d(nn::ConvTranspose2dOptions(2 * C, C, 4).stride(2).padding(1)),
                       nn::SiLU(), nn::Conv2d(nn::Conv2dOptions(C, C, 3).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(C, cfg.image_channels, 3).padding(1))));
    latent_scale_ = register_buffer("latent_scale", torch::ones({1}));
}

torch::Tensor AutoencoderImpl::encode(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != cfg_.image_channels) {
        throw ShapeError("encode expects (N,3,H,W) images, got " + c10::str(images.sizes()));
    }
    if ((images.size(2) % 4) != 0 || (images.size(3) % 4) != 0) {
        throw ShapeError("image dims must be divisible by 4");
    }
    return encoder->forward(images * 2.0 - 1.0) * latent_scale_;
}

torch::Tensor AutoencoderImpl::decode(const torch::Tensor& latents) {
    if (latents.dim() != 4 || latents.size(1) != cfg_.latent_channels) {
        throw ShapeError("decode expects (N,4,h,w) latents, got " + c10::str(latents.sizes()));
    }
    return torch::sigmoid(decoder->forward(latents / latent_scale_));
}

void AutoencoderImpl::set_latent_scale(double s) {
    if (!(s > 0.0)) throw ConfigError("latent scale must be positive");
    torch::NoGradGuard g;
    latent_scale_.fill_(s);
}

}  // namespace wmlora::diffusion
