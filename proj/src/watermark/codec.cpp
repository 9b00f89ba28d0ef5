#include "wmlora/watermark/codec.hpp"

#include "wmlora/image_io.hpp"

#include <cmath>

namespace wmlora::watermark {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

nlohmann::json CodecConfig::to_json() const {
    return {{"payload_bits", payload_bits}, {"latent_channels", latent_channels}, {"latent_size", latent_size},
            {"image_size", image_size},     {"hidden", hidden},                   {"channels", channels},
            {"zero_init_output", zero_init_output}};
}

CodecConfig CodecConfig::from_json(const nlohmann::json& j) {
    CodecConfig c;
    c.payload_bits = j.value("payload_bits", c.payload_bits);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.latent_size = j.value("latent_size", c.latent_size);
    c.image_size = j.value("image_size", c.image_size);
    c.hidden = j.value("hidden", c.hidden);
    c.channels = j.value("channels", c.channels);
    c.zero_init_output = j.value("zero_init_output", c.zero_init_output);
    return c;
}

SecretEncoderImpl::SecretEncoderImpl(CodecConfig cfg) : cfg_(cfg) {
    if (cfg.latent_size % 2 != 0) throw ConfigError("secret encoder needs an even latent size");
    const auto coarse = cfg.latent_size / 2;
    const auto C = cfg.channels;
    mlp = register_module("mlp", nn::Sequential(nn::Linear(cfg.payload_bits, cfg.hidden), nn::SiLU(),
                                                nn::Linear(cfg.hidden, C * coarse * coarse), nn::SiLU()));
    auto out = nn::Conv2d(nn::Conv2dOptions(C, cfg.latent_channels, 3).padding(1));
    if (cfg.zero_init_output) {
        torch::NoGradGuard g;
        out->weight.zero_();
        out->bias.zero_();
    }
    up = register_module(
        "up", nn::Sequential(nn::ConvTranspose2d(nn::ConvTranspose2dOptions(C, C, 4).stride(2).padding(1)), nn::SiLU(),
                             nn::Conv2d(nn::Conv2dOptions(C, C, 3).padding(1)), nn::SiLU(), out));
}

torch::Tensor SecretEncoderImpl::forward(const torch::Tensor& bits) {
    if (bits.dim() != 2 || bits.size(1) != cfg_.payload_bits) {
        throw PayloadError("secret encoder expects (N, " + std::to_string(cfg_.payload_bits) + ") bits, got " +
                           c10::str(bits.sizes()));
    }
    const auto coarse = cfg_.latent_size / 2;
    auto h = mlp->forward(bits * 2.0 - 1.0).view({bits.size(0), cfg_.channels, coarse, coarse});
    return up->forward(h);
}

SecretDecoderImpl::SecretDecoderImpl(CodecConfig cfg) : cfg_(cfg) {
    const auto C = cfg.channels;
    features = register_module(
        "features",
        nn::Sequential(nn::Conv2d(nn::Conv2dOptions(3, C, 3).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(C, 2 * C, 3).stride(2).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(2 * C, 2 * C, 3).stride(2).padding(1)), nn::SiLU(),
                       nn::Conv2d(nn::Conv2dOptions(2 * C, 4 * C, 3).stride(2).padding(1)), nn::SiLU(),
                       nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions({4, 4}))));
    head = register_module("head", nn::Sequential(nn::Flatten(), nn::Linear(4 * C * 16, cfg.hidden), nn::SiLU(),
                                                  nn::Linear(cfg.hidden, cfg.payload_bits)));
}

torch::Tensor SecretDecoderImpl::forward(const torch::Tensor& images) {
    if (images.dim() != 4 || images.size(1) != 3) {
        throw ShapeError("secret decoder expects (N,3,H,W) images, got " + c10::str(images.sizes()));
    }
    return head->forward(features->forward(images * 2.0 - 1.0));
}

torch::Tensor encode_secret(const SecretMessage& s, SecretEncoder& encoder) {
    if (static_cast<std::int64_t>(s.size()) != encoder->config().payload_bits) {
        throw PayloadError("secret has " + std::to_string(s.size()) + " bits, encoder expects " +
                           std::to_string(encoder->config().payload_bits));
    }
    torch::NoGradGuard g;
    return encoder->forward(s.to_tensor().unsqueeze(0)).squeeze(0);
}

torch::Tensor embed_latent(const torch::Tensor& z_o, const torch::Tensor& offset) {
    if (offset.dim() == z_o.dim() - 1) {
        if (offset.sizes() != z_o.sizes().slice(1)) {
            throw ShapeError("embed_latent: offset " + c10::str(offset.sizes()) + " vs latent " + c10::str(z_o.sizes()));
        }
        return z_o + offset.unsqueeze(0);
    }
    require_same_shape(z_o, offset, "embed_latent");
    return z_o + offset;
}

torch::Tensor decode_secret(const torch::Tensor& images, SecretDecoder& decoder) {
    if (images.dim() == 3) return decode_secret(images.unsqueeze(0), decoder).squeeze(0);
    const auto size = decoder->config().image_size;
    auto x = resize_bilinear(images, size, size);
    return torch::sigmoid(decoder->forward(x));
}

torch::Tensor corner_patch_augment(const torch::Tensor& offset, const torch::Tensor& z_o, double scale) {
    if (!(scale >= 1.0 && scale <= 1.5)) throw ConfigError("corner patch scale must lie in [1, 1.5]");
    auto batched_offset = offset.dim() == z_o.dim() - 1 ? offset.unsqueeze(0).expand_as(z_o) : offset;
    require_same_shape(batched_offset, z_o, "corner_patch_augment");
    const auto h = z_o.size(2);
    const auto w = z_o.size(3);
    if (h % 2 != 0 || w % 2 != 0) throw ConfigError("corner patch augmentation needs even latent dims");
    const auto ph = h / 2;
    const auto pw = w / 2;
    const auto H = static_cast<std::int64_t>(std::llround(h * scale));
    const auto W = static_cast<std::int64_t>(std::llround(w * scale));
    auto big = resize_bilinear(z_o, H, W);
    // Quadrants of the offset land on the matching corners of the enlarged latent.
    auto place = [&](std::int64_t r0, std::int64_t c0, bool bottom, bool right) {
        auto patch = batched_offset.slice(2, r0, r0 + ph).slice(3, c0, c0 + pw);
        auto pad_v = H - ph;
        auto pad_h = W - pw;
        return F::pad(patch, F::PadFuncOptions({right ? pad_h : 0, right ? 0 : pad_h, bottom ? pad_v : 0,
                                                bottom ? 0 : pad_v}));
    };
    auto patches = place(0, 0, false, false) + place(0, pw, false, true) + place(ph, 0, true, false) +
               place(ph, pw, true, true);
    return resize_bilinear(big + patches, h, w);
}

}  // namespace wmlora::watermark
