#pragma once

#include "wmlora/watermark/secret.hpp"

#include <nlohmann/json.hpp>

namespace wmlora::watermark {

struct CodecConfig {
    std::int64_t payload_bits = 16;
    std::int64_t latent_channels = 4;
    std::int64_t latent_size = 8;
    std::int64_t image_size = 32;
    std::int64_t hidden = 256;
    std::int64_t channels = 32;
    /// Zero-initialize the encoder's output conv (offset starts at exactly zero).
    bool zero_init_output = false;

    nlohmann::json to_json() const;
    static CodecConfig from_json(const nlohmann::json& j);
};

/// Secret encoder: MLP from bits to a coarse code, upsampled by a transposed
/// convolution to the latent grid. Output is the cover-agnostic latent offset.
class SecretEncoderImpl : public torch::nn::Module {
public:
    explicit SecretEncoderImpl(CodecConfig cfg = {});
    /// bits (N, l) float 0/1 -> offsets (N, C, h, w).
    torch::Tensor forward(const torch::Tensor& bits);
    const CodecConfig& config() const { return cfg_; }

private:
    CodecConfig cfg_;
    torch::nn::Sequential mlp{nullptr};
    torch::nn::Sequential up{nullptr};
};
TORCH_MODULE(SecretEncoder);

/// Secret decoder: four conv blocks, pooled to 4x4, linear head to l logits.
class SecretDecoderImpl : public torch::nn::Module {
public:
    explicit SecretDecoderImpl(CodecConfig cfg = {});
    /// images (N,3,H,W) in [0,1] at the training resolution -> logits (N, l).
    torch::Tensor forward(const torch::Tensor& images);
    const CodecConfig& config() const { return cfg_; }

private:
    CodecConfig cfg_;
    torch::nn::Sequential features{nullptr};
    torch::nn::Sequential head{nullptr};
};
TORCH_MODULE(SecretDecoder);

/// E_s(s) for a single secret, shape (C, h, w).
torch::Tensor encode_secret(const SecretMessage& s, SecretEncoder& encoder);

/// z_o + offset; offset broadcasts over the batch when it has one fewer dim.
torch::Tensor embed_latent(const torch::Tensor& z_o, const torch::Tensor& offset);

/// Bit probabilities (N, l) for images (N,3,H,W) or (3,H,W); other
/// resolutions are bilinearly resized to the decoder's training size.
torch::Tensor decode_secret(const torch::Tensor& images, SecretDecoder& decoder);

/// Large-size simulation: z_o is resized by `scale` in [1, 1.5], the four
/// quadrants of the offset are added at the four corners of the resized
/// latent, and the result is resized back to the original latent size.
torch::Tensor corner_patch_augment(const torch::Tensor& offset, const torch::Tensor& z_o, double scale);

}  // namespace wmlora::watermark
