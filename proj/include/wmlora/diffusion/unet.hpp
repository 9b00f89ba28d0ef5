#pragma once

#include "wmlora/diffusion/layers.hpp"

#include <nlohmann/json.hpp>

namespace wmlora::diffusion {

struct UNetConfig {
    std::int64_t latent_channels = 4;
    std::int64_t channels = 48;       // at latent resolution
    std::int64_t mid_channels = 64;   // at half resolution
    std::int64_t emb_dim = 128;
    std::int64_t num_classes = 10;
    std::int64_t groups = 8;
    std::int64_t heads = 4;

    /// Index reserved for the unconditional (NULL) label.
    std::int64_t null_label() const { return num_classes; }

    nlohmann::json to_json() const;
    static UNetConfig from_json(const nlohmann::json& j);
};

class ResBlockImpl : public torch::nn::Module {
public:
    ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t emb_dim, std::int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb, const lora::LoraRuntime* rt);

private:
    torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
    AdaptedConv2d conv1{nullptr}, conv2{nullptr};
    torch::nn::Linear emb_proj{nullptr};
    torch::nn::Conv2d skip{nullptr};
};
TORCH_MODULE(ResBlock);

/// Self-attention over spatial tokens followed by a feed-forward network.
class TransformerBlockImpl : public torch::nn::Module {
public:
    TransformerBlockImpl(std::int64_t channels, std::int64_t heads, std::int64_t groups);
    torch::Tensor forward(const torch::Tensor& x, const lora::LoraRuntime* rt);

private:
    std::int64_t heads_;
    torch::nn::GroupNorm norm{nullptr};
    AdaptedLinear to_qkv{nullptr}, to_out{nullptr};
    torch::nn::LayerNorm ff_norm{nullptr};
    AdaptedLinear ff_in{nullptr}, ff_out{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Class-conditional noise predictor eps(z_t, t, c) over the latent grid.
/// Labels equal to `config.null_label()` select the unconditional embedding.
class UNetImpl : public torch::nn::Module {
public:
    explicit UNetImpl(UNetConfig cfg = {});

    torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& labels,
                          const lora::LoraRuntime* rt = nullptr);

    const UNetConfig& config() const { return cfg_; }

    /// Parameter names of the LoRA-targetable weights (residual-block convs,
    /// attention projections and feed-forward linears).
    std::vector<std::string> lora_targets() const;

    /// (n, m) of each LoRA target viewed as a matrix.
    std::map<std::string, std::pair<std::int64_t, std::int64_t>> lora_target_shapes() const;

private:
    UNetConfig cfg_;
    torch::nn::Linear time_fc1{nullptr}, time_fc2{nullptr};
    torch::nn::Embedding label_emb{nullptr};
    torch::nn::Conv2d conv_in{nullptr};
    ResBlock down_res{nullptr};
    torch::nn::Conv2d downsample{nullptr};
    ResBlock mid_res1{nullptr};
    TransformerBlock mid_attn{nullptr};
    ResBlock mid_res2{nullptr};
    torch::nn::Conv2d upsample{nullptr};
    ResBlock up_res{nullptr};
    torch::nn::GroupNorm out_norm{nullptr};
    torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(UNet);

/// Sinusoidal embedding of (possibly fractional) timesteps, shape (N, dim).
torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim);

}  // namespace wmlora::diffusion
