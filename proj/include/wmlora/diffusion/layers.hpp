#pragma once

#include "wmlora/lora/adapter.hpp"

namespace wmlora::diffusion {

/// Conv2d whose forward optionally adds a secret-scaled low-rank branch.
/// The weight is exposed directly as `weight` so its parameter path is the
/// LoRA target key.
class AdaptedConv2dImpl : public torch::nn::Module {
public:
    AdaptedConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1,
                      std::int64_t padding = 0);

    torch::Tensor forward(const torch::Tensor& x, const lora::LoraRuntime* rt = nullptr);

    void set_key(std::string key) { key_ = std::move(key); }
    const std::string& key() const { return key_; }

    torch::Tensor weight;
    torch::Tensor bias;

private:
    std::int64_t in_, out_, kernel_, stride_, padding_;
    std::string key_;
};
TORCH_MODULE(AdaptedConv2d);

/// Linear layer over the last dimension with the same optional low-rank branch.
class AdaptedLinearImpl : public torch::nn::Module {
public:
    AdaptedLinearImpl(std::int64_t in, std::int64_t out);

    torch::Tensor forward(const torch::Tensor& x, const lora::LoraRuntime* rt = nullptr);

    void set_key(std::string key) { key_ = std::move(key); }
    const std::string& key() const { return key_; }

    torch::Tensor weight;
    torch::Tensor bias;

private:
    std::string key_;
};
TORCH_MODULE(AdaptedLinear);

}  // namespace wmlora::diffusion
