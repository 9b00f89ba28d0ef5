#include "wmlora/diffusion/layers.hpp"

#include <cmath>

namespace wmlora::diffusion {

namespace F = torch::nn::functional;

AdaptedConv2dImpl::AdaptedConv2dImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride,
                                     std::int64_t padding)
    : in_(in), out_(out), kernel_(kernel), stride_(stride), padding_(padding) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = register_parameter("weight", torch::empty({out, in, kernel, kernel}).uniform_(-bound, bound));
    bias = register_parameter("bias", torch::empty({out}).uniform_(-bound, bound));
}

torch::Tensor AdaptedConv2dImpl::forward(const torch::Tensor& x, const lora::LoraRuntime* rt) {
    auto opts = F::Conv2dFuncOptions().stride(stride_).padding(padding_);
    auto y = F::conv2d(x, weight, opts.bias(bias));
    const lora::LoraFactors* f = rt ? rt->find(key_) : nullptr;
    if (f == nullptr) return y;
    auto r = f->B.size(0);
    auto down = f->B.view({r, in_, kernel_, kernel_});
    auto u = F::conv2d(x, down, F::Conv2dFuncOptions().stride(stride_).padding(padding_));
    if (rt->scale.defined()) u = u * rt->scale.view({-1, r, 1, 1});
    auto up = f->A.view({out_, r, 1, 1});
    return y + rt->alpha * F::conv2d(u, up);
}

AdaptedLinearImpl::AdaptedLinearImpl(std::int64_t in, std::int64_t out) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = register_parameter("weight", torch::empty({out, in}).uniform_(-bound, bound));
    bias = register_parameter("bias", torch::empty({out}).uniform_(-bound, bound));
}

torch::Tensor AdaptedLinearImpl::forward(const torch::Tensor& x, const lora::LoraRuntime* rt) {
    auto y = F::linear(x, weight, bias);
    const lora::LoraFactors* f = rt ? rt->find(key_) : nullptr;
    if (f == nullptr) return y;
    auto r = f->B.size(0);
    auto u = torch::matmul(x, f->B.t());
    if (rt->scale.defined()) {
        std::vector<std::int64_t> view(static_cast<std::size_t>(x.dim()), 1);
        view.front() = -1;
        view.back() = r;
        u = u * rt->scale.view(view);
    }
    return y + rt->alpha * torch::matmul(u, f->A.t());
}

}  // namespace wmlora::diffusion
