#include "wmlora/diffusion/unet.hpp"

#include <cmath>

namespace wmlora::diffusion {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

nlohmann::json UNetConfig::to_json() const {
    return {{"latent_channels", latent_channels}, {"channels", channels}, {"mid_channels", mid_channels},
            {"emb_dim", emb_dim},                 {"num_classes", num_classes}, {"groups", groups},
            {"heads", heads}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.channels = j.value("channels", c.channels);
    c.mid_channels = j.value("mid_channels", c.mid_channels);
    c.emb_dim = j.value("emb_dim", c.emb_dim);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.groups = j.value("groups", c.groups);
    c.heads = j.value("heads", c.heads);
    return c;
}

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
    auto half = dim / 2;
    auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, torch::kFloat32) / static_cast<double>(half));
    auto args = t.to(torch::kFloat32).unsqueeze(1) * freqs.unsqueeze(0);
    return torch::cat({torch::cos(args), torch::sin(args)}, 1);
}

ResBlockImpl::ResBlockImpl(std::int64_t in, std::int64_t out, std::int64_t emb_dim, std::int64_t groups) {
    norm1 = register_module("norm1", nn::GroupNorm(groups, in));
    conv1 = register_module("conv1", AdaptedConv2d(in, out, 3, 1, 1));
    emb_proj = register_module("emb_proj", nn::Linear(emb_dim, out));
    norm2 = register_module("norm2", nn::GroupNorm(groups, out));
    conv2 = register_module("conv2", AdaptedConv2d(out, out, 3, 1, 1));
    if (in != out) skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in, out, 1)));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb,
                                    const lora::LoraRuntime* rt) {
    auto h = conv1->forward(F::silu(norm1->forward(x)), rt);
    h = h + emb_proj->forward(F::silu(emb)).unsqueeze(-1).unsqueeze(-1);
    h = conv2->forward(F::silu(norm2->forward(h)), rt);
    return h + (skip ? skip->forward(x) : x);
}

TransformerBlockImpl::TransformerBlockImpl(std::int64_t channels, std::int64_t heads, std::int64_t groups)
    : heads_(heads) {
    norm = register_module("norm", nn::GroupNorm(groups, channels));
    to_qkv = register_module("to_qkv", AdaptedLinear(channels, 3 * channels));
    to_out = register_module("to_out", AdaptedLinear(channels, channels));
    ff_norm = register_module("ff_norm", nn::LayerNorm(nn::LayerNormOptions({channels})));
    ff_in = register_module("ff_in", AdaptedLinear(channels, 4 * channels));
    ff_out = register_module("ff_out", AdaptedLinear(4 * channels, channels));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const lora::LoraRuntime* rt) {
    auto n = x.size(0);
    auto c = x.size(1);
    auto h = x.size(2);
    auto w = x.size(3);
    auto tokens = norm->forward(x).flatten(2).transpose(1, 2);  // (N, L, C)
    auto qkv = to_qkv->forward(tokens, rt).chunk(3, -1);
    auto d = c / heads_;
    auto split = [&](const torch::Tensor& t) { return t.view({n, -1, heads_, d}).transpose(1, 2); };
    auto q = split(qkv[0]);
    auto k = split(qkv[1]);
    auto v = split(qkv[2]);
    auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d)), -1);
    auto out = torch::matmul(attn, v).transpose(1, 2).reshape({n, -1, c});
    auto res = x.flatten(2).transpose(1, 2) + to_out->forward(out, rt);
    auto ff = ff_out->forward(F::gelu(ff_in->forward(ff_norm->forward(res), rt)), rt);
    res = res + ff;
    return res.transpose(1, 2).reshape({n, c, h, w});
}

UNetImpl::UNetImpl(UNetConfig cfg) : cfg_(cfg) {
    const auto C = cfg.channels;
    const auto M = cfg.mid_channels;
    const auto E = cfg.emb_dim;
    time_fc1 = register_module("time_fc1", nn::Linear(C, E));
    time_fc2 = register_module("time_fc2", nn::Linear(E, E));
    label_emb = register_module("label_emb", nn::Embedding(cfg.num_classes + 1, E));
    conv_in = register_module("conv_in", nn::Conv2d(nn::Conv2dOptions(cfg.latent_channels, C, 3).padding(1)));
    down_res = register_module("down_res", ResBlock(C, C, E, cfg.groups));
    downsample = register_module("downsample", nn::Conv2d(nn::Conv2dOptions(C, C, 3).stride(2).padding(1)));
    mid_res1 = register_module("mid_res1", ResBlock(C, M, E, cfg.groups));
    mid_attn = register_module("mid_attn", TransformerBlock(M, cfg.heads, cfg.groups));
    mid_res2 = register_module("mid_res2", ResBlock(M, M, E, cfg.groups));
    upsample = register_module("upsample", nn::Conv2d(nn::Conv2dOptions(M, C, 3).padding(1)));
    up_res = register_module("up_res", ResBlock(2 * C, C, E, cfg.groups));
    out_norm = register_module("out_norm", nn::GroupNorm(cfg.groups, C));
    conv_out = register_module("conv_out", nn::Conv2d(nn::Conv2dOptions(C, cfg.latent_channels, 3).padding(1)));

    for (auto& item : named_modules("", false)) {
        if (auto* conv = item.value()->as<AdaptedConv2dImpl>()) conv->set_key(item.key() + ".weight");
        if (auto* lin = item.value()->as<AdaptedLinearImpl>()) lin->set_key(item.key() + ".weight");
    }
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& labels,
                                const lora::LoraRuntime* rt) {
    if (z.dim() != 4 || z.size(1) != cfg_.latent_channels) {
        throw ShapeError("UNet expects (N," + std::to_string(cfg_.latent_channels) + ",H,W) latents, got " +
                         c10::str(z.sizes()));
    }
    if ((z.size(2) % 2) != 0 || (z.size(3) % 2) != 0) throw ShapeError("UNet latent dims must be even");
    auto emb = time_fc2->forward(F::silu(time_fc1->forward(timestep_embedding(t, cfg_.channels))));
    emb = emb + label_emb->forward(labels.to(torch::kLong));

    auto h0 = conv_in->forward(z);
    auto h1 = down_res->forward(h0, emb, rt);
    auto h = downsample->forward(h1);
    h = mid_res1->forward(h, emb, rt);
    h = mid_attn->forward(h, rt);
    h = mid_res2->forward(h, emb, rt);
    h = F::interpolate(h, F::InterpolateFuncOptions()
                              .size(std::vector<std::int64_t>{h1.size(2), h1.size(3)})
                              .mode(torch::kNearest));
    h = upsample->forward(h);
    h = up_res->forward(torch::cat({h, h1}, 1), emb, rt);
    return conv_out->forward(F::silu(out_norm->forward(h)));
}

std::vector<std::string> UNetImpl::lora_targets() const {
    std::vector<std::string> out;
    for (const auto& [key, shape] : lora_target_shapes()) out.push_back(key);
    return out;
}

std::map<std::string, std::pair<std::int64_t, std::int64_t>> UNetImpl::lora_target_shapes() const {
    std::map<std::string, std::pair<std::int64_t, std::int64_t>> out;
    for (const auto& item : named_modules("", false)) {
        if (const auto* conv = item.value()->as<AdaptedConv2dImpl>()) {
            const auto& w = conv->weight;
            out[conv->key()] = {w.size(0), w.numel() / w.size(0)};
        }
        if (const auto* lin = item.value()->as<AdaptedLinearImpl>()) {
            out[lin->key()] = {lin->weight.size(0), lin->weight.size(1)};
        }
    }
    return out;
}

}  // namespace wmlora::diffusion
