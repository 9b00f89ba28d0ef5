#include "wmlora/distortion/distortion.hpp"

#include "wmlora/image_io.hpp"

#include <array>
#include <cmath>
#include <numbers>

namespace wmlora::distortion {

namespace F = torch::nn::functional;

namespace {

constexpr std::array<std::pair<DistortionKind, std::string_view>, 8> kKindNames{{
    {DistortionKind::identity, "identity"},
    {DistortionKind::jpeg_approx, "jpeg_approx"},
    {DistortionKind::jpeg, "jpeg"},
    {DistortionKind::crop_resize, "crop_resize"},
    {DistortionKind::gaussian_blur, "gaussian_blur"},
    {DistortionKind::gaussian_noise, "gaussian_noise"},
    {DistortionKind::color_jitter, "color_jitter"},
    {DistortionKind::denoise_regen, "denoise_regen"},
}};

double uniform(torch::Generator& gen, double lo, double hi) {
    if (hi <= lo) return lo;
    return lo + (hi - lo) * torch::rand({1}, gen).item<double>();
}

std::int64_t uniform_int(torch::Generator& gen, std::int64_t lo, std::int64_t hi) {
    if (hi <= lo) return lo;
    return torch::randint(lo, hi + 1, {1}, gen).item<std::int64_t>();
}

// Orthonormal 8-point DCT-II basis, rows are frequencies.
torch::Tensor dct_matrix() {
    auto d = torch::empty({8, 8}, torch::kFloat32);
    for (int k = 0; k < 8; ++k) {
        double scale = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
        for (int n = 0; n < 8; ++n) {
            d[k][n] = static_cast<float>(scale * std::cos(std::numbers::pi * (2 * n + 1) * k / 16.0));
        }
    }
    return d;
}

constexpr int kLumaTable[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                                14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                                18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                                49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kChromaTable[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                                  24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                                  99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};
constexpr int kKeepCutoff = 40;

torch::Tensor rgb_to_ycbcr(const torch::Tensor& x) {
    auto r = x.select(1, 0), g = x.select(1, 1), b = x.select(1, 2);
    auto y = 0.299 * r + 0.587 * g + 0.114 * b;
    auto cb = -0.168736 * r - 0.331264 * g + 0.5 * b;
    auto cr = 0.5 * r - 0.418688 * g - 0.081312 * b;
    return torch::stack({y, cb, cr}, 1);
}

torch::Tensor ycbcr_to_rgb(const torch::Tensor& x) {
    auto y = x.select(1, 0), cb = x.select(1, 1), cr = x.select(1, 2);
    auto r = y + 1.402 * cr;
    auto g = y - 0.344136 * cb - 0.714136 * cr;
    auto b = y + 1.772 * cb;
    return torch::stack({r, g, b}, 1);
}

torch::Tensor gaussian_kernel(std::int64_t size, double sigma) {
    auto coords = torch::arange(size, torch::kFloat32) - static_cast<double>(size - 1) / 2.0;
    auto g = torch::exp(-coords.pow(2) / (2.0 * sigma * sigma));
    g = g / g.sum();
    return torch::outer(g, g);
}

torch::Tensor blur_one(const torch::Tensor& img, std::int64_t k, double sigma) {
    auto kernel = gaussian_kernel(k, sigma).view({1, 1, k, k}).repeat({3, 1, 1, 1});
    auto pad = k / 2;
    auto padded = F::pad(img.unsqueeze(0), F::PadFuncOptions({pad, pad, pad, pad}).mode(torch::kReflect));
    return F::conv2d(padded, kernel, F::Conv2dFuncOptions().groups(3)).squeeze(0);
}

torch::Tensor color_jitter_one(const torch::Tensor& img, double brightness, double contrast, double saturation,
                               double hue) {
    auto x = img * brightness;
    auto gray = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
    x = (x - gray.mean()) * contrast + gray.mean();
    gray = 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2];
    x = gray.unsqueeze(0) + (x - gray.unsqueeze(0)) * saturation;
    // Hue rotation in the YIQ chroma plane; the inverse is exact so hue 0 is the identity.
    static const torch::Tensor yiq = torch::tensor({{0.299, 0.587, 0.114}, {0.596, -0.274, -0.322}, {0.211, -0.523, 0.312}},
                                                   torch::kFloat64);
    static const torch::Tensor yiq_inv = torch::linalg_inv(yiq);
    double theta = 2.0 * std::numbers::pi * hue;
    auto rot = torch::tensor({{1.0, 0.0, 0.0},
                              {0.0, std::cos(theta), -std::sin(theta)},
                              {0.0, std::sin(theta), std::cos(theta)}},
                             torch::kFloat64);
    auto m = yiq_inv.matmul(rot).matmul(yiq).to(x.scalar_type());
    return torch::einsum("ij,jhw->ihw", {m, x});
}

}  // namespace

DistortionKind parse_kind(std::string_view name) {
    for (const auto& [kind, n] : kKindNames) {
        if (n == name) return kind;
    }
    throw ConfigError("unknown distortion kind '" + std::string(name) + "'");
}

std::string to_string(DistortionKind kind) {
    for (const auto& [k, n] : kKindNames) {
        if (k == kind) return std::string(n);
    }
    return "unknown";
}

nlohmann::json DistortionSpec::to_json() const {
    const auto& p = params;
    return {{"name", name},
            {"kind", to_string(kind)},
            {"differentiable", differentiable},
            {"params",
             {{"jpeg_quality", p.jpeg_quality},
              {"crop", {p.crop_min, p.crop_max}},
              {"blur_kernel", {p.blur_kernel_min, p.blur_kernel_max}},
              {"blur_sigma", {p.blur_sigma_min, p.blur_sigma_max}},
              {"noise_var", p.noise_var},
              {"brightness", {p.brightness_min, p.brightness_max}},
              {"contrast", {p.contrast_min, p.contrast_max}},
              {"saturation", {p.saturation_min, p.saturation_max}},
              {"hue", {p.hue_min, p.hue_max}},
              {"regen_strength", p.regen_strength}}}};
}

DistortionSpec DistortionSpec::from_json(const nlohmann::json& j) {
    DistortionSpec s;
    s.kind = parse_kind(j.at("kind").get<std::string>());
    s.name = j.value("name", to_string(s.kind));
    s.differentiable = j.value("differentiable", s.kind != DistortionKind::jpeg && s.kind != DistortionKind::denoise_regen);
    if (!j.contains("params")) return s;
    const auto& p = j.at("params");
    auto range = [&](const char* key, double& lo, double& hi) {
        if (!p.contains(key)) return;
        auto v = p.at(key).get<std::vector<double>>();
        if (v.size() != 2 || v[0] > v[1]) throw ConfigError(std::string("distortion range '") + key + "' malformed");
        lo = v[0];
        hi = v[1];
    };
    s.params.jpeg_quality = p.value("jpeg_quality", s.params.jpeg_quality);
    range("crop", s.params.crop_min, s.params.crop_max);
    if (p.contains("blur_kernel")) {
        auto v = p.at("blur_kernel").get<std::vector<int>>();
        if (v.size() != 2 || v[0] > v[1]) throw ConfigError("distortion range 'blur_kernel' malformed");
        s.params.blur_kernel_min = v[0];
        s.params.blur_kernel_max = v[1];
    }
    range("blur_sigma", s.params.blur_sigma_min, s.params.blur_sigma_max);
    s.params.noise_var = p.value("noise_var", s.params.noise_var);
    range("brightness", s.params.brightness_min, s.params.brightness_max);
    range("contrast", s.params.contrast_min, s.params.contrast_max);
    range("saturation", s.params.saturation_min, s.params.saturation_max);
    range("hue", s.params.hue_min, s.params.hue_max);
    s.params.regen_strength = p.value("regen_strength", s.params.regen_strength);
    return s;
}

std::vector<DistortionSpec> train_menu() {
    std::vector<DistortionSpec> menu;
    DistortionSpec jpeg{"jpeg_approx", DistortionKind::jpeg_approx, {}, true};
    jpeg.params.jpeg_quality = 50;
    menu.push_back(jpeg);

    // Crop side in [256,512] of 512 maps to a kept fraction in [0.5, 1].
    DistortionSpec crop{"crop_resize", DistortionKind::crop_resize, {}, true};
    crop.params.crop_min = 0.5;
    crop.params.crop_max = 1.0;
    menu.push_back(crop);

    DistortionSpec blur{"gaussian_blur", DistortionKind::gaussian_blur, {}, true};
    blur.params.blur_kernel_min = 3;
    blur.params.blur_kernel_max = 9;
    blur.params.blur_sigma_min = 1e-3;
    blur.params.blur_sigma_max = 2.0;
    menu.push_back(blur);

    // Variance 10 on the 0-255 scale.
    DistortionSpec noise{"gaussian_noise", DistortionKind::gaussian_noise, {}, true};
    noise.params.noise_var = 10.0 / (255.0 * 255.0);
    menu.push_back(noise);

    DistortionSpec jitter{"color_jitter", DistortionKind::color_jitter, {}, true};
    jitter.params.brightness_min = jitter.params.contrast_min = jitter.params.saturation_min = 0.8;
    jitter.params.brightness_max = jitter.params.contrast_max = jitter.params.saturation_max = 1.25;
    jitter.params.hue_min = -0.2;
    jitter.params.hue_max = 0.2;
    menu.push_back(jitter);
    return menu;
}

DistortionSpec eval_distortion(std::string_view name) {
    DistortionSpec s;
    s.name = std::string(name);
    s.differentiable = false;
    if (name == "identity" || name == "clean") {
        s.kind = DistortionKind::identity;
    } else if (name == "jpeg") {
        s.kind = DistortionKind::jpeg;
        s.params.jpeg_quality = 50;
    } else if (name == "crop") {
        s.kind = DistortionKind::crop_resize;
        s.params.crop_min = s.params.crop_max = 0.8;
    } else if (name == "blur") {
        s.kind = DistortionKind::gaussian_blur;
        s.params.blur_kernel_min = s.params.blur_kernel_max = 3;
        s.params.blur_sigma_min = s.params.blur_sigma_max = 4.0;
    } else if (name == "noise") {
        s.kind = DistortionKind::gaussian_noise;
        s.params.noise_var = 0.1;
    } else if (name == "jitter") {
        s.kind = DistortionKind::color_jitter;
    } else if (name == "denoise") {
        s.kind = DistortionKind::denoise_regen;
        s.params.regen_strength = 0.1;
    } else if (name == "denoise2") {
        s.kind = DistortionKind::denoise_regen;
        s.params.regen_strength = 0.2;
    } else {
        throw ConfigError("unknown evaluation distortion '" + std::string(name) + "'");
    }
    return s;
}

std::vector<std::string> eval_suite_names() {
    return {"jitter", "crop", "blur", "noise", "jpeg", "denoise", "denoise2"};
}

torch::Tensor jpeg_keep_mask(int quality, bool chroma) {
    if (quality < 1 || quality > 100) throw ConfigError("JPEG quality must lie in [1,100]");
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    const int* table = chroma ? kChromaTable : kLumaTable;
    auto mask = torch::empty({8, 8}, torch::kFloat32);
    for (int i = 0; i < 64; ++i) {
        int q = std::clamp((table[i] * scale + 50) / 100, 1, 255);
        mask[i / 8][i % 8] = q <= kKeepCutoff ? 1.0f : 0.0f;
    }
    return mask;
}

torch::Tensor jpeg_approx_train(const torch::Tensor& images, int quality) {
    if (images.dim() == 3) return jpeg_approx_train(images.unsqueeze(0), quality).squeeze(0);
    const auto n = images.size(0);
    const auto h = images.size(2);
    const auto w = images.size(3);
    if (h % 8 != 0 || w % 8 != 0) throw ShapeError("JPEG simulation needs image dims divisible by 8");
    static const torch::Tensor D = dct_matrix();
    auto ycc = rgb_to_ycbcr(images);
    // (N,3,h/8,8,w/8,8) -> (N,3,h/8,w/8,8,8)
    auto blocks = ycc.view({n, 3, h / 8, 8, w / 8, 8}).permute({0, 1, 2, 4, 3, 5});
    auto coeffs = torch::matmul(torch::matmul(D, blocks), D.t());
    auto mask = torch::stack({jpeg_keep_mask(quality, false), jpeg_keep_mask(quality, true),
                              jpeg_keep_mask(quality, true)})
                    .view({1, 3, 1, 1, 8, 8});
    auto rec = torch::matmul(torch::matmul(D.t(), coeffs * mask), D);
    auto back = rec.permute({0, 1, 2, 4, 3, 5}).reshape({n, 3, h, w});
    return ycbcr_to_rgb(back).clamp(0.0, 1.0);
}

torch::Tensor denoise_regen(const torch::Tensor& images, const RegenContext& ctx, double strength,
                            torch::Generator& gen) {
    if (!(strength > 0.0 && strength < 1.0)) throw ConfigError("regeneration strength must lie in (0,1)");
    if (!ctx.autoencoder || !ctx.model || ctx.schedule == nullptr) {
        throw ConfigError("regeneration attack needs a clean autoencoder, model and schedule");
    }
    torch::NoGradGuard g;
    const auto& sched = *ctx.schedule;
    auto ae = ctx.autoencoder;
    auto model = ctx.model;
    auto z0 = ae->encode(images);
    const int t = static_cast<int>(std::lround(strength * sched.T));
    if (t < 1) return ae->decode(z0);
    auto eps = torch::randn(z0.sizes(), gen);
    auto zt = diffusion::forward_diffuse(z0, t, eps, sched);
    diffusion::SampleOptions opts;
    opts.kind = diffusion::SamplerKind::ddim;
    opts.guidance_scale = 1.0;
    opts.steps = std::clamp(static_cast<int>(std::lround(strength * ctx.steps_per_unit)), 1, t);
    opts.seed = static_cast<std::uint64_t>(torch::randint(0, 1LL << 62, {1}, gen).item<std::int64_t>());
    auto labels = torch::full({images.size(0)}, model->config().null_label(), torch::kLong);
    auto z = diffusion::reverse_from(diffusion::guided_predictor(model, 1.0), sched, zt, t, labels, opts);
    return ae->decode(z);
}

torch::Tensor apply(const DistortionSpec& spec, const torch::Tensor& images, torch::Generator& gen,
                    const RegenContext* regen) {
    if (images.dim() == 3) return apply(spec, images.unsqueeze(0), gen, regen).squeeze(0);
    if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("distortions expect (N,3,H,W) images");
    const auto& p = spec.params;
    const auto n = images.size(0);
    const auto h = images.size(2);
    const auto w = images.size(3);
    switch (spec.kind) {
        case DistortionKind::identity:
            return images;
        case DistortionKind::jpeg_approx:
            return jpeg_approx_train(images, p.jpeg_quality);
        case DistortionKind::jpeg:
            return jpeg_roundtrip(images, p.jpeg_quality);
        case DistortionKind::crop_resize: {
            std::vector<torch::Tensor> out;
            for (std::int64_t i = 0; i < n; ++i) {
                auto ch = std::clamp<std::int64_t>(std::llround(h * uniform(gen, p.crop_min, p.crop_max)), 1, h);
                auto cw = std::clamp<std::int64_t>(std::llround(w * uniform(gen, p.crop_min, p.crop_max)), 1, w);
                auto y0 = uniform_int(gen, 0, h - ch);
                auto x0 = uniform_int(gen, 0, w - cw);
                auto crop = images[i].slice(1, y0, y0 + ch).slice(2, x0, x0 + cw);
                out.push_back(resize_bilinear(crop, h, w));
            }
            return torch::stack(out).clamp(0.0, 1.0);
        }
        case DistortionKind::gaussian_blur: {
            std::vector<torch::Tensor> out;
            for (std::int64_t i = 0; i < n; ++i) {
                auto half_min = (p.blur_kernel_min - 1) / 2;
                auto half_max = (p.blur_kernel_max - 1) / 2;
                auto k = 2 * uniform_int(gen, half_min, half_max) + 1;
                auto sigma = uniform(gen, p.blur_sigma_min, p.blur_sigma_max);
                out.push_back(blur_one(images[i], k, sigma));
            }
            return torch::stack(out).clamp(0.0, 1.0);
        }
        case DistortionKind::gaussian_noise:
            return (images + std::sqrt(p.noise_var) * torch::randn(images.sizes(), gen)).clamp(0.0, 1.0);
        case DistortionKind::color_jitter: {
            std::vector<torch::Tensor> out;
            for (std::int64_t i = 0; i < n; ++i) {
                out.push_back(color_jitter_one(images[i], uniform(gen, p.brightness_min, p.brightness_max),
                                               uniform(gen, p.contrast_min, p.contrast_max),
                                               uniform(gen, p.saturation_min, p.saturation_max),
                                               uniform(gen, p.hue_min, p.hue_max)));
            }
            return torch::stack(out).clamp(0.0, 1.0);
        }
        case DistortionKind::denoise_regen:
            if (regen == nullptr) throw ConfigError("denoise_regen needs a clean-model context");
            return denoise_regen(images, *regen, p.regen_strength, gen);
    }
    throw ConfigError("unhandled distortion kind");
}

}  // namespace wmlora::distortion
