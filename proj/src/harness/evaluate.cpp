#include "wmlora/harness/evaluate.hpp"

#include "wmlora/config.hpp"

namespace wmlora::harness {

torch::Tensor random_labels(std::int64_t n, std::int64_t classes, std::uint64_t seed) {
    auto gen = make_generator(seed);
    return torch::randint(0, classes, {n}, gen, torch::kLong);
}

torch::Tensor generate_images(diffusion::UNet& model, diffusion::Autoencoder& ae,
                              const diffusion::DiffusionSchedule& sched, const torch::Tensor& labels,
                              const diffusion::SampleOptions& opts, std::int64_t latent_size, std::int64_t batch) {
    torch::NoGradGuard g;
    auto predict = diffusion::guided_predictor(model, opts.guidance_scale);
    std::vector<torch::Tensor> parts;
    const auto n = labels.size(0);
    const auto channels = model->config().latent_channels;
    for (std::int64_t i = 0, b = 0; i < n; i += batch, ++b) {
        auto o = opts;
        o.seed = opts.seed + static_cast<std::uint64_t>(b);
        auto lab = labels.slice(0, i, std::min(i + batch, n));
        auto z = diffusion::sample(predict, sched, lab, {channels, latent_size, latent_size}, o);
        parts.push_back(ae->decode(z));
    }
    return torch::cat(parts);
}

nlohmann::json EvalSettings::to_json() const {
    return {{"secrets", secrets},
            {"per_secret", per_secret},
            {"sampler", diffusion::to_string(opts.kind)},
            {"steps", opts.steps},
            {"guidance_scale", opts.guidance_scale},
            {"alpha", alpha},
            {"target_fpr", target_fpr},
            {"seed", seed},
            {"latent_size", latent_size}};
}

EvalSettings EvalSettings::from_json(const nlohmann::json& j) {
    EvalSettings s;
    s.secrets = get_or(j, "secrets", s.secrets);
    s.per_secret = get_or(j, "per_secret", s.per_secret);
    s.opts.kind = diffusion::parse_sampler_kind(get_or<std::string>(j, "sampler", "ddim"));
    s.opts.steps = get_or(j, "steps", s.opts.steps);
    s.opts.guidance_scale = get_or(j, "guidance_scale", s.opts.guidance_scale);
    s.alpha = get_or(j, "alpha", s.alpha);
    s.target_fpr = get_or(j, "target_fpr", s.target_fpr);
    s.seed = get_or(j, "seed", s.seed);
    s.latent_size = get_or(j, "latent_size", s.latent_size);
    if (s.secrets < 1 || s.per_secret < 1) throw ConfigError("eval: secrets and per_secret must be >= 1");
    return s;
}

std::vector<watermark::SecretMessage> eval_secrets(int count, std::size_t length, std::uint64_t seed) {
    std::vector<watermark::SecretMessage> out;
    for (int i = 0; i < count; ++i) {
        out.push_back(watermark::SecretMessage::random(length, seed * 1000003ULL + static_cast<std::uint64_t>(i)));
    }
    return out;
}

WeightsForSecret merged_weights(const diffusion::UNet& base, const lora::WatermarkLoRA& lora, double alpha) {
    auto weights = snapshot(*base);
    return [weights, &lora, alpha](const watermark::SecretMessage& s) { return lora::merge(weights, lora, s, alpha); };
}

WatermarkedSamples generate_watermarked(diffusion::UNet& base, diffusion::Autoencoder& ae,
                                        const diffusion::DiffusionSchedule& sched, const WeightsForSecret& weights_for,
                                        const EvalSettings& settings, std::size_t payload_bits, bool with_clean) {
    diffusion::UNet work(base->config());
    work->eval();
    std::vector<torch::Tensor> images, clean, truth, labels;
    const auto secrets = eval_secrets(settings.secrets, payload_bits, settings.seed);
    for (std::size_t j = 0; j < secrets.size(); ++j) {
        const auto& s = secrets[j];
        auto lab = random_labels(settings.per_secret, base->config().num_classes, settings.seed * 7919ULL + j);
        auto opts = settings.opts;
        opts.seed = settings.seed * 104729ULL + j * 1024ULL;
        load_into(*work, weights_for(s));
        images.push_back(generate_images(work, ae, sched, lab, opts, settings.latent_size));
        if (with_clean) clean.push_back(generate_images(base, ae, sched, lab, opts, settings.latent_size));
        truth.push_back(s.to_tensor().unsqueeze(0).expand({settings.per_secret, -1}));
        labels.push_back(lab);
    }
    WatermarkedSamples out;
    out.images = torch::cat(images);
    if (with_clean) out.clean_images = torch::cat(clean);
    out.truth = torch::cat(truth).contiguous();
    out.labels = torch::cat(labels);
    return out;
}

torch::Tensor extract_bits(watermark::SecretDecoder& decoder, const torch::Tensor& images) {
    torch::NoGradGuard g;
    std::vector<torch::Tensor> parts;
    for (std::int64_t i = 0; i < images.size(0); i += 256) {
        parts.push_back(watermark::threshold_bits(
            watermark::decode_secret(images.slice(0, i, std::min(i + 256, images.size(0))), decoder)));
    }
    return torch::cat(parts);
}

Score score_rows(const torch::Tensor& extracted, const torch::Tensor& truth, double target_fpr) {
    require_same_shape(extracted, truth, "score_rows");
    Score s;
    const int k = static_cast<int>(truth.size(1));
    s.n = truth.size(0);
    s.tau = detection::threshold_for_fpr(k, target_fpr);
    auto matched = (extracted.to(torch::kFloat32) == truth.to(torch::kFloat32)).to(torch::kLong).sum(1);
    s.bit_acc = matched.to(torch::kFloat64).mean().item<double>() / k;
    s.tpr = (matched > s.tau).to(torch::kFloat64).mean().item<double>();
    return s;
}

Score score_images(watermark::SecretDecoder& decoder, const torch::Tensor& images, const torch::Tensor& truth,
                   double target_fpr) {
    return score_rows(extract_bits(decoder, images), truth, target_fpr);
}

double drift(const torch::Tensor& a, const torch::Tensor& b, const watermark::PerceptualProxy& proxy) {
    require_same_shape(a, b, "drift");
    torch::NoGradGuard g;
    double mse = (a - b).pow(2).mean().item<double>();
    double perceptual = 0.0;
    for (std::int64_t i = 0; i < a.size(0); i += 256) {
        auto j = std::min(i + 256, a.size(0));
        perceptual += proxy.distance(a.slice(0, i, j), b.slice(0, i, j)).sum().item<double>();
    }
    return mse + perceptual / static_cast<double>(a.size(0));
}

}  // namespace wmlora::harness
