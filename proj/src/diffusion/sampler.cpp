#include "wmlora/diffusion/sampler.hpp"

#include <cmath>

namespace wmlora::diffusion {

SamplerKind parse_sampler_kind(std::string_view name) {
    if (name == "ddim") return SamplerKind::ddim;
    if (name == "ancestral") return SamplerKind::ancestral;
    throw ConfigError("unknown sampler '" + std::string(name) + "'");
}

std::string to_string(SamplerKind kind) {
    return kind == SamplerKind::ddim ? "ddim" : "ancestral";
}

torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double guidance_scale) {
    require_same_shape(eps_cond, eps_uncond, "cfg_combine");
    return eps_uncond + guidance_scale * (eps_cond - eps_uncond);
}

torch::Tensor cfg_noise_prediction(UNet& model, const torch::Tensor& z_t, const torch::Tensor& t,
                                   const torch::Tensor& labels, double guidance_scale,
                                   const lora::LoraRuntime* rt) {
    if (guidance_scale == 1.0) return model->forward(z_t, t, labels, rt);
    auto n = z_t.size(0);
    auto null = torch::full_like(labels, model->config().null_label());
    lora::LoraRuntime doubled;
    if (rt != nullptr) doubled = rt->repeated(2);
    auto eps = model->forward(torch::cat({z_t, z_t}), torch::cat({t, t}), torch::cat({labels, null}),
                              rt ? &doubled : nullptr);
    return cfg_combine(eps.slice(0, 0, n), eps.slice(0, n, 2 * n), guidance_scale);
}

NoisePredictor guided_predictor(UNet& model, double guidance_scale, const lora::LoraRuntime* rt) {
    return [model, guidance_scale, rt](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& c) mutable {
        return cfg_noise_prediction(model, z, t, c, guidance_scale, rt);
    };
}

std::vector<int> timestep_sequence(int t_start, int steps) {
    if (steps < 1) throw ConfigError("sampler needs at least one step");
    if (steps > t_start) throw ConfigError("sampler steps (" + std::to_string(steps) + ") exceed available timesteps (" +
                                           std::to_string(t_start) + ")");
    std::vector<int> ts;
    ts.reserve(static_cast<std::size_t>(steps));
    for (int k = steps; k >= 1; --k) {
        ts.push_back(static_cast<int>((static_cast<std::int64_t>(k) * t_start) / steps));
    }
    return ts;
}

torch::Tensor ddim_step(const torch::Tensor& z_t, const torch::Tensor& eps, int t, int t_prev, double eta,
                        const DiffusionSchedule& sched, const torch::Tensor& noise) {
    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t_prev);
    auto x0 = (z_t - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    double sigma = 0.0;
    if (eta > 0.0) sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    auto out = std::sqrt(ab_prev) * x0 + dir * eps;
    if (sigma > 0.0) out = out + sigma * noise;
    return out;
}

torch::Tensor reverse_from(const NoisePredictor& predict, const DiffusionSchedule& sched, torch::Tensor z_start,
                           int t_start, const torch::Tensor& labels, const SampleOptions& opts) {
    torch::NoGradGuard no_grad;
    if (t_start < 1) return z_start;
    if (t_start > sched.T) throw ConfigError("reverse start beyond schedule length");
    const auto ts = timestep_sequence(t_start, opts.steps);
    const double eta = opts.kind == SamplerKind::ancestral ? 1.0 : 0.0;
    auto gen = make_generator(opts.seed ^ 0x9E3779B97F4A7C15ULL);
    auto z = std::move(z_start);
    const auto n = z.size(0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i];
        const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        auto eps = predict(z, torch::full({n}, static_cast<float>(t)), labels);
        torch::Tensor noise;
        if (eta > 0.0) noise = torch::randn(z.sizes(), gen);
        z = ddim_step(z, eps, t, t_prev, eta, sched, noise);
    }
    return z;
}

torch::Tensor sample(const NoisePredictor& predict, const DiffusionSchedule& sched, const torch::Tensor& labels,
                     std::vector<std::int64_t> latent_shape, const SampleOptions& opts) {
    if (opts.steps > sched.T) throw ConfigError("sampler steps exceed schedule length T");
    latent_shape.insert(latent_shape.begin(), labels.size(0));
    auto gen = make_generator(opts.seed);
    auto z = torch::randn(latent_shape, gen);
    return reverse_from(predict, sched, z, sched.T, labels, opts);
}

}  // namespace wmlora::diffusion
