#pragma once

#include "wmlora/diffusion/schedule.hpp"
#include "wmlora/diffusion/unet.hpp"

#include <functional>
#include <string_view>

namespace wmlora::diffusion {

/// eps(z_t, t, labels): t is a float tensor (N), labels int64 (N).
using NoisePredictor = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&, const torch::Tensor&)>;

enum class SamplerKind { ddim, ancestral };

SamplerKind parse_sampler_kind(std::string_view name);
std::string to_string(SamplerKind kind);

struct SampleOptions {
    SamplerKind kind = SamplerKind::ddim;
    int steps = 25;
    double guidance_scale = 7.5;
    std::uint64_t seed = 0;
};

/// eps_u + scale * (eps_c - eps_u).
torch::Tensor cfg_combine(const torch::Tensor& eps_cond, const torch::Tensor& eps_uncond, double guidance_scale);

/// Guided prediction from one batched model call over [cond; uncond].
/// A guidance scale of exactly 1 skips the unconditional branch.
torch::Tensor cfg_noise_prediction(UNet& model, const torch::Tensor& z_t, const torch::Tensor& t,
                                   const torch::Tensor& labels, double guidance_scale,
                                   const lora::LoraRuntime* rt = nullptr);

NoisePredictor guided_predictor(UNet& model, double guidance_scale, const lora::LoraRuntime* rt = nullptr);

/// Descending timestep sequence for a `steps`-step sampler starting from `t_start`:
/// t_k = floor(k * t_start / steps), k = steps..1.
std::vector<int> timestep_sequence(int t_start, int steps);

/// One DDIM update from t to t_prev (t_prev = 0 means the clean latent).
/// `eta` = 0 is deterministic DDIM, `eta` = 1 the ancestral (DDPM-like) step.
torch::Tensor ddim_step(const torch::Tensor& z_t, const torch::Tensor& eps, int t, int t_prev, double eta,
                        const DiffusionSchedule& sched, const torch::Tensor& noise);

/// Runs the reverse process from `z_start` at timestep `t_start` down to 0.
torch::Tensor reverse_from(const NoisePredictor& predict, const DiffusionSchedule& sched, torch::Tensor z_start,
                           int t_start, const torch::Tensor& labels, const SampleOptions& opts);

/// Full sampling from pure noise of shape (N, C, h, w), N = labels.size(0).
/// Deterministic in (opts, labels, shape).
torch::Tensor sample(const NoisePredictor& predict, const DiffusionSchedule& sched, const torch::Tensor& labels,
                     std::vector<std::int64_t> latent_shape, const SampleOptions& opts);

}  // namespace wmlora::diffusion
