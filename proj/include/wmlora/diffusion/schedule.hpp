#pragma once

#include "wmlora/common.hpp"

#include <string_view>

namespace wmlora::diffusion {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(std::string_view name);
std::string to_string(ScheduleKind kind);

/// Noise schedule over timesteps 1..T. Per-step arrays are stored at index t-1.
///
/// `posterior_vars[t-1]` is the DDPM posterior variance
/// ((1 - abar_{t-1}) / (1 - abar_t)) * beta_t, with abar_0 = 1.
struct DiffusionSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
    std::vector<double> posterior_vars;

    /// abar_t for t in [0, T]; abar_0 = 1.
    double alpha_bar(int t) const;

    /// abar for a tensor of integer timesteps (any shape), as float32.
    torch::Tensor alpha_bar(const torch::Tensor& t) const;
};

/// Linear (beta_start..beta_end) or cosine (Nichol & Dhariwal, s=0.008) schedule.
DiffusionSchedule make_schedule(int T, ScheduleKind kind, double beta_start = 1e-4, double beta_end = 0.02);

/// Schedule from explicit betas, each in (0,1).
DiffusionSchedule schedule_from_betas(std::vector<double> betas);

/// sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps for a single timestep 1 <= t <= T.
torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const torch::Tensor& eps,
                              const DiffusionSchedule& sched);

/// Batched variant: `t` holds one timestep per leading-dim sample.
torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                              const DiffusionSchedule& sched);

}  // namespace wmlora::diffusion
