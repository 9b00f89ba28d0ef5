#include "wmlora/diffusion/schedule.hpp"

#include <cmath>
#include <numbers>

namespace wmlora::diffusion {

ScheduleKind parse_schedule_kind(std::string_view name) {
    if (name == "linear") return ScheduleKind::linear;
    if (name == "cosine") return ScheduleKind::cosine;
    throw ConfigError("unknown schedule kind '" + std::string(name) + "'");
}

std::string to_string(ScheduleKind kind) {
    return kind == ScheduleKind::linear ? "linear" : "cosine";
}

double DiffusionSchedule::alpha_bar(int t) const {
    if (t < 0 || t > T) throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t - 1)];
}

torch::Tensor DiffusionSchedule::alpha_bar(const torch::Tensor& t) const {
    std::vector<double> table(static_cast<std::size_t>(T) + 1);
    table[0] = 1.0;
    for (int i = 1; i <= T; ++i) table[static_cast<std::size_t>(i)] = alpha_bars[static_cast<std::size_t>(i - 1)];
    auto lut = torch::tensor(table, torch::kFloat64);
    auto idx = t.to(torch::kLong);
    if (idx.numel() > 0 && (idx.min().item<std::int64_t>() < 0 || idx.max().item<std::int64_t>() > T)) {
        throw ConfigError("timestep tensor outside [0, T]");
    }
    return lut.index_select(0, idx.flatten()).view(idx.sizes()).to(torch::kFloat32);
}

DiffusionSchedule schedule_from_betas(std::vector<double> betas) {
    if (betas.size() < 2) throw ConfigError("schedule needs T >= 2");
    DiffusionSchedule s;
    s.T = static_cast<int>(betas.size());
    s.betas = std::move(betas);
    double running = 1.0;
    double prev = 1.0;
    for (double b : s.betas) {
        if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta values must lie in (0,1)");
        double a = 1.0 - b;
        running *= a;
        s.alphas.push_back(a);
        s.alpha_bars.push_back(running);
        s.posterior_vars.push_back((1.0 - prev) / (1.0 - running) * b);
        prev = running;
    }
    return s;
}

DiffusionSchedule make_schedule(int T, ScheduleKind kind, double beta_start, double beta_end) {
    if (T < 2) throw ConfigError("schedule needs T >= 2, got " + std::to_string(T));
    std::vector<double> betas(static_cast<std::size_t>(T));
    if (kind == ScheduleKind::linear) {
        for (int i = 0; i < T; ++i) {
            betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (T - 1);
        }
    } else {
        constexpr double s = 0.008;
        auto f = [&](double t) {
            double x = (t / T + s) / (1.0 + s) * std::numbers::pi / 2.0;
            return std::cos(x) * std::cos(x);
        };
        for (int i = 0; i < T; ++i) {
            double b = 1.0 - f(i + 1) / f(i);
            betas[static_cast<std::size_t>(i)] = std::clamp(b, 1e-8, 0.999);
        }
    }
    return schedule_from_betas(std::move(betas));
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, int t, const torch::Tensor& eps,
                              const DiffusionSchedule& sched) {
    require_same_shape(z0, eps, "forward_diffuse");
    if (t < 1 || t > sched.T) throw ConfigError("forward_diffuse: t must lie in [1, T]");
    double ab = sched.alpha_bar(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_diffuse(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                              const DiffusionSchedule& sched) {
    require_same_shape(z0, eps, "forward_diffuse");
    if (t.dim() != 1 || t.size(0) != z0.size(0)) throw ShapeError("forward_diffuse: need one timestep per sample");
    std::vector<std::int64_t> view(static_cast<std::size_t>(z0.dim()), 1);
    view[0] = z0.size(0);
    auto ab = sched.alpha_bar(t).to(z0.dtype()).view(view);
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps;
}

}  // namespace wmlora::diffusion
