#pragma once

#include "wmlora/diffusion/autoencoder.hpp"
#include "wmlora/diffusion/schedule.hpp"
#include "wmlora/diffusion/toy_dataset.hpp"
#include "wmlora/diffusion/unet.hpp"

#include <filesystem>
#include <functional>
#include <optional>

namespace wmlora::diffusion {

/// Progress callback: (step, loss).
using ProgressFn = std::function<void(std::int64_t, double)>;

struct AutoencoderTrainConfig {
    int epochs = 20;
    int batch_size = 64;
    double lr = 2e-3;
    double heldout_fraction = 0.1;
    std::uint64_t seed = 0;
    /// Written when training diverges (last finite parameters).
    std::optional<std::filesystem::path> recovery_path;

    static AutoencoderTrainConfig from_json(const nlohmann::json& j);
};

struct AutoencoderTrainResult {
    double heldout_mse = 0.0;
    double latent_scale = 1.0;
    std::int64_t steps = 0;
};

AutoencoderTrainResult train_autoencoder(Autoencoder& model, const LabeledImages& data,
                                         const AutoencoderTrainConfig& cfg, const ProgressFn& progress = {});

/// Per-pixel MSE of decode(encode(x)) over `images`, evaluated in batches.
double reconstruction_mse(Autoencoder& model, const torch::Tensor& images);

/// Encodes `images` in batches without gradients.
torch::Tensor encode_all(Autoencoder& model, const torch::Tensor& images, std::int64_t batch = 256);
torch::Tensor decode_all(Autoencoder& model, const torch::Tensor& latents, std::int64_t batch = 256);

/// Mean squared error between predicted and true noise (the simple diffusion loss).
torch::Tensor diffusion_loss(const torch::Tensor& eps_pred, const torch::Tensor& eps);

/// Replaces each label by `null_label` with probability `p_uncond`.
torch::Tensor drop_labels(const torch::Tensor& labels, double p_uncond, std::int64_t null_label,
                          torch::Generator& gen);

/// Uniform integer timesteps in {1..T}.
torch::Tensor sample_timesteps(std::int64_t n, int T, torch::Generator& gen);

struct DiffusionTrainConfig {
    int steps = 6000;
    int batch_size = 64;
    double lr = 1e-3;
    double p_uncond = 0.1;
    double ema_decay = 0.999;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> recovery_path;

    static DiffusionTrainConfig from_json(const nlohmann::json& j);
};

struct DiffusionTrainResult {
    double final_loss = 0.0;  // mean over the last 200 steps
    std::int64_t steps = 0;
};

/// Trains eps(z_t, t, c) on `latents`/`labels` with the simple diffusion loss and
/// label dropout. On return the model holds the EMA weights.
DiffusionTrainResult train_base_diffusion(UNet& model, const torch::Tensor& latents, const torch::Tensor& labels,
                                          const DiffusionSchedule& sched, const DiffusionTrainConfig& cfg,
                                          const ProgressFn& progress = {});

}  // namespace wmlora::diffusion
