#pragma once

#include "wmlora/diffusion/sampler.hpp"
#include "wmlora/diffusion/train.hpp"
#include "wmlora/lora/watermark_lora.hpp"
#include "wmlora/watermark/codec.hpp"

#include <filesystem>
#include <functional>
#include <optional>

namespace wmlora::lora {

enum class Objective { ppft, naive };

Objective parse_objective(std::string_view name);
std::string to_string(Objective o);

/// || eps_theta(sqrt(abar) (z0 + dz) + sqrt(1 - abar) eps, t, c)
///    - eps_frozen(sqrt(abar) z0 + sqrt(1 - abar) eps, t, c) ||^2, averaged over elements.
/// The frozen branch runs without gradients.
torch::Tensor ppft_loss(const diffusion::NoisePredictor& theta, const diffusion::NoisePredictor& frozen,
                        const torch::Tensor& z0, const torch::Tensor& delta_zw, const torch::Tensor& t,
                        const torch::Tensor& eps, const torch::Tensor& labels, const diffusion::DiffusionSchedule& sched);

/// Plain diffusion loss on watermarked latents: || eps_theta(z'_t, t, c) - eps ||^2.
torch::Tensor naive_loss(const diffusion::NoisePredictor& theta, const torch::Tensor& z0, const torch::Tensor& delta_zw,
                         const torch::Tensor& t, const torch::Tensor& eps, const torch::Tensor& labels,
                         const diffusion::DiffusionSchedule& sched);

struct PpftConfig {
    Objective objective = Objective::ppft;
    std::int64_t rank = 64;
    MapperInit init = MapperInit::orthogonal;
    int epochs = 30;
    /// If > 0, overrides epochs.
    std::int64_t max_steps = 0;
    int batch_size = 64;
    double lr = 1e-4;
    double weight_decay = 0.0;
    double train_alpha = 1.0;
    double deploy_alpha = 1.05;
    /// Label dropout so the unconditional branch used by guidance also carries the watermark.
    double p_uncond = 0.1;
    double grad_clip = 1.0;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> recovery_path;

    nlohmann::json to_json() const;
    static PpftConfig from_json(const nlohmann::json& j);
};

/// Fine-tuning set: latents of images sampled from the base model with their labels.
struct PpftData {
    torch::Tensor latents;
    torch::Tensor labels;
    std::int64_t size() const { return latents.defined() ? latents.size(0) : 0; }
};

struct PpftResult {
    std::int64_t steps = 0;
    double final_loss = 0.0;  // mean over the last 100 steps
    std::vector<double> loss_curve;
};

/// Trains `lora` (A, B and mapper embeddings) against the frozen `base` and
/// frozen secret encoder. A fresh random secret is drawn for every sample.
/// The base model and the encoder are left bit-identical.
PpftResult ppft_train(diffusion::UNet& base, watermark::SecretEncoder& encoder, WatermarkLoRA& lora,
                      const PpftData& data, const diffusion::DiffusionSchedule& sched, const PpftConfig& cfg,
                      const diffusion::ProgressFn& progress = {});

/// Watermarked images (N,3,H,W) for bit rows (N,l), produced at a given latent size.
using WatermarkedSampler = std::function<torch::Tensor(const torch::Tensor& bits, std::int64_t latent_size)>;

struct DecoderFinetuneConfig {
    int steps = 300;
    int batch_size = 32;
    double lr = 1e-4;
    std::vector<std::int64_t> latent_sizes{8, 10, 12};
    std::uint64_t seed = 0;
};

struct DecoderFinetuneResult {
    double first_bce = 0.0;  // mean over the first 10 steps
    double last_bce = 0.0;   // mean over the last 10 steps
};

/// Fine-tunes only the secret decoder on freshly sampled multi-size watermarked images.
DecoderFinetuneResult decoder_finetune(watermark::SecretDecoder& decoder, const WatermarkedSampler& sampler,
                                       const DecoderFinetuneConfig& cfg);

}  // namespace wmlora::lora
