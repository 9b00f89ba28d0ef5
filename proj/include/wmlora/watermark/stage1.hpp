#pragma once

#include "wmlora/diffusion/autoencoder.hpp"
#include "wmlora/diffusion/toy_dataset.hpp"
#include "wmlora/distortion/distortion.hpp"
#include "wmlora/watermark/codec.hpp"
#include "wmlora/watermark/losses.hpp"

#include <deque>
#include <filesystem>
#include <functional>
#include <optional>

namespace wmlora::watermark {

/// Fidelity term applied between the reference and the watermarked image.
enum class RegionLoss { prvl, mse, none };

RegionLoss parse_region_loss(std::string_view name);
std::string to_string(RegionLoss r);

struct Stage1Config {
    double lambda = 5.0;
    double mu = 0.5;
    std::int64_t prvl_window = 7;
    RegionLoss region_loss = RegionLoss::prvl;
    double warmstart_threshold = 0.1;
    std::size_t warmstart_window = 10;
    int warmstart_max_iters = 20000;
    int epochs = 40;
    int batch_size = 64;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double distortion_prob = 0.5;
    double corner_patch_prob = 0.0;
    /// Full-phase steps over which lambda and mu rise linearly from 0. Lets the
    /// decoder adapt to cover content before the fidelity terms shrink the offset.
    std::int64_t ramp_steps = 0;
    /// With this probability a batch's cover latents are scaled by a per-image
    /// gain drawn from [1, gain_max], mimicking the larger latents of guided samples.
    double gain_prob = 0.0;
    double gain_max = 1.0;
    std::vector<distortion::DistortionSpec> distortions = distortion::train_menu();
    std::uint64_t seed = 0;
    /// JSONL metrics (iteration, phase, bce, perceptual, region, acc).
    std::optional<std::filesystem::path> metrics_path;
    /// Encoder/decoder checkpoint written after every epoch.
    std::optional<std::filesystem::path> checkpoint_path;

    void validate() const;
    nlohmann::json to_json() const;
    static Stage1Config from_json(const nlohmann::json& j);
};

/// True once the trailing window is full and its mean is strictly below `threshold`.
bool warmstart_done(const std::deque<double>& window, std::size_t size, double threshold);

struct Stage1Losses {
    torch::Tensor total;
    torch::Tensor bce;
    torch::Tensor perceptual;
    torch::Tensor region;
    torch::Tensor logits;
};

/// Full objective for one batch: I_w = D(E_s(s) + E(I_o)), optional distortion,
/// BCE on the decoder output plus lambda * perceptual(I_w, I_r) + mu * region(I_r, I_w),
/// with I_r = D(E(I_o)).
Stage1Losses stage1_objective(diffusion::Autoencoder& ae, SecretEncoder& encoder, SecretDecoder& decoder,
                              const PerceptualProxy& proxy, const torch::Tensor& images, const torch::Tensor& bits,
                              const Stage1Config& cfg, torch::Generator& gen);

struct Stage1Result {
    int warmstart_iters = 0;
    std::int64_t steps = 0;
    double final_bce = 0.0;
    double heldout_acc = 0.0;
};

using Stage1Progress = std::function<void(std::int64_t step, const nlohmann::json& record)>;

/// Two-phase training: warm start with BCE on D(E_s(s)) alone until the
/// trailing mean BCE drops below the threshold, then the full objective on
/// natural images. The autoencoder stays frozen.
Stage1Result stage1_train(diffusion::Autoencoder& ae, SecretEncoder& encoder, SecretDecoder& decoder,
                          const diffusion::LabeledImages& train, const diffusion::LabeledImages& heldout,
                          const Stage1Config& cfg, const Stage1Progress& progress = {});

/// Mean bit accuracy of D_s on D(E_s(s) + E(I)) over `images` with one random secret per image.
double stage1_accuracy(diffusion::Autoencoder& ae, SecretEncoder& encoder, SecretDecoder& decoder,
                       const torch::Tensor& images, std::uint64_t seed);

/// Mean bit accuracy of D_s on unwatermarked images against random secrets.
double random_secret_baseline(SecretDecoder& decoder, const torch::Tensor& images, std::uint64_t seed);

}  // namespace wmlora::watermark
