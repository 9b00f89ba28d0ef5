#pragma once

#include "wmlora/detection/stats.hpp"
#include "wmlora/harness/evaluate.hpp"
#include "wmlora/harness/metrics.hpp"
#include "wmlora/harness/pipeline.hpp"

namespace wmlora::harness {

/// Clean and per-distortion bit accuracy / TPR of the seed's watermarked
/// model, the clean model's accuracy against the same secrets, and drift.
/// Writes robustness.json, robustness.csv, robustness.png and a sample grid.
nlohmann::json run_robustness_sweep(Pipeline& p, std::uint64_t seed, const std::vector<std::string>& distortions,
                                    const std::filesystem::path& out_dir);

struct SamplerCell {
    diffusion::SamplerKind kind = diffusion::SamplerKind::ddim;
    int steps = 25;
    double guidance = 7.5;
    std::string name() const;
};

/// Default grid: ddim-15/25/50 and ancestral-25 at guidance 7.5, plus ddim-25 at guidance 5 and 10.
std::vector<SamplerCell> default_sampler_cells();

/// Bit accuracy per sampler cell. `spread` covers the cells at the default guidance only.
nlohmann::json run_sampler_sweep(Pipeline& p, std::uint64_t seed, const std::vector<SamplerCell>& cells,
                                 const std::filesystem::path& out_dir);

/// Bit accuracy and drift for each merge strength; Spearman(alpha, acc).
nlohmann::json run_alpha_sweep(Pipeline& p, std::uint64_t seed, const std::vector<double>& alphas,
                               const std::filesystem::path& out_dir);

/// Fine-tunes the merged watermarked model on clean data with the plain
/// diffusion loss, logging (step, bit accuracy, drift from the clean base).
nlohmann::json run_finetune_attack(Pipeline& p, std::uint64_t seed, const std::filesystem::path& out_dir,
                                   const nlohmann::json& lora_overrides = nlohmann::json::object());

struct AblationCell {
    std::string name;
    nlohmann::json overrides;
};

/// ppft (main), naive, normal init and the configured ranks.
std::vector<AblationCell> default_ablation_cells(const nlohmann::json& cfg);

/// Bit accuracy and drift per cell at equal step budget.
nlohmann::json run_ablation_suite(Pipeline& p, std::uint64_t seed, const std::vector<AblationCell>& cells,
                                  const std::filesystem::path& out_dir);

/// Stage-1 codecs trained without a region term, with MSE, and with PRVL.
/// Reports PSNR/SSIM of I_w against I_r and the peak-window statistic.
nlohmann::json run_prvl_ablation(Pipeline& p, std::uint64_t seed, const std::filesystem::path& out_dir);

/// Two secrets merged into the base, the two models averaged at `ratio`, and
/// the extracted bit means grouped by the secrets' bit pairs.
nlohmann::json run_collusion_experiment(Pipeline& p, std::uint64_t seed, std::int64_t n_samples, double ratio,
                                        const std::filesystem::path& out_dir);

}  // namespace wmlora::harness
