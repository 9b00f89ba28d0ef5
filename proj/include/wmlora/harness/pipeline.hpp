#pragma once

#include "wmlora/diffusion/autoencoder.hpp"
#include "wmlora/diffusion/schedule.hpp"
#include "wmlora/diffusion/toy_dataset.hpp"
#include "wmlora/diffusion/unet.hpp"
#include "wmlora/lora/ppft.hpp"
#include "wmlora/watermark/codec.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <optional>

namespace wmlora::harness {

using LogFn = std::function<void(const std::string&)>;

struct CodecBundle {
    watermark::SecretEncoder encoder{nullptr};
    watermark::SecretDecoder decoder{nullptr};
    nlohmann::json info;
};

struct LoraBundle {
    lora::WatermarkLoRA lora;
    nlohmann::json info;
};

/// Lazily trains (or loads from the artifact cache) every model an experiment
/// needs. Each artifact is keyed by the hash of its own config section plus
/// the keys of its upstream artifacts, so changing one stage only retrains
/// that stage and what depends on it. Cached checkpoints are never rewritten.
class Pipeline {
public:
    Pipeline(nlohmann::json cfg, std::filesystem::path cache_dir, LogFn log = {});

    const nlohmann::json& config() const { return cfg_; }
    std::string config_hash() const;
    const std::filesystem::path& cache_dir() const { return cache_dir_; }

    const diffusion::LabeledImages& train_set();
    const diffusion::LabeledImages& heldout_set();
    const diffusion::DiffusionSchedule& schedule() const { return sched_; }

    diffusion::Autoencoder autoencoder();
    diffusion::UNet base_model();
    /// Untrained U-Net with the configured architecture.
    diffusion::UNet make_unet() const;

    /// Stage-1 encoder/decoder for `seed`; `overrides` patch the stage1 section.
    CodecBundle codec(std::uint64_t seed, const nlohmann::json& overrides = nlohmann::json::object());

    /// Latents and labels of images sampled from the base model.
    const lora::PpftData& ppft_data();

    /// Watermark LoRA trained against the codec of the same seed.
    LoraBundle watermark_lora(std::uint64_t seed, const nlohmann::json& overrides = nlohmann::json::object());

    std::string artifact_key(const std::string& stage) const;

private:
    /// Training covers for stage 1: the toy set plus `generated` decoded base-model samples.
    diffusion::LabeledImages stage1_covers(std::int64_t generated);
    std::filesystem::path artifact_path(const std::string& stage, const std::string& key) const;
    void log(const std::string& msg) const;
    std::string autoencoder_key() const;
    std::string base_key() const;
    std::string codec_key(std::uint64_t seed, const nlohmann::json& overrides) const;
    std::string ppft_data_key() const;
    std::string lora_key(std::uint64_t seed, const nlohmann::json& overrides) const;

    nlohmann::json cfg_;
    std::filesystem::path cache_dir_;
    LogFn log_;
    diffusion::DiffusionSchedule sched_;
    std::optional<diffusion::LabeledImages> train_;
    std::optional<diffusion::LabeledImages> heldout_;
    diffusion::Autoencoder ae_{nullptr};
    diffusion::UNet base_{nullptr};
    std::optional<lora::PpftData> ppft_data_;
};

}  // namespace wmlora::harness
