#include "wmlora/harness/pipeline.hpp"

#include "wmlora/checkpoint.hpp"
#include "wmlora/config.hpp"
#include "wmlora/diffusion/train.hpp"
#include "wmlora/harness/config.hpp"
#include "wmlora/harness/evaluate.hpp"
#include "wmlora/watermark/stage1.hpp"

#include <chrono>

namespace wmlora::harness {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

NamedTensors with_prefix(const NamedTensors& values, const std::string& prefix) {
    NamedTensors out;
    for (const auto& [k, v] : values) out[prefix + k] = v;
    return out;
}

NamedTensors strip_prefix(const NamedTensors& values, const std::string& prefix) {
    NamedTensors out;
    for (const auto& [k, v] : values) {
        if (k.rfind(prefix, 0) == 0) out[k.substr(prefix.size())] = v;
    }
    return out;
}

}  // namespace

Pipeline::Pipeline(nlohmann::json cfg, std::filesystem::path cache_dir, LogFn log)
    : cfg_(std::move(cfg)), cache_dir_(std::move(cache_dir)), log_(std::move(log)) {
    const auto& s = section(cfg_, "schedule");
    sched_ = diffusion::make_schedule(get_or(s, "T", 1000), diffusion::parse_schedule_kind(get_or<std::string>(s, "kind", "linear")));
    std::filesystem::create_directories(cache_dir_);
}

std::string Pipeline::config_hash() const { return wmlora::config_hash(cfg_); }

void Pipeline::log(const std::string& msg) const {
    if (log_) log_(msg);
}

std::filesystem::path Pipeline::artifact_path(const std::string& stage, const std::string& key) const {
    return cache_dir_ / (stage + "-" + key + ".safetensors");
}

const diffusion::LabeledImages& Pipeline::train_set() {
    if (!train_) {
        const auto& d = section(cfg_, "dataset");
        const auto count = get_or<std::int64_t>(d, "count", 6000);
        const auto heldout = get_or<std::int64_t>(d, "heldout", 1000);
        if (heldout >= count) throw ConfigError("dataset: heldout must be smaller than count");
        auto all = diffusion::make_toy_dataset(count, get_or<std::uint64_t>(d, "seed", 1234), get_or<std::int64_t>(d, "size", 32));
        train_ = all.slice(0, count - heldout);
        heldout_ = all.slice(count - heldout, count);
    }
    return *train_;
}

const diffusion::LabeledImages& Pipeline::heldout_set() {
    train_set();
    return *heldout_;
}

std::string Pipeline::autoencoder_key() const {
    return wmlora::config_hash({{"dataset", section(cfg_, "dataset")}, {"autoencoder", section(cfg_, "autoencoder")}});
}

std::string Pipeline::base_key() const {
    return wmlora::config_hash({{"ae", autoencoder_key()},
                                {"unet", section(cfg_, "unet")},
                                {"schedule", section(cfg_, "schedule")},
                                {"diffusion", section(cfg_, "diffusion")}});
}

std::string Pipeline::codec_key(std::uint64_t seed, const nlohmann::json& overrides) const {
    auto stage1 = merged(section(cfg_, "stage1"), overrides);
    nlohmann::json parts{{"ae", autoencoder_key()}, {"codec", section(cfg_, "codec")}, {"stage1", stage1}, {"seed", seed}};
    if (get_or<std::int64_t>(stage1, "generated_covers", 0) > 0) parts["covers"] = ppft_data_key();
    return wmlora::config_hash(parts);
}

std::string Pipeline::ppft_data_key() const {
    return wmlora::config_hash({{"base", base_key()}, {"ppft_data", section(cfg_, "ppft_data")}});
}

std::string Pipeline::lora_key(std::uint64_t seed, const nlohmann::json& overrides) const {
    return wmlora::config_hash({{"codec", codec_key(seed, nlohmann::json::object())},
                                {"data", ppft_data_key()},
                                {"ppft", merged(section(cfg_, "ppft"), overrides)},
                                {"seed", seed}});
}

std::string Pipeline::artifact_key(const std::string& stage) const {
    if (stage == "autoencoder") return autoencoder_key();
    if (stage == "base") return base_key();
    if (stage == "ppft_data") return ppft_data_key();
    throw ConfigError("unknown artifact stage '" + stage + "'");
}

diffusion::Autoencoder Pipeline::autoencoder() {
    if (ae_) return ae_;
    const auto& s = section(cfg_, "autoencoder");
    diffusion::Autoencoder ae(diffusion::AutoencoderConfig::from_json(section(s, "model")));
    const auto path = artifact_path("autoencoder", autoencoder_key());
    if (std::filesystem::exists(path)) {
        load_into(*ae, load_checkpoint(path).tensors);
    } else {
        auto tc = diffusion::AutoencoderTrainConfig::from_json(section(s, "train"));
        tc.recovery_path = cache_dir_ / "autoencoder-recovery.safetensors";
        log("training autoencoder");
        auto t0 = std::chrono::steady_clock::now();
        auto res = diffusion::train_autoencoder(ae, train_set(), tc);
        Checkpoint ck;
        ck.tensors = snapshot(*ae);
        ck.metadata = {{"kind", "autoencoder"},
                       {"heldout_mse", res.heldout_mse},
                       {"latent_scale", res.latent_scale},
                       {"seconds", seconds_since(t0)},
                       {"config", s}};
        save_checkpoint(ck, path);
        log("autoencoder heldout mse " + std::to_string(res.heldout_mse));
    }
    ae->eval();
    for (auto& p : ae->parameters()) p.requires_grad_(false);
    ae_ = ae;
    return ae_;
}

diffusion::UNet Pipeline::make_unet() const {
    return diffusion::UNet(diffusion::UNetConfig::from_json(section(cfg_, "unet")));
}

diffusion::UNet Pipeline::base_model() {
    if (base_) return base_;
    auto model = make_unet();
    const auto path = artifact_path("base", base_key());
    if (std::filesystem::exists(path)) {
        load_into(*model, load_checkpoint(path).tensors);
    } else {
        auto ae = autoencoder();
        auto latents = diffusion::encode_all(ae, train_set().images);
        auto tc = diffusion::DiffusionTrainConfig::from_json(section(cfg_, "diffusion"));
        tc.recovery_path = cache_dir_ / "base-recovery.safetensors";
        log("training base diffusion model (" + std::to_string(tc.steps) + " steps)");
        auto t0 = std::chrono::steady_clock::now();
        auto res = diffusion::train_base_diffusion(model, latents, train_set().labels, sched_, tc,
                                                   [this](std::int64_t step, double loss) {
                                                       if (step % 1000 == 0) {
                                                           log("  base step " + std::to_string(step) + " loss " +
                                                               std::to_string(loss));
                                                       }
                                                   });
        Checkpoint ck;
        ck.tensors = snapshot(*model);
        ck.metadata = {{"kind", "unet"},
                       {"final_loss", res.final_loss},
                       {"seconds", seconds_since(t0)},
                       {"unet", section(cfg_, "unet")},
                       {"config", section(cfg_, "diffusion")}};
        save_checkpoint(ck, path);
    }
    model->eval();
    for (auto& p : model->parameters()) p.requires_grad_(false);
    base_ = model;
    return base_;
}

CodecBundle Pipeline::codec(std::uint64_t seed, const nlohmann::json& overrides) {
    auto cc = watermark::CodecConfig::from_json(section(cfg_, "codec"));
    CodecBundle b{watermark::SecretEncoder(cc), watermark::SecretDecoder(cc), {}};
    const auto key = codec_key(seed, overrides);
    const auto path = artifact_path("codec", key);
    if (std::filesystem::exists(path)) {
        auto ck = load_checkpoint(path);
        load_into(*b.encoder, strip_prefix(ck.tensors, "encoder."));
        load_into(*b.decoder, strip_prefix(ck.tensors, "decoder."));
        b.info = ck.metadata.value("info", nlohmann::json::object());
    } else {
        auto sc = watermark::Stage1Config::from_json(merged(section(cfg_, "stage1"), overrides));
        sc.seed = seed;
        sc.metrics_path = artifact_path("codec", key).replace_extension(".metrics.jsonl");
        if (std::filesystem::exists(*sc.metrics_path)) std::filesystem::remove(*sc.metrics_path);
        auto ae = autoencoder();
        const auto covers = stage1_covers(get_or<std::int64_t>(merged(section(cfg_, "stage1"), overrides),
                                                               "generated_covers", 0));
        log("training stage-1 codec (seed " + std::to_string(seed) + ")");
        auto t0 = std::chrono::steady_clock::now();
        auto res = watermark::stage1_train(ae, b.encoder, b.decoder, covers, heldout_set(), sc,
                                           [this](std::int64_t step, const nlohmann::json& rec) {
                                               if (step % 500 == 0) log("  stage1 " + rec.dump());
                                           });
        b.info = {{"warmstart_iters", res.warmstart_iters},
                  {"steps", res.steps},
                  {"final_bce", res.final_bce},
                  {"heldout_acc", res.heldout_acc},
                  {"seconds", seconds_since(t0)},
                  {"seed", seed},
                  {"config_hash", key}};
        Checkpoint ck;
        auto enc = with_prefix(snapshot(*b.encoder), "encoder.");
        auto dec = with_prefix(snapshot(*b.decoder), "decoder.");
        ck.tensors.insert(enc.begin(), enc.end());
        ck.tensors.insert(dec.begin(), dec.end());
        ck.metadata = {{"kind", "secret_codec"}, {"codec", cc.to_json()}, {"stage1", sc.to_json()}, {"info", b.info}};
        save_checkpoint(ck, path);
        log("stage-1 heldout accuracy " + std::to_string(res.heldout_acc));
    }
    b.encoder->eval();
    b.decoder->eval();
    for (auto& p : b.encoder->parameters()) p.requires_grad_(false);
    for (auto& p : b.decoder->parameters()) p.requires_grad_(false);
    return b;
}

diffusion::LabeledImages Pipeline::stage1_covers(std::int64_t generated) {
    if (generated <= 0) return train_set();
    const auto& data = ppft_data();
    if (generated > data.size()) throw ConfigError("stage1: generated_covers exceeds the sampled set");
    auto ae = autoencoder();
    torch::Tensor images;
    {
        torch::NoGradGuard g;
        std::vector<torch::Tensor> parts;
        for (std::int64_t i = 0; i < generated; i += 256) {
            parts.push_back(ae->decode(data.latents.slice(0, i, std::min(i + 256, generated))));
        }
        images = torch::cat(parts);
    }
    return {torch::cat({train_set().images, images}), torch::cat({train_set().labels, data.labels.slice(0, 0, generated)})};
}

const lora::PpftData& Pipeline::ppft_data() {
    if (ppft_data_) return *ppft_data_;
    const auto path = artifact_path("ppft_data", ppft_data_key());
    if (std::filesystem::exists(path)) {
        auto ck = load_checkpoint(path);
        ppft_data_ = lora::PpftData{ck.tensors.at("latents"), ck.tensors.at("labels")};
        return *ppft_data_;
    }
    const auto& s = section(cfg_, "ppft_data");
    const auto count = get_or<std::int64_t>(s, "count", 10000);
    diffusion::SampleOptions opts;
    opts.steps = get_or(s, "steps", 25);
    opts.guidance_scale = get_or(s, "guidance_scale", 7.5);
    opts.seed = get_or<std::uint64_t>(s, "seed", 13);
    auto base = base_model();
    auto ae = autoencoder();
    log("sampling " + std::to_string(count) + " fine-tuning images from the base model");
    auto labels = random_labels(count, base->config().num_classes, opts.seed);
    auto images = generate_images(base, ae, sched_, labels, opts, 8);
    lora::PpftData data{diffusion::encode_all(ae, images), labels};
    Checkpoint ck;
    ck.tensors = {{"latents", data.latents}, {"labels", data.labels}};
    ck.metadata = {{"kind", "ppft_data"}, {"config", s}};
    save_checkpoint(ck, path);
    ppft_data_ = data;
    return *ppft_data_;
}

LoraBundle Pipeline::watermark_lora(std::uint64_t seed, const nlohmann::json& overrides) {
    const auto key = lora_key(seed, overrides);
    const auto path = artifact_path("lora", key);
    LoraBundle b;
    if (std::filesystem::exists(path)) {
        auto ck = load_checkpoint(path);
        b.lora = lora::WatermarkLoRA::from_checkpoint(ck);
        b.info = ck.metadata.value("info", nlohmann::json::object());
        return b;
    }
    auto pc = lora::PpftConfig::from_json(merged(section(cfg_, "ppft"), overrides));
    pc.seed = seed;
    pc.recovery_path = cache_dir_ / "lora-recovery.safetensors";
    auto codec_bundle = codec(seed);
    auto base = base_model();
    const auto& data = ppft_data();
    b.lora = lora::WatermarkLoRA::create(base->lora_target_shapes(), pc.rank, codec_bundle.encoder->config().payload_bits,
                                         pc.init, seed, pc.deploy_alpha);
    log("training watermark LoRA (" + lora::to_string(pc.objective) + ", rank " + std::to_string(pc.rank) + ", " +
        lora::to_string(pc.init) + ", seed " + std::to_string(seed) + ")");
    auto t0 = std::chrono::steady_clock::now();
    auto res = lora::ppft_train(base, codec_bundle.encoder, b.lora, data, sched_, pc,
                                [this](std::int64_t step, double loss) {
                                    if (step % 500 == 0) log("  ppft step " + std::to_string(step) + " loss " +
                                                             std::to_string(loss));
                                });
    b.info = {{"steps", res.steps},
              {"final_loss", res.final_loss},
              {"seconds", seconds_since(t0)},
              {"seed", seed},
              {"config_hash", key},
              {"ppft", pc.to_json()}};
    auto ck = b.lora.to_checkpoint();
    ck.metadata["info"] = b.info;
    save_checkpoint(ck, path);
    return b;
}

}  // namespace wmlora::harness
