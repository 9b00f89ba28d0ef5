#include "wmlora/lora/ppft.hpp"

#include "wmlora/image_io.hpp"

#include <cmath>
#include <deque>
#include <numeric>

namespace wmlora::lora {

namespace F = torch::nn::functional;

Objective parse_objective(std::string_view name) {
    if (name == "ppft") return Objective::ppft;
    if (name == "naive") return Objective::naive;
    throw ConfigError("unknown objective '" + std::string(name) + "' (ppft|naive)");
}

std::string to_string(Objective o) { return o == Objective::ppft ? "ppft" : "naive"; }

torch::Tensor ppft_loss(const diffusion::NoisePredictor& theta, const diffusion::NoisePredictor& frozen,
                        const torch::Tensor& z0, const torch::Tensor& delta_zw, const torch::Tensor& t,
                        const torch::Tensor& eps, const torch::Tensor& labels, const diffusion::DiffusionSchedule& sched) {
    require_same_shape(z0, eps, "ppft_loss");
    auto zw = watermark::embed_latent(z0, delta_zw);
    auto zt_shifted = diffusion::forward_diffuse(zw, t, eps, sched);
    auto tf = t.to(torch::kFloat32);
    torch::Tensor target;
    {
        torch::NoGradGuard g;
        target = frozen(diffusion::forward_diffuse(z0, t, eps, sched), tf, labels);
    }
    return (theta(zt_shifted, tf, labels) - target).pow(2).mean();
}

torch::Tensor naive_loss(const diffusion::NoisePredictor& theta, const torch::Tensor& z0, const torch::Tensor& delta_zw,
                         const torch::Tensor& t, const torch::Tensor& eps, const torch::Tensor& labels,
                         const diffusion::DiffusionSchedule& sched) {
    auto zt = diffusion::forward_diffuse(watermark::embed_latent(z0, delta_zw), t, eps, sched);
    return diffusion::diffusion_loss(theta(zt, t.to(torch::kFloat32), labels), eps);
}

nlohmann::json PpftConfig::to_json() const {
    return {{"objective", to_string(objective)},
            {"rank", rank},
            {"init", to_string(init)},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"batch_size", batch_size},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"train_alpha", train_alpha},
            {"deploy_alpha", deploy_alpha},
            {"p_uncond", p_uncond},
            {"grad_clip", grad_clip},
            {"seed", seed}};
}

PpftConfig PpftConfig::from_json(const nlohmann::json& j) {
    PpftConfig c;
    if (j.contains("objective")) c.objective = parse_objective(j.at("objective").get<std::string>());
    if (j.contains("init")) c.init = parse_mapper_init(j.at("init").get<std::string>());
    c.rank = j.value("rank", c.rank);
    c.epochs = j.value("epochs", c.epochs);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.train_alpha = j.value("train_alpha", c.train_alpha);
    c.deploy_alpha = j.value("deploy_alpha", c.deploy_alpha);
    c.p_uncond = j.value("p_uncond", c.p_uncond);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    if (c.rank < 1 || c.batch_size < 1 || c.lr <= 0.0) throw ConfigError("ppft: rank, batch_size, lr must be positive");
    return c;
}

namespace {

// Freezes every parameter of `m` and returns the previous flags.
std::vector<bool> freeze(torch::nn::Module& m) {
    std::vector<bool> flags;
    for (auto& p : m.parameters()) {
        flags.push_back(p.requires_grad());
        p.requires_grad_(false);
    }
    return flags;
}

void restore(torch::nn::Module& m, const std::vector<bool>& flags) {
    auto params = m.parameters();
    for (std::size_t i = 0; i < params.size() && i < flags.size(); ++i) params[i].requires_grad_(flags[i]);
}

}  // namespace

PpftResult ppft_train(diffusion::UNet& base, watermark::SecretEncoder& encoder, WatermarkLoRA& lora,
                      const PpftData& data, const diffusion::DiffusionSchedule& sched, const PpftConfig& cfg,
                      const diffusion::ProgressFn& progress) {
    if (data.size() == 0) throw ConfigError("ppft_train: empty dataset");
    if (data.labels.size(0) != data.size()) throw ShapeError("ppft_train: latents/labels length mismatch");
    if (lora.payload_bits() != encoder->config().payload_bits) {
        throw ConfigError("ppft_train: LoRA mapper has " + std::to_string(lora.payload_bits()) +
                          " bits, secret encoder " + std::to_string(encoder->config().payload_bits));
    }
    if (lora.mapper().init == MapperInit::orthogonal && lora.rank() < lora.payload_bits()) {
        throw ConfigError("ppft_train: orthogonal mapper needs rank >= payload bits");
    }
    const auto n = data.size();
    const auto steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total = cfg.max_steps > 0 ? cfg.max_steps : steps_per_epoch * cfg.epochs;

    auto gen = make_generator(cfg.seed);
    auto base_flags = freeze(*base);
    auto enc_flags = freeze(*encoder);
    base->eval();
    encoder->eval();
    lora.set_requires_grad(true);
    torch::optim::AdamW opt(lora.parameters(), torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));

    const auto l = lora.payload_bits();
    const auto null = base->config().null_label();
    auto frozen = [&](const torch::Tensor& z, const torch::Tensor& t, const torch::Tensor& c) {
        return base->forward(z, t, c);
    };

    PpftResult res;
    std::deque<double> recent;
    NamedTensors last_good;
    auto keep_good = [&] {
        last_good = lora.to_checkpoint().tensors;
    };
    keep_good();
    for (std::int64_t step = 0; step < total; ++step) {
        auto idx = torch::randint(0, n, {cfg.batch_size}, gen, torch::kLong);
        auto z0 = data.latents.index_select(0, idx);
        auto c = diffusion::drop_labels(data.labels.index_select(0, idx), cfg.p_uncond, null, gen);
        auto bits = watermark::random_bits(cfg.batch_size, l, gen);
        torch::Tensor dzw;
        {
            torch::NoGradGuard g;
            dzw = encoder->forward(bits);
        }
        auto t = diffusion::sample_timesteps(cfg.batch_size, sched.T, gen);
        auto eps = torch::randn(z0.sizes(), gen);
        auto rt = lora.runtime(bits, cfg.train_alpha);
        diffusion::NoisePredictor theta = [&](const torch::Tensor& z, const torch::Tensor& tt, const torch::Tensor& cc) {
            return base->forward(z, tt, cc, &rt);
        };
        auto loss = cfg.objective == Objective::ppft ? ppft_loss(theta, frozen, z0, dzw, t, eps, c, sched)
                                                     : naive_loss(theta, z0, dzw, t, eps, c, sched);
        opt.zero_grad();
        loss.backward();
        if (cfg.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(lora.parameters(), cfg.grad_clip);
        opt.step();
        double v = loss.item<double>();
        if (!std::isfinite(v)) {
            if (cfg.recovery_path) {
                Checkpoint ck;
                ck.tensors = last_good;
                ck.metadata = {{"recovery", "ppft diverged"}, {"step", step}};
                save_checkpoint(ck, *cfg.recovery_path);
            }
            restore(*base, base_flags);
            restore(*encoder, enc_flags);
            throw TrainingError("ppft diverged (non-finite loss) at step " + std::to_string(step) + ", lr " +
                                std::to_string(cfg.lr) + ", objective " + to_string(cfg.objective));
        }
        if (step % 500 == 0) keep_good();
        res.loss_curve.push_back(v);
        recent.push_back(v);
        if (recent.size() > 100) recent.pop_front();
        if (progress) progress(step, v);
        res.steps = step + 1;
    }
    lora.set_requires_grad(false);
    restore(*base, base_flags);
    restore(*encoder, enc_flags);
    res.final_loss = recent.empty() ? 0.0 : std::accumulate(recent.begin(), recent.end(), 0.0) / recent.size();
    return res;
}

DecoderFinetuneResult decoder_finetune(watermark::SecretDecoder& decoder, const WatermarkedSampler& sampler,
                                       const DecoderFinetuneConfig& cfg) {
    if (cfg.latent_sizes.empty()) throw ConfigError("decoder_finetune: empty size list");
    auto gen = make_generator(cfg.seed);
    decoder->train();
    torch::optim::Adam opt(decoder->parameters(), torch::optim::AdamOptions(cfg.lr));
    const auto l = decoder->config().payload_bits;
    const auto size = decoder->config().image_size;
    std::vector<double> bces;
    for (int step = 0; step < cfg.steps; ++step) {
        auto pick = torch::randint(0, static_cast<std::int64_t>(cfg.latent_sizes.size()), {1}, gen).item<std::int64_t>();
        auto bits = watermark::random_bits(cfg.batch_size, l, gen);
        torch::Tensor images;
        {
            torch::NoGradGuard g;
            images = resize_bilinear(sampler(bits, cfg.latent_sizes[static_cast<std::size_t>(pick)]), size, size);
        }
        auto loss = F::binary_cross_entropy_with_logits(decoder->forward(images), bits);
        opt.zero_grad();
        loss.backward();
        opt.step();
        double v = loss.item<double>();
        if (!std::isfinite(v)) throw TrainingError("decoder fine-tune diverged at step " + std::to_string(step));
        bces.push_back(v);
    }
    decoder->eval();
    DecoderFinetuneResult r;
    if (bces.empty()) return r;
    auto k = std::min<std::size_t>(10, bces.size());
    r.first_bce = std::accumulate(bces.begin(), bces.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / k;
    r.last_bce = std::accumulate(bces.end() - static_cast<std::ptrdiff_t>(k), bces.end(), 0.0) / k;
    return r;
}

}  // namespace wmlora::lora
