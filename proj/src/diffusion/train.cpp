#include "wmlora/diffusion/train.hpp"

#include "wmlora/checkpoint.hpp"

#include <cmath>
#include <deque>
#include <numeric>

namespace wmlora::diffusion {

AutoencoderTrainConfig AutoencoderTrainConfig::from_json(const nlohmann::json& j) {
    AutoencoderTrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.heldout_fraction = j.value("heldout_fraction", c.heldout_fraction);
    c.seed = j.value("seed", c.seed);
    return c;
}

DiffusionTrainConfig DiffusionTrainConfig::from_json(const nlohmann::json& j) {
    DiffusionTrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.p_uncond = j.value("p_uncond", c.p_uncond);
    c.ema_decay = j.value("ema_decay", c.ema_decay);
    c.seed = j.value("seed", c.seed);
    return c;
}

torch::Tensor encode_all(Autoencoder& model, const torch::Tensor& images, std::int64_t batch) {
    torch::NoGradGuard g;
    std::vector<torch::Tensor> parts;
    for (std::int64_t i = 0; i < images.size(0); i += batch) {
        parts.push_back(model->encode(images.slice(0, i, std::min(i + batch, images.size(0)))));
    }
    return torch::cat(parts);
}

torch::Tensor decode_all(Autoencoder& model, const torch::Tensor& latents, std::int64_t batch) {
    torch::NoGradGuard g;
    std::vector<torch::Tensor> parts;
    for (std::int64_t i = 0; i < latents.size(0); i += batch) {
        parts.push_back(model->decode(latents.slice(0, i, std::min(i + batch, latents.size(0)))));
    }
    return torch::cat(parts);
}

double reconstruction_mse(Autoencoder& model, const torch::Tensor& images) {
    auto rec = decode_all(model, encode_all(model, images));
    return (rec - images).pow(2).mean().item<double>();
}

namespace {

void write_recovery(const NamedTensors& last_good, const std::optional<std::filesystem::path>& path,
                    const std::string& what) {
    if (!path) return;
    Checkpoint ck;
    ck.tensors = last_good;
    ck.metadata = {{"recovery", what}};
    save_checkpoint(ck, *path);
}

}  // namespace

AutoencoderTrainResult train_autoencoder(Autoencoder& model, const LabeledImages& data,
                                         const AutoencoderTrainConfig& cfg, const ProgressFn& progress) {
    if (data.size() == 0) throw ConfigError("train_autoencoder: empty dataset");
    if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("train_autoencoder: epochs and batch size must be >= 1");
    const auto n = data.size();
    auto n_held = static_cast<std::int64_t>(std::floor(n * cfg.heldout_fraction));
    if (n - n_held < 1) throw ConfigError("train_autoencoder: no training images after held-out split");
    auto train = data.images.slice(0, 0, n - n_held);
    auto held = n_held > 0 ? data.images.slice(0, n - n_held, n) : data.images;

    auto gen = make_generator(cfg.seed);
    model->set_latent_scale(1.0);
    model->train();
    torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(cfg.lr));
    NamedTensors last_good = snapshot(*model);
    AutoencoderTrainResult res;
    const auto n_train = train.size(0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Cosine decay over epochs.
        double lr = cfg.lr * 0.5 * (1.0 + std::cos(M_PI * epoch / cfg.epochs));
        for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
        auto perm = torch::randperm(n_train, gen);
        for (std::int64_t i = 0; i + cfg.batch_size <= n_train; i += cfg.batch_size) {
            auto x = train.index_select(0, perm.slice(0, i, i + cfg.batch_size));
            auto loss = (model->decode(model->encode(x)) - x).pow(2).mean();
            opt.zero_grad();
            loss.backward();
            opt.step();
            double v = loss.item<double>();
            if (!std::isfinite(v)) {
                write_recovery(last_good, cfg.recovery_path, "autoencoder diverged");
                throw TrainingError("autoencoder training diverged (non-finite loss) at step " +
                                    std::to_string(res.steps));
            }
            if ((res.steps % 200) == 0) last_good = snapshot(*model);
            if (progress) progress(res.steps, v);
            ++res.steps;
        }
    }
    model->eval();

    auto latents = encode_all(model, train.slice(0, 0, std::min<std::int64_t>(n_train, 2048)));
    double std_dev = latents.std().item<double>();
    res.latent_scale = 1.0 / std::max(std_dev, 1e-6);
    model->set_latent_scale(res.latent_scale);
    res.heldout_mse = reconstruction_mse(model, held);
    return res;
}

torch::Tensor diffusion_loss(const torch::Tensor& eps_pred, const torch::Tensor& eps) {
    require_same_shape(eps_pred, eps, "diffusion_loss");
    return (eps_pred - eps).pow(2).mean();
}

torch::Tensor drop_labels(const torch::Tensor& labels, double p_uncond, std::int64_t null_label,
                          torch::Generator& gen) {
    if (p_uncond < 0.0 || p_uncond > 1.0) throw ConfigError("p_uncond must lie in [0,1]");
    auto u = torch::rand(labels.sizes(), gen);
    return torch::where(u < p_uncond, torch::full_like(labels, null_label), labels);
}

torch::Tensor sample_timesteps(std::int64_t n, int T, torch::Generator& gen) {
    return torch::randint(1, T + 1, {n}, gen, torch::kLong);
}

DiffusionTrainResult train_base_diffusion(UNet& model, const torch::Tensor& latents, const torch::Tensor& labels,
                                          const DiffusionSchedule& sched, const DiffusionTrainConfig& cfg,
                                          const ProgressFn& progress) {
    if (latents.size(0) == 0) throw ConfigError("train_base_diffusion: empty dataset");
    if (latents.size(0) != labels.size(0)) throw ShapeError("train_base_diffusion: latents/labels length mismatch");
    auto gen = make_generator(cfg.seed);
    model->train();
    torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(cfg.lr).weight_decay(0.0));
    NamedTensors ema = snapshot(*model);
    NamedTensors last_good = ema;
    std::deque<double> recent;
    DiffusionTrainResult res;
    const auto n = latents.size(0);
    const auto null = model->config().null_label();
    for (int step = 0; step < cfg.steps; ++step) {
        // Linear warmup then cosine decay.
        double lr = cfg.lr * std::min(1.0, (step + 1) / 200.0) * 0.5 * (1.0 + std::cos(M_PI * step / cfg.steps));
        for (auto& group : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
        auto idx = torch::randint(0, n, {cfg.batch_size}, gen, torch::kLong);
        auto z0 = latents.index_select(0, idx);
        auto c = drop_labels(labels.index_select(0, idx), cfg.p_uncond, null, gen);
        auto t = sample_timesteps(cfg.batch_size, sched.T, gen);
        auto eps = torch::randn(z0.sizes(), gen);
        auto zt = forward_diffuse(z0, t, eps, sched);
        auto loss = diffusion_loss(model->forward(zt, t.to(torch::kFloat32), c), eps);
        opt.zero_grad();
        loss.backward();
        torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
        opt.step();
        double v = loss.item<double>();
        if (!std::isfinite(v)) {
            write_recovery(last_good, cfg.recovery_path, "base diffusion diverged");
            throw TrainingError("base diffusion training diverged (non-finite loss) at step " + std::to_string(step) +
                                ", lr " + std::to_string(lr));
        }
        {
            torch::NoGradGuard g;
            for (const auto& item : model->named_parameters()) {
                ema[item.key()].mul_(cfg.ema_decay).add_(item.value().detach(), 1.0 - cfg.ema_decay);
            }
        }
        if ((step % 500) == 0) last_good = snapshot(*model);
        recent.push_back(v);
        if (recent.size() > 200) recent.pop_front();
        if (progress) progress(step, v);
        res.steps = step + 1;
    }
    res.final_loss = recent.empty() ? 0.0 : std::accumulate(recent.begin(), recent.end(), 0.0) / recent.size();
    load_into(*model, ema);
    model->eval();
    return res;
}

}  // namespace wmlora::diffusion
