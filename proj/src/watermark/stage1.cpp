#include "wmlora/watermark/stage1.hpp"

#include "wmlora/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

namespace wmlora::watermark {

namespace F = torch::nn::functional;

RegionLoss parse_region_loss(std::string_view name) {
    if (name == "prvl") return RegionLoss::prvl;
    if (name == "mse") return RegionLoss::mse;
    if (name == "none") return RegionLoss::none;
    throw ConfigError("unknown region loss '" + std::string(name) + "' (prvl|mse|none)");
}

std::string to_string(RegionLoss r) {
    switch (r) {
        case RegionLoss::prvl: return "prvl";
        case RegionLoss::mse: return "mse";
        case RegionLoss::none: return "none";
    }
    return "unknown";
}

void Stage1Config::validate() const {
    if (lambda < 0.0 || mu < 0.0) throw ConfigError("stage1: lambda and mu must be >= 0");
    if (prvl_window < 1 || prvl_window % 2 == 0) throw ConfigError("stage1: prvl_window must be odd and >= 1");
    if (warmstart_window < 1) throw ConfigError("stage1: warmstart_window must be >= 1");
    if (gain_prob < 0.0 || gain_prob > 1.0 || gain_max < 1.0) {
        throw ConfigError("stage1: gain_prob must lie in [0,1] and gain_max >= 1");
    }
    if (ramp_steps < 0) throw ConfigError("stage1: ramp_steps must be >= 0");
    if (batch_size < 1 || epochs < 0) throw ConfigError("stage1: batch_size must be positive, epochs >= 0");
    if (distortion_prob > 0.0 && distortions.empty()) throw ConfigError("stage1: distortion menu is empty");
    for (const auto& d : distortions) {
        if (!d.differentiable) throw ConfigError("stage1: train-time distortion '" + d.name + "' is not differentiable");
    }
}

nlohmann::json Stage1Config::to_json() const {
    nlohmann::json menu = nlohmann::json::array();
    for (const auto& d : distortions) menu.push_back(d.to_json());
    return {{"lambda", lambda},
            {"mu", mu},
            {"prvl_window", prvl_window},
            {"region_loss", to_string(region_loss)},
            {"warmstart_threshold", warmstart_threshold},
            {"warmstart_window", warmstart_window},
            {"warmstart_max_iters", warmstart_max_iters},
            {"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"weight_decay", weight_decay},
            {"distortion_prob", distortion_prob},
            {"corner_patch_prob", corner_patch_prob},
            {"ramp_steps", ramp_steps},
            {"gain_prob", gain_prob},
            {"gain_max", gain_max},
            {"distortions", menu},
            {"seed", seed}};
}

Stage1Config Stage1Config::from_json(const nlohmann::json& j) {
    Stage1Config c;
    c.lambda = j.value("lambda", c.lambda);
    c.mu = j.value("mu", c.mu);
    c.prvl_window = j.value("prvl_window", c.prvl_window);
    if (j.contains("region_loss")) c.region_loss = parse_region_loss(j.at("region_loss").get<std::string>());
    c.warmstart_threshold = j.value("warmstart_threshold", c.warmstart_threshold);
    c.warmstart_window = j.value("warmstart_window", c.warmstart_window);
    c.warmstart_max_iters = j.value("warmstart_max_iters", c.warmstart_max_iters);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.distortion_prob = j.value("distortion_prob", c.distortion_prob);
    c.corner_patch_prob = j.value("corner_patch_prob", c.corner_patch_prob);
    c.ramp_steps = j.value("ramp_steps", c.ramp_steps);
    c.gain_prob = j.value("gain_prob", c.gain_prob);
    c.gain_max = j.value("gain_max", c.gain_max);
    if (j.contains("distortions")) {
        c.distortions.clear();
        for (const auto& d : j.at("distortions")) c.distortions.push_back(distortion::DistortionSpec::from_json(d));
    }
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

bool warmstart_done(const std::deque<double>& window, std::size_t size, double threshold) {
    if (window.size() < size || size == 0) return false;
    double mean = std::accumulate(window.end() - static_cast<std::ptrdiff_t>(size), window.end(), 0.0) / size;
    return mean < threshold;
}

namespace {

double batch_accuracy(const torch::Tensor& logits, const torch::Tensor& bits) {
    return ((logits > 0).to(torch::kFloat32) == bits).to(torch::kFloat32).mean().item<double>();
}

void set_frozen(torch::nn::Module& m) {
    for (auto& p : m.parameters()) p.requires_grad_(false);
}

void append_jsonl(const std::optional<std::filesystem::path>& path, const nlohmann::json& rec) {
    if (!path) return;
    std::ofstream out(*path, std::ios::app);
    if (!out) throw IoError("cannot append metrics to " + path->string());
    out << rec.dump() << '\n';
}

void save_codec(SecretEncoder& encoder, SecretDecoder& decoder, const std::filesystem::path& path, int epoch) {
    Checkpoint ck;
    for (const auto& [k, v] : snapshot(*encoder)) ck.tensors["encoder." + k] = v;
    for (const auto& [k, v] : snapshot(*decoder)) ck.tensors["decoder." + k] = v;
    ck.metadata = {{"kind", "secret_codec"}, {"codec", encoder->config().to_json()}, {"epoch", epoch}};
    save_checkpoint(ck, path);
}

}  // namespace

Stage1Losses stage1_objective(diffusion::Autoencoder& ae, SecretEncoder& encoder, SecretDecoder& decoder,
                              const PerceptualProxy& proxy, const torch::Tensor& images, const torch::Tensor& bits,
                              const Stage1Config& cfg, torch::Generator& gen) {
    torch::Tensor z_o, reconstructed;
    {
        torch::NoGradGuard g;
        z_o = ae->encode(images);
        if (cfg.gain_prob > 0.0 && torch::rand({1}, gen).item<double>() < cfg.gain_prob) {
            auto gain = 1.0 + (cfg.gain_max - 1.0) * torch::rand({z_o.size(0), 1, 1, 1}, gen);
            z_o = z_o * gain;
        }
        reconstructed = ae->decode(z_o);
    }
    auto offset = encoder->forward(bits);
    torch::Tensor z_w;
    if (cfg.corner_patch_prob > 0.0 && torch::rand({1}, gen).item<double>() < cfg.corner_patch_prob) {
        double scale = 1.0 + 0.5 * torch::rand({1}, gen).item<double>();
        z_w = corner_patch_augment(offset, z_o, scale);
    } else {
        z_w = embed_latent(z_o, offset);
    }
    auto watermarked = ae->decode(z_w);
    auto seen = watermarked;
    if (cfg.distortion_prob > 0.0 && torch::rand({1}, gen).item<double>() < cfg.distortion_prob) {
        auto pick = torch::randint(0, static_cast<std::int64_t>(cfg.distortions.size()), {1}, gen).item<std::int64_t>();
        seen = distortion::apply(cfg.distortions[static_cast<std::size_t>(pick)], watermarked, gen);
    }
    Stage1Losses out;
    out.logits = decoder->forward(seen);
    out.bce = F::binary_cross_entropy_with_logits(out.logits, bits);
    out.perceptual = proxy.loss(watermarked, reconstructed);
    switch (cfg.region_loss) {
        case RegionLoss::prvl: out.region = prvl_loss(reconstructed, watermarked, cfg.prvl_window); break;
        case RegionLoss::mse: out.region = (reconstructed - watermarked).pow(2).mean(); break;
        case RegionLoss::none: out.region = torch::zeros({}); break;
    }
    out.total = out.bce + cfg.lambda * out.perceptual + cfg.mu * out.region;
    return out;
}

Stage1Result stage1_train(diffusion::Autoencoder& ae, SecretEncoder& encoder, SecretDecoder& decoder,
                          const diffusion::LabeledImages& train, const diffusion::LabeledImages& heldout,
                          const Stage1Config& cfg, const Stage1Progress& progress) {
    cfg.validate();
    if (train.size() == 0) throw ConfigError("stage1_train: empty training set");
    if (encoder->config().payload_bits != decoder->config().payload_bits) {
        throw ConfigError("stage1_train: encoder and decoder payload lengths differ");
    }
    const auto l = encoder->config().payload_bits;
    auto gen = make_generator(cfg.seed);
    auto dist_gen = make_generator(cfg.seed ^ 0xD157D157ULL);
    set_frozen(*ae);
    ae->eval();
    encoder->train();
    decoder->train();
    std::vector<torch::Tensor> params = encoder->parameters();
    for (auto& p : decoder->parameters()) params.push_back(p);
    torch::optim::AdamW opt(params, torch::optim::AdamWOptions(cfg.lr).weight_decay(cfg.weight_decay));
    PerceptualProxy proxy;
    Stage1Result res;
    std::int64_t step = 0;

    // Phase A: no cover image, the decoder reads D(E_s(s)) directly.
    std::deque<double> window;
    while (!warmstart_done(window, cfg.warmstart_window, cfg.warmstart_threshold)) {
        if (res.warmstart_iters >= cfg.warmstart_max_iters) {
            throw TrainingError("stage1 warm start did not reach BCE < " + std::to_string(cfg.warmstart_threshold) +
                                " within " + std::to_string(cfg.warmstart_max_iters) + " iterations");
        }
        auto bits = random_bits(cfg.batch_size, l, gen);
        auto logits = decoder->forward(ae->decode(encoder->forward(bits)));
        auto bce = F::binary_cross_entropy_with_logits(logits, bits);
        opt.zero_grad();
        bce.backward();
        opt.step();
        double v = bce.item<double>();
        if (!std::isfinite(v)) throw TrainingError("stage1 warm start diverged at iteration " + std::to_string(step));
        window.push_back(v);
        if (window.size() > cfg.warmstart_window) window.pop_front();
        ++res.warmstart_iters;
        nlohmann::json rec{{"iteration", step}, {"phase", "warmstart"}, {"bce", v}, {"acc", batch_accuracy(logits, bits)}};
        append_jsonl(cfg.metrics_path, rec);
        if (progress) progress(step, rec);
        ++step;
    }

    // Phase B: natural images, full objective.
    const auto n = train.size();
    std::deque<double> recent;
    auto step_cfg = cfg;
    std::int64_t full_step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto perm = torch::randperm(n, gen, torch::kLong);
        for (std::int64_t i = 0; i + cfg.batch_size <= n; i += cfg.batch_size) {
            auto images = train.images.index_select(0, perm.slice(0, i, i + cfg.batch_size));
            auto bits = random_bits(cfg.batch_size, l, gen);
            double ramp = cfg.ramp_steps > 0 ? std::min(1.0, static_cast<double>(full_step) / cfg.ramp_steps) : 1.0;
            step_cfg.lambda = ramp * cfg.lambda;
            step_cfg.mu = ramp * cfg.mu;
            auto losses = stage1_objective(ae, encoder, decoder, proxy, images, bits, step_cfg, dist_gen);
            opt.zero_grad();
            losses.total.backward();
            opt.step();
            double v = losses.bce.item<double>();
            if (!std::isfinite(losses.total.item<double>())) {
                throw TrainingError("stage1 diverged at step " + std::to_string(step) + " (epoch " +
                                    std::to_string(epoch) + ")");
            }
            recent.push_back(v);
            if (recent.size() > 50) recent.pop_front();
            if (step % 10 == 0 || progress) {
                nlohmann::json rec{{"iteration", step},
                                   {"phase", "full"},
                                   {"epoch", epoch},
                                   {"bce", v},
                                   {"perceptual", losses.perceptual.item<double>()},
                                   {"region", losses.region.item<double>()},
                                   {"acc", batch_accuracy(losses.logits, bits)}};
                if (step % 10 == 0) append_jsonl(cfg.metrics_path, rec);
                if (progress) progress(step, rec);
            }
            ++step;
            ++full_step;
        }
        if (cfg.checkpoint_path) save_codec(encoder, decoder, *cfg.checkpoint_path, epoch);
    }
    encoder->eval();
    decoder->eval();
    res.steps = step;
    res.final_bce = recent.empty() ? 0.0 : std::accumulate(recent.begin(), recent.end(), 0.0) / recent.size();
    if (heldout.size() > 0) res.heldout_acc = stage1_accuracy(ae, encoder, decoder, heldout.images, cfg.seed + 1);
    return res;
}

double stage1_accuracy(diffusion::Autoencoder& ae, SecretEncoder& encoder, SecretDecoder& decoder,
                       const torch::Tensor& images, std::uint64_t seed) {
    torch::NoGradGuard g;
    auto gen = make_generator(seed);
    const auto l = encoder->config().payload_bits;
    double correct = 0.0;
    const std::int64_t batch = 256;
    for (std::int64_t i = 0; i < images.size(0); i += batch) {
        auto x = images.slice(0, i, std::min(i + batch, images.size(0)));
        auto bits = random_bits(x.size(0), l, gen);
        auto wm = ae->decode(embed_latent(ae->encode(x), encoder->forward(bits)));
        auto probs = decode_secret(wm, decoder);
        correct += (threshold_bits(probs) == bits).to(torch::kFloat64).sum().item<double>();
    }
    return correct / static_cast<double>(images.size(0) * l);
}

double random_secret_baseline(SecretDecoder& decoder, const torch::Tensor& images, std::uint64_t seed) {
    torch::NoGradGuard g;
    auto gen = make_generator(seed);
    const auto l = decoder->config().payload_bits;
    auto bits = random_bits(images.size(0), l, gen);
    auto probs = decode_secret(images, decoder);
    return (threshold_bits(probs) == bits).to(torch::kFloat64).mean().item<double>();
}

}  // namespace wmlora::watermark
