#include "wmlora/lora/ppft.hpp"

#include "testing.hpp"

#include <cmath>

using namespace wmlora;
using lora::MapperInit;

namespace {

diffusion::UNetConfig tiny_unet() {
    diffusion::UNetConfig c;
    c.channels = 16;
    c.mid_channels = 16;
    c.emb_dim = 32;
    c.groups = 4;
    c.heads = 2;
    return c;
}

watermark::CodecConfig tiny_codec() {
    watermark::CodecConfig c;
    c.payload_bits = 8;
    c.hidden = 32;
    c.channels = 8;
    return c;
}

struct Probe {
    diffusion::UNet net{tiny_unet()};
    diffusion::DiffusionSchedule sched = diffusion::make_schedule(1000, diffusion::ScheduleKind::linear);
    torch::Tensor z0, dz, t, eps, labels;

    Probe() {
        net->eval();
        for (auto& p : net->parameters()) p.requires_grad_(false);
        auto gen = make_generator(21);
        z0 = torch::randn({3, 4, 8, 8}, gen);
        dz = 0.3 * torch::randn({3, 4, 8, 8}, gen);
        t = torch::tensor({5, 400, 999}, torch::kLong);
        eps = torch::randn({3, 4, 8, 8}, gen);
        labels = torch::tensor({0, 3, 10}, torch::kLong);
    }

    diffusion::NoisePredictor plain() {
        return [this](const torch::Tensor& z, const torch::Tensor& tt, const torch::Tensor& c) { return net->forward(z, tt, c); };
    }

    // z_t built independently in double precision from the schedule.
    torch::Tensor noisy(const torch::Tensor& x0) const {
        std::vector<torch::Tensor> rows;
        for (std::int64_t i = 0; i < x0.size(0); ++i) {
            double ab = sched.alpha_bar(static_cast<int>(t[i].item<std::int64_t>()));
            rows.push_back(std::sqrt(ab) * x0[i].to(torch::kFloat64) + std::sqrt(1.0 - ab) * eps[i].to(torch::kFloat64));
        }
        return torch::stack(rows).to(torch::kFloat32);
    }
};

}  // namespace

TEST_SUITE("ppft") {

TEST_CASE("zero-initialized adapter with no offset gives exactly zero loss") {
    Probe p;
    auto w = lora::WatermarkLoRA::create(p.net->lora_target_shapes(), 16, 8, MapperInit::orthogonal, 1);
    auto gen = make_generator(2);
    auto bits = watermark::random_bits(3, 8, gen);
    auto rt = w.runtime(bits, 1.0);
    diffusion::NoisePredictor theta = [&](const torch::Tensor& z, const torch::Tensor& tt, const torch::Tensor& c) {
        return p.net->forward(z, tt, c, &rt);
    };
    auto loss = lora::ppft_loss(theta, p.plain(), p.z0, torch::zeros_like(p.z0), p.t, p.eps, p.labels, p.sched);
    CHECK(loss.item<double>() == 0.0);
}

TEST_CASE("loss with an offset equals the two-forward-pass oracle") {
    Probe p;
    auto w = lora::WatermarkLoRA::create(p.net->lora_target_shapes(), 16, 8, MapperInit::orthogonal, 1);
    auto gen = make_generator(3);
    auto bits = watermark::random_bits(3, 8, gen);

    SUBCASE("zero adapter") {
        auto rt = w.runtime(bits, 1.0);
        diffusion::NoisePredictor theta = [&](const torch::Tensor& z, const torch::Tensor& tt, const torch::Tensor& c) {
            return p.net->forward(z, tt, c, &rt);
        };
        auto loss = lora::ppft_loss(theta, p.plain(), p.z0, p.dz, p.t, p.eps, p.labels, p.sched).item<double>();
        torch::NoGradGuard g;
        auto tf = p.t.to(torch::kFloat32);
        auto a = p.net->forward(p.noisy(p.z0 + p.dz), tf, p.labels);
        auto b = p.net->forward(p.noisy(p.z0), tf, p.labels);
        double oracle = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
        CHECK(oracle > 0.0);
        CHECK(std::abs(loss - oracle) < 1e-6);
    }
    SUBCASE("trained-looking adapter") {
        for (auto& [k, f] : w.layers()) f.A = torch::randn(f.A.sizes(), gen) * 0.05;
        auto rt = w.runtime(bits, 1.0);
        diffusion::NoisePredictor theta = [&](const torch::Tensor& z, const torch::Tensor& tt, const torch::Tensor& c) {
            return p.net->forward(z, tt, c, &rt);
        };
        auto loss = lora::ppft_loss(theta, p.plain(), p.z0, p.dz, p.t, p.eps, p.labels, p.sched).item<double>();
        torch::NoGradGuard g;
        auto tf = p.t.to(torch::kFloat32);
        auto a = p.net->forward(p.noisy(p.z0 + p.dz), tf, p.labels, &rt);
        auto b = p.net->forward(p.noisy(p.z0), tf, p.labels);
        double oracle = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
        CHECK(std::abs(loss - oracle) < 1e-6);
    }
}

TEST_CASE("naive loss equals the plain diffusion loss on shifted latents") {
    Probe p;
    auto loss = lora::naive_loss(p.plain(), p.z0, p.dz, p.t, p.eps, p.labels, p.sched).item<double>();
    torch::NoGradGuard g;
    auto pred = p.net->forward(p.noisy(p.z0 + p.dz), p.t.to(torch::kFloat32), p.labels);
    double oracle = (pred.to(torch::kFloat64) - p.eps.to(torch::kFloat64)).pow(2).mean().item<double>();
    CHECK(std::abs(loss - oracle) < 1e-6);
}

TEST_CASE("gradient agrees with finite differences") {
    Probe p;
    auto w = lora::WatermarkLoRA::create(p.net->lora_target_shapes(), 16, 8, MapperInit::orthogonal, 4);
    auto gen = make_generator(5);
    for (auto& [k, f] : w.layers()) f.A = torch::randn(f.A.sizes(), gen) * 0.05;
    auto bits = watermark::random_bits(3, 8, gen);
    auto eval = [&]() {
        auto rt = w.runtime(bits, 1.0);
        diffusion::NoisePredictor theta = [&](const torch::Tensor& z, const torch::Tensor& tt, const torch::Tensor& c) {
            return p.net->forward(z, tt, c, &rt);
        };
        return lora::ppft_loss(theta, p.plain(), p.z0, p.dz, p.t, p.eps, p.labels, p.sched);
    };
    // One factor of each kind plus the mapper.
    const auto key = w.targets().front();
    std::vector<torch::Tensor*> probes{&w.layers()[key].A, &w.layers()[key].B, &w.mapper().embeddings};
    for (auto* param : probes) {
        param->requires_grad_(true);
        auto loss = eval();
        auto grad = torch::autograd::grad({loss}, {*param})[0];
        param->requires_grad_(false);
        auto dir = grad / grad.norm();
        const double h = 1e-2;
        auto saved = param->clone();
        double lp, lm;
        {
            torch::NoGradGuard g;
            *param = saved + h * dir;
            lp = eval().item<double>();
            *param = saved - h * dir;
            lm = eval().item<double>();
            *param = saved;
        }
        double fd = (lp - lm) / (2 * h);
        double analytic = grad.norm().item<double>();
        CHECK(analytic > 0.0);
        CHECK(std::abs(fd - analytic) / analytic < 1e-3);
    }
}

TEST_CASE("training touches only the adapter") {
    diffusion::UNet net(tiny_unet());
    watermark::SecretEncoder enc(tiny_codec());
    auto sched = diffusion::make_schedule(100, diffusion::ScheduleKind::linear);
    auto gen = make_generator(8);
    lora::PpftData data{torch::randn({16, 4, 8, 8}, gen), torch::randint(0, 10, {16}, gen, torch::kLong)};
    auto base_hash = hash_tensors(snapshot(*net));
    auto enc_hash = hash_tensors(snapshot(*enc));
    auto w = lora::WatermarkLoRA::create(net->lora_target_shapes(), 8, 8, MapperInit::orthogonal, 1);
    auto w0 = w.to_checkpoint().tensors;

    // Same seed gives the same initial adapter regardless of objective.
    auto twin = lora::WatermarkLoRA::create(net->lora_target_shapes(), 8, 8, MapperInit::orthogonal, 1);
    for (const auto& [k, v] : twin.to_checkpoint().tensors) CHECK(torch::equal(v, w0.at(k)));

    lora::PpftConfig cfg;
    cfg.rank = 8;
    cfg.max_steps = 5;
    cfg.batch_size = 4;
    cfg.lr = 1e-2;
    auto res = lora::ppft_train(net, enc, w, data, sched, cfg);
    CHECK(res.steps == 5);
    CHECK(std::isfinite(res.final_loss));
    CHECK(hash_tensors(snapshot(*net)) == base_hash);
    CHECK(hash_tensors(snapshot(*enc)) == enc_hash);
    bool moved = false;
    for (const auto& [k, v] : w.to_checkpoint().tensors) moved = moved || !torch::equal(v, w0.at(k));
    CHECK(moved);

    cfg.objective = lora::Objective::naive;
    CHECK_NOTHROW(lora::ppft_train(net, enc, w, data, sched, cfg));
    CHECK(hash_tensors(snapshot(*net)) == base_hash);

    auto bad = lora::WatermarkLoRA::create(net->lora_target_shapes(), 8, 4, MapperInit::normal, 1);
    CHECK_THROWS_AS(lora::ppft_train(net, enc, bad, data, sched, cfg), ConfigError);
    CHECK_THROWS_AS(lora::ppft_train(net, enc, w, lora::PpftData{}, sched, cfg), ConfigError);
}

TEST_CASE("decoder fine-tune leaves other weights alone") {
    watermark::SecretEncoder enc(tiny_codec());
    watermark::SecretDecoder dec(tiny_codec());
    auto enc_hash = hash_tensors(snapshot(*enc));
    auto dec_hash = hash_tensors(snapshot(*dec));
    lora::WatermarkedSampler sampler = [&](const torch::Tensor& bits, std::int64_t size) {
        auto off = enc->forward(bits);
        return torch::sigmoid(torch::nn::functional::interpolate(
            off.slice(1, 0, 3), torch::nn::functional::InterpolateFuncOptions()
                                    .size(std::vector<std::int64_t>{size * 4, size * 4})
                                    .mode(torch::kBilinear)
                                    .align_corners(false)));
    };
    lora::DecoderFinetuneConfig cfg;
    cfg.steps = 12;
    cfg.batch_size = 4;
    auto r = lora::decoder_finetune(dec, sampler, cfg);
    CHECK(std::isfinite(r.last_bce));
    CHECK(hash_tensors(snapshot(*enc)) == enc_hash);
    CHECK(hash_tensors(snapshot(*dec)) != dec_hash);
}

TEST_CASE("config round trip") {
    lora::PpftConfig c;
    c.objective = lora::Objective::naive;
    c.rank = 32;
    c.init = MapperInit::normal;
    auto r = lora::PpftConfig::from_json(c.to_json());
    CHECK(r.objective == lora::Objective::naive);
    CHECK(r.rank == 32);
    CHECK(r.init == MapperInit::normal);
    CHECK(lora::PpftConfig{}.lr == doctest::Approx(1e-4));
    CHECK(lora::PpftConfig{}.epochs == 30);
    CHECK_THROWS_AS(lora::PpftConfig::from_json({{"rank", 0}}), ConfigError);
    CHECK_THROWS_AS(lora::parse_objective("sgd"), ConfigError);
}

}  // TEST_SUITE
