#include "wmlora/checkpoint.hpp"
#include "wmlora/diffusion/sampler.hpp"
#include "wmlora/diffusion/train.hpp"

#include "testing.hpp"

#include <cmath>

using namespace wmlora;
using namespace wmlora::diffusion;

namespace {

UNetConfig tiny_unet() {
    UNetConfig c;
    c.channels = 16;
    c.mid_channels = 16;
    c.emb_dim = 32;
    c.groups = 4;
    c.heads = 2;
    return c;
}

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("linear schedule") {
    auto s = make_schedule(1000, ScheduleKind::linear);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(std::abs(s.alpha_bar(1) - (1.0 - 1e-4)) < 1e-15);
    // Independent running product of (1 - beta) over 1000 linearly spaced betas.
    CHECK(std::abs(s.alpha_bar(1000) - 4.0358297653756761e-05) < 1e-12);
    CHECK(std::abs(s.alpha_bar(500) - 0.078587242881778235) < 1e-10);
    double run = 1.0;
    for (int t = 1; t <= s.T; ++t) {
        run *= s.alphas[t - 1];
        CHECK(std::abs(s.alpha_bar(t) - run) < 1e-10);
        CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
        CHECK(s.alpha_bar(t) > 0.0);
    }
}

TEST_CASE("explicit betas and cosine schedule") {
    auto s = schedule_from_betas({0.5, 0.5});
    CHECK(s.alpha_bar(2) == doctest::Approx(0.25));
    CHECK_THROWS_AS(schedule_from_betas({0.5}), ConfigError);
    CHECK_THROWS_AS(schedule_from_betas({0.5, 1.0}), ConfigError);
    auto c = make_schedule(100, ScheduleKind::cosine);
    for (int t = 1; t <= 100; ++t) CHECK(c.alpha_bar(t) < c.alpha_bar(t - 1));
    CHECK_THROWS_AS(parse_schedule_kind("sigmoid"), ConfigError);
    auto tt = s.alpha_bar(torch::tensor({0, 1, 2}, torch::kLong));
    CHECK(tt[2].item<float>() == doctest::Approx(0.25));
}

TEST_CASE("forward diffusion") {
    auto s = schedule_from_betas({0.5, 0.5});
    auto z = torch::ones({1, 4, 2, 2});
    auto out = forward_diffuse(z, 2, torch::ones_like(z), s);
    CHECK(torch::allclose(out, torch::full_like(z, 0.5 + std::sqrt(0.75))));
    auto lin = make_schedule(1000, ScheduleKind::linear);
    auto eps = torch::randn({2, 4, 2, 2});
    auto zero = forward_diffuse(torch::zeros_like(eps), 300, eps, lin);
    CHECK(torch::allclose(zero, std::sqrt(1.0 - lin.alpha_bar(300)) * eps));
    auto batched = forward_diffuse(torch::zeros_like(eps), torch::tensor({300, 300}, torch::kLong), eps, lin);
    CHECK(torch::allclose(batched, zero));
    CHECK_THROWS_AS(forward_diffuse(z, 0, z, s), ConfigError);
}

TEST_CASE("guidance combination") {
    CHECK(cfg_combine(torch::tensor({2.0}), torch::tensor({1.0}), 7.5).item<double>() == doctest::Approx(8.5));
    CHECK(cfg_combine(torch::tensor({2.0}), torch::tensor({1.0}), 0.0).item<double>() == doctest::Approx(1.0));
    UNet net(tiny_unet());
    net->eval();
    torch::NoGradGuard g;
    auto z = torch::randn({2, 4, 8, 8});
    auto t = torch::tensor({100.0f, 10.0f});
    auto c = torch::tensor({3, 4}, torch::kLong);
    auto cond = net->forward(z, t, c);
    CHECK(torch::allclose(cfg_noise_prediction(net, z, t, c, 1.0), cond));
    auto uncond = net->forward(z, t, torch::full({2}, net->config().null_label(), torch::kLong));
    CHECK(torch::allclose(cfg_noise_prediction(net, z, t, c, 0.0), uncond, 1e-5, 1e-6));
}

TEST_CASE("DDIM over every timestep equals a reference trajectory") {
    auto s = make_schedule(20, ScheduleKind::linear, 1e-3, 0.2);
    NoisePredictor predict = [](const torch::Tensor& z, const torch::Tensor&, const torch::Tensor&) { return 0.3 * z; };
    auto z = torch::randn({2, 4, 4, 4}, torch::kFloat64);
    SampleOptions opts;
    opts.steps = 20;
    auto got = reverse_from(predict, s, z, 20, torch::zeros({2}, torch::kLong), opts);
    auto ref = z.clone();
    for (int t = 20; t >= 1; --t) {
        double ab = s.alpha_bar(t);
        double ab_prev = s.alpha_bar(t - 1);
        auto eps = 0.3 * ref;
        auto x0 = (ref - std::sqrt(1 - ab) * eps) / std::sqrt(ab);
        ref = std::sqrt(ab_prev) * x0 + std::sqrt(1 - ab_prev) * eps;
    }
    CHECK((got - ref).abs().max().item<double>() < 1e-9);
}

TEST_CASE("timestep sequences") {
    auto ts = timestep_sequence(1000, 25);
    CHECK(ts.size() == 25);
    CHECK(ts.front() == 1000);
    CHECK(ts.back() == 40);
    CHECK(timestep_sequence(100, 100).back() == 1);
    CHECK_THROWS_AS(timestep_sequence(10, 11), ConfigError);
    CHECK_THROWS_AS(timestep_sequence(10, 0), ConfigError);
}

TEST_CASE("sampling is deterministic in the seed") {
    UNet net(tiny_unet());
    net->eval();
    auto s = make_schedule(100, ScheduleKind::linear);
    auto predict = guided_predictor(net, 2.0);
    auto labels = torch::tensor({1, 2}, torch::kLong);
    for (auto kind : {SamplerKind::ddim, SamplerKind::ancestral}) {
        SampleOptions o{kind, 5, 2.0, 9};
        auto a = sample(predict, s, labels, {4, 8, 8}, o);
        auto b = sample(predict, s, labels, {4, 8, 8}, o);
        CHECK(torch::equal(a, b));
        o.seed = 10;
        CHECK_FALSE(torch::equal(a, sample(predict, s, labels, {4, 8, 8}, o)));
    }
    CHECK_THROWS_AS(parse_sampler_kind("euler"), ConfigError);
}

TEST_CASE("label dropout rate") {
    auto gen = make_generator(4);
    auto labels = torch::zeros({10000}, torch::kLong);
    auto d = drop_labels(labels, 0.1, 10, gen);
    double frac = (d == 10).to(torch::kFloat64).mean().item<double>();
    CHECK(frac > 0.08);
    CHECK(frac < 0.12);
    CHECK_THROWS_AS(drop_labels(labels, 1.5, 10, gen), ConfigError);
    auto t = sample_timesteps(5000, 1000, gen);
    CHECK(t.min().item<std::int64_t>() >= 1);
    CHECK(t.max().item<std::int64_t>() <= 1000);
}

TEST_CASE("diffusion loss") {
    auto eps = torch::randn({3, 4, 8, 8});
    CHECK(diffusion_loss(eps, eps).item<double>() == 0.0);
    auto pred = eps + 0.5;
    CHECK(diffusion_loss(pred, eps).item<double>() == doctest::Approx(0.25));
}

TEST_CASE("toy dataset") {
    auto a = make_toy_dataset(50, 3);
    auto b = make_toy_dataset(50, 3);
    CHECK(torch::equal(a.images, b.images));
    CHECK(a.images.sizes() == std::vector<std::int64_t>{50, 3, 32, 32});
    CHECK(a.images.min().item<double>() >= 0.0);
    CHECK(a.images.max().item<double>() <= 1.0);
    CHECK(a.labels.max().item<std::int64_t>() < kToyClasses);
    CHECK(a.slice(10, 20).size() == 10);
    CHECK_THROWS_AS(make_toy_dataset(0, 1), ConfigError);
}

TEST_CASE("autoencoder geometry and short training") {
    AutoencoderConfig c;
    c.channels = 8;
    Autoencoder ae(c);
    auto data = make_toy_dataset(64, 2);
    auto z = ae->encode(data.images.slice(0, 0, 2));
    CHECK(z.sizes() == std::vector<std::int64_t>{2, 4, 8, 8});
    CHECK(ae->decode(z).sizes() == std::vector<std::int64_t>{2, 3, 32, 32});
    AutoencoderTrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 16;
    auto r = train_autoencoder(ae, data, tc);
    CHECK(std::isfinite(r.heldout_mse));
    CHECK(r.latent_scale > 0.0);
    CHECK_THROWS_AS(train_autoencoder(ae, LabeledImages{}, tc), ConfigError);
    CHECK_THROWS_AS(ae->encode(torch::zeros({1, 3, 30, 30})), ShapeError);
}

TEST_CASE("base training runs and returns EMA weights") {
    UNet net(tiny_unet());
    auto s = make_schedule(100, ScheduleKind::linear);
    auto gen = make_generator(1);
    auto latents = torch::randn({32, 4, 8, 8}, gen);
    auto labels = torch::randint(0, 10, {32}, gen, torch::kLong);
    DiffusionTrainConfig cfg;
    cfg.steps = 3;
    cfg.batch_size = 8;
    auto before = hash_tensors(snapshot(*net));
    auto r = train_base_diffusion(net, latents, labels, s, cfg);
    CHECK(r.steps == 3);
    CHECK(std::isfinite(r.final_loss));
    CHECK(hash_tensors(snapshot(*net)) != before);
    CHECK_THROWS_AS(train_base_diffusion(net, latents, labels.slice(0, 0, 3), s, cfg), ShapeError);
}

TEST_CASE("unet targets and checkpoint round trip") {
    UNet net(tiny_unet());
    auto shapes = net->lora_target_shapes();
    CHECK(shapes.size() == net->lora_targets().size());
    auto params = snapshot(*net);
    for (const auto& [k, nm] : shapes) {
        REQUIRE(params.count(k));
        CHECK(params.at(k).numel() == nm.first * nm.second);
    }
    Checkpoint ck{params, {{"kind", "unet"}, {"unet", tiny_unet().to_json()}}};
    auto path = std::filesystem::temp_directory_path() / "wmlora_unet_test.safetensors";
    save_checkpoint(ck, path);
    auto back = load_checkpoint(path);
    std::filesystem::remove(path);
    CHECK(back.metadata.at("kind") == "unet");
    CHECK(hash_tensors(back.tensors) == hash_tensors(params));
    UNet other(UNetConfig::from_json(back.metadata.at("unet")));
    load_into(*other, back.tensors);
    CHECK(hash_tensors(snapshot(*other)) == hash_tensors(params));
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/file.safetensors"), IoError);
    CHECK_THROWS_AS(net->forward(torch::zeros({1, 3, 8, 8}), torch::zeros({1}), torch::zeros({1}, torch::kLong)),
                    ShapeError);
}

}  // TEST_SUITE
