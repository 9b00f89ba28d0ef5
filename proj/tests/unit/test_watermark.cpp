#include "wmlora/image_io.hpp"
#include "wmlora/watermark/stage1.hpp"

#include "testing.hpp"

#include <cmath>
#include <fstream>

using namespace wmlora;
using watermark::SecretMessage;

namespace {

watermark::CodecConfig tiny_codec() {
    watermark::CodecConfig c;
    c.payload_bits = 8;
    c.hidden = 32;
    c.channels = 8;
    return c;
}

}  // namespace

TEST_SUITE("watermark") {

TEST_CASE("secret parsing") {
    auto s = SecretMessage::parse("0110", 4);
    CHECK(s.to_string() == "0110");
    auto h = SecretMessage::parse("0x3fa2", 16);
    CHECK(h.to_string() == "0011111110100010");
    CHECK(SecretMessage::parse("3fa2", 16) == h);
    CHECK_THROWS_AS(SecretMessage::parse("012", 3), PayloadError);
    CHECK_THROWS_AS(SecretMessage::parse("0x1ffff", 16), PayloadError);
    CHECK_THROWS_AS(SecretMessage::parse("", 16), PayloadError);
    CHECK_THROWS_AS(SecretMessage({0, 2}), PayloadError);
    CHECK(SecretMessage::random(16, 5) == SecretMessage::random(16, 5));
    CHECK(SecretMessage::from_tensor(h.to_tensor()) == h);
    CHECK(h.complement().complement() == h);
}

TEST_CASE("threshold at one half") {
    auto p = torch::tensor({0.2, 0.5, 0.51, 0.99});
    CHECK(torch::equal(watermark::threshold_bits(p), torch::tensor({0.0f, 0.0f, 1.0f, 1.0f})));
}

TEST_CASE("prvl analytic cases") {
    for (std::int64_t w : {1, 3, 7}) {
        auto a = torch::zeros({3, 16, 16}, torch::kFloat64);
        auto b = a.clone();
        const double d = 0.37;
        b.index_put_({1, 8, 8}, d);
        auto v = watermark::prvl_loss(a, b, w).item<double>();
        CHECK(std::abs(v - d / (3.0 * static_cast<double>(w * w))) < 1e-9);
        CHECK(watermark::prvl_loss(a, a, w).item<double>() == 0.0);
        auto u = torch::full_like(a, 0.25);
        CHECK(std::abs(watermark::prvl_loss(a, u, w).item<double>() - 0.25) < 1e-9);
    }
    CHECK_THROWS_AS(watermark::prvl_loss(torch::zeros({3, 4, 4}), torch::zeros({3, 4, 4}), 5), ConfigError);
}

TEST_CASE("prvl is differentiable in the watermarked image") {
    auto a = torch::zeros({1, 3, 8, 8});
    auto b = torch::rand({1, 3, 8, 8}).requires_grad_(true);
    watermark::prvl_loss(a, b, 3).backward();
    CHECK(b.grad().abs().sum().item<double>() > 0.0);
}

TEST_CASE("perceptual proxy") {
    watermark::PerceptualProxy proxy;
    auto gen = make_generator(4);
    auto a = torch::rand({2, 3, 32, 32}, gen);
    auto b = (a + 0.1 * torch::randn(a.sizes(), gen)).clamp(0, 1);
    CHECK(proxy.loss(a, a).item<double>() == 0.0);
    CHECK(proxy.loss(a, b).item<double>() > 0.0);
    CHECK(proxy.loss(a, b).item<double>() == doctest::Approx(proxy.loss(b, a).item<double>()));
    watermark::PerceptualProxy other;
    CHECK(other.loss(a, b).item<double>() == proxy.loss(a, b).item<double>());
    CHECK(watermark::perceptual_loss(proxy, b, a).item<double>() > 0.0);
}

TEST_CASE("secret encoder and decoder shapes") {
    watermark::SecretEncoder enc(tiny_codec());
    watermark::SecretDecoder dec(tiny_codec());
    enc->eval();
    auto s = SecretMessage::random(8, 1);
    auto off = watermark::encode_secret(s, enc);
    CHECK(off.sizes() == std::vector<std::int64_t>{4, 8, 8});
    CHECK(torch::equal(off, watermark::encode_secret(s, enc)));
    auto flipped = s.bits();
    flipped[0] ^= 1;
    CHECK((off - watermark::encode_secret(SecretMessage(flipped), enc)).abs().sum().item<double>() > 0.0);

    auto p = watermark::decode_secret(torch::rand({2, 3, 32, 32}), dec);
    CHECK(p.sizes() == std::vector<std::int64_t>{2, 8});
    CHECK(((p >= 0) & (p <= 1)).all().item<bool>());
    // Other resolutions are resized first.
    CHECK(watermark::decode_secret(torch::rand({3, 48, 48}), dec).sizes() == std::vector<std::int64_t>{8});

    auto zc = tiny_codec();
    zc.zero_init_output = true;
    watermark::SecretEncoder zero(zc);
    CHECK(watermark::encode_secret(s, zero).abs().max().item<double>() < 1e-6);
}

TEST_CASE("embed latent is additive") {
    auto gen = make_generator(2);
    auto z = torch::randn({2, 4, 8, 8}, gen);
    auto p1 = torch::randn({4, 8, 8}, gen);
    auto p2 = torch::randn({4, 8, 8}, gen);
    CHECK(torch::equal(watermark::embed_latent(z, torch::zeros({4, 8, 8})), z));
    CHECK(torch::equal(watermark::embed_latent(torch::zeros_like(z), p1), p1.unsqueeze(0).expand_as(z)));
    CHECK(torch::allclose(watermark::embed_latent(watermark::embed_latent(z, p1), p2), z + p1 + p2));
}

TEST_CASE("corner patch augmentation") {
    auto gen = make_generator(3);
    auto z = torch::randn({1, 4, 8, 8}, gen);
    auto off = torch::randn({1, 4, 8, 8}, gen);
    CHECK((watermark::corner_patch_augment(off, z, 1.0) - (z + off)).abs().max().item<double>() < 1e-6);
    auto plain = watermark::corner_patch_augment(torch::zeros_like(off), z, 1.5);
    CHECK(torch::allclose(plain, resize_bilinear(resize_bilinear(z, 12, 12), 8, 8)));
    auto single = torch::zeros_like(off);
    single.index_put_({0, 0, 0, 0}, 1.0);
    auto diff = (watermark::corner_patch_augment(single, z, 1.5) - plain).abs();
    CHECK(diff.sum().item<double>() > 0.0);
    CHECK(diff.slice(2, 2).sum().item<double>() < 1e-6);
    CHECK(diff.slice(3, 2).sum().item<double>() < 1e-6);
    CHECK_THROWS_AS(watermark::corner_patch_augment(off, z, 2.0), ConfigError);
}

TEST_CASE("warm start trigger") {
    std::deque<double> w{0.099, 0.099};
    CHECK(watermark::warmstart_done(w, 2, 0.1));
    CHECK_FALSE(watermark::warmstart_done(w, 3, 0.1));
    std::deque<double> edge{0.1, 0.1};
    CHECK_FALSE(watermark::warmstart_done(edge, 2, 0.1));
}

TEST_CASE("stage-1 config") {
    watermark::Stage1Config c;
    CHECK(c.lambda == 5.0);
    CHECK(c.mu == 0.5);
    CHECK_NOTHROW(c.validate());
    c.prvl_window = 8;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.prvl_window = 7;
    c.distortions.push_back(distortion::eval_distortion("jpeg"));
    CHECK_THROWS_AS(c.validate(), ConfigError);
    auto r = watermark::Stage1Config::from_json(watermark::Stage1Config{}.to_json());
    CHECK(r.distortions.size() == distortion::train_menu().size());
    CHECK(r.region_loss == watermark::RegionLoss::prvl);
    CHECK_THROWS_AS(watermark::parse_region_loss("l1"), ConfigError);
}

TEST_CASE("stage-1 objective and a short training run") {
    diffusion::AutoencoderConfig ac;
    ac.channels = 8;
    diffusion::Autoencoder ae(ac);
    ae->eval();
    for (auto& p : ae->parameters()) p.requires_grad_(false);
    watermark::SecretEncoder enc(tiny_codec());
    watermark::SecretDecoder dec(tiny_codec());
    auto data = diffusion::make_toy_dataset(40, 1);
    auto gen = make_generator(1);
    watermark::PerceptualProxy proxy;
    watermark::Stage1Config cfg;
    cfg.distortion_prob = 1.0;
    cfg.corner_patch_prob = 0.5;
    auto bits = watermark::random_bits(4, 8, gen);
    auto l = watermark::stage1_objective(ae, enc, dec, proxy, data.images.slice(0, 0, 4), bits, cfg, gen);
    CHECK(std::isfinite(l.total.item<double>()));
    CHECK(l.logits.sizes() == std::vector<std::int64_t>{4, 8});
    l.total.backward();

    auto ae_hash = hash_tensors(snapshot(*ae));
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.warmstart_threshold = 0.75;
    cfg.warmstart_window = 2;
    cfg.metrics_path = std::filesystem::temp_directory_path() / "wmlora_stage1_test.jsonl";
    std::filesystem::remove(*cfg.metrics_path);
    auto res = watermark::stage1_train(ae, enc, dec, data.slice(0, 32), data.slice(32, 40), cfg);
    CHECK(res.steps == res.warmstart_iters + 4);
    CHECK(res.heldout_acc >= 0.0);
    CHECK(hash_tensors(snapshot(*ae)) == ae_hash);
    std::ifstream in(*cfg.metrics_path);
    std::string line;
    REQUIRE(std::getline(in, line));
    auto rec = nlohmann::json::parse(line);
    CHECK(rec.contains("bce"));
    CHECK(rec.contains("acc"));
    std::filesystem::remove(*cfg.metrics_path);

    cfg.warmstart_threshold = 1e-9;
    cfg.warmstart_max_iters = 3;
    CHECK_THROWS_AS(watermark::stage1_train(ae, enc, dec, data.slice(0, 32), data.slice(32, 40), cfg), TrainingError);
}

TEST_CASE("random secrets on clean images sit near chance") {
    watermark::SecretDecoder dec(tiny_codec());
    auto data = diffusion::make_toy_dataset(200, 3);
    double acc = watermark::random_secret_baseline(dec, data.images, 11);
    CHECK(acc > 0.4);
    CHECK(acc < 0.6);
}

}  // TEST_SUITE
