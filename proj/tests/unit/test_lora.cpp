#include "wmlora/diffusion/unet.hpp"
#include "wmlora/lora/watermark_lora.hpp"

#include "testing.hpp"

#include <cmath>
#include <filesystem>

using namespace wmlora;
using lora::MapperInit;
using watermark::SecretMessage;

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

double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

// Oracle for S: 1 + (1/sqrt(l)) * sum over set bits of I_i.
torch::Tensor scaling_oracle(const SecretMessage& s, const torch::Tensor& emb) {
    auto e = emb.to(torch::kFloat64);
    auto acc = torch::zeros({e.size(1)}, torch::kFloat64);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i]) acc += e[static_cast<std::int64_t>(i)];
    }
    return 1.0 + acc / std::sqrt(static_cast<double>(s.size()));
}

}  // namespace

TEST_SUITE("lora") {

TEST_CASE("lora_delta hand-computed 2x2 case") {
    auto A = torch::tensor({{1.0, 0.0}, {0.0, 1.0}});
    auto B = torch::tensor({{1.0, 1.0}, {1.0, 0.0}});
    auto d = lora::lora_delta(A, B, torch::tensor({2.0, 3.0}));
    CHECK(torch::equal(d, torch::tensor({{2.0, 2.0}, {3.0, 0.0}})));
}

TEST_CASE("lora_delta identity and zero factors") {
    auto gen = make_generator(1);
    auto A = torch::randn({5, 3}, gen);
    auto B = torch::randn({3, 7}, gen);
    CHECK(torch::allclose(lora::lora_delta(A, B, torch::ones({3})), A.matmul(B)));
    CHECK(max_abs(lora::lora_delta(torch::zeros({5, 3}), B, torch::randn({3}, gen))) == 0.0);
    CHECK(max_abs(lora::lora_delta(A, torch::zeros({3, 7}), torch::randn({3}, gen))) == 0.0);
    CHECK_THROWS_AS(lora::lora_delta(A, B, torch::ones({4})), ShapeError);
}

TEST_CASE("scaling matrix") {
    auto m = lora::init_mapper(16, 64, MapperInit::orthogonal, 3);
    auto zero = lora::build_scaling_matrix(SecretMessage::zeros(16), m);
    CHECK(torch::equal(zero, torch::ones({64})));

    lora::SecretMapper one{torch::tensor({{2.0f, 0.0f}}), MapperInit::normal};
    auto d = lora::build_scaling_matrix(SecretMessage({1}), one);
    CHECK(d[0].item<double>() == doctest::Approx(3.0));
    CHECK(d[1].item<double>() == doctest::Approx(1.0));

    auto m4 = lora::init_mapper(4, 6, MapperInit::normal, 8);
    auto s = SecretMessage({1, 1, 0, 0});
    auto got = lora::build_scaling_matrix(s, m4).to(torch::kFloat64);
    CHECK(max_abs(got - scaling_oracle(s, m4.embeddings)) < 1e-6);
    CHECK_THROWS_AS(lora::build_scaling_matrix(SecretMessage::zeros(5), m4), PayloadError);
}

TEST_CASE("mapper init") {
    auto o = lora::init_mapper(4, 8, MapperInit::orthogonal, 1);
    auto gram = o.embeddings.to(torch::kFloat64).matmul(o.embeddings.to(torch::kFloat64).t());
    auto off = gram - torch::diag(torch::diag(gram));
    CHECK(max_abs(off) < 1e-4);
    // Each row carries norm sqrt(r).
    CHECK(torch::allclose(torch::diag(gram), torch::full({4}, 8.0, torch::kFloat64), 1e-4));

    auto n1 = lora::init_mapper(16, 64, MapperInit::normal, 42);
    auto n2 = lora::init_mapper(16, 64, MapperInit::normal, 42);
    CHECK(torch::equal(n1.embeddings, n2.embeddings));
    CHECK_THROWS_AS(lora::init_mapper(16, 8, MapperInit::orthogonal, 0), ConfigError);
    CHECK_NOTHROW(lora::init_mapper(48, 320, MapperInit::orthogonal, 0));
    CHECK(lora::parse_mapper_init("normal") == MapperInit::normal);
    CHECK_THROWS_AS(lora::parse_mapper_init("xavier"), ConfigError);
}

TEST_CASE("all-zero secret gives A*B and the secret-delta decomposition holds") {
    const std::int64_t l = 8, r = 12;
    auto gen = make_generator(17);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        auto A = torch::randn({6, r}, gen, torch::kFloat64);
        auto B = torch::randn({r, 5}, gen, torch::kFloat64);
        auto mapper = lora::init_mapper(l, r, trial % 2 ? MapperInit::normal : MapperInit::orthogonal, trial);
        auto s = SecretMessage::random(l, 1000 + trial);
        auto emb = mapper.embeddings.to(torch::kFloat64);
        auto dz = lora::lora_delta(A, B, lora::build_scaling_matrix(SecretMessage::zeros(l), mapper).to(torch::kFloat64));
        CHECK(torch::equal(dz, lora::lora_delta(A, B, torch::ones({r}, torch::kFloat64))));
        auto ds = lora::lora_delta(A, B, scaling_oracle(s, emb));
        auto expect = lora::lora_delta(A, B, scaling_oracle(s, emb) - 1.0);
        worst = std::max(worst, max_abs(ds - dz - expect));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("create, merge and unmerge") {
    diffusion::UNet net(tiny_unet());
    auto shapes = net->lora_target_shapes();
    REQUIRE(!shapes.empty());
    auto w = lora::WatermarkLoRA::create(shapes, 16, 16, MapperInit::orthogonal, 5);
    CHECK(w.default_alpha() == doctest::Approx(1.05));
    CHECK(w.rank() == 16);
    CHECK(w.payload_bits() == 16);
    for (const auto& [k, f] : w.layers()) {
        CHECK(f.A.size(0) == shapes.at(k).first);
        CHECK(f.B.size(1) == shapes.at(k).second);
        CHECK(max_abs(f.A) == 0.0);
    }
    auto base = snapshot(*net);
    auto s = SecretMessage::random(16, 7);

    // alpha = 0 leaves every weight bit-identical.
    auto same = lora::merge(base, w, s, 0.0);
    for (const auto& [k, v] : base) CHECK(torch::equal(v, same.at(k)));

    // Give A non-zero values so the merge actually changes weights.
    auto gen = make_generator(9);
    for (auto& [k, f] : w.layers()) f.A = torch::randn(f.A.sizes(), gen) * 0.1;
    auto merged = lora::merge(base, w, s, 1.05);
    bool changed = false;
    for (const auto& k : w.targets()) changed = changed || !torch::equal(merged.at(k), base.at(k));
    CHECK(changed);
    auto back = lora::unmerge(merged, w, s, 1.05);
    for (const auto& [k, v] : base) {
        auto rel = (back.at(k) - v).norm().item<double>() / std::max(1e-12, v.norm().item<double>());
        CHECK(rel < 1e-5);
    }
    // Input untouched.
    auto again = snapshot(*net);
    for (const auto& [k, v] : base) CHECK(torch::equal(v, again.at(k)));

    auto missing = base;
    missing.erase(w.targets().front());
    CHECK_THROWS_AS(lora::merge(missing, w, s, 1.0), MergeError);
    CHECK_THROWS_AS(lora::merge(base, w, SecretMessage::zeros(8), 1.0), PayloadError);
}

TEST_CASE("functional runtime matches the physical merge") {
    diffusion::UNet net(tiny_unet());
    net->eval();
    auto w = lora::WatermarkLoRA::create(net->lora_target_shapes(), 16, 16, MapperInit::orthogonal, 5);
    auto gen = make_generator(10);
    for (auto& [k, f] : w.layers()) f.A = torch::randn(f.A.sizes(), gen) * 0.05;
    auto s = SecretMessage::random(16, 3);
    auto z = torch::randn({2, 4, 8, 8}, gen);
    auto t = torch::tensor({10.0f, 500.0f});
    auto c = torch::tensor({1, 10}, torch::kLong);
    torch::NoGradGuard g;
    auto bits = s.to_tensor().unsqueeze(0).repeat({2, 1});
    auto rt = w.runtime(bits, 1.05);
    auto functional = net->forward(z, t, c, &rt);
    diffusion::UNet merged_net(tiny_unet());
    load_into(*merged_net, lora::merge(snapshot(*net), w, s, 1.05));
    merged_net->eval();
    auto physical = merged_net->forward(z, t, c);
    CHECK(max_abs(functional - physical) < 1e-4);
}

TEST_CASE("deltas are reshaped per target") {
    diffusion::UNet net(tiny_unet());
    auto shapes = net->lora_target_shapes();
    auto w = lora::WatermarkLoRA::create(shapes, 16, 16, MapperInit::normal, 2);
    auto d = w.deltas(SecretMessage::random(16, 1));
    CHECK(d.size() == shapes.size());
    for (const auto& [k, v] : d) {
        CHECK(v.size(0) == shapes.at(k).first);
        CHECK(v.size(1) == shapes.at(k).second);
    }
}

TEST_CASE("checkpoint round trip") {
    diffusion::UNet net(tiny_unet());
    auto w = lora::WatermarkLoRA::create(net->lora_target_shapes(), 16, 16, MapperInit::normal, 4, 1.2);
    auto path = std::filesystem::temp_directory_path() / "wmlora_test_lora.safetensors";
    save_checkpoint(w.to_checkpoint(), path);
    auto ck = load_checkpoint(path);
    auto r = lora::WatermarkLoRA::from_checkpoint(ck);
    std::filesystem::remove(path);
    CHECK(r.rank() == 16);
    CHECK(r.payload_bits() == 16);
    CHECK(r.default_alpha() == doctest::Approx(1.2));
    CHECK(r.mapper().init == MapperInit::normal);
    CHECK(torch::equal(r.mapper().embeddings, w.mapper().embeddings));
    for (const auto& [k, f] : w.layers()) {
        CHECK(torch::equal(f.B, r.layers().at(k).B));
        CHECK(torch::equal(f.A, r.layers().at(k).A));
    }
    CHECK(ck.metadata.at("init") == "normal");
    Checkpoint bad;
    CHECK_THROWS_AS(lora::WatermarkLoRA::from_checkpoint(bad), IoError);
}

}  // TEST_SUITE
