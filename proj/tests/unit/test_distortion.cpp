#include "wmlora/distortion/distortion.hpp"
#include "wmlora/harness/metrics.hpp"
#include "wmlora/image_io.hpp"

#include "testing.hpp"

#include <cmath>

using namespace wmlora;
using namespace wmlora::distortion;

namespace {

torch::Tensor smooth_images(std::int64_t n, std::uint64_t seed) {
    auto gen = make_generator(seed);
    auto coarse = torch::rand({n, 3, 4, 4}, gen);
    return resize_bilinear(coarse, 32, 32).clamp(0.0, 1.0);
}

}  // namespace

TEST_SUITE("distortion") {

TEST_CASE("identity is bit-identical") {
    auto img = torch::rand({2, 3, 32, 32});
    auto gen = make_generator(1);
    CHECK(torch::equal(apply(eval_distortion("identity"), img, gen), img));
    CHECK(torch::equal(apply(eval_distortion("clean"), img, gen), img));
}

TEST_CASE("eval settings") {
    CHECK(eval_distortion("jpeg").params.jpeg_quality == 50);
    CHECK(eval_distortion("jpeg").kind == DistortionKind::jpeg);
    CHECK(eval_distortion("crop").params.crop_min == doctest::Approx(0.8));
    CHECK(eval_distortion("blur").params.blur_kernel_min == 3);
    CHECK(eval_distortion("blur").params.blur_sigma_min == doctest::Approx(4.0));
    CHECK(eval_distortion("noise").params.noise_var == doctest::Approx(0.1));
    CHECK(eval_distortion("jitter").params.hue_max == doctest::Approx(0.1));
    CHECK(eval_distortion("denoise").params.regen_strength == doctest::Approx(0.1));
    CHECK(eval_distortion("denoise2").params.regen_strength == doctest::Approx(0.2));
    CHECK(eval_suite_names().size() == 7);
    CHECK_THROWS_AS(eval_distortion("rotate"), ConfigError);
}

TEST_CASE("train menu") {
    auto menu = train_menu();
    CHECK(menu.size() == 5);
    for (const auto& d : menu) CHECK(d.differentiable);
    bool saw_noise = false;
    for (const auto& d : menu) {
        if (d.kind == DistortionKind::gaussian_noise) {
            saw_noise = true;
            CHECK(d.params.noise_var == doctest::Approx(10.0 / (255.0 * 255.0)));
        }
        if (d.kind == DistortionKind::gaussian_blur) {
            CHECK(d.params.blur_kernel_min == 3);
            CHECK(d.params.blur_kernel_max == 9);
        }
    }
    CHECK(saw_noise);
}

TEST_CASE("outputs stay in range and are deterministic") {
    auto img = torch::rand({3, 3, 32, 32});
    for (const auto& name : {"jpeg", "crop", "blur", "noise", "jitter"}) {
        auto spec = eval_distortion(name);
        auto g1 = make_generator(7);
        auto g2 = make_generator(7);
        auto a = apply(spec, img, g1);
        auto b = apply(spec, img, g2);
        CHECK(a.sizes() == img.sizes());
        CHECK(torch::equal(a, b));
        CHECK(a.min().item<double>() >= 0.0);
        CHECK(a.max().item<double>() <= 1.0);
    }
    for (const auto& d : train_menu()) {
        auto gen = make_generator(3);
        auto out = apply(d, img, gen);
        CHECK(out.min().item<double>() >= 0.0);
        CHECK(out.max().item<double>() <= 1.0);
    }
    auto gen = make_generator(1);
    CHECK_THROWS_AS(apply(eval_distortion("denoise"), img, gen), ConfigError);
    CHECK_THROWS_AS(apply(eval_distortion("noise"), torch::rand({1, 1, 8, 8}), gen), ShapeError);
}

TEST_CASE("jpeg simulation near identity at high quality") {
    auto img = smooth_images(4, 2);
    CHECK(harness::psnr(jpeg_approx_train(img, 100), img) > 40.0);
    CHECK(jpeg_keep_mask(100, false).sum().item<double>() == 64.0);
    auto q50 = jpeg_keep_mask(50, false);
    CHECK(q50[0][0].item<double>() == 1.0);
    CHECK(q50[7][7].item<double>() == 0.0);
    auto low = jpeg_approx_train(torch::rand({1, 3, 32, 32}), 10);
    CHECK(low.min().item<double>() >= 0.0);
    CHECK(low.max().item<double>() <= 1.0);
    CHECK_THROWS_AS(jpeg_approx_train(torch::rand({1, 3, 30, 30}), 50), ShapeError);
    CHECK_THROWS_AS(jpeg_keep_mask(0, false), ConfigError);
}

TEST_CASE("jpeg simulation gradient agrees with finite differences") {
    auto gen = make_generator(5);
    auto x = (0.3 + 0.4 * torch::rand({1, 3, 8, 8}, gen)).requires_grad_(true);
    auto weights = torch::randn({1, 3, 8, 8}, gen);
    auto f = [&](const torch::Tensor& in) { return (jpeg_approx_train(in, 50) * weights).sum(); };
    auto grad = torch::autograd::grad({f(x)}, {x})[0];
    auto dir = torch::randn(x.sizes(), gen);
    dir = dir / dir.norm();
    const double h = 1e-2;
    double fd;
    {
        torch::NoGradGuard g;
        fd = (f(x + h * dir).item<double>() - f(x - h * dir).item<double>()) / (2 * h);
    }
    double analytic = (grad * dir).sum().item<double>();
    CHECK(std::abs(fd - analytic) <= 1e-3 * std::max(std::abs(analytic), grad.norm().item<double>()));
}

TEST_CASE("real jpeg round trip") {
    auto img = smooth_images(2, 4);
    auto out = jpeg_roundtrip(img, 95);
    CHECK(out.sizes() == img.sizes());
    CHECK(harness::psnr(out, img) > 30.0);
    CHECK(harness::psnr(jpeg_roundtrip(img, 10), img) < harness::psnr(out, img));
}

TEST_CASE("crop and blur degenerate settings") {
    auto img = smooth_images(2, 6);
    auto gen = make_generator(0);
    DistortionSpec crop{"c", DistortionKind::crop_resize, {}, true};
    crop.params.crop_min = crop.params.crop_max = 1.0;
    CHECK(torch::allclose(apply(crop, img, gen), img, 1e-5, 1e-6));
    DistortionSpec blur{"b", DistortionKind::gaussian_blur, {}, true};
    blur.params.blur_kernel_min = blur.params.blur_kernel_max = 3;
    blur.params.blur_sigma_min = blur.params.blur_sigma_max = 1e-3;
    CHECK(torch::allclose(apply(blur, img, gen), img, 1e-5, 1e-6));
    DistortionSpec jit{"j", DistortionKind::color_jitter, {}, true};
    jit.params.brightness_min = jit.params.brightness_max = 1.0;
    jit.params.contrast_min = jit.params.contrast_max = 1.0;
    jit.params.saturation_min = jit.params.saturation_max = 1.0;
    jit.params.hue_min = jit.params.hue_max = 0.0;
    CHECK(torch::allclose(apply(jit, img, gen), img, 1e-4, 1e-5));
}

TEST_CASE("spec serialization") {
    auto spec = eval_distortion("blur");
    auto back = DistortionSpec::from_json(spec.to_json());
    CHECK(back.kind == spec.kind);
    CHECK(back.params.blur_sigma_min == spec.params.blur_sigma_min);
    CHECK_FALSE(DistortionSpec::from_json({{"kind", "jpeg"}}).differentiable);
    CHECK(DistortionSpec::from_json({{"kind", "gaussian_noise"}}).differentiable);
    CHECK_THROWS_AS(DistortionSpec::from_json({{"kind", "warp"}}), ConfigError);
    CHECK_THROWS_AS(DistortionSpec::from_json({{"kind", "crop_resize"}, {"params", {{"crop", {0.9, 0.5}}}}}),
                    ConfigError);
}

TEST_CASE("regeneration attack") {
    diffusion::AutoencoderConfig ac;
    ac.channels = 8;
    diffusion::Autoencoder ae(ac);
    ae->eval();
    diffusion::UNetConfig uc;
    uc.channels = 16;
    uc.mid_channels = 16;
    uc.emb_dim = 32;
    uc.groups = 4;
    uc.heads = 2;
    diffusion::UNet net(uc);
    net->eval();
    auto sched = diffusion::make_schedule(1000, diffusion::ScheduleKind::linear);
    RegenContext ctx{ae, net, &sched, 100};
    auto img = smooth_images(2, 8);
    auto gen = make_generator(1);
    torch::Tensor rec;
    {
        torch::NoGradGuard g;
        rec = ae->decode(ae->encode(img));
    }
    CHECK(torch::equal(denoise_regen(img, ctx, 1e-4, gen), rec));
    auto out = apply(eval_distortion("denoise"), img, gen, &ctx);
    CHECK(out.sizes() == img.sizes());
    CHECK(out.min().item<double>() >= 0.0);
    CHECK(out.max().item<double>() <= 1.0);
    CHECK_THROWS_AS(denoise_regen(img, ctx, 1.5, gen), ConfigError);
}

}  // TEST_SUITE
