#include "wmlora/harness/config.hpp"
#include "wmlora/harness/evaluate.hpp"
#include "wmlora/harness/experiments.hpp"
#include "wmlora/harness/metrics.hpp"
#include "wmlora/harness/pipeline.hpp"

#include "testing.hpp"

#include <cmath>
#include <fstream>

using namespace wmlora;
using namespace wmlora::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("wmlora_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Smallest configuration that still exercises every stage.
nlohmann::json micro_config() {
    return merged(default_config(Profile::quick),
                  {{"dataset", {{"count", 96}, {"heldout", 32}}},
                   {"autoencoder", {{"model", {{"channels", 8}}}, {"train", {{"epochs", 1}}}}},
                   {"unet", {{"channels", 16}, {"mid_channels", 16}, {"emb_dim", 32}, {"groups", 4}, {"heads", 2}}},
                   {"schedule", {{"T", 100}}},
                   {"diffusion", {{"steps", 4}, {"batch_size", 16}}},
                   {"codec", {{"hidden", 32}, {"channels", 8}}},
                   {"stage1", {{"batch_size", 16}, {"generated_covers", 8}}},
                   {"ppft_data", {{"count", 16}, {"steps", 2}}},
                   {"ppft", {{"max_steps", 2}, {"batch_size", 8}, {"rank", 16}}},
                   {"eval", {{"secrets", 2}, {"per_secret", 4}, {"steps", 2}}},
                   {"attack", {{"steps", 2}, {"every", 1}, {"samples", 4}, {"batch_size", 8}}},
                   {"ablation", {{"ranks", {16}}}}});
}

}  // namespace

TEST_SUITE("harness") {

TEST_CASE("config defaults and hashing") {
    auto full = default_config(Profile::full);
    CHECK(section(full, "eval").at("alpha").get<double>() == doctest::Approx(1.05));
    CHECK(section(full, "ppft").at("deploy_alpha").get<double>() == doctest::Approx(1.05));
    CHECK(section(full, "stage1").at("lambda").get<double>() == 1.0);
    CHECK(section(full, "stage1").at("mu").get<double>() == 0.1);
    CHECK(section(default_config(Profile::quick), "stage1").at("lambda").get<double>() == 1.0);
    CHECK(section(full, "seeds").size() == 3);
    auto grid = section(full, "alpha_grid").get<std::vector<double>>();
    CHECK(std::find(grid.begin(), grid.end(), 1.05) != grid.end());
    CHECK(config_hash(full) == config_hash(default_config(Profile::full)));
    CHECK(config_hash(full) != config_hash(default_config(Profile::quick)));
    CHECK(section(full, "missing").empty());
    CHECK_THROWS_AS(parse_profile("medium"), ConfigError);

    auto dir = scratch("cfg");
    {
        std::ofstream out(dir / "o.yaml");
        out << "eval:\n  alpha: 1.2\nppft:\n  rank: 32\n";
    }
    auto cfg = load_experiment_config(dir / "o.yaml", Profile::full);
    CHECK(section(cfg, "eval").at("alpha").get<double>() == doctest::Approx(1.2));
    CHECK(section(cfg, "eval").at("per_secret").get<int>() == 64);
    CHECK(section(cfg, "ppft").at("rank").get<int>() == 32);
    fs::remove_all(dir);
}

TEST_CASE("image metrics") {
    auto a = torch::rand({2, 3, 32, 32});
    CHECK(psnr(a, a) == 100.0);
    CHECK(ssim(a, a) == doctest::Approx(1.0));
    auto b = (a + 0.05).clamp(0, 1);
    CHECK(psnr(a, b) < 100.0);
    CHECK(ssim(a, b) < 1.0);
    CHECK(psnr(torch::zeros({1, 3, 4, 4}), torch::full({1, 3, 4, 4}, 0.1)) == doctest::Approx(20.0));
}

TEST_CASE("spearman") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3}, {1, 1, 2}) == doctest::Approx(0.8660254));
    CHECK_THROWS_AS(spearman({1}, {1}), ConfigError);
}

TEST_CASE("metrics log and tables") {
    auto dir = scratch("metrics");
    MetricsLog log(dir / "m.jsonl", "abc");
    log.append({{"experiment", "x"}, {"bit_acc", 0.9}}, 2);
    log.append({{"experiment", "y"}});
    std::ifstream in(dir / "m.jsonl");
    std::string line;
    std::getline(in, line);
    auto first = nlohmann::json::parse(line);
    CHECK(first.at("config_hash") == "abc");
    CHECK(first.at("seed") == 2);
    std::getline(in, line);
    CHECK(nlohmann::json::parse(line).at("config_hash") == "abc");

    write_csv(dir / "t.csv", {"a", "b"}, {{"1", fmt_num(0.5)}});
    std::ifstream csv(dir / "t.csv");
    std::getline(csv, line);
    CHECK(line == "a,b");
    std::getline(csv, line);
    CHECK(line == "1,0.5");
    plot_lines(dir / "p.png", "t", "x", "y", {{"s", {0, 1, 2}, {0.1, 0.5, 0.2}}});
    plot_bars(dir / "b.png", "t", {"a", "b"}, {0.3, 0.7});
    CHECK(fs::file_size(dir / "p.png") > 0);
    CHECK(fs::file_size(dir / "b.png") > 0);
    fs::remove_all(dir);
}

TEST_CASE("scoring") {
    auto s = watermark::SecretMessage::random(16, 1);
    auto truth = s.to_tensor().unsqueeze(0).repeat({4, 1});
    auto sc = score_rows(truth, truth, 1e-4);
    CHECK(sc.bit_acc == 1.0);
    CHECK(sc.tpr == 1.0);
    CHECK(sc.tau == 15);
    auto flipped = 1.0 - truth;
    CHECK(score_rows(flipped, truth, 1e-4).bit_acc == 0.0);
    auto secrets = eval_secrets(3, 16, 5);
    CHECK(secrets.size() == 3);
    CHECK(secrets[0] == eval_secrets(3, 16, 5)[0]);
    CHECK_FALSE(secrets[0] == secrets[1]);
    watermark::PerceptualProxy proxy;
    auto img = torch::rand({2, 3, 32, 32});
    CHECK(drift(img, img, proxy) == 0.0);
    CHECK(drift(img, (img + 0.1).clamp(0, 1), proxy) > 0.0);
}

TEST_CASE("pipeline caches artifacts and experiments emit outputs") {
    auto dir = scratch("pipeline");
    auto cfg = micro_config();
    Pipeline p(cfg, dir / "cache");
    auto ae = p.autoencoder();
    auto base = p.base_model();
    auto codec = p.codec(0);
    CHECK(codec.info.contains("heldout_acc"));
    auto lr = p.watermark_lora(0);
    CHECK(lr.lora.rank() == 16);
    auto files = std::distance(fs::directory_iterator(dir / "cache"), fs::directory_iterator{});
    CHECK(files >= 5);

    // A second pipeline loads the same weights from the cache.
    Pipeline again(cfg, dir / "cache");
    CHECK(hash_tensors(snapshot(*again.base_model())) == hash_tensors(snapshot(*base)));
    CHECK(hash_tensors(again.watermark_lora(0).lora.to_checkpoint().tensors) ==
          hash_tensors(lr.lora.to_checkpoint().tensors));
    CHECK(std::distance(fs::directory_iterator(dir / "cache"), fs::directory_iterator{}) == files);

    auto out = dir / "out";
    CHECK_THROWS_AS(run_robustness_sweep(p, 0, {}, out), ConfigError);
    auto rob = run_robustness_sweep(p, 0, {"noise", "jpeg", "denoise"}, out);
    CHECK(rob.at("per_distortion").size() == 3);
    CHECK(rob.at("config_hash") == p.config_hash());
    CHECK(fs::exists(out / "robustness.csv"));
    CHECK(fs::exists(out / "samples_wm_vs_clean.png"));

    auto alpha = run_alpha_sweep(p, 0, {0.0, 1.05}, out);
    CHECK(alpha.at("points").size() == 2);
    CHECK(alpha.at("points")[0].at("drift").get<double>() == doctest::Approx(0.0).epsilon(1e-9));

    auto samp = run_sampler_sweep(p, 0, {SamplerCell{}}, out);
    CHECK(samp.at("spread").get<double>() == 0.0);

    auto abl = run_ablation_suite(p, 0, {{"ppft", nlohmann::json::object()}}, out);
    CHECK(abl.at("cells").size() == 1);

    auto att = run_finetune_attack(p, 0, out);
    CHECK(att.at("curve").size() == 3);
    CHECK(att.at("curve")[0].at("step") == 0);
    CHECK(fs::exists(out / "finetune_attack.png"));

    auto col = run_collusion_experiment(p, 0, 4, 0.5, out);
    CHECK(col.at("report").at("n_samples") == 4);
    fs::remove_all(dir);
}

}  // TEST_SUITE
