#include "wmlora/checkpoint.hpp"
#include "wmlora/harness/config.hpp"
#include "wmlora/harness/evaluate.hpp"
#include "wmlora/harness/experiments.hpp"
#include "wmlora/harness/metrics.hpp"
#include "wmlora/harness/pipeline.hpp"
#include "wmlora/image_io.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace wmlora;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::uint64_t seed = 0;
    bool quick = false;
    bool full = false;
    bool all_seeds = false;
    std::string cache = "wmlora_cache";
    std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "experiment config (YAML or JSON), merged over the profile defaults");
    cmd->add_option("--seed", c.seed, "seed for stage-1 / LoRA training and experiments");
    auto* q = cmd->add_flag("--quick", c.quick, "reduced sizes for smoke runs");
    cmd->add_flag("--full", c.full, "toy-scale acceptance sizes (default)")->excludes(q);
    cmd->add_option("--cache", c.cache, "artifact cache directory");
    cmd->add_option("--out", c.out, "output path");
}

std::string timestamp() {
    auto t = std::time(nullptr);
    std::ostringstream os;
    os << std::put_time(std::localtime(&t), "%Y%m%d-%H%M%S");
    return os.str();
}

harness::Pipeline make_pipeline(const Common& c) {
    auto profile = c.quick ? harness::Profile::quick : harness::Profile::full;
    std::optional<fs::path> path;
    if (!c.config.empty()) path = c.config;
    auto cfg = harness::load_experiment_config(path, profile);
    return harness::Pipeline(cfg, c.cache, [](const std::string& m) { std::cerr << "[wmlora] " << m << '\n'; });
}

fs::path run_dir(const Common& c, const std::string& verb, const harness::Pipeline& p) {
    fs::path dir = c.out.empty() ? fs::path("runs") / (verb + "-" + p.config_hash().substr(0, 8) + "-" + timestamp())
                                 : fs::path(c.out);
    fs::create_directories(dir);
    harness::write_json(dir / "config.json", {{"config", p.config()}, {"config_hash", p.config_hash()}});
    return dir;
}

std::vector<std::uint64_t> seeds_of(const Common& c, const harness::Pipeline& p) {
    if (!c.all_seeds) return {c.seed};
    auto seeds = harness::section(p.config(), "seeds").get<std::vector<std::uint64_t>>();
    if (seeds.empty()) throw ConfigError("config has an empty seeds list");
    return seeds;
}

diffusion::UNet load_unet(harness::Pipeline& p, const std::string& path) {
    if (path.empty()) return p.base_model();
    auto ck = load_checkpoint(path);
    auto cfg = ck.metadata.contains("unet") ? ck.metadata["unet"] : harness::section(p.config(), "unet");
    diffusion::UNet model(diffusion::UNetConfig::from_json(cfg));
    load_into(*model, ck.tensors);
    model->eval();
    return model;
}

lora::WatermarkLoRA load_lora(harness::Pipeline& p, const std::string& path, std::uint64_t seed) {
    if (path.empty()) return p.watermark_lora(seed).lora;
    return lora::WatermarkLoRA::from_checkpoint(load_checkpoint(path));
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

harness::EvalSettings eval_settings(const harness::Pipeline& p) {
    return harness::EvalSettings::from_json(harness::section(p.config(), "eval"));
}

}  // namespace

int main(int argc, char** argv) {
    torch::set_num_threads(std::max(1, static_cast<int>(std::thread::hardware_concurrency())));
    CLI::App app{"Secret-conditioned LoRA watermarking for toy latent diffusion models"};
    app.require_subcommand(1);
    Common c;

    auto* train_vae = app.add_subcommand("train-vae", "train (or load) the autoencoder");
    auto* train_base = app.add_subcommand("train-base", "train (or load) the class-conditional base model");
    auto* train_stage1 = app.add_subcommand("train-stage1", "train the secret encoder/decoder pair");
    auto* train_ppft = app.add_subcommand("train-ppft", "train the watermark LoRA");
    for (auto* cmd : {train_vae, train_base, train_stage1, train_ppft}) add_common(cmd, c);

    std::string secret_text, lora_path, model_path, image_path;
    double alpha = -1.0;
    auto* embed = app.add_subcommand("embed", "merge a secret into the base weights and save the model");
    auto* merge_export = app.add_subcommand("merge-export", "save the per-layer weight deltas for a secret");
    for (auto* cmd : {embed, merge_export}) {
        add_common(cmd, c);
        cmd->add_option("--secret", secret_text, "secret as bits (0101...) or hex (0x...)")->required();
        cmd->add_option("--alpha", alpha, "merge strength (default: the LoRA's deploy alpha)");
        cmd->add_option("--lora", lora_path, "LoRA checkpoint (default: trained via the pipeline)");
    }

    std::int64_t n = 16;
    std::string sampler = "ddim";
    int steps = 25;
    double guidance = 7.5;
    auto* sample = app.add_subcommand("sample", "sample an image grid; with --secret, watermarked vs clean rows");
    add_common(sample, c);
    sample->add_option("--model", model_path, "UNet checkpoint (default: base model)");
    sample->add_option("--secret", secret_text, "merge this secret before sampling");
    sample->add_option("--alpha", alpha, "merge strength");
    sample->add_option("--lora", lora_path, "LoRA checkpoint");
    sample->add_option("-n,--num", n, "number of images");
    sample->add_option("--sampler", sampler, "ddim or ancestral");
    sample->add_option("--steps", steps, "sampling steps");
    sample->add_option("--guidance", guidance, "classifier-free guidance scale");

    int tau = -1;
    double target_fpr = 1e-4;
    auto* detect = app.add_subcommand("detect", "sample from a model and test for a secret");
    add_common(detect, c);
    detect->add_option("--model", model_path, "UNet checkpoint to test")->required();
    detect->add_option("--secret", secret_text, "claimed secret")->required();
    auto* tau_opt = detect->add_option("--tau", tau, "matched-bit threshold");
    detect->add_option("--target-fpr", target_fpr, "choose tau for this false-positive rate")->excludes(tau_opt);
    detect->add_option("-n,--num", n, "number of samples");

    auto* decode = app.add_subcommand("decode", "extract the bits from a PNG/JPEG image");
    add_common(decode, c);
    decode->add_option("--image", image_path, "image file")->required()->check(CLI::ExistingFile);
    decode->add_option("--secret", secret_text, "report accuracy against this secret");

    std::vector<std::string> distortions = distortion::eval_suite_names();
    auto* evaluate = app.add_subcommand("evaluate", "robustness sweep over the eval distortions");
    evaluate->add_option("--distortions", distortions, "comma-separated names")->delimiter(',');

    bool with_prvl = false;
    auto* ablate = app.add_subcommand("ablate", "objective / init / rank ablation at equal budget");
    ablate->add_flag("--prvl", with_prvl, "also run the stage-1 region-loss ablation");

    double ratio = 0.5;
    std::int64_t collude_n = -1;
    auto* collude = app.add_subcommand("collude", "average two watermarked models and tabulate extracted bits");
    collude->add_option("--ratio", ratio, "merge ratio");
    collude->add_option("-n,--num", collude_n, "samples (default from config)");

    auto* attack = app.add_subcommand("attack-finetune", "fine-tune the watermarked model on clean data");

    std::vector<double> alphas;
    auto* sweep_alpha = app.add_subcommand("sweep-alpha", "accuracy and drift over merge strengths");
    sweep_alpha->add_option("--alphas", alphas, "comma-separated values (default from config)")->delimiter(',');

    auto* sweep_samplers = app.add_subcommand("sweep-samplers", "accuracy across samplers, steps and guidance");

    for (auto* cmd : {evaluate, ablate, collude, attack, sweep_alpha, sweep_samplers}) {
        add_common(cmd, c);
        cmd->add_flag("--all-seeds", c.all_seeds, "run every seed listed in the config");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        auto p = make_pipeline(c);
        auto t0 = std::chrono::steady_clock::now();
        auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

        if (train_vae->parsed()) {
            auto ae = p.autoencoder();
            fs::path src = p.cache_dir() / ("autoencoder-" + p.artifact_key("autoencoder") + ".safetensors");
            if (!c.out.empty()) fs::copy_file(src, c.out, fs::copy_options::overwrite_existing);
            print({{"checkpoint", c.out.empty() ? src.string() : c.out}, {"config_hash", p.config_hash()}});
        } else if (train_base->parsed()) {
            auto model = p.base_model();
            fs::path src = p.cache_dir() / ("base-" + p.artifact_key("base") + ".safetensors");
            if (!c.out.empty()) fs::copy_file(src, c.out, fs::copy_options::overwrite_existing);
            print({{"checkpoint", c.out.empty() ? src.string() : c.out}, {"config_hash", p.config_hash()}});
        } else if (train_stage1->parsed()) {
            auto codec = p.codec(c.seed);
            if (!c.out.empty()) {
                Checkpoint ck;
                for (auto& [k, v] : snapshot(*codec.encoder)) ck.tensors["encoder." + k] = v;
                for (auto& [k, v] : snapshot(*codec.decoder)) ck.tensors["decoder." + k] = v;
                ck.metadata = {{"kind", "secret_codec"}, {"codec", codec.encoder->config().to_json()}, {"info", codec.info}};
                save_checkpoint(ck, c.out);
            }
            print(codec.info);
        } else if (train_ppft->parsed()) {
            auto b = p.watermark_lora(c.seed);
            if (!c.out.empty()) {
                auto ck = b.lora.to_checkpoint();
                ck.metadata["info"] = b.info;
                save_checkpoint(ck, c.out);
            }
            print(b.info);
        } else if (embed->parsed() || merge_export->parsed()) {
            if (c.out.empty()) throw ConfigError("--out is required");
            auto lr = load_lora(p, lora_path, c.seed);
            auto s = watermark::SecretMessage::parse(secret_text, static_cast<std::size_t>(lr.payload_bits()));
            const double a = alpha >= 0 ? alpha : lr.default_alpha();
            Checkpoint ck;
            auto base = p.base_model();
            if (embed->parsed()) {
                ck.tensors = lora::merge(snapshot(*base), lr, s, a);
                ck.metadata = {{"kind", "unet"}, {"unet", harness::section(p.config(), "unet")}};
            } else {
                for (auto& [k, d] : lr.deltas(s)) ck.tensors[k] = (a * d).contiguous();
                ck.metadata = {{"kind", "lora_deltas"}};
            }
            ck.metadata["secret"] = s.to_string();
            ck.metadata["alpha"] = a;
            ck.metadata["config_hash"] = p.config_hash();
            save_checkpoint(ck, c.out);
            print({{"checkpoint", c.out}, {"secret", s.to_string()}, {"alpha", a}});
        } else if (sample->parsed()) {
            auto model = load_unet(p, model_path);
            auto ae = p.autoencoder();
            diffusion::SampleOptions opts{diffusion::parse_sampler_kind(sampler), steps, guidance, c.seed};
            auto labels = harness::random_labels(n, model->config().num_classes, c.seed);
            const auto latent = eval_settings(p).latent_size;
            auto clean = harness::generate_images(model, ae, p.schedule(), labels, opts, latent);
            auto grid_src = clean;
            if (!secret_text.empty()) {
                auto lr = load_lora(p, lora_path, c.seed);
                auto s = watermark::SecretMessage::parse(secret_text, static_cast<std::size_t>(lr.payload_bits()));
                auto wm_model = p.make_unet();
                load_into(*wm_model, lora::merge(snapshot(*model), lr, s, alpha >= 0 ? alpha : lr.default_alpha()));
                wm_model->eval();
                auto wm = harness::generate_images(wm_model, ae, p.schedule(), labels, opts, latent);
                grid_src = torch::cat({wm, clean});
            }
            fs::path out = c.out.empty() ? fs::path("samples.png") : fs::path(c.out);
            write_png(make_grid(grid_src, std::min<std::int64_t>(n, 8)), out);
            print({{"grid", out.string()}, {"n", n}, {"config_hash", p.config_hash()}});
        } else if (detect->parsed()) {
            auto model = load_unet(p, model_path);
            auto ae = p.autoencoder();
            auto codec = p.codec(c.seed);
            auto s = watermark::SecretMessage::parse(secret_text, static_cast<std::size_t>(codec.decoder->config().payload_bits));
            auto settings = eval_settings(p);
            auto labels = harness::random_labels(n, model->config().num_classes, c.seed);
            auto opts = settings.opts;
            opts.seed = c.seed;
            auto bits = harness::extract_bits(codec.decoder,
                                              harness::generate_images(model, ae, p.schedule(), labels, opts, settings.latent_size));
            const int k = static_cast<int>(s.size());
            auto report = detection::make_report(bits, s, tau_opt->count() ? detection::fpr(k, tau) : target_fpr);
            if (tau_opt->count()) {
                report.tau = tau;
                report.achieved_fpr = detection::fpr(k, tau);
                report.tpr = detection::evaluate_tpr(bits, s, tau);
            }
            auto j = report.to_json();
            j["config_hash"] = p.config_hash();
            j["seed"] = c.seed;
            j["detected"] = report.tpr >= 0.5;
            if (!c.out.empty()) harness::write_json(c.out, j);
            print(j);
        } else if (decode->parsed()) {
            auto codec = p.codec(c.seed);
            auto probs = watermark::decode_secret(read_image(image_path), codec.decoder);
            auto bits = watermark::SecretMessage::from_tensor(watermark::threshold_bits(probs).view({-1}));
            nlohmann::json j{{"bits", bits.to_string()}};
            if (!secret_text.empty()) {
                auto s = watermark::SecretMessage::parse(secret_text, bits.size());
                j["bit_acc"] = detection::bit_accuracy(s, bits);
            }
            print(j);
        } else {
            // Scripted experiments: one run directory, one JSONL record per (experiment, seed).
            std::string verb = app.get_subcommands().front()->get_name();
            auto dir = run_dir(c, verb, p);
            harness::MetricsLog log(dir / "metrics.jsonl", p.config_hash());
            for (auto seed : seeds_of(c, p)) {
                auto seed_dir = dir / ("seed" + std::to_string(seed));
                nlohmann::json r;
                if (evaluate->parsed()) {
                    r = harness::run_robustness_sweep(p, seed, distortions, seed_dir);
                } else if (ablate->parsed()) {
                    r = harness::run_ablation_suite(p, seed, harness::default_ablation_cells(p.config()), seed_dir);
                    if (with_prvl) r["prvl"] = harness::run_prvl_ablation(p, seed, seed_dir);
                } else if (collude->parsed()) {
                    const auto& cs = harness::section(p.config(), "collusion");
                    r = harness::run_collusion_experiment(p, seed, collude_n > 0 ? collude_n : get_or<std::int64_t>(cs, "samples", 512),
                                                          ratio, seed_dir);
                } else if (attack->parsed()) {
                    r = harness::run_finetune_attack(p, seed, seed_dir);
                } else if (sweep_alpha->parsed()) {
                    auto grid = alphas.empty() ? harness::section(p.config(), "alpha_grid").get<std::vector<double>>() : alphas;
                    r = harness::run_alpha_sweep(p, seed, grid, seed_dir);
                } else if (sweep_samplers->parsed()) {
                    r = harness::run_sampler_sweep(p, seed, harness::default_sampler_cells(), seed_dir);
                }
                r["wall_seconds"] = elapsed();
                log.append(r, seed);
                print(r);
            }
            std::cerr << "[wmlora] outputs in " << dir << '\n';
        }
    } catch (const wmlora::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
