#include "wmlora/harness/experiments.hpp"

#include "wmlora/config.hpp"
#include "wmlora/diffusion/train.hpp"
#include "wmlora/harness/config.hpp"
#include "wmlora/image_io.hpp"
#include "wmlora/watermark/stage1.hpp"

#include <algorithm>
#include <chrono>

namespace wmlora::harness {

namespace {

EvalSettings settings_of(Pipeline& p) { return EvalSettings::from_json(section(p.config(), "eval")); }

void save_pair_grid(const torch::Tensor& wm, const torch::Tensor& clean, const std::filesystem::path& path) {
    const auto k = std::min<std::int64_t>(8, wm.size(0));
    if (k == 0) return;
    std::vector<torch::Tensor> rows{wm.slice(0, 0, k)};
    if (clean.defined()) rows.push_back(clean.slice(0, 0, k));
    write_png(make_grid(torch::cat(rows), k), path);
}

nlohmann::json tag(nlohmann::json j, Pipeline& p, std::uint64_t seed, const std::string& experiment) {
    j["experiment"] = experiment;
    j["seed"] = seed;
    j["config_hash"] = p.config_hash();
    return j;
}

}  // namespace

nlohmann::json run_robustness_sweep(Pipeline& p, std::uint64_t seed, const std::vector<std::string>& distortions,
                                    const std::filesystem::path& out_dir) {
    if (distortions.empty()) throw ConfigError("robustness sweep: empty distortion list");
    std::vector<distortion::DistortionSpec> specs;
    for (const auto& name : distortions) specs.push_back(distortion::eval_distortion(name));
    auto base = p.base_model();
    auto ae = p.autoencoder();
    auto codec = p.codec(seed);
    auto lora = p.watermark_lora(seed);
    auto settings = settings_of(p);
    auto samples = generate_watermarked(base, ae, p.schedule(), merged_weights(base, lora.lora, settings.alpha), settings,
                                        static_cast<std::size_t>(lora.lora.payload_bits()), true);
    watermark::PerceptualProxy proxy;
    distortion::RegenContext regen{ae, base, &p.schedule(), 100};
    auto clean = score_images(codec.decoder, samples.images, samples.truth, settings.target_fpr);
    auto clean_model = score_images(codec.decoder, samples.clean_images, samples.truth, settings.target_fpr);
    nlohmann::json per = nlohmann::json::object();
    std::vector<std::vector<std::string>> rows{{"clean", fmt_num(clean.bit_acc), fmt_num(clean.tpr)}};
    std::vector<std::string> names{"clean"};
    std::vector<double> accs{clean.bit_acc};
    for (std::size_t i = 0; i < specs.size(); ++i) {
        auto gen = make_generator(settings.seed * 31ULL + i);
        auto distorted = distortion::apply(specs[i], samples.images, gen, &regen);
        auto s = score_images(codec.decoder, distorted, samples.truth, settings.target_fpr);
        per[specs[i].name] = s.to_json();
        rows.push_back({specs[i].name, fmt_num(s.bit_acc), fmt_num(s.tpr)});
        names.push_back(specs[i].name);
        accs.push_back(s.bit_acc);
    }
    std::filesystem::create_directories(out_dir);
    auto result = tag({{"clean", clean.to_json()},
                       {"clean_model", clean_model.to_json()},
                       {"per_distortion", per},
                       {"drift", drift(samples.images, samples.clean_images, proxy)},
                       {"eval", settings.to_json()},
                       {"stage1", codec.info},
                       {"ppft", lora.info}},
                      p, seed, "robustness");
    write_json(out_dir / "robustness.json", result);
    write_csv(out_dir / "robustness.csv", {"distortion", "bit_acc", "tpr"}, rows);
    plot_bars(out_dir / "robustness.png", "bit accuracy per distortion", names, accs);
    save_pair_grid(samples.images, samples.clean_images, out_dir / "samples_wm_vs_clean.png");
    return result;
}

std::string SamplerCell::name() const {
    return diffusion::to_string(kind) + "-" + std::to_string(steps) + "-cfg" + fmt_num(guidance);
}

std::vector<SamplerCell> default_sampler_cells() {
    using diffusion::SamplerKind;
    return {{SamplerKind::ddim, 15, 7.5},     {SamplerKind::ddim, 25, 7.5}, {SamplerKind::ddim, 50, 7.5},
            {SamplerKind::ancestral, 25, 7.5}, {SamplerKind::ddim, 25, 5.0}, {SamplerKind::ddim, 25, 10.0}};
}

nlohmann::json run_sampler_sweep(Pipeline& p, std::uint64_t seed, const std::vector<SamplerCell>& cells,
                                 const std::filesystem::path& out_dir) {
    if (cells.empty()) throw ConfigError("sampler sweep: no cells");
    auto base = p.base_model();
    auto ae = p.autoencoder();
    auto codec = p.codec(seed);
    auto lora = p.watermark_lora(seed);
    const auto defaults = settings_of(p);
    nlohmann::json per = nlohmann::json::object();
    std::vector<std::vector<std::string>> rows;
    double lo = 1.0, hi = 0.0;
    std::vector<std::string> names;
    std::vector<double> accs;
    for (const auto& cell : cells) {
        auto settings = defaults;
        settings.opts.kind = cell.kind;
        settings.opts.steps = cell.steps;
        settings.opts.guidance_scale = cell.guidance;
        auto samples = generate_watermarked(base, ae, p.schedule(), merged_weights(base, lora.lora, settings.alpha),
                                            settings, static_cast<std::size_t>(lora.lora.payload_bits()), false);
        auto s = score_images(codec.decoder, samples.images, samples.truth, settings.target_fpr);
        per[cell.name()] = s.to_json();
        rows.push_back({cell.name(), fmt_num(s.bit_acc), fmt_num(s.tpr)});
        names.push_back(cell.name());
        accs.push_back(s.bit_acc);
        if (cell.guidance == defaults.opts.guidance_scale) {
            lo = std::min(lo, s.bit_acc);
            hi = std::max(hi, s.bit_acc);
        }
    }
    auto result = tag({{"cells", per}, {"spread", hi >= lo ? hi - lo : 0.0}}, p, seed, "sampler_sweep");
    write_json(out_dir / "sampler_sweep.json", result);
    write_csv(out_dir / "sampler_sweep.csv", {"cell", "bit_acc", "tpr"}, rows);
    plot_bars(out_dir / "sampler_sweep.png", "bit accuracy per sampler", names, accs);
    return result;
}

nlohmann::json run_alpha_sweep(Pipeline& p, std::uint64_t seed, const std::vector<double>& alphas,
                               const std::filesystem::path& out_dir) {
    if (alphas.size() < 2) throw ConfigError("alpha sweep: need at least two alpha values");
    auto base = p.base_model();
    auto ae = p.autoencoder();
    auto codec = p.codec(seed);
    auto lora = p.watermark_lora(seed);
    watermark::PerceptualProxy proxy;
    nlohmann::json per = nlohmann::json::array();
    std::vector<double> accs, drifts;
    std::vector<std::vector<std::string>> rows;
    for (double alpha : alphas) {
        auto settings = settings_of(p);
        settings.alpha = alpha;
        auto samples = generate_watermarked(base, ae, p.schedule(), merged_weights(base, lora.lora, alpha), settings,
                                            static_cast<std::size_t>(lora.lora.payload_bits()), true);
        auto s = score_images(codec.decoder, samples.images, samples.truth, settings.target_fpr);
        double d = drift(samples.images, samples.clean_images, proxy);
        per.push_back({{"alpha", alpha}, {"bit_acc", s.bit_acc}, {"tpr", s.tpr}, {"drift", d}});
        accs.push_back(s.bit_acc);
        drifts.push_back(d);
        rows.push_back({fmt_num(alpha), fmt_num(s.bit_acc), fmt_num(s.tpr), fmt_num(d)});
    }
    auto result = tag({{"points", per}, {"spearman", spearman(alphas, accs)}}, p, seed, "alpha_sweep");
    write_json(out_dir / "alpha_sweep.json", result);
    write_csv(out_dir / "alpha_sweep.csv", {"alpha", "bit_acc", "tpr", "drift"}, rows);
    plot_lines(out_dir / "alpha_sweep.png", "accuracy and drift vs alpha", "alpha", "value",
               {{"bit acc", alphas, accs}, {"drift", alphas, drifts}});
    return result;
}

nlohmann::json run_finetune_attack(Pipeline& p, std::uint64_t seed, const std::filesystem::path& out_dir,
                                   const nlohmann::json& lora_overrides) {
    const auto& a = section(p.config(), "attack");
    const int steps = get_or(a, "steps", 2000);
    const int every = std::max(1, get_or(a, "every", 250));
    const int batch = get_or(a, "batch_size", 64);
    const double lr = get_or(a, "lr", 1e-3);
    auto base = p.base_model();
    auto ae = p.autoencoder();
    auto codec = p.codec(seed);
    auto lora = p.watermark_lora(seed, lora_overrides);
    auto settings = settings_of(p);
    settings.secrets = 1;
    settings.per_secret = get_or(a, "samples", 128);
    const auto secret = eval_secrets(1, static_cast<std::size_t>(lora.lora.payload_bits()), settings.seed).front();

    auto model = p.make_unet();
    load_into(*model, lora::merge(snapshot(*base), lora.lora, secret, settings.alpha));
    auto latents = diffusion::encode_all(ae, p.train_set().images);
    const auto& labels = p.train_set().labels;

    auto labels_eval = random_labels(settings.per_secret, base->config().num_classes, settings.seed * 7919ULL);
    auto opts = settings.opts;
    opts.seed = settings.seed * 104729ULL;
    auto clean = generate_images(base, ae, p.schedule(), labels_eval, opts, settings.latent_size);
    auto truth = secret.to_tensor().unsqueeze(0).expand({settings.per_secret, -1}).contiguous();
    watermark::PerceptualProxy proxy;

    nlohmann::json curve = nlohmann::json::array();
    std::vector<double> xs, accs, drifts;
    std::vector<std::vector<std::string>> rows;
    auto measure = [&](int step) {
        model->eval();
        auto images = generate_images(model, ae, p.schedule(), labels_eval, opts, settings.latent_size);
        auto s = score_images(codec.decoder, images, truth, settings.target_fpr);
        double d = drift(images, clean, proxy);
        curve.push_back({{"step", step}, {"bit_acc", s.bit_acc}, {"tpr", s.tpr}, {"drift", d}});
        xs.push_back(step);
        accs.push_back(s.bit_acc);
        drifts.push_back(d);
        rows.push_back({std::to_string(step), fmt_num(s.bit_acc), fmt_num(s.tpr), fmt_num(d)});
    };
    measure(0);
    auto gen = make_generator(seed ^ 0xF1E7F1E7ULL);
    for (auto& prm : model->parameters()) prm.requires_grad_(true);
    torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(lr).weight_decay(0.0));
    const auto null = model->config().null_label();
    for (int step = 1; step <= steps; ++step) {
        model->train();
        auto idx = torch::randint(0, latents.size(0), {batch}, gen, torch::kLong);
        auto z0 = latents.index_select(0, idx);
        auto c = diffusion::drop_labels(labels.index_select(0, idx), 0.1, null, gen);
        auto t = diffusion::sample_timesteps(batch, p.schedule().T, gen);
        auto eps = torch::randn(z0.sizes(), gen);
        auto loss = diffusion::diffusion_loss(
            model->forward(diffusion::forward_diffuse(z0, t, eps, p.schedule()), t.to(torch::kFloat32), c), eps);
        opt.zero_grad();
        loss.backward();
        torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
        opt.step();
        if (!std::isfinite(loss.item<double>())) throw TrainingError("fine-tune attack diverged at step " + std::to_string(step));
        if (step % every == 0 || step == steps) measure(step);
    }
    auto result = tag({{"curve", curve},
                       {"initial_acc", accs.front()},
                       {"final_acc", accs.back()},
                       {"initial_drift", drifts.front()},
                       {"final_drift", drifts.back()},
                       {"rank", lora.lora.rank()}},
                      p, seed, "finetune_attack");
    write_json(out_dir / "finetune_attack.json", result);
    write_csv(out_dir / "finetune_attack.csv", {"step", "bit_acc", "tpr", "drift"}, rows);
    plot_lines(out_dir / "finetune_attack.png", "fine-tune attack", "step", "value",
               {{"bit acc", xs, accs}, {"drift", xs, drifts}});
    return result;
}

std::vector<AblationCell> default_ablation_cells(const nlohmann::json& cfg) {
    std::vector<AblationCell> cells{{"ppft", nlohmann::json::object()},
                                    {"naive", {{"objective", "naive"}}},
                                    {"normal_init", {{"init", "normal"}}}};
    for (auto r : section(cfg, "ablation").value("ranks", std::vector<std::int64_t>{})) {
        cells.push_back({"rank" + std::to_string(r), {{"rank", r}}});
    }
    return cells;
}

nlohmann::json run_ablation_suite(Pipeline& p, std::uint64_t seed, const std::vector<AblationCell>& cells,
                                  const std::filesystem::path& out_dir) {
    if (cells.empty()) throw ConfigError("ablation: no cells");
    auto base = p.base_model();
    auto ae = p.autoencoder();
    auto codec = p.codec(seed);
    auto settings = settings_of(p);
    watermark::PerceptualProxy proxy;
    nlohmann::json per = nlohmann::json::object();
    std::vector<std::vector<std::string>> rows;
    for (const auto& cell : cells) {
        auto lora = p.watermark_lora(seed, cell.overrides);
        auto samples = generate_watermarked(base, ae, p.schedule(), merged_weights(base, lora.lora, settings.alpha),
                                            settings, static_cast<std::size_t>(lora.lora.payload_bits()), true);
        auto s = score_images(codec.decoder, samples.images, samples.truth, settings.target_fpr);
        double d = drift(samples.images, samples.clean_images, proxy);
        per[cell.name] = {{"bit_acc", s.bit_acc}, {"tpr", s.tpr}, {"drift", d}, {"overrides", cell.overrides},
                          {"ppft", lora.info}};
        rows.push_back({cell.name, fmt_num(s.bit_acc), fmt_num(s.tpr), fmt_num(d)});
    }
    auto result = tag({{"cells", per}}, p, seed, "ablation");
    write_json(out_dir / "ablation.json", result);
    write_csv(out_dir / "ablation.csv", {"cell", "bit_acc", "tpr", "drift"}, rows);
    return result;
}

nlohmann::json run_prvl_ablation(Pipeline& p, std::uint64_t seed, const std::filesystem::path& out_dir) {
    auto ae = p.autoencoder();
    const auto& images = p.heldout_set().images;
    const auto window = get_or<std::int64_t>(section(p.config(), "stage1"), "prvl_window", 7);
    nlohmann::json per = nlohmann::json::object();
    std::vector<std::vector<std::string>> rows;
    for (const std::string mode : {"none", "mse", "prvl"}) {
        auto codec = p.codec(seed, {{"region_loss", mode}});
        torch::NoGradGuard g;
        auto gen = make_generator(seed + 5);
        auto z = ae->encode(images);
        auto rec = ae->decode(z);
        auto bits = watermark::random_bits(images.size(0), codec.encoder->config().payload_bits, gen);
        auto wm = ae->decode(watermark::embed_latent(z, codec.encoder->forward(bits)));
        double peak = 0.0;
        for (std::int64_t i = 0; i < images.size(0); ++i) {
            peak = std::max(peak, watermark::prvl_loss(rec[i], wm[i], window).item<double>());
        }
        auto s = score_rows(extract_bits(codec.decoder, wm), bits, 1e-4);
        double ps = psnr(wm, rec);
        double ss = ssim(wm, rec);
        double mean_peak = watermark::prvl_loss(rec, wm, window).item<double>();
        per[mode] = {{"psnr", ps}, {"ssim", ss}, {"peak_region_mean", mean_peak}, {"peak_region_max", peak},
                     {"bit_acc", s.bit_acc}};
        rows.push_back({mode, fmt_num(ps), fmt_num(ss), fmt_num(mean_peak), fmt_num(peak), fmt_num(s.bit_acc)});
    }
    auto result = tag({{"cells", per}}, p, seed, "prvl_ablation");
    write_json(out_dir / "prvl_ablation.json", result);
    write_csv(out_dir / "prvl_ablation.csv", {"loss", "psnr", "ssim", "peak_region_mean", "peak_region_max", "bit_acc"},
              rows);
    return result;
}

nlohmann::json run_collusion_experiment(Pipeline& p, std::uint64_t seed, std::int64_t n_samples, double ratio,
                                        const std::filesystem::path& out_dir) {
    auto base = p.base_model();
    auto ae = p.autoencoder();
    auto codec = p.codec(seed);
    auto lora = p.watermark_lora(seed);
    auto settings = settings_of(p);
    const auto l = static_cast<std::size_t>(lora.lora.payload_bits());
    // Redraw until every (b1, b2) cell has at least two positions.
    watermark::SecretMessage s1, s2;
    for (std::uint64_t attempt = 0;; ++attempt) {
        s1 = watermark::SecretMessage::random(l, seed * 7777ULL + 2 * attempt);
        s2 = watermark::SecretMessage::random(l, seed * 7777ULL + 2 * attempt + 1);
        std::array<int, 4> counts{};
        for (std::size_t i = 0; i < l; ++i) ++counts[static_cast<std::size_t>(2 * s1[i] + s2[i])];
        if (*std::min_element(counts.begin(), counts.end()) >= 2 || attempt > 1000) break;
    }
    auto weights = snapshot(*base);
    auto m1 = lora::merge(weights, lora.lora, s1, settings.alpha);
    auto m2 = lora::merge(weights, lora.lora, s2, settings.alpha);
    auto mixed = detection::collusion_merge(m1, m2, ratio);
    auto model = p.make_unet();
    load_into(*model, mixed);
    model->eval();
    auto extract = [&](std::int64_t n) {
        auto labels = random_labels(n, base->config().num_classes, settings.seed * 131ULL + seed);
        auto opts = settings.opts;
        opts.seed = settings.seed * 65537ULL + seed;
        return extract_bits(codec.decoder, generate_images(model, ae, p.schedule(), labels, opts, settings.latent_size));
    };
    auto report = detection::collusion_stats(extract, s1, s2, n_samples, ratio);
    auto result = tag({{"report", report.to_json()}, {"s1", s1.to_string()}, {"s2", s2.to_string()}}, p, seed,
                      "collusion");
    write_json(out_dir / "collusion.json", result);
    std::vector<std::vector<std::string>> rows;
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            rows.push_back({std::to_string(a), std::to_string(b), fmt_num(report.expectations[a][b]),
                            std::to_string(report.positions[a][b])});
        }
    }
    write_csv(out_dir / "collusion.csv", {"bit_model1", "bit_model2", "mean_extracted", "positions"}, rows);
    return result;
}

}  // namespace wmlora::harness
