#pragma once

#include "wmlora/common.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <mutex>
#include <optional>

namespace wmlora::harness {

/// Append-only JSONL file. Every record gets `config_hash` and `seed` fields
/// if they are absent. Safe to share across threads.
class MetricsLog {
public:
    MetricsLog(std::filesystem::path path, std::string config_hash);
    void append(nlohmann::json record, std::optional<std::uint64_t> seed = std::nullopt);
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::string config_hash_;
    std::mutex mu_;
};

void write_json(const std::filesystem::path& path, const nlohmann::json& value);

/// CSV with a header row; cells are written as-is (numbers via %.6g).
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

std::string fmt_num(double v);

/// PSNR in dB for images in [0,1]; identical inputs give the 100 dB cap.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

/// Mean SSIM (11x11 Gaussian window, sigma 1.5) over images and channels.
double ssim(const torch::Tensor& a, const torch::Tensor& b);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

/// Line chart rendered to PNG.
void plot_lines(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                const std::string& ylabel, const std::vector<Series>& series);

/// Bar chart rendered to PNG.
void plot_bars(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& labels,
               const std::vector<double>& values);

}  // namespace wmlora::harness
