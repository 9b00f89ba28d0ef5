#include "wmlora/harness/metrics.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace wmlora::harness {

namespace F = torch::nn::functional;

MetricsLog::MetricsLog(std::filesystem::path path, std::string config_hash)
    : path_(std::move(path)), config_hash_(std::move(config_hash)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void MetricsLog::append(nlohmann::json record, std::optional<std::uint64_t> seed) {
    if (!record.contains("config_hash")) record["config_hash"] = config_hash_;
    if (seed && !record.contains("seed")) record["seed"] = *seed;
    std::lock_guard lock(mu_);
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append to " + path_.string());
    out << record.dump() << '\n';
}

void write_json(const std::filesystem::path& path, const nlohmann::json& value) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << value.dump(2) << '\n';
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
        out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
}

std::string fmt_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
    require_same_shape(a, b, "psnr");
    double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const torch::Tensor& a, const torch::Tensor& b) {
    require_same_shape(a, b, "ssim");
    auto x = (a.dim() == 3 ? a.unsqueeze(0) : a).to(torch::kFloat64);
    auto y = (b.dim() == 3 ? b.unsqueeze(0) : b).to(torch::kFloat64);
    const auto c = x.size(1);
    const std::int64_t k = std::min<std::int64_t>({11, x.size(2), x.size(3)});
    auto coords = torch::arange(k, torch::kFloat64) - (k - 1) / 2.0;
    auto g = torch::exp(-coords.pow(2) / (2.0 * 1.5 * 1.5));
    g = g / g.sum();
    auto window = torch::outer(g, g).view({1, 1, k, k}).repeat({c, 1, 1, 1});
    auto blur = [&](const torch::Tensor& t) { return F::conv2d(t, window, F::Conv2dFuncOptions().groups(c)); };
    const double c1 = 0.01 * 0.01;
    const double c2 = 0.03 * 0.03;
    auto mx = blur(x);
    auto my = blur(y);
    auto sxx = blur(x * x) - mx * mx;
    auto syy = blur(y * y) - my * my;
    auto sxy = blur(x * y) - mx * my;
    auto map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    return map.mean().item<double>();
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
        i = j + 1;
    }
    return r;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

const std::vector<cv::Scalar> kPalette{{180, 119, 31}, {14, 127, 255}, {44, 160, 44},  {40, 39, 214},
                                       {189, 103, 148}, {75, 86, 140}, {194, 119, 227}, {127, 127, 127}};

struct Frame {
    cv::Mat img;
    cv::Rect area;
};

Frame make_frame(const std::string& title) {
    Frame f{cv::Mat(480, 720, CV_8UC3, cv::Scalar(255, 255, 255)), cv::Rect(70, 40, 620, 380)};
    cv::putText(f.img, title, {70, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.6, {0, 0, 0}, 1, cv::LINE_AA);
    cv::rectangle(f.img, f.area, {0, 0, 0}, 1);
    return f;
}

void save_png(const std::filesystem::path& path, const cv::Mat& img) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), img)) throw IoError("cannot write plot " + path.string());
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman needs two equal-length series (n >= 2)");
    return pearson(ranks(x), ranks(y));
}

void plot_lines(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                const std::string& ylabel, const std::vector<Series>& series) {
    auto f = make_frame(title);
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
        for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto to_px = [&](double x, double y) {
        return cv::Point(f.area.x + static_cast<int>((x - x0) / (x1 - x0) * f.area.width),
                         f.area.y + f.area.height - static_cast<int>((y - y0) / (y1 - y0) * f.area.height));
    };
    for (std::size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const auto& col = kPalette[si % kPalette.size()];
        for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
            auto p = to_px(s.x[i], s.y[i]);
            cv::circle(f.img, p, 3, col, cv::FILLED, cv::LINE_AA);
            if (i > 0) cv::line(f.img, to_px(s.x[i - 1], s.y[i - 1]), p, col, 2, cv::LINE_AA);
        }
        cv::putText(f.img, s.name, {f.area.x + 10, f.area.y + 20 + 18 * static_cast<int>(si)}, cv::FONT_HERSHEY_SIMPLEX,
                    0.5, col, 1, cv::LINE_AA);
    }
    auto small = [&](const std::string& text, cv::Point at) {
        cv::putText(f.img, text, at, cv::FONT_HERSHEY_SIMPLEX, 0.4, {60, 60, 60}, 1, cv::LINE_AA);
    };
    small(fmt_num(x0), {f.area.x, f.area.y + f.area.height + 15});
    small(fmt_num(x1), {f.area.x + f.area.width - 30, f.area.y + f.area.height + 15});
    small(fmt_num(y0), {5, f.area.y + f.area.height});
    small(fmt_num(y1), {5, f.area.y + 10});
    small(xlabel, {f.area.x + f.area.width / 2 - 20, f.area.y + f.area.height + 35});
    small(ylabel, {5, f.area.y + f.area.height / 2});
    save_png(path, f.img);
}

void plot_bars(const std::filesystem::path& path, const std::string& title, const std::vector<std::string>& labels,
               const std::vector<double>& values) {
    auto f = make_frame(title);
    if (values.empty()) {
        save_png(path, f.img);
        return;
    }
    double vmax = std::max(1e-12, *std::max_element(values.begin(), values.end()));
    const int slot = f.area.width / static_cast<int>(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        int h = static_cast<int>(std::max(0.0, values[i]) / vmax * (f.area.height - 20));
        int x = f.area.x + static_cast<int>(i) * slot + slot / 6;
        cv::rectangle(f.img, cv::Rect(x, f.area.y + f.area.height - h, slot * 2 / 3, h), kPalette[0], cv::FILLED);
        cv::putText(f.img, fmt_num(values[i]), {x, f.area.y + f.area.height - h - 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                    {0, 0, 0}, 1, cv::LINE_AA);
        if (i < labels.size()) {
            cv::putText(f.img, labels[i], {x, f.area.y + f.area.height + 15}, cv::FONT_HERSHEY_SIMPLEX, 0.4,
                        {0, 0, 0}, 1, cv::LINE_AA);
        }
    }
    save_png(path, f.img);
}

}  // namespace wmlora::harness
