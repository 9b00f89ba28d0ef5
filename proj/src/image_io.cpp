#include "wmlora/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace wmlora {

namespace {

cv::Mat to_bgr8(const torch::Tensor& image) {
    if (image.dim() != 3 || image.size(0) != 3) {
        throw ShapeError("expected (3,H,W) image, got " + c10::str(image.sizes()));
    }
    auto hwc = image.detach()
                   .to(torch::kCPU, torch::kFloat32)
                   .clamp(0.0, 1.0)
                   .mul(255.0)
                   .round()
                   .to(torch::kUInt8)
                   .permute({1, 2, 0})
                   .contiguous();
    cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr());
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    return bgr;
}

torch::Tensor from_bgr8(const cv::Mat& bgr) {
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
    return t.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous();
}

}  // namespace

void write_png(const torch::Tensor& image, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), to_bgr8(image))) throw IoError("failed to write " + path.string());
}

torch::Tensor read_image(const std::filesystem::path& path) {
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (m.empty()) throw IoError("failed to read image " + path.string());
    return from_bgr8(m);
}

torch::Tensor jpeg_roundtrip(const torch::Tensor& images, int quality) {
    if (images.dim() == 3) return jpeg_roundtrip(images.unsqueeze(0), quality).squeeze(0);
    std::vector<torch::Tensor> out;
    out.reserve(static_cast<std::size_t>(images.size(0)));
    std::vector<int> params{cv::IMWRITE_JPEG_QUALITY, quality};
    for (std::int64_t i = 0; i < images.size(0); ++i) {
        std::vector<uchar> buf;
        if (!cv::imencode(".jpg", to_bgr8(images[i]), buf, params)) throw IoError("JPEG encode failed");
        cv::Mat dec = cv::imdecode(buf, cv::IMREAD_COLOR);
        out.push_back(from_bgr8(dec));
    }
    return torch::stack(out);
}

torch::Tensor resize_bilinear(const torch::Tensor& images, std::int64_t height, std::int64_t width) {
    if (images.dim() == 3) return resize_bilinear(images.unsqueeze(0), height, width).squeeze(0);
    if (images.size(2) == height && images.size(3) == width) return images;
    namespace F = torch::nn::functional;
    return F::interpolate(images, F::InterpolateFuncOptions()
                                      .size(std::vector<std::int64_t>{height, width})
                                      .mode(torch::kBilinear)
                                      .align_corners(false));
}

torch::Tensor make_grid(const torch::Tensor& images, std::int64_t cols) {
    auto n = images.size(0);
    auto h = images.size(2);
    auto w = images.size(3);
    auto rows = (n + cols - 1) / cols;
    auto grid = torch::ones({3, rows * (h + 1) + 1, cols * (w + 1) + 1});
    for (std::int64_t i = 0; i < n; ++i) {
        auto r = i / cols;
        auto c = i % cols;
        grid.narrow(1, r * (h + 1) + 1, h).narrow(2, c * (w + 1) + 1, w).copy_(images[i]);
    }
    return grid;
}

}  // namespace wmlora
