#include "wmlora/diffusion/toy_dataset.hpp"

#include <array>
#include <cmath>
#include <random>

namespace wmlora::diffusion {

LabeledImages LabeledImages::slice(std::int64_t begin, std::int64_t end) const {
    return {images.slice(0, begin, end), labels.slice(0, begin, end)};
}

namespace {

using Rgb = std::array<float, 3>;

float smoothstep_edge(float signed_dist, float softness = 0.75f) {
    // 1 inside (negative distance), 0 outside, linear ramp across the edge.
    return std::clamp(0.5f - signed_dist / (2.0f * softness), 0.0f, 1.0f);
}

Rgb random_color(std::mt19937_64& rng) {
    std::uniform_real_distribution<float> u(0.05f, 0.95f);
    return {u(rng), u(rng), u(rng)};
}

float color_distance(const Rgb& a, const Rgb& b) {
    return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

}  // namespace

LabeledImages make_toy_dataset(std::int64_t count, std::uint64_t seed, std::int64_t size) {
    if (count <= 0) throw ConfigError("toy dataset needs a positive image count");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    std::uniform_int_distribution<int> pick_class(0, static_cast<int>(kToyClasses) - 1);

    auto images = torch::empty({count, 3, size, size});
    auto labels = torch::empty({count}, torch::kLong);
    auto img = images.accessor<float, 4>();
    const auto S = static_cast<float>(size);

    for (std::int64_t n = 0; n < count; ++n) {
        const int cls = pick_class(rng);
        labels[n] = cls;
        Rgb bg_top = random_color(rng);
        Rgb bg_bottom = random_color(rng);
        Rgb fg = random_color(rng);
        while (color_distance(fg, bg_top) < 0.9f || color_distance(fg, bg_bottom) < 0.9f) fg = random_color(rng);

        const float cx = S * (0.3f + 0.4f * unit(rng));
        const float cy = S * (0.3f + 0.4f * unit(rng));
        const float radius = S * (0.18f + 0.14f * unit(rng));
        const float period = 4.0f + 5.0f * unit(rng);
        const float phase = period * unit(rng);
        const float angle = 6.2831853f * unit(rng);
        const float width = 1.5f + 2.0f * unit(rng);
        const float cx2 = S * (0.2f + 0.6f * unit(rng));
        const float cy2 = S * (0.2f + 0.6f * unit(rng));

        for (std::int64_t y = 0; y < size; ++y) {
            for (std::int64_t x = 0; x < size; ++x) {
                const float px = static_cast<float>(x) + 0.5f;
                const float py = static_cast<float>(y) + 0.5f;
                const float dx = px - cx;
                const float dy = py - cy;
                float mask = 0.0f;
                switch (cls) {
                    case 0:  // disc
                        mask = smoothstep_edge(std::hypot(dx, dy) - radius);
                        break;
                    case 1: {  // square, rotated
                        float c = std::cos(angle), s = std::sin(angle);
                        float rx = c * dx + s * dy, ry = -s * dx + c * dy;
                        mask = smoothstep_edge(std::max(std::abs(rx), std::abs(ry)) - radius * 0.85f);
                        break;
                    }
                    case 2: {  // upward triangle
                        float d1 = dy - radius * 0.6f;
                        float d2 = (-dy * 0.5f + std::abs(dx) * 0.866f) - radius * 0.45f;
                        mask = smoothstep_edge(std::max(d1, d2));
                        break;
                    }
                    case 3:  // horizontal stripes
                        mask = std::fmod(py + phase, period) < period * 0.5f ? 1.0f : 0.0f;
                        break;
                    case 4:  // vertical stripes
                        mask = std::fmod(px + phase, period) < period * 0.5f ? 1.0f : 0.0f;
                        break;
                    case 5: {  // checkerboard
                        int a = static_cast<int>(std::floor((px + phase) / period));
                        int b = static_cast<int>(std::floor((py + phase) / period));
                        mask = ((a + b) & 1) ? 1.0f : 0.0f;
                        break;
                    }
                    case 6:  // ring
                        mask = smoothstep_edge(std::abs(std::hypot(dx, dy) - radius) - width);
                        break;
                    case 7:  // cross
                        mask = smoothstep_edge(std::min(std::abs(dx), std::abs(dy)) - width);
                        mask *= smoothstep_edge(std::max(std::abs(dx), std::abs(dy)) - radius * 1.2f);
                        break;
                    case 8:  // diagonal stripes
                        mask = std::fmod(px + py + 2.0f * S + phase, period * 1.4f) < period * 0.7f ? 1.0f : 0.0f;
                        break;
                    default: {  // two soft blobs
                        float d2a = (dx * dx + dy * dy) / (radius * radius * 0.5f);
                        float ex = px - cx2, ey = py - cy2;
                        float d2b = (ex * ex + ey * ey) / (radius * radius * 0.3f);
                        mask = std::clamp(std::exp(-d2a) + std::exp(-d2b), 0.0f, 1.0f);
                        break;
                    }
                }
                const float v = static_cast<float>(y) / (S - 1.0f);
                for (int ch = 0; ch < 3; ++ch) {
                    float bg = bg_top[ch] * (1.0f - v) + bg_bottom[ch] * v;
                    img[n][ch][y][x] = bg * (1.0f - mask) + fg[ch] * mask;
                }
            }
        }
    }
    return {images, labels};
}

}  // namespace wmlora::diffusion
