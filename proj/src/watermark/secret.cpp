#include "wmlora/watermark/secret.hpp"

#include <cctype>
#include <random>

namespace wmlora::watermark {

SecretMessage::SecretMessage(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto b : bits_) {
        if (b > 1) throw PayloadError("secret bits must be 0 or 1");
    }
}

SecretMessage SecretMessage::parse(std::string_view text, std::size_t length) {
    if (text.empty()) throw PayloadError("empty secret");
    bool binary = text.size() == length;
    for (char c : text) binary = binary && (c == '0' || c == '1');
    std::vector<std::uint8_t> bits;
    if (binary) {
        for (char c : text) bits.push_back(static_cast<std::uint8_t>(c - '0'));
        return SecretMessage(std::move(bits));
    }
    if (text.starts_with("0x") || text.starts_with("0X")) text.remove_prefix(2);
    for (char c : text) {
        if (!std::isxdigit(static_cast<unsigned char>(c))) {
            throw PayloadError("secret '" + std::string(text) + "' is neither a " + std::to_string(length) +
                               "-bit string nor hex");
        }
        int v = std::isdigit(static_cast<unsigned char>(c)) ? c - '0' : std::tolower(c) - 'a' + 10;
        for (int k = 3; k >= 0; --k) bits.push_back(static_cast<std::uint8_t>((v >> k) & 1));
    }
    if (bits.size() < length) {
        throw PayloadError("hex secret has " + std::to_string(bits.size()) + " bits, need " + std::to_string(length));
    }
    // Drop leading padding nibble bits; they must be zero.
    std::size_t extra = bits.size() - length;
    for (std::size_t i = 0; i < extra; ++i) {
        if (bits[i] != 0) throw PayloadError("hex secret exceeds " + std::to_string(length) + " bits");
    }
    return SecretMessage(std::vector<std::uint8_t>(bits.begin() + static_cast<std::ptrdiff_t>(extra), bits.end()));
}

SecretMessage SecretMessage::random(std::size_t length, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::uint8_t> bits(length);
    for (auto& b : bits) b = static_cast<std::uint8_t>(rng() & 1U);
    return SecretMessage(std::move(bits));
}

SecretMessage SecretMessage::from_tensor(const torch::Tensor& t) {
    auto flat = t.detach().to(torch::kCPU).flatten().to(torch::kFloat64);
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(flat.numel()));
    auto acc = flat.accessor<double, 1>();
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
        if (acc[i] != 0.0 && acc[i] != 1.0) throw PayloadError("secret tensor entries must be 0 or 1");
        bits[static_cast<std::size_t>(i)] = acc[i] != 0.0 ? 1 : 0;
    }
    return SecretMessage(std::move(bits));
}

torch::Tensor SecretMessage::to_tensor() const {
    auto t = torch::empty({static_cast<std::int64_t>(bits_.size())});
    for (std::size_t i = 0; i < bits_.size(); ++i) t[static_cast<std::int64_t>(i)] = static_cast<float>(bits_[i]);
    return t;
}

std::string SecretMessage::to_string() const {
    std::string s;
    for (auto b : bits_) s.push_back(static_cast<char>('0' + b));
    return s;
}

SecretMessage SecretMessage::complement() const {
    std::vector<std::uint8_t> out(bits_.size());
    for (std::size_t i = 0; i < bits_.size(); ++i) out[i] = static_cast<std::uint8_t>(1 - bits_[i]);
    return SecretMessage(std::move(out));
}

torch::Tensor random_bits(std::int64_t n, std::int64_t l, torch::Generator& gen) {
    return torch::randint(0, 2, {n, l}, gen, torch::kLong).to(torch::kFloat32);
}

torch::Tensor threshold_bits(const torch::Tensor& probabilities) {
    return (probabilities > 0.5).to(torch::kFloat32);
}

}  // namespace wmlora::watermark
