#pragma once

#include "wmlora/common.hpp"

#include <string_view>

namespace wmlora::watermark {

/// Fixed-length bit string carried by the watermark.
class SecretMessage {
public:
    SecretMessage() = default;
    explicit SecretMessage(std::vector<std::uint8_t> bits);

    /// Accepts a 0/1 string ("0110...") or hex ("0x3fa2" / "3fa2", MSB first)
    /// expanded to `length` bits. Throws PayloadError on malformed input.
    static SecretMessage parse(std::string_view text, std::size_t length);
    static SecretMessage random(std::size_t length, std::uint64_t seed);
    static SecretMessage zeros(std::size_t length) { return SecretMessage(std::vector<std::uint8_t>(length, 0)); }
    static SecretMessage from_tensor(const torch::Tensor& bits);

    std::size_t size() const { return bits_.size(); }
    const std::vector<std::uint8_t>& bits() const { return bits_; }
    std::uint8_t operator[](std::size_t i) const { return bits_[i]; }

    /// Float tensor (l) with entries 0/1.
    torch::Tensor to_tensor() const;
    std::string to_string() const;
    SecretMessage complement() const;

    bool operator==(const SecretMessage&) const = default;

private:
    std::vector<std::uint8_t> bits_;
};

/// Uniform random bit matrix (n, l) as float 0/1.
torch::Tensor random_bits(std::int64_t n, std::int64_t l, torch::Generator& gen);

/// Hard decisions from probabilities: p > 0.5 -> 1.
torch::Tensor threshold_bits(const torch::Tensor& probabilities);

}  // namespace wmlora::watermark
