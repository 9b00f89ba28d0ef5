#pragma once

#include "wmlora/checkpoint.hpp"
#include "wmlora/lora/adapter.hpp"
#include "wmlora/watermark/secret.hpp"

#include <string_view>

namespace wmlora::lora {

enum class MapperInit { normal, orthogonal };

MapperInit parse_mapper_init(std::string_view name);
std::string to_string(MapperInit init);

/// Bit embeddings I_1..I_l, stored as rows of an (l, r) tensor.
/// f_i(1) = I_i and f_i(0) = 0.
struct SecretMapper {
    torch::Tensor embeddings;
    MapperInit init = MapperInit::orthogonal;

    std::int64_t payload_bits() const { return embeddings.size(0); }
    std::int64_t rank() const { return embeddings.size(1); }
};

/// Normal: iid N(0,1) entries. Orthogonal: mutually orthogonal rows, each of
/// norm sqrt(r) so both modes have the same expected row norm. Orthogonal
/// needs r >= l.
SecretMapper init_mapper(std::int64_t l, std::int64_t r, MapperInit mode, std::uint64_t seed);

/// Diagonal of S for a batch of bit rows (N, l): 1 + bits * I / sqrt(l), shape (N, r).
/// Differentiable in `embeddings`.
torch::Tensor scaling_diagonals(const torch::Tensor& bits, const torch::Tensor& embeddings);

/// Diagonal of S for a single secret, shape (r).
torch::Tensor build_scaling_matrix(const watermark::SecretMessage& s, const SecretMapper& mapper);

/// A * diag(s) * B.
torch::Tensor lora_delta(const torch::Tensor& A, const torch::Tensor& B, const torch::Tensor& diag);

/// Secret-conditioned low-rank adapter over a fixed set of target weights.
class WatermarkLoRA {
public:
    WatermarkLoRA() = default;

    /// Fresh adapter: B ~ N(0, 1/m) per layer, A = 0 so the adapted model
    /// starts out identical to the base.
    static WatermarkLoRA create(const std::map<std::string, std::pair<std::int64_t, std::int64_t>>& target_shapes,
                                std::int64_t rank, std::int64_t payload_bits, MapperInit init, std::uint64_t seed,
                                double alpha = 1.05);

    const LoraLayers& layers() const { return layers_; }
    LoraLayers& layers() { return layers_; }
    const SecretMapper& mapper() const { return mapper_; }
    SecretMapper& mapper() { return mapper_; }
    std::int64_t rank() const { return mapper_.rank(); }
    std::int64_t payload_bits() const { return mapper_.payload_bits(); }
    double default_alpha() const { return alpha_; }
    std::vector<std::string> targets() const;

    /// A, B of every layer plus the mapper embeddings.
    std::vector<torch::Tensor> parameters() const;
    void set_requires_grad(bool on);

    /// Functional (merge-free) runtime for bit rows (N, l).
    LoraRuntime runtime(const torch::Tensor& bits, double alpha) const;

    /// Per-layer delta W(s), each shaped (n, m).
    NamedTensors deltas(const watermark::SecretMessage& s) const;

    Checkpoint to_checkpoint() const;
    static WatermarkLoRA from_checkpoint(const Checkpoint& ckpt);

private:
    LoraLayers layers_;
    SecretMapper mapper_;
    double alpha_ = 1.05;
};

/// Returns a copy of `model` with every target weight replaced by W + alpha * dW(s),
/// reshaped to the weight's shape. The input is not modified.
NamedTensors merge(const NamedTensors& model, const WatermarkLoRA& lora, const watermark::SecretMessage& s,
                   double alpha);

/// Inverse of `merge`: W - alpha * dW(s).
NamedTensors unmerge(const NamedTensors& model, const WatermarkLoRA& lora, const watermark::SecretMessage& s,
                     double alpha);

}  // namespace wmlora::lora
