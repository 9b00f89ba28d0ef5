#pragma once

#include "wmlora/common.hpp"

namespace wmlora::lora {

/// Low-rank factors of one target layer: delta W = A * diag(S) * B with
/// A of shape (n, r) and B of shape (r, m), where (n, m) is the layer's
/// weight viewed as a matrix (conv kernels flattened to (out, in*kh*kw)).
struct LoraFactors {
    torch::Tensor A;
    torch::Tensor B;
};

using LoraLayers = std::map<std::string, LoraFactors>;

/// Per-forward LoRA state: which factors apply, the per-sample scaling
/// diagonals (N, r) and the merge strength. Layers not present in `layers`
/// run unadapted.
struct LoraRuntime {
    const LoraLayers* layers = nullptr;
    torch::Tensor scale;
    double alpha = 1.0;

    const LoraFactors* find(const std::string& key) const {
        if (layers == nullptr) return nullptr;
        auto it = layers->find(key);
        return it == layers->end() ? nullptr : &it->second;
    }

    /// Same factors with the scale batch tiled `times` times (for CFG batching).
    LoraRuntime repeated(std::int64_t times) const {
        LoraRuntime r = *this;
        if (scale.defined() && times > 1) r.scale = scale.repeat({times, 1});
        return r;
    }
};

}  // namespace wmlora::lora
