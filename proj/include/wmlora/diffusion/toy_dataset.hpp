#pragma once

#include "wmlora/common.hpp"

namespace wmlora::diffusion {

/// Labeled image set; images (N,3,H,W) in [0,1], labels (N) int64.
struct LabeledImages {
    torch::Tensor images;
    torch::Tensor labels;

    std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
    LabeledImages slice(std::int64_t begin, std::int64_t end) const;
};

constexpr std::int64_t kToyClasses = 10;

/// Procedural 10-class image set: discs, squares, triangles, horizontal and
/// vertical stripes, checkerboards, rings, crosses, diagonal stripes and blob
/// pairs over colour-gradient backgrounds. Deterministic in `seed`.
LabeledImages make_toy_dataset(std::int64_t count, std::uint64_t seed, std::int64_t size = 32);

}  // namespace wmlora::diffusion
