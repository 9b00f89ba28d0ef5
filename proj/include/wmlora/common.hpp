#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace wmlora {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

/// Secret payload of the wrong length or with non-binary entries.
class PayloadError : public Error {
public:
    using Error::Error;
};

/// Training diverged or failed to converge.
class TrainingError : public Error {
public:
    using Error::Error;
};

class MergeError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Named weight collection. Values are detached, contiguous float tensors.
using NamedTensors = std::map<std::string, torch::Tensor>;

/// Detached deep copy of every parameter and buffer of `module`.
NamedTensors snapshot(const torch::nn::Module& module);

/// Copies `values` into the matching parameters/buffers of `module`.
/// Every entry of the module must be present in `values`.
void load_into(torch::nn::Module& module, const NamedTensors& values);

NamedTensors clone(const NamedTensors& values);

/// Deterministic 64-bit hash over names, shapes and raw float bytes.
std::uint64_t hash_tensors(const NamedTensors& values);

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const std::string& what);

/// CPU generator seeded with `seed`.
torch::Generator make_generator(std::uint64_t seed);

/// FNV-1a over an arbitrary byte string, rendered as 16 hex chars.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace wmlora
