#include "wmlora/common.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cstdio>
#include <cstring>

namespace wmlora {

NamedTensors snapshot(const torch::nn::Module& module) {
    NamedTensors out;
    torch::NoGradGuard no_grad;
    for (const auto& item : module.named_parameters(/*recurse=*/true)) {
        out[item.key()] = item.value().detach().clone().contiguous();
    }
    for (const auto& item : module.named_buffers(/*recurse=*/true)) {
        out[item.key()] = item.value().detach().clone().contiguous();
    }
    return out;
}

void load_into(torch::nn::Module& module, const NamedTensors& values) {
    torch::NoGradGuard no_grad;
    auto assign = [&](const std::string& name, torch::Tensor& target) {
        auto it = values.find(name);
        if (it == values.end()) {
            throw IoError("missing tensor '" + name + "' while loading module");
        }
        if (it->second.sizes() != target.sizes()) {
            throw ShapeError("tensor '" + name + "' has shape " + c10::str(it->second.sizes()) +
                             ", expected " + c10::str(target.sizes()));
        }
        target.copy_(it->second);
    };
    for (auto& item : module.named_parameters(true)) {
        assign(item.key(), item.value());
    }
    for (auto& item : module.named_buffers(true)) {
        assign(item.key(), item.value());
    }
}

NamedTensors clone(const NamedTensors& values) {
    NamedTensors out;
    for (const auto& [name, t] : values) {
        out[name] = t.detach().clone();
    }
    return out;
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(std::uint64_t& h, const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= kFnvPrime;
    }
}

}  // namespace

std::uint64_t hash_tensors(const NamedTensors& values) {
    std::uint64_t h = kFnvOffset;
    for (const auto& [name, t] : values) {
        fnv_mix(h, name.data(), name.size());
        auto c = t.detach().contiguous().to(torch::kCPU);
        for (auto s : c.sizes()) {
            fnv_mix(h, &s, sizeof(s));
        }
        fnv_mix(h, c.data_ptr(), static_cast<std::size_t>(c.nbytes()));
    }
    return h;
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const std::string& what) {
    if (a.sizes() != b.sizes()) {
        throw ShapeError(what + ": shape mismatch " + c10::str(a.sizes()) + " vs " + c10::str(b.sizes()));
    }
}

torch::Generator make_generator(std::uint64_t seed) {
    return at::make_generator<at::CPUGeneratorImpl>(seed);
}

std::string fnv1a_hex(const std::string& bytes) {
    std::uint64_t h = kFnvOffset;
    fnv_mix(h, bytes.data(), bytes.size());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace wmlora
