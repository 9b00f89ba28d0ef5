#include "wmlora/lora/watermark_lora.hpp"

#include <cmath>

namespace wmlora::lora {

MapperInit parse_mapper_init(std::string_view name) {
    if (name == "normal") return MapperInit::normal;
    if (name == "orthogonal") return MapperInit::orthogonal;
    throw ConfigError("unknown mapper init '" + std::string(name) + "' (normal|orthogonal)");
}

std::string to_string(MapperInit init) { return init == MapperInit::normal ? "normal" : "orthogonal"; }

SecretMapper init_mapper(std::int64_t l, std::int64_t r, MapperInit mode, std::uint64_t seed) {
    if (l < 1 || r < 1) throw ConfigError("mapper needs l >= 1 and r >= 1");
    if (mode == MapperInit::orthogonal && r < l) {
        throw ConfigError("orthogonal mapper needs rank >= payload bits (r=" + std::to_string(r) +
                          ", l=" + std::to_string(l) + ")");
    }
    auto gen = make_generator(seed);
    auto g = torch::randn({r, l}, gen, torch::TensorOptions(torch::kFloat64));
    SecretMapper m;
    m.init = mode;
    if (mode == MapperInit::normal) {
        m.embeddings = g.t().to(torch::kFloat32).contiguous();
        return m;
    }
    auto [q, rr] = torch::linalg_qr(g);  // q: (r, l), orthonormal columns
    // Fix the sign ambiguity of QR so the result depends only on the seed.
    q = q * torch::sign(torch::diagonal(rr)).unsqueeze(0);
    m.embeddings = (q.t() * std::sqrt(static_cast<double>(r))).to(torch::kFloat32).contiguous();
    return m;
}

torch::Tensor scaling_diagonals(const torch::Tensor& bits, const torch::Tensor& embeddings) {
    if (bits.dim() != 2 || bits.size(1) != embeddings.size(0)) {
        throw PayloadError("scaling matrix expects bits (N, " + std::to_string(embeddings.size(0)) + "), got " +
                           c10::str(bits.sizes()));
    }
    const double inv = 1.0 / std::sqrt(static_cast<double>(embeddings.size(0)));
    return 1.0 + torch::matmul(bits.to(embeddings.dtype()), embeddings) * inv;
}

torch::Tensor build_scaling_matrix(const watermark::SecretMessage& s, const SecretMapper& mapper) {
    if (static_cast<std::int64_t>(s.size()) != mapper.payload_bits()) {
        throw PayloadError("secret has " + std::to_string(s.size()) + " bits, mapper expects " +
                           std::to_string(mapper.payload_bits()));
    }
    return scaling_diagonals(s.to_tensor().unsqueeze(0), mapper.embeddings).squeeze(0);
}

torch::Tensor lora_delta(const torch::Tensor& A, const torch::Tensor& B, const torch::Tensor& diag) {
    if (A.dim() != 2 || B.dim() != 2 || diag.dim() != 1 || A.size(1) != diag.size(0) || B.size(0) != diag.size(0)) {
        throw ShapeError("lora_delta: A " + c10::str(A.sizes()) + ", S " + c10::str(diag.sizes()) + ", B " +
                         c10::str(B.sizes()));
    }
    return torch::matmul(A * diag.unsqueeze(0), B);
}

WatermarkLoRA WatermarkLoRA::create(const std::map<std::string, std::pair<std::int64_t, std::int64_t>>& target_shapes,
                                    std::int64_t rank, std::int64_t payload_bits, MapperInit init, std::uint64_t seed,
                                    double alpha) {
    if (target_shapes.empty()) throw ConfigError("watermark LoRA needs at least one target layer");
    WatermarkLoRA w;
    w.alpha_ = alpha;
    w.mapper_ = init_mapper(payload_bits, rank, init, seed);
    auto gen = make_generator(seed ^ 0xA5A5A5A5ULL);
    for (const auto& [key, shape] : target_shapes) {
        const auto [n, m] = shape;
        LoraFactors f;
        f.A = torch::zeros({n, rank});
        f.B = torch::randn({rank, m}, gen) / std::sqrt(static_cast<double>(m));
        w.layers_[key] = f;
    }
    return w;
}

std::vector<std::string> WatermarkLoRA::targets() const {
    std::vector<std::string> out;
    for (const auto& [key, f] : layers_) out.push_back(key);
    return out;
}

std::vector<torch::Tensor> WatermarkLoRA::parameters() const {
    std::vector<torch::Tensor> out;
    for (const auto& [key, f] : layers_) {
        out.push_back(f.A);
        out.push_back(f.B);
    }
    out.push_back(mapper_.embeddings);
    return out;
}

void WatermarkLoRA::set_requires_grad(bool on) {
    for (auto& [key, f] : layers_) {
        f.A.requires_grad_(on);
        f.B.requires_grad_(on);
    }
    mapper_.embeddings.requires_grad_(on);
}

LoraRuntime WatermarkLoRA::runtime(const torch::Tensor& bits, double alpha) const {
    LoraRuntime rt;
    rt.layers = &layers_;
    rt.scale = scaling_diagonals(bits, mapper_.embeddings);
    rt.alpha = alpha;
    return rt;
}

NamedTensors WatermarkLoRA::deltas(const watermark::SecretMessage& s) const {
    torch::NoGradGuard g;
    auto diag = build_scaling_matrix(s, mapper_);
    NamedTensors out;
    for (const auto& [key, f] : layers_) out[key] = lora_delta(f.A, f.B, diag);
    return out;
}

Checkpoint WatermarkLoRA::to_checkpoint() const {
    Checkpoint c;
    for (const auto& [key, f] : layers_) {
        c.tensors[key + ".lora_A"] = f.A.detach().clone();
        c.tensors[key + ".lora_B"] = f.B.detach().clone();
    }
    c.tensors["mapper.embeddings"] = mapper_.embeddings.detach().clone();
    c.metadata = {{"kind", "watermark_lora"},
                  {"rank", rank()},
                  {"payload_bits", payload_bits()},
                  {"init", to_string(mapper_.init)},
                  {"alpha", alpha_},
                  {"targets", targets()}};
    return c;
}

WatermarkLoRA WatermarkLoRA::from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.metadata.value("kind", "") != "watermark_lora") throw IoError("checkpoint is not a watermark LoRA");
    WatermarkLoRA w;
    w.alpha_ = ckpt.metadata.value("alpha", 1.05);
    auto emb = ckpt.tensors.find("mapper.embeddings");
    if (emb == ckpt.tensors.end()) throw IoError("watermark LoRA checkpoint lacks mapper embeddings");
    w.mapper_.embeddings = emb->second.to(torch::kFloat32).contiguous();
    w.mapper_.init = parse_mapper_init(ckpt.metadata.value("init", "orthogonal"));
    for (const auto& key : ckpt.metadata.at("targets").get<std::vector<std::string>>()) {
        auto a = ckpt.tensors.find(key + ".lora_A");
        auto b = ckpt.tensors.find(key + ".lora_B");
        if (a == ckpt.tensors.end() || b == ckpt.tensors.end()) throw IoError("missing LoRA factors for " + key);
        if (a->second.size(1) != w.rank() || b->second.size(0) != w.rank()) {
            throw IoError("LoRA factors for " + key + " do not match rank " + std::to_string(w.rank()));
        }
        w.layers_[key] = {a->second.to(torch::kFloat32).contiguous(), b->second.to(torch::kFloat32).contiguous()};
    }
    return w;
}

namespace {

NamedTensors apply_deltas(const NamedTensors& model, const WatermarkLoRA& lora, const watermark::SecretMessage& s,
                          double coeff) {
    for (const auto& key : lora.targets()) {
        if (!model.count(key)) throw MergeError("merge: target layer '" + key + "' not found in model");
    }
    NamedTensors out = clone(model);
    if (coeff == 0.0) return out;
    for (const auto& [key, delta] : lora.deltas(s)) {
        auto& w = out.at(key);
        if (w.numel() != delta.numel() || w.size(0) != delta.size(0)) {
            throw MergeError("merge: layer '" + key + "' has shape " + c10::str(w.sizes()) + ", delta " +
                             c10::str(delta.sizes()));
        }
        w = w + coeff * delta.view(w.sizes());
    }
    return out;
}

}  // namespace

NamedTensors merge(const NamedTensors& model, const WatermarkLoRA& lora, const watermark::SecretMessage& s,
                   double alpha) {
    return apply_deltas(model, lora, s, alpha);
}

NamedTensors unmerge(const NamedTensors& model, const WatermarkLoRA& lora, const watermark::SecretMessage& s,
                     double alpha) {
    return apply_deltas(model, lora, s, -alpha);
}

}  // namespace wmlora::lora
