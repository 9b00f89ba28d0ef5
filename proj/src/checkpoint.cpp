#include "wmlora/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace wmlora {

namespace {

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return "F32";
        case torch::kFloat64: return "F64";
        case torch::kInt64: return "I64";
        case torch::kInt32: return "I32";
        case torch::kUInt8: return "U8";
        default: throw IoError(std::string("unsupported dtype for checkpoint: ") + c10::toString(t));
    }
}

torch::ScalarType dtype_from_name(const std::string& s) {
    if (s == "F32") return torch::kFloat32;
    if (s == "F64") return torch::kFloat64;
    if (s == "I64") return torch::kInt64;
    if (s == "I32") return torch::kInt32;
    if (s == "U8") return torch::kUInt8;
    throw IoError("unsupported dtype in checkpoint: " + s);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    nlohmann::json header = nlohmann::json::object();
    header["__metadata__"] = {{"format", "wmlora"}, {"json", ckpt.metadata.dump()}};

    std::vector<torch::Tensor> payload;
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        auto c = t.detach().to(torch::kCPU).contiguous();
        auto bytes = static_cast<std::uint64_t>(c.nbytes());
        header[name] = {{"dtype", dtype_name(c.scalar_type())},
                        {"shape", c.sizes().vec()},
                        {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
        payload.push_back(c);
    }

    std::string text = header.dump();
    // Pad so the payload starts 8-byte aligned.
    while ((text.size() % 8) != 0) text.push_back(' ');

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        std::uint64_t n = text.size();
        unsigned char len[8];
        for (int i = 0; i < 8; ++i) len[i] = static_cast<unsigned char>((n >> (8 * i)) & 0xff);
        out.write(reinterpret_cast<const char*>(len), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& c : payload) {
            out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.nbytes()));
        }
        if (!out) throw IoError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    unsigned char len[8];
    in.read(reinterpret_cast<char*>(len), 8);
    if (!in) throw IoError("truncated checkpoint header in " + path.string());
    std::uint64_t n = 0;
    for (int i = 0; i < 8; ++i) n |= static_cast<std::uint64_t>(len[i]) << (8 * i);
    if (n > (1ULL << 30)) throw IoError("implausible header length in " + path.string());
    std::string text(n, '\0');
    in.read(text.data(), static_cast<std::streamsize>(n));
    if (!in) throw IoError("truncated checkpoint header in " + path.string());

    auto header = nlohmann::json::parse(text);
    std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Checkpoint ckpt;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            if (entry.contains("json")) ckpt.metadata = nlohmann::json::parse(entry["json"].get<std::string>());
            continue;
        }
        auto shape = entry["shape"].get<std::vector<std::int64_t>>();
        auto offsets = entry["data_offsets"].get<std::vector<std::uint64_t>>();
        auto dtype = dtype_from_name(entry["dtype"].get<std::string>());
        if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data.size()) {
            throw IoError("bad data offsets for tensor '" + name + "' in " + path.string());
        }
        auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
        if (static_cast<std::uint64_t>(t.nbytes()) != offsets[1] - offsets[0]) {
            throw IoError("byte size mismatch for tensor '" + name + "' in " + path.string());
        }
        std::memcpy(t.data_ptr(), data.data() + offsets[0], t.nbytes());
        ckpt.tensors[name] = t;
    }
    return ckpt;
}

}  // namespace wmlora
