#include "ibcaps/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ibcaps {

namespace {

constexpr char kMagic[4] = {'I', 'B', 'C', 'P'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

void push32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t le32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

}  // namespace

void CheckpointMeta::set(const std::string& key, const std::string& value) {
    for (auto& p : kv)
        if (p.first == key) {
            p.second = value;
            return;
        }
    kv.emplace_back(key, value);
}

const std::string* CheckpointMeta::get(const std::string& key) const {
    for (const auto& p : kv)
        if (p.first == key) return &p.second;
    return nullptr;
}

std::string CheckpointMeta::get_or(const std::string& key, const std::string& fallback) const {
    const std::string* v = get(key);
    return v ? *v : fallback;
}

long long CheckpointMeta::get_int(const std::string& key) const {
    const std::string* v = get(key);
    if (!v) throw std::out_of_range("checkpoint meta key missing: " + key);
    return std::stoll(*v);
}

double CheckpointMeta::get_double(const std::string& key) const {
    const std::string* v = get(key);
    if (!v) throw std::out_of_range("checkpoint meta key missing: " + key);
    return std::stod(*v);
}

std::vector<std::uint8_t> encode_checkpoint(const CheckpointMeta& meta,
                                            const std::vector<NamedTensor>& tensors) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    push32(out, kVersion);
    std::string cfg;
    for (const auto& p : meta.kv) cfg += p.first + "=" + p.second + "\n";
    push32(out, static_cast<std::uint32_t>(cfg.size()));
    out.insert(out.end(), cfg.begin(), cfg.end());
    for (const auto& nt : tensors) {
        push32(out, static_cast<std::uint32_t>(nt.name.size()));
        out.insert(out.end(), nt.name.begin(), nt.name.end());
        out.push_back(kDtypeF32);
        out.push_back(static_cast<std::uint8_t>(nt.tensor.rank()));
        for (int d : nt.tensor.shape) push32(out, static_cast<std::uint32_t>(d));
        for (real v : nt.tensor.data) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            push32(out, bits);
        }
    }
    return out;
}

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<NamedTensor>& tensors) {
    const auto bytes = encode_checkpoint(meta, tensors);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

const Tensor* LoadedCheckpoint::find(const std::string& name) const {
    for (const auto& nt : tensors)
        if (nt.name == name) return &nt.tensor;
    return nullptr;
}

LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes,
                                   const std::string& origin) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > bytes.size())
            throw std::runtime_error(origin + ": truncated at byte " + std::to_string(pos));
    };
    need(8);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error(origin + ": bad magic (expected IBCP)");
    const std::uint32_t version = le32(bytes.data() + 4);
    if (version != kVersion)
        throw std::runtime_error(origin + ": unsupported version " + std::to_string(version));
    pos = 8;
    need(4);
    const std::uint32_t cfg_len = le32(bytes.data() + pos);
    pos += 4;
    need(cfg_len);
    std::string cfg(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + cfg_len));
    pos += cfg_len;

    LoadedCheckpoint out;
    std::size_t line = 0;
    while (line < cfg.size()) {
        const auto nl = cfg.find('\n', line);
        const std::string l = cfg.substr(line, nl == std::string::npos ? nl : nl - line);
        line = nl == std::string::npos ? cfg.size() : nl + 1;
        const auto eq = l.find('=');
        if (eq != std::string::npos) out.meta.kv.emplace_back(l.substr(0, eq), l.substr(eq + 1));
    }

    while (pos < bytes.size()) {
        need(4);
        const std::uint32_t name_len = le32(bytes.data() + pos);
        pos += 4;
        need(name_len);
        std::string name(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + name_len));
        pos += name_len;
        need(2);
        const std::uint8_t dtype = bytes[pos++];
        const std::uint8_t rank = bytes[pos++];
        if (dtype != kDtypeF32)
            throw std::runtime_error(origin + ": unsupported dtype tag " + std::to_string(dtype) +
                                     " for tensor " + name);
        std::vector<int> shape;
        std::int64_t n = 1;
        for (int i = 0; i < rank; ++i) {
            need(4);
            shape.push_back(static_cast<int>(le32(bytes.data() + pos)));
            pos += 4;
            n *= shape.back();
        }
        need(static_cast<std::size_t>(n) * 4);
        Tensor t(shape);
        for (std::int64_t i = 0; i < n; ++i) {
            std::uint32_t bits = le32(bytes.data() + pos);
            pos += 4;
            float f;
            std::memcpy(&f, &bits, 4);
            t[i] = static_cast<real>(f);
        }
        out.tensors.push_back({std::move(name), std::move(t)});
    }
    return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes, path);
}

}  // namespace ibcaps
