#include "forge/serial.hpp"

#include <cstdio>
#include <fstream>

#include "forge/errors.hpp"
#include "forge/rng.hpp"

namespace forge {

namespace {
constexpr char kMagic[4] = {'F', 'R', 'G', 'A'};
constexpr uint32_t kVersion = 1;
constexpr uint32_t kDtypeF64 = 1;

template <typename T>
void put(std::vector<unsigned char>& buf, const T& v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
}
}  // namespace

std::vector<unsigned char> serialize_array(const Tensor& t) {
    std::vector<unsigned char> buf;
    buf.reserve(16 + static_cast<size_t>(t.numel()) * 8);
    buf.insert(buf.end(), kMagic, kMagic + 4);
    put(buf, kVersion);
    put(buf, kDtypeF64);
    put(buf, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put(buf, t.dim(i));
    const auto* p = reinterpret_cast<const unsigned char*>(t.data());
    buf.insert(buf.end(), p, p + static_cast<size_t>(t.numel()) * sizeof(double));
    return buf;
}

void write_array_file(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open for writing: " + path.string());
    auto buf = serialize_array(t);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IngestionError("write failed: " + path.string());
}

Tensor read_array_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open: " + path.string());
    char magic[4];
    uint32_t version = 0, dtype = 0, rank = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&dtype), 4);
    f.read(reinterpret_cast<char*>(&rank), 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw IngestionError("bad array header: " + path.string());
    if (version != kVersion || dtype != kDtypeF64 || rank > 8)
        throw IngestionError("unsupported array format: " + path.string());
    std::vector<int64_t> dims(rank);
    for (auto& d : dims) f.read(reinterpret_cast<char*>(&d), 8);
    Tensor t(dims);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * static_cast<int64_t>(sizeof(double))));
    if (!f) throw IngestionError("truncated array file: " + path.string());
    return t;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open: " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open for writing: " + path.string());
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IngestionError("write failed: " + path.string());
}

void Hasher::update(const void* bytes, size_t n) { h_ = fnv1a64(bytes, n, h_); }

void Hasher::update(const Tensor& t) {
    for (int i = 0; i < t.rank(); ++i) update_u64(static_cast<uint64_t>(t.dim(i)));
    update(t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
}

std::string Hasher::hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h_));
    return std::string(buf);
}

std::string hash_hex(std::string_view s) {
    Hasher h;
    h.update(s);
    return h.hex();
}

std::string hash_file_hex(const std::filesystem::path& path) {
    return hash_hex(read_text_file(path));
}

}  // namespace forge
