#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "forge/tensor.hpp"

namespace forge {

static_assert(std::endian::native == std::endian::little,
              "array and checkpoint files are little-endian");

// Binary array file layout (little-endian):
//   magic "FRGA" | u32 version | u32 dtype (1 = float64) | u32 rank |
//   i64 dims[rank] | payload: row-major float64 values
void write_array_file(const std::filesystem::path& path, const Tensor& t);
Tensor read_array_file(const std::filesystem::path& path);

std::vector<unsigned char> serialize_array(const Tensor& t);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& content);

// Streaming FNV-1a hasher used for manifest/config content hashes.
class Hasher {
public:
    void update(const void* bytes, size_t n);
    void update(std::string_view s) { update(s.data(), s.size()); }
    void update_u64(uint64_t v) { update(&v, sizeof v); }
    void update(const Tensor& t);
    uint64_t digest() const { return h_; }
    std::string hex() const;

private:
    uint64_t h_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(std::string_view s);
std::string hash_file_hex(const std::filesystem::path& path);

}  // namespace forge
