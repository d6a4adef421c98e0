#include "forge/checkpoint.hpp"

#include <fstream>

#include "forge/serial.hpp"

namespace forge {

using nlohmann::json;

namespace {
constexpr char kMagic[4] = {'F', 'R', 'G', 'C'};
constexpr uint32_t kFileVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nn::ParamStore& params,
                     const CheckpointMeta& meta) {
    json header{{"format_version", meta.format_version},
                {"section", meta.section},
                {"config_hash", meta.config_hash},
                {"extra", meta.extra}};
    json table = json::array();
    int64_t offset = 0;  // in float64 elements from the start of the blob
    for (const auto& [name, p] : params) {
        json dims = json::array();
        for (int i = 0; i < p.value.rank(); ++i) dims.push_back(p.value.dim(i));
        table.push_back({{"name", name}, {"dims", dims}, {"offset", offset}});
        offset += p.value.numel();
    }
    header["params"] = table;
    std::string hbytes = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open checkpoint for writing: " + path.string());
    f.write(kMagic, 4);
    uint32_t ver = kFileVersion;
    uint64_t hlen = hbytes.size();
    f.write(reinterpret_cast<const char*>(&ver), 4);
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hbytes.data(), static_cast<std::streamsize>(hbytes.size()));
    for (const auto& [name, p] : params)
        f.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.numel() * 8));
    if (!f) throw IngestionError("checkpoint write failed: " + path.string());
}

std::pair<nn::ParamStore, CheckpointMeta> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("cannot open checkpoint: " + path.string());
    char magic[4];
    uint32_t ver = 0;
    uint64_t hlen = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&ver), 4);
    f.read(reinterpret_cast<char*>(&hlen), 8);
    if (!f || std::memcmp(magic, kMagic, 4) != 0 || ver != kFileVersion)
        throw IngestionError("bad checkpoint header: " + path.string());
    std::string hbytes(hlen, '\0');
    f.read(hbytes.data(), static_cast<std::streamsize>(hlen));
    json header = json::parse(hbytes);

    CheckpointMeta meta;
    meta.format_version = header.at("format_version").get<int>();
    meta.section = header.at("section").get<std::string>();
    meta.config_hash = header.at("config_hash").get<std::string>();
    meta.extra = header.at("extra");

    nn::ParamStore store;
    for (const auto& entry : header.at("params")) {
        std::vector<int64_t> dims;
        for (const auto& d : entry.at("dims")) dims.push_back(d.get<int64_t>());
        Tensor t(dims);
        f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * 8));
        if (!f) throw IngestionError("truncated checkpoint: " + path.string());
        store.add(entry.at("name").get<std::string>(), std::move(t));
    }
    return {std::move(store), std::move(meta)};
}

std::string params_hash(const nn::ParamStore& params) {
    Hasher h;
    for (const auto& [name, p] : params) {
        h.update(name);
        h.update(p.value);
    }
    return h.hex();
}

}  // namespace forge
