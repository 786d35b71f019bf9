#include "mudi/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "mudi/errors.hpp"
#include "mudi/rng.hpp"

namespace mudi {

namespace {

constexpr char kMagic[8] = {'M', 'U', 'D', 'I', 'C', 'K', 'P', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    nlohmann::json manifest;
    manifest["format"] = "mudi-ckpt-v1";
    manifest["stage"] = ckpt.stage;
    manifest["config_hash"] = ckpt.config_hash;
    manifest["meta"] = ckpt.meta;

    nlohmann::json table = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, e] : ckpt.params) {
        std::uint64_t bytes = static_cast<std::uint64_t>(e.value.size()) * sizeof(double);
        std::uint64_t checksum = fnv1a64(e.value.data(), bytes);
        table.push_back({{"name", name},
                         {"rows", e.value.rows()},
                         {"cols", e.value.cols()},
                         {"offset", offset},
                         {"fnv64", checksum}});
        offset += bytes;
    }
    manifest["params"] = table;

    std::string mjson = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot open checkpoint for writing: " + path);
    out.write(kMagic, 8);
    write_u64(out, mjson.size());
    out.write(mjson.data(), static_cast<std::streamsize>(mjson.size()));
    for (const auto& [name, e] : ckpt.params) {
        out.write(reinterpret_cast<const char*>(e.value.data()),
                  static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    }
    if (!out) throw ParseError("short write while saving checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0) {
        throw ParseError("bad checkpoint magic in " + path);
    }
    std::uint64_t mlen = read_u64(in);
    std::string mjson(mlen, '\0');
    in.read(mjson.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw ParseError("truncated checkpoint manifest in " + path);

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mjson);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad checkpoint manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "mudi-ckpt-v1") {
        throw ParseError("unsupported checkpoint format in " + path);
    }

    Checkpoint ckpt;
    ckpt.stage = manifest.value("stage", "");
    ckpt.config_hash = manifest.value("config_hash", "");
    ckpt.meta = manifest.value("meta", nlohmann::json::object());

    std::streampos data_start = in.tellg();
    for (const auto& row : manifest.at("params")) {
        std::string name = row.at("name").get<std::string>();
        long rows = row.at("rows").get<long>();
        long cols = row.at("cols").get<long>();
        std::uint64_t offset = row.at("offset").get<std::uint64_t>();
        Mat& m = ckpt.params.create(name, rows, cols);
        in.seekg(data_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!in) throw ParseError("truncated checkpoint data for " + name);
        std::uint64_t expect = row.at("fnv64").get<std::uint64_t>();
        std::uint64_t got = fnv1a64(m.data(),
                                    static_cast<std::size_t>(m.size()) * sizeof(double));
        if (expect != got) {
            throw ParseError("checksum mismatch for parameter " + name + " in " + path);
        }
    }
    return ckpt;
}

} // namespace mudi
