#include "motok/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

using json = nlohmann::json;

namespace motok {

namespace {
constexpr char kMagic[4] = {'M', 'T', 'K', 'C'};
}

void Checkpoint::put_f32(const std::string& name, std::vector<int> shape,
                         std::span<const float> data) {
    int64_t n = 1;
    for (int e : shape) n *= e;
    if (n != static_cast<int64_t>(data.size()))
        throw DimensionError("checkpoint: shape does not match data size for " + name);
    Entry e;
    e.dtype = "f32";
    e.shape = std::move(shape);
    e.data.resize(data.size() * sizeof(float));
    std::memcpy(e.data.data(), data.data(), e.data.size());
    entries_[name] = std::move(e);
}

void Checkpoint::put_i64(const std::string& name, std::span<const int64_t> data) {
    Entry e;
    e.dtype = "i64";
    e.shape = {static_cast<int>(data.size())};
    e.data.resize(data.size() * sizeof(int64_t));
    std::memcpy(e.data.data(), data.data(), e.data.size());
    entries_[name] = std::move(e);
}

void Checkpoint::put_bytes(const std::string& name, const std::string& data) {
    Entry e;
    e.dtype = "u8";
    e.shape = {static_cast<int>(data.size())};
    e.data.assign(data.begin(), data.end());
    entries_[name] = std::move(e);
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

const Checkpoint::Entry& Checkpoint::entry(const std::string& name, const char* dtype) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IoError("checkpoint: missing entry " + name);
    if (it->second.dtype != dtype)
        throw IoError("checkpoint: entry " + name + " has dtype " + it->second.dtype);
    return it->second;
}

std::span<const float> Checkpoint::get_f32(const std::string& name) const {
    const Entry& e = entry(name, "f32");
    return {reinterpret_cast<const float*>(e.data.data()), e.data.size() / sizeof(float)};
}

const std::vector<int>& Checkpoint::shape(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw IoError("checkpoint: missing entry " + name);
    return it->second.shape;
}

std::vector<int64_t> Checkpoint::get_i64(const std::string& name) const {
    const Entry& e = entry(name, "i64");
    std::vector<int64_t> out(e.data.size() / sizeof(int64_t));
    std::memcpy(out.data(), e.data.data(), e.data.size());
    return out;
}

int64_t Checkpoint::get_scalar_i64(const std::string& name) const {
    auto v = get_i64(name);
    if (v.size() != 1) throw IoError("checkpoint: entry " + name + " is not a scalar");
    return v[0];
}

std::string Checkpoint::get_bytes(const std::string& name) const {
    const Entry& e = entry(name, "u8");
    return std::string(e.data.begin(), e.data.end());
}

void Checkpoint::save(const std::string& path) const {
    json header = json::object();
    uint64_t offset = 0;
    for (const auto& [name, e] : entries_) {
        header[name] = {{"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset},
                        {"bytes", e.data.size()}};
        offset += e.data.size();
    }
    const std::string htext = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, 4);
    const uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t hlen = htext.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
    for (const auto& [name, e] : entries_)
        out.write(e.data.data(), static_cast<std::streamsize>(e.data.size()));
    if (!out) throw IoError("short write: " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not a checkpoint file: " + path);
    uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string htext(hlen, '\0');
    in.read(htext.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated checkpoint header: " + path);

    json header;
    try {
        header = json::parse(htext);
    } catch (const json::exception& e) {
        throw IoError(std::string("bad checkpoint header: ") + e.what());
    }

    Checkpoint ck;
    for (auto it = header.begin(); it != header.end(); ++it) {
        Entry e;
        e.dtype = it.value()["dtype"].get<std::string>();
        e.shape = it.value()["shape"].get<std::vector<int>>();
        const uint64_t bytes = it.value()["bytes"].get<uint64_t>();
        e.data.resize(bytes);
        ck.entries_[it.key()] = std::move(e);
    }
    // entries were written in map (sorted) order
    for (auto& [name, e] : ck.entries_) {
        in.read(e.data.data(), static_cast<std::streamsize>(e.data.size()));
        if (!in) throw IoError("truncated checkpoint payload: " + path);
    }
    return ck;
}

} // namespace motok
