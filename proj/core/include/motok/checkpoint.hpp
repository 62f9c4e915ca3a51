#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "motok/errors.hpp"

namespace motok {

// Named-array container with a bitwise-exact round trip.
// File layout: magic "MTKC", u32 version, u64 header length, JSON header
// (name -> dtype/shape/offset/bytes), payload. All little-endian; f32 arrays
// are raw IEEE-754 bits.
class Checkpoint {
  public:
    static constexpr uint32_t kVersion = 1;

    void put_f32(const std::string& name, std::vector<int> shape, std::span<const float> data);
    void put_i64(const std::string& name, std::span<const int64_t> data);
    void put_bytes(const std::string& name, const std::string& data);

    bool has(const std::string& name) const { return entries_.count(name) > 0; }
    std::vector<std::string> names() const;

    std::span<const float> get_f32(const std::string& name) const;
    const std::vector<int>& shape(const std::string& name) const;
    std::vector<int64_t> get_i64(const std::string& name) const;
    int64_t get_scalar_i64(const std::string& name) const;
    std::string get_bytes(const std::string& name) const;

    void put_scalar_i64(const std::string& name, int64_t v) {
        put_i64(name, std::span<const int64_t>(&v, 1));
    }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

  private:
    struct Entry {
        std::string dtype; // "f32" | "i64" | "u8"
        std::vector<int> shape;
        std::vector<char> data;
    };
    const Entry& entry(const std::string& name, const char* dtype) const;
    std::map<std::string, Entry> entries_;
};

} // namespace motok
