#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "motok/errors.hpp"

namespace motok {

// Discrete motion representation: (L+1) x n code indices, level-major.
// Values in [0, K+1]: K is the EOS class; K+1 is the BOS sentinel, which is
// only ever an input to the token model and never stored in a grid.
struct TokenGrid {
    int levels = 0;
    int n = 0;
    std::vector<uint16_t> idx; // levels * n

    TokenGrid() = default;
    TokenGrid(int levels_, int n_) : levels(levels_), n(n_) {
        idx.assign(static_cast<size_t>(levels) * n, 0);
    }

    int at(int level, int i) const { return idx[static_cast<size_t>(level) * n + i]; }
    void set(int level, int i, int v) {
        idx[static_cast<size_t>(level) * n + i] = static_cast<uint16_t>(v);
    }

    // append one column (one value per level)
    void push_column(const std::vector<int>& column);
    TokenGrid prefix(int count) const;

    bool operator==(const TokenGrid& o) const = default;
};

// Token file: u32 levels, u32 n, u32 K, then levels*n u16 indices, row-major
// (level-major), little-endian.
void write_token_file(const std::string& path, const TokenGrid& grid, int codebook_size);
TokenGrid read_token_file(const std::string& path, int* codebook_size_out = nullptr);

} // namespace motok
