#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lsiq/model.hpp"

namespace lsiq {

// LSB-first bit packing; bits must be one of {2, 3, 4, 6, 8}; output is
// exactly ceil(n * bits / 8) bytes
std::vector<uint8_t> pack_codes(const std::vector<int32_t>& codes, int bits);
std::vector<int32_t> unpack_codes(const std::vector<uint8_t>& bytes, int bits, size_t count);

// dtype "f64": doubles, length = count * 8 bytes
// dtype "u8": raw bytes, length = count
// dtype "pack<k>": k-bit packed codes with logical shape, length = ceil(count*k/8)
struct TensorEntry {
    std::string dtype;
    std::vector<int64_t> shape;
    std::vector<double> f64;
    std::vector<uint8_t> u8;

    size_t count() const;
};

// Binary tensor archive: fixed magic, version, length-prefixed JSON header
// (sorted keys), then an 8-aligned payload. Writing the same contents yields
// byte-identical files; writes go to a temp file renamed into place.
struct TensorContainer {
    std::map<std::string, std::string> meta;
    std::map<std::string, TensorEntry> tensors;

    bool has(const std::string& name) const { return tensors.count(name) != 0; }
    const TensorEntry& at(const std::string& name) const;

    void put_matrix(const std::string& name, const Matrix& m);
    void put_vector(const std::string& name, const std::vector<double>& v);
    void put_bytes(const std::string& name, const std::vector<uint8_t>& v);
    void put_packed(const std::string& name, const std::vector<int32_t>& codes, int bits,
                    int rows, int cols);

    Matrix get_matrix(const std::string& name) const;
    std::vector<double> get_vector(const std::string& name) const;
    // bits are recovered from the dtype; optional row/col out-params
    std::vector<int32_t> get_packed(const std::string& name, int* rows, int* cols,
                                    int* bits) const;
};

void write_container(const std::string& path, const TensorContainer& c);
TensorContainer read_container(const std::string& path);

// Models are stored either as plain float weights or as folded quantized
// weights (codes + scales + zeros + folded bias + smoothing vectors).
void write_model(const std::string& path, const LayerGraph& m);
LayerGraph read_model(const std::string& path);

// one sequence per line, whitespace-separated decimal token ids; all lines
// must have equal length and ids must lie in [0, vocab)
std::vector<std::vector<int32_t>> load_tokens(const std::string& path, int vocab);
void write_tokens(const std::string& path, const std::vector<std::vector<int32_t>>& seqs);

} // namespace lsiq
