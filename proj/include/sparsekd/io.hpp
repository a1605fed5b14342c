#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparsekd/tensor.hpp"

// Binary tensor container: magic "NTSR1", u32 rank, rank x u32 dims,
// then row-major f32 payload, all little-endian.

namespace sparsekd {

void save_tensor_file(const std::string& path, const Shape& shape, const std::vector<float>& values);
void load_tensor_file(const std::string& path, Shape& shape, std::vector<float>& values);

template <class S>
void save_tensor(const std::string& path, const TensorT<S>& t) {
    std::vector<float> vals(static_cast<std::size_t>(t.size()));
    for (std::int64_t i = 0; i < t.size(); ++i) vals[static_cast<std::size_t>(i)] = static_cast<float>(t.values()[i]);
    save_tensor_file(path, t.shape(), vals);
}

template <class S>
TensorT<S> load_tensor(const std::string& path) {
    Shape shape;
    std::vector<float> vals;
    load_tensor_file(path, shape, vals);
    auto t = TensorT<S>::zeros(shape);
    for (std::size_t i = 0; i < vals.size(); ++i) t.values()[static_cast<std::int64_t>(i)] = static_cast<S>(vals[i]);
    return t;
}

}  // namespace sparsekd
