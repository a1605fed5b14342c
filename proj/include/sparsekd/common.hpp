#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsekd {

// Error taxonomy. The CLI maps these onto process exit codes, so every
// throw site below the tool layer should pick the right class.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};
struct ProtocolError : Error {
    using Error::Error;
};

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// splitmix64: cheap stateless mixing used to derive independent seed streams
// (per step, per image, per purpose) from one base seed. Keeping every RNG
// derivation stateless makes checkpoint resume exact: the step counter and the
// base seed fully determine all future randomness.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = splitmix64(seed ^ 0x5bf03635u);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

// FNV-1a, used for dataset and config fingerprints in manifests.
std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull);
std::uint64_t fnv1a64_file(const std::string& path);
std::string hex64(std::uint64_t v);

}  // namespace sparsekd
