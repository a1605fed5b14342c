#include "sparsekd/io.hpp"

#include <cstring>
#include <fstream>
#include <limits>

namespace sparsekd {

namespace {
constexpr char kMagic[5] = {'N', 'T', 'S', 'R', '1'};
constexpr std::uint32_t kMaxRank = 8;
}  // namespace

void save_tensor_file(const std::string& path, const Shape& shape, const std::vector<float>& values) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("save_tensor_file: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " + std::to_string(values.size()));
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(kMagic, sizeof(kMagic));
    const std::uint32_t rank = static_cast<std::uint32_t>(shape.size());
    f.write(reinterpret_cast<const char*>(&rank), 4);
    for (auto d : shape) {
        if (d < 0 || d > std::numeric_limits<std::uint32_t>::max())
            throw ShapeError("save_tensor_file: dim " + std::to_string(d) + " not storable as u32");
        const std::uint32_t u = static_cast<std::uint32_t>(d);
        f.write(reinterpret_cast<const char*>(&u), 4);
    }
    if (!values.empty()) f.write(reinterpret_cast<const char*>(values.data()), 4 * static_cast<std::streamsize>(values.size()));
    if (!f) throw DataError("write failed: " + path);
}

void load_tensor_file(const std::string& path, Shape& shape, std::vector<float>& values) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path);
    char magic[5];
    if (!f.read(magic, 5) || std::memcmp(magic, kMagic, 5) != 0)
        throw DataError("bad magic in " + path);
    std::uint32_t rank = 0;
    if (!f.read(reinterpret_cast<char*>(&rank), 4)) throw DataError("truncated header in " + path);
    if (rank > kMaxRank) throw DataError("rank " + std::to_string(rank) + " too large in " + path);
    shape.clear();
    std::int64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d = 0;
        if (!f.read(reinterpret_cast<char*>(&d), 4)) throw DataError("truncated dims in " + path);
        shape.push_back(static_cast<std::int64_t>(d));
        numel *= static_cast<std::int64_t>(d);
        if (numel > (std::int64_t(1) << 34)) throw DataError("dims overflow in " + path);
    }
    values.resize(static_cast<std::size_t>(numel));
    if (numel > 0 && !f.read(reinterpret_cast<char*>(values.data()), 4 * static_cast<std::streamsize>(numel)))
        throw DataError("truncated payload in " + path + " (wanted " + std::to_string(numel) + " floats)");
    // A trailing byte means the file does not match its own header.
    char extra;
    if (f.read(&extra, 1)) throw DataError("trailing bytes in " + path);
}

}  // namespace sparsekd
