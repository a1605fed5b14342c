#include "sparsekd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "sparsekd/io.hpp"

namespace sparsekd {

namespace fs = std::filesystem;

std::vector<std::int64_t> Dataset::train_indices() const {
    std::vector<std::int64_t> v(static_cast<std::size_t>(n_train));
    std::iota(v.begin(), v.end(), 0);
    return v;
}

std::vector<std::int64_t> Dataset::val_indices() const {
    std::vector<std::int64_t> v(static_cast<std::size_t>(n_val));
    std::iota(v.begin(), v.end(), n_train);
    return v;
}

namespace {

// Texture knobs: low contrast + strong noise keeps randomly initialized
// backbones from separating the classes too easily.
constexpr double kAmplitude = 0.12;
constexpr double kNoiseSigma = 0.30;

// Class c -> grating orientation and frequency (cycles per image).
void class_params(std::int64_t c, double& theta, double& freq) {
    theta = (c % 2) ? M_PI / 2 : 0.0;          // vertical vs horizontal stripes
    theta += ((c / 4) % 2) ? M_PI / 4 : 0.0;   // 8+ classes tilt by 45 degrees
    freq = ((c / 2) % 2) ? 7.0 : 3.0;          // low vs high spatial frequency
}

}  // namespace

void generate_dataset(const std::string& dir, std::int64_t n, std::int64_t classes, std::int64_t image_size,
                      std::int64_t n_val, std::uint64_t seed, bool force) {
    if (classes < 1) throw ConfigError("gen-data: classes must be >= 1, got " + std::to_string(classes));
    if (n < classes) throw ConfigError("gen-data: n " + std::to_string(n) + " < classes " + std::to_string(classes));
    if (n_val < 0 || n_val >= n)
        throw ConfigError("gen-data: val count " + std::to_string(n_val) + " must be in [0, n)");
    if (image_size < 32 || image_size % 32 != 0)
        throw ConfigError("gen-data: image size " + std::to_string(image_size) + " must be a positive multiple of 32");
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw DataError("gen-data: output dir " + dir + " is not empty (use --force to overwrite)");
    fs::create_directories(dir);

    // Balanced labels, shuffled so both splits see every class.
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(i % classes);
    std::mt19937_64 shuffle_rng(splitmix64(mix_seed(seed, 0x5481, 0)));
    std::shuffle(labels.begin(), labels.end(), shuffle_rng);

    const std::int64_t hw = image_size * image_size;
    std::vector<float> images(static_cast<std::size_t>(n * 3 * hw));
    for (std::int64_t i = 0; i < n; ++i) {
        std::mt19937_64 rng(splitmix64(mix_seed(seed, 0xda7a, static_cast<std::uint64_t>(i))));
        std::uniform_real_distribution<double> uphase(0.0, 2.0 * M_PI);
        std::uniform_real_distribution<double> ujit(0.95, 1.05);
        std::normal_distribution<double> noise(0.0, kNoiseSigma);
        double theta, freq;
        class_params(labels[static_cast<std::size_t>(i)], theta, freq);
        const double phase = uphase(rng);
        freq *= ujit(rng);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < image_size; ++y)
                for (std::int64_t x = 0; x < image_size; ++x) {
                    const double u = (ct * static_cast<double>(x) + st * static_cast<double>(y)) /
                                     static_cast<double>(image_size);
                    double v = 0.5 + kAmplitude * std::sin(2.0 * M_PI * freq * u + phase) + noise(rng);
                    v = std::min(1.0, std::max(0.0, v));
                    images[static_cast<std::size_t>(((i * 3 + c) * hw) + y * image_size + x)] =
                        static_cast<float>(v);
                }
    }

    save_tensor_file(dir + "/images.ntsr", {n, 3, image_size, image_size}, images);
    std::vector<float> flabels(labels.begin(), labels.end());
    save_tensor_file(dir + "/labels.ntsr", {n}, flabels);

    nlohmann::json j;
    j["n"] = n;
    j["classes"] = classes;
    j["image_size"] = image_size;
    j["train"] = n - n_val;
    j["val"] = n_val;
    j["seed"] = seed;
    j["images_checksum"] = hex64(fnv1a64_file(dir + "/images.ntsr"));
    j["labels_checksum"] = hex64(fnv1a64_file(dir + "/labels.ntsr"));
    std::ofstream f(dir + "/split.json");
    if (!f) throw DataError("cannot write " + dir + "/split.json");
    f << j.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream f(dir + "/split.json");
    if (!f) throw DataError("cannot open " + dir + "/split.json (missing dataset?)");
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("bad split manifest " + dir + "/split.json: " + e.what());
    }
    Dataset ds;
    ds.n_train = j.at("train").get<std::int64_t>();
    ds.n_val = j.at("val").get<std::int64_t>();
    ds.classes = j.at("classes").get<std::int64_t>();

    load_tensor_file(dir + "/images.ntsr", ds.image_shape, ds.images);
    if (ds.image_shape.size() != 4 || ds.image_shape[1] != 3)
        throw DataError("dataset images " + dir + "/images.ntsr: expected (n,3,H,W), got " +
                        shape_str(ds.image_shape));
    Shape lshape;
    std::vector<float> flabels;
    load_tensor_file(dir + "/labels.ntsr", lshape, flabels);
    if (lshape.size() != 1 || lshape[0] != ds.image_shape[0])
        throw DataError("dataset labels " + dir + "/labels.ntsr: " + shape_str(lshape) + " vs " +
                        std::to_string(ds.image_shape[0]) + " images");
    ds.labels.reserve(flabels.size());
    for (float v : flabels) {
        const int lab = static_cast<int>(std::lround(v));
        if (lab < 0 || lab >= ds.classes)
            throw DataError("dataset label " + std::to_string(v) + " outside [0," + std::to_string(ds.classes) + ")");
        ds.labels.push_back(lab);
    }
    if (ds.n_train + ds.n_val != ds.count())
        throw DataError("dataset split " + std::to_string(ds.n_train) + "+" + std::to_string(ds.n_val) +
                        " does not cover " + std::to_string(ds.count()) + " rows");
    ds.images_checksum = fnv1a64_file(dir + "/images.ntsr");
    ds.labels_checksum = fnv1a64_file(dir + "/labels.ntsr");
    const std::string want_img = j.value("images_checksum", std::string());
    if (!want_img.empty() && want_img != hex64(ds.images_checksum))
        throw DataError("dataset images checksum mismatch: manifest " + want_img + " vs file " +
                        hex64(ds.images_checksum));
    const std::string want_lab = j.value("labels_checksum", std::string());
    if (!want_lab.empty() && want_lab != hex64(ds.labels_checksum))
        throw DataError("dataset labels checksum mismatch: manifest " + want_lab + " vs file " +
                        hex64(ds.labels_checksum));
    return ds;
}

std::vector<std::int64_t> epoch_order(const Dataset& ds, std::uint64_t seed, std::int64_t epoch) {
    auto order = ds.train_indices();
    std::mt19937_64 rng(splitmix64(mix_seed(seed, 0xe60c, static_cast<std::uint64_t>(epoch))));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

template <class S>
TensorT<S> augment_batch(const TensorT<S>& images, std::uint64_t seed, std::int64_t step, bool crop, bool flip,
                         bool jitter) {
    if (images.rank() != 4) throw ShapeError("augment_batch: expected (N,C,H,W), got " + shape_str(images.shape()));
    const std::int64_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    constexpr std::int64_t pad = 4;
    auto out = TensorT<S>::zeros(images.shape());
    for (std::int64_t b = 0; b < n; ++b) {
        std::mt19937_64 rng(
            splitmix64(mix_seed(seed, 0xa462, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b))));
        std::int64_t dy = pad, dx = pad;
        if (crop) {
            std::uniform_int_distribution<std::int64_t> off(0, 2 * pad);
            dy = off(rng);
            dx = off(rng);
        }
        bool do_flip = false;
        if (flip) {
            std::uniform_real_distribution<double> u(0.0, 1.0);
            do_flip = u(rng) < 0.5;
        }
        double delta = 0.0;
        if (jitter) {
            std::uniform_real_distribution<double> u(-0.2, 0.2);
            delta = u(rng);
        }
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const S* src = images.data() + (b * c + ch) * h * w;
            S* dst = out.data() + (b * c + ch) * h * w;
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x) {
                    // Source pixel in the zero-padded frame.
                    const std::int64_t sy = y + dy - pad;
                    const std::int64_t sx0 = x + dx - pad;
                    const std::int64_t sx = do_flip ? (w - 1 - sx0) : sx0;
                    double v = 0.0;
                    if (sy >= 0 && sy < h && sx >= 0 && sx < w) v = static_cast<double>(src[sy * w + sx]);
                    v = std::min(1.0, std::max(0.0, v + delta));
                    dst[y * w + x] = static_cast<S>(v);
                }
        }
    }
    return out;
}

template TensorT<float> augment_batch<float>(const TensorT<float>&, std::uint64_t, std::int64_t, bool, bool, bool);
template TensorT<double> augment_batch<double>(const TensorT<double>&, std::uint64_t, std::int64_t, bool, bool, bool);

}  // namespace sparsekd
