#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparsekd/tensor.hpp"

// Synthetic class-conditional texture dataset: per-class grating
// orientation/frequency plus per-image random phase and pixel noise.
// Stored as the binary tensor format + a JSON split manifest.

namespace sparsekd {

struct Dataset {
    Shape image_shape;           // (n, 3, H, W)
    std::vector<float> images;   // row-major, values in [0,1]
    std::vector<int> labels;
    std::int64_t n_train = 0, n_val = 0;
    std::int64_t classes = 0;
    std::uint64_t images_checksum = 0, labels_checksum = 0;

    std::int64_t count() const { return image_shape.empty() ? 0 : image_shape[0]; }
    std::int64_t image_size() const { return image_shape.size() == 4 ? image_shape[2] : 0; }
    std::int64_t item_floats() const { return count() ? static_cast<std::int64_t>(images.size()) / count() : 0; }

    // Gathers rows into an (B,3,H,W) tensor of the requested scalar type.
    template <class S>
    TensorT<S> batch(const std::vector<std::int64_t>& indices) const {
        const std::int64_t per = item_floats();
        auto out = TensorT<S>::zeros({static_cast<std::int64_t>(indices.size()), image_shape[1], image_shape[2],
                                      image_shape[3]});
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const std::int64_t idx = indices[i];
            if (idx < 0 || idx >= count())
                throw DataError("dataset index " + std::to_string(idx) + " out of range [0," +
                                std::to_string(count()) + ")");
            for (std::int64_t j = 0; j < per; ++j)
                out.values()[static_cast<std::int64_t>(i) * per + j] =
                    static_cast<S>(images[static_cast<std::size_t>(idx * per + j)]);
        }
        return out;
    }

    std::vector<int> batch_labels(const std::vector<std::int64_t>& indices) const {
        std::vector<int> out;
        out.reserve(indices.size());
        for (auto idx : indices) out.push_back(labels.at(static_cast<std::size_t>(idx)));
        return out;
    }

    std::vector<std::int64_t> train_indices() const;
    std::vector<std::int64_t> val_indices() const;
};

// Writes images.ntsr, labels.ntsr and split.json. n_val rows go to the
// validation split; class assignment is balanced and shuffled per seed.
void generate_dataset(const std::string& dir, std::int64_t n, std::int64_t classes, std::int64_t image_size,
                      std::int64_t n_val, std::uint64_t seed, bool force);

Dataset load_dataset(const std::string& dir);

// Seeded per-epoch shuffle of the train split.
std::vector<std::int64_t> epoch_order(const Dataset& ds, std::uint64_t seed, std::int64_t epoch);

// Random crop (zero pad 4), horizontal flip p=0.5, brightness +-0.2 with
// clamping to [0,1]. Deterministic per (seed, step, item index).
template <class S>
TensorT<S> augment_batch(const TensorT<S>& images, std::uint64_t seed, std::int64_t step, bool crop, bool flip,
                         bool jitter);

}  // namespace sparsekd
