#pragma once

// Toy image datasets and their on-disk format.
//
// File layout: a text header of "key value" lines terminated by a line "end",
// then the image payload as little-endian float64 in NCHW order, then (if
// labelled) one little-endian int32 label per item.
//
//   skiptune-dataset 1
//   name shapes
//   shape 512 1 8 8
//   dtype float64-le
//   labels int32-le        (or "labels none")
//   seed 7
//   end

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "skiptune/tensor.hpp"

namespace skiptune {

struct Dataset {
    std::string name;
    Tensor images;            // [N, C, H, W]
    std::vector<int> labels;  // empty or one per item
    std::uint64_t seed = 0;

    std::size_t size() const { return images.defined() ? images.dim(0) : 0; }
    bool labelled() const { return !labels.empty(); }
    std::size_t num_classes() const;

    Dataset slice(std::size_t begin, std::size_t end) const;
    Tensor gather(const std::vector<std::size_t>& index) const;
    std::vector<int> gather_labels(const std::vector<std::size_t>& index) const;
};

// kind: "shapes" (four labelled glyph classes with jitter, values in [-1, 1])
// or "gmm" (a mixture of four isotropic Gaussians around fixed templates,
// labelled by component).
Dataset generate_dataset(const std::string& kind, std::size_t count, std::size_t image_size, std::uint64_t seed);

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

// Wraps generated samples (e.g. sampler output) for saving.
Dataset make_dataset(const std::string& name, Tensor images, std::vector<int> labels = {}, std::uint64_t seed = 0);

}  // namespace skiptune
