#pragma once

// Synthetic dataset generation and PPM (P6) image I/O. Images are (H, W, C)
// float tensors in [0, 1].

#include <string>
#include <vector>

#include "sdgc/tensor.hpp"

namespace sdgc::dataset {

using Image = ad::Tensor<float>;

struct SyntheticSpec {
  int64_t count = 2000;
  int64_t height = 32;
  int64_t width = 32;

  void validate() const {
    if (count < 1 || height < 4 || width < 4)
      throw Error(cat("dataset: bad spec count=", count, " dims=", height, "x", width));
  }
};

// Generative factors per image: background hue, gradient angle, shape kind,
// center x/y, radii x/y, rotation, shape hue.
constexpr int kSyntheticFactors = 9;

std::vector<Image> generate_synthetic_dataset(const SyntheticSpec& spec, Rng& rng);

// Binary PPM (P6), 8-bit RGB, maxval 255.
Image load_ppm(const std::string& path);
void save_ppm(const Image& img, const std::string& path);

// [0,1] float -> [0,255] byte value (the denormalization used on output)
uint8_t pixel_to_u8(float v);

uint64_t dataset_hash(const std::vector<Image>& imgs);

}  // namespace sdgc::dataset
