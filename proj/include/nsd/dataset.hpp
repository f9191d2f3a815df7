#pragma once

// Labeled image sets: the synthetic blob generator, IDX and raw-record
// readers, and per-channel normalization.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nsd/ndarray.hpp"

namespace nsd {

struct Dataset {
  NdArray images;  // (N, C, H, W)
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::array<std::size_t, 3> image_shape() const;
  // Throws DataError on label/shape inconsistencies.
  void validate() const;
  Dataset subset(std::span<const std::size_t> rows) const;
};

// Each image is one Gaussian bump near the center of a mid-gray field, with
// jittered position and amplitude plus independent pixel noise. Even classes
// are bright bumps, odd classes dark; the radius grows by 3/4 every two
// classes. Pixels are clamped to [0, 1].
struct BlobSpec {
  std::size_t classes = 2;
  std::size_t n = 200;  // total, split evenly across classes
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;
  double amplitude = 0.3;
  double radius = 1.5;    // class-0 bump standard deviation, in pixels
  double jitter = 1.0;    // center jitter standard deviation, in pixels
  double noise = 0.5;     // per-pixel noise standard deviation
  std::uint64_t seed = 7;
};

Dataset make_blobs(const BlobSpec& spec);

struct Normalization {
  std::vector<double> mean;  // per channel
  std::vector<double> std;

  void apply(Dataset& data) const;
};

Normalization fit_normalization(const Dataset& data);

// Stable hash of images and labels, used to tie expert banks to their data.
std::uint64_t fingerprint(const Dataset& data);

// IDX pair (images magic 0x00000803, labels 0x00000801). Pixels are bytes
// scaled to [0, 1]. Errors name the byte offset.
Dataset load_idx(const std::filesystem::path& images,
                 const std::filesystem::path& labels, std::size_t num_classes = 0);

// Records of (label u8, C*H*W little-endian f32 pixels in [0, 1]).
Dataset load_raw(const std::filesystem::path& path,
                 std::array<std::size_t, 3> image_shape, std::size_t num_classes = 0);

}  // namespace nsd
