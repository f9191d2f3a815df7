#pragma once

// Kernel factors built from classical transforms: the cosine kernel, a
// single-level orthonormal Haar split, and truncated SVD of a real batch.

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "nsd/decomposition.hpp"
#include "nsd/ndarray.hpp"
#include "nsd/rng.hpp"

namespace nsd {

enum class TransformTag { Random, Dct, Ldct, Dwt, Svd, Lsvd };

std::string to_string(TransformTag tag);
TransformTag transform_tag_from_string(const std::string& name);

struct TransformKind {
  TransformTag tag = TransformTag::Random;
  BandProbs band_probs{1.0, 0.5, 0.5, 0.5};  // DWT only; LL is always kept
  std::size_t truncation_rank = 1;           // SVD only
  // Draw the batch-mode factor from |U|: with a negative coefficient an
  // output image is a contrast-inverted copy of its spectrum slices.
  bool nonnegative_batch = true;

  bool learnable() const;
  void validate() const;
};

// K[i, j] = cos(pi / n * (j + 0.5) * (i + 0.5)), shape (m, n).
NdArray dct_kernel(std::size_t m, std::size_t n);
// (2 / n) * K^T, shape (n, m). x -> x K^T (2/n) -> (.) K is the identity for
// m == n and an idempotent projection for m < n.
NdArray dct_inverse_kernel(std::size_t m, std::size_t n);

struct HaarBands {
  NdArray ll, lh, hl, hh;  // each (C, H/2, W/2); first letter is the H axis
};

HaarBands haar_split(const NdArray& image);
NdArray haar_merge(const HaarBands& bands);

// Per-band keep flags in LL, LH, HL, HH order. LL is always kept.
std::array<bool, 4> sample_band_keep(const BandProbs& probs, Rng& rng);
HaarBands haar_band_sample(const HaarBands& bands, Rng& rng, const BandProbs& probs);

// Rows (u x u) of the 1-D Haar synthesis matrix: low rows first, then high.
NdArray haar_synthesis_matrix(std::size_t u);

// 0/1 mask over a spectrum of extents `t` whose spatial modes feed Haar
// factors of output extents `u`. Spatial index r < u/2 is the low band.
NdArray spectrum_band_mask(const Extents4& t, const Extents4& u,
                           const std::array<bool, 4>& keep);

struct TruncatedSvd {
  NdArray u;                           // (rows, n)
  std::vector<double> singular_values; // all of them, descending
  NdArray v;                           // (cols, n)
};

// Thin SVD of a (rows, cols) matrix, truncated to rank n.
TruncatedSvd truncated_svd(const NdArray& matrix, std::size_t n);

struct SvdInit {
  NdArray spectrum;  // (n, C, H, W): the first n right singular vectors
  NdArray kernel;    // (n, B): (U Sigma)^T truncated
  std::vector<double> singular_values;
};

// Flattens (B, C, H, W) to (B, C*H*W) and keeps the leading n components.
SvdInit svd_init(const NdArray& images, std::size_t rank);

// Factors for modes 1..4 of a kernel mapping dims.t -> dims.u. Random kinds
// are trainable; DCT/DWT fill the spatial modes analytically and use random
// factors for the batch and channel modes. SVD kinds need data: use
// make_svd_kernel instead.
SeparableKernel make_kernel_factors(const TransformKind& kind,
                                    const DecompositionDims& dims, Rng& rng,
                                    int kernel_id = 0);
SeparableKernel make_svd_kernel(const SvdInit& init, bool trainable,
                                std::array<std::size_t, 3> image_shape,
                                int kernel_id = 0);

StorageLayout storage_layout(const TransformKind& kind, std::size_t n_tensors,
                             std::size_t n_kernels);

struct StateRequest {
  TransformKind kind;
  BudgetSpec budget;
  std::optional<DecompositionDims> dims;  // auto when empty
  std::size_t n_tensors = 0;              // 0: one per class
  std::size_t n_kernels = 1;
  LabelRule label_rule = LabelRule::PerClassTensors;
  std::size_t max_u1 = 256;
};

// Real images grouped by class; needed for SVD kinds only.
struct ClassImages {
  const NdArray* images = nullptr;  // (N, C, H, W)
  const std::vector<int>* labels = nullptr;
};

DistillState build_state(const StateRequest& request, Rng& rng,
                         const ClassImages& real = {});

// One tensor of ipc images per class under frozen identity kernels: plain
// pixel distillation at the same budget. Seeded from `real` when given.
DistillState build_pixel_state(const BudgetSpec& budget, Rng& rng,
                               const ClassImages& real = {});

}  // namespace nsd
