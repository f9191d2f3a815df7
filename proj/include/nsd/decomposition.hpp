#pragma once

// Spectrum tensors, separable kernels and their pairwise combination into a
// synthetic image set, plus storage accounting against an images-per-class
// budget.
//
// Modes are 0-based in code (0: multiplicity/batch, 1: channel, 2: height,
// 3: width). Persisted names use 1-based "mode<n>".

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "nsd/autodiff.hpp"
#include "nsd/ndarray.hpp"
#include "nsd/rng.hpp"

namespace nsd {

using Extents4 = std::array<std::size_t, 4>;

struct SpectrumTensor {
  ad::Var values;  // shape (t1, t2, t3, t4)
  int class_id = 0;

  Extents4 dims() const;
};

struct KernelFactor {
  std::size_t mode = 0;
  ad::Var values;  // shape (t_n, u_n); requires_grad iff trainable
  // Reconstructible from code (identity, DCT, Haar), so never shipped.
  bool analytic = false;

  bool trainable() const { return values.requires_grad(); }
  std::size_t in_extent() const { return values.shape()[0]; }
  std::size_t out_extent() const { return values.shape()[1]; }
};

// Keep-probabilities for the four Haar bands, ordered LL, LH, HL, HH.
using BandProbs = std::array<double, 4>;

struct SeparableKernel {
  std::array<KernelFactor, 4> factors;
  int kernel_id = 0;
  int class_id = 0;  // used by the per-class-kernel label rule
  // Set for Haar kernels: spatial spectrum rows/cols below u/2 are low band.
  std::optional<BandProbs> band_probs;

  Extents4 in_extents() const;
  Extents4 out_extents() const;
};

enum class LabelRule { PerClassTensors, PerClassKernels, PerPair };

std::string to_string(LabelRule rule);
LabelRule label_rule_from_string(const std::string& name);

struct Pair {
  std::size_t tensor = 0;  // 0-based
  std::size_t kernel = 0;  // 0-based
  bool operator==(const Pair&) const = default;
};

struct DistillState {
  std::vector<SpectrumTensor> tensors;
  std::vector<SeparableKernel> kernels;
  LabelRule label_rule = LabelRule::PerClassTensors;
  int num_classes = 1;
  // Outer-optimizer momentum buffers, aligned with trainable_leaves().
  std::vector<NdArray> velocity;
  std::size_t step = 0;

  // Spectrum tensors first, then trainable factors kernel-major, mode-minor.
  std::vector<ad::Var> trainable_leaves() const;
  // Throws DimensionError / ContractViolation on a broken invariant.
  void validate() const;
  // Independent copy: no leaf is shared with the source.
  DistillState clone() const;
  // Hash of every value, flag, momentum buffer and the step counter.
  std::uint64_t digest() const;
};

struct BudgetSpec {
  std::size_t num_classes = 10;
  std::size_t ipc = 1;
  std::array<std::size_t, 3> image_shape{3, 32, 32};  // (channels, H, W)
  std::size_t train_images = 0;  // full training-set size, 0 if unknown

  std::size_t image_scalars() const;
  std::size_t budget_scalars() const;
  // Budget relative to the full training set, in percent (0 if unknown).
  double ratio_percent() const;
  void validate() const;
};

struct BudgetReport {
  bool ok = false;
  std::size_t stored = 0;
  std::size_t allowed = 0;
  double utilization = 0.0;
};

// x_{j + (i-1) N_K} indexing, 1-based in and out.
std::size_t pair_index(std::size_t i, std::size_t j, std::size_t n_kernels);

// Four chained mode products. `band_mask`, when given, multiplies the
// spectrum before synthesis (Haar band sampling).
ad::Var synthesize_pair(const SpectrumTensor& tensor,
                        const SeparableKernel& kernel,
                        const NdArray* band_mask = nullptr);

std::vector<Pair> all_pairs(const DistillState& state);
int pair_label(const DistillState& state, const Pair& pair);

struct SynthesisOptions {
  std::optional<std::vector<Pair>> selection;
  // When set, Haar kernels sample a band mask per pair from this stream.
  Rng* band_rng = nullptr;
};

struct SyntheticData {
  ad::Var images;  // (P * u1, u2, u3, u4)
  std::vector<int> labels;
};

SyntheticData synthesize_dataset(const DistillState& state,
                                 const SynthesisOptions& options = {});

std::size_t parameter_count(const DistillState& state);
BudgetReport budget_check(std::size_t stored, const BudgetSpec& budget);
BudgetReport budget_check(const DistillState& state, const BudgetSpec& budget);

// Dense 8-mode kernel with entry [a,b,c,d,p,q,r,s] = k1[a,p] k2[b,q] k3[c,r] k4[d,s].
NdArray compose_full_kernel(const SeparableKernel& kernel,
                            std::size_t cap = 1'000'000);
// Contracts a spectrum tensor against a dense 8-mode kernel.
NdArray contract_full_kernel(const NdArray& tensor, const NdArray& full_kernel);

struct DecompositionDims {
  Extents4 t{};
  Extents4 u{};
};

// Spatial extent for the spectrum: H/2 up to ipc 10, ceil(7H/8) beyond.
std::size_t scheduled_spatial_extent(std::size_t ipc, std::size_t height);

// Which factors count toward storage for a given layout.
struct StorageLayout {
  std::size_t n_tensors = 1;
  std::size_t n_kernels = 1;
  std::array<bool, 4> stored_factor{true, true, true, true};
};

std::size_t stored_scalars(const DecompositionDims& dims,
                           const StorageLayout& layout);

// Applies the spatial schedule, then picks the largest t1 (and for it the
// largest u1 > t1) that fits the budget. Throws ConfigError if none does.
DecompositionDims auto_dims(const BudgetSpec& budget,
                            const StorageLayout& layout,
                            std::size_t max_u1 = 256);

// Frozen identity factors for every mode: synthesis reproduces the spectrum.
SeparableKernel make_identity_kernel(const Extents4& extents, int kernel_id = 0);

// Spectrum entries ~ U[-sqrt(3), sqrt(3)] (unit variance); random factors
// ~ U[-sqrt(3/t), sqrt(3/t)] so each mode product preserves variance.
SpectrumTensor make_random_tensor(const Extents4& dims, int class_id, Rng& rng);
NdArray random_factor_values(std::size_t in, std::size_t out, Rng& rng);

}  // namespace nsd
