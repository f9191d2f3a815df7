#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "nsd/autodiff.hpp"

namespace nsd::ad {

struct SgdSettings {
  std::size_t steps = 1;
  double lr = 0.01;
  double momentum = 0.0;
};

// Student loss for one inner step, built from the current parameters and
// that step's batch.
using StudentLoss = std::function<Var(std::span<const Var> params,
                                      const Var& batch, std::size_t step)>;
using OuterLoss = std::function<Var(std::span<const Var> final_params)>;

// Runs `settings.steps` SGD updates with the full tape retained, so the
// returned parameters stay differentiable w.r.t. whatever the batches were
// built from. Step t consumes batches[t]. Throws ContractViolation if a
// batch has no gradient path (detached synthetic data).
std::vector<Var> unroll_sgd(const StudentLoss& loss,
                            std::span<const NdArray> init_params,
                            std::span<const Var> batches,
                            const SgdSettings& settings);

struct UnrollGradients {
  std::vector<NdArray> final_params;
  double outer_loss = 0.0;
  std::vector<NdArray> grads;  // aligned with the requested leaves
};

UnrollGradients unrolled_sgd_gradients(const StudentLoss& loss,
                                       std::span<const NdArray> init_params,
                                       std::span<const Var> batches,
                                       const SgdSettings& settings,
                                       const OuterLoss& outer,
                                       std::span<const Var> leaves);

// Central differences of `loss` w.r.t. every entry of the leaf. The leaf's
// value is perturbed in place and restored afterwards.
NdArray finite_difference_oracle(const std::function<double()>& loss, Var leaf,
                                 double h);

// Same, restricted to selected flat entries.
std::vector<double> finite_difference_entries(
    const std::function<double()>& loss, Var leaf, double h,
    std::span<const std::size_t> entries);

}  // namespace nsd::ad
