#pragma once

// Expert trajectories and the distillation loop: unrolled student training
// on synthesized images, match loss against an expert segment, optional
// real-guided loss, and a momentum update of the spectrum tensors and kernels.
// Distribution matching (DM) and gradient matching (DC) objectives reuse the
// same state and update.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "nsd/dataset.hpp"
#include "nsd/decomposition.hpp"
#include "nsd/models.hpp"

namespace nsd {

struct Trajectory {
  ModelSpec spec;
  std::vector<ParamVector> snapshots;  // theta_0 .. theta_T
  std::uint64_t seed = 0;
  std::size_t stride = 1;              // epochs between snapshots

  void validate() const;
};

struct ExpertBank {
  std::vector<Trajectory> trajectories;
  std::uint64_t fingerprint = 0;  // of the training data

  void validate() const;
};

struct ExpertConfig {
  std::size_t epochs = 20;
  std::size_t stride = 1;
  std::size_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;

  void validate() const;
};

// SGD with momentum and weight decay on real data; snapshot theta_0 and then
// every `stride` epochs. Deterministic per seed.
Trajectory train_expert(const Dataset& data, const ModelSpec& spec,
                        const ExpertConfig& cfg, std::uint64_t seed);

// `count` trajectories seeded from `root_seed`, trained on up to `threads`
// workers. Output order does not depend on the thread count.
ExpertBank train_experts(const Dataset& data, const ModelSpec& spec,
                         const ExpertConfig& cfg, std::size_t count,
                         std::uint64_t root_seed, std::size_t threads = 1);

enum class Objective { Trajectory, DistributionMatching, GradientMatching };

std::string to_string(Objective objective);
Objective objective_from_string(const std::string& name);

struct DistillConfig {
  Objective objective = Objective::Trajectory;
  ModelSpec model;                // network for the DM/DC objectives
  std::size_t inner_steps = 10;   // N
  std::size_t expert_span = 2;    // M, in snapshots
  double inner_lr = 0.02;         // alpha
  double guided_weight = 0.1;     // gamma
  double outer_lr = 1.0;
  double outer_momentum = 0.9;
  std::size_t iterations = 1000;
  std::size_t batch = 32;
  bool normalized = true;
  std::uint64_t seed = 0;

  void validate() const;
};

// ||student - target||^2, divided by ||start - target||^2 when normalized.
// Throws DegenerateSegmentError when the normalizer is zero.
ad::Var match_loss(std::span<const ad::Var> student_final, const ParamVector& expert_start,
                   const ParamVector& expert_target, bool normalized);

// Cross-entropy of the student's parameters on a real batch.
ad::Var real_guided_loss(const ModelSpec& spec, std::span<const ad::Var> student_final,
                         const Dataset& real_batch);

// Per-class squared distance between mean embeddings of synthetic and real
// images under a frozen, randomly initialized network.
struct BaselineStats {
  std::size_t skipped = 0;  // classes (DM) or layers (DC) left out
};
ad::Var dm_loss(const ad::Var& synthetic, std::span<const int> synthetic_labels,
                const Dataset& real_batch, const ModelSpec& embed_spec,
                std::uint64_t embed_seed, BaselineStats* stats = nullptr);

// Sum over tensors of 1 - cos(a_i, b_i); pairs with a zero side are skipped.
ad::Var layerwise_cosine_distance(std::span<const ad::Var> a, std::span<const NdArray> b,
                                  BaselineStats* stats = nullptr);

// Sum over parameter tensors of 1 - cos(grad on real, grad on synthetic).
ad::Var dc_loss(const ad::Var& synthetic, std::span<const int> synthetic_labels,
                const Dataset& real_batch, const ModelSpec& spec,
                std::span<const ad::Var> params, BaselineStats* stats = nullptr);

struct StepMetrics {
  std::size_t iteration = 0;       // 1-based step count after the update
  double match = 0.0;              // l (or the DM/DC loss)
  std::optional<double> guided;    // L; empty when gamma = 0
  double combined = 0.0;           // gamma L + l
  double wall_seconds = 0.0;
  std::size_t skipped = 0;
};

// Everything the inner loop consumed, for replay checks.
struct StepTrace {
  std::size_t trajectory = 0;
  std::size_t start = 0;
  ParamVector student_final;
  std::vector<NdArray> batch_images;
  std::vector<std::vector<int>> batch_labels;
};

// Random choices of one outer iteration, fixed by (cfg.seed, state.step).
struct StepPlan {
  std::size_t trajectory = 0;
  std::size_t start = 0;
  std::vector<std::vector<std::size_t>> synthetic_rows;  // one per inner step
  std::vector<std::size_t> real_rows;
  std::uint64_t band_seed = 0;
  std::uint64_t model_seed = 0;  // DM embedding / DC network
};

StepPlan plan_step(const DistillState& state, const ExpertBank& bank, const Dataset& real,
                   const DistillConfig& cfg);

struct StepObjective {
  ad::Var combined;
  double match = 0.0;
  std::optional<double> guided;
  std::size_t skipped = 0;
  StepTrace trace;
};

// Builds the differentiable objective for a plan without touching the state.
StepObjective step_objective(const DistillState& state, const ExpertBank& bank,
                             const Dataset& real, const DistillConfig& cfg,
                             const StepPlan& plan);

// One outer iteration. All randomness derives from (cfg.seed, state.step),
// so a resumed run replays exactly. Throws SamplingError when no trajectory
// covers a span of M snapshots, and NumericalError (state untouched) when the loss
// or its gradient is not finite.
StepMetrics distill_step(DistillState& state, const ExpertBank& bank, const Dataset& real,
                         const DistillConfig& cfg, StepTrace* trace = nullptr);

struct DistillCallbacks {
  std::function<void(const StepMetrics&)> on_metrics;
  std::function<void(const DistillState&)> on_checkpoint;
  std::size_t checkpoint_every = 0;  // 0: only at the end
};

// Runs distill_step until state.step reaches cfg.iterations.
std::vector<StepMetrics> distill(DistillState& state, const ExpertBank& bank,
                                 const Dataset& real, const DistillConfig& cfg,
                                 const DistillCallbacks& callbacks = {});

// Plain momentum SGD on the state's trainable leaves: v = mu v + g, p -= lr v.
void outer_update(DistillState& state, std::span<const NdArray> grads, double lr,
                  double momentum);

}  // namespace nsd
