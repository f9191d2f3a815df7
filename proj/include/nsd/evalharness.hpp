#pragma once

// Evaluation protocol: train fresh networks on a (synthetic or subsampled)
// training set and report top-1 accuracy on held-out real data. Also the
// ablation grid, inter-dimensional similarity and image export.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "nsd/dataset.hpp"
#include "nsd/decomposition.hpp"
#include "nsd/matching.hpp"
#include "nsd/models.hpp"
#include "nsd/transforms.hpp"

namespace nsd {

struct EvalConfig {
  ModelSpec model;
  std::size_t epochs = 200;
  std::size_t batch = 32;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool augment = true;  // horizontal flip + pad-2 random crop
  std::size_t repeats = 5;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  // Stable hash of every field except `threads`.
  std::uint64_t digest() const;
};

struct EvalReport {
  std::vector<double> accuracies;  // one per repeat
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  ModelSpec spec;
  std::uint64_t config_digest = 0;

  void validate() const;
};

std::string to_json(const EvalReport& report);

// Flip with probability 1/2, then a random HxW crop of the zero-padded
// (by 2) image. Works in place on a (B, C, H, W) batch.
void augment_batch(NdArray& images, Rng& rng);

// Trains one fresh model (seeded per repeat) on `train`.
ParamVector train_model(const Dataset& train, const EvalConfig& cfg, std::uint64_t seed);

// `cfg.repeats` independently seeded train/test runs.
EvalReport evaluate_dataset(const Dataset& train, const Dataset& test, const EvalConfig& cfg);

// Detached synthesis (Haar kernels keep all bands), then evaluate_dataset.
// Never mutates the state.
Dataset synthesized_training_set(const DistillState& state);
EvalReport evaluate_synthetic(const DistillState& state, const Dataset& test,
                              const EvalConfig& cfg);

// ipc rows per class drawn without replacement for each repeat, kept in
// dataset order. Throws RangeError when a class has fewer than ipc rows.
std::vector<std::size_t> random_subset_rows(const Dataset& data, std::size_t ipc, Rng& rng);
EvalReport random_subset_baseline(const Dataset& real_train, const Dataset& test,
                                  const BudgetSpec& budget, const EvalConfig& cfg);

enum class SimilarityAxis { B, H, W };

struct SimilarityResult {
  NdArray matrix;               // (n, n) cosine similarities
  std::size_t zero_slices = 0;  // slices with zero norm
};

// Rows for axis B are images flattened over (C, H, W); for H, height slices
// flattened over (B, C, W); W likewise. A zero slice has similarity 0 with
// every other slice and 1 with itself. Throws DimensionError when B < 2.
SimilarityResult dimension_similarity(const NdArray& images, SimilarityAxis axis);
double mean_off_diagonal(const NdArray& matrix);

// Everything an ablation cell shares with its siblings.
struct AblationBase {
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  const ExpertBank* bank = nullptr;
  BudgetSpec budget;
  TransformKind kind;
  DistillConfig distill;
  EvalConfig eval;
  std::uint64_t state_seed = 0;
  std::size_t max_u1 = 256;
};

struct AblationAxes {
  std::vector<bool> decomposition{true};
  std::vector<double> guided_weight{0.1};
  std::vector<std::pair<std::size_t, std::size_t>> t1_t3;  // empty: auto dims
  std::vector<TransformTag> kinds;                          // empty: base kind
};

struct AblationCell {
  bool decomposition = true;
  double guided_weight = 0.0;
  std::optional<std::pair<std::size_t, std::size_t>> t1_t3;
  TransformTag kind = TransformTag::Random;
  std::uint64_t config_digest = 0;
  bool feasible = true;
  std::string note;  // reason when infeasible
  std::optional<EvalReport> report;
  std::vector<StepMetrics> log;
  std::uint64_t state_digest = 0;  // final distilled state
};

// Initial state for one cell's settings. Throws ConfigError when the
// dims do not fit the budget.
DistillState ablation_state(const AblationBase& base, bool decomposition, TransformTag kind,
                            const std::optional<std::pair<std::size_t, std::size_t>>& t1_t3);

// Cartesian product of the axes; every cell runs distill then
// evaluate_synthetic from the same base seeds, so results do not depend
// on cell order. Infeasible cells are marked and skipped.
std::vector<AblationCell> ablation_grid(const AblationBase& base, const AblationAxes& axes);

// One line per cell: Dec, guided weight, kind, dims and mean +- std.
std::string format_ablation_table(const std::vector<AblationCell>& cells);
std::string to_jsonl(const std::vector<AblationCell>& cells);

// Min-max to [0, 255] per image; a constant image maps to 128.
std::vector<unsigned char> normalize_to_bytes(const NdArray& image);

// Tiles all synthesized images `grid_cols` wide. One channel writes a PGM
// (P5), three a PPM (P6); other channel counts write one PGM per channel
// as <stem>_c<k>.pgm. Returns the written paths; throws IoError.
std::vector<std::filesystem::path> export_images(const DistillState& state,
                                                 const std::filesystem::path& path,
                                                 std::size_t grid_cols);

}  // namespace nsd
