#pragma once

// Run configuration: flat key=value text with dotted sections, e.g.
//
//   budget.ipc = 1
//   distill.inner_steps = 10
//
// Lines starting with '#' are comments. Unknown or repeated keys are
// rejected. Every field has a default; print_config lists them all.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nsd/dataset.hpp"
#include "nsd/decomposition.hpp"
#include "nsd/evalharness.hpp"
#include "nsd/matching.hpp"
#include "nsd/transforms.hpp"

namespace nsd {

struct DataConfig {
  std::string source = "blobs";  // blobs | idx | raw
  BlobSpec blobs;                // classes and image shape come from the budget
  std::size_t test_n = 200;
  std::uint64_t test_seed = 8;
  std::filesystem::path images, labels, test_images, test_labels;  // idx
  std::filesystem::path raw_train, raw_test;                       // raw
};

struct RunConfig {
  DataConfig data;
  BudgetSpec budget{2, 1, {1, 8, 8}, 0};

  bool decomposition = true;  // false: raw-pixel distillation
  TransformKind kind;
  std::optional<DecompositionDims> dims;  // empty: auto
  std::size_t n_tensors = 0;              // 0: one per class
  std::size_t n_kernels = 1;
  LabelRule label_rule = LabelRule::PerClassTensors;
  std::size_t max_u1 = 256;

  ModelFamily model_family = ModelFamily::ConvNet;
  std::size_t model_depth = 2;
  std::size_t model_width = 16;

  std::size_t expert_count = 3;
  ExpertConfig expert{10, 1, 32, 0.01, 0.9, 5e-4};
  DistillConfig distill;
  std::size_t checkpoint_every = 50;
  bool resume = true;
  bool log_wall_clock = true;
  EvalConfig eval;
  bool eval_random_baseline = false;
  std::size_t export_cols = 10;

  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "run";

  // Model spec implied by the budget's classes and image shape.
  ModelSpec model() const;
  // Copies model and derived seeds into distill/eval; throws ConfigError.
  void resolve();
  std::uint64_t digest() const;
  // Digest over the fields a resumed run must share with its checkpoint
  // (everything except iteration count, checkpoint interval, logging, eval,
  // export and the output directory).
  std::uint64_t resume_digest() const;
};

// Applies "key=value" lines. `origin` prefixes diagnostics.
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin);
void apply_override(RunConfig& cfg, const std::string& assignment);
// Reads a file (IoError if missing), applies overrides, resolves.
RunConfig load_config(const std::filesystem::path* path,
                      const std::vector<std::string>& overrides);
// Canonical "key=value" listing of every field, in schema order.
std::string print_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

// Worker count: NSD_THREADS when set (ConfigError if not a positive
// integer), else the hardware concurrency.
std::size_t worker_threads();

struct LoadedData {
  Dataset train;
  Dataset test;
  Normalization normalization;  // fitted on train, applied to both
  std::uint64_t digest = 0;     // config digest combined with the statistics
};

// Loads the configured source, checks it against the budget's classes and
// image shape (ConfigError), and normalizes per channel.
LoadedData load_dataset(const RunConfig& cfg);

}  // namespace nsd
