#pragma once

// Command implementations behind the `nsd` tool. Each takes a resolved
// RunConfig, writes under cfg.output_dir and reports to `out`.
//
// Exit codes: 0 ok, 2 config, 3 I/O or format, 4 fingerprint mismatch,
// 1 anything else.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "nsd/config.hpp"

namespace nsd {

enum ExitCode : int { kExitOk = 0, kExitOther = 1, kExitConfig = 2, kExitIo = 3, kExitFingerprint = 4 };

// Maps an exception thrown by `body` onto an exit code and prints a
// one-line diagnostic to `err`.
int run_guarded(const std::function<int()>& body, std::ostream& err);

// Paths under the output directory.
std::filesystem::path bank_dir(const RunConfig& cfg);
std::filesystem::path checkpoint_path(const RunConfig& cfg);
std::filesystem::path metrics_path(const RunConfig& cfg);

// Resolves "auto" dims and prints stored/allowed/utilization. Returns 0 iff
// the layout fits; infeasible dims exit 2.
int cmd_budget(const RunConfig& cfg, std::ostream& out);
// Trains expert.count trajectories and writes them with the data fingerprint.
int cmd_expert(const RunConfig& cfg, std::ostream& out);
// Runs (or resumes) distillation: checkpoint plus metrics.jsonl.
int cmd_distill(const RunConfig& cfg, std::ostream& out);
// Evaluates a checkpoint (default: the run's own) on the test split.
int cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, std::ostream& out);
// Writes the synthesized images of a checkpoint as a PGM/PPM grid.
int cmd_export(const RunConfig& cfg, const std::filesystem::path& checkpoint,
               const std::filesystem::path& image_path, std::ostream& out);

// The initial state for a run, before any distillation step.
DistillState initial_state(const RunConfig& cfg, const Dataset& train);

// One metrics.jsonl line (no trailing newline).
std::string metrics_line(const StepMetrics& m, bool wall_clock);

}  // namespace nsd
