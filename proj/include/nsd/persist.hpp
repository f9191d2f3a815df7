#pragma once

// Expert trajectories and distillation states as NSDT containers. Values are
// stored as f64 so a save/load round trip is bitwise exact.

#include <filesystem>
#include <string>

#include "nsd/container.hpp"
#include "nsd/decomposition.hpp"
#include "nsd/matching.hpp"

namespace nsd {

// "theta/<t>" flat parameter vectors plus a "meta" JSON record (spec, seed,
// stride, data fingerprint).
Container trajectory_to_container(const Trajectory& t, std::uint64_t data_fingerprint);
Trajectory trajectory_from_container(const Container& c, std::uint64_t* data_fingerprint = nullptr);

// One expert_<k>.nsdt per trajectory under `dir`.
void save_bank(const std::filesystem::path& dir, const ExpertBank& bank);
// Throws IoError when no expert file exists, FormatError when the files
// disagree on spec or fingerprint.
ExpertBank load_bank(const std::filesystem::path& dir);

// "tensor/<i>", "kernel/<k>/mode<n>", "velocity/<i>" arrays plus a "meta"
// JSON record. `run_tag` is stored verbatim for the caller's own checks.
Container state_to_container(const DistillState& s, const std::string& run_tag = "");
DistillState state_from_container(const Container& c, std::string* run_tag = nullptr);

}  // namespace nsd
