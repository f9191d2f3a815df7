#include "nsd/cli.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "json.hpp"
#include "nsd/error.hpp"
#include "nsd/persist.hpp"

namespace nsd {

namespace {

std::string hex(std::uint64_t v) {
  char b[17];
  std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(v));
  return b;
}

std::string extents(const Extents4& e) {
  return "(" + std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]) +
         "," + std::to_string(e[3]) + ")";
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Keeps the well-formed prefix of a metrics log up to `step` and rewrites
// it in place. Lines past a checkpoint belong to a run that was cut short.
void truncate_metrics(const std::filesystem::path& path, std::size_t step) {
  std::ifstream in(path);
  std::string kept, line;
  while (in && std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.contains("iteration")) break;
    if (j["iteration"].get<std::size_t>() > step) break;
    kept += line + "\n";
  }
  in.close();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << kept;
  }
  std::filesystem::rename(tmp, path);
}

DistillState load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no checkpoint at " + path.string());
  return state_from_container(read_container(path));
}

}  // namespace

int run_guarded(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const FingerprintMismatch& e) {
    err << "fingerprint mismatch: " << e.what() << "\n";
    return kExitFingerprint;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const RangeError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const SamplingError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitOther;
  }
}

std::filesystem::path bank_dir(const RunConfig& cfg) { return cfg.output_dir / "experts"; }
std::filesystem::path checkpoint_path(const RunConfig& cfg) {
  return cfg.output_dir / "checkpoint.nsdt";
}
std::filesystem::path metrics_path(const RunConfig& cfg) {
  return cfg.output_dir / "metrics.jsonl";
}

DistillState initial_state(const RunConfig& cfg, const Dataset& train) {
  Rng rng = make_rng(cfg.seed, "state-init");
  const ClassImages real{&train.images, &train.labels};
  if (!cfg.decomposition) return build_pixel_state(cfg.budget, rng, real);
  StateRequest req;
  req.kind = cfg.kind;
  req.budget = cfg.budget;
  req.dims = cfg.dims;
  req.n_tensors = cfg.n_tensors;
  req.n_kernels = cfg.n_kernels;
  req.label_rule = cfg.label_rule;
  req.max_u1 = cfg.max_u1;
  return build_state(req, rng, real);
}

std::string metrics_line(const StepMetrics& m, bool wall_clock) {
  nlohmann::json j;
  j["iteration"] = m.iteration;
  j["match"] = m.match;
  j["guided"] = m.guided ? nlohmann::json(*m.guided) : nlohmann::json(nullptr);
  j["combined"] = m.combined;
  j["skipped"] = m.skipped;
  if (wall_clock) j["wall_seconds"] = m.wall_seconds;
  return j.dump();
}

int cmd_budget(const RunConfig& cfg, std::ostream& out) {
  const auto& b = cfg.budget;
  out << "classes " << b.num_classes << "  ipc " << b.ipc << "  image " << b.image_shape[0]
      << "x" << b.image_shape[1] << "x" << b.image_shape[2] << "\n";
  BudgetReport report;
  if (!cfg.decomposition) {
    out << "layout raw pixels\n";
    report = budget_check(b.budget_scalars(), b);
  } else if (cfg.kind.tag == TransformTag::Svd || cfg.kind.tag == TransformTag::Lsvd) {
    // SVD extents depend on the per-class image counts.
    const LoadedData data = load_dataset(cfg);
    const DistillState s = initial_state(cfg, data.train);
    out << "layout " << to_string(cfg.kind.tag) << " rank " << cfg.kind.truncation_rank
        << " batch " << s.kernels.front().factors[0].out_extent() << "\n";
    report = budget_check(s, b);
  } else {
    const std::size_t n_t = cfg.n_tensors == 0 ? b.num_classes : cfg.n_tensors;
    const auto layout = storage_layout(cfg.kind, n_t, cfg.n_kernels);
    const DecompositionDims dims = cfg.dims ? *cfg.dims : auto_dims(b, layout, cfg.max_u1);
    out << "layout " << to_string(cfg.kind.tag) << "  tensors " << n_t << "  kernels "
        << cfg.n_kernels << "\n";
    out << "dims t=" << extents(dims.t) << " u=" << extents(dims.u)
        << (cfg.dims ? "" : " (auto)") << "\n";
    report = budget_check(stored_scalars(dims, layout), b);
  }
  char util[32];
  std::snprintf(util, sizeof util, "%.4f", report.utilization);
  out << "stored " << report.stored << "\nallowed " << report.allowed << "\nutilization "
      << util << "\n"
      << (report.ok ? "ok" : "over budget") << "\n";
  if (!report.ok) throw ConfigError("stored " + std::to_string(report.stored) +
                                    " scalars exceed the budget of " +
                                    std::to_string(report.allowed));
  return kExitOk;
}

int cmd_expert(const RunConfig& cfg, std::ostream& out) {
  const LoadedData data = load_dataset(cfg);
  const ExpertBank bank = train_experts(data.train, cfg.model(), cfg.expert, cfg.expert_count,
                                        stream_seed(cfg.seed, "experts"), worker_threads());
  save_bank(bank_dir(cfg), bank);
  out << "fingerprint " << hex(bank.fingerprint) << "\n";
  for (std::size_t k = 0; k < bank.trajectories.size(); ++k) {
    const auto& t = bank.trajectories[k];
    const double acc = accuracy(t.spec, t.snapshots.back(), data.test.images, data.test.labels);
    char line[96];
    std::snprintf(line, sizeof line, "expert %zu: %zu snapshots, test accuracy %.4f\n", k,
                  t.snapshots.size(), acc);
    out << line;
  }
  out << "wrote " << bank_dir(cfg).string() << "\n";
  return kExitOk;
}

int cmd_distill(const RunConfig& cfg, std::ostream& out) {
  const LoadedData data = load_dataset(cfg);
  const ExpertBank bank = load_bank(bank_dir(cfg));
  const std::uint64_t fp = fingerprint(data.train);
  if (bank.fingerprint != fp) {
    throw FingerprintMismatch("experts were trained on data " + hex(bank.fingerprint) +
                              ", this run loads " + hex(fp));
  }
  if (!(bank.trajectories.front().spec == cfg.model())) {
    throw ConfigError("experts use a different model spec than this config");
  }
  ensure_dir(cfg.output_dir);
  const std::string tag = hex(cfg.resume_digest());
  DistillState state;
  if (cfg.resume && std::filesystem::exists(checkpoint_path(cfg))) {
    std::string stored_tag;
    state = state_from_container(read_container(checkpoint_path(cfg)), &stored_tag);
    if (stored_tag != tag) {
      throw ConfigError("checkpoint " + checkpoint_path(cfg).string() +
                        " was written under a different config; set distill.resume=false "
                        "to start over");
    }
    truncate_metrics(metrics_path(cfg), state.step);
    out << "resuming at step " << state.step << "\n";
  } else {
    state = initial_state(cfg, data.train);
    std::ofstream(metrics_path(cfg), std::ios::trunc);
  }

  std::ofstream log(metrics_path(cfg), std::ios::app);
  if (!log) throw IoError("cannot write " + metrics_path(cfg).string());
  DistillCallbacks cb;
  cb.checkpoint_every = cfg.checkpoint_every;
  cb.on_metrics = [&](const StepMetrics& m) {
    log << metrics_line(m, cfg.log_wall_clock) << "\n";
    log.flush();
  };
  cb.on_checkpoint = [&](const DistillState& s) {
    write_container(checkpoint_path(cfg), state_to_container(s, tag));
  };
  const auto metrics = distill(state, bank, data.train, cfg.distill, cb);
  // The final state is saved even when it falls between checkpoint steps.
  write_container(checkpoint_path(cfg), state_to_container(state, tag));
  out << "steps " << metrics.size() << ", now at " << state.step << "\n";
  if (!metrics.empty()) {
    char line[96];
    std::snprintf(line, sizeof line, "last combined loss %.6g\n", metrics.back().combined);
    out << line;
  }
  out << "checkpoint " << checkpoint_path(cfg).string() << "\n";
  return kExitOk;
}

int cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint, std::ostream& out) {
  const LoadedData data = load_dataset(cfg);
  const DistillState state =
      load_checkpoint(checkpoint.empty() ? checkpoint_path(cfg) : checkpoint);
  EvalConfig ec = cfg.eval;
  ec.threads = worker_threads();
  const EvalReport report = evaluate_synthetic(state, data.test, ec);
  char line[128];
  std::snprintf(line, sizeof line, "synthetic: %.2f +- %.2f over %zu repeats\n",
                100.0 * report.mean, 100.0 * report.stddev, report.accuracies.size());
  out << line;
  nlohmann::json j;
  j["synthetic"] = nlohmann::json::parse(to_json(report));
  j["step"] = state.step;
  if (cfg.eval_random_baseline) {
    const EvalReport rnd = random_subset_baseline(data.train, data.test, cfg.budget, ec);
    std::snprintf(line, sizeof line, "random subset: %.2f +- %.2f\n", 100.0 * rnd.mean,
                  100.0 * rnd.stddev);
    out << line;
    j["random_subset"] = nlohmann::json::parse(to_json(rnd));
  }
  ensure_dir(cfg.output_dir);
  std::ofstream f(cfg.output_dir / "eval.json", std::ios::trunc);
  if (!f) throw IoError("cannot write " + (cfg.output_dir / "eval.json").string());
  f << j.dump() << "\n";
  return kExitOk;
}

int cmd_export(const RunConfig& cfg, const std::filesystem::path& checkpoint,
               const std::filesystem::path& image_path, std::ostream& out) {
  const DistillState state =
      load_checkpoint(checkpoint.empty() ? checkpoint_path(cfg) : checkpoint);
  std::filesystem::path target = image_path;
  if (target.empty()) {
    ensure_dir(cfg.output_dir);
    target = cfg.output_dir / (cfg.budget.image_shape[0] == 3 ? "images.ppm" : "images.pgm");
  }
  for (const auto& p : export_images(state, target, cfg.export_cols))
    out << "wrote " << p.string() << "\n";
  return kExitOk;
}

}  // namespace nsd
