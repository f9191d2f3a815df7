#include "nsd/matching.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "nsd/error.hpp"
#include "nsd/rng.hpp"
#include "nsd/unroll.hpp"

namespace nsd {

void Trajectory::validate() const {
  if (snapshots.size() < 2) {
    throw ConfigError("a trajectory needs at least 2 snapshots, got " +
                      std::to_string(snapshots.size()));
  }
  for (const auto& s : snapshots) {
    if (!(s.layout == snapshots.front().layout)) {
      throw ContractViolation("trajectory snapshots disagree on layout");
    }
  }
}

void ExpertBank::validate() const {
  if (trajectories.empty()) throw ConfigError("expert bank is empty");
  for (const auto& t : trajectories) {
    t.validate();
    if (!(t.spec == trajectories.front().spec)) {
      throw ContractViolation("expert bank mixes model specs");
    }
  }
}

void ExpertConfig::validate() const {
  if (epochs < 1 || stride < 1 || epochs < stride) {
    throw ConfigError("expert training needs epochs >= stride >= 1 so the trajectory "
                      "has at least 2 snapshots");
  }
  if (batch < 1) throw ConfigError("expert batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("expert lr must be > 0");
}

namespace {

// `k` distinct rows of `n` (all of them, shuffled, when k >= n).
std::vector<std::size_t> sample_rows(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(rows[i], rows[pick(rng)]);
  }
  rows.resize(k);
  return rows;
}

void check_data(const Dataset& data, const ModelSpec& spec) {
  data.validate();
  if (data.size() == 0) throw DataError("dataset is empty");
  if (data.image_shape() != spec.input_shape) {
    throw DataError("dataset images " + shape_str(data.images.shape()) +
                    " do not match the model input");
  }
  if (data.num_classes > spec.num_classes) {
    throw DataError("dataset has more classes than the model outputs");
  }
}

}  // namespace

Trajectory train_expert(const Dataset& data, const ModelSpec& spec,
                        const ExpertConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  check_data(data, spec);
  Trajectory traj{spec, {}, seed, cfg.stride};
  ParamVector theta = build_model(spec, stream_seed(seed, "expert-init"));
  traj.snapshots.push_back(theta);

  std::vector<NdArray> params = theta.unflatten();
  std::vector<NdArray> velocity;
  for (const auto& p : params) velocity.emplace_back(p.shape(), 0.0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(seed, "expert-shuffle", epoch);
    const auto order = sample_rows(data.size(), data.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      const Dataset batch = data.subset(rows);
      std::vector<ad::Var> vars;
      for (const auto& p : params) vars.push_back(ad::Var::parameter(p));
      const auto grads = ad::backward(
          forward_loss(spec, vars, ad::Var::constant(batch.images), batch.labels), vars);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto v = velocity[i].data();
        const auto g = grads[i].data();
        for (std::size_t k = 0; k < p.size(); ++k) {
          v[k] = cfg.momentum * v[k] + g[k] + cfg.weight_decay * p[k];
          p[k] -= cfg.lr * v[k];
        }
      }
    }
    if ((epoch + 1) % cfg.stride == 0) {
      traj.snapshots.push_back(ParamVector::flatten(theta.layout, params));
    }
  }
  return traj;
}

ExpertBank train_experts(const Dataset& data, const ModelSpec& spec,
                         const ExpertConfig& cfg, std::size_t count,
                         std::uint64_t root_seed, std::size_t threads) {
  if (count < 1) throw ConfigError("expert count must be >= 1");
  cfg.validate();
  check_data(data, spec);
  ExpertBank bank;
  bank.fingerprint = fingerprint(data);
  bank.trajectories.resize(count);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t k = next++; k < count; k = next++) {
      try {
        bank.trajectories[k] = train_expert(data, spec, cfg, stream_seed(root_seed, "expert", k));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(threads, 1, count);
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return bank;
}

std::string to_string(Objective objective) {
  switch (objective) {
    case Objective::Trajectory: return "mtt";
    case Objective::DistributionMatching: return "dm";
    case Objective::GradientMatching: return "dc";
  }
  return "mtt";
}

Objective objective_from_string(const std::string& name) {
  if (name == "mtt") return Objective::Trajectory;
  if (name == "dm") return Objective::DistributionMatching;
  if (name == "dc") return Objective::GradientMatching;
  throw ConfigError("unknown objective '" + name + "'");
}

void DistillConfig::validate() const {
  if (inner_steps < 1) throw ConfigError("inner_steps must be >= 1");
  if (expert_span < 1) throw ConfigError("expert_span must be >= 1");
  if (!(inner_lr > 0.0)) throw ConfigError("inner_lr must be > 0");
  if (!(guided_weight >= 0.0)) throw ConfigError("guided_weight must be >= 0");
  if (!(outer_lr >= 0.0)) throw ConfigError("outer_lr must be >= 0");
  if (!(outer_momentum >= 0.0 && outer_momentum < 1.0)) {
    throw ConfigError("outer_momentum must lie in [0, 1)");
  }
  if (batch < 1) throw ConfigError("batch must be >= 1");
  model.validate();
}

ad::Var match_loss(std::span<const ad::Var> student_final, const ParamVector& expert_start,
                   const ParamVector& expert_target, bool normalized) {
  ad::Var num = param_distance(student_final, expert_target);
  if (!normalized) return num;
  const double den = param_distance(expert_start, expert_target);
  if (!(den > 0.0)) {
    throw DegenerateSegmentError("expert segment has zero length; cannot normalize");
  }
  return ad::scale(num, 1.0 / den);
}

ad::Var real_guided_loss(const ModelSpec& spec, std::span<const ad::Var> student_final,
                         const Dataset& real_batch) {
  return forward_loss(spec, student_final, ad::Var::constant(real_batch.images),
                      real_batch.labels);
}

namespace {

std::vector<std::size_t> rows_of_class(std::span<const int> labels, int c) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) rows.push_back(i);
  return rows;
}

ad::Var class_mean(const ad::Var& f, const std::vector<std::size_t>& rows) {
  return ad::scale(ad::sum_except(ad::gather_rows(f, rows), 1),
                   1.0 / static_cast<double>(rows.size()));
}

ad::Var accumulate(const ad::Var& total, const ad::Var& term) {
  return total ? ad::add(total, term) : term;
}

}  // namespace

ad::Var dm_loss(const ad::Var& synthetic, std::span<const int> synthetic_labels,
                const Dataset& real_batch, const ModelSpec& embed_spec,
                std::uint64_t embed_seed, BaselineStats* stats) {
  const auto params = as_constants(build_model(embed_spec, embed_seed));
  const ad::Var fs = features(embed_spec, params, synthetic);
  const ad::Var fr = features(embed_spec, params, ad::Var::constant(real_batch.images));
  ad::Var total;
  std::size_t skipped = 0;
  for (std::size_t c = 0; c < embed_spec.num_classes; ++c) {
    const auto rs = rows_of_class(synthetic_labels, static_cast<int>(c));
    const auto rr = rows_of_class(real_batch.labels, static_cast<int>(c));
    if (rs.empty() || rr.empty()) {
      ++skipped;
      continue;
    }
    total = accumulate(total, ad::squared_distance(class_mean(fs, rs), class_mean(fr, rr)));
  }
  if (stats) stats->skipped = skipped;
  return total ? total : ad::Var::constant(NdArray::scalar(0.0));
}

ad::Var layerwise_cosine_distance(std::span<const ad::Var> a, std::span<const NdArray> b,
                                  BaselineStats* stats) {
  if (a.size() != b.size()) throw ContractViolation("cosine distance: length mismatch");
  ad::Var total;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double nb = std::sqrt(squared_norm(b[i]));
    const double na = std::sqrt(squared_norm(a[i].value()));
    if (!(nb > 0.0) || !(na > 0.0)) {
      ++skipped;
      continue;
    }
    const ad::Var dot = ad::sum(ad::mul(a[i], ad::Var::constant(b[i])));
    const ad::Var inv_na = ad::pow_scalar(ad::sum(ad::mul(a[i], a[i])), -0.5);
    const ad::Var cos = ad::scale(ad::mul(dot, inv_na), 1.0 / nb);
    total = accumulate(total, ad::add_scalar(ad::scale(cos, -1.0), 1.0));
  }
  if (stats) stats->skipped = skipped;
  return total ? total : ad::Var::constant(NdArray::scalar(0.0));
}

ad::Var dc_loss(const ad::Var& synthetic, std::span<const int> synthetic_labels,
                const Dataset& real_batch, const ModelSpec& spec,
                std::span<const ad::Var> params, BaselineStats* stats) {
  std::vector<NdArray> g_real;
  for (const auto& g : ad::grad(real_guided_loss(spec, params, real_batch), params)) {
    g_real.push_back(g.value());
  }
  const auto g_syn =
      ad::grad(forward_loss(spec, params, synthetic, synthetic_labels), params, true);
  return layerwise_cosine_distance(g_syn, g_real, stats);
}

StepPlan plan_step(const DistillState& state, const ExpertBank& bank, const Dataset& real,
                   const DistillConfig& cfg) {
  Rng rng = make_rng(cfg.seed, "distill-step", state.step);
  StepPlan plan;
  plan.band_seed = stream_seed(cfg.seed, "bands", state.step);
  plan.model_seed = stream_seed(cfg.seed, "baseline-model", state.step);

  if (cfg.objective == Objective::Trajectory) {
    std::vector<std::size_t> eligible;
    for (std::size_t k = 0; k < bank.trajectories.size(); ++k) {
      if (bank.trajectories[k].snapshots.size() > cfg.expert_span) eligible.push_back(k);
    }
    if (eligible.empty()) {
      throw SamplingError("no expert trajectory has more than M=" +
                          std::to_string(cfg.expert_span) + " snapshots");
    }
    plan.trajectory =
        eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
    const std::size_t last =
        bank.trajectories[plan.trajectory].snapshots.size() - 1 - cfg.expert_span;
    plan.start = std::uniform_int_distribution<std::size_t>(0, last)(rng);

    const std::size_t total = all_pairs(state).size() *
                              state.kernels.front().factors[0].out_extent();
    for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
      plan.synthetic_rows.push_back(sample_rows(total, cfg.batch, rng));
    }
  }
  if (real.size() == 0) throw DataError("real dataset is empty");
  std::uniform_int_distribution<std::size_t> pick(0, real.size() - 1);
  for (std::size_t i = 0; i < cfg.batch; ++i) plan.real_rows.push_back(pick(rng));
  return plan;
}

StepObjective step_objective(const DistillState& state, const ExpertBank& bank,
                             const Dataset& real, const DistillConfig& cfg,
                             const StepPlan& plan) {
  Rng band_rng(plan.band_seed);
  const SyntheticData syn = synthesize_dataset(state, {std::nullopt, &band_rng});
  const Dataset real_batch = real.subset(plan.real_rows);
  StepObjective out;

  if (cfg.objective == Objective::DistributionMatching) {
    BaselineStats stats;
    out.combined = dm_loss(syn.images, syn.labels, real_batch, cfg.model, plan.model_seed,
                           &stats);
    out.match = out.combined.value().item();
    out.skipped = stats.skipped;
    return out;
  }
  if (cfg.objective == Objective::GradientMatching) {
    BaselineStats stats;
    const auto params = as_parameters(build_model(cfg.model, plan.model_seed));
    out.combined = dc_loss(syn.images, syn.labels, real_batch, cfg.model, params, &stats);
    out.match = out.combined.value().item();
    out.skipped = stats.skipped;
    return out;
  }

  const Trajectory& traj = bank.trajectories.at(plan.trajectory);
  const ParamVector& start = traj.snapshots.at(plan.start);
  const ParamVector& target = traj.snapshots.at(plan.start + cfg.expert_span);
  const ModelSpec& spec = traj.spec;

  std::vector<ad::Var> batches;
  std::vector<std::vector<int>> labels;
  for (const auto& rows : plan.synthetic_rows) {
    batches.push_back(ad::gather_rows(syn.images, rows));
    std::vector<int> l;
    for (auto r : rows) l.push_back(syn.labels[r]);
    labels.push_back(std::move(l));
  }
  const ad::StudentLoss student = [&](std::span<const ad::Var> params, const ad::Var& batch,
                                      std::size_t step) {
    return forward_loss(spec, params, batch, labels[step]);
  };
  const auto init = start.unflatten();
  const auto final_params = ad::unroll_sgd(student, init, batches,
                                           {cfg.inner_steps, cfg.inner_lr, 0.0});

  ad::Var match = match_loss(final_params, start, target, cfg.normalized);
  out.match = match.value().item();
  out.combined = match;
  if (cfg.guided_weight > 0.0) {
    ad::Var guided = real_guided_loss(spec, final_params, real_batch);
    out.guided = guided.value().item();
    out.combined = ad::add(match, ad::scale(guided, cfg.guided_weight));
  }

  out.trace.trajectory = plan.trajectory;
  out.trace.start = plan.start;
  out.trace.student_final = from_vars(start.layout, final_params);
  for (const auto& b : batches) out.trace.batch_images.push_back(b.value());
  out.trace.batch_labels = std::move(labels);
  return out;
}

void outer_update(DistillState& state, std::span<const NdArray> grads, double lr,
                  double momentum) {
  const auto leaves = state.trainable_leaves();
  if (grads.size() != leaves.size()) {
    throw ContractViolation("outer_update: gradient count does not match trainable leaves");
  }
  if (state.velocity.empty()) {
    for (const auto& leaf : leaves) state.velocity.emplace_back(leaf.shape(), 0.0);
  }
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto v = state.velocity[i].data();
    const auto g = grads[i].data();
    NdArray p = leaves[i].value();
    auto pd = p.data();
    for (std::size_t k = 0; k < pd.size(); ++k) {
      v[k] = momentum * v[k] + g[k];
      pd[k] -= lr * v[k];
    }
    ad::Var(leaves[i]).assign(std::move(p));
  }
}

StepMetrics distill_step(DistillState& state, const ExpertBank& bank, const Dataset& real,
                         const DistillConfig& cfg, StepTrace* trace) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  const StepPlan plan = plan_step(state, bank, real, cfg);
  StepObjective obj = step_objective(state, bank, real, cfg, plan);
  const auto leaves = state.trainable_leaves();
  const auto grads = ad::backward(obj.combined, leaves);
  bool finite = std::isfinite(obj.combined.value().item());
  for (const auto& g : grads)
    for (double v : g.vec()) finite = finite && std::isfinite(v);
  if (!finite) {
    throw NumericalError("distill: non-finite loss or gradient at step " +
                    std::to_string(state.step + 1) + "; lower the outer learning rate");
  }
  outer_update(state, grads, cfg.outer_lr, cfg.outer_momentum);
  ++state.step;

  StepMetrics m;
  m.iteration = state.step;
  m.match = obj.match;
  m.guided = obj.guided;
  m.combined = obj.combined.value().item();
  m.skipped = obj.skipped;
  if (trace) *trace = std::move(obj.trace);
  m.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

std::vector<StepMetrics> distill(DistillState& state, const ExpertBank& bank,
                                 const Dataset& real, const DistillConfig& cfg,
                                 const DistillCallbacks& callbacks) {
  std::vector<StepMetrics> log;
  bool saved = true;
  while (state.step < cfg.iterations) {
    log.push_back(distill_step(state, bank, real, cfg));
    saved = false;
    if (callbacks.on_metrics) callbacks.on_metrics(log.back());
    if (callbacks.checkpoint_every != 0 && state.step % callbacks.checkpoint_every == 0) {
      if (callbacks.on_checkpoint) callbacks.on_checkpoint(state);
      saved = true;
    }
  }
  if (!saved && callbacks.on_checkpoint) callbacks.on_checkpoint(state);
  return log;
}

}  // namespace nsd
