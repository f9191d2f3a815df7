#include "nsd/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "nsd/error.hpp"
#include "nsd/rng.hpp"

namespace nsd {

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// failure after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t k = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < k; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string spec_string(const ModelSpec& s) {
  std::ostringstream os;
  os << to_string(s.family) << ' ' << s.depth << ' ' << s.width << ' ' << s.input_shape[0]
     << ' ' << s.input_shape[1] << ' ' << s.input_shape[2] << ' ' << s.num_classes;
  return os.str();
}

EvalReport summarize(std::vector<double> acc, const EvalConfig& cfg) {
  EvalReport r;
  r.accuracies = std::move(acc);
  const double n = static_cast<double>(r.accuracies.size());
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  double ss = 0.0;
  for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
  r.stddev = std::sqrt(ss / n);
  r.spec = cfg.model;
  r.config_digest = cfg.digest();
  return r;
}

std::uint64_t repeat_seed(const EvalConfig& cfg, std::size_t r) {
  return stream_seed(cfg.seed, "eval-repeat", r);
}

}  // namespace

void EvalConfig::validate() const {
  model.validate();
  if (epochs < 1) throw ConfigError("eval epochs must be >= 1");
  if (batch < 1) throw ConfigError("eval batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("eval lr must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("eval momentum must be in [0, 1)");
  if (weight_decay < 0.0) throw ConfigError("eval weight decay must be >= 0");
  if (repeats < 1) throw ConfigError("eval repeats must be >= 1");
}

std::uint64_t EvalConfig::digest() const {
  std::ostringstream os;
  os << std::setprecision(17) << spec_string(model) << '|' << epochs << '|' << batch << '|'
     << lr << '|' << momentum << '|' << weight_decay << '|' << augment << '|' << repeats << '|'
     << seed;
  return fnv1a64(os.str());
}

void EvalReport::validate() const {
  if (accuracies.empty()) throw ContractViolation("eval report has no repeats");
  for (double a : accuracies)
    if (a < 0.0 || a > 1.0) throw ContractViolation("accuracy outside [0, 1]");
  if (stddev < 0.0) throw ContractViolation("negative standard deviation");
}

std::string to_json(const EvalReport& report) {
  nlohmann::json j;
  j["accuracies"] = report.accuracies;
  j["mean"] = report.mean;
  j["std"] = report.stddev;
  j["model"] = spec_string(report.spec);
  j["config_digest"] = report.config_digest;
  return j.dump();
}

void augment_batch(NdArray& images, Rng& rng) {
  const auto& s = images.shape();
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
  constexpr std::size_t pad = 2;
  std::bernoulli_distribution flip(0.5);
  std::uniform_int_distribution<std::size_t> shift(0, 2 * pad);
  std::vector<double> src(c * h * w);
  auto data = images.data();
  for (std::size_t n = 0; n < b; ++n) {
    double* img = data.data() + n * c * h * w;
    const bool f = flip(rng);
    const std::size_t dy = shift(rng), dx = shift(rng);
    std::copy(img, img + c * h * w, src.begin());
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          // Output (y, x) reads padded (y + dy, x + dx) of the flipped image.
          const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + dy) - pad;
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + dx) - pad;
          double v = 0.0;
          if (sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
              sx < static_cast<std::ptrdiff_t>(w)) {
            const std::size_t col = f ? w - 1 - static_cast<std::size_t>(sx)
                                      : static_cast<std::size_t>(sx);
            v = src[(ch * h + static_cast<std::size_t>(sy)) * w + col];
          }
          img[(ch * h + y) * w + x] = v;
        }
  }
}

ParamVector train_model(const Dataset& train, const EvalConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  train.validate();
  if (train.size() == 0) throw DataError("eval: empty training set");
  const ModelSpec& spec = cfg.model;
  ParamVector theta = build_model(spec, stream_seed(seed, "eval-init"));
  std::vector<NdArray> params = theta.unflatten();
  std::vector<NdArray> velocity;
  for (const auto& p : params) velocity.emplace_back(p.shape(), 0.0);
  Rng rng = make_rng(seed, "eval-train");

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      const std::span<const std::size_t> rows(order.data() + start, end - start);
      NdArray images = take_rows(train.images, rows);
      if (cfg.augment) augment_batch(images, rng);
      std::vector<int> labels;
      for (auto r : rows) labels.push_back(train.labels[r]);
      std::vector<ad::Var> vars;
      for (const auto& p : params) vars.push_back(ad::Var::parameter(p));
      const auto grads =
          ad::backward(forward_loss(spec, vars, ad::Var::constant(images), labels), vars);
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
  }
  return ParamVector::flatten(theta.layout, params);
}

EvalReport evaluate_dataset(const Dataset& train, const Dataset& test, const EvalConfig& cfg) {
  cfg.validate();
  test.validate();
  std::vector<double> acc(cfg.repeats);
  parallel_for(cfg.repeats, cfg.threads, [&](std::size_t r) {
    const ParamVector p = train_model(train, cfg, repeat_seed(cfg, r));
    acc[r] = accuracy(cfg.model, p, test.images, test.labels);
  });
  return summarize(std::move(acc), cfg);
}

Dataset synthesized_training_set(const DistillState& state) {
  ad::NoGradGuard guard;
  SyntheticData syn = synthesize_dataset(state);
  Dataset d{syn.images.value(), std::move(syn.labels),
            static_cast<std::size_t>(state.num_classes)};
  return d;
}

EvalReport evaluate_synthetic(const DistillState& state, const Dataset& test,
                              const EvalConfig& cfg) {
  return evaluate_dataset(synthesized_training_set(state), test, cfg);
}

std::vector<std::size_t> random_subset_rows(const Dataset& data, std::size_t ipc, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i)
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  std::vector<std::size_t> rows;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& pool = by_class[c];
    if (pool.size() < ipc) {
      throw RangeError("random subset: class " + std::to_string(c) + " has " +
                       std::to_string(pool.size()) + " images, budget needs " +
                       std::to_string(ipc));
    }
    for (std::size_t i = 0; i < ipc; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    rows.insert(rows.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(ipc));
  }
  std::sort(rows.begin(), rows.end());
  return rows;
}

EvalReport random_subset_baseline(const Dataset& real_train, const Dataset& test,
                                  const BudgetSpec& budget, const EvalConfig& cfg) {
  cfg.validate();
  real_train.validate();
  if (budget.ipc * budget.num_classes > real_train.size()) {
    throw RangeError("random subset: budget of " +
                     std::to_string(budget.ipc * budget.num_classes) +
                     " images exceeds the dataset size " + std::to_string(real_train.size()));
  }
  budget.validate();
  if (budget.num_classes != real_train.num_classes) {
    throw ConfigError("random subset: budget has " + std::to_string(budget.num_classes) +
                      " classes, data has " + std::to_string(real_train.num_classes));
  }
  std::vector<double> acc(cfg.repeats);
  parallel_for(cfg.repeats, cfg.threads, [&](std::size_t r) {
    Rng rng = make_rng(cfg.seed, "random-subset", r);
    const Dataset subset = real_train.subset(random_subset_rows(real_train, budget.ipc, rng));
    const ParamVector p = train_model(subset, cfg, repeat_seed(cfg, r));
    acc[r] = accuracy(cfg.model, p, test.images, test.labels);
  });
  return summarize(std::move(acc), cfg);
}

SimilarityResult dimension_similarity(const NdArray& images, SimilarityAxis axis) {
  const auto& s = images.shape();
  if (s.size() != 4) throw DimensionError("dimension_similarity: expected (B, C, H, W)");
  const std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
  if (b < 2) throw DimensionError("dimension_similarity: need at least 2 images");
  const std::size_t n = axis == SimilarityAxis::B ? b : axis == SimilarityAxis::H ? h : w;
  const std::size_t len = images.size() / n;

  std::vector<std::vector<double>> rows(n, std::vector<double>());
  for (auto& r : rows) r.reserve(len);
  const auto data = images.vec();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t k = axis == SimilarityAxis::B ? i : axis == SimilarityAxis::H ? y : x;
          rows[k].push_back(data[((i * c + ch) * h + y) * w + x]);
        }

  SimilarityResult out{NdArray({n, n}, 0.0), 0};
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    norm[i] = std::sqrt(std::inner_product(rows[i].begin(), rows[i].end(), rows[i].begin(), 0.0));
    if (norm[i] == 0.0) ++out.zero_slices;
  }
  for (std::size_t i = 0; i < n; ++i) {
    out.matrix[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double v = 0.0;
      if (norm[i] > 0.0 && norm[j] > 0.0) {
        v = std::inner_product(rows[i].begin(), rows[i].end(), rows[j].begin(), 0.0) /
            (norm[i] * norm[j]);
        v = std::clamp(v, -1.0, 1.0);
      }
      out.matrix[i * n + j] = v;
      out.matrix[j * n + i] = v;
    }
  }
  return out;
}

double mean_off_diagonal(const NdArray& matrix) {
  const std::size_t n = matrix.dim(0);
  if (n < 2) throw DimensionError("mean_off_diagonal: need at least 2 rows");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) s += matrix[i * n + j];
  return s / static_cast<double>(n * (n - 1));
}

DistillState ablation_state(const AblationBase& base, bool decomposition, TransformTag kind,
                            const std::optional<std::pair<std::size_t, std::size_t>>& t1_t3) {
  Rng rng = make_rng(base.state_seed, "ablation-state");
  const ClassImages real{base.train ? &base.train->images : nullptr,
                         base.train ? &base.train->labels : nullptr};
  if (!decomposition) return build_pixel_state(base.budget, rng, real);

  StateRequest req;
  req.kind = base.kind;
  req.kind.tag = kind;
  req.budget = base.budget;
  req.max_u1 = base.max_u1;
  if (t1_t3) {
    const auto [t1, t3] = *t1_t3;
    const auto& img = base.budget.image_shape;
    DecompositionDims dims{{t1, img[0], t3, t3}, {0, img[0], img[1], img[2]}};
    const auto layout = storage_layout(req.kind, base.budget.num_classes, 1);
    const std::size_t allowed = base.budget.budget_scalars();
    for (std::size_t u1 = base.max_u1; u1 > t1; --u1) {
      dims.u[0] = u1;
      if (stored_scalars(dims, layout) <= allowed) break;
      dims.u[0] = 0;
    }
    if (dims.u[0] == 0) {
      throw ConfigError("t1=" + std::to_string(t1) + ", t3=" + std::to_string(t3) +
                        " does not fit the budget for any u1 > t1");
    }
    req.dims = dims;
  }
  return build_state(req, rng, real);
}

std::vector<AblationCell> ablation_grid(const AblationBase& base, const AblationAxes& axes) {
  if (!base.train || !base.test || !base.bank) {
    throw ContractViolation("ablation grid needs train, test and expert bank");
  }
  std::vector<std::optional<std::pair<std::size_t, std::size_t>>> dims;
  for (const auto& d : axes.t1_t3) dims.emplace_back(d);
  if (dims.empty()) dims.emplace_back(std::nullopt);
  std::vector<TransformTag> kinds = axes.kinds;
  if (kinds.empty()) kinds.push_back(base.kind.tag);

  std::vector<AblationCell> cells;
  for (bool dec : axes.decomposition)
    for (double gamma : axes.guided_weight)
      for (const auto& d : dims)
        for (auto kind : kinds) {
          AblationCell cell;
          cell.decomposition = dec;
          cell.guided_weight = gamma;
          cell.t1_t3 = dec ? d : std::nullopt;
          cell.kind = kind;
          std::ostringstream key;
          key << std::setprecision(17) << "dec=" << dec << ";gamma=" << gamma << ";kind="
              << (dec ? to_string(kind) : "pixel") << ";dims="
              << (cell.t1_t3 ? std::to_string(cell.t1_t3->first) + "x" +
                                   std::to_string(cell.t1_t3->second)
                             : "auto")
              << ";eval=" << base.eval.digest() << ";seed=" << base.state_seed << ";"
              << base.distill.seed;
          cell.config_digest = fnv1a64(key.str());
          const bool duplicate = std::any_of(cells.begin(), cells.end(), [&](const auto& c) {
            return c.config_digest == cell.config_digest;
          });
          if (!duplicate) cells.push_back(std::move(cell));
        }

  for (auto& cell : cells) {
    DistillState state;
    try {
      state = ablation_state(base, cell.decomposition, cell.kind, cell.t1_t3);
    } catch (const ConfigError& e) {
      cell.feasible = false;
      cell.note = e.what();
      continue;
    }
    DistillConfig cfg = base.distill;
    cfg.guided_weight = cell.guided_weight;
    cell.log = distill(state, *base.bank, *base.train, cfg);
    cell.state_digest = state.digest();
    cell.report = evaluate_synthetic(state, *base.test, base.eval);
  }
  return cells;
}

std::string format_ablation_table(const std::vector<AblationCell>& cells) {
  std::ostringstream os;
  os << "Dec  Guided  gamma   kind    t1xt3   accuracy\n";
  char line[160];
  for (const auto& c : cells) {
    const std::string dims =
        c.t1_t3 ? std::to_string(c.t1_t3->first) + "x" + std::to_string(c.t1_t3->second)
                : "auto";
    std::string acc = c.feasible && c.report
                          ? [&] {
                              char b[48];
                              std::snprintf(b, sizeof b, "%.2f +- %.2f", 100.0 * c.report->mean,
                                            100.0 * c.report->stddev);
                              return std::string(b);
                            }()
                          : "infeasible";
    std::snprintf(line, sizeof line, "%-4s %-7s %-7.3g %-7s %-7s %s\n",
                  c.decomposition ? "yes" : "no", c.guided_weight > 0.0 ? "yes" : "no",
                  c.guided_weight, c.decomposition ? to_string(c.kind).c_str() : "pixel",
                  c.decomposition ? dims.c_str() : "-", acc.c_str());
    os << line;
  }
  return os.str();
}

std::string to_jsonl(const std::vector<AblationCell>& cells) {
  std::string out;
  for (const auto& c : cells) {
    nlohmann::json j;
    j["decomposition"] = c.decomposition;
    j["guided_weight"] = c.guided_weight;
    j["kind"] = c.decomposition ? to_string(c.kind) : "pixel";
    if (c.t1_t3) j["t1_t3"] = {c.t1_t3->first, c.t1_t3->second};
    j["config_digest"] = c.config_digest;
    j["feasible"] = c.feasible;
    if (!c.note.empty()) j["note"] = c.note;
    if (c.report) j["report"] = nlohmann::json::parse(to_json(*c.report));
    j["state_digest"] = c.state_digest;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<unsigned char> normalize_to_bytes(const NdArray& image) {
  const auto v = image.vec();
  std::vector<unsigned char> out(v.size(), 128);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<unsigned char>(std::lround(255.0 * (v[i] - *lo) / range));
  return out;
}

namespace {

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t width,
               std::size_t height, const std::vector<unsigned char>& pixels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << magic << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

std::vector<std::filesystem::path> export_images(const DistillState& state,
                                                 const std::filesystem::path& path,
                                                 std::size_t grid_cols) {
  if (grid_cols < 1) throw ConfigError("export: grid columns must be >= 1");
  const Dataset syn = synthesized_training_set(state);
  const auto& s = syn.images.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t cols = std::min(grid_cols, n);
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t gw = cols * w, gh = rows * h;

  // Per-image normalization over all its channels.
  std::vector<std::vector<unsigned char>> bytes;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> one{i};
    bytes.push_back(normalize_to_bytes(take_rows(syn.images, one)));
  }
  auto tile = [&](std::size_t ch, std::size_t stride, std::size_t offset,
                  std::vector<unsigned char>& grid) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t gy = (i / cols) * h, gx = (i % cols) * w;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          grid[((gy + y) * gw + gx + x) * stride + offset] = bytes[i][(ch * h + y) * w + x];
    }
  };

  std::vector<std::filesystem::path> written;
  if (c == 1 || c == 3) {
    std::vector<unsigned char> grid(gw * gh * c, 0);
    for (std::size_t ch = 0; ch < c; ++ch) tile(ch, c, ch, grid);
    write_pnm(path, c == 1 ? "P5" : "P6", gw, gh, grid);
    written.push_back(path);
    return written;
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<unsigned char> grid(gw * gh, 0);
    tile(ch, 1, 0, grid);
    auto p = path;
    p.replace_filename(path.stem().string() + "_c" + std::to_string(ch) + ".pgm");
    write_pnm(p, "P5", gw, gh, grid);
    written.push_back(p);
  }
  return written;
}

}  // namespace nsd
