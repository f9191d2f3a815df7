#include "nsd/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "nsd/error.hpp"
#include "nsd/rng.hpp"

namespace nsd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& v, const char* want) {
  throw ConfigError(key + ": '" + v + "' is not " + want);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size()) bad_value(key, v, "a number");
  return d;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad_value(key, v, "a boolean");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) out.push_back(trim(item));
  return out;
}

std::string fmt(double d) {
  std::ostringstream os;
  os << std::setprecision(17) << d;
  return os.str();
}
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool b) { return b ? "true" : "false"; }

Extents4 parse_extents(const std::string& key, const std::string& v) {
  const auto parts = split(v, ',');
  if (parts.size() != 4) bad_value(key, v, "four comma-separated extents");
  Extents4 e{};
  for (std::size_t i = 0; i < 4; ++i) e[i] = parse_size(key, parts[i]);
  return e;
}

std::string fmt_extents(const Extents4& e) {
  return std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]) + "," +
         std::to_string(e[3]);
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  bool resume_relevant = true;
};

#define NSD_FIELD(KEY, EXPR, PARSE)                                         \
  Field {                                                                   \
    KEY, [](const RunConfig& c) { return fmt(c.EXPR); },                    \
        [](RunConfig& c, const std::string& v) { c.EXPR = PARSE(KEY, v); } \
  }

const std::vector<Field>& schema() {
  static const std::vector<Field> fields = [] {
    std::vector<Field> f{
        {"data.source", [](const RunConfig& c) { return c.data.source; },
         [](RunConfig& c, const std::string& v) {
           if (v != "blobs" && v != "idx" && v != "raw") bad_value("data.source", v, "blobs|idx|raw");
           c.data.source = v;
         }},
        NSD_FIELD("data.blobs.n", data.blobs.n, parse_size),
        NSD_FIELD("data.blobs.amplitude", data.blobs.amplitude, parse_double),
        NSD_FIELD("data.blobs.radius", data.blobs.radius, parse_double),
        NSD_FIELD("data.blobs.jitter", data.blobs.jitter, parse_double),
        NSD_FIELD("data.blobs.noise", data.blobs.noise, parse_double),
        NSD_FIELD("data.blobs.seed", data.blobs.seed, parse_u64),
        NSD_FIELD("data.blobs.test_n", data.test_n, parse_size),
        NSD_FIELD("data.blobs.test_seed", data.test_seed, parse_u64),
    };
    auto path_field = [](const char* key, std::filesystem::path DataConfig::*m) {
      return Field{key, [m](const RunConfig& c) { return (c.data.*m).string(); },
                   [m](RunConfig& c, const std::string& v) { c.data.*m = v; }};
    };
    f.push_back(path_field("data.idx.images", &DataConfig::images));
    f.push_back(path_field("data.idx.labels", &DataConfig::labels));
    f.push_back(path_field("data.idx.test_images", &DataConfig::test_images));
    f.push_back(path_field("data.idx.test_labels", &DataConfig::test_labels));
    f.push_back(path_field("data.raw.train", &DataConfig::raw_train));
    f.push_back(path_field("data.raw.test", &DataConfig::raw_test));
    std::vector<Field> rest{
        NSD_FIELD("budget.classes", budget.num_classes, parse_size),
        NSD_FIELD("budget.ipc", budget.ipc, parse_size),
        NSD_FIELD("budget.channels", budget.image_shape[0], parse_size),
        NSD_FIELD("budget.height", budget.image_shape[1], parse_size),
        NSD_FIELD("budget.width", budget.image_shape[2], parse_size),
        NSD_FIELD("budget.train_images", budget.train_images, parse_size),
        NSD_FIELD("decomp.enabled", decomposition, parse_bool),
        {"decomp.kind", [](const RunConfig& c) { return to_string(c.kind.tag); },
         [](RunConfig& c, const std::string& v) { c.kind.tag = transform_tag_from_string(v); }},
        {"decomp.dims",
         [](const RunConfig& c) {
           return c.dims ? fmt_extents(c.dims->t) + ":" + fmt_extents(c.dims->u)
                         : std::string("auto");
         },
         [](RunConfig& c, const std::string& v) {
           if (v == "auto") {
             c.dims.reset();
             return;
           }
           const auto colon = v.find(':');
           if (colon == std::string::npos) bad_value("decomp.dims", v, "auto or t1,t2,t3,t4:u1,u2,u3,u4");
           c.dims = DecompositionDims{parse_extents("decomp.dims", v.substr(0, colon)),
                                      parse_extents("decomp.dims", v.substr(colon + 1))};
         }},
        NSD_FIELD("decomp.n_tensors", n_tensors, parse_size),
        NSD_FIELD("decomp.n_kernels", n_kernels, parse_size),
        {"decomp.label_rule", [](const RunConfig& c) { return to_string(c.label_rule); },
         [](RunConfig& c, const std::string& v) { c.label_rule = label_rule_from_string(v); }},
        NSD_FIELD("decomp.max_u1", max_u1, parse_size),
        {"decomp.band_probs",
         [](const RunConfig& c) {
           const auto& p = c.kind.band_probs;
           return fmt(p[0]) + "," + fmt(p[1]) + "," + fmt(p[2]) + "," + fmt(p[3]);
         },
         [](RunConfig& c, const std::string& v) {
           const auto parts = split(v, ',');
           if (parts.size() != 4) bad_value("decomp.band_probs", v, "four probabilities");
           for (std::size_t i = 0; i < 4; ++i)
             c.kind.band_probs[i] = parse_double("decomp.band_probs", parts[i]);
         }},
        NSD_FIELD("decomp.rank", kind.truncation_rank, parse_size),
        NSD_FIELD("decomp.nonnegative_batch", kind.nonnegative_batch, parse_bool),
        {"model.family", [](const RunConfig& c) { return to_string(c.model_family); },
         [](RunConfig& c, const std::string& v) { c.model_family = model_family_from_string(v); }},
        NSD_FIELD("model.depth", model_depth, parse_size),
        NSD_FIELD("model.width", model_width, parse_size),
        NSD_FIELD("expert.count", expert_count, parse_size),
        NSD_FIELD("expert.epochs", expert.epochs, parse_size),
        NSD_FIELD("expert.stride", expert.stride, parse_size),
        NSD_FIELD("expert.batch", expert.batch, parse_size),
        NSD_FIELD("expert.lr", expert.lr, parse_double),
        NSD_FIELD("expert.momentum", expert.momentum, parse_double),
        NSD_FIELD("expert.weight_decay", expert.weight_decay, parse_double),
        {"distill.objective", [](const RunConfig& c) { return to_string(c.distill.objective); },
         [](RunConfig& c, const std::string& v) { c.distill.objective = objective_from_string(v); }},
        NSD_FIELD("distill.inner_steps", distill.inner_steps, parse_size),
        NSD_FIELD("distill.expert_span", distill.expert_span, parse_size),
        NSD_FIELD("distill.inner_lr", distill.inner_lr, parse_double),
        NSD_FIELD("distill.guided_weight", distill.guided_weight, parse_double),
        NSD_FIELD("distill.outer_lr", distill.outer_lr, parse_double),
        NSD_FIELD("distill.outer_momentum", distill.outer_momentum, parse_double),
        NSD_FIELD("distill.iterations", distill.iterations, parse_size),
        NSD_FIELD("distill.batch", distill.batch, parse_size),
        NSD_FIELD("distill.normalized", distill.normalized, parse_bool),
        NSD_FIELD("distill.checkpoint_every", checkpoint_every, parse_size),
        NSD_FIELD("distill.resume", resume, parse_bool),
        NSD_FIELD("distill.log_wall_clock", log_wall_clock, parse_bool),
        NSD_FIELD("eval.epochs", eval.epochs, parse_size),
        NSD_FIELD("eval.batch", eval.batch, parse_size),
        NSD_FIELD("eval.lr", eval.lr, parse_double),
        NSD_FIELD("eval.momentum", eval.momentum, parse_double),
        NSD_FIELD("eval.weight_decay", eval.weight_decay, parse_double),
        NSD_FIELD("eval.augment", eval.augment, parse_bool),
        NSD_FIELD("eval.repeats", eval.repeats, parse_size),
        NSD_FIELD("eval.random_baseline", eval_random_baseline, parse_bool),
        NSD_FIELD("export.cols", export_cols, parse_size),
        NSD_FIELD("seed", seed, parse_u64),
        {"output.dir", [](const RunConfig& c) { return c.output_dir.string(); },
         [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
    };
    for (auto& field : rest) f.push_back(std::move(field));
    for (auto& field : f) {
      field.resume_relevant = field.key != "distill.iterations" &&
                              field.key != "distill.checkpoint_every" &&
                              field.key != "distill.resume" &&
                              field.key != "distill.log_wall_clock" &&
                              field.key != "output.dir" &&
                              !field.key.starts_with("eval.") && !field.key.starts_with("export.");
    }
    return f;
  }();
  return fields;
}

#undef NSD_FIELD

const Field& find_field(const std::string& key, const std::string& origin) {
  for (const auto& f : schema())
    if (f.key == key) return f;
  throw ConfigError(origin + ": unknown key '" + key + "'");
}

void assign(RunConfig& cfg, const std::string& line, const std::string& origin) {
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError(origin + ": expected key=value, got '" + line + "'");
  const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
  const Field& f = find_field(key, origin);
  try {
    f.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

std::uint64_t digest_of(const RunConfig& cfg, bool resume_only) {
  std::string text;
  for (const auto& f : schema()) {
    if (resume_only && !f.resume_relevant) continue;
    text += f.key + "=" + f.get(cfg) + "\n";
  }
  return fnv1a64(text);
}

}  // namespace

ModelSpec RunConfig::model() const {
  return ModelSpec{model_family, model_depth, model_width, budget.image_shape,
                   budget.num_classes};
}

void RunConfig::resolve() {
  budget.validate();
  kind.validate();
  const ModelSpec spec = model();
  spec.validate();
  expert.validate();
  if (expert_count < 1) throw ConfigError("expert.count must be >= 1");
  distill.model = spec;
  distill.seed = stream_seed(seed, "distill");
  distill.validate();
  eval.model = spec;
  eval.seed = stream_seed(seed, "eval");
  eval.threads = 1;
  eval.validate();
  if (export_cols < 1) throw ConfigError("export.cols must be >= 1");
  if (n_kernels < 1) throw ConfigError("decomp.n_kernels must be >= 1");
  if (dims) {
    const auto& img = budget.image_shape;
    for (std::size_t m = 0; m < 4; ++m) {
      if (dims->t[m] < 1) throw ConfigError("decomp.dims: extents must be >= 1");
    }
    if (dims->u[1] != img[0] || dims->u[2] != img[1] || dims->u[3] != img[2]) {
      throw ConfigError("decomp.dims: output extents (" + fmt_extents(dims->u) +
                        ") do not match the image shape");
    }
  }
}

std::uint64_t RunConfig::digest() const { return digest_of(*this, false); }
std::uint64_t RunConfig::resume_digest() const { return digest_of(*this, true); }

void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::string where = origin + ":" + std::to_string(n);
    const std::string key = trim(t.substr(0, t.find('=')));
    if (!seen.insert(key).second) throw ConfigError(where + ": key '" + key + "' set twice");
    assign(cfg, t, where);
  }
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  assign(cfg, assignment, "--set " + assignment);
}

RunConfig load_config(const std::filesystem::path* path,
                      const std::vector<std::string>& overrides) {
  RunConfig cfg;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw IoError("cannot open config " + path->string());
    std::stringstream buf;
    buf << in.rdbuf();
    apply_config_text(cfg, buf.str(), path->string());
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.resolve();
  return cfg;
}

std::string print_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : schema()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : schema()) keys.push_back(f.key);
  return keys;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("NSD_THREADS")) {
    const std::size_t n = parse_size("NSD_THREADS", env);
    if (n < 1) throw ConfigError("NSD_THREADS must be >= 1");
    return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

LoadedData load_dataset(const RunConfig& cfg) {
  const auto& b = cfg.budget;
  LoadedData d;
  if (cfg.data.source == "blobs") {
    BlobSpec spec = cfg.data.blobs;
    spec.classes = b.num_classes;
    spec.channels = b.image_shape[0];
    spec.height = b.image_shape[1];
    spec.width = b.image_shape[2];
    d.train = make_blobs(spec);
    spec.n = cfg.data.test_n;
    spec.seed = cfg.data.test_seed;
    d.test = make_blobs(spec);
  } else if (cfg.data.source == "idx") {
    d.train = load_idx(cfg.data.images, cfg.data.labels, b.num_classes);
    d.test = load_idx(cfg.data.test_images, cfg.data.test_labels, b.num_classes);
  } else {
    d.train = load_raw(cfg.data.raw_train, b.image_shape, b.num_classes);
    d.test = load_raw(cfg.data.raw_test, b.image_shape, b.num_classes);
  }
  for (const Dataset* set : {&d.train, &d.test}) {
    if (set->image_shape() != b.image_shape) {
      const auto s = set->image_shape();
      throw ConfigError("dataset images are " + std::to_string(s[0]) + "x" +
                        std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                        ", budget says " + std::to_string(b.image_shape[0]) + "x" +
                        std::to_string(b.image_shape[1]) + "x" +
                        std::to_string(b.image_shape[2]));
    }
    if (set->num_classes != b.num_classes) {
      throw ConfigError("dataset has " + std::to_string(set->num_classes) +
                        " classes, budget says " + std::to_string(b.num_classes));
    }
  }
  std::vector<std::size_t> per_class(b.num_classes, 0);
  for (int l : d.train.labels) ++per_class[static_cast<std::size_t>(l)];
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0) {
      throw ConfigError("class " + std::to_string(c) + " has no training images, budget says " +
                        std::to_string(b.num_classes) + " classes");
    }
  }
  d.normalization = fit_normalization(d.train);
  d.normalization.apply(d.train);
  d.normalization.apply(d.test);
  std::ostringstream stats;
  stats << std::setprecision(17) << cfg.digest();
  for (std::size_t c = 0; c < d.normalization.mean.size(); ++c)
    stats << '|' << d.normalization.mean[c] << '|' << d.normalization.std[c];
  d.digest = fnv1a64(stats.str());
  return d;
}

}  // namespace nsd
