#include "nsd/models.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "nsd/error.hpp"
#include "nsd/rng.hpp"

namespace nsd {

std::string to_string(ModelFamily family) {
  return family == ModelFamily::ConvNet ? "convnet" : "mlp";
}

ModelFamily model_family_from_string(const std::string& name) {
  if (name == "convnet") return ModelFamily::ConvNet;
  if (name == "mlp") return ModelFamily::Mlp;
  throw ConfigError("unknown model family '" + name + "'");
}

void ModelSpec::validate() const {
  if (depth < 1) throw ConfigError("model depth must be >= 1");
  if (width < 1) throw ConfigError("model width must be >= 1");
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  for (auto e : input_shape) {
    if (e < 1) throw ConfigError("model input extents must be >= 1");
  }
  if (family == ModelFamily::ConvNet) {
    const std::size_t f = std::size_t{1} << depth;
    if (input_shape[1] % f != 0 || input_shape[2] % f != 0) {
      throw ConfigError("input " + std::to_string(input_shape[1]) + "x" +
                        std::to_string(input_shape[2]) + " is not divisible by 2^" +
                        std::to_string(depth));
    }
  }
}

std::size_t ModelSpec::classifier_inputs() const {
  if (family == ModelFamily::Mlp) return width;
  const std::size_t f = std::size_t{1} << depth;
  return width * (input_shape[1] / f) * (input_shape[2] / f);
}

ParamLayout make_layout(const ModelSpec& spec) {
  spec.validate();
  ParamLayout layout;
  auto add = [&layout](std::string name, Shape shape) {
    const std::size_t n = shape_size(shape);
    layout.entries.push_back({std::move(name), layout.total, std::move(shape)});
    layout.total += n;
  };
  const std::size_t c = spec.num_classes;
  if (spec.family == ModelFamily::ConvNet) {
    std::size_t in = spec.input_shape[0];
    for (std::size_t d = 0; d < spec.depth; ++d) {
      const std::string p = "block" + std::to_string(d);
      add(p + ".conv", {spec.width, in, 3, 3});
      add(p + ".gamma", {spec.width});
      add(p + ".beta", {spec.width});
      in = spec.width;
    }
  } else {
    std::size_t in = spec.input_shape[0] * spec.input_shape[1] * spec.input_shape[2];
    for (std::size_t d = 0; d < spec.depth; ++d) {
      const std::string p = "hidden" + std::to_string(d);
      add(p + ".weight", {in, spec.width});
      add(p + ".bias", {spec.width});
      in = spec.width;
    }
  }
  add("classifier.weight", {spec.classifier_inputs(), c});
  add("classifier.bias", {c});
  return layout;
}

std::vector<NdArray> ParamVector::unflatten() const {
  std::vector<NdArray> out;
  out.reserve(layout.entries.size());
  for (const auto& e : layout.entries) {
    const auto begin = flat.begin() + static_cast<std::ptrdiff_t>(e.offset);
    out.emplace_back(e.shape, std::vector<double>(
                                  begin, begin + static_cast<std::ptrdiff_t>(shape_size(e.shape))));
  }
  return out;
}

ParamVector ParamVector::flatten(const ParamLayout& layout,
                                 std::span<const NdArray> arrays) {
  if (arrays.size() != layout.entries.size()) {
    throw ContractViolation("flatten: " + std::to_string(arrays.size()) +
                            " arrays for " + std::to_string(layout.entries.size()) +
                            " layout entries");
  }
  ParamVector p{layout, std::vector<double>(layout.total)};
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const auto& e = layout.entries[i];
    if (arrays[i].shape() != e.shape) {
      throw ContractViolation("flatten: " + e.name + " has shape " +
                              shape_str(arrays[i].shape()) + ", layout says " +
                              shape_str(e.shape));
    }
    std::copy(arrays[i].vec().begin(), arrays[i].vec().end(),
              p.flat.begin() + static_cast<std::ptrdiff_t>(e.offset));
  }
  return p;
}

ParamVector build_model(const ModelSpec& spec, std::uint64_t seed) {
  ParamLayout layout = make_layout(spec);
  ParamVector p{layout, std::vector<double>(layout.total, 0.0)};
  Rng rng = make_rng(seed, "model-init");
  for (const auto& e : layout.entries) {
    auto dst = p.flat.begin() + static_cast<std::ptrdiff_t>(e.offset);
    const std::size_t n = shape_size(e.shape);
    const bool gamma = e.name.ends_with(".gamma");
    if (e.shape.size() == 1) {
      std::fill_n(dst, n, gamma ? 1.0 : 0.0);
      continue;
    }
    // Conv (Co, Ci, 3, 3): fan-in Ci*9. Linear (in, out): fan-in `in`.
    const std::size_t fan_in =
        e.shape.size() == 4 ? e.shape[1] * e.shape[2] * e.shape[3] : e.shape[0];
    const bool last = e.name == "classifier.weight";
    const double std = std::sqrt((last ? 1.0 : 2.0) / static_cast<double>(fan_in));
    std::normal_distribution<double> dist(0.0, std);
    for (std::size_t i = 0; i < n; ++i) dst[static_cast<std::ptrdiff_t>(i)] = dist(rng);
  }
  return p;
}

std::vector<ad::Var> as_parameters(const ParamVector& p) {
  std::vector<ad::Var> out;
  for (auto& a : p.unflatten()) out.push_back(ad::Var::parameter(std::move(a)));
  return out;
}

std::vector<ad::Var> as_constants(const ParamVector& p) {
  std::vector<ad::Var> out;
  for (auto& a : p.unflatten()) out.push_back(ad::Var::constant(std::move(a)));
  return out;
}

ParamVector from_vars(const ParamLayout& layout, std::span<const ad::Var> vars) {
  std::vector<NdArray> arrays;
  arrays.reserve(vars.size());
  for (const auto& v : vars) arrays.push_back(v.value());
  return ParamVector::flatten(layout, arrays);
}

ad::Var instance_norm(const ad::Var& x, double eps) {
  const Shape& s = x.shape();
  const std::size_t rows = s[0] * s[1], hw = s[2] * s[3];
  const Shape flat{rows, hw};
  const double inv_n = 1.0 / static_cast<double>(hw);
  ad::Var xr = ad::reshape(x, flat);
  ad::Var mu = ad::scale(ad::sum_except(xr, 0), inv_n);
  ad::Var centered = ad::sub(xr, ad::broadcast_along(mu, flat, 0));
  ad::Var var = ad::scale(ad::sum_except(ad::mul(centered, centered), 0), inv_n);
  ad::Var inv_std = ad::pow_scalar(ad::add_scalar(var, eps), -0.5);
  return ad::reshape(ad::mul(centered, ad::broadcast_along(inv_std, flat, 0)), s);
}

namespace {

ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b) {
  ad::Var y = ad::matmul(x, w);
  return ad::add(y, ad::broadcast_along(b, y.shape(), 1));
}

void check_params(const ModelSpec& spec, std::span<const ad::Var> params) {
  const ParamLayout layout = make_layout(spec);
  if (params.size() != layout.entries.size()) {
    throw ContractViolation("forward: expected " + std::to_string(layout.entries.size()) +
                            " parameter tensors, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != layout.entries[i].shape) {
      throw ContractViolation("forward: " + layout.entries[i].name + " has shape " +
                              shape_str(params[i].shape()));
    }
  }
}

}  // namespace

ad::Var features(const ModelSpec& spec, std::span<const ad::Var> params,
                 const ad::Var& images) {
  check_params(spec, params);
  const Shape& s = images.shape();
  if (s.size() != 4 || s[1] != spec.input_shape[0] || s[2] != spec.input_shape[1] ||
      s[3] != spec.input_shape[2]) {
    throw DimensionError("forward: batch " + shape_str(s) + " does not match input (" +
                         std::to_string(spec.input_shape[0]) + "," +
                         std::to_string(spec.input_shape[1]) + "," +
                         std::to_string(spec.input_shape[2]) + ")");
  }
  const std::size_t batch = s[0];
  ad::Var x = images;
  std::size_t p = 0;
  if (spec.family == ModelFamily::ConvNet) {
    for (std::size_t d = 0; d < spec.depth; ++d) {
      x = instance_norm(ad::conv2d(x, params[p]));
      const Shape cs = x.shape();
      x = ad::add(ad::mul(x, ad::broadcast_along(params[p + 1], cs, 1)),
                  ad::broadcast_along(params[p + 2], cs, 1));
      x = ad::avg_pool2(ad::relu(x));
      p += 3;
    }
    return ad::reshape(x, {batch, spec.classifier_inputs()});
  }
  x = ad::reshape(x, {batch, x.size() / batch});
  for (std::size_t d = 0; d < spec.depth; ++d) {
    x = ad::relu(linear(x, params[p], params[p + 1]));
    p += 2;
  }
  return x;
}

ad::Var forward(const ModelSpec& spec, std::span<const ad::Var> params,
                const ad::Var& images) {
  ad::Var x = features(spec, params, images);
  const std::size_t n = params.size();
  return linear(x, params[n - 2], params[n - 1]);
}

ad::Var forward_loss(const ModelSpec& spec, std::span<const ad::Var> params,
                     const ad::Var& images, std::span<const int> labels) {
  if (labels.size() != images.shape()[0]) {
    throw DataError("forward_loss: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(images.shape()[0]) + " images");
  }
  return ad::cross_entropy(forward(spec, params, images), labels);
}

double param_distance(const ParamVector& a, const ParamVector& b) {
  if (!(a.layout == b.layout) || a.flat.size() != b.flat.size()) {
    throw ContractViolation("param_distance: layouts differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.flat.size(); ++i) {
    const double d = a.flat[i] - b.flat[i];
    s += d * d;
  }
  return s;
}

ad::Var param_distance(std::span<const ad::Var> a, const ParamVector& b) {
  const auto target = b.unflatten();
  if (a.size() != target.size()) throw ContractViolation("param_distance: layouts differ");
  ad::Var total;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != target[i].shape()) {
      throw ContractViolation("param_distance: layouts differ at " +
                              b.layout.entries[i].name);
    }
    ad::Var d = ad::squared_distance(a[i], ad::Var::constant(target[i]));
    total = i == 0 ? d : ad::add(total, d);
  }
  return total;
}

double accuracy(const ModelSpec& spec, const ParamVector& params, const NdArray& images,
                std::span<const int> labels, std::size_t chunk) {
  ad::NoGradGuard guard;
  const auto vars = as_constants(params);
  const std::size_t n = images.dim(0);
  if (labels.size() != n) throw DataError("accuracy: label count mismatch");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t end = std::min(n, start + chunk);
    std::vector<std::size_t> rows(end - start);
    std::iota(rows.begin(), rows.end(), start);
    const NdArray logits =
        forward(spec, vars, ad::Var::constant(take_rows(images, rows))).value();
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < c; ++k)
        if (logits[i * c + k] > logits[i * c + best]) best = k;
      if (static_cast<int>(best) == labels[start + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace nsd
