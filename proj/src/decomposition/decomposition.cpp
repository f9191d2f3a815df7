#include "nsd/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "nsd/error.hpp"
#include "nsd/transforms.hpp"

namespace nsd {

Extents4 SpectrumTensor::dims() const {
  const Shape& s = values.shape();
  return {s[0], s[1], s[2], s[3]};
}

Extents4 SeparableKernel::in_extents() const {
  Extents4 e{};
  for (std::size_t m = 0; m < 4; ++m) e[m] = factors[m].in_extent();
  return e;
}

Extents4 SeparableKernel::out_extents() const {
  Extents4 e{};
  for (std::size_t m = 0; m < 4; ++m) e[m] = factors[m].out_extent();
  return e;
}

std::string to_string(LabelRule rule) {
  switch (rule) {
    case LabelRule::PerClassTensors: return "per_class_tensors";
    case LabelRule::PerClassKernels: return "per_class_kernels";
    case LabelRule::PerPair: return "per_pair";
  }
  return "per_class_tensors";
}

LabelRule label_rule_from_string(const std::string& name) {
  if (name == "per_class_tensors") return LabelRule::PerClassTensors;
  if (name == "per_class_kernels") return LabelRule::PerClassKernels;
  if (name == "per_pair") return LabelRule::PerPair;
  throw ConfigError("unknown label rule '" + name + "'");
}

std::vector<ad::Var> DistillState::trainable_leaves() const {
  std::vector<ad::Var> leaves;
  for (const auto& t : tensors) {
    if (t.values.requires_grad()) leaves.push_back(t.values);
  }
  for (const auto& k : kernels) {
    for (const auto& f : k.factors) {
      if (f.trainable()) leaves.push_back(f.values);
    }
  }
  return leaves;
}

void DistillState::validate() const {
  if (tensors.empty()) throw ContractViolation("state has no spectrum tensors");
  if (kernels.empty()) throw ContractViolation("state has no kernels");
  if (num_classes < 1) throw ContractViolation("state needs at least one class");
  const Extents4 out = kernels.front().out_extents();
  for (const auto& k : kernels) {
    for (std::size_t m = 0; m < 4; ++m) {
      const auto& f = k.factors[m];
      if (!f.values || f.values.value().rank() != 2) {
        throw ContractViolation("kernel " + std::to_string(k.kernel_id) +
                                " is missing its mode" + std::to_string(m + 1) +
                                " factor");
      }
      if (f.mode != m) {
        throw ContractViolation("kernel " + std::to_string(k.kernel_id) +
                                " has factor modes out of order");
      }
    }
    if (k.out_extents() != out) {
      throw DimensionError("kernels disagree on output extents");
    }
    if (k.factors[0].in_extent() > k.factors[0].out_extent()) {
      throw DimensionError("mode1 factor maps " +
                           std::to_string(k.factors[0].in_extent()) + " -> " +
                           std::to_string(k.factors[0].out_extent()) +
                           "; expected t1 <= u1");
    }
    if (k.class_id < 0 || k.class_id >= num_classes) {
      throw ContractViolation("kernel class id out of range");
    }
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    if (t.values.value().rank() != 4) {
      throw DimensionError("spectrum tensor " + std::to_string(i) +
                           " is not 4-mode: " + shape_str(t.values.shape()));
    }
    if (t.class_id < 0 || t.class_id >= num_classes) {
      throw ContractViolation("tensor class id out of range");
    }
    const Extents4 d = t.dims();
    for (const auto& k : kernels) {
      const Extents4 in = k.in_extents();
      for (std::size_t m = 0; m < 4; ++m) {
        if (d[m] != in[m]) {
          throw DimensionError("tensor " + std::to_string(i) + " mode" +
                               std::to_string(m + 1) + " extent " +
                               std::to_string(d[m]) + " does not match kernel " +
                               std::to_string(k.kernel_id) + " input extent " +
                               std::to_string(in[m]));
        }
      }
    }
  }
  if (!velocity.empty()) {
    const auto leaves = trainable_leaves();
    if (velocity.size() != leaves.size()) {
      throw ContractViolation("velocity buffers do not match trainable leaves");
    }
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      if (velocity[i].shape() != leaves[i].shape()) {
        throw ContractViolation("velocity buffer shape mismatch");
      }
    }
  }
}

namespace {

ad::Var copy_leaf(const ad::Var& v) {
  return v.requires_grad() ? ad::Var::parameter(v.value())
                           : ad::Var::constant(v.value());
}

}  // namespace

DistillState DistillState::clone() const {
  DistillState out = *this;
  for (auto& t : out.tensors) t.values = copy_leaf(t.values);
  for (auto& k : out.kernels)
    for (auto& f : k.factors) f.values = copy_leaf(f.values);
  return out;
}

std::uint64_t DistillState::digest() const {
  std::string bytes;
  auto put = [&bytes](const void* p, std::size_t n) {
    bytes.append(static_cast<const char*>(p), n);
  };
  auto put_array = [&](const NdArray& a) {
    for (auto e : a.shape()) put(&e, sizeof e);
    put(a.vec().data(), a.size() * sizeof(double));
  };
  for (const auto& t : tensors) {
    put(&t.class_id, sizeof t.class_id);
    put_array(t.values.value());
  }
  for (const auto& k : kernels) {
    put(&k.kernel_id, sizeof k.kernel_id);
    put(&k.class_id, sizeof k.class_id);
    for (const auto& f : k.factors) {
      const char flags[2] = {f.trainable(), f.analytic};
      put(flags, 2);
      put_array(f.values.value());
    }
    if (k.band_probs) put(k.band_probs->data(), sizeof(BandProbs));
  }
  const int rule = static_cast<int>(label_rule);
  put(&rule, sizeof rule);
  put(&num_classes, sizeof num_classes);
  for (const auto& v : velocity) put_array(v);
  put(&step, sizeof step);
  return fnv1a64(bytes);
}

std::size_t BudgetSpec::image_scalars() const {
  return image_shape[0] * image_shape[1] * image_shape[2];
}

std::size_t BudgetSpec::budget_scalars() const {
  return num_classes * ipc * image_scalars();
}

double BudgetSpec::ratio_percent() const {
  if (train_images == 0) return 0.0;
  return 100.0 * static_cast<double>(num_classes * ipc) /
         static_cast<double>(train_images);
}

void BudgetSpec::validate() const {
  if (num_classes < 1) throw ConfigError("budget: classes must be >= 1");
  if (ipc < 1) throw ConfigError("budget: ipc must be >= 1");
  for (auto e : image_shape) {
    if (e < 1) throw ConfigError("budget: image extents must be >= 1");
  }
  if (train_images != 0 && num_classes * ipc > train_images) {
    throw ConfigError("budget: ipc * classes exceeds the training set");
  }
}

std::size_t pair_index(std::size_t i, std::size_t j, std::size_t n_kernels) {
  if (n_kernels < 1 || i < 1 || j < 1 || j > n_kernels) {
    throw RangeError("pair_index: (" + std::to_string(i) + ", " +
                     std::to_string(j) + ") outside the pair grid with " +
                     std::to_string(n_kernels) + " kernels");
  }
  return j + (i - 1) * n_kernels;
}

ad::Var synthesize_pair(const SpectrumTensor& tensor,
                        const SeparableKernel& kernel,
                        const NdArray* band_mask) {
  const Extents4 d = tensor.dims();
  const Extents4 in = kernel.in_extents();
  for (std::size_t m = 0; m < 4; ++m) {
    if (d[m] != in[m]) {
      throw DimensionError("synthesize_pair: mode" + std::to_string(m + 1) +
                           " tensor extent " + std::to_string(d[m]) +
                           " vs kernel input extent " + std::to_string(in[m]));
    }
  }
  ad::Var x = tensor.values;
  if (band_mask) {
    x = ad::mask_mul(x, std::make_shared<const NdArray>(*band_mask));
  }
  for (std::size_t m = 0; m < 4; ++m) {
    x = ad::mode_product(x, kernel.factors[m].values, m);
  }
  return x;
}

std::vector<Pair> all_pairs(const DistillState& state) {
  std::vector<Pair> pairs;
  pairs.reserve(state.tensors.size() * state.kernels.size());
  for (std::size_t i = 0; i < state.tensors.size(); ++i)
    for (std::size_t j = 0; j < state.kernels.size(); ++j) pairs.push_back({i, j});
  return pairs;
}

int pair_label(const DistillState& state, const Pair& pair) {
  switch (state.label_rule) {
    case LabelRule::PerClassTensors:
      return state.tensors.at(pair.tensor).class_id;
    case LabelRule::PerClassKernels:
      return state.kernels.at(pair.kernel).class_id;
    case LabelRule::PerPair: {
      const std::size_t n = state.tensors.size() * state.kernels.size();
      const std::size_t idx =
          pair_index(pair.tensor + 1, pair.kernel + 1, state.kernels.size()) - 1;
      return static_cast<int>(idx * static_cast<std::size_t>(state.num_classes) / n);
    }
  }
  return 0;
}

SyntheticData synthesize_dataset(const DistillState& state,
                                 const SynthesisOptions& options) {
  std::vector<Pair> pairs = options.selection ? *options.selection : all_pairs(state);
  if (pairs.empty()) throw RangeError("synthesize_dataset: empty pair selection");
  const std::size_t n_k = state.kernels.size();
  for (const Pair& p : pairs) {
    if (p.tensor >= state.tensors.size() || p.kernel >= n_k) {
      throw RangeError("synthesize_dataset: pair (" + std::to_string(p.tensor + 1) +
                       ", " + std::to_string(p.kernel + 1) + ") outside the grid");
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(), [n_k](const Pair& a, const Pair& b) {
    return pair_index(a.tensor + 1, a.kernel + 1, n_k) <
           pair_index(b.tensor + 1, b.kernel + 1, n_k);
  });

  std::vector<ad::Var> parts;
  SyntheticData out;
  for (const Pair& p : pairs) {
    const auto& tensor = state.tensors[p.tensor];
    const auto& kernel = state.kernels[p.kernel];
    std::optional<NdArray> mask;
    if (options.band_rng && kernel.band_probs) {
      const auto keep = sample_band_keep(*kernel.band_probs, *options.band_rng);
      if (!std::all_of(keep.begin(), keep.end(), [](bool k) { return k; })) {
        mask = spectrum_band_mask(tensor.dims(), kernel.out_extents(), keep);
      }
    }
    parts.push_back(synthesize_pair(tensor, kernel, mask ? &*mask : nullptr));
    const int label = pair_label(state, p);
    out.labels.insert(out.labels.end(), kernel.factors[0].out_extent(), label);
  }
  out.images = parts.size() == 1 ? parts.front() : ad::concat_rows(parts);
  return out;
}

std::size_t parameter_count(const DistillState& state) {
  std::size_t total = 0;
  for (const auto& t : state.tensors) total += t.values.size();
  for (const auto& k : state.kernels)
    for (const auto& f : k.factors)
      if (!f.analytic) total += f.values.size();
  return total;
}

BudgetReport budget_check(std::size_t stored, const BudgetSpec& budget) {
  BudgetReport r;
  r.stored = stored;
  r.allowed = budget.budget_scalars();
  r.ok = r.stored <= r.allowed;
  r.utilization = static_cast<double>(r.stored) / static_cast<double>(r.allowed);
  return r;
}

BudgetReport budget_check(const DistillState& state, const BudgetSpec& budget) {
  return budget_check(parameter_count(state), budget);
}

NdArray compose_full_kernel(const SeparableKernel& kernel, std::size_t cap) {
  const Extents4 t = kernel.in_extents();
  const Extents4 u = kernel.out_extents();
  std::size_t nt = 1, nu = 1;
  for (std::size_t m = 0; m < 4; ++m) {
    nt *= t[m];
    nu *= u[m];
  }
  if (nt * nu > cap) {
    throw OracleCapError("compose_full_kernel: " + std::to_string(nt * nu) +
                         " entries exceed the oracle cap of " + std::to_string(cap));
  }
  const auto& k1 = kernel.factors[0].values.value();
  const auto& k2 = kernel.factors[1].values.value();
  const auto& k3 = kernel.factors[2].values.value();
  const auto& k4 = kernel.factors[3].values.value();
  NdArray full(Shape{t[0], t[1], t[2], t[3], u[0], u[1], u[2], u[3]});
  std::size_t idx = 0;
  for (std::size_t a = 0; a < t[0]; ++a)
    for (std::size_t b = 0; b < t[1]; ++b)
      for (std::size_t c = 0; c < t[2]; ++c)
        for (std::size_t d = 0; d < t[3]; ++d)
          for (std::size_t p = 0; p < u[0]; ++p)
            for (std::size_t q = 0; q < u[1]; ++q)
              for (std::size_t r = 0; r < u[2]; ++r)
                for (std::size_t s = 0; s < u[3]; ++s)
                  full[idx++] = k1[a * u[0] + p] * k2[b * u[1] + q] *
                                k3[c * u[2] + r] * k4[d * u[3] + s];
  return full;
}

NdArray contract_full_kernel(const NdArray& tensor, const NdArray& full_kernel) {
  const Shape& ks = full_kernel.shape();
  if (ks.size() != 8 || tensor.rank() != 4 ||
      !std::equal(tensor.shape().begin(), tensor.shape().end(), ks.begin())) {
    throw DimensionError("contract_full_kernel: tensor " + shape_str(tensor.shape()) +
                         " vs kernel " + shape_str(ks));
  }
  const std::size_t nt = tensor.size();
  const std::size_t nu = full_kernel.size() / nt;
  NdArray out(Shape{ks[4], ks[5], ks[6], ks[7]});
  for (std::size_t i = 0; i < nt; ++i) {
    const double v = tensor[i];
    const double* row = &full_kernel[i * nu];
    for (std::size_t j = 0; j < nu; ++j) out[j] += v * row[j];
  }
  return out;
}

std::size_t scheduled_spatial_extent(std::size_t ipc, std::size_t height) {
  if (ipc > 10) return (7 * height + 7) / 8;
  return std::max<std::size_t>(1, height / 2);
}

std::size_t stored_scalars(const DecompositionDims& dims,
                           const StorageLayout& layout) {
  std::size_t tensor = 1, kernel = 0;
  for (std::size_t m = 0; m < 4; ++m) {
    tensor *= dims.t[m];
    if (layout.stored_factor[m]) kernel += dims.t[m] * dims.u[m];
  }
  return layout.n_tensors * tensor + layout.n_kernels * kernel;
}

DecompositionDims auto_dims(const BudgetSpec& budget, const StorageLayout& layout,
                            std::size_t max_u1) {
  budget.validate();
  const auto [channels, height, width] = budget.image_shape;
  DecompositionDims dims;
  dims.t = {1, channels, scheduled_spatial_extent(budget.ipc, height),
            scheduled_spatial_extent(budget.ipc, width)};
  dims.u = {2, channels, height, width};
  const std::size_t allowed = budget.budget_scalars();
  const std::size_t per_t1 =
      layout.n_tensors * channels * dims.t[2] * dims.t[3];
  for (std::size_t t1 = allowed / std::max<std::size_t>(per_t1, 1); t1 >= 1; --t1) {
    dims.t[0] = t1;
    std::optional<std::size_t> best;
    for (std::size_t u1 = t1 + 1; u1 <= max_u1; ++u1) {
      dims.u[0] = u1;
      if (stored_scalars(dims, layout) <= allowed) {
        best = u1;
      } else if (layout.stored_factor[0]) {
        break;  // cost grows with u1
      }
    }
    if (best) {
      dims.u[0] = *best;
      return dims;
    }
  }
  throw ConfigError("no (t1, u1) with t1 < u1 fits the budget of " +
                    std::to_string(allowed) + " scalars");
}

SeparableKernel make_identity_kernel(const Extents4& extents, int kernel_id) {
  SeparableKernel k;
  k.kernel_id = kernel_id;
  for (std::size_t m = 0; m < 4; ++m) {
    NdArray eye(Shape{extents[m], extents[m]});
    for (std::size_t i = 0; i < extents[m]; ++i) eye[i * extents[m] + i] = 1.0;
    k.factors[m] = KernelFactor{m, ad::Var::constant(std::move(eye)), true};
  }
  return k;
}

SpectrumTensor make_random_tensor(const Extents4& dims, int class_id, Rng& rng) {
  const double bound = std::sqrt(3.0);
  std::uniform_real_distribution<double> dist(-bound, bound);
  NdArray v(Shape{dims[0], dims[1], dims[2], dims[3]});
  for (auto& x : v.data()) x = dist(rng);
  return {ad::Var::parameter(std::move(v)), class_id};
}

NdArray random_factor_values(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = std::sqrt(3.0 / static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  NdArray v(Shape{in, out});
  for (auto& x : v.data()) x = dist(rng);
  return v;
}

}  // namespace nsd
