#include "nsd/transforms.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "nsd/error.hpp"

namespace nsd {

std::string to_string(TransformTag tag) {
  switch (tag) {
    case TransformTag::Random: return "random";
    case TransformTag::Dct: return "dct";
    case TransformTag::Ldct: return "ldct";
    case TransformTag::Dwt: return "dwt";
    case TransformTag::Svd: return "svd";
    case TransformTag::Lsvd: return "lsvd";
  }
  return "random";
}

TransformTag transform_tag_from_string(const std::string& name) {
  for (auto tag : {TransformTag::Random, TransformTag::Dct, TransformTag::Ldct,
                   TransformTag::Dwt, TransformTag::Svd, TransformTag::Lsvd}) {
    if (to_string(tag) == name) return tag;
  }
  throw ConfigError("unknown transform kind '" + name + "'");
}

bool TransformKind::learnable() const {
  return tag == TransformTag::Random || tag == TransformTag::Ldct ||
         tag == TransformTag::Lsvd;
}

void TransformKind::validate() const {
  for (double p : band_probs) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw ConfigError("band probabilities must lie in [0, 1]");
    }
  }
  if (truncation_rank < 1) throw ConfigError("truncation rank must be >= 1");
}

NdArray dct_kernel(std::size_t m, std::size_t n) {
  NdArray k(Shape{m, n});
  const double w = std::numbers::pi / static_cast<double>(n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      k[i * n + j] = std::cos(w * (static_cast<double>(j) + 0.5) *
                              (static_cast<double>(i) + 0.5));
  return k;
}

NdArray dct_inverse_kernel(std::size_t m, std::size_t n) {
  const NdArray k = dct_kernel(m, n);
  NdArray inv(Shape{n, m});
  const double s = 2.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) inv[j * m + i] = s * k[i * n + j];
  return inv;
}

namespace {

void check_haar_image(const NdArray& image) {
  if (image.rank() != 3) {
    throw DimensionError("haar_split: expected (C, H, W), got " +
                         shape_str(image.shape()));
  }
  if (image.dim(1) % 2 != 0 || image.dim(2) % 2 != 0) {
    throw DimensionError("haar_split: H and W must be even, got " +
                         shape_str(image.shape()));
  }
}

}  // namespace

HaarBands haar_split(const NdArray& image) {
  check_haar_image(image);
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const Shape half{c, h / 2, w / 2};
  HaarBands b{NdArray(half), NdArray(half), NdArray(half), NdArray(half)};
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h / 2; ++i)
      for (std::size_t j = 0; j < w / 2; ++j) {
        const std::size_t base = (ch * h + 2 * i) * w + 2 * j;
        const double p = image[base], q = image[base + 1];
        const double r = image[base + w], s = image[base + w + 1];
        const std::size_t o = (ch * (h / 2) + i) * (w / 2) + j;
        b.ll[o] = 0.5 * (p + q + r + s);
        b.lh[o] = 0.5 * (p - q + r - s);
        b.hl[o] = 0.5 * (p + q - r - s);
        b.hh[o] = 0.5 * (p - q - r + s);
      }
  return b;
}

NdArray haar_merge(const HaarBands& b) {
  const Shape& s = b.ll.shape();
  if (s.size() != 3 || b.lh.shape() != s || b.hl.shape() != s || b.hh.shape() != s) {
    throw DimensionError("haar_merge: bands must share one (C, H/2, W/2) shape");
  }
  const std::size_t c = s[0], h = 2 * s[1], w = 2 * s[2];
  NdArray image(Shape{c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < s[1]; ++i)
      for (std::size_t j = 0; j < s[2]; ++j) {
        const std::size_t o = (ch * s[1] + i) * s[2] + j;
        const double ll = b.ll[o], lh = b.lh[o], hl = b.hl[o], hh = b.hh[o];
        const std::size_t base = (ch * h + 2 * i) * w + 2 * j;
        image[base] = 0.5 * (ll + lh + hl + hh);
        image[base + 1] = 0.5 * (ll - lh + hl - hh);
        image[base + w] = 0.5 * (ll + lh - hl - hh);
        image[base + w + 1] = 0.5 * (ll - lh - hl + hh);
      }
  return image;
}

std::array<bool, 4> sample_band_keep(const BandProbs& probs, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<bool, 4> keep{true, true, true, true};
  for (std::size_t k = 1; k < 4; ++k) keep[k] = u(rng) < probs[k];
  return keep;
}

HaarBands haar_band_sample(const HaarBands& bands, Rng& rng,
                           const BandProbs& probs) {
  const auto keep = sample_band_keep(probs, rng);
  HaarBands out = bands;
  NdArray* detail[3] = {&out.lh, &out.hl, &out.hh};
  for (std::size_t k = 1; k < 4; ++k) {
    if (!keep[k]) std::fill(detail[k - 1]->data().begin(), detail[k - 1]->data().end(), 0.0);
  }
  return out;
}

NdArray haar_synthesis_matrix(std::size_t u) {
  if (u < 2 || u % 2 != 0) {
    throw ConfigError("Haar factors need an even output extent, got " +
                      std::to_string(u));
  }
  const double a = 1.0 / std::numbers::sqrt2;
  const std::size_t half = u / 2;
  NdArray s(Shape{u, u});
  for (std::size_t i = 0; i < half; ++i) {
    s[i * u + 2 * i] = a;
    s[i * u + 2 * i + 1] = a;
    s[(half + i) * u + 2 * i] = a;
    s[(half + i) * u + 2 * i + 1] = -a;
  }
  return s;
}

NdArray spectrum_band_mask(const Extents4& t, const Extents4& u,
                           const std::array<bool, 4>& keep) {
  NdArray mask(Shape{t[0], t[1], t[2], t[3]});
  const std::size_t plane = t[2] * t[3];
  for (std::size_t r = 0; r < t[2]; ++r)
    for (std::size_t c = 0; c < t[3]; ++c) {
      const std::size_t band = 2 * (r >= u[2] / 2 ? 1 : 0) + (c >= u[3] / 2 ? 1 : 0);
      const double v = keep[band] ? 1.0 : 0.0;
      for (std::size_t ab = 0; ab < t[0] * t[1]; ++ab) {
        mask[ab * plane + r * t[3] + c] = v;
      }
    }
  return mask;
}

TruncatedSvd truncated_svd(const NdArray& matrix, std::size_t n) {
  if (matrix.rank() != 2) {
    throw DimensionError("truncated_svd: expected a matrix, got " +
                         shape_str(matrix.shape()));
  }
  const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
  if (n < 1 || n > std::min(rows, cols)) {
    throw RangeError("truncated_svd: rank " + std::to_string(n) +
                     " outside [1, " + std::to_string(std::min(rows, cols)) + "]");
  }
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = matrix[i * cols + j];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);

  TruncatedSvd out;
  const auto& sv = svd.singularValues();
  out.singular_values.assign(sv.data(), sv.data() + sv.size());
  out.u = NdArray(Shape{rows, n});
  out.v = NdArray(Shape{cols, n});
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < rows; ++i) out.u[i * n + k] = svd.matrixU()(i, k);
    for (std::size_t j = 0; j < cols; ++j) out.v[j * n + k] = svd.matrixV()(j, k);
  }
  return out;
}

SvdInit svd_init(const NdArray& images, std::size_t rank) {
  if (images.rank() != 4) {
    throw DimensionError("svd_init: expected (B, C, H, W), got " +
                         shape_str(images.shape()));
  }
  const std::size_t b = images.dim(0);
  const std::size_t d = images.size() / b;
  const TruncatedSvd svd = truncated_svd(images.reshaped(Shape{b, d}), rank);

  SvdInit out;
  out.singular_values = svd.singular_values;
  out.spectrum = NdArray(Shape{rank, images.dim(1), images.dim(2), images.dim(3)});
  out.kernel = NdArray(Shape{rank, b});
  for (std::size_t k = 0; k < rank; ++k) {
    for (std::size_t j = 0; j < d; ++j) out.spectrum[k * d + j] = svd.v[j * rank + k];
    for (std::size_t i = 0; i < b; ++i) {
      out.kernel[k * b + i] = svd.u[i * rank + k] * svd.singular_values[k];
    }
  }
  return out;
}

namespace {

KernelFactor trainable_factor(std::size_t mode, NdArray values) {
  return {mode, ad::Var::parameter(std::move(values)), false};
}

KernelFactor frozen_factor(std::size_t mode, NdArray values) {
  return {mode, ad::Var::constant(std::move(values)), true};
}

NdArray leading_rows(const NdArray& m, std::size_t rows) {
  const std::size_t cols = m.dim(1);
  std::vector<double> v(m.vec().begin(), m.vec().begin() + rows * cols);
  return NdArray(Shape{rows, cols}, std::move(v));
}

void check_dims(const DecompositionDims& dims) {
  for (std::size_t m = 0; m < 4; ++m) {
    if (dims.t[m] < 1 || dims.u[m] < 1) {
      throw ConfigError("decomposition extents must be >= 1");
    }
  }
  if (dims.t[0] > dims.u[0]) {
    throw ConfigError("mode1 needs t1 <= u1, got t1=" + std::to_string(dims.t[0]) +
                      " u1=" + std::to_string(dims.u[0]));
  }
}

NdArray identity(std::size_t n) {
  NdArray eye(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  return eye;
}

}  // namespace

SeparableKernel make_kernel_factors(const TransformKind& kind,
                                    const DecompositionDims& dims, Rng& rng,
                                    int kernel_id) {
  kind.validate();
  check_dims(dims);
  SeparableKernel k;
  k.kernel_id = kernel_id;
  for (std::size_t m = 0; m < 2; ++m) {
    NdArray v = random_factor_values(dims.t[m], dims.u[m], rng);
    if (m == 0 && kind.nonnegative_batch)
      for (auto& x : v.data()) x = std::abs(x);
    k.factors[m] = trainable_factor(m, std::move(v));
  }
  for (std::size_t m = 2; m < 4; ++m) {
    const std::size_t t = dims.t[m], u = dims.u[m];
    switch (kind.tag) {
      case TransformTag::Random:
        k.factors[m] = trainable_factor(m, random_factor_values(t, u, rng));
        break;
      case TransformTag::Dct:
      case TransformTag::Ldct: {
        if (t > u) {
          throw ConfigError("DCT factor for mode" + std::to_string(m + 1) +
                            " needs t <= u, got " + std::to_string(t) + " > " +
                            std::to_string(u));
        }
        // sqrt(2/u) scaling gives orthonormal rows, so synthesis keeps the
        // spectrum's scale.
        NdArray values = dct_kernel(t, u);
        const double s = std::sqrt(2.0 / static_cast<double>(u));
        for (auto& x : values.data()) x *= s;
        k.factors[m] = kind.tag == TransformTag::Ldct
                           ? trainable_factor(m, std::move(values))
                           : frozen_factor(m, std::move(values));
        break;
      }
      case TransformTag::Dwt: {
        if (t > u) {
          throw ConfigError("Haar factor for mode" + std::to_string(m + 1) +
                            " needs t <= u");
        }
        k.factors[m] = frozen_factor(m, leading_rows(haar_synthesis_matrix(u), t));
        k.band_probs = kind.band_probs;
        break;
      }
      case TransformTag::Svd:
      case TransformTag::Lsvd:
        throw ConfigError("SVD kernels are built from a real-image batch");
    }
  }
  return k;
}

SeparableKernel make_svd_kernel(const SvdInit& init, bool trainable,
                                std::array<std::size_t, 3> image_shape,
                                int kernel_id) {
  SeparableKernel k;
  k.kernel_id = kernel_id;
  k.factors[0] = {0,
                  trainable ? ad::Var::parameter(init.kernel)
                            : ad::Var::constant(init.kernel),
                  false};
  for (std::size_t m = 1; m < 4; ++m) {
    k.factors[m] = frozen_factor(m, identity(image_shape[m - 1]));
  }
  return k;
}

StorageLayout storage_layout(const TransformKind& kind, std::size_t n_tensors,
                             std::size_t n_kernels) {
  StorageLayout layout{n_tensors, n_kernels, {true, true, true, true}};
  switch (kind.tag) {
    case TransformTag::Random:
    case TransformTag::Ldct:
      break;
    case TransformTag::Dct:
    case TransformTag::Dwt:
      layout.stored_factor = {true, true, false, false};
      break;
    case TransformTag::Svd:
    case TransformTag::Lsvd:
      layout.stored_factor = {true, false, false, false};
      break;
  }
  return layout;
}

namespace {

// Indices of `count` distinct images of class `c`, drawn with `rng`.
std::vector<std::size_t> pick_class_images(const ClassImages& real, int c,
                                           std::size_t count, Rng& rng) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < real.labels->size(); ++i) {
    if ((*real.labels)[i] == c) pool.push_back(i);
  }
  if (pool.size() < count) {
    throw DataError("class " + std::to_string(c) + " has " +
                    std::to_string(pool.size()) + " images, need " +
                    std::to_string(count));
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

NdArray gather_images(const NdArray& images, const std::vector<std::size_t>& idx) {
  Shape s = images.shape();
  const std::size_t per = images.size() / s[0];
  s[0] = idx.size();
  NdArray out(s);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(images.vec().begin() + static_cast<std::ptrdiff_t>(idx[k] * per), per,
                out.data().begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

void check_real(const ClassImages& real, const BudgetSpec& budget) {
  if (!real.images || !real.labels) {
    throw ConfigError("this initialization needs real training images");
  }
  const auto& s = real.images->shape();
  if (s.size() != 4 || s[1] != budget.image_shape[0] || s[2] != budget.image_shape[1] ||
      s[3] != budget.image_shape[2] || real.labels->size() != s[0]) {
    throw DimensionError("real images " + shape_str(s) +
                         " do not match the budget image shape");
  }
}

DistillState build_svd_state(const StateRequest& req, Rng& rng,
                             const ClassImages& real) {
  const BudgetSpec& budget = req.budget;
  check_real(real, budget);
  const std::size_t classes = budget.num_classes;
  if ((req.n_tensors != 0 && req.n_tensors != classes) || req.n_kernels != classes) {
    if (!(req.n_kernels == 1 && req.n_tensors == 0)) {
      throw ConfigError("SVD kinds use one tensor and one kernel per class");
    }
  }
  const std::size_t d = budget.image_scalars();
  std::size_t rank = req.kind.truncation_rank;
  std::size_t batch = 0;
  if (req.dims) {
    rank = req.dims->t[0];
    batch = req.dims->u[0];
  } else {
    std::size_t available = real.labels->size();
    for (std::size_t c = 0; c < classes; ++c) {
      available = std::min<std::size_t>(
          available, static_cast<std::size_t>(std::count(
                         real.labels->begin(), real.labels->end(), static_cast<int>(c))));
    }
    for (std::size_t b = std::min(req.max_u1, available); b > rank; --b) {
      if (classes * rank * (d + b) <= budget.budget_scalars()) {
        batch = b;
        break;
      }
    }
    if (batch == 0) {
      throw ConfigError("no SVD batch size with rank " + std::to_string(rank) +
                        " fits the budget");
    }
  }
  const TransformKind& kind = req.kind;
  DistillState state;
  state.label_rule = LabelRule::PerClassTensors;
  state.num_classes = static_cast<int>(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const auto idx = pick_class_images(real, static_cast<int>(c), batch, rng);
    const SvdInit init = svd_init(gather_images(*real.images, idx), rank);
    state.tensors.push_back({ad::Var::parameter(init.spectrum), static_cast<int>(c)});
    SeparableKernel k = make_svd_kernel(init, kind.tag == TransformTag::Lsvd,
                                        budget.image_shape, static_cast<int>(c));
    k.class_id = static_cast<int>(c);
    state.kernels.push_back(std::move(k));
  }
  state.validate();
  return state;
}

}  // namespace

DistillState build_state(const StateRequest& req, Rng& rng, const ClassImages& real) {
  req.budget.validate();
  req.kind.validate();
  if (req.kind.tag == TransformTag::Svd || req.kind.tag == TransformTag::Lsvd) {
    return build_svd_state(req, rng, real);
  }
  const std::size_t classes = req.budget.num_classes;
  const std::size_t n_t = req.n_tensors == 0 ? classes : req.n_tensors;
  const std::size_t n_k = req.n_kernels;
  if (n_k < 1) throw ConfigError("need at least one kernel");
  if (req.label_rule == LabelRule::PerClassTensors && n_t < classes) {
    throw ConfigError("per-class tensors need at least one tensor per class");
  }
  if (req.label_rule == LabelRule::PerClassKernels && n_k < classes) {
    throw ConfigError("per-class kernels need at least one kernel per class");
  }
  const DecompositionDims dims =
      req.dims ? *req.dims
               : auto_dims(req.budget, storage_layout(req.kind, n_t, n_k), req.max_u1);
  const auto& img = req.budget.image_shape;
  if (dims.u[1] != img[0] || dims.u[2] != img[1] || dims.u[3] != img[2]) {
    throw ConfigError("kernel output extents do not match the image shape");
  }
  if (dims.t[1] != img[0]) {
    throw ConfigError("mode2 extent must equal the channel count " +
                      std::to_string(img[0]));
  }

  DistillState state;
  state.label_rule = req.label_rule;
  state.num_classes = static_cast<int>(classes);
  for (std::size_t i = 0; i < n_t; ++i) {
    state.tensors.push_back(
        make_random_tensor(dims.t, static_cast<int>(i * classes / n_t), rng));
  }
  for (std::size_t j = 0; j < n_k; ++j) {
    SeparableKernel k = make_kernel_factors(req.kind, dims, rng, static_cast<int>(j));
    k.class_id = static_cast<int>(j * classes / n_k);
    state.kernels.push_back(std::move(k));
  }
  state.validate();
  return state;
}

DistillState build_pixel_state(const BudgetSpec& budget, Rng& rng,
                               const ClassImages& real) {
  budget.validate();
  const auto& img = budget.image_shape;
  const Extents4 t{budget.ipc, img[0], img[1], img[2]};
  DistillState state;
  state.num_classes = static_cast<int>(budget.num_classes);
  if (real.images || real.labels) check_real(real, budget);
  for (std::size_t c = 0; c < budget.num_classes; ++c) {
    if (real.images) {
      const auto idx = pick_class_images(real, static_cast<int>(c), budget.ipc, rng);
      state.tensors.push_back(
          {ad::Var::parameter(gather_images(*real.images, idx)), static_cast<int>(c)});
    } else {
      state.tensors.push_back(make_random_tensor(t, static_cast<int>(c), rng));
    }
  }
  state.kernels.push_back(make_identity_kernel(t));
  state.validate();
  return state;
}

}  // namespace nsd
