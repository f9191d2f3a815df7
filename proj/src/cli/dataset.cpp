#include "nsd/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "nsd/error.hpp"
#include "nsd/rng.hpp"

namespace nsd {

std::array<std::size_t, 3> Dataset::image_shape() const {
  return {images.dim(1), images.dim(2), images.dim(3)};
}

void Dataset::validate() const {
  if (images.rank() != 4) {
    throw DataError("dataset images must be (N, C, H, W), got " +
                    shape_str(images.shape()));
  }
  if (labels.size() != images.dim(0)) {
    throw DataError("dataset has " + std::to_string(images.dim(0)) + " images and " +
                    std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw DataError("label " + std::to_string(l) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    }
  }
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out{take_rows(images, rows), {}, num_classes};
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(labels.at(r));
  return out;
}

Dataset make_blobs(const BlobSpec& spec) {
  if (spec.classes < 1 || spec.n < spec.classes || spec.channels < 1 || spec.height < 1 ||
      spec.width < 1) {
    throw ConfigError("blobs: need classes >= 1, n >= classes and positive extents");
  }
  Rng rng = make_rng(spec.seed, "blobs");
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> amp(0.7, 1.3);

  const std::size_t c = spec.channels, h = spec.height, w = spec.width;
  const double cy = 0.5 * static_cast<double>(h - 1), cx = 0.5 * static_cast<double>(w - 1);
  Dataset data{NdArray(Shape{spec.n, c, h, w}), std::vector<int>(spec.n), spec.classes};
  for (std::size_t i = 0; i < spec.n; ++i) {
    const std::size_t label = i % spec.classes;
    data.labels[i] = static_cast<int>(label);
    // Position carries no class information, so flips and shifts keep labels.
    const double sign = label % 2 == 0 ? 1.0 : -1.0;
    const double radius = spec.radius * (1.0 + 0.75 * static_cast<double>(label / 2));
    const double my = cy + spec.jitter * gauss(rng);
    const double mx = cx + spec.jitter * gauss(rng);
    const double a = sign * spec.amplitude * amp(rng);
    const double inv = 1.0 / (2.0 * radius * radius);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) - my, dx = static_cast<double>(x) - mx;
          const double v = 0.5 + a * std::exp(-(dy * dy + dx * dx) * inv) +
                           spec.noise * gauss(rng);
          data.images[((i * c + ch) * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
        }
  }
  return data;
}

void Normalization::apply(Dataset& data) const {
  const std::size_t n = data.images.dim(0), c = data.images.dim(1);
  if (mean.size() != c || std.size() != c) {
    throw DataError("normalization has " + std::to_string(mean.size()) +
                    " channels, data has " + std::to_string(c));
  }
  const std::size_t plane = data.images.dim(2) * data.images.dim(3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* p = &data.images[(i * c + ch) * plane];
      for (std::size_t k = 0; k < plane; ++k) p[k] = (p[k] - mean[ch]) / std[ch];
    }
}

Normalization fit_normalization(const Dataset& data) {
  const std::size_t n = data.images.dim(0), c = data.images.dim(1);
  const std::size_t plane = data.images.dim(2) * data.images.dim(3);
  Normalization norm{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double count = static_cast<double>(n * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = &data.images[(i * c + ch) * plane];
      for (std::size_t k = 0; k < plane; ++k) {
        s += p[k];
        s2 += p[k] * p[k];
      }
    }
    norm.mean[ch] = s / count;
    const double var = std::max(s2 / count - norm.mean[ch] * norm.mean[ch], 0.0);
    norm.std[ch] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

std::uint64_t fingerprint(const Dataset& data) {
  std::string bytes;
  for (auto e : data.images.shape()) bytes.append(reinterpret_cast<const char*>(&e), sizeof e);
  bytes.append(reinterpret_cast<const char*>(data.images.vec().data()),
               data.images.size() * sizeof(double));
  bytes.append(reinterpret_cast<const char*>(data.labels.data()),
               data.labels.size() * sizeof(int));
  return fnv1a64(bytes);
}

namespace {

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off,
                        const std::filesystem::path& path) {
  if (off + 4 > b.size()) {
    throw FormatError(path.string() + ": truncated header at byte offset " +
                      std::to_string(off));
  }
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

std::size_t infer_classes(const std::vector<int>& labels, std::size_t given) {
  if (given != 0) return given;
  int top = 0;
  for (int l : labels) top = std::max(top, l);
  return static_cast<std::size_t>(top) + 1;
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path,
                 const std::filesystem::path& labels_path, std::size_t num_classes) {
  const auto img = read_all(images_path);
  const auto lab = read_all(labels_path);
  if (const auto magic = read_be32(img, 0, images_path); magic != 0x00000803) {
    throw FormatError(images_path.string() + ": bad magic at byte offset 0");
  }
  if (const auto magic = read_be32(lab, 0, labels_path); magic != 0x00000801) {
    throw FormatError(labels_path.string() + ": bad magic at byte offset 0");
  }
  const std::size_t n = read_be32(img, 4, images_path);
  const std::size_t h = read_be32(img, 8, images_path);
  const std::size_t w = read_be32(img, 12, images_path);
  const std::size_t nl = read_be32(lab, 4, labels_path);
  if (n == 0 || h == 0 || w == 0) {
    throw FormatError(images_path.string() + ": zero extent in header at byte offset 4");
  }
  if (nl != n) {
    throw FormatError(labels_path.string() + ": count " + std::to_string(nl) +
                      " at byte offset 4 does not match " + std::to_string(n) + " images");
  }
  if (img.size() < 16 + n * h * w) {
    throw FormatError(images_path.string() + ": truncated pixel data at byte offset " +
                      std::to_string(img.size()));
  }
  if (lab.size() < 8 + n) {
    throw FormatError(labels_path.string() + ": truncated labels at byte offset " +
                      std::to_string(lab.size()));
  }
  Dataset data{NdArray(Shape{n, 1, h, w}), std::vector<int>(n), 0};
  for (std::size_t i = 0; i < n * h * w; ++i) data.images[i] = img[16 + i] / 255.0;
  for (std::size_t i = 0; i < n; ++i) data.labels[i] = lab[8 + i];
  data.num_classes = infer_classes(data.labels, num_classes);
  data.validate();
  return data;
}

Dataset load_raw(const std::filesystem::path& path, std::array<std::size_t, 3> shape,
                 std::size_t num_classes) {
  const auto bytes = read_all(path);
  const std::size_t d = shape[0] * shape[1] * shape[2];
  if (d == 0) throw ConfigError("raw dataset needs positive image extents");
  const std::size_t record = 1 + 4 * d;
  if (bytes.empty()) throw FormatError(path.string() + ": empty file at byte offset 0");
  if (bytes.size() % record != 0) {
    const std::size_t last = bytes.size() - bytes.size() % record;
    throw FormatError(path.string() + ": truncated record at byte offset " +
                      std::to_string(last));
  }
  const std::size_t n = bytes.size() / record;
  Dataset data{NdArray(Shape{n, shape[0], shape[1], shape[2]}), std::vector<int>(n), 0};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t off = i * record;
    data.labels[i] = bytes[off];
    for (std::size_t k = 0; k < d; ++k) {
      std::uint32_t u = 0;
      for (std::size_t b = 0; b < 4; ++b) {
        u |= std::uint32_t{bytes[off + 1 + 4 * k + b]} << (8 * b);
      }
      const float f = std::bit_cast<float>(u);
      if (!std::isfinite(f)) {
        throw FormatError(path.string() + ": non-finite pixel at byte offset " +
                          std::to_string(off + 1 + 4 * k));
      }
      data.images[i * d + k] = f;
    }
  }
  data.num_classes = infer_classes(data.labels, num_classes);
  data.validate();
  return data;
}

}  // namespace nsd
