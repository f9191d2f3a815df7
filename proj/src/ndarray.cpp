#include "nsd/ndarray.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nsd/error.hpp"

namespace nsd {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

static void check_extents(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("zero extent in shape " + shape_str(shape));
  }
}

NdArray::NdArray(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  check_extents(shape_);
}

NdArray::NdArray(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_size(shape_)) {
    throw DimensionError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

std::size_t NdArray::offset(std::initializer_list<std::size_t> index) const {
  if (index.size() != shape_.size()) {
    throw DimensionError("index rank mismatch for shape " + shape_str(shape_));
  }
  std::size_t off = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape_[axis]) throw RangeError("index out of range");
    off = off * shape_[axis] + i;
    ++axis;
  }
  return off;
}

double& NdArray::at(std::initializer_list<std::size_t> index) {
  return data_[offset(index)];
}

double NdArray::at(std::initializer_list<std::size_t> index) const {
  return data_[offset(index)];
}

NdArray NdArray::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_str(shape_) + " to " +
                         shape_str(shape));
  }
  return NdArray(std::move(shape), data_);
}

double NdArray::item() const {
  if (data_.size() != 1) {
    throw ContractViolation("item() on non-scalar array " + shape_str(shape_));
  }
  return data_[0];
}

double max_abs_diff(const NdArray& a, const NdArray& b) {
  if (a.size() != b.size()) {
    throw DimensionError("max_abs_diff size mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

double sum(const NdArray& a) {
  return std::accumulate(a.vec().begin(), a.vec().end(), 0.0);
}

double squared_norm(const NdArray& a) {
  double s = 0.0;
  for (double v : a.vec()) s += v * v;
  return s;
}

NdArray take_rows(const NdArray& a, std::span<const std::size_t> rows) {
  if (a.rank() == 0) throw DimensionError("take_rows on a scalar");
  const std::size_t per = a.size() / a.dim(0);
  Shape s = a.shape();
  s[0] = rows.size();
  std::vector<double> out(rows.size() * per);
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= a.dim(0)) {
      throw RangeError("take_rows: row " + std::to_string(rows[k]) + " of " +
                       std::to_string(a.dim(0)));
    }
    std::copy_n(a.vec().begin() + static_cast<std::ptrdiff_t>(rows[k] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return NdArray(std::move(s), std::move(out));
}

}  // namespace nsd
