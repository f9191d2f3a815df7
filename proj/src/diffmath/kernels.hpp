#pragma once

// Raw numeric kernels behind the differentiable ops. No graph bookkeeping.

#include <cstddef>
#include <tuple>

#include "nsd/ndarray.hpp"

namespace nsd::ad::kernels {

// (product of extents before axis, extent at axis, product after axis)
std::tuple<std::size_t, std::size_t, std::size_t> split_at(const Shape& shape,
                                                           std::size_t axis);

NdArray mode_product(const NdArray& t, const NdArray& k, std::size_t mode,
                     bool transpose_kernel);
NdArray mode_gram(const NdArray& a, const NdArray& b, std::size_t mode);

void check_conv(const char* op, const Shape& x, const Shape& w,
                bool input_is_grad);
NdArray conv2d(const NdArray& x, const NdArray& w);
NdArray conv2d_input_grad(const NdArray& g, const NdArray& w);
NdArray conv2d_weight_grad(const NdArray& x, const NdArray& g);

NdArray avg_pool2(const NdArray& x);
NdArray avg_unpool2(const NdArray& g);

}  // namespace nsd::ad::kernels
