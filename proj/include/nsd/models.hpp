#pragma once

// Student/teacher networks over a flat parameter vector.
//
// CONVNET: [conv3x3 -> instance norm (affine) -> relu -> avgpool 2x2] x depth,
// then flatten -> linear. MLP: [linear -> relu] x depth, then linear.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nsd/autodiff.hpp"
#include "nsd/ndarray.hpp"

namespace nsd {

enum class ModelFamily { ConvNet, Mlp };

std::string to_string(ModelFamily family);
ModelFamily model_family_from_string(const std::string& name);

struct ModelSpec {
  ModelFamily family = ModelFamily::ConvNet;
  std::size_t depth = 2;
  std::size_t width = 16;
  std::array<std::size_t, 3> input_shape{1, 8, 8};  // (C, H, W)
  std::size_t num_classes = 2;

  // Throws ConfigError on bad extents or a shape the pooling cannot halve.
  void validate() const;
  // Features entering the final linear layer.
  std::size_t classifier_inputs() const;
  bool operator==(const ModelSpec&) const = default;
};

struct LayoutEntry {
  std::string name;
  std::size_t offset = 0;
  Shape shape;
  bool operator==(const LayoutEntry&) const = default;
};

struct ParamLayout {
  std::vector<LayoutEntry> entries;
  std::size_t total = 0;
  bool operator==(const ParamLayout&) const = default;
};

ParamLayout make_layout(const ModelSpec& spec);

struct ParamVector {
  ParamLayout layout;
  std::vector<double> flat;

  // One array per layout entry, in layout order.
  std::vector<NdArray> unflatten() const;
  static ParamVector flatten(const ParamLayout& layout, std::span<const NdArray> arrays);
};

// Kaiming fan-in init (normal), instance-norm affine at (1, 0), zero biases.
ParamVector build_model(const ModelSpec& spec, std::uint64_t seed);

std::vector<ad::Var> as_parameters(const ParamVector& p);
std::vector<ad::Var> as_constants(const ParamVector& p);
ParamVector from_vars(const ParamLayout& layout, std::span<const ad::Var> vars);

// (B, C, H, W) -> (B, classifier_inputs) activations feeding the classifier.
ad::Var features(const ModelSpec& spec, std::span<const ad::Var> params,
                 const ad::Var& images);
// (B, C, H, W) -> (B, num_classes) logits.
ad::Var forward(const ModelSpec& spec, std::span<const ad::Var> params,
                const ad::Var& images);
// Mean cross-entropy; throws DataError on an out-of-range label.
ad::Var forward_loss(const ModelSpec& spec, std::span<const ad::Var> params,
                     const ad::Var& images, std::span<const int> labels);

// Instance normalization of (B, C, H, W) without affine.
ad::Var instance_norm(const ad::Var& x, double eps = 1e-5);

// Sum of squared differences; throws ContractViolation on layout mismatch.
double param_distance(const ParamVector& a, const ParamVector& b);
// Differentiable form against a fixed target.
ad::Var param_distance(std::span<const ad::Var> a, const ParamVector& b);

// Top-1 accuracy, evaluated in chunks without recording a graph.
double accuracy(const ModelSpec& spec, const ParamVector& params,
                const NdArray& images, std::span<const int> labels,
                std::size_t chunk = 256);

}  // namespace nsd
