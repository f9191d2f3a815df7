#include "nsd/unroll.hpp"

#include <string>

#include "nsd/error.hpp"

namespace nsd::ad {

std::vector<Var> unroll_sgd(const StudentLoss& loss,
                            std::span<const NdArray> init_params,
                            std::span<const Var> batches,
                            const SgdSettings& settings) {
  if (settings.steps < 1) throw ContractViolation("unroll_sgd: steps must be >= 1");
  if (batches.size() < settings.steps) {
    throw ContractViolation("unroll_sgd: " + std::to_string(settings.steps) +
                            " steps but only " + std::to_string(batches.size()) +
                            " batches");
  }
  for (std::size_t t = 0; t < settings.steps; ++t) {
    if (!batches[t].requires_grad()) {
      throw ContractViolation("unroll_sgd: batch " + std::to_string(t) +
                              " is detached from the distillation parameters");
    }
  }

  std::vector<Var> params;
  params.reserve(init_params.size());
  for (const NdArray& p : init_params) params.push_back(Var::parameter(p));
  std::vector<Var> velocity;

  for (std::size_t t = 0; t < settings.steps; ++t) {
    Var l = loss(params, batches[t], t);
    std::vector<Var> g = grad(l, params, /*create_graph=*/true);
    if (settings.momentum != 0.0) {
      if (velocity.empty()) {
        velocity = g;
      } else {
        for (std::size_t p = 0; p < g.size(); ++p) {
          velocity[p] = add(scale(velocity[p], settings.momentum), g[p]);
        }
      }
      g = velocity;
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
      params[p] = sub(params[p], scale(g[p], settings.lr));
    }
  }
  return params;
}

UnrollGradients unrolled_sgd_gradients(const StudentLoss& loss,
                                       std::span<const NdArray> init_params,
                                       std::span<const Var> batches,
                                       const SgdSettings& settings,
                                       const OuterLoss& outer,
                                       std::span<const Var> leaves) {
  std::vector<Var> final_params = unroll_sgd(loss, init_params, batches, settings);
  Var objective = outer(final_params);
  UnrollGradients result;
  result.outer_loss = objective.value().item();
  result.grads = backward(objective, leaves);
  for (const Var& p : final_params) result.final_params.push_back(p.value());
  return result;
}

std::vector<double> finite_difference_entries(
    const std::function<double()>& loss, Var leaf, double h,
    std::span<const std::size_t> entries) {
  if (!(h > 0.0)) throw ContractViolation("finite difference step must be > 0");
  NdArray base = leaf.value();
  std::vector<double> out;
  out.reserve(entries.size());
  for (std::size_t e : entries) {
    NdArray probe = base;
    probe[e] = base[e] + h;
    leaf.assign(probe);
    const double plus = loss();
    probe[e] = base[e] - h;
    leaf.assign(probe);
    const double minus = loss();
    out.push_back((plus - minus) / (2.0 * h));
  }
  leaf.assign(base);
  return out;
}

NdArray finite_difference_oracle(const std::function<double()>& loss, Var leaf,
                                 double h) {
  std::vector<std::size_t> all(leaf.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<double> g = finite_difference_entries(loss, leaf, h, all);
  return NdArray(leaf.shape(), std::move(g));
}

}  // namespace nsd::ad
