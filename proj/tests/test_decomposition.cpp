#include <Eigen/SVD>
#include <algorithm>
#include <set>

#include "doctest.h"
#include "nsd/decomposition.hpp"
#include "nsd/error.hpp"
#include "test_util.hpp"

using namespace nsd;
using nsd::testing::random_array;

namespace {

SeparableKernel random_kernel(const Extents4& t, const Extents4& u, Rng& rng,
                              bool trainable = true) {
  SeparableKernel k;
  for (std::size_t m = 0; m < 4; ++m) {
    NdArray v = random_array({t[m], u[m]}, rng);
    k.factors[m] = {m, trainable ? ad::Var::parameter(v) : ad::Var::constant(v),
                    !trainable};
  }
  return k;
}

SpectrumTensor random_tensor(const Extents4& t, Rng& rng, int cls = 0) {
  return {ad::Var::parameter(random_array({t[0], t[1], t[2], t[3]}, rng)), cls};
}

DistillState make_state(std::size_t n_t, std::size_t n_k, const Extents4& t,
                        const Extents4& u, int classes, Rng& rng) {
  DistillState s;
  s.num_classes = classes;
  for (std::size_t i = 0; i < n_t; ++i) {
    s.tensors.push_back(random_tensor(t, rng, static_cast<int>(i * classes / n_t)));
  }
  for (std::size_t j = 0; j < n_k; ++j) {
    auto k = random_kernel(t, u, rng);
    k.kernel_id = static_cast<int>(j);
    k.class_id = static_cast<int>(j * classes / n_k);
    s.kernels.push_back(k);
  }
  return s;
}

// Numeric rank of a (rows, cols) matrix from its singular values.
std::size_t numeric_rank(const NdArray& m, std::size_t rows, std::size_t cols) {
  Eigen::MatrixXd a(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) a(i, j) = m[i * cols + j];
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
  const auto& s = svd.singularValues();
  std::size_t r = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > 1e-9 * std::max(1.0, s(0))) ++r;
  return r;
}

}  // namespace

TEST_CASE("synthesize_pair with identity factors returns the spectrum") {
  Rng rng(1);
  const Extents4 t{2, 3, 4, 2};
  auto tensor = random_tensor(t, rng);
  auto out = synthesize_pair(tensor, make_identity_kernel(t));
  CHECK(out.value() == tensor.values.value());
}

TEST_CASE("spatial upsampling factors match a brute-force sum") {
  Rng rng(2);
  const Extents4 t{1, 1, 2, 2};
  auto tensor = random_tensor(t, rng);
  SeparableKernel k = make_identity_kernel(t);
  const NdArray k3 = random_array({2, 3}, rng);
  const NdArray k4 = random_array({2, 3}, rng);
  k.factors[2] = {2, ad::Var::parameter(k3), false};
  k.factors[3] = {3, ad::Var::parameter(k4), false};
  auto out = synthesize_pair(tensor, k).value();
  REQUIRE(out.shape() == Shape{1, 1, 3, 3});
  const auto& tv = tensor.values.value();
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t s = 0; s < 3; ++s) {
      double expect = 0.0;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b)
          expect += tv[a * 2 + b] * k3[a * 3 + r] * k4[b * 3 + s];
      CHECK(out[r * 3 + s] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("synthesis is linear in the spectrum") {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Extents4 t{2, 2, 3, 3}, u{4, 3, 5, 5};
    auto tensor = random_tensor(t, rng);
    auto k = random_kernel(t, u, rng);
    const double alpha = 2.0 + trial;
    NdArray scaled = tensor.values.value();
    for (auto& x : scaled.data()) x *= alpha;
    auto y1 = synthesize_pair(tensor, k).value();
    auto y2 = synthesize_pair({ad::Var::parameter(scaled), 0}, k).value();
    for (auto& x : y1.data()) x *= alpha;
    CHECK(max_abs_diff(y1, y2) < 1e-6);
  }
}

TEST_CASE("synthesize_pair names the mismatched mode") {
  Rng rng(4);
  auto tensor = random_tensor({2, 1, 4, 4}, rng);
  auto k = random_kernel({2, 1, 3, 4}, {3, 1, 8, 8}, rng);
  CHECK_THROWS_WITH_AS(synthesize_pair(tensor, k),
                       doctest::Contains("mode3"), DimensionError);
}

TEST_CASE("pair_index") {
  CHECK(pair_index(1, 1, 5) == 1);
  CHECK(pair_index(2, 3, 5) == 8);
  CHECK(pair_index(7, 4, 4) == 28);
  CHECK_THROWS_AS(pair_index(0, 1, 5), RangeError);
  CHECK_THROWS_AS(pair_index(1, 6, 5), RangeError);
  CHECK_THROWS_AS(pair_index(1, 0, 5), RangeError);

  for (std::size_t nt = 1; nt <= 50; ++nt)
    for (std::size_t nk = 1; nk <= 50; ++nk) {
      std::vector<bool> seen(nt * nk + 1, false);
      bool ok = true;
      for (std::size_t i = 1; i <= nt; ++i)
        for (std::size_t j = 1; j <= nk; ++j) {
          const auto p = pair_index(i, j, nk);
          if (p < 1 || p > nt * nk || seen[p]) ok = false;
          else seen[p] = true;
        }
      REQUIRE(ok);
      CHECK(pair_index(nt, nk, nk) == nt * nk);
    }
}

TEST_CASE("synthesize_dataset counts, ordering and labels") {
  Rng rng(5);
  const Extents4 t{1, 1, 2, 2}, u{2, 1, 3, 3};
  auto state = make_state(3, 5, t, u, 3, rng);
  auto data = synthesize_dataset(state);
  CHECK(data.images.shape() == Shape{30, 1, 3, 3});
  CHECK(data.labels.size() == 30);

  // Block p (1-based pair index) holds synthesize_pair(T_i, K_j) in order.
  const std::size_t per = 2 * 9;
  for (std::size_t i = 1; i <= 3; ++i)
    for (std::size_t j = 1; j <= 5; ++j) {
      const auto p = pair_index(i, j, 5);
      auto block = synthesize_pair(state.tensors[i - 1], state.kernels[j - 1]).value();
      for (std::size_t e = 0; e < per; ++e)
        REQUIRE(data.images.value()[(p - 1) * per + e] == block[e]);
    }

  SynthesisOptions one;
  one.selection = std::vector<Pair>{{1, 2}};
  auto single = synthesize_dataset(state, one);
  CHECK(single.images.value() ==
        synthesize_pair(state.tensors[1], state.kernels[2]).value());

  SynthesisOptions none;
  none.selection = std::vector<Pair>{};
  CHECK_THROWS_AS(synthesize_dataset(state, none), RangeError);
  SynthesisOptions bad;
  bad.selection = std::vector<Pair>{{3, 0}};
  CHECK_THROWS_AS(synthesize_dataset(state, bad), RangeError);
}

TEST_CASE("per-class tensor labels ignore the kernel index") {
  Rng rng(6);
  auto state = make_state(4, 3, {1, 1, 2, 2}, {2, 1, 2, 2}, 2, rng);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(pair_label(state, {i, j}) == (i < 2 ? 0 : 1));
  auto data = synthesize_dataset(state);
  for (std::size_t n = 0; n < data.labels.size(); ++n) {
    const std::size_t pair = n / 2;  // u1 = 2
    CHECK(data.labels[n] == (pair / 3 < 2 ? 0 : 1));
  }

  state.label_rule = LabelRule::PerClassKernels;
  state.kernels[0].class_id = 1;
  CHECK(pair_label(state, {3, 0}) == 1);
  CHECK(pair_label(state, {0, 2}) == state.kernels[2].class_id);

  state.label_rule = LabelRule::PerPair;
  std::vector<int> counts(2, 0);
  for (const auto& p : all_pairs(state)) ++counts[pair_label(state, p)];
  CHECK(counts == std::vector<int>{6, 6});

  CHECK(label_rule_from_string(to_string(LabelRule::PerPair)) == LabelRule::PerPair);
  CHECK_THROWS_AS(label_rule_from_string("nope"), ConfigError);
}

TEST_CASE("parameter_count and budget_check on the worked instance") {
  Rng rng(7);
  const Extents4 t{35, 3, 16, 16}, u{64, 3, 32, 32};
  DistillState state;
  state.num_classes = 10;
  state.tensors.push_back(make_random_tensor(t, 0, rng));
  SeparableKernel k;
  for (std::size_t m = 0; m < 4; ++m)
    k.factors[m] = {m, ad::Var::parameter(random_factor_values(t[m], u[m], rng)), false};
  state.kernels.push_back(k);
  state.validate();

  const std::size_t expect = 35 * 3 * 16 * 16 + (35 * 64 + 3 * 3 + 16 * 32 + 16 * 32);
  CHECK(expect == 30153);
  CHECK(parameter_count(state) == 30153);

  BudgetSpec cifar;  // C=10, ipc=1, (3,32,32)
  CHECK(cifar.budget_scalars() == 30720);
  auto r = budget_check(state, cifar);
  CHECK(r.ok);
  CHECK(r.stored == 30153);
  CHECK(r.allowed == 30720);
  CHECK(r.utilization == doctest::Approx(30153.0 / 30720.0).epsilon(1e-12));
  CHECK(std::abs(r.utilization - 0.9815) < 1e-4);

  CHECK(budget_check(30720, cifar).ok);
  CHECK(budget_check(30720, cifar).utilization == 1.0);
  CHECK_FALSE(budget_check(30721, cifar).ok);
}

TEST_CASE("parameter_count: separable vs composed, frozen kernels") {
  Rng rng(8);
  const Extents4 t{2, 2, 2, 2}, u{3, 3, 3, 3};
  auto k = random_kernel(t, u, rng);
  std::size_t separable = 0;
  for (const auto& f : k.factors) separable += f.values.size();
  CHECK(separable == 24);
  CHECK(compose_full_kernel(k).size() == 1296);

  DistillState s;
  s.num_classes = 1;
  s.tensors.push_back(random_tensor(t, rng));
  s.kernels.push_back(random_kernel(t, u, rng, /*trainable=*/false));
  CHECK(parameter_count(s) == 16);
  s.kernels.push_back(random_kernel(t, u, rng, true));
  CHECK(parameter_count(s) == 16 + 24);
}

TEST_CASE("separable parameter count beats the composed kernel") {
  Rng rng(9);
  std::uniform_int_distribution<std::size_t> ext(1, 3);
  for (int trial = 0; trial < 200; ++trial) {
    Extents4 t{}, u{};
    bool every_mode_nontrivial = true;
    for (std::size_t m = 0; m < 4; ++m) {
      t[m] = ext(rng);
      u[m] = ext(rng);
      every_mode_nontrivial = every_mode_nontrivial && t[m] * u[m] >= 2;
    }
    if (!every_mode_nontrivial) continue;
    std::size_t sep = 0, full = 1;
    for (std::size_t m = 0; m < 4; ++m) {
      sep += t[m] * u[m];
      full *= t[m] * u[m];
    }
    StorageLayout layout{0, 1, {true, true, true, true}};
    CHECK(stored_scalars({t, u}, layout) == sep);
    CHECK(sep < full);
  }
}

TEST_CASE("with trivial modes the sum can exceed the product") {
  // One non-trivial mode: 1 + 1 + 1 + 3 > 3.
  StorageLayout layout{0, 1, {true, true, true, true}};
  CHECK(stored_scalars({{1, 1, 1, 3}, {1, 1, 1, 1}}, layout) == 6);
}

TEST_CASE("budget ok is monotone under shrinking t") {
  Rng rng(10);
  std::uniform_int_distribution<std::size_t> ext(1, 8);
  BudgetSpec b{2, 1, {1, 8, 8}, 0};
  for (int trial = 0; trial < 500; ++trial) {
    DecompositionDims d;
    for (std::size_t m = 0; m < 4; ++m) {
      d.t[m] = ext(rng);
      d.u[m] = ext(rng);
    }
    StorageLayout layout{2, 1, {true, true, true, true}};
    const bool ok = budget_check(stored_scalars(d, layout), b).ok;
    for (std::size_t m = 0; m < 4; ++m) {
      if (d.t[m] == 1) continue;
      auto smaller = d;
      --smaller.t[m];
      if (ok) CHECK(budget_check(stored_scalars(smaller, layout), b).ok);
    }
  }
}

TEST_CASE("compose_full_kernel") {
  Rng rng(11);
  SUBCASE("identity factors give the 8-mode identity") {
    const Extents4 t{2, 1, 2, 3};
    auto full = compose_full_kernel(make_identity_kernel(t));
    std::size_t idx = 0;
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t b = 0; b < 1; ++b)
        for (std::size_t c = 0; c < 2; ++c)
          for (std::size_t d = 0; d < 3; ++d)
            for (std::size_t p = 0; p < 2; ++p)
              for (std::size_t q = 0; q < 1; ++q)
                for (std::size_t r = 0; r < 2; ++r)
                  for (std::size_t s = 0; s < 3; ++s)
                    CHECK(full[idx++] == ((a == p && b == q && c == r && d == s) ? 1.0 : 0.0));
  }
  SUBCASE("separability on random extents up to 4") {
    std::uniform_int_distribution<std::size_t> ext(1, 4);
    for (int trial = 0; trial < 50; ++trial) {
      Extents4 t{}, u{};
      for (std::size_t m = 0; m < 4; ++m) {
        t[m] = ext(rng);
        u[m] = ext(rng);
      }
      auto tensor = random_tensor(t, rng);
      auto k = random_kernel(t, u, rng);
      auto chained = synthesize_pair(tensor, k).value();
      auto dense = contract_full_kernel(tensor.values.value(), compose_full_kernel(k));
      CHECK(max_abs_diff(chained, dense) < 1e-6);
    }
  }
  SUBCASE("rank of the composed matrix is bounded by the product of factor ranks") {
    for (int trial = 0; trial < 10; ++trial) {
      const Extents4 t{3, 2, 3, 2}, u{3, 3, 2, 3};
      auto k = random_kernel(t, u, rng);
      // Make mode-1 factor rank 1 so the bound is not trivially full.
      NdArray k1 = k.factors[0].values.value();
      for (std::size_t i = 1; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) k1[i * 3 + j] = (i + 1.0) * k1[j];
      k.factors[0].values = ad::Var::parameter(k1);
      std::size_t bound = 1, nt = 1, nu = 1;
      for (std::size_t m = 0; m < 4; ++m) {
        bound *= numeric_rank(k.factors[m].values.value(), t[m], u[m]);
        nt *= t[m];
        nu *= u[m];
      }
      CHECK(bound == 1 * 2 * 2 * 2);
      CHECK(numeric_rank(compose_full_kernel(k), nt, nu) <= bound);
    }
  }
  SUBCASE("oversize kernels hit the oracle cap") {
    const Extents4 t{4, 4, 4, 4};
    CHECK_THROWS_AS(compose_full_kernel(make_identity_kernel(t), 1000), OracleCapError);
  }
}

TEST_CASE("budget spec and dimension schedule") {
  BudgetSpec b{10, 1, {3, 32, 32}, 50000};
  CHECK(b.ratio_percent() == doctest::Approx(0.02));
  CHECK(scheduled_spatial_extent(1, 32) == 16);
  CHECK(scheduled_spatial_extent(10, 32) == 16);
  CHECK(scheduled_spatial_extent(50, 32) == 28);
  CHECK(scheduled_spatial_extent(11, 8) == 7);

  BudgetSpec zero = b;
  zero.ipc = 0;
  CHECK_THROWS_AS(zero.validate(), ConfigError);
}

TEST_CASE("auto_dims picks the largest feasible t1, then the largest u1") {
  SUBCASE("desk task") {
    BudgetSpec b{2, 1, {1, 8, 8}, 0};
    StorageLayout layout{2, 1, {true, true, true, true}};
    auto d = auto_dims(b, layout);
    CHECK(d.t == Extents4{1, 1, 4, 4});
    CHECK(d.u == Extents4{31, 1, 8, 8});
    CHECK(stored_scalars(d, layout) == 128);
  }
  SUBCASE("maximality on cifar-like budgets") {
    for (std::size_t ipc : {1u, 10u, 50u}) {
      BudgetSpec b{10, ipc, {3, 32, 32}, 0};
      StorageLayout layout{10, 1, {true, true, true, true}};
      auto d = auto_dims(b, layout);
      CHECK(d.t[2] == scheduled_spatial_extent(ipc, 32));
      CHECK(d.t[0] < d.u[0]);
      CHECK(budget_check(stored_scalars(d, layout), b).ok);
      auto bigger = d;
      ++bigger.t[0];
      bigger.u[0] = bigger.t[0] + 1;
      CHECK_FALSE(budget_check(stored_scalars(bigger, layout), b).ok);
      auto wider = d;
      ++wider.u[0];
      if (wider.u[0] <= 256) CHECK_FALSE(budget_check(stored_scalars(wider, layout), b).ok);
    }
  }
  SUBCASE("infeasible") {
    BudgetSpec b{2, 1, {1, 8, 8}, 0};
    StorageLayout layout{40, 1, {true, true, true, true}};
    CHECK_THROWS_AS(auto_dims(b, layout), ConfigError);
  }
}

TEST_CASE("state validation and cloning") {
  Rng rng(12);
  auto state = make_state(2, 2, {1, 1, 2, 2}, {2, 1, 3, 3}, 2, rng);
  CHECK_NOTHROW(state.validate());

  auto copy = state.clone();
  copy.tensors[0].values.assign(NdArray(Shape{1, 1, 2, 2}, 9.0));
  CHECK(state.tensors[0].values.value()[0] != 9.0);
  CHECK(copy.trainable_leaves().size() == state.trainable_leaves().size());

  auto bad = state.clone();
  bad.tensors[1] = random_tensor({1, 1, 3, 2}, rng, 1);
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("mode3"), DimensionError);

  auto noker = state.clone();
  noker.kernels.clear();
  CHECK_THROWS_AS(noker.validate(), ContractViolation);

  auto wide = state.clone();
  wide.tensors = {random_tensor({3, 1, 2, 2}, rng)};
  for (auto& k : wide.kernels)
    k.factors[0] = {0, ad::Var::parameter(random_array({3, 2}, rng)), false};
  CHECK_THROWS_AS(wide.validate(), DimensionError);
}

TEST_CASE("gradients reach trainable factors only") {
  Rng rng(13);
  const Extents4 t{1, 1, 2, 2}, u{2, 1, 3, 3};
  DistillState s;
  s.num_classes = 1;
  s.tensors.push_back(random_tensor(t, rng));
  auto k = random_kernel(t, u, rng);
  k.factors[2] = {2, ad::Var::constant(random_array({2, 3}, rng)), true};
  s.kernels.push_back(k);
  auto leaves = s.trainable_leaves();
  CHECK(leaves.size() == 4);  // spectrum + modes 1, 2, 4
  auto loss = ad::sum(ad::pow_scalar(synthesize_dataset(s).images, 2.0));
  auto grads = ad::backward(loss, leaves);
  for (const auto& g : grads) CHECK(squared_norm(g) > 0.0);
  for (const auto& leaf : leaves) CHECK(leaf.node() != k.factors[2].values.node());
}
