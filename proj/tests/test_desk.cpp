// Desk-scale distillation property. Slow: about five 300-step runs.

#include <algorithm>

#include "doctest.h"
#include "nsd/matching.hpp"
#include "nsd/transforms.hpp"

using namespace nsd;

TEST_CASE("300 distillation steps lower the combined loss (median over 5 seeds)") {
  BlobSpec b;
  Dataset real = make_blobs(b);
  fit_normalization(real).apply(real);
  const ModelSpec spec;
  ExpertConfig ec;
  ec.epochs = 10;
  const ExpertBank bank = train_experts(real, spec, ec, 3, 17);

  std::vector<double> first, last;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    StateRequest req;
    req.budget = {2, 1, {1, 8, 8}, real.size()};
    Rng rng(stream_seed(seed, "state-init"));
    DistillState state = build_state(req, rng);
    DistillConfig cfg;
    cfg.model = spec;
    cfg.iterations = 300;
    cfg.seed = stream_seed(seed, "distill");
    const auto log = distill(state, bank, real, cfg);
    REQUIRE(log.size() == 300);
    first.push_back(log.front().combined);
    last.push_back(log.back().combined);
  }
  std::sort(first.begin(), first.end());
  std::sort(last.begin(), last.end());
  CHECK(last[2] < first[2]);
}
