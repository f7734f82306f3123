#pragma once

#include <array>
#include <vector>

#include "ksanc/metrics.hpp"

namespace ksanc::testing {

/// Three runs of ten epochs. Test errors in percent:
///   A: 50 45 40 36 33 30 28 27 26 25
///   B: 52 44 43 35 35 31 30 27 29 26
///   C: 49 47 41 38 34 29 28 29 27 25
/// Per-epoch max - min: 3 3 3 3 2 2 2 2 3 1 (percent).
inline std::vector<RunMetrics> stability_fixture_runs() {
  constexpr std::array<std::array<int, 10>, 3> errors{{
      {50, 45, 40, 36, 33, 30, 28, 27, 26, 25},
      {52, 44, 43, 35, 35, 31, 30, 27, 29, 26},
      {49, 47, 41, 38, 34, 29, 28, 29, 27, 25},
  }};
  std::vector<RunMetrics> runs;
  for (std::size_t r = 0; r < 3; ++r) {
    RunMetrics m;
    m.run_id = "fixture-seed" + std::to_string(r);
    m.seed = r;
    m.variant = "fixture";
    m.config_hash = "0000000000000000";
    for (std::size_t e = 0; e < 10; ++e) {
      EpochMetrics em;
      em.epoch = e;
      em.test_error = errors[r][e] / 100.0;
      em.train_error = errors[r][e] / 200.0;
      em.lr = 0.1;
      m.epochs.push_back(em);
    }
    runs.push_back(std::move(m));
  }
  return runs;
}

/// Hand-computed population variances of the range sequence, in units of
/// percent^2 scaled to error^2:
///   all ten epochs: mean 2.4, squared deviations sum 4.4 -> 0.44e-4
///   epochs 5..9:    ranges 2 2 2 3 1, mean 2, sum 2 -> 0.4e-4
///   last three:     ranges 2 3 1, mean 2, sum 2 -> (2/3)e-4
inline constexpr double kFixtureVarianceAll = 0.44e-4;
inline constexpr double kFixtureVarianceTail5 = 0.4e-4;
inline constexpr double kFixtureVarianceLast3 = 2.0 / 3.0 * 1e-4;

}  // namespace ksanc::testing
