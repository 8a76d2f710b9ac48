#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <utility>

#include "asrl/error.hpp"
#include "asrl/params.hpp"
#include "asrl/rng.hpp"

namespace asrl {

using LossAndGrad = std::pair<double, Gradient<double>>;
using LossFn = std::function<LossAndGrad(const ParamSet<double>&)>;

// Max over n_probes randomly chosen weights of the relative error between
// the analytic gradient and a central difference:
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)
// Each probe is evaluated at every step in `steps` and keeps its smallest
// error, so a step that straddles a ReLU kink or drowns in rounding does not
// mask agreement at a neighbouring scale.
inline double finite_diff_check(const ParamSet<double>& params, const LossFn& loss_fn, int n_probes,
                                std::uint64_t seed = 0, std::initializer_list<double> steps = {1e-4, 1e-5, 1e-6}) {
  if (n_probes < 1) throw Error("finite_diff_check: n_probes must be >= 1");
  if (steps.size() == 0) throw Error("finite_diff_check: no step sizes");
  const auto analytic = loss_fn(params).second;
  ParamSet<double> probe = params;
  Rng rng(derive_seed(seed, 0xfdc));
  double worst = 0.0;
  for (int i = 0; i < n_probes; ++i) {
    const auto idx = static_cast<std::size_t>(rng.below(params.size()));
    const double w = params.flat()[idx];
    const double a = analytic.flat()[idx];
    double best = std::numeric_limits<double>::infinity();
    for (double eps : steps) {
      probe.flat()[idx] = w + eps;
      const double up = loss_fn(probe).first;
      probe.flat()[idx] = w - eps;
      const double down = loss_fn(probe).first;
      probe.flat()[idx] = w;
      const double numeric = (up - down) / (2.0 * eps);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      best = std::min(best, std::abs(a - numeric) / denom);
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace asrl
