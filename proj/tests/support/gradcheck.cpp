#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace rtdforge::testing {

GradCheckResult check_gradients(std::vector<Tensor<double>> params,
                                const std::function<Tensor<double>()>& loss, double step,
                                std::size_t max_probes, std::uint64_t probe_seed) {
  for (Tensor<double>& p : params) {
    p.mutable_grad();
    p.zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> value;
    {
      TapeScope<double> scope(tape);
      value = loss();
    }
    tape.backward(value);
  }
  std::vector<std::vector<double>> analytic;
  std::size_t total = 0;
  for (const Tensor<double>& p : params) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
    total += p.numel();
  }

  std::vector<std::pair<std::size_t, std::size_t>> probes;
  for (std::size_t a = 0; a < params.size(); ++a) {
    for (std::size_t i = 0; i < params[a].numel(); ++i) probes.emplace_back(a, i);
  }
  if (max_probes < total) {
    Rng rng(probe_seed);
    for (std::size_t k = 0; k < max_probes; ++k) {
      std::swap(probes[k], probes[k + rng.uniform_index(probes.size() - k)]);
    }
    probes.resize(max_probes);
  }

  GradCheckResult result;
  for (const auto& [a, i] : probes) {
    double& x = params[a][i];
    const double saved = x;
    x = saved + step;
    const double up = loss().item();
    x = saved - step;
    const double down = loss().item();
    x = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double exact = analytic[a][i];
    const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-6});
    const double rel = std::abs(exact - numeric) / denom;
    ++result.probes;
    if (rel > result.max_rel_error || result.worst.empty()) {
      if (rel >= result.max_rel_error) {
        result.max_rel_error = rel;
        char buf[128];
        std::snprintf(buf, sizeof buf, "param %zu[%zu]: analytic %.10g vs numeric %.10g", a, i, exact, numeric);
        result.worst = buf;
      }
    }
  }
  return result;
}

Tensor<double> random_tensor(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor<double> t(shape, requires_grad);
  for (double& v : t.data()) v = rng.normal() * stddev;
  return t;
}

}  // namespace rtdforge::testing
