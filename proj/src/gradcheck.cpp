#include "mindloop/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mindloop/errors.hpp"

namespace mindloop {

GradCheckResult gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double step,
                          std::optional<std::size_t> max_coords, Rng* rng) {
  if (max_coords && !rng) throw ContractError("gradcheck: sampling coordinates needs an rng");
  Tape& tape = Tape::active();
  tape.clear();
  std::vector<Tensor> leaves = inputs;
  for (auto& t : leaves) t.set_requires_grad(true);
  const Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const auto& t : leaves) analytic.emplace_back(t.grad().begin(), t.grad().end());
  tape.clear();

  GradCheckResult result;
  NoGradGuard guard;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    std::vector<std::size_t> coords(leaves[k].size());
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords && coords.size() > *max_coords) {
      std::shuffle(coords.begin(), coords.end(), *rng);
      coords.resize(*max_coords);
    }
    double max_diff = 0.0, max_numeric = 0.0;
    for (std::size_t i : coords) {
      auto v = leaves[k].values();
      const double orig = v[i];
      v[i] = orig + step;
      const double up = f().item();
      v[i] = orig - step;
      const double down = f().item();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      max_diff = std::max(max_diff, std::abs(analytic[k][i] - numeric));
      max_numeric = std::max(max_numeric, std::abs(numeric));
    }
    const double rel = max_diff / std::max(max_numeric, 1e-8);
    if (rel > result.max_rel_error) result = {rel, k};
  }
  return result;
}

}  // namespace mindloop
