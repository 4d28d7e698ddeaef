#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "mindloop/tensor.hpp"

namespace mindloop {

struct GradCheckResult {
  double max_rel_error = 0.0;  // max over inputs of max|analytic - numeric| / max(max|numeric|, 1e-8)
  std::size_t worst_input = 0;
};

// Compares backward() of the scalar `f()` against central differences for
// every leaf in `inputs`. With `max_coords`, each input is checked on that
// many coordinates drawn from `rng` instead of all of them.
GradCheckResult gradcheck(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs, double step = 1e-5,
                          std::optional<std::size_t> max_coords = std::nullopt, Rng* rng = nullptr);

}  // namespace mindloop
