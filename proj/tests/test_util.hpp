#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "instformer/core/autograd.hpp"
#include "instformer/core/rng.hpp"

namespace testutil {

// Central finite differences against the analytic tape gradient. `make_loss`
// must rebuild the graph from the parameters' current values. Returns the
// worst relative error over `coords` random coordinates of each listed
// parameter.
inline double fd_gradcheck(instformer::core::ParamMap& pm,
                           const std::function<instformer::core::Var()>& make_loss,
                           const std::vector<std::string>& names, int coords,
                           instformer::core::Rng& rng, double h = 1e-5) {
  using namespace instformer::core;
  pm.zero_grads();
  Var loss = make_loss();
  backward(loss);

  double worst = 0.0;
  for (const auto& name : names) {
    Var p = pm.get(name);
    for (int c = 0; c < coords; ++c) {
      size_t i = size_t(rng.below(int64_t(p->val.size())));
      double saved = p->val[i];
      p->val[i] = saved + h;
      double fp = make_loss()->scalar();
      p->val[i] = saved - h;
      double fm = make_loss()->scalar();
      p->val[i] = saved;
      double fd = (fp - fm) / (2.0 * h);
      double an = p->grad[i];
      double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace testutil
