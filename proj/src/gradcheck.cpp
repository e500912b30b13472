#include "trfeddis/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace trfeddis::nd {
namespace {

double evaluate(const ScalarFn& f, const Tensor64& point) {
  Graph<double> g;
  auto x = g.leaf(point, false);
  return f(g, x).value().item();
}

}  // namespace

double grad_check(const ScalarFn& f, const Tensor64& point, double eps) {
  Graph<double> g;
  auto x = g.leaf(point);
  auto y = f(g, x);
  g.backward(y);
  std::vector<double> analytic(point.size(), 0.0);
  const auto gx = x.grad();
  std::copy(gx.begin(), gx.end(), analytic.begin());

  double worst = 0.0;
  Tensor64 probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + eps;
    const double up = evaluate(f, probe);
    probe[i] = point[i] - eps;
    const double down = evaluate(f, probe);
    probe[i] = point[i];
    const double central = (up - down) / (2.0 * eps);
    const double err =
        std::abs(analytic[i] - central) / (std::abs(analytic[i]) + std::abs(central) + 1e-8);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace trfeddis::nd
