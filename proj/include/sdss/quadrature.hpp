#pragma once

#include <vector>

#include <boost/math/quadrature/gauss.hpp>

namespace sdss {

/// Gauss-Legendre rule mapped to (0, 1). Nodes ascending.
struct UnitRule {
  std::vector<double> nodes;
  std::vector<double> weights;
};

namespace detail {

template <unsigned N>
UnitRule make_unit_rule() {
  using G = boost::math::quadrature::gauss<double, N>;
  const auto& x = G::abscissa();  // nonnegative half, ascending from the centre
  const auto& w = G::weights();
  UnitRule r;
  r.nodes.reserve(N);
  r.weights.reserve(N);
  for (std::size_t i = x.size(); i-- > 0;) {
    if (x[i] == 0.0) continue;
    r.nodes.push_back(0.5 * (1.0 - x[i]));
    r.weights.push_back(0.5 * w[i]);
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.nodes.push_back(0.5 * (1.0 + x[i]));
    r.weights.push_back(0.5 * w[i]);
  }
  return r;
}

}  // namespace detail

/// 128-node rule used by the kernel surrogates after the probability-integral transform.
inline const UnitRule& gl128() {
  static const UnitRule r = detail::make_unit_rule<128>();
  return r;
}

/// Short rule for composite (paneled) integration.
inline const UnitRule& gl10() {
  static const UnitRule r = detail::make_unit_rule<10>();
  return r;
}

/// Composite Gauss-Legendre on [lo, hi] with unit-ish panels.
template <class F>
double integrate_panels(F&& f, double lo, double hi, int panels) {
  const auto& r = gl10();
  const double h = (hi - lo) / panels;
  double s = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double a = lo + p * h;
    for (std::size_t m = 0; m < r.nodes.size(); ++m) s += r.weights[m] * f(a + h * r.nodes[m]);
  }
  return s * h;
}

}  // namespace sdss
