#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/erf.hpp>
#include <boost/math/tools/roots.hpp>
#include <json.hpp>

#include "sdss/decision.hpp"
#include "sdss/error.hpp"
#include "sdss/quadrature.hpp"
#include "sdss/rng.hpp"

namespace sdss {

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Template functions for the product family

enum class TauFamily { Tanh, AlgebraicRatio, AbsRatio, Arctan, LogisticCdf, Custom };

/// Nondecreasing template tau with tau(-inf) = 0, tau(+inf) = C. `slope` rescales the
/// argument, so Tanh with slope 5 and C = 2 is 1 + tanh(5x).
struct Tau {
  TauFamily family = TauFamily::Tanh;
  double C = 1.0;
  double slope = 1.0;
  std::function<double(double)> custom_value;
  std::function<double(double)> custom_deriv;

  static Tau make(TauFamily f, double C = 1.0, double slope = 1.0) {
    detail::require(f != TauFamily::Custom, "Tau::make: use Tau::custom for user templates");
    detail::require(C > 0.0 && slope > 0.0, "Tau: C and slope must be positive");
    Tau t;
    t.family = f;
    t.C = C;
    t.slope = slope;
    return t;
  }
  /// The C = 2 variants, e.g. tau(x) = 1 + tanh(x).
  static Tau unnormalized(TauFamily f, double slope = 1.0) { return make(f, 2.0, slope); }
  static Tau custom(std::function<double(double)> value, std::function<double(double)> deriv, double C) {
    detail::require(C > 0.0, "Tau: C must be positive");
    detail::require(value && deriv, "Tau::custom: value and derivative are both required");
    Tau t;
    t.family = TauFamily::Custom;
    t.C = C;
    t.custom_value = std::move(value);
    t.custom_deriv = std::move(deriv);
    return t;
  }

  double operator()(double x) const {
    const double s = slope * x;
    switch (family) {
      case TauFamily::Tanh: return C * detail::sigmoid(2.0 * s);  // (1 + tanh s) / 2
      case TauFamily::LogisticCdf: return C * detail::sigmoid(s);
      case TauFamily::AlgebraicRatio: {
        const double r = std::hypot(1.0, s);
        // for s < 0 use 1 + s/r = 1 / (r (r - s)) to avoid cancellation
        return s >= 0 ? 0.5 * C * (1.0 + s / r) : 0.5 * C / (r * (r - s));
      }
      case TauFamily::AbsRatio: return s >= 0 ? 0.5 * C * (1.0 + s / (1.0 + s)) : 0.5 * C / (1.0 - s);
      case TauFamily::Arctan: {
        const double u = 0.5 * std::numbers::pi * s;
        if (u >= 0) return 0.5 * C * (1.0 + 2.0 / std::numbers::pi * std::atan(u));
        return C / std::numbers::pi * std::atan(-1.0 / u);
      }
      case TauFamily::Custom: return custom_value(x);
    }
    return 0.0;
  }

  double deriv(double x) const {
    const double s = slope * x;
    switch (family) {
      case TauFamily::Tanh: {
        const double q = detail::sigmoid(2.0 * s);
        return 2.0 * C * slope * q * (1.0 - q);
      }
      case TauFamily::LogisticCdf: {
        const double q = detail::sigmoid(s);
        return C * slope * q * detail::sigmoid(-s);
      }
      case TauFamily::AlgebraicRatio: {
        const double r = std::hypot(1.0, s);
        return 0.5 * C * slope / (r * r * r);
      }
      case TauFamily::AbsRatio: {
        const double d = 1.0 + std::abs(s);
        return 0.5 * C * slope / (d * d);
      }
      case TauFamily::Arctan: {
        const double u = 0.5 * std::numbers::pi * s;
        return 0.5 * C * slope / (1.0 + u * u);
      }
      case TauFamily::Custom: return custom_deriv(x);
    }
    return 0.0;
  }
};

// ---------------------------------------------------------------------------
// Kernels for the kernel (smoothed pred) family

enum class KernelFamily { Logistic, Gumbel, Gaussian, Custom };

struct Kernel {
  KernelFamily family = KernelFamily::Gumbel;
  std::function<double(double)> custom_pdf;
  std::function<double(double)> custom_cdf;

  static Kernel make(KernelFamily f) {
    detail::require(f != KernelFamily::Custom, "Kernel::make: use Kernel::custom for user densities");
    Kernel k;
    k.family = f;
    return k;
  }
  static Kernel custom(std::function<double(double)> pdf, std::function<double(double)> cdf) {
    detail::require(pdf && cdf, "Kernel::custom: density and cdf are both required");
    Kernel k;
    k.family = KernelFamily::Custom;
    k.custom_pdf = std::move(pdf);
    k.custom_cdf = std::move(cdf);
    return k;
  }

  double pdf(double z) const {
    switch (family) {
      case KernelFamily::Logistic: return detail::sigmoid(z) * detail::sigmoid(-z);
      case KernelFamily::Gumbel: {
        const double e = std::exp(-z);
        return std::isinf(e) ? 0.0 : e * std::exp(-e);
      }
      case KernelFamily::Gaussian: return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
      case KernelFamily::Custom: return custom_pdf(z);
    }
    return 0.0;
  }

  /// Survival function 1 - F(z), computed without cancellation in the upper tail.
  double sf(double z) const {
    switch (family) {
      case KernelFamily::Logistic: return detail::sigmoid(-z);
      case KernelFamily::Gumbel: return -std::expm1(-std::exp(-z));
      case KernelFamily::Gaussian: return 0.5 * std::erfc(z / std::sqrt(2.0));
      case KernelFamily::Custom: return 1.0 - custom_cdf(z);
    }
    return 0.0;
  }

  double quantile(double u) const {
    switch (family) {
      case KernelFamily::Logistic: return std::log(u / (1.0 - u));
      case KernelFamily::Gumbel: return -std::log(-std::log(u));
      case KernelFamily::Gaussian: return std::sqrt(2.0) * boost::math::erf_inv(2.0 * u - 1.0);
      case KernelFamily::Custom: {
        double lo = -1.0, hi = 1.0;
        while (custom_cdf(lo) > u) lo *= 2.0;
        while (custom_cdf(hi) < u) hi *= 2.0;
        boost::uintmax_t iters = 200;
        auto r = boost::math::tools::toms748_solve([&](double z) { return custom_cdf(z) - u; }, lo, hi,
                                                  boost::math::tools::eps_tolerance<double>(52), iters);
        return 0.5 * (r.first + r.second);
      }
    }
    return 0.0;
  }
};

namespace detail {

/// Kernel surrogate at k = 3 with the max-Gumbel kernel: margins (a, b) of the chosen arm.
/// Rewritten in overflow-safe sigmoid form.
inline double gumbel_eta(double a, double b, double* da, double* db) {
  const double m = std::max({0.0, a, b});
  const double s = std::exp(-m) + std::exp(a - m) + std::exp(b - m);
  const double val = sigmoid(a) * sigmoid(b) - sigmoid(-a) * sigmoid(-b) + std::exp(-m) / s;
  if (da) *da = sigmoid(a) * sigmoid(-a) - std::exp(a - 2 * m) / (s * s);
  if (db) *db = sigmoid(b) * sigmoid(-b) - std::exp(b - 2 * m) / (s * s);
  return val;
}

template <class T>
T logistic_eta_raw(T a, T b) {
  using std::exp;
  const T ea = exp(a), eb = exp(b);
  const T one(1.0);
  const T num = exp(a + b) * (a * (eb - one) * (eb - one) + (ea - one) * (-ea * b + (eb - one) * (ea - eb) + b));
  return num / ((ea - one) * (ea - one) * (eb - one) * (eb - one) * (ea - eb));
}

// Closed form is used where it is well conditioned; near the removable singularities
// (a = 0, b = 0, a = b) and for very large margins a paneled quadrature takes over.
inline constexpr double kLogisticSingularBand = 0.05;
inline constexpr double kLogisticMaxMargin = 150.0;

inline bool logistic_closed_form_ok(double a, double b) {
  const double near = std::min({std::abs(a), std::abs(b), std::abs(a - b)});
  return near >= kLogisticSingularBand && std::max(std::abs(a), std::abs(b)) <= kLogisticMaxMargin;
}

inline double logistic_eta_quad(double a, double b, double* da, double* db) {
  auto S = [](double z) { return sigmoid(-z); };
  auto K = [](double z) { return sigmoid(z) * sigmoid(-z); };
  const double lo = -40.0, hi = 40.0;
  const int panels = 80;
  const double v = integrate_panels([&](double z) { return K(z) * S(z - a) * S(z - b); }, lo, hi, panels);
  if (da) *da = integrate_panels([&](double z) { return K(z) * K(z - a) * S(z - b); }, lo, hi, panels);
  if (db) *db = integrate_panels([&](double z) { return K(z) * S(z - a) * K(z - b); }, lo, hi, panels);
  return v;
}

inline double logistic_eta(double a, double b, double* da, double* db) {
  if (!logistic_closed_form_ok(a, b)) return logistic_eta_quad(a, b, da, db);
  // complex-step derivatives: exact to rounding, no subtractive cancellation
  constexpr double h = 1e-30;
  using C = std::complex<double>;
  if (da) *da = logistic_eta_raw(C(a, h), C(b, 0.0)).imag() / h;
  if (db) *db = logistic_eta_raw(C(a, 0.0), C(b, h)).imag() / h;
  return logistic_eta_raw(a, b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Surrogate specification

enum class SurrogateFamily { Product, Kernel };

/// Single-stage surrogate phi(x; j). Both families depend on x only through the margins
/// m_i = x_j - x_i (i != j), which is what makes them relative-margin based.
class Surrogate {
 public:
  Surrogate() = default;

  static Surrogate product(Tau tau) {
    Surrogate s;
    s.family_ = SurrogateFamily::Product;
    s.C_ = tau.C;
    s.tau_ = std::move(tau);
    return s;
  }

  static Surrogate kernel(Kernel kernel, double C = 1.0, bool use_closed_form = true) {
    detail::require(C > 0.0, "Surrogate::kernel: C must be positive");
    Surrogate s;
    s.family_ = SurrogateFamily::Kernel;
    s.C_ = C;
    s.kernel_ = std::move(kernel);
    s.use_closed_form_ = use_closed_form;
    const auto& rule = gl128();
    s.qnodes_.resize(rule.nodes.size());
    for (std::size_t m = 0; m < rule.nodes.size(); ++m) s.qnodes_[m] = s.kernel_.quantile(rule.nodes[m]);
    return s;
  }

  SurrogateFamily family() const { return family_; }
  double C() const { return C_; }
  const Tau& tau() const { return tau_; }
  const Kernel& kernel_spec() const { return kernel_; }

  bool has_closed_form(int k) const {
    return family_ == SurrogateFamily::Kernel && use_closed_form_ && k == 3 &&
           (kernel_.family == KernelFamily::Logistic || kernel_.family == KernelFamily::Gumbel);
  }

  /// sup_x Psi(x; p) / max(p).
  double c_phi(int k) const { return family_ == SurrogateFamily::Product ? std::pow(C_, k - 1) : C_; }

  /// Lower bound on phi(x; pred(x)).
  double j_bound(int k) const {
    return family_ == SurrogateFamily::Product ? std::pow(0.5 * C_, k - 1) : C_ / k;
  }

  /// Value at margins m (length k-1); if `dm` is non-empty it receives d value / d m.
  double eval_margins(std::span<const double> m, std::span<double> dm) const {
    const std::size_t n = m.size();
    detail::require(n >= 1, "Surrogate: need k >= 2");
    detail::require(dm.empty() || dm.size() == n, "Surrogate: gradient buffer has wrong size");
    if (family_ == SurrogateFamily::Product) return eval_product(m, dm);
    if (has_closed_form(static_cast<int>(n) + 1)) {
      double da = 0, db = 0;
      const bool g = !dm.empty();
      const double v = kernel_.family == KernelFamily::Gumbel
                           ? detail::gumbel_eta(m[0], m[1], g ? &da : nullptr, g ? &db : nullptr)
                           : detail::logistic_eta(m[0], m[1], g ? &da : nullptr, g ? &db : nullptr);
      if (g) {
        dm[0] = C_ * da;
        dm[1] = C_ * db;
      }
      return C_ * v;
    }
    return eval_kernel_quad(m, dm);
  }

  /// phi(x; j) with 1-based j.
  double phi(std::span<const double> x, int j) const {
    detail::require(x.size() >= 2, "phi: need k >= 2");
    detail::require(j >= 1 && j <= static_cast<int>(x.size()), "phi: treatment index out of range");
    std::vector<double> m;
    m.reserve(x.size() - 1);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (static_cast<int>(i) != j - 1) m.push_back(x[j - 1] - x[i]);
    return eval_margins(m, {});
  }

  /// Gamma(g; a) = phi(trans(g); a). Writes dGamma/dg into `grad` when non-empty.
  double gamma(std::span<const double> g, int a, std::span<double> grad) const {
    const std::size_t km1 = g.size();
    detail::require(km1 >= 1, "gamma: relative scores must have length k-1 >= 1");
    detail::require(a >= 1 && a <= static_cast<int>(km1) + 1, "gamma: treatment index out of range");
    detail::require(grad.empty() || grad.size() == km1, "gamma: gradient buffer has wrong size");
    // x = (0, -g_1, ..., -g_{k-1}); margins of arm a against every other arm
    double m_buf[16], dm_buf[16];
    std::vector<double> m_heap, dm_heap;
    double* m = m_buf;
    double* dm = dm_buf;
    if (km1 > 16) {
      m_heap.resize(km1);
      dm_heap.resize(km1);
      m = m_heap.data();
      dm = dm_heap.data();
    }
    if (a == 1) {
      for (std::size_t i = 0; i < km1; ++i) m[i] = g[i];
    } else {
      const double xa = -g[a - 2];
      std::size_t c = 0;
      m[c++] = xa;  // against arm 1 (score 0)
      for (std::size_t i = 0; i < km1; ++i)
        if (static_cast<int>(i) != a - 2) m[c++] = xa + g[i];
    }
    const bool want = !grad.empty();
    const double v = eval_margins({m, km1}, want ? std::span<double>(dm, km1) : std::span<double>{});
    if (want) {
      if (a == 1) {
        for (std::size_t i = 0; i < km1; ++i) grad[i] = dm[i];
      } else {
        std::fill(grad.begin(), grad.end(), 0.0);
        // d m_0 / d g_{a-1} = -1; d m_c / d g_{a-1} = -1, d m_c / d g_i = +1
        std::size_t c = 0;
        grad[a - 2] -= dm[c++];
        for (std::size_t i = 0; i < km1; ++i) {
          if (static_cast<int>(i) == a - 2) continue;
          grad[a - 2] -= dm[c];
          grad[i] += dm[c];
          ++c;
        }
      }
    }
    return v;
  }

  std::string describe() const {
    static const char* taus[] = {"tanh", "algebraic-ratio", "abs-ratio", "arctan", "logistic-cdf", "custom"};
    static const char* kernels[] = {"logistic", "gumbel", "gaussian", "custom"};
    if (family_ == SurrogateFamily::Product)
      return std::string("product(") + taus[static_cast<int>(tau_.family)] + ", C=" + std::to_string(C_) +
             ", slope=" + std::to_string(tau_.slope) + ")";
    return std::string("kernel(") + kernels[static_cast<int>(kernel_.family)] + ", C=" + std::to_string(C_) + ")";
  }

 private:
  double eval_product(std::span<const double> m, std::span<double> dm) const {
    const std::size_t n = m.size();
    if (dm.empty()) {
      double v = 1.0;
      for (double mi : m) v *= tau_(mi);
      return v;
    }
    // prefix/suffix products keep the gradient right when a factor is exactly zero
    double t_buf[16], pre_buf[17];
    std::vector<double> t_heap, pre_heap;
    double* t = t_buf;
    double* pre = pre_buf;
    if (n > 16) {
      t_heap.resize(n);
      pre_heap.resize(n + 1);
      t = t_heap.data();
      pre = pre_heap.data();
    }
    pre[0] = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = tau_(m[i]);
      pre[i + 1] = pre[i] * t[i];
    }
    double suf = 1.0;
    for (std::size_t i = n; i-- > 0;) {
      dm[i] = pre[i] * suf * tau_.deriv(m[i]);
      suf *= t[i];
    }
    return pre[n];
  }

  double eval_kernel_quad(std::span<const double> m, std::span<double> dm) const {
    const auto& w = gl128().weights;
    const std::size_t n = m.size();
    double v = 0.0;
    if (!dm.empty()) std::fill(dm.begin(), dm.end(), 0.0);
    std::vector<double> s(n), pre(n + 1);
    for (std::size_t q = 0; q < qnodes_.size(); ++q) {
      const double z = qnodes_[q];
      pre[0] = 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = kernel_.sf(z - m[i]);
        pre[i + 1] = pre[i] * s[i];
      }
      v += w[q] * pre[n];
      if (!dm.empty()) {
        double suf = 1.0;
        for (std::size_t i = n; i-- > 0;) {
          dm[i] += w[q] * pre[i] * suf * kernel_.pdf(z - m[i]);
          suf *= s[i];
        }
      }
    }
    if (!dm.empty())
      for (auto& d : dm) d *= C_;
    return C_ * v;
  }

  SurrogateFamily family_ = SurrogateFamily::Product;
  double C_ = 1.0;
  Tau tau_;
  Kernel kernel_;
  bool use_closed_form_ = true;
  std::vector<double> qnodes_;
};

// ---------------------------------------------------------------------------
// Psi / Psi* and the condition audits

/// A raw single-stage loss phi(x; j), j 1-based. Lets the audits run on losses that are
/// not Surrogate instances (the 0-1 loss, shifted surrogates, ...).
using LossFn = std::function<double(std::span<const double> x, int j)>;

inline LossFn as_loss(const Surrogate& s) {
  return [s](std::span<const double> x, int j) { return s.phi(x, j); };
}

/// The discontinuous target loss 1[j = pred(x)].
inline LossFn zero_one_loss() {
  return [](std::span<const double> x, int j) { return pred(x) == j ? 1.0 : 0.0; };
}

inline double psi(const LossFn& phi, std::span<const double> x, std::span<const double> p) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] != 0.0) s += p[i] * phi(x, static_cast<int>(i) + 1);
  return s;
}

struct GridConfig {
  double range = 30.0;  // free coordinates live in [-range, range]
  int points = 0;       // per free coordinate (odd); 0 picks by dimension
  int rounds = 3;       // refinement rounds after the coarse pass

  int resolved_points(int k) const {
    if (points > 0) return points | 1;
    switch (k) {
      case 2: return 241;
      case 3: return 61;
      case 4: return 21;
      default: return 9;
    }
  }
};

struct PsiStarResult {
  double value = -std::numeric_limits<double>::infinity();
  std::vector<double> argsup;  // x with x_1 = 0
  bool found = false;          // false if the region filter rejected every grid point
};

/// sup_x Psi(x; p) over a translation-reduced grid (x_1 pinned to 0), refined around the
/// incumbent. Every refinement grid contains the incumbent, so the result never
/// decreases with more rounds. An optional predicate restricts the search region.
inline PsiStarResult psi_star(const LossFn& phi, std::span<const double> p, const GridConfig& cfg = {},
                              const std::function<bool(std::span<const double>)>& region = {}) {
  const int k = static_cast<int>(p.size());
  detail::require(k >= 2, "psi_star: need k >= 2");
  for (double v : p) detail::require(v >= 0.0, "psi_star: p must be nonnegative");
  const int pts = cfg.resolved_points(k);
  const int dims = k - 1;
  PsiStarResult best;
  std::vector<double> x(k, 0.0);
  std::vector<double> centre(dims, 0.0);
  double half = cfg.range;
  std::vector<int> idx(dims);
  for (int round = 0; round <= cfg.rounds; ++round) {
    const double step = 2.0 * half / (pts - 1);
    std::fill(idx.begin(), idx.end(), 0);
    while (true) {
      bool inside = true;
      for (int d = 0; d < dims; ++d) {
        x[d + 1] = centre[d] - half + step * idx[d];
        if (x[d + 1] < -cfg.range - 1e-12 || x[d + 1] > cfg.range + 1e-12) inside = false;
      }
      if (inside && (!region || region(x))) {
        const double v = psi(phi, x, p);
        if (v > best.value) {
          best.value = v;
          best.argsup = x;
          best.found = true;
        }
      }
      int d = 0;
      while (d < dims && ++idx[d] == pts) idx[d++] = 0;
      if (d == dims) break;
    }
    if (!best.found) break;
    for (int d = 0; d < dims; ++d) centre[d] = best.argsup[d + 1];
    half = 2.0 * step;  // neighbourhood of two coarse cells around the incumbent
  }
  if (!best.found) best.value = 0.0;
  return best;
}

inline double psi_star_value(const LossFn& phi, std::span<const double> p, const GridConfig& cfg = {}) {
  return psi_star(phi, p, cfg).value;
}

struct AuditOptions {
  int p_samples = 200;
  int x_samples = 2000;
  double tol = 1e-3;
  std::uint64_t seed = 1;
  GridConfig grid;
  std::optional<double> c_phi;     // reference constant; estimated from Psi*(e_1) when absent
  std::optional<double> j_theory;  // lower bound to compare the empirical J against
  bool check_symmetry = false;     // sum_j phi(x; j) = C_phi (kernel family)
  double n3_min_gap = 0.05;        // N3 only uses x whose top-two gap is at least this
};

struct ConditionReport {
  int k = 0;
  double c_phi = 0.0;
  double c_phi_estimate = 0.0;
  double n1_min_margin = std::numeric_limits<double>::infinity();
  double n2_max_abs_dev = 0.0;
  std::vector<double> n3_scales{10.0, 100.0, 1000.0};
  std::vector<double> n3_dev;  // worst deviation at each scale
  double j_empirical = std::numeric_limits<double>::infinity();
  double j_theory = std::numeric_limits<double>::quiet_NaN();
  double symmetry_dev = std::numeric_limits<double>::quiet_NaN();
  int p_samples = 0;
  int x_samples = 0;
  int n1_samples = 0;
  int n3_samples = 0;
  double tol = 0.0;

  bool pass_n1() const { return n1_samples == 0 || n1_min_margin > 0.0; }
  bool pass_n2() const { return n2_max_abs_dev < tol; }
  bool pass_n3() const { return n3_dev.empty() || n3_dev.back() < std::max(tol, 1e-2); }
  bool pass_j() const { return std::isnan(j_theory) || j_empirical >= j_theory - 1e-9; }
  bool pass_symmetry() const { return std::isnan(symmetry_dev) || symmetry_dev < tol; }
  bool pass() const { return pass_n1() && pass_n2() && pass_n3() && pass_j() && pass_symmetry(); }
};

inline nlohmann::json to_json(const ConditionReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["k"] = r.k;
  j["c_phi"] = num(r.c_phi);
  j["c_phi_estimate"] = num(r.c_phi_estimate);
  j["n1_min_margin"] = num(r.n1_min_margin);
  j["n2_max_abs_dev"] = num(r.n2_max_abs_dev);
  j["n3_scales"] = r.n3_scales;
  j["n3_dev"] = nlohmann::json::array();
  for (double v : r.n3_dev) j["n3_dev"].push_back(num(v));
  j["j_empirical"] = num(r.j_empirical);
  j["j_theory"] = num(r.j_theory);
  j["symmetry_dev"] = num(r.symmetry_dev);
  j["samples"] = {{"p", r.p_samples}, {"x", r.x_samples}, {"n1", r.n1_samples}, {"n3", r.n3_samples}};
  j["tol"] = r.tol;
  j["pass"] = {{"n1", r.pass_n1()},      {"n2", r.pass_n2()},
               {"n3", r.pass_n3()},      {"j", r.pass_j()},
               {"symmetry", r.pass_symmetry()}, {"all", r.pass()}};
  return j;
}

inline ConditionReport audit_conditions(const LossFn& phi, int k, const AuditOptions& opt) {
  detail::require(k >= 2, "audit_conditions: need k >= 2");
  detail::require(opt.p_samples >= 1 && opt.x_samples >= 1, "audit_conditions: sample counts must be >= 1");
  ConditionReport rep;
  rep.k = k;
  rep.tol = opt.tol;
  rep.p_samples = opt.p_samples;
  rep.x_samples = opt.x_samples;
  Rng rng = make_rng(opt.seed);

  {
    std::vector<double> e1(k, 0.0);
    e1[0] = 1.0;
    rep.c_phi_estimate = psi_star_value(phi, e1, opt.grid);
  }
  rep.c_phi = opt.c_phi.value_or(rep.c_phi_estimate);
  if (opt.j_theory) rep.j_theory = *opt.j_theory;

  // N1 / N2 over random weight vectors: simplex direction times a random radius
  std::exponential_distribution<double> expo(1.0);
  std::uniform_real_distribution<double> radius(0.1, 10.0);
  std::vector<double> p(k);
  for (int s = 0; s < opt.p_samples; ++s) {
    double tot = 0.0;
    for (auto& v : p) tot += (v = expo(rng));
    const double r = radius(rng);
    for (auto& v : p) v *= r / tot;
    const auto top = psi_star(phi, p, opt.grid);
    const double pmax = *std::max_element(p.begin(), p.end());
    rep.n2_max_abs_dev = std::max(rep.n2_max_abs_dev, std::abs(top.value - rep.c_phi * pmax));

    const int best = pred(p);
    int ties = 0;
    for (double v : p) ties += (v == pmax);
    if (ties != 1) continue;
    auto outside = [best](std::span<const double> x) { return pred(x) != best; };
    const auto other = psi_star(phi, p, opt.grid, outside);
    if (other.found) {
      rep.n1_min_margin = std::min(rep.n1_min_margin, top.value - other.value);
      ++rep.n1_samples;
    }
  }

  // J, symmetry and N3 over heavy-tailed score vectors with deliberate ties
  std::student_t_distribution<double> heavy(1.5);
  std::bernoulli_distribution make_tie(0.25);
  std::uniform_int_distribution<int> pick(0, k - 1);
  std::vector<double> x(k), bx(k);
  rep.n3_dev.assign(rep.n3_scales.size(), 0.0);
  double sym = 0.0;
  for (int s = 0; s < opt.x_samples; ++s) {
    if (s == 0) {
      std::fill(x.begin(), x.end(), 0.0);
    } else {
      for (auto& v : x) v = heavy(rng);
      if (make_tie(rng)) x[pick(rng)] = x[pick(rng)];
    }
    rep.j_empirical = std::min(rep.j_empirical, phi(x, pred(x)));
    if (opt.check_symmetry) {
      double tot = 0.0;
      for (int j = 1; j <= k; ++j) tot += phi(x, j);
      sym = std::max(sym, std::abs(tot - rep.c_phi));
    }
    std::vector<double> sorted(x);
    std::sort(sorted.begin(), sorted.end());
    if (sorted[k - 1] - sorted[k - 2] < opt.n3_min_gap) continue;
    ++rep.n3_samples;
    const int top = pred(x);
    for (std::size_t b = 0; b < rep.n3_scales.size(); ++b) {
      for (int i = 0; i < k; ++i) bx[i] = rep.n3_scales[b] * x[i];
      for (int j = 1; j <= k; ++j) {
        const double target = j == top ? rep.c_phi : 0.0;
        rep.n3_dev[b] = std::max(rep.n3_dev[b], std::abs(phi(bx, j) - target));
      }
    }
  }
  if (opt.check_symmetry) rep.symmetry_dev = sym;
  return rep;
}

inline ConditionReport audit_conditions(const Surrogate& s, int k, AuditOptions opt) {
  if (!opt.c_phi) opt.c_phi = s.c_phi(k);
  if (!opt.j_theory) opt.j_theory = s.j_bound(k);
  opt.check_symmetry = opt.check_symmetry || s.family() == SurrogateFamily::Kernel;
  return audit_conditions(as_loss(s), k, opt);
}

}  // namespace sdss
