#pragma once

// Polynomial approximation toolkit: least-squares and minimax (Remez
// exchange) fitting in the Chebyshev basis, the clipping references, and
// low-depth evaluation over packed ciphertexts. A degree-d evaluation
// consumes ceil(log2(d+1)) levels: the interval scaling and every
// coefficient are folded into the shallowest factor of their power chain,
// so no extra plaintext multiplication ever sits on the critical path.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "slotsim/packing.hpp"

namespace slotsim {

using RealFn = std::function<double(double)>;

// ---------------------------------------------------------------------------
// reference functions (evaluated in extended precision)

inline double softplus_ref(double x) {
  const long double t = x;
  if (t > 0) return static_cast<double>(t + std::log1p(std::exp(-t)));
  return static_cast<double>(std::log1p(std::exp(t)));
}

inline double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-static_cast<long double>(x))); }

inline double tanh_ref(double x) { return std::tanh(x); }

inline double clip_reference(double x, double m) {
  if (x <= -m) return -m;
  if (x >= m) return m;
  return x;
}

inline double tanh_clip(double x, double m) { return m * std::tanh(x / m); }

inline double soft_clip(double x, double m) {
  return x + softplus_ref(-(x + m)) - softplus_ref(x - m);
}

enum class ClipVariant { hard, tanh, soft };

struct ClipSpec {
  double threshold = 5.0;
  ClipVariant variant = ClipVariant::soft;

  void validate() const {
    if (threshold <= 0) throw argument_error("clip threshold must be positive");
  }
  RealFn target() const {
    validate();
    const double m = threshold;
    switch (variant) {
      case ClipVariant::hard: return [m](double x) { return clip_reference(x, m); };
      case ClipVariant::tanh: return [m](double x) { return tanh_clip(x, m); };
      case ClipVariant::soft: return [m](double x) { return soft_clip(x, m); };
    }
    return {};
  }
};

// ---------------------------------------------------------------------------
// Chebyshev helpers

namespace detail {

inline int ceil_log2(long n) {
  int k = 0;
  while ((1L << k) < n) ++k;
  return k;
}

// Clenshaw evaluation of a Chebyshev series on [a, b].
inline double clenshaw(const std::vector<double>& c, double a, double b, double x) {
  const double u = (2.0 * x - (a + b)) / (b - a);
  double b1 = 0.0, b2 = 0.0;
  for (std::size_t k = c.size(); k-- > 1;) {
    const double tmp = 2.0 * u * b1 - b2 + c[k];
    b2 = b1;
    b1 = tmp;
  }
  return u * b1 - b2 + c[0];
}

// T_k(u) rows for a set of sample points.
inline Eigen::MatrixXd cheb_vandermonde(const std::vector<double>& xs, int degree, double a,
                                        double b) {
  Eigen::MatrixXd V(xs.size(), degree + 1);
  for (std::size_t r = 0; r < xs.size(); ++r) {
    const double u = (2.0 * xs[r] - (a + b)) / (b - a);
    V(r, 0) = 1.0;
    if (degree >= 1) V(r, 1) = u;
    for (int k = 2; k <= degree; ++k) V(r, k) = 2.0 * u * V(r, k - 1) - V(r, k - 2);
  }
  return V;
}

}  // namespace detail

enum class FitMethod { least_squares, minimax };

struct FitReport {
  double max_abs_error = 0.0;   // vs the fit target, dense grid
  double mean_abs_error = 0.0;  // vs the fit target, dense grid
  int iterations = 0;
  bool converged = true;
};

struct PolyApprox {
  std::vector<double> cheb;  // Chebyshev coefficients on [a, b]
  double a = -1.0, b = 1.0;
  FitMethod method = FitMethod::minimax;
  std::string target;  // function tag, e.g. "tanh" or "softclip(m=5)"
  FitReport report;

  int degree() const { return static_cast<int>(cheb.size()) - 1; }
  int eval_depth() const { return degree() == 0 ? 0 : detail::ceil_log2(degree() + 1); }

  double operator()(double x) const { return detail::clenshaw(cheb, a, b, x); }

  // Coefficients of the same polynomial in powers of the raw variable.
  std::vector<double> monomial() const {
    const int d = degree();
    // T_k as monomials in u
    std::vector<std::vector<double>> T(d + 1);
    T[0] = {1.0};
    if (d >= 1) T[1] = {0.0, 1.0};
    for (int k = 2; k <= d; ++k) {
      T[k].assign(k + 1, 0.0);
      for (int j = 0; j < k; ++j) T[k][j + 1] += 2.0 * T[k - 1][j];
      for (std::size_t j = 0; j < T[k - 2].size(); ++j) T[k][j] -= T[k - 2][j];
    }
    std::vector<double> in_u(d + 1, 0.0);
    for (int k = 0; k <= d; ++k)
      for (std::size_t j = 0; j < T[k].size(); ++j) in_u[j] += cheb[k] * T[k][j];
    // substitute u = alpha*x + beta
    const double alpha = 2.0 / (b - a), beta = -(a + b) / (b - a);
    std::vector<double> out{0.0};
    for (int j = d; j >= 0; --j) {
      // out = out*(alpha x + beta) + in_u[j]
      std::vector<double> nxt(out.size() + 1, 0.0);
      for (std::size_t t = 0; t < out.size(); ++t) {
        nxt[t] += out[t] * beta;
        nxt[t + 1] += out[t] * alpha;
      }
      nxt[0] += in_u[j];
      while (nxt.size() > std::size_t(d + 1)) nxt.pop_back();
      out = std::move(nxt);
    }
    out.resize(d + 1, 0.0);
    return out;
  }

  double mean_abs_error_vs(const RealFn& f, int grid = 200001) const {
    double acc = 0.0;
    for (int i = 0; i < grid; ++i) {
      const double x = a + (b - a) * i / (grid - 1);
      acc += std::abs((*this)(x) - f(x));
    }
    return acc / grid;
  }

  double max_abs_error_vs(const RealFn& f, int grid = 200001) const {
    double m = 0.0;
    for (int i = 0; i < grid; ++i) {
      const double x = a + (b - a) * i / (grid - 1);
      m = std::max(m, std::abs((*this)(x) - f(x)));
    }
    return m;
  }
};

// ---------------------------------------------------------------------------
// fitting

namespace detail {

inline PolyApprox fit_least_squares(const RealFn& f, double a, double b, int degree,
                                    const std::string& tag) {
  const int grid = std::max(2048, 64 * (degree + 1));
  std::vector<double> xs(grid), ys(grid);
  for (int i = 0; i < grid; ++i) {
    xs[i] = a + (b - a) * i / (grid - 1);
    ys[i] = f(xs[i]);
  }
  Eigen::MatrixXd V = cheb_vandermonde(xs, degree, a, b);
  Eigen::VectorXd y = Eigen::Map<Eigen::VectorXd>(ys.data(), grid);
  Eigen::VectorXd c = V.householderQr().solve(y);
  PolyApprox p;
  p.cheb.assign(c.data(), c.data() + degree + 1);
  p.a = a;
  p.b = b;
  p.method = FitMethod::least_squares;
  p.target = tag;
  return p;
}

struct RemezFailure {
  std::string what;
  std::vector<double> last_errors;
};

inline PolyApprox fit_minimax(const RealFn& f, double a, double b, int degree,
                              const std::string& tag) {
  const int n = degree + 2;  // reference size
  const int grid = 200001;
  std::vector<double> gx(grid), gf(grid);
  for (int i = 0; i < grid; ++i) {
    gx[i] = a + (b - a) * i / (grid - 1);
    gf[i] = f(gx[i]);
  }
  // Initial reference at Chebyshev nodes, dropping the left endpoint of an
  // (n+1)-node set. The asymmetry matters: with a symmetric reference an
  // odd target admits a degenerate odd interpolant (levelled error exactly
  // zero) and the exchange stalls one alternation short.
  std::vector<double> ref(n);
  for (int k = 0; k < n; ++k)
    ref[k] = 0.5 * (a + b) + 0.5 * (b - a) * std::cos(M_PI * k / n);
  std::sort(ref.begin(), ref.end());

  PolyApprox p;
  p.a = a;
  p.b = b;
  p.method = FitMethod::minimax;
  p.target = tag;

  double last_max = -1.0;
  double best_max = 1e300;
  std::vector<double> best_cheb;
  std::vector<double> err(grid);
  for (int iter = 1; iter <= 100; ++iter) {
    // solve for coefficients and the leveled error E
    Eigen::MatrixXd A(n, n);
    Eigen::VectorXd rhs(n);
    Eigen::MatrixXd V = cheb_vandermonde(ref, degree, a, b);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c <= degree; ++c) A(r, c) = V(r, c);
      A(r, degree + 1) = (r % 2 == 0) ? 1.0 : -1.0;
      rhs(r) = f(ref[r]);
    }
    Eigen::VectorXd sol = A.fullPivLu().solve(rhs);
    p.cheb.assign(sol.data(), sol.data() + degree + 1);

    double max_err = 0.0;
    for (int i = 0; i < grid; ++i) {
      err[i] = p(gx[i]) - gf[i];
      max_err = std::max(max_err, std::abs(err[i]));
    }
    p.report.iterations = iter;
    p.report.max_abs_error = max_err;
    if (max_err < best_max) {
      best_max = max_err;
      best_cheb = p.cheb;
    }
    if (max_err < 1e-12) break;  // at machine precision; exchanging would be noise
    if (last_max >= 0 && std::abs(max_err - last_max) < 1e-6) break;
    last_max = max_err;

    // locate alternating extrema of the signed error
    std::vector<int> cand;
    cand.push_back(0);
    for (int i = 1; i + 1 < grid; ++i)
      if (std::abs(err[i]) >= std::abs(err[i - 1]) && std::abs(err[i]) >= std::abs(err[i + 1]))
        cand.push_back(i);
    cand.push_back(grid - 1);
    std::vector<int> alt;
    for (int i : cand) {
      if (!alt.empty() && (err[i] >= 0) == (err[alt.back()] >= 0)) {
        if (std::abs(err[i]) > std::abs(err[alt.back()])) alt.back() = i;
      } else {
        alt.push_back(i);
      }
    }
    if (static_cast<int>(alt.size()) < n) break;  // error is already flat (e.g. polynomial target)
    // keep the window of n consecutive extrema with the largest smallest error
    int best_start = 0;
    double best_min = -1.0;
    for (std::size_t s = 0; s + n <= alt.size(); ++s) {
      double mn = 1e300;
      for (int k = 0; k < n; ++k) mn = std::min(mn, std::abs(err[alt[s + k]]));
      if (mn > best_min) {
        best_min = mn;
        best_start = static_cast<int>(s);
      }
    }
    for (int k = 0; k < n; ++k) ref[k] = gx[alt[best_start + k]];
  }
  p.report.converged =
      p.report.iterations < 100 || std::abs(p.report.max_abs_error - last_max) < 1e-6;
  if (!p.report.converged)
    throw argument_error("remez: no convergence after 100 iterations fitting " + tag +
                         "; last max error " + std::to_string(p.report.max_abs_error) +
                         ", previous " + std::to_string(last_max));
  p.cheb = best_cheb;
  p.report.max_abs_error = best_max;
  double mean = 0.0;
  for (int i = 0; i < grid; ++i) {
    err[i] = p(gx[i]) - gf[i];
    mean += std::abs(err[i]);
  }
  p.report.mean_abs_error = mean / grid;
  return p;
}

}  // namespace detail

inline PolyApprox fit(const RealFn& target, double a, double b, int degree, FitMethod method,
                      const std::string& tag = "") {
  if (!(a < b)) throw argument_error("fit: interval is empty");
  if (degree < 0) throw argument_error("fit: negative degree");
  PolyApprox p = method == FitMethod::least_squares
                     ? detail::fit_least_squares(target, a, b, degree, tag)
                     : detail::fit_minimax(target, a, b, degree, tag);
  if (method == FitMethod::least_squares) {
    p.report.max_abs_error = p.max_abs_error_vs(target);
    p.report.mean_abs_error = p.mean_abs_error_vs(target);
  }
  return p;
}

inline PolyApprox fit_clip(const ClipSpec& spec, double a, double b, int degree,
                           FitMethod method = FitMethod::minimax) {
  std::string tag;
  switch (spec.variant) {
    case ClipVariant::hard: tag = "clip"; break;
    case ClipVariant::tanh: tag = "tanhclip"; break;
    case ClipVariant::soft: tag = "softclip"; break;
  }
  tag += "(m=" + std::to_string(spec.threshold) + ")";
  return fit(spec.target(), a, b, degree, method, tag);
}

// ---------------------------------------------------------------------------
// activation library

struct ActivationPair {
  PolyApprox fn;
  PolyApprox deriv;
  // with tanh, dh . (1 - h^2) replaces the derivative polynomial entirely
  bool derivative_identity = false;
  RealFn exact_fn;
  RealFn exact_deriv;
};

inline ActivationPair activation_library(const std::string& name, int degree, double a, double b,
                                         bool tanh_identity = true) {
  ActivationPair out;
  if (name == "tanh") {
    out.exact_fn = [](double x) { return tanh_ref(x); };
    out.exact_deriv = [](double x) {
      const double t = tanh_ref(x);
      return 1.0 - t * t;
    };
    out.derivative_identity = tanh_identity;
  } else if (name == "sigmoid") {
    out.exact_fn = [](double x) { return sigmoid_ref(x); };
    out.exact_deriv = [](double x) {
      const double s = sigmoid_ref(x);
      return s * (1.0 - s);
    };
  } else if (name == "softplus") {
    out.exact_fn = [](double x) { return softplus_ref(x); };
    out.exact_deriv = [](double x) { return sigmoid_ref(x); };
  } else {
    throw argument_error("activation_library: unknown activation '" + name + "'");
  }
  out.fn = fit(out.exact_fn, a, b, degree, FitMethod::minimax, name);
  out.deriv = fit(out.exact_deriv, a, b, degree - 1, FitMethod::minimax, name + "'");
  return out;
}

// ---------------------------------------------------------------------------
// low-depth evaluation

namespace detail {

// Weighted power c*x^j evaluated so that the whole term sits at
// level(x) - ceil(log2(j+1)): the coefficient always multiplies the
// shallowest branch of the product tree.
class PowerEvaluator {
 public:
  PowerEvaluator(Engine& eng, const SlotVector& x) : eng_(eng), x_(x) {}

  SlotVector weighted(double c, long j) {
    if (j == 0) throw argument_error("weighted power of exponent 0");
    if (j == 1) return eng_.mul(x_, eng_.constant(c));
    const long a = (j & (j - 1)) == 0 ? j / 2 : (1L << (ceil_log2(j + 1) - 1));
    return eng_.mul(weighted(c, j - a), power(a));
  }

  const SlotVector& power(long j) {
    auto it = pow_.find(j);
    if (it != pow_.end()) return it->second;
    SlotVector v = [&] {
      if (j == 1) return x_;
      const long half = 1L << (ceil_log2(j) - 1);  // largest power of two below j
      if (j == half * 2) return eng_.mul(power(half), power(half));
      return eng_.mul(power(j - half), power(half));
    }();
    return pow_.emplace(j, std::move(v)).first->second;
  }

 private:
  Engine& eng_;
  SlotVector x_;
  std::map<long, SlotVector> pow_;
};

inline SlotVector eval_monomials_slots(Engine& eng, const std::vector<double>& mono,
                                       const SlotVector& x) {
  const long d = static_cast<long>(mono.size()) - 1;
  SlotVector acc = eng.constant(mono[0]);
  acc.level = x.level;
  acc.encrypted = x.encrypted;
  if (d == 0) return acc;
  if (x.encrypted && x.level < ceil_log2(d + 1))
    throw level_error("polynomial evaluation needs " + std::to_string(ceil_log2(d + 1)) +
                      " levels, ciphertext has " + std::to_string(x.level));
  PowerEvaluator pe(eng, x);
  for (long j = 1; j <= d; ++j) {
    if (mono[j] == 0.0) continue;
    acc = eng.add(acc, pe.weighted(mono[j], j));
  }
  return acc;
}

}  // namespace detail

// Tracks the largest |input| fed to an approximated function; inputs
// outside the fit interval are evaluated anyway (divergence is the
// caller's risk) but the guard makes the excursion observable.
struct EvalGuard {
  double max_abs_input = 0.0;

  void observe(const SlotVector& x) {
    for (double v : x.slots) max_abs_input = std::max(max_abs_input, std::abs(v));
  }
};

inline SlotVector eval_encrypted(Engine& eng, const PolyApprox& poly, const SlotVector& x,
                                 EvalGuard* guard = nullptr) {
  if (guard) guard->observe(x);
  return detail::eval_monomials_slots(eng, poly.monomial(), x);
}

inline PackedMatrix eval_encrypted(Engine& eng, const PolyApprox& poly, const PackedMatrix& x,
                                   EvalGuard* guard = nullptr) {
  const auto mono = poly.monomial();
  PackedMatrix out = x;
  for (auto& b : out.blocks) {
    if (guard) guard->observe(b);
    b = detail::eval_monomials_slots(eng, mono, b);
  }
  out.replicated = x.replicated;
  return out;
}

// Exact slot-wise application charging the same depth the polynomial
// would, so exact-activation baselines keep identical placement/ledgers.
inline PackedMatrix eval_exact_matrix(Engine& eng, const RealFn& f, int depth_equivalent,
                                      const PackedMatrix& x) {
  PackedMatrix out = x;
  for (auto& b : out.blocks) b = eng.eval_exact(b, f, depth_equivalent);
  return out;
}

}  // namespace slotsim
