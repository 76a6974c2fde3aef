#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "slotsim/approx.hpp"

using namespace slotsim;

TEST_CASE("clip references") {
  REQUIRE(clip_reference(7, 5) == 5.0);
  REQUIRE(clip_reference(-7, 5) == -5.0);
  REQUIRE(clip_reference(3, 5) == 3.0);

  for (double m : {1.0, 5.0, 12.5}) {
    REQUIRE(soft_clip(0, m) == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(tanh_clip(0, m) == 0.0);
  }
  // near zero TanhClip is the identity up to the cubic Taylor term
  REQUIRE(tanh_clip(0.001, 5) == Catch::Approx(0.001).margin(1e-10));
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-2.5, 2.5);
  for (int i = 0; i < 200; ++i) {
    const double x = U(rng), m = 5.0;
    REQUIRE(std::abs(tanh_clip(x, m) - x) <= std::abs(x * x * x) / (3 * m * m) + 1e-12);
  }
}

TEST_CASE("soft variants are odd") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(-20, 20);
  for (int i = 0; i < 200; ++i) {
    const double x = U(rng);
    REQUIRE(soft_clip(-x, 5) == Catch::Approx(-soft_clip(x, 5)).margin(1e-12));
    REQUIRE(tanh_clip(-x, 5) == Catch::Approx(-tanh_clip(x, 5)).margin(1e-12));
  }
}

TEST_CASE("minimax fit of a polynomial target is exact") {
  auto p = fit([](double x) { return x; }, -1, 1, 1, FitMethod::minimax, "x");
  REQUIRE(p.report.max_abs_error < 1e-12);
  REQUIRE(p(0.3) == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("minimax error equioscillates") {
  auto p = fit([](double x) { return std::tanh(x); }, -4, 4, 7, FitMethod::minimax, "tanh");
  // the signed error must attain degree+2 alternating extrema of near-equal
  // magnitude (within 5%)
  const int grid = 20001;
  std::vector<double> err(grid), xs(grid);
  for (int i = 0; i < grid; ++i) {
    xs[i] = -4 + 8.0 * i / (grid - 1);
    err[i] = p(xs[i]) - std::tanh(xs[i]);
  }
  std::vector<double> extrema;
  std::vector<int> signs;
  for (int i = 0; i < grid; ++i) {
    const bool boundary = i == 0 || i == grid - 1;
    const bool peak = !boundary && std::abs(err[i]) >= std::abs(err[i - 1]) &&
                      std::abs(err[i]) >= std::abs(err[i + 1]);
    if (!(boundary || peak)) continue;
    const int s = err[i] >= 0 ? 1 : -1;
    if (!signs.empty() && signs.back() == s) {
      if (std::abs(err[i]) > extrema.back()) extrema.back() = std::abs(err[i]);
      continue;
    }
    signs.push_back(s);
    extrema.push_back(std::abs(err[i]));
  }
  REQUIRE(extrema.size() >= 9);  // degree + 2
  std::sort(extrema.rbegin(), extrema.rend());
  const double top = extrema[0];
  for (int k = 0; k < 9; ++k) REQUIRE(extrema[k] >= 0.95 * top);
}

TEST_CASE("minimax max error never exceeds least squares") {
  struct Case {
    RealFn f;
    double a, b;
    int deg;
  };
  std::vector<Case> cases = {
      {[](double x) { return std::tanh(x); }, -4, 4, 7},
      {[](double x) { return sigmoid_ref(x); }, -8, 8, 5},
      {[](double x) { return soft_clip(x, 5); }, -30, 30, 9},
  };
  for (const auto& c : cases) {
    auto mm = fit(c.f, c.a, c.b, c.deg, FitMethod::minimax);
    auto ls = fit(c.f, c.a, c.b, c.deg, FitMethod::least_squares);
    REQUIRE(mm.report.max_abs_error <= ls.report.max_abs_error * (1 + 1e-9));
  }
}

TEST_CASE("clipping approximations reproduce the reference error levels") {
  // mean |approximant - Clip| over [-30, 30] at m = 5, minimax fits of the
  // soft targets; values computed with the dense-grid oracle
  const ClipSpec tanh5{5.0, ClipVariant::tanh};
  const ClipSpec soft5{5.0, ClipVariant::soft};
  const RealFn hard = [](double x) { return clip_reference(x, 5.0); };

  auto t5 = fit_clip(tanh5, -30, 30, 5);
  REQUIRE(t5.mean_abs_error_vs(hard) == Catch::Approx(0.643).epsilon(0.10));
  auto s5 = fit_clip(soft5, -30, 30, 5);
  REQUIRE(s5.mean_abs_error_vs(hard) == Catch::Approx(0.706).epsilon(0.10));
  auto t15 = fit_clip(tanh5, -30, 30, 15);
  REQUIRE(t15.mean_abs_error_vs(hard) == Catch::Approx(0.183).epsilon(0.10));
  auto s15 = fit_clip(soft5, -30, 30, 15);
  REQUIRE(s15.mean_abs_error_vs(hard) == Catch::Approx(0.089).epsilon(0.10));
}

TEST_CASE("approximants of odd targets stay odd within fit error") {
  auto p = fit_clip({5.0, ClipVariant::soft}, -30, 30, 7);
  for (double x : {0.5, 3.0, 11.0, 27.5})
    REQUIRE(p(-x) == Catch::Approx(-p(x)).margin(4 * p.report.max_abs_error + 1e-9));
}

TEST_CASE("activation library") {
  auto sig = activation_library("sigmoid", 7, -8, 8);
  REQUIRE(sig.exact_fn(0.0) == 0.5);
  auto th = activation_library("tanh", 7, -4, 4);
  REQUIRE(th.exact_deriv(0.0) == 1.0);
  REQUIRE(th.derivative_identity);
  // dense-grid oracle puts the optimal degree-7 max error on [-4,4] at ~0.0378
  REQUIRE(th.fn.report.max_abs_error == Catch::Approx(0.0378).epsilon(0.05));
  REQUIRE(th.fn.report.max_abs_error < 0.04);
  REQUIRE(th.deriv.degree() == 6);
  REQUIRE_THROWS_AS(activation_library("relu6", 7, -4, 4), argument_error);
}

TEST_CASE("monomial export agrees with clenshaw") {
  auto p = fit([](double x) { return soft_clip(x, 5); }, -60, 60, 7, FitMethod::minimax);
  auto mono = p.monomial();
  for (double x : {-59.0, -12.0, 0.0, 0.25, 33.0}) {
    double horner = 0;
    for (int j = p.degree(); j >= 0; --j) horner = horner * x + mono[j];
    REQUIRE(horner == Catch::Approx(p(x)).margin(1e-9));
  }
}

namespace {

EngineParams small_params(int level = 9) {
  EngineParams p;
  p.ring_log = 6;
  p.initial_level = level;
  return p;
}

BlockLayout small_layout(Engine& eng) {
  BlockLayout l;
  l.delta = 4;
  l.rows = 4;
  l.cols = 4;
  l.parallel = 2;
  l.engine = eng.params();
  return l;
}

}  // namespace

TEST_CASE("encrypted evaluation: constant polynomial") {
  Engine eng(small_params());
  auto l = small_layout(eng);
  HostTensor t(2, 4, 4);
  for (auto& v : t.data) v = 0.7;
  auto x = encrypt_matrix(eng, pack(eng, t, l));
  PolyApprox c;
  c.cheb = {2.5};
  c.a = -1;
  c.b = 1;
  auto y = eval_encrypted(eng, c, x);
  REQUIRE(y.level() == x.level());  // 0 levels consumed
  auto got = unpack(eng, decrypt_matrix(eng, y));
  for (int s = 0; s < 2; ++s) REQUIRE(got.at(s, 1, 2) == Catch::Approx(2.5).margin(1e-9));
}

TEST_CASE("encrypted evaluation matches plaintext horner within 1e-4 up to degree 31") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> U(-0.9, 0.9);
  for (int degree : {2, 3, 7, 15, 31}) {
    EngineParams ep = small_params(12);
    Engine eng(ep);
    auto l = small_layout(eng);
    auto target = [](double x) { return std::sin(3 * x); };
    auto p = fit(target, -1, 1, degree, FitMethod::minimax, "sin3x");
    auto mono = p.monomial();

    HostTensor t(2, 4, 4);
    for (auto& v : t.data) v = U(rng);
    auto x = encrypt_matrix(eng, pack(eng, t, l));
    auto y = unpack(eng, decrypt_matrix(eng, eval_encrypted(eng, p, x)));
    for (int s = 0; s < 2; ++s)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
          double horner = 0;
          for (int k = degree; k >= 0; --k) horner = horner * t.at(s, i, j) + mono[k];
          REQUIRE(y.at(s, i, j) == Catch::Approx(horner).margin(1e-4));
        }
  }
}

TEST_CASE("evaluation depth is exactly ceil(log2(degree+1))") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> U(-1, 1);
  for (int degree = 1; degree <= 31; ++degree) {
    Engine eng(small_params(12));
    auto l = small_layout(eng);
    HostTensor t(2, 4, 4);
    for (auto& v : t.data) v = U(rng);
    auto x = encrypt_matrix(eng, pack(eng, t, l));
    // dense coefficients so every term participates
    PolyApprox p;
    p.cheb.assign(degree + 1, 0.0);
    for (int k = 0; k <= degree; ++k) p.cheb[k] = 1.0 / (1 + k);
    p.a = -1;
    p.b = 1;
    auto y = eval_encrypted(eng, p, x);
    int want = 0;
    while ((1 << want) < degree + 1) ++want;
    REQUIRE(x.level() - y.level() == want);
  }
}

TEST_CASE("degree-7 evaluation consumes 3 levels and errors out of budget") {
  Engine eng(small_params(9));
  auto l = small_layout(eng);
  HostTensor t(2, 4, 4);
  auto x = encrypt_matrix(eng, pack(eng, t, l));
  auto p = fit([](double x_) { return std::tanh(x_); }, -4, 4, 7, FitMethod::minimax);
  auto y = eval_encrypted(eng, p, x);
  REQUIRE(x.level() - y.level() == 3);

  Engine eng2(small_params(2));
  auto x2 = encrypt_matrix(eng2, pack(eng2, t, small_layout(eng2)));
  REQUIRE_THROWS_AS(eval_encrypted(eng2, p, x2), level_error);
}

TEST_CASE("evaluation guard records the largest input magnitude") {
  Engine eng(small_params());
  auto l = small_layout(eng);
  HostTensor t(2, 4, 4);
  t.at(1, 2, 3) = -7.25;
  auto x = encrypt_matrix(eng, pack(eng, t, l));
  auto p = fit([](double v) { return std::tanh(v); }, -4, 4, 3, FitMethod::minimax);
  EvalGuard guard;
  eval_encrypted(eng, p, x, &guard);
  REQUIRE(guard.max_abs_input == 7.25);
}

TEST_CASE("fit rejects bad arguments") {
  REQUIRE_THROWS_AS(fit([](double x) { return x; }, 1, 1, 3, FitMethod::minimax), argument_error);
  ClipSpec bad{-1.0, ClipVariant::soft};
  REQUIRE_THROWS_AS(bad.validate(), argument_error);
}
