#pragma once

// Plaintext reference implementations used as independent oracles by the
// unit and acceptance tests: dense matrices, the three recurrent cells
// with exact activations, squared-error BPTT, and central finite
// differences. Deliberately naive and kept apart from the packed path.

#include <cmath>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

namespace oracle {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t r_, std::size_t c_) : r(r_), c(c_), v(r_ * c_, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.c != b.r) throw std::runtime_error("oracle matmul shape");
  Mat out(a.r, b.c);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t k = 0; k < b.c; ++k) {
      double acc = 0;
      for (std::size_t j = 0; j < a.c; ++j) acc += a.at(i, j) * b.at(j, k);
      out.at(i, k) = acc;
    }
  return out;
}

inline Mat transpose(const Mat& a) {
  Mat out(a.c, a.r);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < a.c; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

inline Mat sub(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b.v[i];
  return out;
}

inline Mat had(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

inline Mat mapm(const Mat& a, const std::function<double(double)>& f) {
  Mat out = a;
  for (auto& x : out.v) x = f(x);
  return out;
}

inline Mat add_row(const Mat& a, const std::vector<double>& row) {
  Mat out = a;
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < a.c; ++j) out.at(i, j) += row[j];
  return out;
}

inline std::vector<double> colsum(const Mat& a) {
  std::vector<double> out(a.c, 0.0);
  for (std::size_t i = 0; i < a.r; ++i)
    for (std::size_t j = 0; j < a.c; ++j) out[j] += a.at(i, j);
  return out;
}

// ---------------------------------------------------------------------------

struct Shape {
  std::size_t b, d, h, T, o, kappa;
};

struct ElmanWeights {
  Mat U, W, V;
  std::vector<double> bh, by;
};

struct Grads {
  Mat U, W, V;
  std::vector<double> bh, by;
};

inline double dtanh(double x) {
  const double t = std::tanh(x);
  return 1.0 - t * t;
}

// inputs x[t]: b x d, targets y[k]: b x o for the last kappa steps.
// Loss is 1/2 sum of squared errors over the output steps (raw batch sum).
struct ElmanRun {
  std::vector<Mat> h;  // h[0] = h_prev
  std::vector<Mat> z;
  std::vector<Mat> p;  // per output step
  double loss = 0;
};

inline ElmanRun elman_forward(const Shape& s, const ElmanWeights& w, const std::vector<Mat>& x,
                              const std::vector<Mat>& y, const Mat& h_prev, bool jordan = false) {
  ElmanRun run;
  run.h.push_back(h_prev);
  Mat rec_in = jordan ? Mat(s.b, s.o) : h_prev;  // jordan feeds back p_{t-1}
  for (std::size_t t = 0; t < s.T; ++t) {
    Mat z = add_row(add(matmul(rec_in, w.W), matmul(x[t], w.U)), w.bh);
    run.z.push_back(z);
    Mat ht = mapm(z, [](double v) { return std::tanh(v); });
    run.h.push_back(ht);
    const bool out_step = t + 1 > s.T - s.kappa;
    if (jordan || out_step) {
      Mat pt = add_row(matmul(ht, w.V), w.by);
      run.p.push_back(pt);
      if (out_step) {
        const Mat& yt = y[t - (s.T - s.kappa)];
        for (std::size_t i = 0; i < pt.v.size(); ++i)
          run.loss += 0.5 * (pt.v[i] - yt.v[i]) * (pt.v[i] - yt.v[i]);
      }
    }
    rec_in = jordan ? run.p.back() : ht;
  }
  return run;
}

inline Grads elman_backward(const Shape& s, const ElmanWeights& w, const std::vector<Mat>& x,
                            const std::vector<Mat>& y, const ElmanRun& run) {
  Grads g{Mat(s.d, s.h), Mat(s.h, s.h), Mat(s.h, s.o), std::vector<double>(s.h, 0.0),
          std::vector<double>(s.o, 0.0)};
  Mat dh_next(s.b, s.h);
  for (std::size_t t = s.T; t-- > 0;) {
    Mat dh = dh_next;
    const bool out_step = t + 1 > s.T - s.kappa;
    if (out_step) {
      Mat dy = sub(run.p[run.p.size() - (s.T - t)], y[t - (s.T - s.kappa)]);
      dh = add(dh, matmul(dy, transpose(w.V)));
      g.V = add(g.V, matmul(transpose(run.h[t + 1]), dy));
      auto cs = colsum(dy);
      for (std::size_t j = 0; j < s.o; ++j) g.by[j] += cs[j];
    }
    Mat dz = had(dh, mapm(run.z[t], dtanh));
    dh_next = matmul(dz, transpose(w.W));
    g.U = add(g.U, matmul(transpose(x[t]), dz));
    g.W = add(g.W, matmul(transpose(run.h[t]), dz));
    auto cs = colsum(dz);
    for (std::size_t j = 0; j < s.h; ++j) g.bh[j] += cs[j];
  }
  return g;
}

// Jordan: recurrence input is p_{t-1}; gradient flows through the output
// chain. W is o x h.
inline Grads jordan_backward(const Shape& s, const ElmanWeights& w, const std::vector<Mat>& x,
                             const std::vector<Mat>& y, const ElmanRun& run) {
  Grads g{Mat(s.d, s.h), Mat(s.o, s.h), Mat(s.h, s.o), std::vector<double>(s.h, 0.0),
          std::vector<double>(s.o, 0.0)};
  Mat dz_next(s.b, s.h);  // dz_{t+1}
  for (std::size_t t = s.T; t-- > 0;) {
    const bool out_step = t + 1 > s.T - s.kappa;
    Mat dp(s.b, s.o);
    if (out_step) dp = sub(run.p[t], y[t - (s.T - s.kappa)]);
    if (t + 1 < s.T) dp = add(dp, matmul(dz_next, transpose(w.W)));
    g.V = add(g.V, matmul(transpose(run.h[t + 1]), dp));
    auto cs = colsum(dp);
    for (std::size_t j = 0; j < s.o; ++j) g.by[j] += cs[j];
    Mat dh = matmul(dp, transpose(w.V));
    Mat dz = had(dh, mapm(run.z[t], dtanh));
    Mat rec = t == 0 ? Mat(s.b, s.o) : run.p[t - 1];
    g.W = add(g.W, matmul(transpose(rec), dz));
    g.U = add(g.U, matmul(transpose(x[t]), dz));
    auto ch = colsum(dz);
    for (std::size_t j = 0; j < s.h; ++j) g.bh[j] += ch[j];
    dz_next = dz;
  }
  return g;
}

// ---------------------------------------------------------------------------
// GRU

struct GruWeights {
  Mat Uz, Ur, Un, Wz, Wr, Wn, V;
  std::vector<double> bz, br, bn, by;
};

struct GruGrads {
  Mat Uz, Ur, Un, Wz, Wr, Wn, V;
  std::vector<double> bz, br, bn, by;
};

inline double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct GruRun {
  std::vector<Mat> h, z, r, n;
  std::vector<Mat> p;
  double loss = 0;
};

inline GruRun gru_forward(const Shape& s, const GruWeights& w, const std::vector<Mat>& x,
                          const std::vector<Mat>& y, const Mat& h_prev) {
  GruRun run;
  run.h.push_back(h_prev);
  for (std::size_t t = 0; t < s.T; ++t) {
    Mat zt = mapm(add_row(add(matmul(run.h[t], w.Wz), matmul(x[t], w.Uz)), w.bz), sigm);
    Mat rt = mapm(add_row(add(matmul(run.h[t], w.Wr), matmul(x[t], w.Ur)), w.br), sigm);
    Mat nt = mapm(add_row(add(matmul(had(rt, run.h[t]), w.Wn), matmul(x[t], w.Un)), w.bn),
                  [](double v) { return std::tanh(v); });
    Mat ht(s.b, s.h);
    for (std::size_t i = 0; i < ht.v.size(); ++i)
      ht.v[i] = zt.v[i] * run.h[t].v[i] + (1 - zt.v[i]) * nt.v[i];
    run.z.push_back(zt);
    run.r.push_back(rt);
    run.n.push_back(nt);
    run.h.push_back(ht);
    const bool out_step = t + 1 > s.T - s.kappa;
    if (out_step) {
      Mat pt = add_row(matmul(ht, w.V), w.by);
      run.p.push_back(pt);
      const Mat& yt = y[t - (s.T - s.kappa)];
      for (std::size_t i = 0; i < pt.v.size(); ++i)
        run.loss += 0.5 * (pt.v[i] - yt.v[i]) * (pt.v[i] - yt.v[i]);
    }
  }
  return run;
}

inline GruGrads gru_backward(const Shape& s, const GruWeights& w, const std::vector<Mat>& x,
                             const std::vector<Mat>& y, const GruRun& run) {
  GruGrads g{Mat(s.d, s.h), Mat(s.d, s.h), Mat(s.d, s.h), Mat(s.h, s.h),
             Mat(s.h, s.h), Mat(s.h, s.h), Mat(s.h, s.o), std::vector<double>(s.h, 0.0),
             std::vector<double>(s.h, 0.0), std::vector<double>(s.h, 0.0),
             std::vector<double>(s.o, 0.0)};
  Mat dh_nxt(s.b, s.h);
  for (std::size_t t = s.T; t-- > 0;) {
    Mat dh = dh_nxt;
    const bool out_step = t + 1 > s.T - s.kappa;
    if (out_step) {
      Mat dy = sub(run.p[run.p.size() - (s.T - t)], y[t - (s.T - s.kappa)]);
      dh = add(dh, matmul(dy, transpose(w.V)));
      g.V = add(g.V, matmul(transpose(run.h[t + 1]), dy));
      auto cs = colsum(dy);
      for (std::size_t j = 0; j < s.o; ++j) g.by[j] += cs[j];
    }
    const Mat &zt = run.z[t], &rt = run.r[t], &nt = run.n[t], &hp = run.h[t];
    Mat dn(s.b, s.h), dn_raw(s.b, s.h), dz(s.b, s.h), dz_raw(s.b, s.h);
    for (std::size_t i = 0; i < dh.v.size(); ++i) {
      dn.v[i] = (1 - zt.v[i]) * dh.v[i];
      dn_raw.v[i] = (1 - nt.v[i] * nt.v[i]) * dn.v[i];
      dz.v[i] = (hp.v[i] - nt.v[i]) * dh.v[i];
      dz_raw.v[i] = zt.v[i] * (1 - zt.v[i]) * dz.v[i];
    }
    Mat dnW = matmul(dn_raw, transpose(w.Wn));
    Mat dr = had(dnW, hp);
    Mat dr_raw(s.b, s.h);
    for (std::size_t i = 0; i < dr.v.size(); ++i)
      dr_raw.v[i] = rt.v[i] * (1 - rt.v[i]) * dr.v[i];
    Mat dh_h = had(dh, zt);
    Mat dh_z = matmul(dz_raw, transpose(w.Wz));
    Mat dh_r = matmul(dr_raw, transpose(w.Wr));
    Mat dh_n = had(rt, dnW);
    dh_nxt = add(add(dh_z, dh_h), add(dh_n, dh_r));

    g.Uz = add(g.Uz, matmul(transpose(x[t]), dz_raw));
    g.Ur = add(g.Ur, matmul(transpose(x[t]), dr_raw));
    g.Un = add(g.Un, matmul(transpose(x[t]), dn_raw));
    g.Wz = add(g.Wz, matmul(transpose(hp), dz_raw));
    g.Wr = add(g.Wr, matmul(transpose(hp), dr_raw));
    g.Wn = add(g.Wn, matmul(transpose(had(rt, hp)), dn_raw));
    auto az = colsum(dz_raw);
    auto ar = colsum(dr_raw);
    auto an = colsum(dn_raw);
    for (std::size_t j = 0; j < s.h; ++j) {
      g.bz[j] += az[j];
      g.br[j] += ar[j];
      g.bn[j] += an[j];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// finite differences

inline double central_diff(const std::function<double()>& loss, double& param, double eps = 1e-4) {
  const double keep = param;
  param = keep + eps;
  const double up = loss();
  param = keep - eps;
  const double dn = loss();
  param = keep;
  return (up - dn) / (2 * eps);
}

inline std::vector<Mat> random_mats(std::mt19937_64& rng, std::size_t n, std::size_t r,
                                    std::size_t c, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> U(lo, hi);
  std::vector<Mat> out;
  for (std::size_t k = 0; k < n; ++k) {
    Mat m(r, c);
    for (auto& v : m.v) v = U(rng);
    out.push_back(m);
  }
  return out;
}

}  // namespace oracle
