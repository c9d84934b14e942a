#pragma once

// Nonlinear least squares for the two trajectory models used in the analysis:
// a double exponential in time (sensitivity windows) and an exponential link
// between sensitivity and Fisher trace. The solver is damped least squares
// with a numeric Jacobian: gradient descent when damping is high, Gauss-
// Newton when low, damping x2 on a rejected step and /3 on an accepted one.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "plab/tensor.hpp"

namespace plab {

struct FitPoint {
  double x = 0, y = 0;
};

struct LMOptions {
  int max_iter = 500;
  double rel_step_tol = 1e-8;
  double lambda0 = 1e-3;
  double lambda_up = 2.0;
  double lambda_down = 3.0;
};

struct LMResult {
  std::vector<double> params;
  double rms = 0;
  int iters = 0;
  bool converged = false;
  bool finite_start = true;
};

namespace detail {

// Gaussian elimination with partial pivoting; m <= 4 here.
inline bool solve_spd(std::vector<double> a, std::vector<double> b,
                      std::vector<double>& x) {
  const int m = int(b.size());
  for (int col = 0; col < m; ++col) {
    int piv = col;
    for (int r = col + 1; r < m; ++r)
      if (std::abs(a[std::size_t(r) * m + col]) >
          std::abs(a[std::size_t(piv) * m + col]))
        piv = r;
    if (std::abs(a[std::size_t(piv) * m + col]) < 1e-300) return false;
    if (piv != col) {
      for (int c = 0; c < m; ++c)
        std::swap(a[std::size_t(col) * m + c], a[std::size_t(piv) * m + c]);
      std::swap(b[std::size_t(col)], b[std::size_t(piv)]);
    }
    for (int r = col + 1; r < m; ++r) {
      const double f =
          a[std::size_t(r) * m + col] / a[std::size_t(col) * m + col];
      for (int c = col; c < m; ++c)
        a[std::size_t(r) * m + c] -= f * a[std::size_t(col) * m + c];
      b[std::size_t(r)] -= f * b[std::size_t(col)];
    }
  }
  x.assign(std::size_t(m), 0.0);
  for (int r = m - 1; r >= 0; --r) {
    double s = b[std::size_t(r)];
    for (int c = r + 1; c < m; ++c)
      s -= a[std::size_t(r) * m + c] * x[std::size_t(c)];
    x[std::size_t(r)] = s / a[std::size_t(r) * m + r];
  }
  return true;
}

}  // namespace detail

// residual_fn fills `out` with one residual per data point; returns false if
// the parameters are outside the model's domain.
using ResidualFn =
    std::function<bool(const std::vector<double>&, std::vector<double>&)>;

inline LMResult lm_fit(const ResidualFn& residual_fn,
                       std::vector<double> p, int n_residuals,
                       const LMOptions& opt = {}) {
  const int m = int(p.size());
  LMResult res;
  std::vector<double> r(static_cast<std::size_t>(n_residuals));
  if (!residual_fn(p, r) || !all_finite(r)) {
    res.params = p;
    res.finite_start = false;
    return res;
  }
  auto cost_of = [&](const std::vector<double>& rr) {
    double c = 0;
    for (double v : rr) c += v * v;
    return c;
  };
  double cost = cost_of(r);
  double lambda = opt.lambda0;
  std::vector<double> jac(std::size_t(n_residuals) * std::size_t(m));
  std::vector<double> rp(static_cast<std::size_t>(n_residuals));

  for (int iter = 0; iter < opt.max_iter; ++iter) {
    // Forward-difference Jacobian.
    bool jac_ok = true;
    for (int j = 0; j < m && jac_ok; ++j) {
      const double h =
          1e-7 * std::max(std::abs(p[std::size_t(j)]), 1e-4);
      std::vector<double> pj = p;
      pj[std::size_t(j)] += h;
      if (!residual_fn(pj, rp) || !all_finite(rp)) {
        jac_ok = false;
        break;
      }
      for (int i = 0; i < n_residuals; ++i)
        jac[std::size_t(i) * m + j] =
            (rp[std::size_t(i)] - r[std::size_t(i)]) / h;
    }
    if (!jac_ok) break;

    std::vector<double> jtj(std::size_t(m) * m, 0.0), jtr(std::size_t(m), 0.0);
    for (int i = 0; i < n_residuals; ++i)
      for (int a = 0; a < m; ++a) {
        jtr[std::size_t(a)] +=
            jac[std::size_t(i) * m + a] * r[std::size_t(i)];
        for (int b = a; b < m; ++b)
          jtj[std::size_t(a) * m + b] +=
              jac[std::size_t(i) * m + a] * jac[std::size_t(i) * m + b];
      }
    for (int a = 0; a < m; ++a)
      for (int b = 0; b < a; ++b)
        jtj[std::size_t(a) * m + b] = jtj[std::size_t(b) * m + a];

    std::vector<double> damped = jtj;
    for (int a = 0; a < m; ++a)
      damped[std::size_t(a) * m + a] +=
          lambda * std::max(jtj[std::size_t(a) * m + a], 1e-12);
    std::vector<double> njtr(static_cast<std::size_t>(m));
    for (int a = 0; a < m; ++a) njtr[std::size_t(a)] = -jtr[std::size_t(a)];
    std::vector<double> delta;
    if (!detail::solve_spd(damped, njtr, delta)) break;

    std::vector<double> pnew = p;
    for (int a = 0; a < m; ++a) pnew[std::size_t(a)] += delta[std::size_t(a)];
    const bool ok = residual_fn(pnew, rp) && all_finite(rp);
    const double cnew = ok ? cost_of(rp) : 0;
    ++res.iters;
    if (ok && cnew < cost) {
      double rel = 0;
      for (int a = 0; a < m; ++a)
        rel = std::max(rel, std::abs(delta[std::size_t(a)]) /
                                (std::abs(p[std::size_t(a)]) + 1e-12));
      p = pnew;
      r = rp;
      cost = cnew;
      lambda = std::max(lambda / opt.lambda_down, 1e-14);
      if (rel < opt.rel_step_tol) {
        res.converged = true;
        break;
      }
    } else {
      lambda *= opt.lambda_up;
      if (lambda > 1e14) break;
    }
  }
  res.params = p;
  res.rms = std::sqrt(cost / double(n_residuals));
  return res;
}

// ---------------------------------------------------------------------------
// f(t) = exp(-(t - d)/tau1) - k * exp(-(t - d)/tau2)

struct DoubleExpFit {
  double tau1 = 0, tau2 = 0, k = 0, d = 0;
  double rms = 0;
  bool converged = false;
  bool degenerate = false;     // constant y: nothing to fit
  bool non_physical = false;   // a time constant came out <= 0
  std::string note;
};

inline double double_exp_eval(double t, double tau1, double tau2, double k,
                              double d) {
  auto safe_exp = [](double a) { return std::exp(std::min(a, 40.0)); };
  return safe_exp(-(t - d) / tau1) - k * safe_exp(-(t - d) / tau2);
}

inline DoubleExpFit fit_double_exp(const std::vector<FitPoint>& pts) {
  require(pts.size() >= 5, msg("fit_double_exp: need at least 5 points, got ",
                               pts.size()));
  double tmin = pts[0].x, tmax = pts[0].x, ymin = pts[0].y, ymax = pts[0].y;
  for (const FitPoint& p : pts) {
    tmin = std::min(tmin, p.x);
    tmax = std::max(tmax, p.x);
    ymin = std::min(ymin, p.y);
    ymax = std::max(ymax, p.y);
  }
  DoubleExpFit fit;
  if (ymax - ymin <= 0) {
    fit.degenerate = true;
    fit.note = "constant y values";
    return fit;
  }
  const double span = tmax - tmin;
  require(span > 0, "fit_double_exp: all points at the same time");

  ResidualFn residuals = [&pts](const std::vector<double>& p,
                                std::vector<double>& out) {
    const double tau1 = p[0], tau2 = p[1], k = p[2], d = p[3];
    if (tau1 < 1e-9 || tau2 < 1e-9) return false;
    out.resize(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i)
      out[i] = double_exp_eval(pts[i].x, tau1, tau2, k, d) - pts[i].y;
    return true;
  };

  const double taus[3] = {span / 10, span / 3, span};
  const double ks[3] = {0.5, 1.0, 2.0};
  std::vector<double> ds = {0.0};
  if (tmin != 0.0) ds.push_back(tmin);

  bool have_best = false;
  LMResult best;
  int n_failed = 0;
  for (double t1 : taus)
    for (double t2 : taus)
      for (double k : ks)
        for (double d : ds) {
          LMResult r = lm_fit(residuals, {t1, t2, k, d}, int(pts.size()));
          if (!r.finite_start) {
            ++n_failed;
            continue;
          }
          const bool better =
              !have_best || r.rms < best.rms * (1.0 - 1e-12) ||
              (std::abs(r.rms - best.rms) <= best.rms * 1e-12 &&
               r.params[0] < best.params[0]);
          if (better) {
            best = r;
            have_best = true;
          }
        }
  if (!have_best) {
    fit.note = msg("all ", n_failed, " starts left the model domain");
    return fit;
  }
  fit.tau1 = best.params[0];
  fit.tau2 = best.params[1];
  fit.k = best.params[2];
  fit.d = best.params[3];
  fit.rms = best.rms;
  fit.converged = best.converged;
  fit.non_physical = fit.tau1 <= 0 || fit.tau2 <= 0;
  if (fit.non_physical) fit.note = "time constant <= 0";
  return fit;
}

// ---------------------------------------------------------------------------
// F(s) = a * exp(c * s) + b, linking sensitivity values s to Fisher traces F.

struct ExpLinkFit {
  double a = 0, b = 0, c = 0;
  double rms = 0;
  bool converged = false;
  bool degenerate = false;
  std::string note;
};

inline ExpLinkFit fit_exp_link(const std::vector<FitPoint>& pts) {
  require(pts.size() >= 3, msg("fit_exp_link: need at least 3 points, got ",
                               pts.size()));
  double smin = pts[0].x, smax = pts[0].x, fmin = pts[0].y, fmax = pts[0].y;
  for (const FitPoint& p : pts) {
    smin = std::min(smin, p.x);
    smax = std::max(smax, p.x);
    fmin = std::min(fmin, p.y);
    fmax = std::max(fmax, p.y);
  }
  ExpLinkFit fit;
  if (smax - smin <= 0) {
    fit.degenerate = true;
    fit.note = "constant sensitivity values";
    return fit;
  }
  if (fmax - fmin <= 0) {
    // flat response: c is unidentifiable, only the level a + b is pinned
    fit.a = 0;
    fit.b = fmin;
    fit.c = 0;
    fit.converged = true;
    fit.note = "constant trace values; only the level a + b is identified";
    return fit;
  }

  ResidualFn residuals = [&pts](const std::vector<double>& p,
                                std::vector<double>& out) {
    const double a = p[0], b = p[1], c = p[2];
    out.resize(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double e = c * pts[i].x;
      if (e > 500) return false;
      out[i] = a * std::exp(e) + b - pts[i].y;
    }
    return true;
  };

  const double frange = std::max(fmax - fmin, 1e-12);
  LMResult r = lm_fit(residuals, {frange, fmin, 1.0 / (smax - smin)},
                      int(pts.size()));
  fit.a = r.params[0];
  fit.b = r.params[1];
  fit.c = r.params[2];
  fit.rms = r.rms;
  fit.converged = r.converged;
  if (!r.finite_start) fit.note = "initialization outside model domain";
  return fit;
}

}  // namespace plab
