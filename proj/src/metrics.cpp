#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "udic/evalbench.hpp"

namespace udic {

double psnr_from_mse(double mse) {
  if (mse < 0 || std::isnan(mse)) throw std::invalid_argument("psnr: invalid MSE");
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double psnr(const Image& x, const Image& x_hat) { return psnr_from_mse(distortion(x, x_hat)); }

std::string_view bd_method_name(BdMethod m) { return m == BdMethod::kCubic ? "cubic" : "pchip"; }

BdMethod parse_bd_method(std::string_view name) {
  if (name == "cubic") return BdMethod::kCubic;
  if (name == "pchip") return BdMethod::kPchip;
  throw std::invalid_argument("unknown BD-rate method '" + std::string(name) + "' (expected cubic or pchip)");
}

namespace {

struct Samples {
  std::vector<double> psnr;
  std::vector<double> log_rate;
};

Samples prepare(const RDCurve& curve, const char* which) {
  if (curve.size() < 4)
    throw BdRateError(std::string(which) + " curve has " + std::to_string(curve.size()) + " points, need at least 4");
  RDCurve sorted = curve;
  std::sort(sorted.begin(), sorted.end(), [](const RDPoint& a, const RDPoint& b) { return a.bpp < b.bpp; });
  Samples s;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& p = sorted[i];
    if (!(p.bpp > 0) || !std::isfinite(p.bpp)) throw BdRateError(std::string(which) + " curve has a non-positive rate");
    if (!std::isfinite(p.psnr)) throw BdRateError(std::string(which) + " curve has a non-finite PSNR");
    if (i > 0 && !(p.bpp > sorted[i - 1].bpp && p.psnr > sorted[i - 1].psnr))
      throw BdRateError(std::string(which) + " curve is not strictly monotone");
    s.psnr.push_back(p.psnr);
    s.log_rate.push_back(std::log(p.bpp));
  }
  return s;
}

// Integral over [lo, hi] of the least-squares cubic through (psnr, log rate).
// PSNR is centred and scaled before the fit for conditioning.
double cubic_integral(const Samples& s, double lo, double hi) {
  const auto n = static_cast<Eigen::Index>(s.psnr.size());
  const double mid = 0.5 * (s.psnr.front() + s.psnr.back());
  const double half = std::max(0.5 * (s.psnr.back() - s.psnr.front()), 1e-12);
  Eigen::MatrixXd a(n, 4);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = (s.psnr[i] - mid) / half;
    a.row(i) << 1, t, t * t, t * t * t;
    b(i) = s.log_rate[i];
  }
  const Eigen::Vector4d c = a.colPivHouseholderQr().solve(b);
  auto antiderivative = [&](double x) {
    const double t = (x - mid) / half;
    return half * (c(0) * t + c(1) * t * t / 2 + c(2) * t * t * t / 3 + c(3) * t * t * t * t / 4);
  };
  return antiderivative(hi) - antiderivative(lo);
}

// Integral over [lo, hi] of the monotone piecewise-cubic Hermite interpolant
// (Fritsch-Carlson slopes).
double pchip_integral(const Samples& s, double lo, double hi) {
  const std::size_t n = s.psnr.size();
  const auto& x = s.psnr;
  const auto& y = s.log_rate;
  std::vector<double> h(n - 1), delta(n - 1), d(n);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    h[i] = x[i + 1] - x[i];
    delta[i] = (y[i + 1] - y[i]) / h[i];
  }
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (delta[i - 1] * delta[i] <= 0) {
      d[i] = 0;
    } else {
      const double w1 = 2 * h[i] + h[i - 1], w2 = h[i] + 2 * h[i - 1];
      d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
    }
  }
  auto endpoint = [](double h0, double h1, double d0, double d1) {
    double v = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if (v * d0 <= 0) v = 0;
    else if (d0 * d1 <= 0 && std::abs(v) > std::abs(3 * d0)) v = 3 * d0;
    return v;
  };
  d[0] = endpoint(h[0], h[1], delta[0], delta[1]);
  d[n - 1] = endpoint(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);

  // Integral of segment i from its left end to local coordinate t in [0, 1].
  auto partial = [&](std::size_t i, double t) {
    const double t2 = t * t, t3 = t2 * t, t4 = t3 * t;
    const double h00 = t4 / 2 - t3 + t, h10 = t4 / 4 - 2 * t3 / 3 + t2 / 2;
    const double h01 = -t4 / 2 + t3, h11 = t4 / 4 - t3 / 3;
    return h[i] * (h00 * y[i] + h10 * h[i] * d[i] + h01 * y[i + 1] + h11 * h[i] * d[i + 1]);
  };
  double total = 0;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double a = std::max(lo, x[i]), b = std::min(hi, x[i + 1]);
    if (b <= a) continue;
    total += partial(i, (b - x[i]) / h[i]) - partial(i, (a - x[i]) / h[i]);
  }
  return total;
}

}  // namespace

double bd_rate(const RDCurve& anchor, const RDCurve& test, BdMethod method) {
  const Samples a = prepare(anchor, "anchor");
  const Samples t = prepare(test, "test");
  const double lo = std::max(a.psnr.front(), t.psnr.front());
  const double hi = std::min(a.psnr.back(), t.psnr.back());
  if (!(hi > lo)) throw BdRateError("PSNR ranges of the curves do not overlap");
  const auto integral = method == BdMethod::kCubic ? cubic_integral : pchip_integral;
  const double mean_diff = (integral(t, lo, hi) - integral(a, lo, hi)) / (hi - lo);
  return (std::exp(mean_diff) - 1.0) * 100.0;
}

}  // namespace udic
