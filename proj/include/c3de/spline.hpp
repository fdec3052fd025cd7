// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace c3de {

/// Natural cubic spline over shared knots with independent channels.
/// On interval i, s(t) = a + b*u + c*u^2 + d*u^3 with u = t - t_i.
class SplinePath {
 public:
  SplinePath() = default;

  /// `observations` is knot-major: observations[k * channels + ch].
  static SplinePath fit(std::vector<double> times, std::span<const double> observations,
                        std::size_t channels);

  std::size_t channels() const noexcept { return channels_; }
  std::size_t intervals() const noexcept { return knots_.empty() ? 0 : knots_.size() - 1; }
  const std::vector<double>& knot_times() const noexcept { return knots_; }
  double t_begin() const { return knots_.front(); }
  double t_end() const { return knots_.back(); }

  // coefficient access: coeff(interval, channel)[0..3] = a, b, c, d
  const double* coeff(std::size_t interval, std::size_t channel) const {
    return &coeffs_[(interval * channels_ + channel) * 4];
  }

  void eval_into(double t, std::span<double> out) const { evaluate(t, out, 0); }
  void derivative_into(double t, std::span<double> out) const { evaluate(t, out, 1); }
  void second_derivative_into(double t, std::span<double> out) const { evaluate(t, out, 2); }

  std::vector<double> eval(double t) const {
    std::vector<double> out(channels_);
    evaluate(t, out, 0);
    return out;
  }

  std::vector<double> derivative(double t) const {
    std::vector<double> out(channels_);
    evaluate(t, out, 1);
    return out;
  }

  std::vector<double> second_derivative(double t) const {
    std::vector<double> out(channels_);
    evaluate(t, out, 2);
    return out;
  }

 private:
  std::size_t locate(double t) const;
  void evaluate(double t, std::span<double> out, int order) const;

  std::vector<double> knots_;
  std::size_t channels_ = 0;
  std::vector<double> coeffs_;
};

inline SplinePath fit_natural_cubic(std::vector<double> times,
                                    std::span<const double> observations,
                                    std::size_t channels) {
  return SplinePath::fit(std::move(times), observations, channels);
}

inline SplinePath SplinePath::fit(std::vector<double> times,
                                  std::span<const double> observations,
                                  std::size_t channels) {
  const std::size_t n = times.size();
  if (n < 2) {
    throw std::invalid_argument("spline: need at least 2 knots, got " + std::to_string(n));
  }
  if (channels == 0) throw std::invalid_argument("spline: channel count must be positive");
  if (observations.size() != n * channels) {
    throw std::invalid_argument("spline: expected " + std::to_string(n * channels) +
                                " observations, got " + std::to_string(observations.size()));
  }
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (!(times[i + 1] > times[i])) {
      std::ostringstream os;
      os << "spline: knot times must be strictly increasing (t[" << i << "]=" << times[i]
         << ", t[" << i + 1 << "]=" << times[i + 1] << ")";
      throw std::invalid_argument(os.str());
    }
  }
  for (std::size_t i = 0; i < observations.size(); ++i) {
    if (!std::isfinite(observations[i])) {
      throw std::invalid_argument("spline: non-finite observation at knot " +
                                  std::to_string(i / channels) + ", channel " +
                                  std::to_string(i % channels));
    }
  }

  SplinePath path;
  path.knots_ = std::move(times);
  path.channels_ = channels;
  path.coeffs_.assign((n - 1) * channels * 4, 0.0);
  const auto& t = path.knots_;

  std::vector<double> h(n - 1);
  for (std::size_t i = 0; i + 1 < n; ++i) h[i] = t[i + 1] - t[i];

  // Second derivatives M_1..M_{n-2} from the tridiagonal system (Thomas
  // algorithm); M_0 = M_{n-1} = 0. The matrix is shared by all channels, so
  // the forward elimination factors are computed once.
  const std::size_t m = n >= 2 ? n - 2 : 0;
  std::vector<double> diag(m), upper(m), lower(m), cprime(m), denom(m);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t i = j + 1;
    lower[j] = h[i - 1];
    diag[j] = 2.0 * (h[i - 1] + h[i]);
    upper[j] = h[i];
  }
  for (std::size_t j = 0; j < m; ++j) {
    denom[j] = diag[j] - (j > 0 ? lower[j] * cprime[j - 1] : 0.0);
    cprime[j] = upper[j] / denom[j];
  }

  std::vector<double> M(n), rhs(m), dprime(m);
  for (std::size_t ch = 0; ch < channels; ++ch) {
    auto y = [&](std::size_t k) { return observations[k * channels + ch]; };
    for (std::size_t j = 0; j < m; ++j) {
      const std::size_t i = j + 1;
      rhs[j] = 6.0 * ((y(i + 1) - y(i)) / h[i] - (y(i) - y(i - 1)) / h[i - 1]);
    }
    for (std::size_t j = 0; j < m; ++j) {
      dprime[j] = (rhs[j] - (j > 0 ? lower[j] * dprime[j - 1] : 0.0)) / denom[j];
    }
    std::fill(M.begin(), M.end(), 0.0);
    for (std::size_t j = m; j-- > 0;) {
      M[j + 1] = dprime[j] - (j + 1 < m ? cprime[j] * M[j + 2] : 0.0);
    }
    for (std::size_t i = 0; i + 1 < n; ++i) {
      double* c = &path.coeffs_[(i * channels + ch) * 4];
      c[0] = y(i);
      c[1] = (y(i + 1) - y(i)) / h[i] - h[i] * (2.0 * M[i] + M[i + 1]) / 6.0;
      c[2] = M[i] / 2.0;
      c[3] = (M[i + 1] - M[i]) / (6.0 * h[i]);
    }
  }
  return path;
}

inline std::size_t SplinePath::locate(double t) const {
  const double lo = knots_.front();
  const double hi = knots_.back();
  // Round-off slack so that solver stages landing on the endpoints count as inside.
  const double slack = 1e-12 * std::max(1.0, hi - lo);
  if (!(t >= lo - slack && t <= hi + slack)) {
    std::ostringstream os;
    os << "spline: t=" << t << " outside fitted span [" << lo << ", " << hi << "]";
    throw std::out_of_range(os.str());
  }
  auto it = std::upper_bound(knots_.begin(), knots_.end(), t);
  std::size_t idx = it == knots_.begin() ? 0 : static_cast<std::size_t>(it - knots_.begin()) - 1;
  return std::min(idx, knots_.size() - 2);
}

inline void SplinePath::evaluate(double t, std::span<double> out, int order) const {
  if (knots_.empty()) throw std::logic_error("spline: evaluated before fit");
  if (out.size() != channels_) {
    throw std::invalid_argument("spline: output buffer has " + std::to_string(out.size()) +
                                " slots for " + std::to_string(channels_) + " channels");
  }
  const std::size_t i = locate(t);
  const double u = t - knots_[i];
  const double* c = &coeffs_[i * channels_ * 4];
  for (std::size_t ch = 0; ch < channels_; ++ch, c += 4) {
    switch (order) {
      case 0: out[ch] = c[0] + u * (c[1] + u * (c[2] + u * c[3])); break;
      case 1: out[ch] = c[1] + u * (2.0 * c[2] + 3.0 * u * c[3]); break;
      default: out[ch] = 2.0 * c[2] + 6.0 * u * c[3]; break;
    }
  }
}

}  // namespace c3de
