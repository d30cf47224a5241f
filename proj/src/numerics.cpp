#include "fairmed/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fairmed/errors.hpp"

namespace fairmed {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kNormTolerance = 1e-4;

template <typename T>
double kl_impl(std::span<const T> p) {
  if (p.empty()) throw InvalidArgument("kl_to_uniform: empty distribution");
  double total = 0.0;
  for (T v : p) {
    if (!std::isfinite(static_cast<double>(v)) || v < 0)
      throw InvalidArgument("kl_to_uniform: entries must be finite and non-negative");
    total += static_cast<double>(v);
  }
  if (std::abs(total - 1.0) > kNormTolerance)
    throw InvalidArgument("kl_to_uniform: input sums to " + std::to_string(total));
  const double log_n = std::log(static_cast<double>(p.size()));
  double kl = 0.0;
  // Renormalize so rounding in float inputs does not read as divergence.
  for (T v : p) {
    const double q = static_cast<double>(v) / total;
    if (q < kProbFloor) continue;
    kl += q * (std::log(q) + log_n);
  }
  return std::max(kl, 0.0);
}

}  // namespace

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

Vector matvec(const Matrix& a, std::span<const float> x) {
  if (x.size() != a.cols) throw InvalidArgument("matvec: shape mismatch");
  Vector y(a.rows);
  for (std::size_t r = 0; r < a.rows; ++r) y[r] = static_cast<float>(dot(a.row(r), x));
  return y;
}

Vector matvec_bias(const Matrix& a, std::span<const float> x, std::span<const float> b) {
  if (b.size() != a.rows) throw InvalidArgument("matvec_bias: bias length mismatch");
  Vector y = matvec(a, x);
  for (std::size_t r = 0; r < a.rows; ++r) y[r] += b[r];
  return y;
}

Vector matvec_transposed(const Matrix& a, std::span<const float> x) {
  if (x.size() != a.rows) throw InvalidArgument("matvec_transposed: shape mismatch");
  std::vector<double> acc(a.cols, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double xr = x[r];
    if (xr == 0.0) continue;
    auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols; ++c) acc[c] += xr * row[c];
  }
  return Vector(acc.begin(), acc.end());
}

void add_inplace(std::span<float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw InvalidArgument("add_inplace: length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

double linf_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw InvalidArgument("linf_distance: length mismatch");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    d = std::max(d, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return d;
}

double l2_norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

Vector softmax(std::span<const float> logits) {
  if (logits.empty()) throw InvalidArgument("softmax: empty input");
  const float mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> e(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - mx);
    z += e[i];
  }
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(e[i] / z);
  return out;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("softmax: empty input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

double log_softmax_at(std::span<const float> logits, std::size_t index) {
  if (index >= logits.size()) throw InvalidArgument("log_softmax_at: index out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float l : logits) z += std::exp(static_cast<double>(l) - mx);
  return static_cast<double>(logits[index]) - mx - std::log(z);
}

double kl_to_uniform(std::span<const float> p) { return kl_impl(p); }
double kl_to_uniform(std::span<const double> p) { return kl_impl(p); }

Vector project_linf(std::span<const float> v, std::span<const float> center, float eps) {
  if (v.size() != center.size()) throw InvalidArgument("project_linf: length mismatch");
  if (!(eps >= 0.0f)) throw InvalidArgument("project_linf: eps must be non-negative");
  const double e = eps;
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float c = center[i];
    float lo = c - eps;
    float hi = c + eps;
    if (static_cast<double>(c) - lo > e) lo = std::nextafter(lo, std::numeric_limits<float>::infinity());
    if (static_cast<double>(hi) - c > e) hi = std::nextafter(hi, -std::numeric_limits<float>::infinity());
    out[i] = std::clamp(v[i], lo, hi);
  }
  return out;
}

Vector sign(std::span<const float> v) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0f ? 1.0f : (v[i] < 0.0f ? -1.0f : 0.0f);
  return out;
}

std::vector<double> finite_diff_gradient(const ScalarFunction& f, std::span<const double> x,
                                         double h) {
  if (!(h > 0.0)) throw InvalidArgument("finite_diff_gradient: h must be positive");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

float gelu(float x) {
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::erf(xd / std::sqrt(2.0))));
}

void require_finite(std::span<const float> v, std::string_view what) {
  for (float x : v)
    if (!std::isfinite(x)) throw NumericError("non-finite value in " + std::string(what));
}

std::size_t argmax(std::span<const float> v) {
  if (v.empty()) throw InvalidArgument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace fairmed
