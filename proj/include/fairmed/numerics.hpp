#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

namespace fairmed {

using Vector = std::vector<float>;

/// Dense row-major float matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  float& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

// Dot products accumulate in double.
double dot(std::span<const float> a, std::span<const float> b);

/// y = A x
Vector matvec(const Matrix& a, std::span<const float> x);
/// y = A x + b
Vector matvec_bias(const Matrix& a, std::span<const float> x, std::span<const float> b);
/// y = A^T x
Vector matvec_transposed(const Matrix& a, std::span<const float> x);

void add_inplace(std::span<float> a, std::span<const float> b);
double linf_distance(std::span<const float> a, std::span<const float> b);
double l2_norm(std::span<const float> a);

/// Max-subtracted softmax; throws InvalidArgument on empty input.
Vector softmax(std::span<const float> logits);
std::vector<double> softmax(std::span<const double> logits);

/// log(softmax(logits))[index] computed without forming the full distribution.
double log_softmax_at(std::span<const float> logits, std::size_t index);

/// KL(p || U_n). Entries below 1e-12 contribute 0; throws if p is not a
/// distribution within 1e-4.
double kl_to_uniform(std::span<const float> p);
double kl_to_uniform(std::span<const double> p);

/// Per-coordinate clamp of v into [center - eps, center + eps]. The clamp
/// bounds are nudged inward when float rounding of center +/- eps would
/// overshoot, so |out - center| <= eps holds when evaluated in double.
Vector project_linf(std::span<const float> v, std::span<const float> center, float eps);

Vector sign(std::span<const float> v);

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h.
std::vector<double> finite_diff_gradient(const ScalarFunction& f, std::span<const double> x,
                                         double h);

float gelu(float x);

/// Throws NumericError naming `what` if any entry is NaN or Inf.
void require_finite(std::span<const float> v, std::string_view what);

/// Index of the largest entry; ties resolve to the lowest index.
std::size_t argmax(std::span<const float> v);
std::size_t argmax(std::span<const double> v);

}  // namespace fairmed
