#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace gppde {

inline constexpr const char* kVersion = "0.1.0";

// Maximum spatial/space-time dimension supported by the derivative machinery.
inline constexpr int kMaxDim = 3;

/// A coordinate tuple in the problem domain (space or space-time; time is
/// always coordinate 0 in space-time problems).
struct Point {
  int dim = 0;
  std::array<double, kMaxDim> x{};

  Point() = default;
  Point(double a, double b) : dim(2), x{a, b, 0.0} {}
  Point(double a, double b, double c) : dim(3), x{a, b, c} {}
  static Point d1(double a) {
    Point p;
    p.dim = 1;
    p.x[0] = a;
    return p;
  }
  double operator[](int i) const { return x[static_cast<size_t>(i)]; }
  double& operator[](int i) { return x[static_cast<size_t>(i)]; }
};

inline double sq_dist(const Point& a, const Point& b) {
  double s = 0.0;
  for (int i = 0; i < a.dim; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

/// Partial-derivative multi-index with per-coordinate orders, |alpha| <= 2.
struct MultiIndex {
  int dim = 0;
  std::array<int, kMaxDim> o{};

  MultiIndex() = default;
  explicit MultiIndex(int d) : dim(d) {}
  MultiIndex(int d, std::initializer_list<int> orders) : dim(d) {
    int i = 0;
    for (int v : orders) o[static_cast<size_t>(i++)] = v;
  }
  static MultiIndex zero(int d) { return MultiIndex(d); }
  static MultiIndex unit(int d, int i) {
    MultiIndex m(d);
    m.o[static_cast<size_t>(i)] = 1;
    return m;
  }
  static MultiIndex second(int d, int i) {
    MultiIndex m(d);
    m.o[static_cast<size_t>(i)] = 2;
    return m;
  }
  int operator[](int i) const { return o[static_cast<size_t>(i)]; }
  int total() const {
    int t = 0;
    for (int i = 0; i < dim; ++i) t += o[static_cast<size_t>(i)];
    return t;
  }
  bool operator==(const MultiIndex& m) const { return dim == m.dim && o == m.o; }
};

/// Axis-aligned box, or a union of axis-aligned faces (for boundary sampling).
struct Region {
  struct Face {
    // The face is {x : x[fixed_axis] == fixed_value, lo[i] <= x[i] <= hi[i] otherwise}.
    int fixed_axis = 0;
    double fixed_value = 0.0;
    std::array<double, kMaxDim> lo{};
    std::array<double, kMaxDim> hi{};
  };
  int dim = 0;
  bool is_box = true;
  std::array<double, kMaxDim> lo{};
  std::array<double, kMaxDim> hi{};
  std::vector<Face> faces;

  static Region box2(double x0, double x1, double y0, double y1) {
    Region r;
    r.dim = 2;
    r.is_box = true;
    r.lo = {x0, y0, 0.0};
    r.hi = {x1, y1, 0.0};
    return r;
  }
  static Region face_union(int dim, std::vector<Face> fs) {
    Region r;
    r.dim = dim;
    r.is_box = false;
    r.faces = std::move(fs);
    return r;
  }
  double face_measure(const Face& f) const {
    double m = 1.0;
    for (int i = 0; i < dim; ++i)
      if (i != f.fixed_axis) m *= (f.hi[static_cast<size_t>(i)] - f.lo[static_cast<size_t>(i)]);
    return m;
  }
};

// ---- error types ------------------------------------------------------------

struct NotPositiveDefinite : std::runtime_error {
  explicit NotPositiveDefinite(const std::string& what) : std::runtime_error(what) {}
};
struct DimensionMismatch : std::runtime_error {
  explicit DimensionMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct SingularKkt : std::runtime_error {
  explicit SingularKkt(const std::string& what) : std::runtime_error(what) {}
};
struct UnsupportedOrder : std::runtime_error {
  explicit UnsupportedOrder(const std::string& what) : std::runtime_error(what) {}
};
struct VariantMismatch : std::runtime_error {
  explicit VariantMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct InvalidCounts : std::runtime_error {
  explicit InvalidCounts(const std::string& what) : std::runtime_error(what) {}
};
struct OracleNotConverged : std::runtime_error {
  explicit OracleNotConverged(const std::string& what) : std::runtime_error(what) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
/// Raised when the inner linear solve cannot be factorized at the current
/// hyperparameters; the outer loop treats it as an infinite-loss step.
struct RejectedTheta : std::runtime_error {
  explicit RejectedTheta(const std::string& what) : std::runtime_error(what) {}
};
struct AbortedRun : std::runtime_error {
  explicit AbortedRun(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace gppde
