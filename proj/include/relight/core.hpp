#pragma once

// Small shared toolbox: 3D vector math, rigid transforms, axis-aligned boxes,
// a counter-based RNG (reproducible across thread schedules), a thread-pool-free
// parallel_for, and the error types the whole library throws.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace relight {

inline constexpr float kPi = 3.14159265358979323846f;

// ---------------------------------------------------------------- errors

// Base error. CLI maps subclasses to exit codes: ConfigError -> 3,
// IoError -> 2, anything else -> 1.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

// ---------------------------------------------------------------- vectors

struct float2 {
  float x = 0, y = 0;
  float2() = default;
  float2(float x_, float y_) : x(x_), y(y_) {}
  float& operator[](int i) { return (&x)[i]; }
  float operator[](int i) const { return (&x)[i]; }
};

struct float3 {
  float x = 0, y = 0, z = 0;
  float3() = default;
  float3(float x_, float y_, float z_) : x(x_), y(y_), z(z_) {}
  explicit float3(float s) : x(s), y(s), z(s) {}
  float& operator[](int i) { return (&x)[i]; }
  float operator[](int i) const { return (&x)[i]; }
};

inline float3 operator+(const float3& a, const float3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline float3 operator-(const float3& a, const float3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline float3 operator-(const float3& a) { return {-a.x, -a.y, -a.z}; }
inline float3 operator*(const float3& a, float s) { return {a.x * s, a.y * s, a.z * s}; }
inline float3 operator*(float s, const float3& a) { return a * s; }
inline float3 operator*(const float3& a, const float3& b) { return {a.x * b.x, a.y * b.y, a.z * b.z}; }
inline float3 operator/(const float3& a, float s) { return {a.x / s, a.y / s, a.z / s}; }
inline float3& operator+=(float3& a, const float3& b) { a = a + b; return a; }
inline float3& operator-=(float3& a, const float3& b) { a = a - b; return a; }
inline float3& operator*=(float3& a, float s) { a = a * s; return a; }
inline bool operator==(const float3& a, const float3& b) { return a.x == b.x && a.y == b.y && a.z == b.z; }

inline float dot(const float3& a, const float3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline float3 cross(const float3& a, const float3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline float length_sq(const float3& a) { return dot(a, a); }
inline float length(const float3& a) { return std::sqrt(dot(a, a)); }
inline float3 normalize(const float3& a) {
  float len = length(a);
  return len > 0 ? a / len : float3(0, 0, 0);
}
inline float3 min(const float3& a, const float3& b) {
  return {std::min(a.x, b.x), std::min(a.y, b.y), std::min(a.z, b.z)};
}
inline float3 max(const float3& a, const float3& b) {
  return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}
inline float3 lerp(const float3& a, const float3& b, float t) { return a + (b - a) * t; }
inline float clampf(float v, float lo, float hi) { return v < lo ? lo : (v > hi ? hi : v); }

// Orthonormal basis completing a unit vector n (Duff et al. branchless form).
inline void make_basis(const float3& n, float3& t, float3& b) {
  float sign = n.z >= 0 ? 1.0f : -1.0f;
  float a = -1.0f / (sign + n.z);
  float c = n.x * n.y * a;
  t = {1.0f + sign * n.x * n.x * a, sign * c, -sign * n.x};
  b = {c, sign + n.y * n.y * a, -n.y};
}

// ---------------------------------------------------------------- matrices

// Row-major 3x3.
struct mat3 {
  std::array<float, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};
  static mat3 identity() { return {}; }
  float& operator()(int r, int c) { return m[r * 3 + c]; }
  float operator()(int r, int c) const { return m[r * 3 + c]; }
};

inline float3 operator*(const mat3& a, const float3& v) {
  return {a.m[0] * v.x + a.m[1] * v.y + a.m[2] * v.z,
          a.m[3] * v.x + a.m[4] * v.y + a.m[5] * v.z,
          a.m[6] * v.x + a.m[7] * v.y + a.m[8] * v.z};
}

inline mat3 operator*(const mat3& a, const mat3& b) {
  mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      float s = 0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      r(i, j) = s;
    }
  return r;
}

inline mat3 operator*(const mat3& a, float s) {
  mat3 r = a;
  for (auto& v : r.m) v *= s;
  return r;
}

inline mat3 operator+(const mat3& a, const mat3& b) {
  mat3 r;
  for (int i = 0; i < 9; ++i) r.m[i] = a.m[i] + b.m[i];
  return r;
}

inline mat3 transpose(const mat3& a) {
  mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = a(j, i);
  return r;
}

inline float det(const mat3& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

inline mat3 inverse(const mat3& a) {
  float d = det(a);
  if (std::abs(d) < 1e-20f) throw Error("mat3 inverse: singular matrix");
  float id = 1.0f / d;
  mat3 r;
  r(0, 0) = (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) * id;
  r(0, 1) = (a(0, 2) * a(2, 1) - a(0, 1) * a(2, 2)) * id;
  r(0, 2) = (a(0, 1) * a(1, 2) - a(0, 2) * a(1, 1)) * id;
  r(1, 0) = (a(1, 2) * a(2, 0) - a(1, 0) * a(2, 2)) * id;
  r(1, 1) = (a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0)) * id;
  r(1, 2) = (a(0, 2) * a(1, 0) - a(0, 0) * a(1, 2)) * id;
  r(2, 0) = (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0)) * id;
  r(2, 1) = (a(0, 1) * a(2, 0) - a(0, 0) * a(2, 1)) * id;
  r(2, 2) = (a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0)) * id;
  return r;
}

// Rodrigues rotation from an axis-angle vector (angle = |v| radians).
inline mat3 axis_angle_to_mat3(const float3& v) {
  float angle = length(v);
  if (angle < 1e-12f) return mat3::identity();
  float3 a = v / angle;
  float c = std::cos(angle), s = std::sin(angle), t = 1 - c;
  mat3 r;
  r(0, 0) = c + a.x * a.x * t;
  r(0, 1) = a.x * a.y * t - a.z * s;
  r(0, 2) = a.x * a.z * t + a.y * s;
  r(1, 0) = a.y * a.x * t + a.z * s;
  r(1, 1) = c + a.y * a.y * t;
  r(1, 2) = a.y * a.z * t - a.x * s;
  r(2, 0) = a.z * a.x * t - a.y * s;
  r(2, 1) = a.z * a.y * t + a.x * s;
  r(2, 2) = c + a.z * a.z * t;
  return r;
}

// Affine transform y = R x + t.
struct Transform {
  mat3 rot;
  float3 trans;
  float3 operator()(const float3& p) const { return rot * p + trans; }
  float3 apply_vec(const float3& v) const { return rot * v; }
  static Transform identity() { return {mat3::identity(), {0, 0, 0}}; }
  static Transform translate(const float3& t) { return {mat3::identity(), t}; }
};

inline Transform operator*(const Transform& a, const Transform& b) {
  return {a.rot * b.rot, a.rot * b.trans + a.trans};
}

inline Transform inverse(const Transform& t) {
  mat3 ri = inverse(t.rot);
  return {ri, -(ri * t.trans)};
}

// ---------------------------------------------------------------- boxes

struct AABB {
  float3 lo{std::numeric_limits<float>::max(), std::numeric_limits<float>::max(),
            std::numeric_limits<float>::max()};
  float3 hi{std::numeric_limits<float>::lowest(), std::numeric_limits<float>::lowest(),
            std::numeric_limits<float>::lowest()};

  void expand(const float3& p) { lo = min(lo, p); hi = max(hi, p); }
  void expand(const AABB& b) { lo = min(lo, b.lo); hi = max(hi, b.hi); }
  void pad(float d) { lo -= float3(d, d, d); hi += float3(d, d, d); }
  float3 center() const { return (lo + hi) * 0.5f; }
  float3 extent() const { return hi - lo; }
  bool contains(const float3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
  float dist_sq(const float3& p) const {
    float3 d{std::max({lo.x - p.x, 0.0f, p.x - hi.x}),
             std::max({lo.y - p.y, 0.0f, p.y - hi.y}),
             std::max({lo.z - p.z, 0.0f, p.z - hi.z})};
    return dot(d, d);
  }
  // Slab test; on hit returns [t0, t1] clipped to [tmin, tmax].
  bool intersect(const float3& o, const float3& d, float tmin, float tmax, float& t0,
                 float& t1) const {
    t0 = tmin;
    t1 = tmax;
    for (int i = 0; i < 3; ++i) {
      float inv = 1.0f / d[i];
      float ta = (lo[i] - o[i]) * inv;
      float tb = (hi[i] - o[i]) * inv;
      if (inv < 0) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) return false;
    }
    return true;
  }
};

// ---------------------------------------------------------------- rng

// Counter-based generator: value = mix(seed, stream, counter). Stateless per
// draw, so parallel workers stay reproducible regardless of scheduling.
class CounterRng {
 public:
  explicit CounterRng(uint64_t seed = 0) : seed_(seed) {}

  uint64_t bits(uint64_t stream, uint64_t counter) const {
    uint64_t z = seed_ + 0x9e3779b97f4a7c15ull * (stream + 1) + 0xbf58476d1ce4e5b9ull * counter;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  // Uniform in [0, 1).
  float uniform(uint64_t stream, uint64_t counter) const {
    return float(bits(stream, counter) >> 40) * (1.0f / 16777216.0f);
  }
  double uniform_double(uint64_t stream, uint64_t counter) const {
    return double(bits(stream, counter) >> 11) * (1.0 / 9007199254740992.0);
  }
  // Uniform integer in [0, n).
  uint64_t index(uint64_t stream, uint64_t counter, uint64_t n) const {
    return bits(stream, counter) % n;
  }
  // Standard normal via Box-Muller on two sub-draws of the same counter.
  float normal(uint64_t stream, uint64_t counter) const {
    double u1 = std::max(uniform_double(stream, counter * 2), 1e-12);
    double u2 = uniform_double(stream, counter * 2 + 1);
    return float(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.141592653589793 * u2));
  }
  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
};

// Sequential counter RNG for places that want a stream of draws.
class RngStream {
 public:
  RngStream(const CounterRng& rng, uint64_t stream) : rng_(rng), stream_(stream) {}
  float uniform() { return rng_.uniform(stream_, counter_++); }
  float normal() { return rng_.normal(stream_, counter_++); }
  uint64_t index(uint64_t n) { return rng_.index(stream_, counter_++, n); }

 private:
  CounterRng rng_;
  uint64_t stream_;
  uint64_t counter_ = 0;
};

// ---------------------------------------------------------------- parallel

inline int thread_count() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : int(n);
}

// Splits [0, n) into contiguous chunks, one worker thread per chunk. Each
// index is processed by exactly one thread; fn must only write state owned by
// its indices.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  int workers = std::min<int64_t>(thread_count(), n);
  if (workers <= 1 || n < 256) {
    if (n > 0) fn(0, n);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    threads.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace relight
