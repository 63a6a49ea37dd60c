#pragma once

// Environment lighting: HDR radiance recovery from exposure stacks, mirror
// sphere unwrapping into latitude-longitude maps, solid-angle-correct
// resampling, and per-texel direction / solid-angle tables.
//
// Lat-long convention (used everywhere): row 0 is the north pole (+Z up),
// theta in (0, pi) down rows, phi in [0, 2pi) measured from +X toward +Y
// across columns. Texel centers sit at half-integer angles.

#include <functional>
#include <utility>
#include <vector>

#include "relight/core.hpp"
#include "relight/image.hpp"

namespace relight {

// ---------------------------------------------------------------- texel geometry

inline float3 latlong_direction(float theta, float phi) {
  float st = std::sin(theta);
  return {st * std::cos(phi), st * std::sin(phi), std::cos(theta)};
}

// Solid angles are kept in double so the sphere-coverage identity
// (their sum telescopes to 4pi) survives summation over large grids.
inline void texel_geometry(int H, int W, std::vector<float3>& directions,
                           std::vector<double>& solid_angles) {
  if (H < 1 || W < 1) throw ShapeError(cat("texel_geometry: bad grid ", H, "x", W));
  directions.resize(size_t(H) * W);
  solid_angles.resize(size_t(H) * W);
  for (int i = 0; i < H; ++i) {
    float theta = (i + 0.5f) * kPi / H;
    // exact band area: (2pi/W) * (cos(theta_i) - cos(theta_{i+1}))
    double band = (std::cos(double(i) * kPi / H) - std::cos(double(i + 1) * kPi / H)) *
                  (2.0 * kPi / W);
    for (int j = 0; j < W; ++j) {
      float phi = (j + 0.5f) * 2.0f * kPi / W;
      directions[size_t(i) * W + j] = latlong_direction(theta, phi);
      solid_angles[size_t(i) * W + j] = band;
    }
  }
}

inline std::pair<int, int> direction_to_texel(const float3& dir, int H, int W) {
  float theta = std::acos(clampf(dir.z, -1.0f, 1.0f));
  float phi = std::atan2(dir.y, dir.x);
  if (phi < 0) phi += 2.0f * kPi;
  int i = std::clamp(int(theta / kPi * H), 0, H - 1);
  int j = int(phi / (2.0f * kPi) * W) % W;
  return {i, j};
}

// ---------------------------------------------------------------- environment map

struct EnvironmentMap {
  Image radiance;                    // H x W x 3
  std::vector<float3> directions;    // per texel, unit length
  std::vector<double> solid_angles;  // per texel, sums to 4pi

  int height() const { return radiance.height; }
  int width() const { return radiance.width; }
  int texel_count() const { return radiance.width * radiance.height; }
  float3 rad(int t) const { return radiance.rgb(t % width(), t / width()); }
  const float3& dir(int t) const { return directions[size_t(t)]; }
  double omega(int t) const { return solid_angles[size_t(t)]; }

  static EnvironmentMap from_radiance(Image img) {
    if (img.channels != 3)
      throw ShapeError(cat("EnvironmentMap: need 3 channels, got ", img.channels));
    for (auto& v : img.px) v = std::max(v, 0.0f);
    EnvironmentMap env;
    texel_geometry(img.height, img.width, env.directions, env.solid_angles);
    env.radiance = std::move(img);
    return env;
  }

  static EnvironmentMap constant(int H, int W, const float3& value) {
    Image img(W, H, 3);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) img.set_rgb(x, y, value);
    return from_radiance(std::move(img));
  }

  // Per-channel total flux: sum radiance * solid angle.
  float3 total_flux() const {
    double fx = 0, fy = 0, fz = 0;
    for (int t = 0; t < texel_count(); ++t) {
      float3 r = rad(t);
      double sa = omega(t);
      fx += double(r.x) * sa;
      fy += double(r.y) * sa;
      fz += double(r.z) * sa;
    }
    return {float(fx), float(fy), float(fz)};
  }
};

// ---------------------------------------------------------------- hdr merge

struct ExposureStack {
  std::vector<Image> images;          // linear response, values in [0,1]
  std::vector<float> exposure_times;  // seconds, strictly positive
};

// Weighted average of per-exposure radiance estimates Z/dt with hat weights
// w(z) = 1 - |2z - 1|. Pixels bright in every exposure (hat weight zero
// everywhere) fall back to the shortest exposure; dark ones to the longest.
inline Image hdr_merge(const ExposureStack& stack, std::vector<uint8_t>* saturated = nullptr) {
  if (stack.images.empty()) throw ShapeError("hdr_merge: empty exposure stack");
  if (stack.images.size() != stack.exposure_times.size())
    throw ShapeError(cat("hdr_merge: ", stack.images.size(), " images vs ",
                         stack.exposure_times.size(), " exposure times"));
  const Image& first = stack.images[0];
  for (const auto& img : stack.images)
    if (!img.same_shape(first))
      throw ShapeError("hdr_merge: exposure images have mismatched shapes");
  for (float t : stack.exposure_times)
    if (!(t > 0)) throw ShapeError("hdr_merge: exposure times must be positive");

  size_t shortest = 0, longest = 0;
  for (size_t j = 1; j < stack.exposure_times.size(); ++j) {
    if (stack.exposure_times[j] < stack.exposure_times[shortest]) shortest = j;
    if (stack.exposure_times[j] > stack.exposure_times[longest]) longest = j;
  }

  Image out(first.width, first.height, first.channels);
  if (saturated) saturated->assign(size_t(first.width) * first.height, 0);
  auto hat = [](float z) { return 1.0f - std::abs(2.0f * z - 1.0f); };
  for (int y = 0; y < first.height; ++y)
    for (int x = 0; x < first.width; ++x) {
      bool flagged = false;
      for (int c = 0; c < first.channels; ++c) {
        double num = 0, den = 0;
        for (size_t j = 0; j < stack.images.size(); ++j) {
          float z = stack.images[j].at(x, y, c);
          float w = hat(z);
          num += double(w) * (z / stack.exposure_times[j]);
          den += w;
        }
        if (den > 1e-9) {
          out.at(x, y, c) = float(num / den);
        } else if (first.at(x, y, c) >= 0.5f || stack.images[shortest].at(x, y, c) >= 0.5f) {
          out.at(x, y, c) =
              stack.images[shortest].at(x, y, c) / stack.exposure_times[shortest];
          flagged = true;
        } else {
          out.at(x, y, c) = stack.images[longest].at(x, y, c) / stack.exposure_times[longest];
        }
      }
      if (flagged && saturated) (*saturated)[size_t(y) * first.width + x] = 1;
    }
  return out;
}

// ---------------------------------------------------------------- sphere probe

// Orthographic mirror-sphere model. view_dir points from the camera toward
// the sphere; image x runs along `right`, image y runs down.
struct ProbeGeometry {
  float2 center;      // sphere circle center, pixels
  float radius = 0;   // pixels
  float3 view_dir{0, 1, 0};

  void basis(float3& right, float3& up) const {
    float3 d = normalize(view_dir);
    float3 t, b;
    make_basis(d, t, b);
    right = t;
    up = b;
  }
};

// Surface normal and reflection direction for a probe pixel; returns false
// outside the sphere circle.
inline bool probe_reflection(const ProbeGeometry& geo, float px, float py, float3& refl,
                             float& cos_incidence) {
  float dx = (px - geo.center.x) / geo.radius;
  float dy = -(py - geo.center.y) / geo.radius;  // image y grows downward
  float rr = dx * dx + dy * dy;
  if (rr >= 1.0f) return false;
  float nz = std::sqrt(1.0f - rr);
  float3 right, up;
  geo.basis(right, up);
  float3 d = normalize(geo.view_dir);
  float3 n = right * dx + up * dy - d * nz;
  refl = normalize(d - n * (2.0f * dot(d, n)));
  cos_incidence = nz;
  return true;
}

// Forward model: renders the probe picture a camera looking along view_dir
// would see for a given distant environment.
inline Image render_probe(const std::function<float3(const float3&)>& env,
                          const ProbeGeometry& geo, int width, int height) {
  Image img(width, height, 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      float3 r;
      float ci;
      if (probe_reflection(geo, x + 0.5f, y + 0.5f, r, ci))
        img.set_rgb(x, y, env(r));
    }
  return img;
}

struct UnwrapResult {
  EnvironmentMap env;
  std::vector<uint8_t> covered;  // per texel: received at least one sample
};

// Bins mirror-sphere reflections into a lat-long map. Multiple shots blend
// with cosine-of-incidence weights, which favors texels seen away from each
// view's grazing rim; pixels within rim_exclusion_deg of the rim are skipped.
inline UnwrapResult sphere_unwrap(const std::vector<std::pair<Image, ProbeGeometry>>& shots,
                                  int H, int W, float rim_exclusion_deg = 5.0f) {
  if (shots.empty()) throw ShapeError("sphere_unwrap: no probe shots");
  for (const auto& [img, geo] : shots) {
    if (geo.center.x - geo.radius < 0 || geo.center.y - geo.radius < 0 ||
        geo.center.x + geo.radius > img.width || geo.center.y + geo.radius > img.height)
      throw ShapeError("sphere_unwrap: sphere circle extends outside the probe image");
  }
  std::vector<double> acc(size_t(H) * W * 3, 0.0);
  std::vector<double> wsum(size_t(H) * W, 0.0);
  float min_cos = std::sin(rim_exclusion_deg * kPi / 180.0f);
  for (const auto& [img, geo] : shots) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        float3 r;
        float ci;
        if (!probe_reflection(geo, x + 0.5f, y + 0.5f, r, ci)) continue;
        if (ci < min_cos) continue;
        auto [ti, tj] = direction_to_texel(r, H, W);
        size_t t = size_t(ti) * W + tj;
        float3 c = img.rgb(x, y);
        acc[t * 3 + 0] += double(ci) * c.x;
        acc[t * 3 + 1] += double(ci) * c.y;
        acc[t * 3 + 2] += double(ci) * c.z;
        wsum[t] += ci;
      }
  }
  Image out(W, H, 3);
  std::vector<uint8_t> covered(size_t(H) * W, 0);
  for (size_t t = 0; t < wsum.size(); ++t)
    if (wsum[t] > 0) {
      covered[t] = 1;
      out.px[t * 3 + 0] = float(acc[t * 3 + 0] / wsum[t]);
      out.px[t * 3 + 1] = float(acc[t * 3 + 1] / wsum[t]);
      out.px[t * 3 + 2] = float(acc[t * 3 + 2] / wsum[t]);
    }
  return {EnvironmentMap::from_radiance(std::move(out)), std::move(covered)};
}

// ---------------------------------------------------------------- resampling

// Texels are rectangles in (phi, cos theta) space, where rectangle area IS
// solid angle; destination texels average source radiance weighted by exact
// rectangle overlap, which preserves total flux.
inline EnvironmentMap resample_latlong(const EnvironmentMap& src, int H, int W) {
  if (H < 1 || W < 1) throw ShapeError(cat("resample_latlong: bad target ", H, "x", W));
  int Hs = src.height(), Ws = src.width();
  auto src_cos = [&](int i) { return std::cos(double(i) * kPi / Hs); };
  auto dst_cos = [&](int i) { return std::cos(double(i) * kPi / H); };
  Image out(W, H, 3);
  for (int i = 0; i < H; ++i) {
    double chi = dst_cos(i), clo = dst_cos(i + 1);  // chi > clo
    // source rows intersecting this cos-theta band
    int s0 = std::clamp(int(std::floor(double(i) * Hs / H)), 0, Hs - 1);
    int s1 = std::clamp(int(std::ceil(double(i + 1) * Hs / H)), 1, Hs);
    for (int j = 0; j < W; ++j) {
      double plo = double(j) * 2.0 * kPi / W, phi = double(j + 1) * 2.0 * kPi / W;
      int t0 = std::clamp(int(std::floor(double(j) * Ws / W)), 0, Ws - 1);
      int t1 = std::clamp(int(std::ceil(double(j + 1) * Ws / W)), 1, Ws);
      double num[3] = {0, 0, 0}, den = 0;
      for (int si = s0; si < s1; ++si) {
        double band = std::min(chi, src_cos(si)) - std::max(clo, src_cos(si + 1));
        if (band <= 0) continue;
        for (int sj = t0; sj < t1; ++sj) {
          double a = double(sj) * 2.0 * kPi / Ws, b = double(sj + 1) * 2.0 * kPi / Ws;
          double wphi = std::min(phi, b) - std::max(plo, a);
          if (wphi <= 0) continue;
          double ov = band * wphi;
          float3 c = src.radiance.rgb(sj, si);
          num[0] += ov * c.x;
          num[1] += ov * c.y;
          num[2] += ov * c.z;
          den += ov;
        }
      }
      if (den > 0)
        out.set_rgb(j, i, {float(num[0] / den), float(num[1] / den), float(num[2] / den)});
    }
  }
  return EnvironmentMap::from_radiance(std::move(out));
}

}  // namespace relight
