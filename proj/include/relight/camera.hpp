#pragma once

// Pinhole cameras described by a 3x4 projection matrix P = [M | p4] mapping
// world points to homogeneous pixel coordinates. Rays and depths are measured
// along unit ray directions from the camera center.

#include <array>
#include <cstdio>
#include <string>
#include <vector>

#include "relight/core.hpp"

namespace relight {

struct Camera {
  mat3 M;
  float3 p4;
  int width = 0, height = 0;

  // Derived quantities, filled by finalize().
  mat3 Minv;
  float3 center;

  void finalize() {
    Minv = inverse(M);
    center = -(Minv * p4);
  }

  // Unit ray through a pixel position (use x+0.5, y+0.5 for pixel centers).
  void pixel_ray(float px, float py, float3& origin, float3& dir) const {
    origin = center;
    float3 d = Minv * float3{px, py, 1.0f};
    // orient so points in front project with positive depth
    float3 m3{M(2, 0), M(2, 1), M(2, 2)};
    if (dot(m3, d) < 0) d = -d;
    dir = normalize(d);
  }

  // Projects a world point; depth is the distance along the unit pixel ray.
  // Returns false behind the camera.
  bool project(const float3& x, float2& pix, float& depth) const {
    float3 h = M * x + p4;
    if (h.z <= 0) return false;
    pix = {h.x / h.z, h.y / h.z};
    depth = length(x - center);
    return true;
  }

  float3 unproject(float px, float py, float depth) const {
    float3 o, d;
    pixel_ray(px, py, o, d);
    return o + d * depth;
  }

  static Camera look_at(const float3& eye, const float3& target, const float3& up_hint,
                        float focal_px, int w, int h) {
    float3 fwd = normalize(target - eye);
    float3 right = normalize(cross(fwd, up_hint));
    float3 down = cross(fwd, right);  // image y grows downward
    mat3 R;
    for (int c = 0; c < 3; ++c) {
      R(0, c) = right[c];
      R(1, c) = down[c];
      R(2, c) = fwd[c];
    }
    mat3 K;
    K(0, 0) = focal_px; K(0, 1) = 0;        K(0, 2) = 0.5f * w;
    K(1, 0) = 0;        K(1, 1) = focal_px; K(1, 2) = 0.5f * h;
    K(2, 0) = 0;        K(2, 1) = 0;        K(2, 2) = 1;
    Camera cam;
    cam.M = K * R;
    cam.p4 = K * (R * (-eye));
    cam.width = w;
    cam.height = h;
    cam.finalize();
    return cam;
  }
};

// Plain-text camera file: three rows of four numbers (the 3x4 projection).
inline void save_camera(const std::string& path, const Camera& cam) {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError(cat("save_camera: cannot open ", path));
  for (int r = 0; r < 3; ++r)
    std::fprintf(f, "%.9g %.9g %.9g %.9g\n", cam.M(r, 0), cam.M(r, 1), cam.M(r, 2), cam.p4[r]);
  std::fclose(f);
}

inline Camera load_camera(const std::string& path, int width = 0, int height = 0) {
  FILE* f = std::fopen(path.c_str(), "r");
  if (!f) throw IoError(cat("load_camera: cannot open ", path));
  Camera cam;
  for (int r = 0; r < 3; ++r) {
    float a, b, c, d;
    if (std::fscanf(f, "%f %f %f %f", &a, &b, &c, &d) != 4) {
      std::fclose(f);
      throw IoError(cat("load_camera: ", path, ": expected 12 numbers"));
    }
    cam.M(r, 0) = a; cam.M(r, 1) = b; cam.M(r, 2) = c; cam.p4[r] = d;
  }
  std::fclose(f);
  cam.width = width;
  cam.height = height;
  cam.finalize();
  return cam;
}

}  // namespace relight
