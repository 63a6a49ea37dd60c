#pragma once

// Articulated proxy body: a 16-joint skeleton driving tessellated capsule
// segments with linear blend skinning, a rectangular per-bone UV atlas, and
// the mappings the rest of the pipeline needs:
//   world point  ->  (u, v, h) local surface coordinates (BVH nearest triangle)
//   (u, v)       ->  surface point + tangent frame
//   world point  ->  canonical (rest-pose, normalized) coordinates
//
// Charts are disjoint rectangles in a 4x4 atlas grid with gutter margins, so
// UV lookups can never mix body parts.

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "relight/core.hpp"

namespace relight {

// ---------------------------------------------------------------- skeleton

struct BoneSpec {
  std::string name;
  int parent = -1;   // joint/bone index, -1 for the root
  float3 start;      // joint position (rest pose, meters)
  float3 end;        // bone end point (child joint or extremity tip)
  float radius = 0.05f;
};

struct BodyConfig {
  int segments = 12;           // vertices around each capsule
  int cap_rings = 3;           // rings per hemispherical cap
  float ring_spacing = 0.06f;  // target cylinder ring spacing, meters
  float chart_margin = 0.004f; // atlas gutter half-width (~4 texels at 1024)
  float blend_radius = 0.03f;  // LBS blend zone along the bone from its joint
  float shell = 0.08f;         // |h| acceptance half-width, meters
  std::vector<BoneSpec> bones;
};

// Upright rest pose, +Z up, T-pose arms along +-X, heels near z=0.
inline BodyConfig default_body() {
  BodyConfig cfg;
  auto bone = [&](const char* name, int parent, float3 s, float3 e, float r) {
    cfg.bones.push_back({name, parent, s, e, r});
  };
  // torso chain
  bone("pelvis", -1, {0, 0, 1.00f}, {0, 0, 1.15f}, 0.13f);
  bone("spine", 0, {0, 0, 1.15f}, {0, 0, 1.35f}, 0.12f);
  bone("chest", 1, {0, 0, 1.35f}, {0, 0, 1.50f}, 0.13f);
  bone("head", 2, {0, 0, 1.50f}, {0, 0, 1.72f}, 0.09f);
  // arms
  bone("l_shoulder", 2, {0.17f, 0, 1.44f}, {0.45f, 0, 1.44f}, 0.045f);
  bone("r_shoulder", 2, {-0.17f, 0, 1.44f}, {-0.45f, 0, 1.44f}, 0.045f);
  bone("l_elbow", 4, {0.45f, 0, 1.44f}, {0.70f, 0, 1.44f}, 0.04f);
  bone("r_elbow", 5, {-0.45f, 0, 1.44f}, {-0.70f, 0, 1.44f}, 0.04f);
  bone("l_wrist", 6, {0.70f, 0, 1.44f}, {0.82f, 0, 1.44f}, 0.03f);
  bone("r_wrist", 7, {-0.70f, 0, 1.44f}, {-0.82f, 0, 1.44f}, 0.03f);
  // legs
  bone("l_hip", 0, {0.10f, 0, 0.98f}, {0.10f, 0, 0.55f}, 0.07f);
  bone("r_hip", 0, {-0.10f, 0, 0.98f}, {-0.10f, 0, 0.55f}, 0.07f);
  bone("l_knee", 10, {0.10f, 0, 0.55f}, {0.10f, 0, 0.14f}, 0.055f);
  bone("r_knee", 11, {-0.10f, 0, 0.55f}, {-0.10f, 0, 0.14f}, 0.055f);
  bone("l_ankle", 12, {0.10f, 0, 0.14f}, {0.10f, 0.14f, 0.05f}, 0.04f);
  bone("r_ankle", 13, {-0.10f, 0, 0.14f}, {-0.10f, 0.14f, 0.05f}, 0.04f);
  return cfg;
}

inline void save_body_config(const std::string& path, const BodyConfig& cfg) {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError(cat("save_body_config: cannot open ", path));
  std::fprintf(f, "segments %d\ncap_rings %d\nring_spacing %g\nchart_margin %g\n",
               cfg.segments, cfg.cap_rings, cfg.ring_spacing, cfg.chart_margin);
  std::fprintf(f, "blend_radius %g\nshell %g\n", cfg.blend_radius, cfg.shell);
  for (const auto& b : cfg.bones)
    std::fprintf(f, "bone %s %d  %g %g %g  %g %g %g  %g\n", b.name.c_str(), b.parent, b.start.x,
                 b.start.y, b.start.z, b.end.x, b.end.y, b.end.z, b.radius);
  std::fclose(f);
}

inline BodyConfig load_body_config(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "r");
  if (!f) throw IoError(cat("load_body_config: cannot open ", path));
  BodyConfig cfg;
  char key[64];
  while (std::fscanf(f, "%63s", key) == 1) {
    std::string k(key);
    bool ok = true;
    if (k == "segments") ok = std::fscanf(f, "%d", &cfg.segments) == 1;
    else if (k == "cap_rings") ok = std::fscanf(f, "%d", &cfg.cap_rings) == 1;
    else if (k == "ring_spacing") ok = std::fscanf(f, "%f", &cfg.ring_spacing) == 1;
    else if (k == "chart_margin") ok = std::fscanf(f, "%f", &cfg.chart_margin) == 1;
    else if (k == "blend_radius") ok = std::fscanf(f, "%f", &cfg.blend_radius) == 1;
    else if (k == "shell") ok = std::fscanf(f, "%f", &cfg.shell) == 1;
    else if (k == "bone") {
      BoneSpec b;
      char name[64];
      ok = std::fscanf(f, "%63s %d %f %f %f %f %f %f %f", name, &b.parent, &b.start.x,
                       &b.start.y, &b.start.z, &b.end.x, &b.end.y, &b.end.z, &b.radius) == 9;
      b.name = name;
      if (ok) cfg.bones.push_back(std::move(b));
    } else {
      std::fclose(f);
      throw ConfigError(cat("load_body_config: unknown key '", k, "' in ", path));
    }
    if (!ok) {
      std::fclose(f);
      throw IoError(cat("load_body_config: malformed value for '", k, "' in ", path));
    }
  }
  std::fclose(f);
  if (cfg.bones.empty()) throw ConfigError(cat("load_body_config: no bones in ", path));
  return cfg;
}

// ---------------------------------------------------------------- pose

struct Pose {
  std::vector<float3> joint_rotations;  // axis-angle per joint
  mat3 global_rotation = mat3::identity();
  float3 global_translation{0, 0, 0};

  static Pose rest(int joints) {
    Pose p;
    p.joint_rotations.assign(size_t(joints), float3{0, 0, 0});
    return p;
  }

  void validate(int joints) const {
    if (int(joint_rotations.size()) != joints)
      throw ShapeError(cat("Pose: ", joint_rotations.size(), " joint rotations for ", joints,
                           " joints"));
    mat3 rrt = global_rotation * transpose(global_rotation);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        float want = i == j ? 1.0f : 0.0f;
        if (std::abs(rrt(i, j) - want) > 1e-5f)
          throw ShapeError("Pose: global rotation is not orthonormal");
      }
    if (std::abs(det(global_rotation) - 1.0f) > 1e-5f)
      throw ShapeError("Pose: global rotation must have determinant +1");
  }
};

// Animation file: one frame per line; frame index, J*3 axis-angle values,
// 9 values of the global rotation (row major), 3 of the translation.
inline void save_animation(const std::string& path, const std::vector<Pose>& frames) {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError(cat("save_animation: cannot open ", path));
  for (size_t i = 0; i < frames.size(); ++i) {
    const Pose& p = frames[i];
    std::fprintf(f, "%zu", i);
    for (const auto& r : p.joint_rotations) std::fprintf(f, " %.9g %.9g %.9g", r.x, r.y, r.z);
    for (int k = 0; k < 9; ++k) std::fprintf(f, " %.9g", p.global_rotation.m[k]);
    std::fprintf(f, " %.9g %.9g %.9g\n", p.global_translation.x, p.global_translation.y,
                 p.global_translation.z);
  }
  std::fclose(f);
}

inline std::vector<Pose> load_animation(const std::string& path, int joints) {
  FILE* f = std::fopen(path.c_str(), "r");
  if (!f) throw IoError(cat("load_animation: cannot open ", path));
  std::vector<Pose> frames;
  long idx;
  while (std::fscanf(f, "%ld", &idx) == 1) {
    Pose p;
    p.joint_rotations.resize(size_t(joints));
    bool ok = true;
    for (int j = 0; j < joints && ok; ++j)
      ok = std::fscanf(f, "%f %f %f", &p.joint_rotations[size_t(j)].x,
                       &p.joint_rotations[size_t(j)].y, &p.joint_rotations[size_t(j)].z) == 3;
    for (int k = 0; k < 9 && ok; ++k) ok = std::fscanf(f, "%f", &p.global_rotation.m[k]) == 1;
    if (ok)
      ok = std::fscanf(f, "%f %f %f", &p.global_translation.x, &p.global_translation.y,
                       &p.global_translation.z) == 3;
    if (!ok) {
      std::fclose(f);
      throw IoError(cat("load_animation: malformed frame ", idx, " in ", path));
    }
    frames.push_back(std::move(p));
  }
  std::fclose(f);
  return frames;
}

// ---------------------------------------------------------------- triangle BVH

struct Triangle {
  int a, b, c;
  int chart;
};

namespace geom {

// Closest point on triangle (Ericson), with barycentric output.
inline float3 closest_point_triangle(const float3& p, const float3& a, const float3& b,
                                     const float3& c, float3& bary) {
  float3 ab = b - a, ac = c - a, ap = p - a;
  float d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0 && d2 <= 0) { bary = {1, 0, 0}; return a; }
  float3 bp = p - b;
  float d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0 && d4 <= d3) { bary = {0, 1, 0}; return b; }
  float vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    float v = d1 / (d1 - d3);
    bary = {1 - v, v, 0};
    return a + ab * v;
  }
  float3 cp = p - c;
  float d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0 && d5 <= d6) { bary = {0, 0, 1}; return c; }
  float vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    float w = d2 / (d2 - d6);
    bary = {1 - w, 0, w};
    return a + ac * w;
  }
  float va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    float w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    bary = {0, 1 - w, w};
    return b + (c - b) * w;
  }
  float denom = 1.0f / (va + vb + vc);
  float v = vb * denom, w = vc * denom;
  bary = {1 - v - w, v, w};
  return a + ab * v + ac * w;
}

// Moller-Trumbore; returns t along the ray, or a negative value on miss.
inline float ray_triangle(const float3& o, const float3& d, const float3& a, const float3& b,
                          const float3& c, float3* bary_out = nullptr) {
  float3 e1 = b - a, e2 = c - a;
  float3 pv = cross(d, e2);
  float det_ = dot(e1, pv);
  if (std::abs(det_) < 1e-12f) return -1;
  float inv = 1.0f / det_;
  float3 tv = o - a;
  float u = dot(tv, pv) * inv;
  if (u < -1e-7f || u > 1.0f + 1e-7f) return -1;
  float3 qv = cross(tv, e1);
  float v = dot(d, qv) * inv;
  if (v < -1e-7f || u + v > 1.0f + 1e-7f) return -1;
  float t = dot(e2, qv) * inv;
  if (bary_out) *bary_out = {1 - u - v, u, v};
  return t;
}

}  // namespace geom

class TriangleBvh {
 public:
  void build(const std::vector<float3>& verts, const std::vector<Triangle>& tris) {
    verts_ = &verts;
    tris_ = &tris;
    int n = int(tris.size());
    order_.resize(size_t(n));
    for (int i = 0; i < n; ++i) order_[size_t(i)] = i;
    boxes_.resize(size_t(n));
    centroids_.resize(size_t(n));
    for (int i = 0; i < n; ++i) {
      const Triangle& t = tris[size_t(i)];
      AABB box;
      box.expand(verts[size_t(t.a)]);
      box.expand(verts[size_t(t.b)]);
      box.expand(verts[size_t(t.c)]);
      boxes_[size_t(i)] = box;
      centroids_[size_t(i)] = box.center();
    }
    nodes_.clear();
    nodes_.reserve(size_t(2 * n));
    build_node(0, n);
  }

  struct ClosestHit {
    int face = -1;
    float dist_sq = std::numeric_limits<float>::max();
    float3 point;
    float3 bary;
  };

  ClosestHit closest(const float3& p) const {
    ClosestHit best;
    closest_rec(0, p, best);
    return best;
  }

  struct RayHit {
    int face = -1;
    float t = std::numeric_limits<float>::max();
    float3 bary;
  };

  RayHit raycast(const float3& o, const float3& d, float tmin = 1e-5f,
                 float tmax = std::numeric_limits<float>::max()) const {
    RayHit best;
    raycast_rec(0, o, d, tmin, tmax, best);
    return best;
  }

  bool any_hit(const float3& o, const float3& d, float tmin, float tmax) const {
    return any_hit_rec(0, o, d, tmin, tmax);
  }

  const AABB& bounds() const { return nodes_[0].box; }

 private:
  struct Node {
    AABB box;
    int left = -1, right = -1;
    int begin = 0, count = 0;  // leaf triangles in order_
  };

  int build_node(int begin, int end) {
    int idx = int(nodes_.size());
    nodes_.emplace_back();
    AABB box;
    for (int i = begin; i < end; ++i) box.expand(boxes_[size_t(order_[size_t(i)])]);
    nodes_[size_t(idx)].box = box;
    int count = end - begin;
    if (count <= 4) {
      nodes_[size_t(idx)].begin = begin;
      nodes_[size_t(idx)].count = count;
      return idx;
    }
    float3 ext = box.extent();
    int axis = ext.x > ext.y ? (ext.x > ext.z ? 0 : 2) : (ext.y > ext.z ? 1 : 2);
    int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                       float ca = centroids_[size_t(a)][axis], cb = centroids_[size_t(b)][axis];
                       return ca < cb || (ca == cb && a < b);
                     });
    int l = build_node(begin, mid);
    int r = build_node(mid, end);
    nodes_[size_t(idx)].left = l;
    nodes_[size_t(idx)].right = r;
    return idx;
  }

  void leaf_closest(const Node& node, const float3& p, ClosestHit& best) const {
    for (int i = node.begin; i < node.begin + node.count; ++i) {
      int f = order_[size_t(i)];
      const Triangle& t = (*tris_)[size_t(f)];
      float3 bary;
      float3 q = geom::closest_point_triangle(p, (*verts_)[size_t(t.a)], (*verts_)[size_t(t.b)],
                                              (*verts_)[size_t(t.c)], bary);
      float d2 = length_sq(p - q);
      // ties broken toward the lowest face id for determinism
      if (d2 < best.dist_sq || (d2 == best.dist_sq && f < best.face)) {
        best.dist_sq = d2;
        best.face = f;
        best.point = q;
        best.bary = bary;
      }
    }
  }

  void closest_rec(int ni, const float3& p, ClosestHit& best) const {
    const Node& node = nodes_[size_t(ni)];
    if (node.box.dist_sq(p) > best.dist_sq) return;
    if (node.count > 0) {
      leaf_closest(node, p, best);
      return;
    }
    float dl = nodes_[size_t(node.left)].box.dist_sq(p);
    float dr = nodes_[size_t(node.right)].box.dist_sq(p);
    if (dl < dr) {
      closest_rec(node.left, p, best);
      if (dr <= best.dist_sq) closest_rec(node.right, p, best);
    } else {
      closest_rec(node.right, p, best);
      if (dl <= best.dist_sq) closest_rec(node.left, p, best);
    }
  }

  void raycast_rec(int ni, const float3& o, const float3& d, float tmin, float tmax,
                   RayHit& best) const {
    const Node& node = nodes_[size_t(ni)];
    float t0, t1;
    if (!node.box.intersect(o, d, tmin, std::min(tmax, best.t), t0, t1)) return;
    if (node.count > 0) {
      for (int i = node.begin; i < node.begin + node.count; ++i) {
        int f = order_[size_t(i)];
        const Triangle& tr = (*tris_)[size_t(f)];
        float3 bary;
        float t = geom::ray_triangle(o, d, (*verts_)[size_t(tr.a)], (*verts_)[size_t(tr.b)],
                                     (*verts_)[size_t(tr.c)], &bary);
        if (t >= tmin && t <= tmax && (t < best.t || (t == best.t && f < best.face))) {
          best.t = t;
          best.face = f;
          best.bary = bary;
        }
      }
      return;
    }
    raycast_rec(node.left, o, d, tmin, tmax, best);
    raycast_rec(node.right, o, d, tmin, tmax, best);
  }

  bool any_hit_rec(int ni, const float3& o, const float3& d, float tmin, float tmax) const {
    const Node& node = nodes_[size_t(ni)];
    float t0, t1;
    if (!node.box.intersect(o, d, tmin, tmax, t0, t1)) return false;
    if (node.count > 0) {
      for (int i = node.begin; i < node.begin + node.count; ++i) {
        const Triangle& tr = (*tris_)[size_t(order_[size_t(i)])];
        float t = geom::ray_triangle(o, d, (*verts_)[size_t(tr.a)], (*verts_)[size_t(tr.b)],
                                     (*verts_)[size_t(tr.c)]);
        if (t >= tmin && t <= tmax) return true;
      }
      return false;
    }
    return any_hit_rec(node.left, o, d, tmin, tmax) ||
           any_hit_rec(node.right, o, d, tmin, tmax);
  }

  const std::vector<float3>* verts_ = nullptr;
  const std::vector<Triangle>* tris_ = nullptr;
  std::vector<int> order_;
  std::vector<AABB> boxes_;
  std::vector<float3> centroids_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------- proxy mesh

struct ChartRect {
  float x0, y0, x1, y1;
  bool contains(float u, float v) const { return u >= x0 && u <= x1 && v >= y0 && v <= y1; }
};

struct VertexWeights {
  int joint[2] = {0, -1};
  float w[2] = {1, 0};
};

struct LocalCoords {
  float u = 0, v = 0;
  float h = 0;  // signed distance, positive outside
  int face = -1;
};

class ProxyMesh {
 public:
  BodyConfig config;
  std::vector<float3> rest_vertices;
  std::vector<Triangle> faces;
  std::vector<float2> uvs;  // atlas coordinates per vertex
  std::vector<VertexWeights> weights;
  AABB rest_bounds;       // tight bounds of the rest vertices
  AABB canonical_bounds;  // rest bounds padded by the shell width

  int joint_count() const { return int(config.bones.size()); }

  ChartRect chart_rect(int bone) const {
    int cols = grid_cols();
    float cw = 1.0f / cols;
    int cx = bone % cols, cy = bone / cols;
    float m = config.chart_margin;
    return {cx * cw + m, cy * cw + m, (cx + 1) * cw - m, (cy + 1) * cw - m};
  }

  // -1 when (u,v) falls in a gutter or past the last chart.
  int chart_of_uv(float u, float v) const {
    int cols = grid_cols();
    if (u < 0 || u >= 1 || v < 0 || v >= 1) return -1;
    int cx = std::min(int(u * cols), cols - 1);
    int cy = std::min(int(v * cols), cols - 1);
    int bone = cy * cols + cx;
    if (bone >= joint_count()) return -1;
    return chart_rect(bone).contains(u, v) ? bone : -1;
  }

  // Finds the face whose UV triangle contains (u,v); false in gutters.
  bool lookup_uv(float u, float v, int& face, float3& bary) const {
    if (chart_of_uv(u, v) < 0) return false;
    int gx = std::clamp(int(u * kUvGrid), 0, kUvGrid - 1);
    int gy = std::clamp(int(v * kUvGrid), 0, kUvGrid - 1);
    int found = -1;
    float3 found_bary;
    for (int f : uv_grid_[size_t(gy) * kUvGrid + gx]) {
      const Triangle& t = faces[size_t(f)];
      float2 q0 = uvs[size_t(t.a)], q1 = uvs[size_t(t.b)], q2 = uvs[size_t(t.c)];
      float den = (q1.x - q0.x) * (q2.y - q0.y) - (q2.x - q0.x) * (q1.y - q0.y);
      if (std::abs(den) < 1e-16f) continue;
      float b1 = ((u - q0.x) * (q2.y - q0.y) - (q2.x - q0.x) * (v - q0.y)) / den;
      float b2 = ((q1.x - q0.x) * (v - q0.y) - (u - q0.x) * (q1.y - q0.y)) / den;
      float b0 = 1.0f - b1 - b2;
      const float eps = -1e-5f;
      if (b0 >= eps && b1 >= eps && b2 >= eps && (found < 0 || f < found)) {
        found = f;
        found_bary = {b0, b1, b2};
      }
    }
    if (found < 0) return false;
    face = found;
    bary = found_bary;
    return true;
  }

  static constexpr int kMaxJoints = 32;

  static ProxyMesh build(const BodyConfig& cfg) {
    if (int(cfg.bones.size()) > kMaxJoints)
      throw ConfigError(cat("ProxyMesh: ", cfg.bones.size(), " bones exceeds the limit of ",
                            kMaxJoints));
    ProxyMesh mesh;
    mesh.config = cfg;
    for (int b = 0; b < int(cfg.bones.size()); ++b) mesh.add_capsule(b);
    mesh.fix_windings();
    for (const auto& v : mesh.rest_vertices) mesh.rest_bounds.expand(v);
    mesh.canonical_bounds = mesh.rest_bounds;
    mesh.canonical_bounds.pad(cfg.shell);
    mesh.build_uv_grid();
    return mesh;
  }

  // Rest point -> canonical cube [-1,1]^3 (per-axis normalization).
  float3 normalize_canonical(const float3& rest) const {
    float3 c = canonical_bounds.center();
    float3 e = canonical_bounds.extent() * 0.5f;
    return {(rest.x - c.x) / e.x, (rest.y - c.y) / e.y, (rest.z - c.z) / e.z};
  }
  float3 denormalize_canonical(const float3& canon) const {
    float3 c = canonical_bounds.center();
    float3 e = canonical_bounds.extent() * 0.5f;
    return {canon.x * e.x + c.x, canon.y * e.y + c.y, canon.z * e.z + c.z};
  }

 private:
  static constexpr int kUvGrid = 128;
  std::vector<std::vector<int>> uv_grid_;

  int grid_cols() const {
    int n = joint_count();
    int c = 1;
    while (c * c < n) ++c;
    return c;
  }

  void add_capsule(int bone) {
    const BoneSpec& spec = config.bones[size_t(bone)];
    float3 axis = spec.end - spec.start;
    float len = length(axis);
    if (len < 1e-6f) throw ConfigError(cat("ProxyMesh: bone '", spec.name, "' has zero length"));
    float3 w = axis / len;
    float3 e1, e2;
    make_basis(w, e1, e2);
    float r = spec.radius;
    int seg = config.segments, ncap = config.cap_rings;
    int ncyl = std::max(1, int(std::lround(len / config.ring_spacing)));

    // Profile rings: (axial offset t, radius rho). The first and last rings
    // have a small positive radius; true pole vertices close the caps with
    // non-degenerate fans.
    struct Ring { float t, rho; };
    std::vector<Ring> rings;
    const float pole_eps = 0.05f;  // fraction of the quarter arc kept for the pole fan
    for (int k = 0; k <= ncap; ++k) {
      float beta = (k == 0 ? pole_eps : float(k)) * (0.5f * kPi) / ncap;
      rings.push_back({-r * std::cos(beta), r * std::sin(beta)});
    }
    for (int i = 1; i <= ncyl; ++i) rings.push_back({len * float(i) / ncyl, r});
    for (int k = 1; k <= ncap; ++k) {
      float gamma = (k == ncap ? ncap - pole_eps : float(k)) * (0.5f * kPi) / ncap;
      rings.push_back({len + r * std::sin(gamma), r * std::cos(gamma)});
    }

    // v coordinate by cumulative profile arc length, poles at v=0 and v=1.
    std::vector<float> vcoord(rings.size());
    float cum = 0;
    std::vector<float> arc(rings.size(), 0.0f);
    for (size_t i = 1; i < rings.size(); ++i) {
      float dt = rings[i].t - rings[i - 1].t;
      float dr = rings[i].rho - rings[i - 1].rho;
      cum += std::sqrt(dt * dt + dr * dr);
      arc[i] = cum;
    }
    float pole_arc = r * pole_eps * (0.5f * kPi) / ncap;  // pole to first ring
    float total = pole_arc + cum + pole_arc;
    for (size_t i = 0; i < rings.size(); ++i) vcoord[i] = (pole_arc + arc[i]) / total;

    ChartRect rect = chart_rect(bone);
    auto to_atlas = [&](float cu, float cv) -> float2 {
      return {rect.x0 + cu * (rect.x1 - rect.x0), rect.y0 + cv * (rect.y1 - rect.y0)};
    };
    auto weight_for = [&](float t_axial) {
      VertexWeights vw;
      vw.joint[0] = bone;
      if (spec.parent >= 0) {
        float s = clampf(t_axial / config.blend_radius, 0.0f, 1.0f);
        float wself = 0.5f + 0.25f * (1.0f - std::cos(kPi * s));
        if (wself < 1.0f - 1e-6f) {
          vw.w[0] = wself;
          vw.joint[1] = spec.parent;
          vw.w[1] = 1.0f - wself;
        }
      }
      return vw;
    };

    int base = int(rest_vertices.size());
    int stride = seg + 1;
    for (size_t ri = 0; ri < rings.size(); ++ri) {
      for (int s = 0; s <= seg; ++s) {
        float cu = float(s) / seg;
        float phi = cu * 2.0f * kPi;
        float3 radial = e1 * std::cos(phi) + e2 * std::sin(phi);
        rest_vertices.push_back(spec.start + w * rings[ri].t + radial * rings[ri].rho);
        uvs.push_back(to_atlas(cu, vcoord[ri]));
        weights.push_back(weight_for(rings[ri].t));
      }
    }
    for (size_t ri = 0; ri + 1 < rings.size(); ++ri)
      for (int s = 0; s < seg; ++s) {
        int v0 = base + int(ri) * stride + s;
        int v1 = v0 + 1;
        int v2 = v0 + stride;
        int v3 = v2 + 1;
        faces.push_back({v0, v1, v2, bone});
        faces.push_back({v1, v3, v2, bone});
      }

    // Pole vertices close the caps; their fans have real area because the
    // first/last rings sit at a small positive radius.
    int pole_a = int(rest_vertices.size());
    rest_vertices.push_back(spec.start - w * r);
    uvs.push_back(to_atlas(0.5f, 0.0f));
    weights.push_back(weight_for(-r));
    int pole_b = int(rest_vertices.size());
    rest_vertices.push_back(spec.end + w * r);
    uvs.push_back(to_atlas(0.5f, 1.0f));
    weights.push_back(weight_for(len + r));
    int last = base + int(rings.size() - 1) * stride;
    for (int s = 0; s < seg; ++s) {
      faces.push_back({pole_a, base + s, base + s + 1, bone});
      faces.push_back({pole_b, last + s + 1, last + s, bone});
    }
  }

  // Orient every face so its geometric normal points away from the bone axis.
  void fix_windings() {
    for (auto& t : faces) {
      const BoneSpec& spec = config.bones[size_t(t.chart)];
      float3 a = rest_vertices[size_t(t.a)], b = rest_vertices[size_t(t.b)],
             c = rest_vertices[size_t(t.c)];
      float3 centroid = (a + b + c) / 3.0f;
      float3 axis = spec.end - spec.start;
      float tt = clampf(dot(centroid - spec.start, axis) / length_sq(axis), 0.0f, 1.0f);
      float3 on_axis = spec.start + axis * tt;
      if (dot(cross(b - a, c - a), centroid - on_axis) < 0) std::swap(t.b, t.c);
    }
  }

  void build_uv_grid() {
    uv_grid_.assign(size_t(kUvGrid) * kUvGrid, {});
    for (int f = 0; f < int(faces.size()); ++f) {
      const Triangle& t = faces[size_t(f)];
      float2 q0 = uvs[size_t(t.a)], q1 = uvs[size_t(t.b)], q2 = uvs[size_t(t.c)];
      float ulo = std::min({q0.x, q1.x, q2.x}), uhi = std::max({q0.x, q1.x, q2.x});
      float vlo = std::min({q0.y, q1.y, q2.y}), vhi = std::max({q0.y, q1.y, q2.y});
      int x0 = std::clamp(int(ulo * kUvGrid) - 1, 0, kUvGrid - 1);
      int x1 = std::clamp(int(uhi * kUvGrid) + 1, 0, kUvGrid - 1);
      int y0 = std::clamp(int(vlo * kUvGrid) - 1, 0, kUvGrid - 1);
      int y1 = std::clamp(int(vhi * kUvGrid) + 1, 0, kUvGrid - 1);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) uv_grid_[size_t(y) * kUvGrid + x].push_back(f);
    }
  }
};

// ---------------------------------------------------------------- posed body

struct SurfaceSample {
  float3 position;
  float3 tangent, bitangent, normal;
  int face = -1;
};

std::vector<float3> pose_vertices(const ProxyMesh& mesh, const Pose& pose,
                                  std::vector<Transform>* joint_out = nullptr);

// Immutable posed snapshot. The BVH references the member vectors, so the
// object is pinned in place (query methods are const and thread-safe).
class PosedBody {
 public:
  const ProxyMesh* mesh = nullptr;
  Pose pose;
  std::vector<float3> vertices;
  std::vector<Transform> joint_transforms;  // rest -> posed (global rotation folded in)
  TriangleBvh bvh;
  AABB bounds;

  PosedBody(const ProxyMesh& m, const Pose& p) : mesh(&m), pose(p) {
    vertices = pose_vertices(m, p, &joint_transforms);
    bvh.build(vertices, m.faces);
    for (const auto& v : vertices) bounds.expand(v);
  }
  PosedBody(const PosedBody&) = delete;
  PosedBody& operator=(const PosedBody&) = delete;
  PosedBody(PosedBody&&) = delete;
  PosedBody& operator=(PosedBody&&) = delete;

  // Nearest surface point regardless of distance.
  LocalCoords project_nearest(const float3& x) const {
    auto hit = bvh.closest(x);
    const Triangle& t = mesh->faces[size_t(hit.face)];
    float2 q0 = mesh->uvs[size_t(t.a)], q1 = mesh->uvs[size_t(t.b)], q2 = mesh->uvs[size_t(t.c)];
    LocalCoords lc;
    lc.face = hit.face;
    lc.u = q0.x * hit.bary.x + q1.x * hit.bary.y + q2.x * hit.bary.z;
    lc.v = q0.y * hit.bary.x + q1.y * hit.bary.y + q2.y * hit.bary.z;
    float3 n = face_normal(hit.face);
    float d = std::sqrt(hit.dist_sq);
    lc.h = dot(x - hit.point, n) >= 0 ? d : -d;
    return lc;
  }

  // Shell-limited projection; empty when the point is off-body.
  std::optional<LocalCoords> project_to_surface(const float3& x) const {
    LocalCoords lc = project_nearest(x);
    if (std::abs(lc.h) > mesh->config.shell) return std::nullopt;
    return lc;
  }

  // (u,v) -> posed surface point with an orthonormal tangent frame; empty for
  // gutter texels.
  std::optional<SurfaceSample> uv_to_surface(float u, float v) const {
    int face;
    float3 bary;
    if (!mesh->lookup_uv(u, v, face, bary)) return std::nullopt;
    return sample_face(face, bary);
  }

  SurfaceSample sample_face(int face, const float3& bary) const {
    const Triangle& t = mesh->faces[size_t(face)];
    const float3& p0 = vertices[size_t(t.a)];
    const float3& p1 = vertices[size_t(t.b)];
    const float3& p2 = vertices[size_t(t.c)];
    SurfaceSample s;
    s.face = face;
    s.position = p0 * bary.x + p1 * bary.y + p2 * bary.z;
    s.normal = face_normal(face);
    // tangent along increasing u from the UV parameterization
    float2 q0 = mesh->uvs[size_t(t.a)], q1 = mesh->uvs[size_t(t.b)], q2 = mesh->uvs[size_t(t.c)];
    float du1 = q1.x - q0.x, dv1 = q1.y - q0.y;
    float du2 = q2.x - q0.x, dv2 = q2.y - q0.y;
    float det_ = du1 * dv2 - du2 * dv1;
    float3 dpdu;
    if (std::abs(det_) > 1e-12f)
      dpdu = ((p1 - p0) * dv2 - (p2 - p0) * dv1) / det_;
    else
      dpdu = p1 - p0;
    s.tangent = normalize(dpdu - s.normal * dot(s.normal, dpdu));
    if (length_sq(s.tangent) < 0.25f) {
      float3 t2, b2;
      make_basis(s.normal, t2, b2);
      s.tangent = t2;
    }
    s.bitangent = cross(s.normal, s.tangent);
    return s;
  }

  float3 face_normal(int face) const {
    const Triangle& t = mesh->faces[size_t(face)];
    return normalize(cross(vertices[size_t(t.b)] - vertices[size_t(t.a)],
                           vertices[size_t(t.c)] - vertices[size_t(t.a)]));
  }

  // Blended rest->posed transform at a surface location.
  Transform blended_transform(int face, const float3& bary) const {
    const Triangle& t = mesh->faces[size_t(face)];
    float acc[3] = {bary.x, bary.y, bary.z};
    int vids[3] = {t.a, t.b, t.c};
    float jw[ProxyMesh::kMaxJoints] = {0};
    for (int k = 0; k < 3; ++k) {
      const VertexWeights& vw = mesh->weights[size_t(vids[k])];
      for (int s = 0; s < 2; ++s)
        if (vw.joint[s] >= 0) jw[vw.joint[s]] += acc[k] * vw.w[s];
    }
    Transform blend;
    blend.rot = mat3{};
    for (auto& m : blend.rot.m) m = 0;
    blend.trans = {0, 0, 0};
    for (int j = 0; j < mesh->joint_count(); ++j) {
      if (jw[j] == 0.0f) continue;
      blend.rot = blend.rot + joint_transforms[size_t(j)].rot * jw[j];
      blend.trans += joint_transforms[size_t(j)].trans * jw[j];
    }
    return blend;
  }

  // Inverse LBS through the nearest surface point, then normalization into
  // the canonical cube.
  float3 canonical_unwarp(const float3& x) const {
    auto hit = bvh.closest(x);
    Transform blend = blended_transform(hit.face, hit.bary);
    if (std::abs(det(blend.rot)) < 1e-8f)
      throw Error("canonical_unwarp: blended transform is singular");
    float3 rest = inverse(blend.rot) * (x - pose.global_translation - blend.trans);
    return mesh->normalize_canonical(rest);
  }

  // Forward LBS of a rest point using the weights at a given face location
  // (testing aid; the inverse of canonical_unwarp for weight-pure regions).
  float3 pose_rest_point(const float3& rest, int face, const float3& bary) const {
    Transform blend = blended_transform(face, bary);
    return blend(rest) + pose.global_translation;
  }
};

inline std::vector<float3> pose_vertices(const ProxyMesh& mesh, const Pose& pose,
                                         std::vector<Transform>* joint_out) {
  pose.validate(mesh.joint_count());
  int J = mesh.joint_count();
  // forward kinematics: joint frames sit at the rest joint positions
  std::vector<Transform> global(static_cast<size_t>(J));
  for (int j = 0; j < J; ++j) {
    const BoneSpec& b = mesh.config.bones[size_t(j)];
    Transform local{axis_angle_to_mat3(pose.joint_rotations[size_t(j)]), {0, 0, 0}};
    if (b.parent < 0) {
      global[size_t(j)] = Transform{mat3::identity(), b.start} * local;
    } else {
      const BoneSpec& p = mesh.config.bones[size_t(b.parent)];
      global[size_t(j)] =
          global[size_t(b.parent)] * Transform{mat3::identity(), b.start - p.start} * local;
    }
  }
  std::vector<Transform> skin(static_cast<size_t>(J));
  for (int j = 0; j < J; ++j) {
    const BoneSpec& b = mesh.config.bones[size_t(j)];
    // rest -> posed, with the global rotation folded in
    Transform g = global[size_t(j)] * Transform{mat3::identity(), -b.start};
    skin[size_t(j)] = Transform{pose.global_rotation * g.rot, pose.global_rotation * g.trans};
  }
  std::vector<float3> out(mesh.rest_vertices.size());
  parallel_for(int64_t(out.size()), [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      const VertexWeights& vw = mesh.weights[size_t(i)];
      const float3& v = mesh.rest_vertices[size_t(i)];
      float3 acc = skin[size_t(vw.joint[0])](v) * vw.w[0];
      if (vw.joint[1] >= 0) acc += skin[size_t(vw.joint[1])](v) * vw.w[1];
      out[size_t(i)] = acc + pose.global_translation;
    }
  });
  if (joint_out) *joint_out = std::move(skin);
  return out;
}


}  // namespace relight
