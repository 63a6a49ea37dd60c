#pragma once

// Pose-specific geometry baked into UV space: normals from unbiased depth,
// per-direction soft visibility by density ray-marching, and max-weight
// aggregation of multi-view samples into sparse UV maps.

#include <functional>
#include <vector>

#include "relight/camera.hpp"
#include "relight/density.hpp"
#include "relight/envlight.hpp"
#include "relight/image.hpp"

namespace relight {

// ---------------------------------------------------------------- sparse UV maps

struct SparseUVMap {
  int height = 0, width = 0, channels = 0;
  std::vector<float> values;       // H*W*C, defined only where valid
  std::vector<uint8_t> valid;      // H*W
  std::vector<float> best_weight;  // H*W, 0 exactly where invalid

  static SparseUVMap create(int H, int W, int C) {
    SparseUVMap m;
    m.height = H;
    m.width = W;
    m.channels = C;
    m.values.assign(size_t(H) * W * C, 0.0f);
    m.valid.assign(size_t(H) * W, 0);
    m.best_weight.assign(size_t(H) * W, 0.0f);
    return m;
  }

  int texel_of_uv(float u, float v) const {
    if (u < 0 || u >= 1 || v < 0 || v >= 1) return -1;
    int x = std::min(int(u * width), width - 1);
    int y = std::min(int(v * height), height - 1);
    return y * width + x;
  }
  float* at(int texel) { return &values[size_t(texel) * channels]; }
  const float* at(int texel) const { return &values[size_t(texel) * channels]; }
  double coverage(const ProxyMesh& mesh) const {
    int64_t body = 0, covered = 0;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        float u = (x + 0.5f) / width, v = (y + 0.5f) / height;
        if (mesh.chart_of_uv(u, v) < 0) continue;
        ++body;
        if (valid[size_t(y) * width + x]) ++covered;
      }
    return body ? double(covered) / double(body) : 0.0;
  }
};

// Eq. 5 selection: index of the largest weight, ties to the smaller index.
inline int argmax_weight(const std::vector<float>& w) {
  int best = -1;
  float bw = -1;
  for (int i = 0; i < int(w.size()); ++i)
    if (w[size_t(i)] > bw) {
      bw = w[size_t(i)];
      best = i;
    }
  return best;
}

// Writes payload at the texel under (u,v) iff weight beats the stored best.
// Out-of-range coordinates are skipped. Equal weights keep the first writer.
inline bool splat_texel(SparseUVMap& map, float u, float v, float weight, const float* payload) {
  int t = map.texel_of_uv(u, v);
  if (t < 0) return false;
  if (weight <= map.best_weight[size_t(t)]) return false;
  map.best_weight[size_t(t)] = weight;
  map.valid[size_t(t)] = 1;
  std::copy_n(payload, map.channels, map.at(t));
  return true;
}

// Per-ray records: picks the max-weight sample and splats its payload.
// payloads holds one C-vector per sample, row-major.
inline bool splat_ray(SparseUVMap& map, const std::vector<float2>& uvs,
                      const std::vector<float>& weights, const std::vector<float>& payloads) {
  if (uvs.size() != weights.size() || payloads.size() != uvs.size() * size_t(map.channels))
    throw ShapeError(cat("splat_ray: ", uvs.size(), " uvs, ", weights.size(), " weights, ",
                         payloads.size(), " payload floats for ", map.channels, " channels"));
  int n = argmax_weight(weights);
  if (n < 0) return false;
  return splat_texel(map, uvs[size_t(n)].x, uvs[size_t(n)].y, weights[size_t(n)],
                     &payloads[size_t(n) * map.channels]);
}

// ---------------------------------------------------------------- map files

// values as PFM (1 or 3 channels) or VISM (anything else), plus a 1-bit PNG
// validity mask and a PFM best-weight raster.
inline void save_sparse_map(const std::string& dir, const std::string& base,
                            const SparseUVMap& map) {
  if (map.channels == 1 || map.channels == 3) {
    Image img(map.width, map.height, map.channels);
    img.px = map.values;
    save_pfm(dir + "/" + base + ".pfm", img);
  } else {
    save_vism(dir + "/" + base + ".vism", map.height, map.width, map.channels, map.values);
  }
  save_png_mask(dir + "/" + base + "_mask.png", map.valid, map.width, map.height);
  Image wimg(map.width, map.height, 1);
  wimg.px = map.best_weight;
  save_pfm(dir + "/" + base + "_weight.pfm", wimg);
}

inline SparseUVMap load_sparse_map(const std::string& dir, const std::string& base) {
  SparseUVMap map;
  std::string pfm = dir + "/" + base + ".pfm";
  std::string vism = dir + "/" + base + ".vism";
  if (std::filesystem::exists(pfm)) {
    Image img = load_pfm(pfm);
    map.height = img.height;
    map.width = img.width;
    map.channels = img.channels;
    map.values = std::move(img.px);
  } else if (std::filesystem::exists(vism)) {
    map.values = load_vism(vism, map.height, map.width, map.channels);
  } else {
    throw IoError(cat("load_sparse_map: neither ", pfm, " nor ", vism, " exists"));
  }
  int mw = 0, mh = 0;
  map.valid = load_png_mask(dir + "/" + base + "_mask.png", mw, mh);
  if (mw != map.width || mh != map.height)
    throw ShapeError(cat("load_sparse_map: mask ", mw, "x", mh, " vs values ", map.width, "x",
                         map.height));
  Image wimg = load_pfm(dir + "/" + base + "_weight.pfm");
  map.best_weight = std::move(wimg.px);
  return map;
}

// ---------------------------------------------------------------- normals from depth

// Unprojects valid depth pixels and takes central differences over valid
// 4-neighborhoods; pixels missing a neighbor pair in either axis are dropped.
// Normals are oriented against the viewing ray.
inline Image normals_from_depth(const Image& depth, const Camera& cam,
                                const std::vector<uint8_t>& valid,
                                std::vector<uint8_t>& out_valid) {
  int W = depth.width, H = depth.height;
  if (int64_t(valid.size()) != int64_t(W) * H)
    throw ShapeError(cat("normals_from_depth: mask size ", valid.size(), " for ", W, "x", H));
  std::vector<float3> pos(size_t(W) * H);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (valid[size_t(y) * W + x])
        pos[size_t(y) * W + x] = cam.unproject(x + 0.5f, y + 0.5f, depth.at(x, y));
  Image normals(W, H, 3);
  out_valid.assign(size_t(W) * H, 0);
  parallel_for(H, [&](int64_t yb, int64_t ye) {
    for (int64_t y = yb; y < ye; ++y)
      for (int x = 0; x < W; ++x) {
        size_t i = size_t(y) * W + x;
        if (!valid[i]) continue;
        if (x == 0 || x == W - 1 || y == 0 || y == int64_t(H) - 1) continue;
        if (!valid[i - 1] || !valid[i + 1] || !valid[i - W] || !valid[i + W]) continue;
        float3 tu = pos[i + 1] - pos[i - 1];
        float3 tv = pos[i + W] - pos[i - W];
        float3 n = cross(tu, tv);
        float len = length(n);
        if (len < 1e-12f) continue;
        n = n / len;
        float3 o, d;
        cam.pixel_ray(float(x) + 0.5f, float(y) + 0.5f, o, d);
        if (dot(n, d) > 0) n = -n;
        normals.set_rgb(x, int(y), n);
        out_valid[i] = 1;
      }
  });
  return normals;
}

// ---------------------------------------------------------------- visibility

struct VisibilityParams {
  float liftoff = 0.01f;  // meters along the normal before marching
  float step = 0.01f;     // march step, meters
  float tau_cutoff = 14.0f;  // early exit when transmittance is ~1e-6
};

// Soft visibility exp(-integral sigma) toward every environment texel whose
// direction is front-facing; back-facing directions get exactly zero.
// `sigma` is evaluated in world space; marching stops at `bounds`.
inline std::vector<float> visibility_at_point(const std::function<float(const float3&)>& sigma,
                                              const AABB& bounds, const float3& x,
                                              const float3& n, const EnvironmentMap& env,
                                              const VisibilityParams& vp = {}) {
  int K = env.texel_count();
  std::vector<float> vis(size_t(K), 0.0f);
  float3 origin = x + n * vp.liftoff;
  parallel_for(K, [&](int64_t kb, int64_t ke) {
    for (int64_t k = kb; k < ke; ++k) {
      const float3& w = env.dir(int(k));
      if (dot(w, n) <= 0) continue;  // backlight: always zero
      float t0, t1;
      if (!bounds.intersect(origin, w, 0.0f, 1e9f, t0, t1)) {
        vis[size_t(k)] = 1.0f;
        continue;
      }
      double tau = 0;
      for (float t = std::max(t0, 0.0f); t < t1; t += vp.step) {
        tau += double(sigma(origin + w * (t + 0.5f * vp.step))) * vp.step;
        if (tau > vp.tau_cutoff) break;
      }
      vis[size_t(k)] = float(std::exp(-tau));
    }
  });
  return vis;
}

// World-space density cache on a regular lattice; trained fields are sampled
// once per pose so visibility marching avoids per-step BVH projections.
class CachedWorldDensity {
 public:
  CachedWorldDensity(const FieldSampler& sampler, AABB box, int resolution)
      : box_(box), res_(resolution) {
    grid_.assign(size_t(res_) * res_ * res_, 0.0f);
    float3 ext = box.extent();
    cell_ = {ext.x / res_, ext.y / res_, ext.z / res_};
    parallel_for(int64_t(res_) * res_, [&](int64_t rb, int64_t re) {
      for (int64_t r = rb; r < re; ++r) {
        int z = int(r / res_), y = int(r % res_);
        for (int x = 0; x < res_; ++x) {
          float3 p{box.lo.x + (x + 0.5f) * cell_.x, box.lo.y + (y + 0.5f) * cell_.y,
                   box.lo.z + (z + 0.5f) * cell_.z};
          grid_[(size_t(z) * res_ + y) * res_ + x] = sampler.sigma_at(p);
        }
      }
    });
  }

  float sigma(const float3& p) const {
    if (!box_.contains(p)) return 0.0f;
    float fx = (p.x - box_.lo.x) / cell_.x - 0.5f;
    float fy = (p.y - box_.lo.y) / cell_.y - 0.5f;
    float fz = (p.z - box_.lo.z) / cell_.z - 0.5f;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy)), z0 = int(std::floor(fz));
    float tx = fx - x0, ty = fy - y0, tz = fz - z0;
    auto cl = [&](int v) { return std::clamp(v, 0, res_ - 1); };
    int xs[2] = {cl(x0), cl(x0 + 1)}, ys[2] = {cl(y0), cl(y0 + 1)}, zs[2] = {cl(z0), cl(z0 + 1)};
    float wx[2] = {1 - tx, tx}, wy[2] = {1 - ty, ty}, wz[2] = {1 - tz, tz};
    float acc = 0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          acc += wz[dz] * wy[dy] * wx[dx] *
                 grid_[(size_t(zs[dz]) * res_ + ys[dy]) * res_ + xs[dx]];
    return acc;
  }

  const AABB& bounds() const { return box_; }

 private:
  AABB box_;
  int res_;
  float3 cell_;
  std::vector<float> grid_;
};

// ---------------------------------------------------------------- baking

struct BakeConfig {
  int normal_res = 512;
  int vis_res = 256;
  int samples_per_ray = 96;
  float opacity_threshold = 0.5f;
  VisibilityParams visibility;
  int world_density_res = 128;
  bool collect_view_masks = false;  // per-camera splat masks (inpaint training data)
};

struct BakeResult {
  SparseUVMap normals;     // normal_res^2 x 3, world-space unit normals
  SparseUVMap visibility;  // vis_res^2 x K (environment texel count)
  double normal_coverage = 0;
  double visibility_coverage = 0;
  std::vector<std::vector<uint8_t>> view_normal_masks;  // per camera, normal_res^2
  std::vector<std::vector<uint8_t>> view_vis_masks;     // per camera, vis_res^2
};

// Renders unbiased depth from every camera, lifts normals, and aggregates the
// best-weight samples into UV (Eq. 5 selection per ray, running max per
// texel). Visibility is marched once per winning texel after all cameras.
inline BakeResult bake_pose_maps(const FieldSampler& sampler, const EnvironmentMap& env,
                                 const std::vector<Camera>& cameras, const BakeConfig& cfg = {}) {
  if (cameras.empty()) throw ShapeError("bake_pose_maps: no cameras");
  if (sampler.body() == nullptr) throw ShapeError("bake_pose_maps: sampler has no posed body");
  const PosedBody& body = *sampler.body();
  AABB box = body.bounds;
  box.pad(body.mesh->config.shell);

  BakeResult out;
  int K = env.texel_count();
  out.normals = SparseUVMap::create(cfg.normal_res, cfg.normal_res, 3);
  out.visibility = SparseUVMap::create(cfg.vis_res, cfg.vis_res, K);
  // anchors carry the surface point and normal of each visibility texel's
  // current winner; marching happens once per texel at the end
  SparseUVMap anchors = SparseUVMap::create(cfg.vis_res, cfg.vis_res, 6);

  for (size_t ci = 0; ci < cameras.size(); ++ci) {
    const Camera& cam = cameras[ci];
    if (cam.width <= 0 || cam.height <= 0)
      throw ShapeError(cat("bake_pose_maps: camera ", ci, " has no pixel dimensions"));
    int W = cam.width, H = cam.height;
    Image depth(W, H, 1);
    std::vector<uint8_t> depth_valid(size_t(W) * H, 0);
    struct PixelPick {
      float u = 0, v = 0, w = 0;
      bool ok = false;
    };
    std::vector<PixelPick> picks(size_t(W) * H);

    parallel_for(H, [&](int64_t yb, int64_t ye) {
      for (int64_t y = yb; y < ye; ++y)
        for (int x = 0; x < W; ++x) {
          float3 o, d;
          cam.pixel_ray(x + 0.5f, y + 0.5f, o, d);
          float t0, t1;
          if (!box.intersect(o, d, 1e-3f, 1e9f, t0, t1)) continue;
          RaySamples rs = trace_ray(sampler, {o, d, t0, t1},
                                    stratified_depths(t0, t1, cfg.samples_per_ray, nullptr));
          RenderOutput ro = summarize_ray(sampler, rs, cfg.opacity_threshold);
          size_t i = size_t(y) * W + x;
          if (ro.depth_valid) {
            depth.at(x, int(y)) = ro.depth;
            depth_valid[i] = 1;
          }
          if (ro.argmax >= 0 && rs.points[size_t(ro.argmax)].on_body) {
            picks[i].u = rs.points[size_t(ro.argmax)].u;
            picks[i].v = rs.points[size_t(ro.argmax)].v;
            picks[i].w = ro.max_weight;
            picks[i].ok = true;
          }
        }
    });

    std::vector<uint8_t> nvalid;
    Image normals = normals_from_depth(depth, cam, depth_valid, nvalid);

    std::vector<uint8_t> view_nmask, view_vmask;
    if (cfg.collect_view_masks) {
      view_nmask.assign(size_t(cfg.normal_res) * cfg.normal_res, 0);
      view_vmask.assign(size_t(cfg.vis_res) * cfg.vis_res, 0);
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        size_t i = size_t(y) * W + x;
        if (!nvalid[i] || !picks[i].ok) continue;
        float3 n = normals.rgb(x, y);
        float payload[3] = {n.x, n.y, n.z};
        splat_texel(out.normals, picks[i].u, picks[i].v, picks[i].w, payload);
        float3 p = cam.unproject(x + 0.5f, y + 0.5f, depth.at(x, y));
        float anchor[6] = {p.x, p.y, p.z, n.x, n.y, n.z};
        splat_texel(anchors, picks[i].u, picks[i].v, picks[i].w, anchor);
        if (cfg.collect_view_masks) {
          int tn = out.normals.texel_of_uv(picks[i].u, picks[i].v);
          int tv = anchors.texel_of_uv(picks[i].u, picks[i].v);
          if (tn >= 0) view_nmask[size_t(tn)] = 1;
          if (tv >= 0) view_vmask[size_t(tv)] = 1;
        }
      }
    if (cfg.collect_view_masks) {
      out.view_normal_masks.push_back(std::move(view_nmask));
      out.view_vis_masks.push_back(std::move(view_vmask));
    }
  }

  // normalize stored normals (bilinear camera blends and float error)
  for (int t = 0; t < cfg.normal_res * cfg.normal_res; ++t)
    if (out.normals.valid[size_t(t)]) {
      float* p = out.normals.at(t);
      float3 n = normalize(float3{p[0], p[1], p[2]});
      p[0] = n.x;
      p[1] = n.y;
      p[2] = n.z;
    }

  // visibility marching against a world-space density cache
  CachedWorldDensity cache(sampler, box, cfg.world_density_res);
  auto sigma_fn = [&cache](const float3& p) { return cache.sigma(p); };
  std::vector<int> todo;
  for (int t = 0; t < cfg.vis_res * cfg.vis_res; ++t)
    if (anchors.valid[size_t(t)]) todo.push_back(t);
  for (int t : todo) {
    const float* a = anchors.at(t);
    float3 p{a[0], a[1], a[2]}, n{a[3], a[4], a[5]};
    std::vector<float> vis =
        visibility_at_point(sigma_fn, box, p, normalize(n), env, cfg.visibility);
    std::copy(vis.begin(), vis.end(), out.visibility.at(t));
    out.visibility.valid[size_t(t)] = 1;
    out.visibility.best_weight[size_t(t)] = anchors.best_weight[size_t(t)];
  }

  out.normal_coverage = out.normals.coverage(*body.mesh);
  out.visibility_coverage = out.visibility.coverage(*body.mesh);
  return out;
}

}  // namespace relight
