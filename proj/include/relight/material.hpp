#pragma once

// Intrinsic decomposition core: microfacet BRDF with analytic material
// derivatives, environment-map light transport, static albedo/roughness UV
// maps, the corrective UV-delta network, the differentiable relighting loss,
// and the stage-3 training loop.

#include <optional>
#include <vector>

#include "relight/dataset.hpp"
#include "relight/density.hpp"
#include "relight/envlight.hpp"
#include "relight/geomaps.hpp"
#include "relight/nn.hpp"

namespace relight {

// ---------------------------------------------------------------- brdf

struct BrdfConfig {
  float f0 = 0.04f;  // Fresnel normal reflectance; 0 turns the specular lobe off
  float rho_min = 0.03f;
};

struct BrdfSample {
  float3 albedo;
  float roughness = 0.5f;
  float3 normal;
  float3 wo;  // toward the camera
  float3 wi;  // toward the light
};

struct BrdfEval {
  float3 value;
  float3 d_albedo;     // d value_c / d albedo_c (diagonal)
  float3 d_roughness;  // d value_c / d roughness
};

// Lambert diffuse plus GGX specular with height-correlated Smith shadowing
// and Schlick Fresnel. Returns zero (with zero derivatives) when either
// direction is below the surface.
inline BrdfEval brdf_eval(const BrdfSample& s, const BrdfConfig& cfg = {}) {
  auto check_unit = [](const float3& v, const char* name) {
    if (std::abs(length(v) - 1.0f) > 1e-4f)
      throw ShapeError(cat("brdf_eval: ", name, " is not unit length"));
  };
  check_unit(s.normal, "normal");
  check_unit(s.wo, "view direction");
  check_unit(s.wi, "light direction");

  BrdfEval out{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  float ci = dot(s.normal, s.wi);
  float co = dot(s.normal, s.wo);
  if (ci <= 0 || co <= 0) return out;

  const float inv_pi = 1.0f / kPi;
  out.value = s.albedo * inv_pi;
  out.d_albedo = {inv_pi, inv_pi, inv_pi};

  if (cfg.f0 > 0) {
    float rho = clampf(s.roughness, cfg.rho_min, 1.0f);
    float alpha = rho * rho;
    float a2 = alpha * alpha;
    float3 h = normalize(s.wi + s.wo);
    float nh = std::max(dot(s.normal, h), 0.0f);
    float t = nh * nh * (a2 - 1.0f) + 1.0f;
    float D = a2 / (kPi * t * t);
    float dD_da = 2.0f * alpha * (t - 2.0f * a2 * nh * nh) / (kPi * t * t * t);

    auto lambda_ggx = [&](float c, float& dlambda_da) {
      float c2 = clampf(c * c, 1e-8f, 1.0f);
      float k = (1.0f - c2) / c2;  // tan^2
      float root = std::sqrt(1.0f + a2 * k);
      dlambda_da = alpha * k / root;  // d/d(alpha) of (-1+sqrt(1+alpha^2 k))/2, chain *2 later
      return 0.5f * (-1.0f + root);
    };
    float dLi, dLo;
    float Li = lambda_ggx(ci, dLi);
    float Lo = lambda_ggx(co, dLo);
    float G = 1.0f / (1.0f + Li + Lo);
    float dG_da = -G * G * (dLi + dLo);

    float hv = std::max(dot(h, s.wo), 0.0f);
    float F = cfg.f0 + (1.0f - cfg.f0) * std::pow(1.0f - hv, 5.0f);

    float denom = 4.0f * ci * co;
    float spec = D * G * F / denom;
    float dspec_drho = (dD_da * G + D * dG_da) * F / denom * (2.0f * rho);
    bool clamped = s.roughness < cfg.rho_min || s.roughness > 1.0f;
    out.value += float3{spec, spec, spec};
    float dr = clamped ? 0.0f : dspec_drho;
    out.d_roughness = {dr, dr, dr};
  }
  return out;
}

// ---------------------------------------------------------------- transport

struct TransportOptions {
  BrdfConfig brdf;
  bool include_solid_angle = true;  // weight the texel sum by its solid angle
};

struct TransportEval {
  float3 radiance;
  float3 d_albedo;     // d radiance_c / d albedo_c
  float3 d_roughness;  // d radiance_c / d roughness
};

// Discrete environment integral: sum over texels of
// brdf * visibility * radiance * cos * (solid angle).
inline TransportEval light_transport(const float3& normal, const float* visibility,
                                     const float3& albedo, float roughness, const float3& wo,
                                     const EnvironmentMap& env,
                                     const TransportOptions& opt = {}) {
  TransportEval out{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  BrdfSample s;
  s.albedo = albedo;
  s.roughness = roughness;
  s.normal = normal;
  s.wo = wo;
  double acc[3] = {0, 0, 0}, da[3] = {0, 0, 0}, dr[3] = {0, 0, 0};
  for (int k = 0; k < env.texel_count(); ++k) {
    float cosw = dot(env.dir(k), normal);
    if (cosw <= 0) continue;
    float vis = visibility[k];
    if (vis <= 0) continue;
    s.wi = env.dir(k);
    BrdfEval b = brdf_eval(s, opt.brdf);
    float3 L = env.rad(k);
    float wgt = vis * cosw * (opt.include_solid_angle ? float(env.omega(k)) : 1.0f);
    for (int c = 0; c < 3; ++c) {
      acc[c] += double(b.value[c]) * L[c] * wgt;
      da[c] += double(b.d_albedo[c]) * L[c] * wgt;
      dr[c] += double(b.d_roughness[c]) * L[c] * wgt;
    }
  }
  out.radiance = {float(acc[0]), float(acc[1]), float(acc[2])};
  out.d_albedo = {float(da[0]), float(da[1]), float(da[2])};
  out.d_roughness = {float(dr[0]), float(dr[1]), float(dr[2])};
  return out;
}

// Batched autodiff wrapper: albedo [S,3] and roughness [S] are differentiated;
// normals, view directions, and visibility rows are constants.
inline Tensor light_transport_batch(const Tensor& albedo, const Tensor& roughness,
                                    const std::vector<float3>& normals,
                                    const std::vector<float3>& wo,
                                    const std::vector<float>& visibility,  // [S*K]
                                    const EnvironmentMap& env, const TransportOptions& opt = {}) {
  int S = albedo.dim(0);
  int K = env.texel_count();
  if (albedo.rank() != 2 || albedo.dim(1) != 3 || roughness.rank() != 1 ||
      roughness.dim(0) != S || int(normals.size()) != S || int(wo.size()) != S ||
      int64_t(visibility.size()) != int64_t(S) * K)
    throw ShapeError(cat("light_transport_batch: albedo ", shape_str(albedo.shape()),
                         " roughness ", shape_str(roughness.shape()), " S=", S));
  Tensor out = Tensor::zeros({S, 3});
  auto d_alb = std::make_shared<std::vector<float>>(size_t(S) * 3);
  auto d_rough = std::make_shared<std::vector<float>>(size_t(S) * 3);
  const float* ad = albedo.data();
  const float* rd = roughness.data();
  float* od = out.data();
  parallel_for(S, [&](int64_t sb, int64_t se) {
    for (int64_t s = sb; s < se; ++s) {
      TransportEval te = light_transport(
          normals[size_t(s)], &visibility[size_t(s) * K],
          {ad[s * 3], ad[s * 3 + 1], ad[s * 3 + 2]}, rd[s], wo[size_t(s)], env, opt);
      for (int c = 0; c < 3; ++c) {
        od[s * 3 + c] = te.radiance[c];
        (*d_alb)[size_t(s) * 3 + c] = te.d_albedo[c];
        (*d_rough)[size_t(s) * 3 + c] = te.d_roughness[c];
      }
    }
  });
  Tensor ac = albedo, rc = roughness, oc = out;
  track(out, {albedo, roughness}, [ac, rc, oc, d_alb, d_rough, S]() mutable {
    if (!oc.has_grad()) return;
    const float* g = oc.grad_view().data();
    if (ac.requires_grad()) {
      float* ag = ac.grad().data();
      for (int64_t i = 0; i < int64_t(S) * 3; ++i) ag[i] += g[i] * (*d_alb)[size_t(i)];
    }
    if (rc.requires_grad()) {
      float* rg = rc.grad().data();
      for (int64_t s = 0; s < S; ++s)
        for (int c = 0; c < 3; ++c)
          rg[s] += g[s * 3 + c] * (*d_rough)[size_t(s) * 3 + c];
    }
  });
  return out;
}

// ---------------------------------------------------------------- material maps

// Static pose-independent albedo/roughness, stored as unconstrained
// preactivations; reads activate through sigmoid into the valid ranges.
struct MaterialMaps {
  Tensor albedo_pre;     // [3,R,R]
  Tensor roughness_pre;  // [1,R,R]
  float rho_min = 0.03f;

  static MaterialMaps create(int resolution, float albedo_init = 0.5f, float rough_init = 0.3f) {
    MaterialMaps m;
    auto logit = [](float v) { return std::log(v / (1.0f - v)); };
    m.albedo_pre = Tensor::full({3, resolution, resolution}, logit(clampf(albedo_init, 1e-4f, 1 - 1e-4f)), true);
    float r01 = clampf((rough_init - m.rho_min) / (1.0f - m.rho_min), 1e-4f, 1 - 1e-4f);
    m.roughness_pre = Tensor::full({1, resolution, resolution}, logit(r01), true);
    return m;
  }

  int resolution() const { return albedo_pre.dim(1); }

  // differentiable activated maps (record on the active graph)
  Tensor albedo_activated() const { return sigmoid(albedo_pre); }
  Tensor roughness_activated() const {
    return affine(sigmoid(roughness_pre), 1.0f - rho_min, rho_min);
  }

  // plain activated rasters for export and point lookups
  Image albedo_image() const {
    int R = resolution();
    Image img(R, R, 3);
    const float* p = albedo_pre.data();
    for (int y = 0; y < R; ++y)
      for (int x = 0; x < R; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(x, y, c) = 1.0f / (1.0f + std::exp(-p[(size_t(c) * R + y) * R + x]));
    return img;
  }
  Image roughness_image() const {
    int R = resolution();
    Image img(R, R, 1);
    const float* p = roughness_pre.data();
    for (int64_t i = 0; i < int64_t(R) * R; ++i)
      img.px[size_t(i)] = rho_min + (1.0f - rho_min) / (1.0f + std::exp(-p[i]));
    return img;
  }

  std::vector<Tensor> parameters() const { return {albedo_pre, roughness_pre}; }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    return {{"materials.albedo_pre", albedo_pre}, {"materials.roughness_pre", roughness_pre}};
  }
  void save(const std::string& path) const { save_checkpoint(path, named_parameters()); }
  void load(const std::string& path) { restore_parameters(load_checkpoint(path), named_parameters()); }

  // PFM export/import of the activated maps (for external editing)
  void export_pfm(const std::string& albedo_path, const std::string& rough_path) const {
    save_pfm(albedo_path, albedo_image());
    save_pfm(rough_path, roughness_image());
  }
  void import_pfm(const std::string& albedo_path, const std::string& rough_path) {
    Image a = load_pfm(albedo_path);
    Image r = load_pfm(rough_path);
    int R = resolution();
    if (a.width != R || a.height != R || a.channels != 3 || r.width != R || r.height != R)
      throw ShapeError(cat("MaterialMaps::import_pfm: expected ", R, "x", R, " rasters"));
    auto logit = [](float v) { return std::log(v / (1.0f - v)); };
    float* ap = albedo_pre.data();
    for (int y = 0; y < R; ++y)
      for (int x = 0; x < R; ++x)
        for (int c = 0; c < 3; ++c)
          ap[(size_t(c) * R + y) * R + x] = logit(clampf(a.at(x, y, c), 1e-4f, 1 - 1e-4f));
    float* rp = roughness_pre.data();
    for (int64_t i = 0; i < int64_t(R) * R; ++i) {
      float v01 = (r.px[size_t(i)] - rho_min) / (1.0f - rho_min);
      rp[i] = logit(clampf(v01, 1e-4f, 1 - 1e-4f));
    }
  }
};

// Replaces masked texels with edit values clamped to the valid range; returns
// a new map set (no in-place mutation).
inline MaterialMaps edit_materials(const MaterialMaps& maps, const Image& edit,
                                   const std::vector<uint8_t>& region, bool edit_albedo) {
  int R = maps.resolution();
  if (edit.width != R || edit.height != R || int64_t(region.size()) != int64_t(R) * R)
    throw ShapeError(cat("edit_materials: edit raster ", edit.width, "x", edit.height,
                         " for ", R, "x", R, " maps"));
  if (edit_albedo && edit.channels != 3)
    throw ShapeError("edit_materials: albedo edits need 3 channels");
  MaterialMaps out = maps;
  out.albedo_pre = Tensor::from_data(maps.albedo_pre.shape(), maps.albedo_pre.values(), true);
  out.roughness_pre =
      Tensor::from_data(maps.roughness_pre.shape(), maps.roughness_pre.values(), true);
  auto logit = [](float v) { return std::log(v / (1.0f - v)); };
  for (int y = 0; y < R; ++y)
    for (int x = 0; x < R; ++x) {
      if (!region[size_t(y) * R + x]) continue;
      if (edit_albedo) {
        for (int c = 0; c < 3; ++c)
          out.albedo_pre.data()[(size_t(c) * R + y) * R + x] =
              logit(clampf(edit.at(x, y, c), 1e-4f, 1 - 1e-4f));
      } else {
        float v01 = (edit.at(x, y, 0) - maps.rho_min) / (1.0f - maps.rho_min);
        out.roughness_pre.data()[(size_t(y) * R) + x] = logit(clampf(v01, 1e-4f, 1 - 1e-4f));
      }
    }
  return out;
}

// ---------------------------------------------------------------- chart-safe lookups

// Clamp (u,v) into its chart rectangle inset by half a texel, so a bilinear
// footprint never crosses into a gutter or another chart.
inline void chart_clamp(const ProxyMesh& mesh, int chart, int map_res, float& u, float& v) {
  ChartRect rect = mesh.chart_rect(chart);
  float inset = 0.5f / float(map_res);
  u = clampf(u, rect.x0 + inset, rect.x1 - inset);
  v = clampf(v, rect.y0 + inset, rect.y1 - inset);
}

// Bilinear fetch from a dense sparse-map (values defined on chart texels).
inline void lookup_dense_map(const SparseUVMap& map, const ProxyMesh& mesh, int chart, float u,
                             float v, float* out) {
  chart_clamp(mesh, chart, map.width, u, v);
  float fx = u * map.width - 0.5f, fy = v * map.height - 0.5f;
  int x0 = int(std::floor(fx)), y0 = int(std::floor(fy));
  float tx = fx - x0, ty = fy - y0;
  auto cl = [&](int v_, int hi) { return std::clamp(v_, 0, hi); };
  int xs[2] = {cl(x0, map.width - 1), cl(x0 + 1, map.width - 1)};
  int ys[2] = {cl(y0, map.height - 1), cl(y0 + 1, map.height - 1)};
  float wx[2] = {1 - tx, tx}, wy[2] = {1 - ty, ty};
  for (int c = 0; c < map.channels; ++c) out[c] = 0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const float* p = map.at(ys[dy] * map.width + xs[dx]);
      float w = wy[dy] * wx[dx];
      for (int c = 0; c < map.channels; ++c) out[c] += w * p[c];
    }
}

// ---------------------------------------------------------------- uv delta net

// Corrective UV offset network: consumes positional-encoded local coordinates
// and a learned feature grid sampled at (u,v); the final layer starts at zero
// so the frozen phase emits exactly (0,0).
struct UvDeltaNet {
  Mlp mlp;          // in: 3*(1+2F) + feature_channels -> hidden -> 2
  Tensor features;  // [C,Hf,Wf] learnable feature grid
  int posenc_freqs = 4;
  float clamp_uv = 0.02f;
  bool frozen = true;

  UvDeltaNet() = default;
  UvDeltaNet(int feature_channels, int feature_res, const std::vector<int>& hidden,
             uint64_t seed) {
    RngStream rng{CounterRng(seed), 9009};
    features = testless_random(feature_channels, feature_res, rng);
    mlp = Mlp(3 * (1 + 2 * posenc_freqs) + feature_channels, hidden, 2, rng,
              /*zero_init_last=*/true);
  }

  static Tensor testless_random(int C, int R, RngStream& rng) {
    std::vector<float> data(size_t(C) * R * R);
    for (auto& v : data) v = 0.1f * rng.normal();
    return Tensor::from_data({C, R, R}, std::move(data), true);
  }

  // [S,2] clamped offsets; constant zeros while frozen.
  Tensor eval_batch(const std::vector<SamplePoint>& pts) const {
    int S = int(pts.size());
    if (frozen || S == 0) return Tensor::zeros({std::max(S, 1), 2});
    std::vector<float> local(size_t(S) * 3), uv(size_t(S) * 2);
    for (int s = 0; s < S; ++s) {
      local[size_t(s) * 3 + 0] = pts[size_t(s)].u;
      local[size_t(s) * 3 + 1] = pts[size_t(s)].v;
      local[size_t(s) * 3 + 2] = pts[size_t(s)].h;
      uv[size_t(s) * 2 + 0] = pts[size_t(s)].u;
      uv[size_t(s) * 2 + 1] = pts[size_t(s)].v;
    }
    Tensor enc = positional_encoding(Tensor::from_data({S, 3}, std::move(local)), posenc_freqs);
    Tensor psi = grid_sample_2d(features, Tensor::from_data({S, 2}, std::move(uv)));
    Tensor raw = mlp.forward(concat_rows(enc, psi));
    return clamp(raw, -clamp_uv, clamp_uv);
  }

  float2 eval(float u, float v, float h) const {
    if (frozen) return {0, 0};
    SamplePoint sp;
    sp.u = u;
    sp.v = v;
    sp.h = h;
    sp.on_body = true;
    std::vector<SamplePoint> one{sp};
    Tensor out = eval_batch(one);
    return {out.data()[0], out.data()[1]};
  }

  std::vector<Tensor> parameters() const {
    auto ps = mlp.parameters();
    ps.push_back(features);
    return ps;
  }
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    mlp.named_parameters("uvdelta.mlp", out);
    out.emplace_back("uvdelta.features", features);
    return out;
  }
  void save(const std::string& path) const { save_checkpoint(path, named_parameters()); }
  void load(const std::string& path) { restore_parameters(load_checkpoint(path), named_parameters()); }
};

// ---------------------------------------------------------------- shading batches

struct PoseMaps {
  SparseUVMap normals;     // dense on charts, world space
  SparseUVMap visibility;  // dense on charts
};

struct ShadingBatch {
  int n_rays = 0, n_samples = 0;
  int patch_w = 0, patch_h = 0;
  std::vector<float> weights;      // [R*N], emission-absorption weights (constants)
  std::vector<int> shade_index;    // positions in [R*N] of shaded samples
  std::vector<SamplePoint> points; // shaded samples [S]
  std::vector<float3> normals;     // [S]
  std::vector<float3> view_dirs;   // [S] toward the camera
  std::vector<float> visibility;   // [S*K]
  std::vector<float3> targets;     // [R]
  std::vector<float> base_uv;      // [S*2]
  std::vector<float> uv_lo, uv_hi; // [S*2] chart-interior clamp bounds
  std::vector<int> ray_best;       // [R] index into shaded samples, -1 if none
};

struct RelightConfig {
  int coarse_samples = 64;
  int importance_samples = 16;
  float sigma_d = 0.02f;
  float opacity_threshold = 0.5f;
  TransportOptions transport;
  uint64_t seed = 0;
};

// Traces a pixel's coarse pass and importance resampling; returns sample
// depths (empty when the ray misses or stays transparent).
inline std::vector<float> importance_resample(const FieldSampler& sampler, const float3& o,
                                              const float3& d, const AABB& box,
                                              const RelightConfig& cfg, RngStream& rng) {
  float t0, t1;
  if (!box.intersect(o, d, 1e-3f, 1e9f, t0, t1)) return {};
  RaySamples coarse = trace_ray(sampler, {o, d, t0, t1},
                                stratified_depths(t0, t1, cfg.coarse_samples, nullptr));
  RenderOutput ro = summarize_ray(sampler, coarse, cfg.opacity_threshold);
  if (!ro.depth_valid) return {};
  return importance_depths(t0, t1, cfg.importance_samples, ro.depth, cfg.sigma_d, rng);
}

// Assembles the constant side of the relighting loss for one patch: weights,
// map lookups, and view geometry. The camera image supplies the targets.
inline ShadingBatch build_shading_batch(const FieldSampler& sampler, const PoseMaps& maps,
                                        const Camera& cam, const Image& target, int px0, int py0,
                                        int patch_w, int patch_h, const RelightConfig& cfg,
                                        uint64_t draw) {
  const PosedBody& body = *sampler.body();
  const ProxyMesh& mesh = *body.mesh;
  AABB box = body.bounds;
  box.pad(mesh.config.shell);
  int K = maps.visibility.channels;
  int R = patch_w * patch_h, N = cfg.importance_samples;

  ShadingBatch batch;
  batch.n_rays = R;
  batch.n_samples = N;
  batch.patch_w = patch_w;
  batch.patch_h = patch_h;
  batch.weights.assign(size_t(R) * N, 0.0f);
  batch.targets.resize(size_t(R));
  batch.ray_best.assign(size_t(R), -1);

  struct RayData {
    std::vector<float> depths;
    RaySamples rs;
  };
  std::vector<RayData> rays(size_t(R));
  CounterRng base(cfg.seed);
  parallel_for(R, [&](int64_t rb, int64_t re) {
    for (int64_t r = rb; r < re; ++r) {
      int ix = px0 + int(r) % patch_w, iy = py0 + int(r) / patch_w;
      float3 o, d;
      cam.pixel_ray(ix + 0.5f, iy + 0.5f, o, d);
      RngStream rng(base, draw * 100003 + uint64_t(r));
      rays[size_t(r)].depths = importance_resample(sampler, o, d, box, cfg, rng);
      if (!rays[size_t(r)].depths.empty())
        rays[size_t(r)].rs = trace_ray(sampler, {o, d, 0, 0}, rays[size_t(r)].depths);
    }
  });

  for (int r = 0; r < R; ++r) {
    int ix = px0 + r % patch_w, iy = py0 + r / patch_w;
    batch.targets[size_t(r)] = target.rgb(ix, iy);
    const RaySamples& rs = rays[size_t(r)].rs;
    float best_w = 0;
    for (int n = 0; n < int(rs.weights.size()); ++n) {
      batch.weights[size_t(r) * N + n] = rs.weights[size_t(n)];
      const SamplePoint& sp = rs.points[size_t(n)];
      if (!sp.on_body || rs.weights[size_t(n)] <= 0) continue;
      int chart = mesh.chart_of_uv(sp.u, sp.v);
      if (chart < 0) continue;
      int s = int(batch.points.size());
      batch.shade_index.push_back(r * N + n);
      batch.points.push_back(sp);
      float nbuf[3];
      lookup_dense_map(maps.normals, mesh, chart, sp.u, sp.v, nbuf);
      float3 nrm = normalize(float3{nbuf[0], nbuf[1], nbuf[2]});
      if (length_sq(nrm) < 0.25f) nrm = {0, 0, 1};
      batch.normals.push_back(nrm);
      batch.view_dirs.push_back(normalize(cam.center - sp.world));
      size_t voff = batch.visibility.size();
      batch.visibility.resize(voff + size_t(K));
      lookup_dense_map(maps.visibility, mesh, chart, sp.u, sp.v, &batch.visibility[voff]);
      for (size_t i = voff; i < voff + size_t(K); ++i)
        batch.visibility[i] = clampf(batch.visibility[i], 0.0f, 1.0f);
      batch.base_uv.push_back(sp.u);
      batch.base_uv.push_back(sp.v);
      ChartRect rect = mesh.chart_rect(chart);
      // clamp bounds at the material-map resolution are added by the loss
      batch.uv_lo.push_back(rect.x0);
      batch.uv_lo.push_back(rect.y0);
      batch.uv_hi.push_back(rect.x1);
      batch.uv_hi.push_back(rect.y1);
      if (rs.weights[size_t(n)] > best_w) {
        best_w = rs.weights[size_t(n)];
        batch.ray_best[size_t(r)] = s;
      }
    }
  }
  return batch;
}

// ---------------------------------------------------------------- relight loss

struct RelightLossWeights {
  float l2 = 100.0f;
  float smooth = 1.0f;
  float uv = 1.0f;
};

struct RelightLossOut {
  Tensor loss;
  Tensor prediction;  // [R,3]
  double l2 = 0;
  int shaded_samples = 0;
};

inline RelightLossOut relight_loss(const ShadingBatch& batch, const MaterialMaps& maps,
                                   const UvDeltaNet& uvdelta, const EnvironmentMap& env,
                                   const RelightLossWeights& lw = {},
                                   const TransportOptions& opt = {}) {
  int R = batch.n_rays, N = batch.n_samples;
  int S = int(batch.points.size());
  int res = maps.resolution();

  Tensor albedo_act = maps.albedo_activated();
  Tensor rough_act = maps.roughness_activated();

  Tensor pred;
  Tensor eps;  // [S,2]
  if (S > 0) {
    eps = uvdelta.eval_batch(batch.points);
    std::vector<float> lo(size_t(S) * 2), hi(size_t(S) * 2);
    float inset = 0.5f / float(res);
    for (int i = 0; i < S * 2; ++i) {
      lo[size_t(i)] = batch.uv_lo[size_t(i)] + inset;
      hi[size_t(i)] = batch.uv_hi[size_t(i)] - inset;
    }
    Tensor coords = clamp_per_element(add(Tensor::from_data({S, 2}, batch.base_uv), eps),
                                      Tensor::from_data({S, 2}, std::move(lo)),
                                      Tensor::from_data({S, 2}, std::move(hi)));
    Tensor albedo = grid_sample_2d(albedo_act, coords);            // [S,3]
    Tensor rough = reshape(grid_sample_2d(rough_act, coords), {S});  // [S]
    Tensor l0 = light_transport_batch(albedo, rough, batch.normals, batch.view_dirs,
                                      batch.visibility, env, opt);
    Tensor full = scatter_rows(l0, batch.shade_index, R * N, 0.0f);  // [R*N,3]
    pred = weighted_reduce(Tensor::from_data({R, N}, batch.weights),
                           reshape(full, {R, N, 3}));
  } else {
    pred = Tensor::zeros({R, 3});
  }

  std::vector<float> tgt(size_t(R) * 3);
  for (int r = 0; r < R; ++r) {
    tgt[size_t(r) * 3 + 0] = batch.targets[size_t(r)].x;
    tgt[size_t(r) * 3 + 1] = batch.targets[size_t(r)].y;
    tgt[size_t(r) * 3 + 2] = batch.targets[size_t(r)].z;
  }
  Tensor diff = sub(pred, Tensor::from_data({R, 3}, std::move(tgt)));
  Tensor l2 = mean(mul(diff, diff));

  Tensor smooth = add(add(mean(abs_t(spatial_grad_x(albedo_act))),
                          mean(abs_t(spatial_grad_y(albedo_act)))),
                      add(mean(abs_t(spatial_grad_x(rough_act))),
                          mean(abs_t(spatial_grad_y(rough_act)))));

  // UV-delta magnitude and patch-raster gradients (Eq. 7 style)
  Tensor luv;
  if (S > 0 && !uvdelta.frozen && batch.patch_w >= 2 && batch.patch_h >= 2) {
    std::vector<int> sel(size_t(R), 0);
    std::vector<float> mask(size_t(R) * 2, 0.0f);
    for (int r = 0; r < R; ++r)
      if (batch.ray_best[size_t(r)] >= 0) {
        sel[size_t(r)] = batch.ray_best[size_t(r)];
        mask[size_t(r) * 2] = 1.0f;
        mask[size_t(r) * 2 + 1] = 1.0f;
      }
    Tensor eps_px = mul(gather_rows(eps, sel), Tensor::from_data({R, 2}, std::move(mask)));
    Tensor raster = rows_to_planar(eps_px, batch.patch_h, batch.patch_w);
    luv = add(mean(mul(eps_px, eps_px)),
              add(mean(abs_t(spatial_grad_x(raster))), mean(abs_t(spatial_grad_y(raster)))));
  } else {
    luv = Tensor::scalar(0.0f);
  }

  RelightLossOut out;
  out.loss = add(add(affine(l2, lw.l2), affine(smooth, lw.smooth)), affine(luv, lw.uv));
  out.prediction = pred;
  out.l2 = l2.data()[0];
  out.shaded_samples = S;
  return out;
}

// ---------------------------------------------------------------- inference render

// Full relighting render: coarse depth, importance resampling, map lookups,
// UV-delta corrected material fetch, and the environment transport sum.
inline Image relight_render(const FieldSampler& sampler, const PoseMaps& maps,
                            const MaterialMaps& materials, const UvDeltaNet& uvdelta,
                            const EnvironmentMap& env, const Camera& cam,
                            const RelightConfig& cfg = {}) {
  if (cam.width <= 0 || cam.height <= 0)
    throw ShapeError("relight_render: camera has no pixel dimensions");
  const PosedBody& body = *sampler.body();
  const ProxyMesh& mesh = *body.mesh;
  AABB box = body.bounds;
  box.pad(mesh.config.shell);
  Image albedo_img = materials.albedo_image();
  Image rough_img = materials.roughness_image();
  int K = maps.visibility.channels;
  if (K != env.texel_count())
    throw ShapeError(cat("relight_render: visibility has ", K, " directions but the environment ",
                         "map has ", env.texel_count(), " texels"));
  Image out(cam.width, cam.height, 3);
  CounterRng base(cfg.seed);

  // scanline batches: trace in parallel, then evaluate the uv-delta network
  // on the row's samples in one batch
  for (int y = 0; y < cam.height; ++y) {
    struct PixelWork {
      RaySamples rs;
      bool any = false;
    };
    std::vector<PixelWork> row(size_t(cam.width));
    parallel_for(cam.width, [&](int64_t xb, int64_t xe) {
      for (int64_t x = xb; x < xe; ++x) {
        float3 o, d;
        cam.pixel_ray(x + 0.5f, y + 0.5f, o, d);
        RngStream rng(base, uint64_t(y) * 100003 + uint64_t(x));
        auto depths = importance_resample(sampler, o, d, box, cfg, rng);
        if (depths.empty()) continue;
        row[size_t(x)].rs = trace_ray(sampler, {o, d, 0, 0}, std::move(depths));
        row[size_t(x)].any = true;
      }
    });
    // gather shaded samples of the row
    std::vector<SamplePoint> pts;
    std::vector<std::pair<int, int>> where;  // (pixel, sample)
    for (int x = 0; x < cam.width; ++x) {
      if (!row[size_t(x)].any) continue;
      const RaySamples& rs = row[size_t(x)].rs;
      for (int n = 0; n < int(rs.points.size()); ++n)
        if (rs.points[size_t(n)].on_body && rs.weights[size_t(n)] > 1e-6f &&
            mesh.chart_of_uv(rs.points[size_t(n)].u, rs.points[size_t(n)].v) >= 0) {
          pts.push_back(rs.points[size_t(n)]);
          where.emplace_back(x, n);
        }
    }
    Tensor eps = uvdelta.eval_batch(pts);
    std::vector<float3> accum(size_t(cam.width), float3{0, 0, 0});
    parallel_for(int64_t(pts.size()), [&](int64_t ib, int64_t ie) {
      for (int64_t i = ib; i < ie; ++i) {
        const SamplePoint& sp = pts[size_t(i)];
        int chart = mesh.chart_of_uv(sp.u, sp.v);
        float nbuf[3];
        lookup_dense_map(maps.normals, mesh, chart, sp.u, sp.v, nbuf);
        float3 nrm = normalize(float3{nbuf[0], nbuf[1], nbuf[2]});
        if (length_sq(nrm) < 0.25f) nrm = {0, 0, 1};
        std::vector<float> vis(size_t(K));
        lookup_dense_map(maps.visibility, mesh, chart, sp.u, sp.v, vis.data());
        for (auto& v : vis) v = clampf(v, 0.0f, 1.0f);
        float mu = sp.u + (uvdelta.frozen ? 0.0f : eps.data()[i * 2 + 0]);
        float mv = sp.v + (uvdelta.frozen ? 0.0f : eps.data()[i * 2 + 1]);
        chart_clamp(mesh, chart, materials.resolution(), mu, mv);
        float3 a = sample_bilinear(albedo_img, mu, mv);
        float rho = sample_bilinear(rough_img, mu, mv).x;
        float3 wo = normalize(cam.center - sp.world);
        TransportEval te = light_transport(nrm, vis.data(), a, rho, wo, env, cfg.transport);
        auto [px, n] = where[size_t(i)];
        accum[size_t(px)] += te.radiance * row[size_t(px)].rs.weights[size_t(n)];
      }
    });
    for (int x = 0; x < cam.width; ++x) out.set_rgb(x, y, accum[size_t(x)]);
  }
  return out;
}

// ---------------------------------------------------------------- stage-3 training

struct DecomposeConfig {
  int epochs = 24;
  int steps_per_epoch = 40;
  int patch = 12;
  float lr_maps = 0.02f;   // material preactivations and the feature grid
  float lr_net = 1e-3f;    // uv-delta MLP after unfreezing
  float freeze_fraction = 0.25f;
  RelightConfig render;
  RelightLossWeights weights;
  uint64_t seed = 2;
  bool verbose = false;
};

struct DecomposeLog {
  int epoch = 0;
  double mean_loss = 0;
  double mean_l2 = 0;
  bool uvdelta_active = false;
};

// Per-frame dense maps are supplied by the caller (baked and inpainted).
inline std::vector<DecomposeLog> train_decomposition(
    const DensityField& field, const Dataset& ds, const std::vector<const PoseMaps*>& frame_maps,
    MaterialMaps& materials, UvDeltaNet& uvdelta, const DecomposeConfig& cfg) {
  if (ds.frames.empty()) throw ShapeError("train_decomposition: empty dataset");
  if (frame_maps.size() != ds.frames.size())
    throw ShapeError(cat("train_decomposition: ", frame_maps.size(), " map sets for ",
                         ds.frames.size(), " frames"));
  for (size_t f = 0; f < frame_maps.size(); ++f)
    if (!frame_maps[f])
      throw IoError(cat("train_decomposition: missing dense maps for frame ", f));

  std::vector<Tensor> map_params = materials.parameters();
  map_params.push_back(uvdelta.features);
  Adam opt_maps(map_params, {.lr = cfg.lr_maps});
  std::optional<Adam> opt_net;

  int unfreeze_epoch = int(std::lround(cfg.freeze_fraction * cfg.epochs));
  uvdelta.frozen = true;

  CounterRng rng(cfg.seed);
  std::vector<DecomposeLog> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch == unfreeze_epoch && !opt_net) {
      uvdelta.frozen = false;
      opt_net.emplace(uvdelta.mlp.parameters(), AdamConfig{.lr = cfg.lr_net});
    }
    double sum_loss = 0, sum_l2 = 0;
    int counted = 0;
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      uint64_t draw = uint64_t(epoch) * cfg.steps_per_epoch + step;
      int frame = int(rng.index(21, draw, ds.frames.size()));
      int cam = int(rng.index(22, draw, ds.cameras.size()));
      const Camera& camera = ds.cameras[size_t(cam)];
      FieldSampler sampler(field, &ds.body(frame));
      AABB box = ds.body(frame).bounds;
      box.pad(ds.mesh.config.shell);
      int bx0, by0, bx1, by1;
      body_pixel_bounds(camera, box, bx0, by0, bx1, by1);
      int px0 = bx0, py0 = by0;
      if (bx1 - bx0 > cfg.patch) px0 = bx0 + int(rng.index(23, draw, uint64_t(bx1 - bx0 - cfg.patch)));
      if (by1 - by0 > cfg.patch) py0 = by0 + int(rng.index(24, draw, uint64_t(by1 - by0 - cfg.patch)));
      px0 = std::clamp(px0, 0, std::max(0, camera.width - cfg.patch));
      py0 = std::clamp(py0, 0, std::max(0, camera.height - cfg.patch));

      RelightConfig rc = cfg.render;
      rc.seed = cfg.seed * 7919 + draw;
      ShadingBatch batch = build_shading_batch(
          sampler, *frame_maps[size_t(frame)], camera,
          ds.frames[size_t(frame)].images[size_t(cam)], px0, py0, cfg.patch, cfg.patch, rc, draw);
      if (batch.points.empty()) continue;

      Graph g;
      RelightLossOut out = relight_loss(batch, materials, uvdelta, ds.env, cfg.weights,
                                        cfg.render.transport);
      g.backward(out.loss);
      opt_maps.step();
      if (opt_net && !uvdelta.frozen) opt_net->step();
      else for (auto& p : uvdelta.mlp.parameters()) p.zero_grad();
      sum_loss += out.loss.data()[0];
      sum_l2 += out.l2;
      ++counted;
    }
    DecomposeLog e{epoch, counted ? sum_loss / counted : 0.0, counted ? sum_l2 / counted : 0.0,
                   !uvdelta.frozen};
    log.push_back(e);
    if (cfg.verbose)
      std::fprintf(stderr, "[decompose] epoch %d loss %.6f l2 %.6f uvdelta=%d\n", e.epoch,
                   e.mean_loss, e.mean_l2, int(e.uvdelta_active));
  }
  return log;
}

}  // namespace relight
