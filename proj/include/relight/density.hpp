#pragma once

// Trainable volumetric density over canonical/local body coordinates with
// emission-absorption volume rendering, unbiased depth, the geometry losses,
// and the stage-1 training loop.
//
// Field variants: Analytic (exact sdf-driven density for oracles), VoxelGrid
// (the default trained representation), and Mlp (positional-encoded network).

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "relight/body.hpp"
#include "relight/dataset.hpp"
#include "relight/nn.hpp"
#include "relight/tensor.hpp"

namespace relight {

// ---------------------------------------------------------------- sample points

struct SamplePoint {
  float3 world;
  float3 canonical;        // normalized rest coordinates, valid iff on_body
  float u = 0, v = 0;      // atlas coordinates of the nearest surface point
  float h = 0;             // signed distance normalized by the shell width
  int face = -1;
  bool on_body = false;
};

// One BVH query yields (u,v,h), the blended inverse-LBS transform, and the
// canonical position.
inline SamplePoint make_sample_point(const PosedBody& body, const float3& x) {
  SamplePoint sp;
  sp.world = x;
  auto hit = body.bvh.closest(x);
  float dist = std::sqrt(hit.dist_sq);
  if (dist > body.mesh->config.shell) return sp;
  const Triangle& t = body.mesh->faces[size_t(hit.face)];
  float2 q0 = body.mesh->uvs[size_t(t.a)], q1 = body.mesh->uvs[size_t(t.b)],
         q2 = body.mesh->uvs[size_t(t.c)];
  sp.u = q0.x * hit.bary.x + q1.x * hit.bary.y + q2.x * hit.bary.z;
  sp.v = q0.y * hit.bary.x + q1.y * hit.bary.y + q2.y * hit.bary.z;
  float3 n = body.face_normal(hit.face);
  float h = dot(x - hit.point, n) >= 0 ? dist : -dist;
  sp.h = h / body.mesh->config.shell;
  sp.face = hit.face;
  Transform blend = body.blended_transform(hit.face, hit.bary);
  float3 rest = inverse(blend.rot) * (x - body.pose.global_translation - blend.trans);
  sp.canonical = body.mesh->normalize_canonical(rest);
  sp.on_body = true;
  return sp;
}

// World-space sample for analytic fields (no body attached).
inline SamplePoint world_sample(const float3& x) {
  SamplePoint sp;
  sp.world = x;
  sp.on_body = true;
  return sp;
}

// ---------------------------------------------------------------- density field

class DensityField {
 public:
  enum class Kind { Analytic, Voxel, Mlp };

  Kind kind() const { return kind_; }

  // sigma = sharpness * sigmoid(-sharpness * sdf); exact, no parameters.
  static DensityField analytic(std::function<float(const float3&)> sdf, float sharpness,
                               std::function<float3(const float3&)> color = {}) {
    DensityField f;
    f.kind_ = Kind::Analytic;
    f.sdf_ = std::move(sdf);
    f.sharpness_ = sharpness;
    f.analytic_color_ = std::move(color);
    return f;
  }

  // init_preactivation must be positive: ReLU blocks all density gradients
  // where sigma' < 0, so a field initialized negative can never grow.
  static DensityField voxel(int resolution, float init_preactivation = 0.5f) {
    DensityField f;
    f.kind_ = Kind::Voxel;
    f.resolution_ = resolution;
    f.voxel_pre_ = Tensor::full({1, resolution, resolution, resolution}, init_preactivation, true);
    f.voxel_color_pre_ = Tensor::zeros({3, resolution, resolution, resolution}, true);
    return f;
  }

  static DensityField mlp(int posenc_freqs, std::vector<int> hidden, uint64_t seed) {
    DensityField f;
    f.kind_ = Kind::Mlp;
    f.posenc_freqs_ = posenc_freqs;
    RngStream rng{CounterRng(seed), 7001};
    int in = 3 * (1 + 2 * posenc_freqs) + 3;  // encoded canonical + (u, v, h)
    f.trunk_ = Mlp(in, hidden, hidden.empty() ? 16 : hidden.back(), rng);
    // trunk already ends in a linear layer; heads read its (ReLU'd) features
    f.head_sigma_ = Linear(hidden.empty() ? 16 : hidden.back(), 1, rng);
    f.head_color_ = Linear(hidden.empty() ? 16 : hidden.back(), 3, rng);
    return f;
  }

  // ---- plain (non-recording) evaluation

  float sigma_pre(const SamplePoint& p) const {
    if (!p.on_body) return kOffBodyPre;
    switch (kind_) {
      case Kind::Analytic: {
        float s = sharpness_;
        return s / (1.0f + std::exp(s * sdf_(p.world)));  // already nonnegative
      }
      case Kind::Voxel:
        return trilinear(voxel_pre_, p.canonical, 0);
      case Kind::Mlp:
        return mlp_eval(p, nullptr);
    }
    return kOffBodyPre;
  }

  float sigma(const SamplePoint& p) const { return std::max(0.0f, sigma_pre(p)); }

  float3 color(const SamplePoint& p) const {
    if (!p.on_body) return {0, 0, 0};
    switch (kind_) {
      case Kind::Analytic:
        return analytic_color_ ? analytic_color_(p.world) : float3{1, 1, 1};
      case Kind::Voxel: {
        auto sig = [](float v) { return 1.0f / (1.0f + std::exp(-v)); };
        return {sig(trilinear(voxel_color_pre_, p.canonical, 0)),
                sig(trilinear(voxel_color_pre_, p.canonical, 1)),
                sig(trilinear(voxel_color_pre_, p.canonical, 2))};
      }
      case Kind::Mlp: {
        float3 c;
        mlp_eval(p, &c);
        return c;
      }
    }
    return {0, 0, 0};
  }

  // ---- batched differentiable evaluation (records on the active Graph)

  Tensor sigma_pre_batch(const std::vector<SamplePoint>& pts) const {
    if (kind_ == Kind::Voxel) return grid_sample_to_rows(voxel_pre_, pts);
    if (kind_ == Kind::Mlp) return head_sigma_.forward(trunk_features(pts));
    // analytic: constant tensor
    std::vector<float> vals(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) vals[i] = sigma_pre(pts[i]);
    return Tensor::from_data({int(pts.size()), 1}, std::move(vals));
  }

  Tensor color_batch(const std::vector<SamplePoint>& pts) const {
    if (kind_ == Kind::Voxel) return sigmoid(grid_sample_to_rows(voxel_color_pre_, pts));
    if (kind_ == Kind::Mlp) return sigmoid(head_color_.forward(trunk_features(pts)));
    std::vector<float> vals(pts.size() * 3);
    for (size_t i = 0; i < pts.size(); ++i) {
      float3 c = color(pts[i]);
      vals[i * 3 + 0] = c.x;
      vals[i * 3 + 1] = c.y;
      vals[i * 3 + 2] = c.z;
    }
    return Tensor::from_data({int(pts.size()), 3}, std::move(vals));
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    if (kind_ == Kind::Voxel) {
      ps.push_back(voxel_pre_);
      ps.push_back(voxel_color_pre_);
    } else if (kind_ == Kind::Mlp) {
      ps = trunk_.parameters();
      ps.push_back(head_sigma_.weight);
      ps.push_back(head_sigma_.bias);
      ps.push_back(head_color_.weight);
      ps.push_back(head_color_.bias);
    }
    return ps;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    if (kind_ == Kind::Voxel) {
      out.emplace_back("density.voxel_pre", voxel_pre_);
      out.emplace_back("density.voxel_color_pre", voxel_color_pre_);
    } else if (kind_ == Kind::Mlp) {
      trunk_.named_parameters("density.trunk", out);
      out.emplace_back("density.head_sigma.weight", head_sigma_.weight);
      out.emplace_back("density.head_sigma.bias", head_sigma_.bias);
      out.emplace_back("density.head_color.weight", head_color_.weight);
      out.emplace_back("density.head_color.bias", head_color_.bias);
    }
    return out;
  }

  void save(const std::string& path) const { save_checkpoint(path, named_parameters()); }
  void load(const std::string& path) { restore_parameters(load_checkpoint(path), named_parameters()); }

  int resolution() const { return resolution_; }
  static constexpr float kOffBodyPre = -30.0f;  // sigma 0, sigmoid ~ 1e-13

 private:
  Kind kind_ = Kind::Analytic;
  // analytic
  std::function<float(const float3&)> sdf_;
  std::function<float3(const float3&)> analytic_color_;
  float sharpness_ = 100.0f;
  // voxel
  int resolution_ = 0;
  Tensor voxel_pre_;        // [1,R,R,R]
  Tensor voxel_color_pre_;  // [3,R,R,R]
  // mlp
  int posenc_freqs_ = 6;
  Mlp trunk_;
  Linear head_sigma_, head_color_;

  static float trilinear(const Tensor& grid, const float3& canonical, int channel) {
    int D = grid.dim(1), H = grid.dim(2), W = grid.dim(3);
    float fx = (canonical.x * 0.5f + 0.5f) * W - 0.5f;
    float fy = (canonical.y * 0.5f + 0.5f) * H - 0.5f;
    float fz = (canonical.z * 0.5f + 0.5f) * D - 0.5f;
    int x0 = int(std::floor(fx)), y0 = int(std::floor(fy)), z0 = int(std::floor(fz));
    float tx = fx - x0, ty = fy - y0, tz = fz - z0;
    auto cl = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
    int xs[2] = {cl(x0, W - 1), cl(x0 + 1, W - 1)};
    int ys[2] = {cl(y0, H - 1), cl(y0 + 1, H - 1)};
    int zs[2] = {cl(z0, D - 1), cl(z0 + 1, D - 1)};
    float wx[2] = {1 - tx, tx}, wy[2] = {1 - ty, ty}, wz[2] = {1 - tz, tz};
    const float* plane = grid.data() + int64_t(channel) * D * H * W;
    float acc = 0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          acc += wz[dz] * wy[dy] * wx[dx] * plane[(int64_t(zs[dz]) * H + ys[dy]) * W + xs[dx]];
    return acc;
  }

  Tensor coords_tensor(const std::vector<SamplePoint>& pts) const {
    std::vector<float> c(pts.size() * 3);
    for (size_t i = 0; i < pts.size(); ++i) {
      c[i * 3 + 0] = pts[i].canonical.x * 0.5f + 0.5f;
      c[i * 3 + 1] = pts[i].canonical.y * 0.5f + 0.5f;
      c[i * 3 + 2] = pts[i].canonical.z * 0.5f + 0.5f;
    }
    return Tensor::from_data({int(pts.size()), 3}, std::move(c));
  }

  Tensor grid_sample_to_rows(const Tensor& grid, const std::vector<SamplePoint>& pts) const {
    return grid_sample_3d(grid, coords_tensor(pts));
  }

  Tensor trunk_features(const std::vector<SamplePoint>& pts) const {
    std::vector<float> canon(pts.size() * 3), local(pts.size() * 3);
    for (size_t i = 0; i < pts.size(); ++i) {
      canon[i * 3 + 0] = pts[i].canonical.x;
      canon[i * 3 + 1] = pts[i].canonical.y;
      canon[i * 3 + 2] = pts[i].canonical.z;
      local[i * 3 + 0] = pts[i].u;
      local[i * 3 + 1] = pts[i].v;
      local[i * 3 + 2] = pts[i].h;
    }
    Tensor enc = positional_encoding(
        Tensor::from_data({int(pts.size()), 3}, std::move(canon)), posenc_freqs_);
    Tensor loc = Tensor::from_data({int(pts.size()), 3}, std::move(local));
    // feature-wise concatenation of encoded canonical coords and (u,v,h)
    int S = int(pts.size()), E = enc.dim(1);
    std::vector<float> joined(size_t(S) * (E + 3));
    for (int s = 0; s < S; ++s) {
      std::copy_n(enc.data() + int64_t(s) * E, E, joined.begin() + int64_t(s) * (E + 3));
      std::copy_n(loc.data() + int64_t(s) * 3, 3, joined.begin() + int64_t(s) * (E + 3) + E);
    }
    Tensor in = Tensor::from_data({S, E + 3}, std::move(joined));
    return relu(trunk_.forward(in));
  }

  float mlp_eval(const SamplePoint& p, float3* color_out) const {
    std::vector<SamplePoint> one{p};
    Tensor feat = trunk_features(one);
    Tensor s = head_sigma_.forward(feat);
    if (color_out) {
      Tensor c = sigmoid(head_color_.forward(feat));
      *color_out = {c.data()[0], c.data()[1], c.data()[2]};
    }
    return s.data()[0];
  }
};

// Binds a field to an (optional) posed body; the body maps world points into
// the field's canonical domain. Analytic fields take world points directly.
class FieldSampler {
 public:
  FieldSampler(const DensityField& field, const PosedBody* body = nullptr)
      : field_(&field), body_(body) {
    if (field.kind() != DensityField::Kind::Analytic && body == nullptr)
      throw Error("FieldSampler: trained fields need a posed body");
  }

  SamplePoint sample_point(const float3& x) const {
    return body_ ? make_sample_point(*body_, x) : world_sample(x);
  }
  float sigma_at(const float3& x) const { return field_->sigma(sample_point(x)); }
  const DensityField& field() const { return *field_; }
  const PosedBody* body() const { return body_; }

 private:
  const DensityField* field_;
  const PosedBody* body_;
};

// ---------------------------------------------------------------- ray sampling

struct RaySpec {
  float3 origin;
  float3 dir;  // unit
  float near = 0, far = 0;
};

// One uniform draw per bin; pass rng = nullptr for deterministic midpoints.
inline std::vector<float> stratified_depths(float near, float far, int n, RngStream* rng) {
  if (!(near < far) || n < 1) throw ShapeError(cat("stratified_depths: bad range [", near, ",",
                                                   far, "] n=", n));
  std::vector<float> d(static_cast<size_t>(n));
  float w = (far - near) / n;
  for (int i = 0; i < n; ++i) {
    float jitter = rng ? rng->uniform() : 0.5f;
    d[size_t(i)] = near + (i + jitter) * w;
  }
  return d;
}

// Clipped Gaussian around mu, sorted ascending and nudged apart if duplicated.
inline std::vector<float> importance_depths(float near, float far, int n, float mu, float sigma_d,
                                            RngStream& rng) {
  if (!(near < far) || n < 1)
    throw ShapeError(cat("importance_depths: bad range [", near, ",", far, "] n=", n));
  std::vector<float> d(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) d[size_t(i)] = clampf(mu + sigma_d * rng.normal(), near, far);
  std::sort(d.begin(), d.end());
  for (size_t i = 1; i < d.size(); ++i)
    if (d[i] <= d[i - 1]) d[i] = d[i - 1] + 1e-6f;
  return d;
}

// ---------------------------------------------------------------- rendering

struct RaySamples {
  std::vector<float> depths;
  std::vector<SamplePoint> points;
  std::vector<float> sigma;    // activated
  std::vector<float> weights;  // emission-absorption w_n
  double transmittance = 1.0;  // T_{N+1}
};

inline std::vector<float> interval_lengths(const std::vector<float>& depths) {
  size_t n = depths.size();
  std::vector<float> dbar(n, 1.0f);
  for (size_t i = 0; i + 1 < n; ++i) dbar[i] = depths[i + 1] - depths[i];
  if (n >= 2) dbar[n - 1] = dbar[n - 2];  // last interval copies its predecessor
  return dbar;
}

// w_n = T_n (1 - exp(-sigma_n dbar_n)); fills weights and final transmittance.
inline void integrate_ray(RaySamples& rs) {
  if (rs.depths.empty()) throw ShapeError("integrate_ray: empty sample set");
  auto dbar = interval_lengths(rs.depths);
  rs.weights.resize(rs.sigma.size());
  double tau = 0;
  for (size_t i = 0; i < rs.sigma.size(); ++i) {
    double sdb = double(rs.sigma[i]) * dbar[i];
    rs.weights[i] = float(std::exp(-tau) * (1.0 - std::exp(-sdb)));
    tau += sdb;
  }
  rs.transmittance = std::exp(-tau);
}

struct RenderOutput {
  float3 color{0, 0, 0};
  float opacity = 0;
  float depth = 0;
  bool depth_valid = false;
  int argmax = -1;        // sample index with the largest weight (ties: smaller n)
  float max_weight = 0;
};

inline RaySamples trace_ray(const FieldSampler& sampler, const RaySpec& ray,
                            std::vector<float> depths) {
  RaySamples rs;
  rs.depths = std::move(depths);
  rs.points.resize(rs.depths.size());
  rs.sigma.resize(rs.depths.size());
  for (size_t i = 0; i < rs.depths.size(); ++i) {
    rs.points[i] = sampler.sample_point(ray.origin + ray.dir * rs.depths[i]);
    rs.sigma[i] = sampler.field().sigma(rs.points[i]);
  }
  integrate_ray(rs);
  return rs;
}

// Color, opacity, and the weight-normalized depth estimate (valid above the
// opacity threshold).
inline RenderOutput summarize_ray(const FieldSampler& sampler, const RaySamples& rs,
                                  float opacity_threshold = 0.5f) {
  RenderOutput out;
  double opacity = 0, wdepth = 0;
  double cx = 0, cy = 0, cz = 0;
  for (size_t i = 0; i < rs.weights.size(); ++i) {
    float w = rs.weights[i];
    opacity += w;
    wdepth += double(w) * rs.depths[i];
    if (w > 0) {
      float3 c = sampler.field().color(rs.points[i]);
      cx += double(w) * c.x;
      cy += double(w) * c.y;
      cz += double(w) * c.z;
    }
    if (w > out.max_weight) {
      out.max_weight = w;
      out.argmax = int(i);
    }
  }
  out.color = {float(cx), float(cy), float(cz)};
  out.opacity = float(opacity);
  if (opacity > opacity_threshold) {
    out.depth = float(wdepth / opacity);
    out.depth_valid = true;
  }
  return out;
}

// ---------------------------------------------------------------- geometry loss

struct GeometryLossWeights {
  float l2 = 100.0f;
  float hard = 0.01f;
  float sigma_empty = 0.01f;
  float opacity_threshold = 0.5f;
};

struct RayBatch {
  int n_rays = 0;
  int n_samples = 0;                // per ray
  std::vector<SamplePoint> points;  // [R*N]
  std::vector<float> dbar;          // [R*N]
  std::vector<float3> targets;      // [R]
  std::vector<uint8_t> foreground;  // [R] mask value at the pixel
};

struct GeometryLossOut {
  Tensor loss;        // scalar
  Tensor prediction;  // [R,3]
  double l2 = 0;      // plain value of the L2 term
};

// Builds the differentiable loss L = l2*L2 + hard*Lhard + sigma*Lsigma on the
// active Graph. Off-body samples contribute zero density without touching
// field parameters.
inline GeometryLossOut geometry_loss(const DensityField& field, const RayBatch& batch,
                                     const GeometryLossWeights& lw = {}) {
  int R = batch.n_rays, N = batch.n_samples;
  if (R <= 0 || int64_t(R) * N != int64_t(batch.points.size()))
    throw ShapeError(cat("geometry_loss: ", batch.points.size(), " points for ", R, "x", N,
                         " rays"));
  if (int(batch.targets.size()) != R || int(batch.foreground.size()) != R)
    throw ShapeError("geometry_loss: targets/mask size mismatch");

  std::vector<SamplePoint> valid;
  std::vector<int> valid_idx;
  valid.reserve(batch.points.size());
  for (int i = 0; i < int(batch.points.size()); ++i)
    if (batch.points[size_t(i)].on_body) {
      valid.push_back(batch.points[size_t(i)]);
      valid_idx.push_back(i);
    }

  Tensor sigma_pre_full;
  Tensor color_full;
  if (!valid.empty()) {
    Tensor sp = field.sigma_pre_batch(valid);             // [S,1]
    sigma_pre_full = scatter_rows(reshape(sp, {int(valid.size())}), valid_idx, R * N,
                                  DensityField::kOffBodyPre);
    Tensor cb = field.color_batch(valid);                 // [S,3]
    color_full = scatter_rows(cb, valid_idx, R * N, 0.0f);
  } else {
    sigma_pre_full = Tensor::full({R * N}, DensityField::kOffBodyPre);
    color_full = Tensor::zeros({R * N, 3});
  }

  Tensor sigma = reshape(relu(sigma_pre_full), {R, N});
  Tensor dbar = Tensor::from_data({R, N}, batch.dbar);
  Tensor w = volume_weights(sigma, dbar);
  Tensor pred = weighted_reduce(reshape(w, {R, N}), reshape(color_full, {R, N, 3}));  // [R,3]

  std::vector<float> tgt(size_t(R) * 3);
  for (int r = 0; r < R; ++r) {
    tgt[size_t(r) * 3 + 0] = batch.targets[size_t(r)].x;
    tgt[size_t(r) * 3 + 1] = batch.targets[size_t(r)].y;
    tgt[size_t(r) * 3 + 2] = batch.targets[size_t(r)].z;
  }
  Tensor target = Tensor::from_data({R, 3}, std::move(tgt));
  Tensor diff = sub(pred, target);
  Tensor l2 = mean(mul(diff, diff));

  // hard loss: -log(exp(-o) + exp(-(1-o))) + log 2, pushing opacity to {0,1}
  Tensor opacity = row_sum(w);
  Tensor lhard = mean(affine(log(add(exp(affine(opacity, -1.0f)),
                                     exp(affine(opacity, 1.0f, -1.0f)))),
                             -1.0f, std::log(2.0f)));

  // empty-space push on background-ray samples
  std::vector<float> bg_mask(size_t(R) * N, 0.0f);
  int bg_count = 0;
  for (int r = 0; r < R; ++r)
    if (!batch.foreground[size_t(r)]) {
      for (int n = 0; n < N; ++n) bg_mask[size_t(r) * N + n] = 1.0f;
      bg_count += N;
    }
  Tensor lsigma;
  if (bg_count > 0) {
    Tensor masked = mul(sigmoid(sigma_pre_full), Tensor::from_data({R * N}, std::move(bg_mask)));
    lsigma = affine(sum(masked), 1.0f / float(bg_count));
  } else {
    lsigma = Tensor::scalar(0.0f);
  }

  GeometryLossOut out;
  out.loss = add(add(affine(l2, lw.l2), affine(lhard, lw.hard)), affine(lsigma, lw.sigma_empty));
  out.prediction = pred;
  out.l2 = l2.data()[0];
  return out;
}

// ---------------------------------------------------------------- training

struct GeoTrainConfig {
  int epochs = 8;
  int steps_per_epoch = 100;
  int patch = 24;           // patch side, pixels
  int samples_per_ray = 48;
  float lr = 1e-3f;
  float near_pad = 0.0f;    // extra padding on the body bounds (shell added always)
  uint64_t seed = 1;
  GeometryLossWeights loss;
  bool verbose = false;
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0;
  double mean_l2 = 0;
};

// Builds a patch-aligned ray batch from one dataset view. Rays that miss the
// padded body bounds keep off-body samples (they render black at zero cost).
inline RayBatch build_patch_batch(const Dataset& ds, int frame, int cam_idx, int px0, int py0,
                                  int patch, int n_samples, RngStream* jitter) {
  const Camera& cam = ds.cameras[size_t(cam_idx)];
  const PosedBody& body = ds.body(frame);
  const Image& img = ds.frames[size_t(frame)].images[size_t(cam_idx)];
  const Image& mask = ds.frames[size_t(frame)].masks[size_t(cam_idx)];
  AABB box = body.bounds;
  box.pad(ds.mesh.config.shell);

  RayBatch batch;
  batch.n_rays = patch * patch;
  batch.n_samples = n_samples;
  batch.points.resize(size_t(batch.n_rays) * n_samples);
  batch.dbar.resize(size_t(batch.n_rays) * n_samples, 1.0f);
  batch.targets.resize(size_t(batch.n_rays));
  batch.foreground.resize(size_t(batch.n_rays));

  struct RayTask {
    float3 o, d;
    float t0 = 0, t1 = 0;
    bool hit = false;
  };
  std::vector<RayTask> tasks(size_t(batch.n_rays));
  std::vector<float> jitters(size_t(batch.n_rays) * n_samples, 0.5f);
  if (jitter)
    for (auto& j : jitters) j = jitter->uniform();

  for (int py = 0; py < patch; ++py)
    for (int px = 0; px < patch; ++px) {
      int r = py * patch + px;
      int ix = px0 + px, iy = py0 + py;
      batch.targets[size_t(r)] = img.rgb(ix, iy);
      batch.foreground[size_t(r)] = mask.at(ix, iy) > 0.5f ? 1 : 0;
      RayTask& t = tasks[size_t(r)];
      cam.pixel_ray(ix + 0.5f, iy + 0.5f, t.o, t.d);
      float t0, t1;
      t.hit = box.intersect(t.o, t.d, 1e-3f, 1e9f, t0, t1) && t1 > t0;
      t.t0 = t0;
      t.t1 = t1;
    }

  parallel_for(batch.n_rays, [&](int64_t rb, int64_t re) {
    for (int64_t r = rb; r < re; ++r) {
      const RayTask& t = tasks[size_t(r)];
      if (!t.hit) continue;  // points stay off-body
      float w = (t.t1 - t.t0) / n_samples;
      float prev = 0;
      for (int n = 0; n < n_samples; ++n) {
        float depth = t.t0 + (n + jitters[size_t(r) * n_samples + n]) * w;
        batch.points[size_t(r) * n_samples + n] = make_sample_point(body, t.o + t.d * depth);
        if (n > 0) batch.dbar[size_t(r) * n_samples + n - 1] = depth - prev;
        prev = depth;
      }
      batch.dbar[size_t(r + 1) * n_samples - 1] =
          n_samples >= 2 ? batch.dbar[size_t(r + 1) * n_samples - 2] : w;
    }
  });
  return batch;
}

// Projects the posed body bounds into the camera and returns a pixel box.
inline void body_pixel_bounds(const Camera& cam, const AABB& box, int& x0, int& y0, int& x1,
                              int& y1) {
  float minx = 1e9f, miny = 1e9f, maxx = -1e9f, maxy = -1e9f;
  for (int c = 0; c < 8; ++c) {
    float3 p{c & 1 ? box.hi.x : box.lo.x, c & 2 ? box.hi.y : box.lo.y,
             c & 4 ? box.hi.z : box.lo.z};
    float2 pix;
    float depth;
    if (cam.project(p, pix, depth)) {
      minx = std::min(minx, pix.x);
      maxx = std::max(maxx, pix.x);
      miny = std::min(miny, pix.y);
      maxy = std::max(maxy, pix.y);
    }
  }
  x0 = std::clamp(int(minx), 0, cam.width - 1);
  x1 = std::clamp(int(maxx) + 1, 1, cam.width);
  y0 = std::clamp(int(miny), 0, cam.height - 1);
  y1 = std::clamp(int(maxy) + 1, 1, cam.height);
}

inline std::vector<EpochLog> train_geometry(DensityField& field, const Dataset& ds,
                                            const GeoTrainConfig& cfg) {
  if (ds.frames.empty() || ds.cameras.empty())
    throw ShapeError("train_geometry: empty dataset");
  Adam opt(field.parameters(), {.lr = cfg.lr});
  CounterRng rng(cfg.seed);
  std::vector<EpochLog> log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double sum_loss = 0, sum_l2 = 0;
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      uint64_t draw = uint64_t(epoch) * cfg.steps_per_epoch + step;
      int frame = int(rng.index(11, draw, ds.frames.size()));
      int cam = int(rng.index(12, draw, ds.cameras.size()));
      int bx0, by0, bx1, by1;
      AABB box = ds.body(frame).bounds;
      box.pad(ds.mesh.config.shell);
      body_pixel_bounds(ds.cameras[size_t(cam)], box, bx0, by0, bx1, by1);
      int px0 = bx0, py0 = by0;
      if (bx1 - bx0 > cfg.patch)
        px0 = bx0 + int(rng.index(13, draw, uint64_t(bx1 - bx0 - cfg.patch)));
      if (by1 - by0 > cfg.patch)
        py0 = by0 + int(rng.index(14, draw, uint64_t(by1 - by0 - cfg.patch)));
      px0 = std::clamp(px0, 0, std::max(0, ds.cameras[size_t(cam)].width - cfg.patch));
      py0 = std::clamp(py0, 0, std::max(0, ds.cameras[size_t(cam)].height - cfg.patch));

      RngStream jitter(rng, 1000 + draw);
      RayBatch batch = build_patch_batch(ds, frame, cam, px0, py0, cfg.patch,
                                         cfg.samples_per_ray, &jitter);
      Graph g;
      GeometryLossOut out = geometry_loss(field, batch, cfg.loss);
      g.backward(out.loss);
      opt.step();
      sum_loss += out.loss.data()[0];
      sum_l2 += out.l2;
    }
    EpochLog e{epoch, sum_loss / cfg.steps_per_epoch, sum_l2 / cfg.steps_per_epoch};
    log.push_back(e);
    if (cfg.verbose)
      std::fprintf(stderr, "[train-geometry] epoch %d loss %.6f l2 %.6f\n", e.epoch, e.mean_loss,
                   e.mean_l2);
  }
  return log;
}

}  // namespace relight
