#include <catch2/catch_amalgamated.hpp>

#include "relight/density.hpp"
#include "support.hpp"

using namespace relight;

namespace {
DensityField slab_field(float sigma, float z0, float z1) {
  // constant density sigma for z in [z0, z1], zero elsewhere (hard analytic)
  return DensityField::analytic(
      [z0, z1](const float3& p) { return std::max(z0 - p.z, p.z - z1); }, 1.0f);
}
}  // namespace

TEST_CASE("stratified sampling puts one depth per bin", "[density]") {
  CounterRng base(5);
  RngStream rng(base, 1);
  auto d = stratified_depths(0.0f, 1.0f, 4, &rng);
  REQUIRE(d.size() == 4);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(d[size_t(i)] >= 0.25f * i);
    REQUIRE(d[size_t(i)] < 0.25f * (i + 1));
  }
  auto mid = stratified_depths(2.0f, 4.0f, 4, nullptr);
  REQUIRE(mid[1] == Catch::Approx(2.75f));
  REQUIRE_THROWS_AS(stratified_depths(1.0f, 0.5f, 4, &rng), ShapeError);
}

TEST_CASE("importance sampling concentrates around the mean", "[density]") {
  CounterRng base(9);
  SECTION("degenerate sigma collapses to mu but stays distinct") {
    RngStream rng(base, 2);
    auto d = importance_depths(0.0f, 2.0f, 8, 1.0f, 0.0f, rng);
    for (size_t i = 1; i < d.size(); ++i) REQUIRE(d[i] > d[i - 1]);
    for (float v : d) REQUIRE(v == Catch::Approx(1.0f).margin(1e-4));
  }
  SECTION("empirical mean is within 3 sigma/sqrt(N)") {
    const float mu = 1.2f, sd = 0.05f;
    const int N = 10000;
    RngStream rng(base, 3);
    double acc = 0;
    auto d = importance_depths(0.0f, 3.0f, N, mu, sd, rng);
    for (float v : d) acc += v;
    double mean = acc / N;
    REQUIRE(std::abs(mean - mu) < 3.0 * sd / std::sqrt(double(N)));
  }
}

TEST_CASE("volume rendering basics", "[density]") {
  SECTION("zero density renders nothing") {
    DensityField f = DensityField::analytic([](const float3&) { return 10.0f; }, 1.0f);
    // sharpness-1 sigmoid of sdf=10 is ~0; force exact zero with a custom field
    DensityField zero = DensityField::analytic([](const float3&) { return 1e9f; }, 1.0f);
    FieldSampler s(zero);
    RaySpec ray{{0, 0, 0}, {0, 0, 1}, 0.1f, 2.0f};
    RaySamples rs = trace_ray(s, ray, stratified_depths(ray.near, ray.far, 16, nullptr));
    RenderOutput out = summarize_ray(s, rs);
    REQUIRE(out.opacity == 0.0f);
    REQUIRE(out.color.x == 0.0f);
    REQUIRE_FALSE(out.depth_valid);
    (void)f;
  }
  SECTION("empty sample set is rejected") {
    RaySamples rs;
    REQUIRE_THROWS_AS(integrate_ray(rs), ShapeError);
  }
  SECTION("single opaque sample takes all the weight") {
    RaySamples rs;
    rs.depths = {0.7f};
    rs.sigma = {20.0f};  // dbar defaults to 1 for a single sample
    rs.points.resize(1);
    integrate_ray(rs);
    REQUIRE(rs.weights[0] == Catch::Approx(1.0f).margin(1e-6));
    DensityField zero = DensityField::analytic([](const float3&) { return 1e9f; }, 1.0f);
    FieldSampler s(zero);
    RenderOutput out = summarize_ray(s, rs);
    REQUIRE(out.depth_valid);
    REQUIRE(out.depth == Catch::Approx(0.7f));
    REQUIRE(out.argmax == 0);
  }
}

TEST_CASE("homogeneous slab opacity matches the analytic transmittance", "[density]") {
  const float c = 2.5f, thickness = 0.8f;
  // sharp analytic slab: sigma = c inside [1, 1.8]
  DensityField f = DensityField::analytic(
      [](const float3& p) { return std::max(1.0f - p.z, p.z - 1.8f); }, 4000.0f);
  // analytic sigma is sharpness*sigmoid which is ~sharpness inside; instead
  // build the slab directly from plain samples
  FieldSampler s(f);
  RaySpec ray{{0, 0, 0}, {0, 0, 1}, 0.5f, 2.3f};
  RaySamples rs;
  rs.depths = stratified_depths(ray.near, ray.far, 256, nullptr);
  rs.points.resize(rs.depths.size());
  rs.sigma.resize(rs.depths.size());
  for (size_t i = 0; i < rs.depths.size(); ++i) {
    float z = ray.origin.z + ray.dir.z * rs.depths[i];
    rs.sigma[i] = (z >= 1.0f && z <= 1.8f) ? c : 0.0f;
  }
  integrate_ray(rs);
  double opacity = 0;
  for (float w : rs.weights) opacity += w;
  double expect = 1.0 - std::exp(-double(c) * thickness);
  REQUIRE(std::abs(opacity - expect) < 1e-3);

  // refinement: doubling N halves the mean error under jittered stratified
  // sampling (deterministic midpoints quantize the boundary-bin error)
  CounterRng base(3);
  // both the per-bin jitter and the slab phase are randomized; a fixed
  // phase quantizes the boundary-bin error and breaks the 1/N scaling
  auto run = [&](int N, int trial) {
    RngStream rng(base, uint64_t(N) * 1000 + uint64_t(trial));
    float z0 = 0.9f + 0.2f * rng.uniform();
    RaySamples r2;
    r2.depths = stratified_depths(ray.near, ray.far, N, &rng);
    r2.points.resize(r2.depths.size());
    r2.sigma.resize(r2.depths.size());
    for (size_t i = 0; i < r2.depths.size(); ++i) {
      float z = ray.origin.z + ray.dir.z * r2.depths[i];
      r2.sigma[i] = (z >= z0 && z <= z0 + thickness) ? c : 0.0f;
    }
    integrate_ray(r2);
    double o = 0;
    for (float w : r2.weights) o += w;
    return std::abs(o - expect);
  };
  double e128 = 0, e256 = 0;
  for (int t = 0; t < 300; ++t) {
    e128 += run(128, t);
    e256 += run(256, t);
  }
  double ratio = e128 / std::max(e256, 1e-12);
  REQUIRE(ratio > 1.5);
  REQUIRE(ratio < 2.5);
}

TEST_CASE("weights and final transmittance form a partition of unity", "[density]") {
  CounterRng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    int N = 2 + int(rng.index(0, trial, 63));
    RaySamples rs;
    rs.depths.resize(size_t(N));
    rs.sigma.resize(size_t(N));
    rs.points.resize(size_t(N));
    float d = 0.1f;
    for (int i = 0; i < N; ++i) {
      d += 0.01f + rng.uniform(1, trial * 100 + i);
      rs.depths[size_t(i)] = d;
      rs.sigma[size_t(i)] = 5.0f * rng.uniform(2, trial * 100 + i);
    }
    integrate_ray(rs);
    double sum = rs.transmittance;
    for (float w : rs.weights) {
      REQUIRE(w >= 0.0f);
      sum += w;
    }
    REQUIRE(std::abs(sum - 1.0) < 1e-5);

    // monotone transmittance
    double tau = 0;
    double prevT = 1.0;
    auto dbar = interval_lengths(rs.depths);
    for (int i = 0; i < N; ++i) {
      tau += double(rs.sigma[size_t(i)]) * dbar[size_t(i)];
      double T = std::exp(-tau);
      REQUIRE(T <= prevT + 1e-12);
      prevT = T;
    }
  }
}

TEST_CASE("impulse density is recovered by the unbiased depth", "[density]") {
  CounterRng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    float dstar = 0.5f + 1.5f * rng.uniform(0, trial);
    int N = 128;
    float near = 0.1f, far = 2.5f;
    float spacing = (far - near) / N;
    RaySamples rs;
    rs.depths = stratified_depths(near, far, N, nullptr);
    rs.points.resize(rs.depths.size());
    rs.sigma.resize(rs.depths.size());
    for (size_t i = 0; i < rs.depths.size(); ++i)
      rs.sigma[size_t(i)] = (rs.depths[i] >= dstar && rs.depths[i] <= dstar + 2 * spacing)
                                ? 500.0f : 0.0f;
    integrate_ray(rs);
    double opacity = 0, wd = 0;
    for (size_t i = 0; i < rs.weights.size(); ++i) {
      opacity += rs.weights[i];
      wd += double(rs.weights[i]) * rs.depths[i];
    }
    REQUIRE(opacity > 0.5);
    double depth = wd / opacity;
    REQUIRE(std::abs(depth - dstar) < 2.0 * spacing);
  }
}

namespace {
RayBatch manual_batch(const std::vector<SamplePoint>& pts, int R, int N,
                      const std::vector<float3>& targets, const std::vector<uint8_t>& fg) {
  RayBatch b;
  b.n_rays = R;
  b.n_samples = N;
  b.points = pts;
  b.dbar.assign(size_t(R) * N, 0.1f);
  b.targets = targets;
  b.foreground = fg;
  return b;
}
SamplePoint canon_sample(float x, float y, float z) {
  SamplePoint sp;
  sp.on_body = true;
  sp.canonical = {x, y, z};
  sp.u = 0.5f; sp.v = 0.5f; sp.h = 0;
  sp.world = {x, y, z};
  return sp;
}
}  // namespace

TEST_CASE("geometry loss components", "[density]") {
  SECTION("background sigma push matches sigmoid of the preactivation") {
    for (float pre : {5.0f, -5.0f}) {
      DensityField f = DensityField::voxel(4, pre);
      std::vector<SamplePoint> pts = {canon_sample(0, 0, 0), canon_sample(0.1f, 0, 0)};
      RayBatch b = manual_batch(pts, 1, 2, {{0, 0, 0}}, {0});
      Graph g;
      GeometryLossWeights lw;
      lw.l2 = 0;
      lw.hard = 0;
      lw.sigma_empty = 1.0f;
      auto out = geometry_loss(f, b, lw);
      float expect = 1.0f / (1.0f + std::exp(-pre));
      REQUIRE(out.loss.data()[0] == Catch::Approx(expect).margin(1e-4));
    }
  }

  SECTION("perfect prediction with saturated opacity sits at the loss floor") {
    DensityField f = DensityField::voxel(4, 50.0f);  // opaque everywhere
    std::vector<SamplePoint> pts = {canon_sample(0, 0, 0), canon_sample(0.05f, 0, 0)};
    RayBatch b = manual_batch(pts, 1, 2, {{0, 0, 0}}, {1});
    {
      Graph g;
      auto probe = geometry_loss(f, b, {.l2 = 0, .hard = 0, .sigma_empty = 0});
      (void)probe;
    }
    // render once to get the prediction, then use it as the target
    Graph g0;
    auto first = geometry_loss(f, b, {.l2 = 1, .hard = 0, .sigma_empty = 0});
    float3 pred{first.prediction.data()[0], first.prediction.data()[1],
                first.prediction.data()[2]};
    RayBatch b2 = manual_batch(pts, 1, 2, {pred}, {1});
    Graph g;
    auto out = geometry_loss(f, b2, {.l2 = 1, .hard = 1, .sigma_empty = 0});
    // L2 exactly zero; hard loss at its minimum value -log(1+e^-1)+log 2
    float hard_min = -std::log(1.0f + std::exp(-1.0f)) + std::log(2.0f);
    REQUIRE(out.l2 == Catch::Approx(0.0).margin(1e-10));
    REQUIRE(out.loss.data()[0] == Catch::Approx(hard_min).margin(1e-3));
  }

  SECTION("shape mismatches are rejected") {
    DensityField f = DensityField::voxel(4, 0.0f);
    RayBatch b = manual_batch({canon_sample(0, 0, 0)}, 1, 2, {{0, 0, 0}}, {1});
    Graph g;
    REQUIRE_THROWS_AS(geometry_loss(f, b), ShapeError);
  }
}

TEST_CASE("geometry loss gradient matches finite differences", "[density]") {
  // preactivations kept clear of the ReLU kink so the finite-difference
  // oracle stays valid
  DensityField f = DensityField::voxel(3, 0.55f);
  CounterRng rng(31);
  for (auto& p : f.parameters())
    for (int64_t i = 0; i < p.numel(); ++i)
      p.data()[i] += 0.4f * (rng.uniform(1, uint64_t(i)) - 0.5f);

  std::vector<SamplePoint> pts;
  std::vector<float3> targets;
  std::vector<uint8_t> fg;
  int R = 4, N = 5;
  for (int r = 0; r < R; ++r) {
    for (int n = 0; n < N; ++n)
      pts.push_back(canon_sample(-0.8f + 0.4f * r + 0.02f * n, 0.1f * n - 0.2f, 0.3f - 0.1f * n));
    targets.push_back({0.2f + 0.1f * r, 0.5f, 0.3f});
    fg.push_back(r % 2 == 0 ? 1 : 0);
  }
  RayBatch batch = manual_batch(pts, R, N, targets, fg);

  for (auto& param : f.parameters()) {
    auto forward = [&]() {
      auto out = geometry_loss(f, batch);
      return out.loss;
    };
    REQUIRE(testsup::check_gradient(param, forward, 2e-2f) < 1e-3);
  }
}

TEST_CASE("voxel field trains against rendered silhouettes", "[density][train]") {
  // Synthetic dataset: flat-shaded raycast renders of the posed proxy from a
  // camera ring; the voxel field must explain them volumetrically.
  Dataset ds;
  ds.mesh = ProxyMesh::build(default_body());
  Pose pose = Pose::rest(16);
  ds.posed.push_back(std::make_unique<PosedBody>(ds.mesh, pose));
  FrameData frame;
  frame.index = 0;
  frame.pose = pose;
  const int W = 56, H = 56, CAMS = 6;
  float3 look{0, 0, 0.95f};
  for (int c = 0; c < CAMS; ++c) {
    float ang = 2.0f * kPi * c / CAMS;
    float3 eye{2.2f * std::cos(ang), 2.2f * std::sin(ang), 1.1f};
    Camera cam = Camera::look_at(eye, look, {0, 0, 1}, 60.0f, W, H);
    ds.cameras.push_back(cam);
    Image img(W, H, 3), mask(W, H, 1);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        float3 o, d;
        cam.pixel_ray(x + 0.5f, y + 0.5f, o, d);
        auto hit = ds.posed[0]->bvh.raycast(o, d);
        if (hit.face >= 0) {
          img.set_rgb(x, y, {0.7f, 0.55f, 0.4f});
          mask.at(x, y) = 1.0f;
        }
      }
    frame.images.push_back(std::move(img));
    frame.masks.push_back(std::move(mask));
  }
  ds.frames.push_back(std::move(frame));

  DensityField field = DensityField::voxel(48);
  GeoTrainConfig cfg;
  cfg.epochs = 0;
  auto empty_log = train_geometry(field, ds, cfg);
  REQUIRE(empty_log.empty());
  // zero epochs leave parameters untouched
  REQUIRE(field.parameters()[0].data()[0] == 0.5f);

  // masked L2 against the dataset before and after a short training run
  auto masked_l2 = [&]() {
    FieldSampler sampler(field, ds.posed[0].get());
    AABB box = ds.posed[0]->bounds;
    box.pad(ds.mesh.config.shell);
    double acc = 0;
    int count = 0;
    for (int c = 0; c < CAMS; ++c)
      for (int y = 0; y < H; y += 2)
        for (int x = 0; x < W; x += 2) {
          if (ds.frames[0].masks[size_t(c)].at(x, y) < 0.5f) continue;
          float3 o, d;
          ds.cameras[size_t(c)].pixel_ray(x + 0.5f, y + 0.5f, o, d);
          float t0, t1;
          if (!box.intersect(o, d, 1e-3f, 1e9f, t0, t1)) continue;
          RaySamples rs = trace_ray(sampler, {o, d, t0, t1},
                                    stratified_depths(t0, t1, 48, nullptr));
          RenderOutput out = summarize_ray(sampler, rs);
          float3 diff = out.color - ds.frames[0].images[size_t(c)].rgb(x, y);
          acc += dot(diff, diff);
          ++count;
        }
    return acc / count;
  };

  double before = masked_l2();
  cfg.epochs = 10;
  cfg.steps_per_epoch = 60;
  cfg.patch = 16;
  cfg.samples_per_ray = 40;
  cfg.lr = 0.05f;  // voxel parameters want a much larger step than an MLP
  cfg.seed = 4;
  auto log = train_geometry(field, ds, cfg);
  REQUIRE(log.size() == 10);
  double after = masked_l2();
  INFO("masked L2 " << before << " -> " << after);
  REQUIRE(after < 0.10 * before);

  // training loss decreases across the first epochs (one non-monotone step allowed)
  int violations = 0;
  for (size_t i = 1; i < log.size(); ++i)
    if (log[i].mean_loss > log[i - 1].mean_loss) ++violations;
  REQUIRE(violations <= 1);
}
