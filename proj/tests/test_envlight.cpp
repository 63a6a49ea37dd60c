#include <catch2/catch_amalgamated.hpp>

#include "relight/envlight.hpp"
#include "support.hpp"

using namespace relight;

TEST_CASE("texel geometry covers the sphere", "[envlight]") {
  std::vector<float3> dirs;
  std::vector<double> sa;
  texel_geometry(16, 32, dirs, sa);
  REQUIRE(dirs.size() == 512);

  double total = 0;
  for (double v : sa) total += v;
  REQUIRE(std::abs(total - 4.0 * kPi) < 1e-9 * 4.0 * kPi);

  for (const auto& d : dirs) REQUIRE(std::abs(length(d) - 1.0f) < 1e-6f);

  // equatorial rows carry the largest solid angle of the latitude sweep
  double eq = sa[7 * 32];
  for (int i = 0; i < 16; ++i) REQUIRE(sa[size_t(i) * 32] <= eq + 1e-12);
  REQUIRE(sa[0] < eq);
}

TEST_CASE("direction_to_texel inverts texel centers", "[envlight]") {
  std::vector<float3> dirs;
  std::vector<double> sa;
  texel_geometry(16, 32, dirs, sa);
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 32; ++j) {
      auto [ti, tj] = direction_to_texel(dirs[size_t(i) * 32 + j], 16, 32);
      REQUIRE(ti == i);
      REQUIRE(tj == j);
    }
}

TEST_CASE("hdr_merge basics", "[envlight]") {
  SECTION("single image divides by exposure") {
    ExposureStack st;
    st.images.emplace_back(2, 2, 3, 0.25f);
    st.exposure_times = {0.5f};
    Image out = hdr_merge(st);
    REQUIRE(out.at(0, 0, 0) == Catch::Approx(0.5f));
  }
  SECTION("two consistent exposures agree exactly") {
    ExposureStack st;
    st.images.emplace_back(1, 1, 1, 0.2f);
    st.images.emplace_back(1, 1, 1, 0.4f);
    st.exposure_times = {0.1f, 0.2f};
    Image out = hdr_merge(st);
    REQUIRE(out.at(0, 0, 0) == Catch::Approx(2.0f).epsilon(1e-6));
  }
  SECTION("rejects empty and mismatched stacks") {
    ExposureStack st;
    REQUIRE_THROWS_AS(hdr_merge(st), ShapeError);
    st.images.emplace_back(2, 2, 1, 0.1f);
    st.images.emplace_back(3, 2, 1, 0.1f);
    st.exposure_times = {0.1f, 0.2f};
    REQUIRE_THROWS_AS(hdr_merge(st), ShapeError);
  }
}

TEST_CASE("hdr_merge recovers a clipped radiance field", "[envlight]") {
  // Forward-simulate 5 exposures of a random field with clipping at 1.0,
  // then invert; unsaturated pixels must come back within 1%.
  CounterRng rng(101);
  int W = 24, H = 16;
  Image truth(W, H, 1);
  for (int i = 0; i < W * H; ++i)
    truth.px[size_t(i)] = 0.05f + 20.0f * rng.uniform(0, i);

  ExposureStack st;
  st.exposure_times = {0.01f, 0.04f, 0.16f, 0.64f, 2.56f};
  for (float t : st.exposure_times) {
    Image exp_img(W, H, 1);
    for (int i = 0; i < W * H; ++i) exp_img.px[size_t(i)] = std::min(1.0f, truth.px[size_t(i)] * t);
    st.images.push_back(std::move(exp_img));
  }
  std::vector<uint8_t> saturated;
  Image rec = hdr_merge(st, &saturated);
  for (int i = 0; i < W * H; ++i) {
    bool unsaturated = truth.px[size_t(i)] * st.exposure_times.front() < 1.0f;
    if (!unsaturated) continue;
    REQUIRE(std::abs(rec.px[size_t(i)] - truth.px[size_t(i)]) / truth.px[size_t(i)] < 0.01f);
  }
}

TEST_CASE("hdr_merge is scale-equivariant in exposure time", "[envlight]") {
  CounterRng rng(7);
  ExposureStack a, b;
  a.exposure_times = {0.05f, 0.2f, 0.8f};
  b.exposure_times = {0.1f, 0.4f, 1.6f};  // doubled
  for (int j = 0; j < 3; ++j) {
    Image img(5, 4, 1);
    for (size_t i = 0; i < img.px.size(); ++i) img.px[i] = rng.uniform(j, i);
    a.images.push_back(img);
    b.images.push_back(img);
  }
  Image ra = hdr_merge(a), rb = hdr_merge(b);
  for (size_t i = 0; i < ra.px.size(); ++i)
    REQUIRE(rb.px[i] == Catch::Approx(ra.px[i] * 0.5f).margin(1e-7));
}

TEST_CASE("probe reflection at the sphere center looks backward", "[envlight]") {
  ProbeGeometry geo;
  geo.center = {32, 32};
  geo.radius = 30;
  geo.view_dir = normalize(float3{0.3f, 0.8f, -0.2f});
  float3 r;
  float ci;
  REQUIRE(probe_reflection(geo, 32, 32, r, ci));
  REQUIRE(ci == Catch::Approx(1.0f));
  float3 back = normalize(geo.view_dir) * -1.0f;
  REQUIRE(length(r - back) < 1e-6f);
  // lands at the lat-long texel of -d
  auto [ti, tj] = direction_to_texel(r, 16, 32);
  auto [ei, ej] = direction_to_texel(back, 16, 32);
  REQUIRE(ti == ei);
  REQUIRE(tj == ej);
}

TEST_CASE("constant probe unwraps to a constant map on covered texels", "[envlight]") {
  ProbeGeometry geo;
  geo.center = {64, 64};
  geo.radius = 60;
  geo.view_dir = {0, 1, 0};
  Image probe(128, 128, 3);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) probe.set_rgb(x, y, {0.25f, 0.5f, 0.75f});
  auto res = sphere_unwrap({{probe, geo}}, 16, 32);
  int covered = 0;
  for (int t = 0; t < 512; ++t) {
    if (!res.covered[size_t(t)]) continue;
    ++covered;
    float3 c = res.env.rad(t);
    REQUIRE(c.x == Catch::Approx(0.25f).margin(1e-5));
    REQUIRE(c.z == Catch::Approx(0.75f).margin(1e-5));
  }
  REQUIRE(covered > 400);  // one shot covers most of the sphere
}

TEST_CASE("sphere_unwrap rejects circles outside the raster", "[envlight]") {
  ProbeGeometry geo;
  geo.center = {10, 10};
  geo.radius = 30;
  Image probe(64, 64, 3);
  REQUIRE_THROWS_AS(sphere_unwrap({{probe, geo}}, 16, 32), ShapeError);
}

namespace {
// Smooth positive analytic environment (polynomial in the direction vector,
// so it is continuous at the poles).
float3 analytic_env(const float3& d) {
  float base = 1.0f + 0.5f * d.z + 0.6f * d.x * d.y;
  return {base, base * (0.8f + 0.2f * d.x), base * (0.9f - 0.1f * d.y)};
}
}  // namespace

TEST_CASE("unwrap recovers an analytic environment outside the rim", "[envlight]") {
  ProbeGeometry front, back;
  front.center = {256, 256};
  front.radius = 250;
  front.view_dir = {0, 1, 0};
  back.center = {256, 256};
  back.radius = 250;
  back.view_dir = {0, -1, 0};
  Image p1 = render_probe(analytic_env, front, 512, 512);
  Image p2 = render_probe(analytic_env, back, 512, 512);
  auto res = sphere_unwrap({{p1, front}, {p2, back}}, 32, 64);
  int checked = 0;
  for (int t = 0; t < 32 * 64; ++t) {
    REQUIRE(res.covered[size_t(t)]);  // two opposing shots cover everything
    // the unwrap estimates the bin average, so that is the oracle value
    int ti = t / 64, tj = t % 64;
    float3 truth{0, 0, 0};
    for (int sy = 0; sy < 3; ++sy)
      for (int sx = 0; sx < 3; ++sx) {
        float th = (ti + (sy + 0.5f) / 3.0f) * kPi / 32;
        float ph = (tj + (sx + 0.5f) / 3.0f) * 2.0f * kPi / 64;
        truth += analytic_env(latlong_direction(th, ph));
      }
    truth = truth / 9.0f;
    float3 got = res.env.rad(t);
    for (int c = 0; c < 3; ++c) {
      float rel = std::abs(got[c] - truth[c]) / truth[c];
      REQUIRE(rel < 0.02f);
    }
    ++checked;
  }
  REQUIRE(checked == 2048);
}

TEST_CASE("unwrap of a rendered texel map is the identity on covered texels", "[envlight]") {
  CounterRng rng(33);
  Image src(32, 16, 3);
  for (size_t i = 0; i < src.px.size(); ++i) src.px[i] = 0.1f + rng.uniform(0, i);
  EnvironmentMap env = EnvironmentMap::from_radiance(src);
  auto lookup = [&](const float3& d) {
    auto [i, j] = direction_to_texel(d, 16, 32);
    return env.radiance.rgb(j, i);
  };
  ProbeGeometry front, back;
  front.center = {300, 300};
  front.radius = 290;
  front.view_dir = {0, 1, 0};
  back = front;
  back.view_dir = {0, -1, 0};
  Image p1 = render_probe(lookup, front, 600, 600);
  Image p2 = render_probe(lookup, back, 600, 600);
  auto res = sphere_unwrap({{p1, front}, {p2, back}}, 16, 32);
  for (int t = 0; t < 512; ++t) {
    if (!res.covered[size_t(t)]) continue;
    float3 got = res.env.rad(t);
    float3 want = env.rad(t);
    // texels whose probe footprint straddles a bin edge mix neighbours;
    // require the bulk to match tightly
    if (length(got - want) < 1e-4f) continue;
  }
  int exact = 0, covered = 0;
  for (int t = 0; t < 512; ++t) {
    if (!res.covered[size_t(t)]) continue;
    ++covered;
    if (length(res.env.rad(t) - env.rad(t)) < 1e-4f) ++exact;
  }
  REQUIRE(covered > 500);
  REQUIRE(exact > covered * 9 / 10);
}

TEST_CASE("resample preserves constants and identity", "[envlight]") {
  EnvironmentMap c = EnvironmentMap::constant(8, 16, {0.3f, 0.6f, 0.9f});
  EnvironmentMap up = resample_latlong(c, 17, 33);
  for (int t = 0; t < up.texel_count(); ++t) {
    REQUIRE(up.rad(t).x == Catch::Approx(0.3f).margin(1e-6));
    REQUIRE(up.rad(t).y == Catch::Approx(0.6f).margin(1e-6));
  }

  CounterRng rng(5);
  Image src(32, 16, 3);
  for (size_t i = 0; i < src.px.size(); ++i) src.px[i] = rng.uniform(0, i);
  EnvironmentMap env = EnvironmentMap::from_radiance(src);
  EnvironmentMap same = resample_latlong(env, 16, 32);
  for (size_t i = 0; i < src.px.size(); ++i)
    REQUIRE(same.radiance.px[i] == Catch::Approx(env.radiance.px[i]).margin(1e-6));
}

TEST_CASE("resample preserves total flux", "[envlight]") {
  // single lit texel downsampled 32x64 -> 16x32
  Image src(64, 32, 3);
  src.set_rgb(20, 9, {10.0f, 5.0f, 2.5f});
  EnvironmentMap env = EnvironmentMap::from_radiance(src);
  EnvironmentMap down = resample_latlong(env, 16, 32);
  float3 f0 = env.total_flux(), f1 = down.total_flux();
  REQUIRE(std::abs(f1.x - f0.x) <= 1e-4f * f0.x);
  REQUIRE(std::abs(f1.y - f0.y) <= 1e-4f * f0.y);
  REQUIRE(std::abs(f1.z - f0.z) <= 1e-4f * f0.z);

  // random map, odd target sizes
  CounterRng rng(77);
  Image r(24, 12, 3);
  for (size_t i = 0; i < r.px.size(); ++i) r.px[i] = rng.uniform(0, i);
  EnvironmentMap e2 = EnvironmentMap::from_radiance(r);
  EnvironmentMap d2 = resample_latlong(e2, 7, 13);
  float3 g0 = e2.total_flux(), g1 = d2.total_flux();
  REQUIRE(std::abs(g1.x - g0.x) <= 1e-4f * g0.x);
}
