#include <catch2/catch_amalgamated.hpp>

#include "relight/inpaint.hpp"
#include "support.hpp"

using namespace relight;

namespace {
// single-capsule body whose one chart spans (almost) the whole atlas
const ProxyMesh& toy_mesh() {
  static ProxyMesh mesh = [] {
    BodyConfig cfg;
    cfg.bones.push_back({"blob", -1, {0, 0, 0.2f}, {0, 0, 1.0f}, 0.2f});
    return ProxyMesh::build(cfg);
  }();
  return mesh;
}

SparseUVMap smooth_normal_field(const ProxyMesh& mesh, int res, float phase_u, float phase_v) {
  SparseUVMap map = SparseUVMap::create(res, res, 3);
  auto charts = chart_texel_mask(mesh, res);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x) {
      size_t t = size_t(y) * res + x;
      if (!charts[t]) continue;
      float u = (x + 0.5f) / res, v = (y + 0.5f) / res;
      float3 n = normalize(float3{0.6f * std::sin(2.0f * u + phase_u),
                                  0.6f * std::cos(3.0f * v + phase_v),
                                  1.0f + 0.3f * std::sin(4.0f * (u + v))});
      map.valid[t] = 1;
      map.best_weight[t] = 1.0f;
      float* p = map.at(int(t));
      p[0] = n.x;
      p[1] = n.y;
      p[2] = n.z;
    }
  return map;
}

// bar-shaped dropouts: what a missing camera leaves behind
std::vector<uint8_t> bar_mask(int res, uint64_t seed) {
  std::vector<uint8_t> keep(size_t(res) * res, 1);
  CounterRng rng(seed);
  int bars = 4 + int(rng.index(0, 0, 3));
  for (int b = 0; b < bars; ++b) {
    bool vertical = rng.index(1, uint64_t(b), 2) == 0;
    int width = 3 + int(rng.index(2, uint64_t(b), 5));
    int at = int(rng.index(3, uint64_t(b), uint64_t(res - width)));
    for (int i = 0; i < res; ++i)
      for (int w = 0; w < width; ++w) {
        if (vertical)
          keep[size_t(i) * res + at + w] = 0;
        else
          keep[size_t(at + w) * res + i] = 0;
      }
  }
  return keep;
}

double masked_angular_error(const SparseUVMap& result, const SparseUVMap& gt,
                            const std::vector<uint8_t>& seen) {
  double acc = 0;
  int n = 0;
  for (int t = 0; t < gt.width * gt.height; ++t) {
    if (!gt.valid[size_t(t)] || seen[size_t(t)]) continue;
    if (!result.valid[size_t(t)]) {
      acc += kPi;
      ++n;
      continue;
    }
    const float* a = result.at(t);
    const float* b = gt.at(t);
    float d = clampf(a[0] * b[0] + a[1] * b[1] + a[2] * b[2], -1.0f, 1.0f);
    acc += std::acos(d);
    ++n;
  }
  return n ? acc / n : 0.0;
}
}  // namespace

TEST_CASE("morphological fill is a fixpoint on dense maps", "[inpaint]") {
  const ProxyMesh& mesh = toy_mesh();
  SparseUVMap map = smooth_normal_field(mesh, 32, 0.1f, 0.7f);
  SparseUVMap copy = map;
  auto res = morph_inpaint(map, mesh, 50, true);
  REQUIRE(res.iterations_used == 0);
  REQUIRE(map.values == copy.values);
  REQUIRE(map.valid == copy.valid);
}

TEST_CASE("a single seed floods its chart with a constant", "[inpaint]") {
  ProxyMesh mesh = ProxyMesh::build(default_body());
  int res = 64;
  SparseUVMap map = SparseUVMap::create(res, res, 3);
  ChartRect rect = mesh.chart_rect(0);
  int t = map.texel_of_uv(0.5f * (rect.x0 + rect.x1), 0.5f * (rect.y0 + rect.y1));
  map.valid[size_t(t)] = 1;
  map.best_weight[size_t(t)] = 1;
  map.at(t)[0] = 0.0f;
  map.at(t)[1] = 1.0f;
  map.at(t)[2] = 0.0f;
  auto res_info = morph_inpaint(map, mesh, 1000, true);
  auto charts = chart_id_raster(mesh, res);
  for (int i = 0; i < res * res; ++i) {
    if (charts[size_t(i)] != 0) continue;
    REQUIRE(map.valid[size_t(i)] == 1);
    REQUIRE(map.at(i)[1] == Catch::Approx(1.0f));
  }
  // the other 15 charts had no seeds
  REQUIRE(res_info.empty_charts == 15);
}

TEST_CASE("checkerboard holes in a smooth field fill accurately", "[inpaint]") {
  const ProxyMesh& mesh = toy_mesh();
  int res = 48;
  SparseUVMap gt = smooth_normal_field(mesh, res, 0.3f, 1.1f);
  SparseUVMap holed = gt;
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      if ((x + y) % 2 == 0) holed.valid[size_t(y) * res + x] = 0;
  morph_inpaint(holed, mesh, 10, true);
  for (int t = 0; t < res * res; ++t) {
    if (!gt.valid[size_t(t)]) continue;
    REQUIRE(holed.valid[size_t(t)] == 1);
    for (int c = 0; c < 3; ++c)
      REQUIRE(std::abs(holed.at(t)[c] - gt.at(t)[c]) < 0.10f);
  }
}

TEST_CASE("partial conv masks never shrink through the net", "[inpaint]") {
  Inpainter net(InpaintNetConfig::normal_net(12), 3);
  int res = 32;
  Tensor input = Tensor::zeros({3, res, res});
  Tensor mask = Tensor::zeros({1, res, res});
  CounterRng rng(5);
  for (int t = 0; t < res * res; ++t)
    mask.data()[t] = rng.uniform(0, uint64_t(t)) < 0.2f ? 1.0f : 0.0f;
  std::vector<Tensor> trace;
  net.forward(input, mask, &trace);
  REQUIRE(trace.size() == 8);
  const Tensor* prev = &mask;
  for (const auto& m : trace) {
    for (int t = 0; t < res * res; ++t)
      if (prev->data()[t] > 0.5f) REQUIRE(m.data()[t] > 0.5f);
    prev = &m;
  }
}

TEST_CASE("full-mask input keeps a full output mask", "[inpaint]") {
  Inpainter net(InpaintNetConfig::normal_net(12), 7);
  int res = 16;
  Tensor input = Tensor::full({3, res, res}, 0.3f);
  Tensor mask = Tensor::full({1, res, res}, 1.0f);
  auto out = net.forward(input, mask);
  for (int t = 0; t < res * res; ++t) REQUIRE(out.mask.data()[t] == 1.0f);
}

TEST_CASE("visibility net output stays in [0,1] and blocks stitch", "[inpaint]") {
  const ProxyMesh& mesh = toy_mesh();
  int res = 32, K = 128, block = 32;
  Inpainter net(InpaintNetConfig::visibility_net(block, 16), 11);

  SparseUVMap vis = SparseUVMap::create(res, res, K);
  SparseUVMap normals = SparseUVMap::create(res, res, 3);
  CounterRng rng(13);
  auto charts = chart_texel_mask(mesh, res);
  for (int t = 0; t < res * res; ++t) {
    if (!charts[size_t(t)] || rng.uniform(0, uint64_t(t)) < 0.4f) continue;
    vis.valid[size_t(t)] = 1;
    vis.best_weight[size_t(t)] = 1;
    for (int c = 0; c < K; ++c) vis.at(t)[c] = rng.uniform(1, uint64_t(t) * K + c);
    normals.valid[size_t(t)] = 1;
    normals.best_weight[size_t(t)] = 1;
    normals.at(t)[2] = 1.0f;
  }
  SparseUVMap dense = inpaint_visibility(net, vis, normals, mesh);
  REQUIRE(dense.channels == K);
  int filled = 0;
  for (int t = 0; t < res * res; ++t) {
    if (!charts[size_t(t)]) continue;
    REQUIRE(dense.valid[size_t(t)] == 1);
    for (int c = 0; c < K; ++c) {
      REQUIRE(dense.at(t)[c] >= 0.0f);
      REQUIRE(dense.at(t)[c] <= 1.0f);
    }
    // known texels keep their original values exactly
    if (vis.valid[size_t(t)]) {
      for (int c = 0; c < K; ++c) REQUIRE(dense.at(t)[c] == vis.at(t)[c]);
      ++filled;
    }
  }
  REQUIRE(filled > 50);
}

TEST_CASE("inpainter training reduces the loss and beats the morphological fill",
          "[inpaint][train]") {
  const ProxyMesh& mesh = toy_mesh();
  const int res = 48;

  // training pairs: smooth normal fields with bar dropouts
  std::vector<SparseUVMap> fields;
  std::vector<std::vector<uint8_t>> masks;
  for (int i = 0; i < 6; ++i) {
    fields.push_back(smooth_normal_field(mesh, res, 0.5f * i, 0.9f - 0.3f * i));
    masks.push_back(bar_mask(res, 100 + uint64_t(i)));
  }
  std::vector<InpaintPair> pairs;
  for (int i = 0; i < 6; ++i) pairs.push_back({&fields[size_t(i)], &masks[size_t(i)], nullptr});

  Inpainter net(InpaintNetConfig::normal_net(12), 21);
  InpaintTrainConfig cfg;
  cfg.steps = 200;
  cfg.crop = 32;
  cfg.lr = 1e-2f;
  cfg.seed = 5;
  auto log = train_inpainter(net, pairs, cfg);
  REQUIRE(log.size() > 150);

  // loss halves within the budget (compare first-10 and last-10 means)
  double early = 0, late = 0;
  for (int i = 0; i < 10; ++i) {
    early += log[size_t(i)].loss;
    late += log[log.size() - 1 - size_t(i)].loss;
  }
  REQUIRE(late < 0.5 * early);

  // paired comparison on held-out fields and masks
  double net_err = 0, morph_err = 0;
  for (int i = 0; i < 3; ++i) {
    SparseUVMap gt = smooth_normal_field(mesh, res, 2.1f + 0.4f * i, 0.2f + 0.5f * i);
    auto keep = bar_mask(res, 500 + uint64_t(i));
    SparseUVMap sparse = gt;
    for (int t = 0; t < res * res; ++t)
      if (!keep[size_t(t)]) sparse.valid[size_t(t)] = 0;

    SparseUVMap net_out = inpaint_normals(net, sparse, mesh);
    SparseUVMap morph_out = sparse;
    morph_inpaint(morph_out, mesh, 200, true);
    net_err += masked_angular_error(net_out, gt, keep);
    morph_err += masked_angular_error(morph_out, gt, keep);
  }
  INFO("net " << net_err / 3 << " rad vs morph " << morph_err / 3 << " rad");
  REQUIRE(net_err < morph_err);

  SECTION("zero steps leave parameters at initialization") {
    Inpainter fresh(InpaintNetConfig::normal_net(12), 21);
    Inpainter fresh2(InpaintNetConfig::normal_net(12), 21);
    InpaintTrainConfig zero;
    zero.steps = 0;
    auto l = train_inpainter(fresh, pairs, zero);
    REQUIRE(l.empty());
    auto p1 = fresh.parameters(), p2 = fresh2.parameters();
    for (size_t i = 0; i < p1.size(); ++i)
      REQUIRE(std::memcmp(p1[i].data(), p2[i].data(), sizeof(float) * p1[i].numel()) == 0);
  }

  SECTION("training rejects an empty dataset") {
    Inpainter fresh(InpaintNetConfig::normal_net(12), 21);
    REQUIRE_THROWS_AS(train_inpainter(fresh, {}, cfg), ShapeError);
  }
}
