#pragma once

// Densifying sparse UV maps. Two routes: an iterative morphological fill (the
// ablation baseline) and trainable partial-convolution networks. The normal
// net runs at full map resolution; the visibility net processes direction
// channels in shared-weight blocks so 512 directions stay affordable.

#include <vector>

#include "relight/body.hpp"
#include "relight/geomaps.hpp"
#include "relight/nn.hpp"

namespace relight {

// ---------------------------------------------------------------- chart masks

// 1 where the texel center belongs to some chart (gutters excluded).
inline std::vector<uint8_t> chart_texel_mask(const ProxyMesh& mesh, int res) {
  std::vector<uint8_t> mask(size_t(res) * res, 0);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      if (mesh.chart_of_uv((x + 0.5f) / res, (y + 0.5f) / res) >= 0)
        mask[size_t(y) * res + x] = 1;
  return mask;
}

inline std::vector<int> chart_id_raster(const ProxyMesh& mesh, int res) {
  std::vector<int> ids(size_t(res) * res, -1);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      ids[size_t(y) * res + x] = mesh.chart_of_uv((x + 0.5f) / res, (y + 0.5f) / res);
  return ids;
}

// ---------------------------------------------------------------- morphological fill

struct MorphResult {
  int iterations_used = 0;
  int empty_charts = 0;  // charts with no seed texel (left invalid)
};

// Iterative dilation within each chart: an invalid texel with at least one
// valid 4-neighbor of the same chart takes the mean of those neighbors.
// Normals (3 channels, unit_payload) are renormalized per texel.
inline MorphResult morph_inpaint(SparseUVMap& map, const ProxyMesh& mesh, int max_iterations,
                                 bool unit_payload = false) {
  int res = map.width;
  if (map.height != res) throw ShapeError("morph_inpaint: map must be square");
  std::vector<int> chart = chart_id_raster(mesh, res);

  MorphResult out;
  for (int it = 0; it < max_iterations; ++it) {
    std::vector<std::pair<int, std::vector<float>>> updates;
    for (int y = 0; y < res; ++y)
      for (int x = 0; x < res; ++x) {
        size_t t = size_t(y) * res + x;
        if (map.valid[t] || chart[t] < 0) continue;
        std::vector<float> acc(size_t(map.channels), 0.0f);
        int count = 0;
        const int dx[4] = {1, -1, 0, 0}, dy[4] = {0, 0, 1, -1};
        for (int k = 0; k < 4; ++k) {
          int nx = x + dx[k], ny = y + dy[k];
          if (nx < 0 || nx >= res || ny < 0 || ny >= res) continue;
          size_t nt = size_t(ny) * res + nx;
          if (!map.valid[nt] || chart[nt] != chart[t]) continue;
          const float* p = map.at(int(nt));
          for (int c = 0; c < map.channels; ++c) acc[size_t(c)] += p[c];
          ++count;
        }
        if (count == 0) continue;
        for (auto& v : acc) v /= float(count);
        if (unit_payload && map.channels == 3) {
          float3 n = normalize(float3{acc[0], acc[1], acc[2]});
          acc = {n.x, n.y, n.z};
        }
        updates.emplace_back(int(t), std::move(acc));
      }
    if (updates.empty()) break;
    for (auto& [t, vals] : updates) {
      std::copy(vals.begin(), vals.end(), map.at(t));
      map.valid[size_t(t)] = 1;
      if (map.best_weight[size_t(t)] == 0) map.best_weight[size_t(t)] = 1e-6f;
    }
    out.iterations_used = it + 1;
  }

  // charts that never produced a valid texel
  std::vector<uint8_t> chart_has(size_t(mesh.joint_count()), 0);
  std::vector<uint8_t> chart_exists(size_t(mesh.joint_count()), 0);
  for (int t = 0; t < res * res; ++t)
    if (chart[size_t(t)] >= 0) {
      chart_exists[size_t(chart[size_t(t)])] = 1;
      if (map.valid[size_t(t)]) chart_has[size_t(chart[size_t(t)])] = 1;
    }
  for (int b = 0; b < mesh.joint_count(); ++b)
    if (chart_exists[size_t(b)] && !chart_has[size_t(b)]) {
      ++out.empty_charts;
      std::fprintf(stderr, "[morph_inpaint] warning: chart %d ('%s') has no valid texels\n", b,
                   mesh.config.bones[size_t(b)].name.c_str());
    }
  return out;
}

// ---------------------------------------------------------------- partial conv nets

struct InpaintLayer {
  int out_channels = 32;
  int kernel = 3;
  int stride = 1;
  bool depth_to_space_before = false;  // upsample x2 entering this layer
};

struct InpaintNetConfig {
  int input_channels = 3;
  std::vector<InpaintLayer> layers;
  bool sigmoid_output = false;
  float leaky_slope = 0.2f;

  // 8 partial convolutions at constant width and full resolution.
  static InpaintNetConfig normal_net(int width = 32) {
    InpaintNetConfig cfg;
    cfg.input_channels = 3;
    for (int i = 0; i < 7; ++i) cfg.layers.push_back({width, 3, 1, false});
    cfg.layers.push_back({3, 3, 1, false});
    return cfg;
  }

  // Visibility runs on a direction block plus the (downsampled) normal map:
  // one stride-2 stage and one depth-to-space x2 bring it back to full
  // resolution; weights are shared across direction blocks.
  static InpaintNetConfig visibility_net(int dir_block = 64, int width = 64) {
    InpaintNetConfig cfg;
    cfg.input_channels = dir_block + 3;
    cfg.layers.push_back({width, 3, 1, false});
    cfg.layers.push_back({width, 3, 2, false});
    for (int i = 0; i < 4; ++i) cfg.layers.push_back({width, 3, 1, false});
    cfg.layers.push_back({width * 4, 3, 1, false});
    cfg.layers.push_back({dir_block, 3, 1, true});  // d2s, then conv to the block
    cfg.sigmoid_output = true;
    return cfg;
  }
};

// Nearest-neighbor x2 for the mask channel (not differentiated).
inline Tensor upsample_mask_2x(const Tensor& mask) {
  int H = mask.dim(1), W = mask.dim(2);
  Tensor out = Tensor::zeros({1, 2 * H, 2 * W});
  const float* src = mask.data();
  float* dst = out.data();
  for (int y = 0; y < 2 * H; ++y)
    for (int x = 0; x < 2 * W; ++x)
      dst[size_t(y) * 2 * W + x] = src[size_t(y / 2) * W + x / 2];
  return out;
}

class Inpainter {
 public:
  InpaintNetConfig config;

  Inpainter() = default;
  // Each layer starts as a box-averaging kernel on matching channels plus
  // small noise, so the untrained stack already behaves like an iterated
  // neighborhood fill; training refines from that operating point instead of
  // fighting the renormalization amplification at mask fronts.
  Inpainter(InpaintNetConfig cfg, uint64_t seed) : config(std::move(cfg)) {
    RngStream rng{CounterRng(seed), 4242};
    int in = config.input_channels;
    for (const auto& layer : config.layers) {
      if (layer.depth_to_space_before) {
        if (in % 4 != 0)
          throw ConfigError(cat("Inpainter: depth-to-space needs 4|channels, got ", in));
        in /= 4;
      }
      int k = layer.kernel;
      float noise = 0.003f / std::sqrt(float(in * k * k));
      std::vector<float> w(size_t(layer.out_channels) * in * k * k);
      for (auto& v : w) v = rng.normal() * noise;
      float avg = 1.0f / float(k * k);
      for (int o = 0; o < layer.out_channels; ++o) {
        int i = o % in;
        for (int t = 0; t < k * k; ++t)
          w[((size_t(o) * in + i) * k * k) + t] += avg;
      }
      weights_.push_back(Tensor::from_data({layer.out_channels, in, k, k}, std::move(w), true));
      biases_.push_back(Tensor::zeros({layer.out_channels}, true));
      in = layer.out_channels;
    }
  }

  // input [C,H,W], mask [1,H,W]; optional mask trace for diagnostics.
  PartialConvOut forward(const Tensor& input, const Tensor& mask,
                         std::vector<Tensor>* mask_trace = nullptr) const {
    Tensor x = input, m = mask;
    for (size_t i = 0; i < config.layers.size(); ++i) {
      if (config.layers[i].depth_to_space_before) {
        x = depth_to_space(x);
        m = upsample_mask_2x(m);
      }
      auto out = partial_conv2d(x, m, weights_[i], biases_[i], config.layers[i].stride);
      x = out.value;
      m = out.mask;
      if (i + 1 < config.layers.size()) x = leaky_relu(x, config.leaky_slope);
      if (mask_trace) mask_trace->push_back(m);
    }
    if (config.sigmoid_output) x = sigmoid(x);
    return {x, m};
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (size_t i = 0; i < weights_.size(); ++i) {
      ps.push_back(weights_[i]);
      ps.push_back(biases_[i]);
    }
    return ps;
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters(const std::string& prefix) const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < weights_.size(); ++i) {
      out.emplace_back(cat(prefix, ".", i, ".weight"), weights_[i]);
      out.emplace_back(cat(prefix, ".", i, ".bias"), biases_[i]);
    }
    return out;
  }

  void save(const std::string& path, const std::string& prefix) const {
    save_checkpoint(path, named_parameters(prefix));
  }
  void load(const std::string& path, const std::string& prefix) {
    restore_parameters(load_checkpoint(path), named_parameters(prefix));
  }

 private:
  std::vector<Tensor> weights_, biases_;
};

// ---------------------------------------------------------------- tensor bridging

// Sparse map -> planar [C,H,W] tensor (invalid texels zero) + [1,H,W] mask.
inline void sparse_to_tensors(const SparseUVMap& map, Tensor& values, Tensor& mask) {
  int H = map.height, W = map.width, C = map.channels;
  values = Tensor::zeros({C, H, W});
  mask = Tensor::zeros({1, H, W});
  float* vd = values.data();
  float* md = mask.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      size_t t = size_t(y) * W + x;
      if (!map.valid[t]) continue;
      md[t] = 1.0f;
      const float* p = map.at(int(t));
      for (int c = 0; c < C; ++c) vd[size_t(c) * H * W + t] = p[c];
    }
}

// Channel-sliced variant for visibility blocks: channels [c0, c0+count) taken
// cyclically from the source map.
inline Tensor sparse_channels_to_tensor(const SparseUVMap& map, int c0, int count) {
  int H = map.height, W = map.width;
  Tensor values = Tensor::zeros({count, H, W});
  float* vd = values.data();
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      size_t t = size_t(y) * W + x;
      if (!map.valid[t]) continue;
      const float* p = map.at(int(t));
      for (int c = 0; c < count; ++c)
        vd[size_t(c) * H * W + t] = p[(c0 + c) % map.channels];
    }
  return values;
}

// Valid-aware 2x block downsample (mean over valid texels; valid if any).
inline SparseUVMap downsample_sparse_2x(const SparseUVMap& src) {
  SparseUVMap dst = SparseUVMap::create(src.height / 2, src.width / 2, src.channels);
  for (int y = 0; y < dst.height; ++y)
    for (int x = 0; x < dst.width; ++x) {
      std::vector<float> acc(size_t(src.channels), 0.0f);
      float wsum = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          size_t t = size_t(2 * y + dy) * src.width + (2 * x + dx);
          if (!src.valid[t]) continue;
          const float* p = src.at(int(t));
          for (int c = 0; c < src.channels; ++c) acc[size_t(c)] += p[c];
          wsum += 1;
          dst.best_weight[size_t(y) * dst.width + x] =
              std::max(dst.best_weight[size_t(y) * dst.width + x], src.best_weight[t]);
        }
      if (wsum > 0) {
        size_t t = size_t(y) * dst.width + x;
        dst.valid[t] = 1;
        for (int c = 0; c < src.channels; ++c) dst.at(int(t))[c] = acc[size_t(c)] / wsum;
      }
    }
  return dst;
}

// ---------------------------------------------------------------- inference

// Signed payloads (normals) are encoded into [0,1] around the net so the
// leaky activations keep them in the positive propagation regime.
inline constexpr float kNormalEncodeScale = 0.5f;
inline constexpr float kNormalEncodeOffset = 0.5f;

// Dense normal map: network output where the input was missing, renormalized;
// original values kept on known texels. Valid region = chart texels.
inline SparseUVMap inpaint_normals(const Inpainter& net, const SparseUVMap& sparse,
                                   const ProxyMesh& mesh) {
  Tensor values, mask;
  sparse_to_tensors(sparse, values, mask);
  int64_t hw = int64_t(sparse.height) * sparse.width;
  for (int64_t i = 0; i < values.numel(); ++i)
    if (mask.data()[i % hw] > 0.5f)
      values.data()[i] = values.data()[i] * kNormalEncodeScale + kNormalEncodeOffset;
  auto out = net.forward(values, mask);
  for (int64_t i = 0; i < out.value.numel(); ++i)
    out.value.data()[i] = (out.value.data()[i] - kNormalEncodeOffset) / kNormalEncodeScale;
  SparseUVMap dense = SparseUVMap::create(sparse.height, sparse.width, 3);
  auto charts = chart_texel_mask(mesh, sparse.width);
  const float* od = out.value.data();
  int HW = sparse.height * sparse.width;
  for (int t = 0; t < HW; ++t) {
    if (!charts[size_t(t)]) continue;
    float3 n;
    if (sparse.valid[size_t(t)]) {
      const float* p = sparse.at(t);
      n = {p[0], p[1], p[2]};
    } else {
      n = {od[t], od[size_t(HW) + t], od[size_t(2 * HW) + t]};
    }
    if (length_sq(n) > 1e-12f) n = normalize(n);
    dense.valid[size_t(t)] = 1;
    dense.best_weight[size_t(t)] = std::max(sparse.best_weight[size_t(t)], 1e-6f);
    float* q = dense.at(t);
    q[0] = n.x;
    q[1] = n.y;
    q[2] = n.z;
  }
  return dense;
}

// Dense visibility: runs the shared-weight net over each direction block.
// dense_normals must be at the visibility resolution (downsample first).
inline SparseUVMap inpaint_visibility(const Inpainter& net, const SparseUVMap& sparse_vis,
                                      const SparseUVMap& dense_normals, const ProxyMesh& mesh) {
  int dir_block = net.config.layers.back().out_channels;
  if (sparse_vis.channels % dir_block != 0)
    throw ShapeError(cat("inpaint_visibility: ", sparse_vis.channels,
                         " channels not divisible by block ", dir_block));
  if (dense_normals.width != sparse_vis.width || dense_normals.height != sparse_vis.height)
    throw ShapeError("inpaint_visibility: normal map resolution must match the visibility map");
  Tensor nval, nmask;
  sparse_to_tensors(dense_normals, nval, nmask);
  Tensor vmask = Tensor::zeros({1, sparse_vis.height, sparse_vis.width});
  for (int t = 0; t < sparse_vis.height * sparse_vis.width; ++t)
    vmask.data()[t] = sparse_vis.valid[size_t(t)] && dense_normals.valid[size_t(t)] ? 1.0f : 0.0f;

  SparseUVMap dense = SparseUVMap::create(sparse_vis.height, sparse_vis.width, sparse_vis.channels);
  auto charts = chart_texel_mask(mesh, sparse_vis.width);
  int HW = sparse_vis.height * sparse_vis.width;
  for (int c0 = 0; c0 < sparse_vis.channels; c0 += dir_block) {
    Tensor block = sparse_channels_to_tensor(sparse_vis, c0, dir_block);
    Tensor input = concat_channels({block, nval});
    auto out = net.forward(input, vmask);
    const float* od = out.value.data();
    for (int t = 0; t < HW; ++t) {
      if (!charts[size_t(t)]) continue;
      float* q = dense.at(t);
      if (sparse_vis.valid[size_t(t)]) {
        const float* p = sparse_vis.at(t);
        for (int c = 0; c < dir_block; ++c) q[c0 + c] = p[c0 + c];
      } else {
        for (int c = 0; c < dir_block; ++c)
          q[c0 + c] = clampf(od[size_t(c) * HW + t], 0.0f, 1.0f);
      }
    }
  }
  for (int t = 0; t < HW; ++t)
    if (charts[size_t(t)]) {
      dense.valid[size_t(t)] = 1;
      dense.best_weight[size_t(t)] = std::max(sparse_vis.best_weight[size_t(t)], 1e-6f);
    }
  return dense;
}

// ---------------------------------------------------------------- training

struct InpaintTrainConfig {
  int steps = 200;
  int crop = 128;           // square crop side (even, for strided nets)
  float lr = 1e-2f;
  float known_weight = 0.1f;  // identity-preservation L1 on known texels
  bool encode_signed = false; // map signed payloads into [0,1] around the net
  uint64_t seed = 1;
  bool verbose = false;
};

// One supervision pair: a dense target map and a synthetic sparsity mask
// (which texels the net sees). For visibility nets aux_normals supplies the
// normal channels at the same resolution.
struct InpaintPair {
  const SparseUVMap* dense_gt = nullptr;
  const std::vector<uint8_t>* sparse_mask = nullptr;
  const SparseUVMap* aux_normals = nullptr;
};

struct InpaintStepLog {
  int step = 0;
  double loss = 0;
};

// Masked-region L1 to the dense target plus a small identity-preservation
// term on known texels. Visibility nets are trained on one randomly rotated
// direction block per step.
inline std::vector<InpaintStepLog> train_inpainter(Inpainter& net,
                                                   const std::vector<InpaintPair>& pairs,
                                                   const InpaintTrainConfig& cfg) {
  if (pairs.empty()) throw ShapeError("train_inpainter: empty dataset");
  bool is_visibility = net.config.sigmoid_output;
  int dir_block = net.config.layers.back().out_channels;
  Adam opt(net.parameters(), {.lr = cfg.lr});
  CounterRng rng(cfg.seed);
  std::vector<InpaintStepLog> log;

  for (int step = 0; step < cfg.steps; ++step) {
    const InpaintPair& pair = pairs[rng.index(1, uint64_t(step), pairs.size())];
    const SparseUVMap& gt = *pair.dense_gt;
    int res = gt.width;
    int crop = std::min(cfg.crop, res);
    crop &= ~1;  // strided nets need even crops
    int cx = int(rng.index(2, uint64_t(step), uint64_t(res - crop + 1)));
    int cy = int(rng.index(3, uint64_t(step), uint64_t(res - crop + 1)));
    int c0 = is_visibility ? int(rng.index(4, uint64_t(step), uint64_t(gt.channels))) : 0;
    int C = is_visibility ? dir_block : gt.channels;

    // crop tensors: input (masked gt), mask, target, and loss masks
    Tensor input = Tensor::zeros({C + (is_visibility ? 3 : 0), crop, crop});
    Tensor mask = Tensor::zeros({1, crop, crop});
    Tensor target = Tensor::zeros({C, crop, crop});
    std::vector<float> missing(size_t(crop) * crop, 0.0f), known(size_t(crop) * crop, 0.0f);
    int64_t missing_n = 0, known_n = 0;
    float* in_d = input.data();
    float* m_d = mask.data();
    float* t_d = target.data();
    for (int y = 0; y < crop; ++y)
      for (int x = 0; x < crop; ++x) {
        size_t src = size_t(cy + y) * res + (cx + x);
        size_t dst = size_t(y) * crop + x;
        bool has_gt = gt.valid[src] != 0;
        bool seen = has_gt && (*pair.sparse_mask)[src] != 0;
        float esc = cfg.encode_signed ? kNormalEncodeScale : 1.0f;
        float eof = cfg.encode_signed ? kNormalEncodeOffset : 0.0f;
        if (has_gt) {
          const float* p = gt.at(int(src));
          for (int c = 0; c < C; ++c)
            t_d[size_t(c) * crop * crop + dst] = p[(c0 + c) % gt.channels] * esc + eof;
        }
        if (seen) {
          const float* p = gt.at(int(src));
          for (int c = 0; c < C; ++c)
            in_d[size_t(c) * crop * crop + dst] = p[(c0 + c) % gt.channels] * esc + eof;
          m_d[dst] = 1.0f;
          known[dst] = 1.0f;
          ++known_n;
        } else if (has_gt) {
          missing[dst] = 1.0f;
          ++missing_n;
        }
        if (is_visibility && pair.aux_normals && pair.aux_normals->valid[src] && seen) {
          const float* p = pair.aux_normals->at(int(src));
          for (int c = 0; c < 3; ++c) in_d[size_t(C + c) * crop * crop + dst] = p[c];
        }
      }
    if (missing_n == 0) continue;

    Graph g;
    auto out = net.forward(input, mask);
    Tensor diff = abs_t(sub(out.value, target));
    // per-channel weighting by the missing/known pixel masks
    std::vector<float> wdata(size_t(C) * crop * crop);
    for (int c = 0; c < C; ++c)
      for (int64_t i = 0; i < int64_t(crop) * crop; ++i)
        wdata[size_t(c) * crop * crop + i] =
            missing[size_t(i)] / float(missing_n) +
            cfg.known_weight * known[size_t(i)] / float(std::max<int64_t>(known_n, 1));
    Tensor wmask = Tensor::from_data({C, crop, crop}, std::move(wdata));
    Tensor loss = affine(sum(mul(diff, wmask)), 1.0f / float(C));
    g.backward(loss);
    opt.step();
    log.push_back({step, double(loss.data()[0])});
    if (cfg.verbose && step % 25 == 0)
      std::fprintf(stderr, "[train-inpaint] step %d loss %.6f\n", step, log.back().loss);
  }
  return log;
}

}  // namespace relight
