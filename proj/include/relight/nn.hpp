#pragma once

// Network building blocks on top of the tensor engine: linear layers, small
// MLPs, the Adam optimizer, and the "RLNA1" checkpoint container.

#include <cstdio>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "relight/tensor.hpp"

namespace relight {

// ---------------------------------------------------------------- layers

struct Linear {
  Tensor weight;  // [In, Out]
  Tensor bias;    // [Out]

  Linear() = default;
  Linear(int in, int out, RngStream& rng, bool zero_init = false) {
    std::vector<float> w(size_t(in) * out, 0.0f);
    if (!zero_init) {
      float s = std::sqrt(2.0f / float(in));
      for (auto& v : w) v = rng.normal() * s;
    }
    weight = Tensor::from_data({in, out}, std::move(w), true);
    bias = Tensor::zeros({out}, true);
  }

  Tensor forward(const Tensor& x) const { return bias_add_rows(matmul(x, weight), bias); }
};

// Fully connected net with ReLU between layers, linear output.
struct Mlp {
  std::vector<Linear> layers;

  Mlp() = default;
  Mlp(int in, const std::vector<int>& hidden, int out, RngStream& rng,
      bool zero_init_last = false) {
    int prev = in;
    for (int h : hidden) {
      layers.emplace_back(prev, h, rng);
      prev = h;
    }
    layers.emplace_back(prev, out, rng, zero_init_last);
  }

  Tensor forward(Tensor x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].forward(x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (const auto& l : layers) {
      ps.push_back(l.weight);
      ps.push_back(l.bias);
    }
    return ps;
  }

  void named_parameters(const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor>>& out) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      out.emplace_back(cat(prefix, ".", i, ".weight"), layers[i].weight);
      out.emplace_back(cat(prefix, ".", i, ".bias"), layers[i].bias);
    }
  }
};

// ---------------------------------------------------------------- adam

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }

  // One bias-corrected update; gradients are consumed (zeroed).
  void step() {
    ++t_;
    float bc1 = 1.0f - std::pow(cfg_.beta1, float(t_));
    float bc2 = 1.0f - std::pow(cfg_.beta2, float(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad())
        throw Error(cat("adam_step: parameter ", i, " of shape ", shape_str(p.shape()),
                        " has no gradient"));
      float* pd = p.data();
      float* g = p.grad().data();
      float* m = m_[i].data();
      float* v = v_[i].data();
      int64_t n = p.numel();
      parallel_for(n, [&](int64_t b, int64_t e) {
        for (int64_t j = b; j < e; ++j) {
          m[j] = cfg_.beta1 * m[j] + (1.0f - cfg_.beta1) * g[j];
          v[j] = cfg_.beta2 * v[j] + (1.0f - cfg_.beta2) * g[j] * g[j];
          float mh = m[j] / bc1;
          float vh = v[j] / bc2;
          pd[j] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
        }
      });
      p.zero_grad();
    }
  }

  void set_lr(float lr) { cfg_.lr = lr; }
  float lr() const { return cfg_.lr; }
  int64_t step_count() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  AdamConfig cfg_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------- checkpoints

// Binary container: magic "RLNA1", then per-tensor records of
// u32 name length, name bytes, u32 rank, u32 dims, raw little-endian float32.
inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& tensors) {
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError(cat("save_checkpoint: cannot open ", path));
  std::fwrite("RLNA1", 1, 5, f);
  for (const auto& [name, t] : tensors) {
    uint32_t len = uint32_t(name.size());
    std::fwrite(&len, 4, 1, f);
    std::fwrite(name.data(), 1, len, f);
    uint32_t rank = uint32_t(t.shape().size());
    std::fwrite(&rank, 4, 1, f);
    for (int d : t.shape()) {
      uint32_t dd = uint32_t(d);
      std::fwrite(&dd, 4, 1, f);
    }
    if (std::fwrite(t.data(), 4, size_t(t.numel()), f) != size_t(t.numel())) {
      std::fclose(f);
      throw IoError(cat("save_checkpoint: short write to ", path));
    }
  }
  std::fclose(f);
}

inline std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError(cat("load_checkpoint: cannot open ", path));
  char magic[5];
  if (std::fread(magic, 1, 5, f) != 5 || std::memcmp(magic, "RLNA1", 5) != 0) {
    std::fclose(f);
    throw IoError(cat("load_checkpoint: ", path, ": bad magic (not an RLNA1 container)"));
  }
  std::map<std::string, Tensor> out;
  for (;;) {
    uint32_t len = 0;
    if (std::fread(&len, 4, 1, f) != 1) break;  // clean EOF
    std::string name(len, '\0');
    uint32_t rank = 0;
    if (std::fread(name.data(), 1, len, f) != len || std::fread(&rank, 4, 1, f) != 1 ||
        rank > 8) {
      std::fclose(f);
      throw IoError(cat("load_checkpoint: corrupt record in ", path));
    }
    std::vector<int> shape(rank);
    int64_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = 0;
      if (std::fread(&d, 4, 1, f) != 1) {
        std::fclose(f);
        throw IoError(cat("load_checkpoint: corrupt dims in ", path));
      }
      shape[i] = int(d);
      n *= d;
    }
    std::vector<float> data(static_cast<size_t>(n));
    if (std::fread(data.data(), 4, size_t(n), f) != size_t(n)) {
      std::fclose(f);
      throw IoError(cat("load_checkpoint: truncated tensor '", name, "' in ", path));
    }
    out.emplace(name, Tensor::from_data(shape, std::move(data)));
  }
  std::fclose(f);
  return out;
}

// Copies checkpoint values into existing named parameters (shape-checked).
inline void restore_parameters(const std::map<std::string, Tensor>& ckpt,
                               const std::vector<std::pair<std::string, Tensor>>& params) {
  for (const auto& [name, t] : params) {
    auto it = ckpt.find(name);
    if (it == ckpt.end()) throw IoError(cat("restore_parameters: missing tensor '", name, "'"));
    if (it->second.shape() != t.shape())
      throw ShapeError(cat("restore_parameters: '", name, "' shape ",
                           shape_str(it->second.shape()), " vs expected ", shape_str(t.shape())));
    Tensor dst = t;
    std::copy(it->second.values().begin(), it->second.values().end(), dst.values().begin());
  }
}

}  // namespace relight
