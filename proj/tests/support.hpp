#pragma once

// Shared test utilities: finite-difference gradient checking and a few
// scratch helpers. The finite-difference probe is the independent oracle for
// every analytic gradient in the library.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "relight/tensor.hpp"

namespace testsup {

// The checked loss is mean(forward()) computed in double, which removes the
// float32 rounding of the scalar reduction from the finite-difference probe.
inline double loss_value(const relight::Tensor& t) {
  double acc = 0;
  const float* d = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) acc += d[i];
  return acc / double(t.numel());
}

// Central finite differences d(loss)/d(param[i]) for mean(forward()).
inline std::vector<float> finite_diff(relight::Tensor param,
                                      const std::function<relight::Tensor()>& forward,
                                      float h) {
  std::vector<float> g(static_cast<size_t>(param.numel()));
  float* pd = param.data();
  for (int64_t i = 0; i < param.numel(); ++i) {
    float keep = pd[i];
    pd[i] = keep + h;
    double up = loss_value(forward());
    pd[i] = keep - h;
    double dn = loss_value(forward());
    pd[i] = keep;
    g[size_t(i)] = float((up - dn) / (2.0 * h));
  }
  return g;
}

// Max relative error; near-zero entries compare against a floor scaled to the
// largest gradient so they are judged in absolute terms.
inline double max_rel_error(const std::vector<float>& analytic, const std::vector<float>& fd) {
  double scale = 1e-6;
  for (size_t i = 0; i < analytic.size(); ++i)
    scale = std::max({scale, std::abs(double(analytic[i])), std::abs(double(fd[i]))});
  double worst = 0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    double denom = std::max(0.05 * scale,
                            std::max(std::abs(double(analytic[i])), std::abs(double(fd[i]))));
    worst = std::max(worst, std::abs(double(analytic[i]) - fd[i]) / denom);
  }
  return worst;
}

// Analytic gradient of mean(forward()) wrt param.
inline std::vector<float> analytic_grad(relight::Tensor param,
                                        const std::function<relight::Tensor()>& forward) {
  param.zero_grad();
  relight::Graph g;
  relight::Tensor loss = relight::mean(forward());
  g.backward(loss);
  return param.has_grad() ? param.grad_view()
                          : std::vector<float>(static_cast<size_t>(param.numel()), 0.0f);
}

// Compares analytic and central-difference gradients of mean(forward());
// returns the max relative error.
inline double check_gradient(relight::Tensor param,
                             const std::function<relight::Tensor()>& forward, float h = 1e-3f) {
  auto ana = analytic_grad(param, forward);
  auto fd = finite_diff(param, forward, h);
  return max_rel_error(ana, fd);
}

inline std::string temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("relight_test_" + tag);
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline relight::Tensor random_tensor(std::vector<int> shape, relight::RngStream& rng,
                                     float scale = 1.0f, bool requires_grad = true) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<float> data(static_cast<size_t>(n));
  for (auto& v : data) v = rng.normal() * scale;
  return relight::Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace testsup
