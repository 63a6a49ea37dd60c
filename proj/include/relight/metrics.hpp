#pragma once

// Image comparison metrics used for evaluation: PSNR and single-scale SSIM.

#include <vector>

#include "relight/image.hpp"

namespace relight {

// -10 log10(MSE) for images in [0,1]; identical images cap at 99 dB.
inline double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b))
    throw ShapeError(cat("psnr: shapes ", a.width, "x", a.height, "x", a.channels, " vs ",
                         b.width, "x", b.height, "x", b.channels));
  double mse = 0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    double d = double(a.px[i]) - b.px[i];
    mse += d * d;
  }
  mse /= double(a.px.size());
  if (mse <= 0) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

namespace detail {
inline std::vector<double> luminance(const Image& img) {
  std::vector<double> y(size_t(img.width) * img.height);
  for (int i = 0; i < img.width * img.height; ++i) {
    const float* p = &img.px[size_t(i) * img.channels];
    y[size_t(i)] = img.channels >= 3 ? 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2] : p[0];
  }
  return y;
}
}  // namespace detail

// Single-scale SSIM on luminance: 11x11 Gaussian window (sigma 1.5),
// k1=0.01, k2=0.03, dynamic range 1; averaged over valid window positions.
inline double ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b))
    throw ShapeError(cat("ssim: shapes ", a.width, "x", a.height, " vs ", b.width, "x",
                         b.height));
  const int win = 11, half = win / 2;
  if (a.width < win || a.height < win)
    throw ShapeError(cat("ssim: image ", a.width, "x", a.height, " smaller than the ", win, "x",
                         win, " window"));
  std::vector<double> kernel(win);
  double ksum = 0;
  for (int i = 0; i < win; ++i) {
    double d = i - half;
    kernel[size_t(i)] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    ksum += kernel[size_t(i)];
  }
  for (auto& k : kernel) k /= ksum;

  auto ya = detail::luminance(a);
  auto yb = detail::luminance(b);
  int W = a.width, H = a.height;

  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  int64_t count = 0;
  for (int cy = half; cy < H - half; ++cy)
    for (int cx = half; cx < W - half; ++cx) {
      double mu_a = 0, mu_b = 0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
          double w = kernel[size_t(dy + half)] * kernel[size_t(dx + half)];
          mu_a += w * ya[size_t(cy + dy) * W + (cx + dx)];
          mu_b += w * yb[size_t(cy + dy) * W + (cx + dx)];
        }
      double va = 0, vb = 0, cov = 0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
          double w = kernel[size_t(dy + half)] * kernel[size_t(dx + half)];
          double da = ya[size_t(cy + dy) * W + (cx + dx)] - mu_a;
          double db = yb[size_t(cy + dy) * W + (cx + dx)] - mu_b;
          va += w * da * da;
          vb += w * db * db;
          cov += w * da * db;
        }
      double s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                 ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
      total += s;
      ++count;
    }
  return total / double(count);
}

}  // namespace relight
