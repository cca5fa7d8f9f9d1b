#pragma once

// Straight-line reference implementations used as independent test oracles.
// They work on plain double vectors and share no code with the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include <torch/torch.h>

namespace featadv::oracle {

inline std::vector<double> to_vector(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

/// Separable Gaussian blur of an H x W plane, taps exp(-x^2 / 2 sigma^2) on
/// radius ceil(3 sigma), replicate borders.
inline std::vector<double> blur(const std::vector<double>& plane, int64_t h, int64_t w, double sigma) {
  if (sigma < 1e-8) return plane;
  const auto radius = static_cast<int64_t>(std::ceil(3.0 * sigma));
  std::vector<double> taps;
  double total = 0.0;
  for (int64_t i = -radius; i <= radius; ++i) {
    taps.push_back(std::exp(-0.5 * double(i * i) / (sigma * sigma)));
    total += taps.back();
  }
  for (auto& t : taps) t /= total;
  auto at = [](int64_t i, int64_t n) { return std::clamp<int64_t>(i, 0, n - 1); };
  std::vector<double> rows(plane.size()), out(plane.size());
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int64_t k = -radius; k <= radius; ++k) s += taps[k + radius] * plane[y * w + at(x + k, w)];
      rows[y * w + x] = s;
    }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (int64_t k = -radius; k <= radius; ++k) s += taps[k + radius] * rows[at(y + k, h) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

/// Top-decile mask by fully sorting (value desc, index asc).
inline std::vector<int> decile_mask(const torch::Tensor& original, const torch::Tensor& adversarial, double sigma) {
  const auto h = original.size(1), w = original.size(2);
  const auto a = to_vector(original), b = to_vector(adversarial);
  std::vector<double> diff(h * w, 0.0);
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t i = 0; i < h * w; ++i) diff[i] += std::abs(a[c * h * w + i] - b[c * h * w + i]) / 3.0;
  const auto g = blur(diff, h, w, sigma);
  std::vector<int64_t> order(h * w);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t x, int64_t y) { return g[x] > g[y]; });
  const auto keep = static_cast<int64_t>(std::floor(0.10 * double(h * w) + 0.5));
  std::vector<int> mask(h * w, 0);
  for (int64_t i = 0; i < keep; ++i) mask[order[i]] = 1;
  return mask;
}

/// Anisotropic TV of one [C,H,W] image.
inline double total_variation(const torch::Tensor& image) {
  const auto c = image.size(0), h = image.size(1), w = image.size(2);
  const auto v = to_vector(image);
  double s = 0.0;
  for (int64_t k = 0; k < c; ++k)
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double p = v[(k * h + y) * w + x];
        if (x + 1 < w) s += std::abs(v[(k * h + y) * w + x + 1] - p);
        if (y + 1 < h) s += std::abs(v[(k * h + y + 1) * w + x] - p);
      }
  return s / double(h * w);
}

/// sum_l (1/L) mean_{y,x} sum_c (f_a/|f_a| - f_b/|f_b|)^2 over [1,C,H,W] stage features.
inline double perceptual(const std::vector<torch::Tensor>& fa, const std::vector<torch::Tensor>& fb) {
  double total = 0.0;
  for (size_t l = 0; l < fa.size(); ++l) {
    const auto c = fa[l].size(1), h = fa[l].size(2), w = fa[l].size(3);
    const auto a = to_vector(fa[l]), b = to_vector(fb[l]);
    double layer = 0.0;
    for (int64_t p = 0; p < h * w; ++p) {
      double na = 0.0, nb = 0.0;
      for (int64_t k = 0; k < c; ++k) {
        na += a[k * h * w + p] * a[k * h * w + p];
        nb += b[k * h * w + p] * b[k * h * w + p];
      }
      na = std::sqrt(na) + 1e-10;
      nb = std::sqrt(nb) + 1e-10;
      for (int64_t k = 0; k < c; ++k) {
        const double d = a[k * h * w + p] / na - b[k * h * w + p] / nb;
        layer += d * d;
      }
    }
    total += layer / double(h * w) / double(fa.size());
  }
  return total;
}

/// Central-difference check of a scalar function's gradient at `count`
/// random coordinates of `x` (double precision). Returns the worst relative
/// error, using max(|a|, |n|, floor) as the denominator.
inline double worst_fd_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, const torch::Tensor& x0,
                             int64_t count, uint64_t seed, double h = 1e-6, double floor = 1e-6) {
  auto x = x0.detach().clone().to(torch::kFloat64).set_requires_grad(true);
  auto y = f(x);
  auto grad = torch::autograd::grad({y}, {x})[0].contiguous();
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (int64_t i = 0; i < count; ++i) {
    const auto idx = static_cast<int64_t>(rng() % static_cast<uint64_t>(x.numel()));
    torch::NoGradGuard guard;
    auto xp = x.detach().clone();
    auto xm = x.detach().clone();
    xp.view({-1})[idx] += h;
    xm.view({-1})[idx] -= h;
    const double numeric = (f(xp).item<double>() - f(xm).item<double>()) / (2.0 * h);
    const double analytic = grad.view({-1})[idx].item<double>();
    const double denom = std::max({std::abs(numeric), std::abs(analytic), floor});
    worst = std::max(worst, std::abs(numeric - analytic) / denom);
  }
  return worst;
}

}  // namespace featadv::oracle
