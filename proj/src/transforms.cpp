#include "featadv/transforms.hpp"

#include <cmath>
#include <numbers>

#include "featadv/errors.hpp"

namespace featadv {

namespace F = torch::nn::functional;
using nlohmann::json;

std::string preset_name(TransformPreset preset) {
  switch (preset) {
    case TransformPreset::kPatchFull:
      return "patch_full";
    case TransformPreset::kRegionLight:
      return "region_light";
    case TransformPreset::kIdentity:
      return "identity";
  }
  return "identity";
}

TransformPreset preset_from_name(const std::string& name) {
  if (name == "patch_full") return TransformPreset::kPatchFull;
  if (name == "region_light") return TransformPreset::kRegionLight;
  if (name == "identity") return TransformPreset::kIdentity;
  throw ConfigError("unknown transform preset '" + name + "'", "transforms.preset");
}

json TransformConfig::to_json() const {
  return {{"preset", preset_name(preset)},
          {"brightness", brightness},
          {"contrast", contrast},
          {"saturation", saturation},
          {"hue", hue},
          {"blur_sigma_max", blur_sigma_max},
          {"noise_std_max", noise_std_max},
          {"rotation_degrees", rotation_degrees},
          {"perspective_scale", perspective_scale},
          {"flip_probability", flip_probability},
          {"seed", seed}};
}

TransformConfig TransformConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("must be an object", "transforms");
  TransformConfig c;
  auto number = [&](const char* key, double& field) {
    if (!j.contains(key)) return;
    if (!j[key].is_number()) throw ConfigError("must be a number", std::string("transforms.") + key);
    field = j[key].get<double>();
  };
  if (j.contains("preset")) {
    if (!j["preset"].is_string()) throw ConfigError("must be a string", "transforms.preset");
    c.preset = preset_from_name(j["preset"].get<std::string>());
  }
  number("brightness", c.brightness);
  number("contrast", c.contrast);
  number("saturation", c.saturation);
  number("hue", c.hue);
  number("blur_sigma_max", c.blur_sigma_max);
  number("noise_std_max", c.noise_std_max);
  number("rotation_degrees", c.rotation_degrees);
  number("perspective_scale", c.perspective_scale);
  number("flip_probability", c.flip_probability);
  if (j.contains("seed")) {
    const auto& seed = j["seed"];
    if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<int64_t>() < 0)) {
      throw ConfigError("must be a non-negative integer", "transforms.seed");
    }
    c.seed = j["seed"].get<uint64_t>();
  }
  c.validate();
  return c;
}

void TransformConfig::validate() const {
  const std::pair<const char*, double> ranges[] = {
      {"brightness", brightness}, {"contrast", contrast}, {"saturation", saturation},
      {"hue", hue}, {"blur_sigma_max", blur_sigma_max}, {"noise_std_max", noise_std_max},
      {"rotation_degrees", rotation_degrees}, {"perspective_scale", perspective_scale},
      {"flip_probability", flip_probability}};
  for (const auto& [key, value] : ranges) {
    if (!(value >= 0.0)) throw ConfigError("must be non-negative", std::string("transforms.") + key);
  }
  if (brightness >= 1.0 || contrast >= 1.0 || saturation >= 1.0) {
    throw ConfigError("jitter strengths must be below 1", "transforms.brightness");
  }
  if (hue > 0.5) throw ConfigError("must be at most 0.5", "transforms.hue");
  if (perspective_scale > 1.0) throw ConfigError("must be at most 1", "transforms.perspective_scale");
  if (flip_probability > 1.0) throw ConfigError("must be at most 1", "transforms.flip_probability");
}

json SampledTransform::to_json() const {
  json out = json::array();
  for (const auto& op : ops) {
    std::visit(
        [&](const auto& o) {
          using T = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<T, ColorJitter>) {
            out.push_back({{"op", "color_jitter"},
                           {"brightness", o.brightness},
                           {"contrast", o.contrast},
                           {"saturation", o.saturation},
                           {"hue", o.hue}});
          } else if constexpr (std::is_same_v<T, GaussianBlur>) {
            out.push_back({{"op", "blur"}, {"sigma", o.sigma}});
          } else if constexpr (std::is_same_v<T, GaussianNoise>) {
            out.push_back({{"op", "noise"}, {"stddev", o.stddev}, {"seed", o.seed}});
          } else if constexpr (std::is_same_v<T, Rotation>) {
            out.push_back({{"op", "rotate"}, {"degrees", o.degrees}});
          } else if constexpr (std::is_same_v<T, Perspective>) {
            out.push_back({{"op", "perspective"}, {"displacement", o.displacement}});
          } else {
            out.push_back({{"op", "hflip"}});
          }
        },
        op);
  }
  return out;
}

SampledTransform sample_transform(const TransformConfig& config, Rng& rng) {
  SampledTransform t;
  switch (config.preset) {
    case TransformPreset::kIdentity:
      break;
    case TransformPreset::kRegionLight:
      t.ops.emplace_back(GaussianBlur{rng.uniform(0.0, config.blur_sigma_max)});
      if (rng.bernoulli(config.flip_probability)) t.ops.emplace_back(HorizontalFlip{});
      break;
    case TransformPreset::kPatchFull: {
      t.ops.emplace_back(Rotation{rng.uniform(-config.rotation_degrees, config.rotation_degrees)});
      Perspective p;
      for (size_t i = 0; i < 8; ++i) p.displacement[i] = rng.uniform(0.0, config.perspective_scale);
      t.ops.emplace_back(p);
      t.ops.emplace_back(ColorJitter{1.0 + rng.uniform(-config.brightness, config.brightness),
                                     1.0 + rng.uniform(-config.contrast, config.contrast),
                                     1.0 + rng.uniform(-config.saturation, config.saturation),
                                     rng.uniform(-config.hue, config.hue)});
      t.ops.emplace_back(GaussianBlur{rng.uniform(0.0, config.blur_sigma_max)});
      const double stddev = rng.uniform(0.0, config.noise_std_max);
      t.ops.emplace_back(GaussianNoise{stddev, rng.next()});
      break;
    }
  }
  return t;
}

std::vector<double> gaussian_kernel(double sigma) {
  if (sigma < 1e-6) return {1.0};
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> taps(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    taps[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    total += taps[i + radius];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

torch::Tensor gaussian_blur(const torch::Tensor& images, double sigma) {
  const auto taps = gaussian_kernel(sigma);
  if (taps.size() == 1) return images;
  const auto radius = static_cast<int64_t>(taps.size() / 2);
  const auto channels = images.size(1);
  auto kernel = torch::tensor(taps, torch::TensorOptions().dtype(torch::kFloat64)).to(images.scalar_type());
  auto kx = kernel.view({1, 1, 1, -1}).repeat({channels, 1, 1, 1});
  auto ky = kernel.view({1, 1, -1, 1}).repeat({channels, 1, 1, 1});
  auto x = F::pad(images, F::PadFuncOptions({radius, radius, radius, radius}).mode(torch::kReplicate));
  x = F::conv2d(x, kx, F::Conv2dFuncOptions().groups(channels));
  return F::conv2d(x, ky, F::Conv2dFuncOptions().groups(channels));
}

namespace {

torch::Tensor luminance(const torch::Tensor& x) {
  return 0.299 * x.select(1, 0) + 0.587 * x.select(1, 1) + 0.114 * x.select(1, 2);
}

torch::Tensor apply_jitter(const torch::Tensor& x0, const ColorJitter& j) {
  auto x = x0 * j.brightness;
  auto mean = luminance(x).mean({1, 2}, true).unsqueeze(1);
  x = (x - mean) * j.contrast + mean;
  auto gray = luminance(x).unsqueeze(1);
  x = gray + (x - gray) * j.saturation;
  if (j.hue != 0.0) {
    // Hue rotation in YIQ space.
    const double theta = 2.0 * std::numbers::pi * j.hue;
    const double c = std::cos(theta), s = std::sin(theta);
    auto opts = torch::TensorOptions().dtype(torch::kFloat64);
    auto to_yiq = torch::tensor({0.299, 0.587, 0.114, 0.596, -0.274, -0.322, 0.211, -0.523, 0.312}, opts).view({3, 3});
    auto rot = torch::tensor({1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c}, opts).view({3, 3});
    auto m = torch::linalg_inv(to_yiq).matmul(rot).matmul(to_yiq).to(x.scalar_type());
    x = torch::einsum("ij,bjhw->bihw", {m, x});
  }
  return x;
}

torch::Tensor base_grid(int64_t height, int64_t width, torch::ScalarType dtype) {
  auto opts = torch::TensorOptions().dtype(dtype);
  auto xs = (torch::arange(width, opts) + 0.5) * (2.0 / width) - 1.0;
  auto ys = (torch::arange(height, opts) + 0.5) * (2.0 / height) - 1.0;
  auto grid = torch::meshgrid({ys, xs}, "ij");
  return torch::stack({grid[1], grid[0]}, -1);  // [H,W,2] as (x,y)
}

torch::Tensor sample_grid(const torch::Tensor& x, const torch::Tensor& grid) {
  auto g = grid.unsqueeze(0).expand({x.size(0), grid.size(0), grid.size(1), 2});
  return F::grid_sample(x, g, F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(false));
}

torch::Tensor apply_rotation(const torch::Tensor& x, const Rotation& r) {
  const double theta = r.degrees * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  auto grid = base_grid(x.size(2), x.size(3), x.scalar_type());
  auto gx = grid.select(2, 0), gy = grid.select(2, 1);
  // Output pixel p samples the input at R(-theta) p.
  auto src = torch::stack({c * gx + s * gy, -s * gx + c * gy}, -1);
  return sample_grid(x, src);
}

// Homography h (row-major 3x3, h33 = 1) mapping each `from` point to `to`.
std::array<double, 9> solve_homography(const std::array<double, 8>& from, const std::array<double, 8>& to) {
  double a[8][9] = {};
  for (int i = 0; i < 4; ++i) {
    const double x = from[2 * i], y = from[2 * i + 1], u = to[2 * i], v = to[2 * i + 1];
    double r1[9] = {x, y, 1, 0, 0, 0, -u * x, -u * y, u};
    double r2[9] = {0, 0, 0, x, y, 1, -v * x, -v * y, v};
    std::copy(r1, r1 + 9, a[2 * i]);
    std::copy(r2, r2 + 9, a[2 * i + 1]);
  }
  for (int col = 0; col < 8; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 8; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    }
    std::swap(a[col], a[pivot]);
    for (int r = 0; r < 8; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (int k = col; k < 9; ++k) a[r][k] -= f * a[col][k];
    }
  }
  std::array<double, 9> h{};
  for (int i = 0; i < 8; ++i) h[i] = a[i][8] / a[i][i];
  h[8] = 1.0;
  return h;
}

torch::Tensor apply_perspective(const torch::Tensor& x, const Perspective& p) {
  const std::array<double, 8> corners{-1, -1, 1, -1, 1, 1, -1, 1};
  // Corners move inward by their displacement.
  const std::array<double, 8> sign{1, 1, -1, 1, -1, -1, 1, -1};
  std::array<double, 8> moved{};
  for (size_t i = 0; i < 8; ++i) moved[i] = corners[i] + sign[i] * p.displacement[i];
  // Output pixels at the moved corners sample the original corners.
  const auto h = solve_homography(moved, corners);
  auto grid = base_grid(x.size(2), x.size(3), x.scalar_type());
  auto gx = grid.select(2, 0), gy = grid.select(2, 1);
  auto w = h[6] * gx + h[7] * gy + h[8];
  auto src = torch::stack({(h[0] * gx + h[1] * gy + h[2]) / w, (h[3] * gx + h[4] * gy + h[5]) / w}, -1);
  return sample_grid(x, src);
}

}  // namespace

torch::Tensor apply_transform(const SampledTransform& transform, const torch::Tensor& images) {
  const bool single = images.dim() == 3;
  auto x = single ? images.unsqueeze(0) : images;
  for (const auto& op : transform.ops) {
    x = std::visit(
        [&](const auto& o) -> torch::Tensor {
          using T = std::decay_t<decltype(o)>;
          if constexpr (std::is_same_v<T, ColorJitter>) {
            return apply_jitter(x, o);
          } else if constexpr (std::is_same_v<T, GaussianBlur>) {
            return gaussian_blur(x, o.sigma);
          } else if constexpr (std::is_same_v<T, GaussianNoise>) {
            if (o.stddev <= 0.0) return x;
            auto gen = torch_generator(o.seed);
            auto noise = torch::randn(x.sizes(), gen, torch::TensorOptions().dtype(torch::kFloat64));
            return x + (o.stddev * noise).to(x.scalar_type());
          } else if constexpr (std::is_same_v<T, Rotation>) {
            return o.degrees == 0.0 ? x : apply_rotation(x, o);
          } else if constexpr (std::is_same_v<T, Perspective>) {
            return apply_perspective(x, o);
          } else {
            return x.flip({3});
          }
        },
        op);
  }
  if (!transform.ops.empty()) x = x.clamp(0.0, 1.0);
  return single ? x.squeeze(0) : x;
}

}  // namespace featadv
