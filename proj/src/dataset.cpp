#include "featadv/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "featadv/errors.hpp"
#include "featadv/rng.hpp"

namespace featadv {
namespace {

constexpr uint64_t kTrainSeed = 20221;
constexpr uint64_t kHeldoutSeed = 90731;

// Shape membership in local coordinates (u,v) in [-1,1], v pointing down.
bool inside(int64_t label, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (label) {
    case 0:
      return u * u + v * v <= 1.0;
    case 1: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.36;
    }
    case 2:
      return std::max(au, av) <= 0.8;
    case 3:
      return au + av <= 1.0;
    case 4:
      return std::max(au, av) <= 0.9 && static_cast<int>(std::floor((v + 1.0) * 2.75)) % 2 == 0;
    case 5:
      return std::max(au, av) <= 0.9 && static_cast<int>(std::floor((u + 1.0) * 2.75)) % 2 == 0;
    case 6:
      return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case 7:
      return std::max(au, av) <= 1.0 && (std::abs(u - v) <= 0.42 || std::abs(u + v) <= 0.42);
    case 8:  // apex up
      return v >= -1.0 && v <= 0.8 && au <= (v + 1.0) * 0.5;
    case 9:  // apex down
      return v <= 1.0 && v >= -0.8 && au <= (1.0 - v) * 0.5;
    default:
      return false;
  }
}

std::array<double, 3> random_color(Rng& rng) { return {rng.uniform(), rng.uniform(), rng.uniform()}; }

double color_distance(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]));
}

void render_one(int64_t label, Rng& rng, int64_t side, float* out) {
  const auto background = random_color(rng);
  auto foreground = random_color(rng);
  while (color_distance(foreground, background) < 0.45) foreground = random_color(rng);

  const double scale = side / 32.0;
  const double radius = rng.uniform(5.5, 9.5) * scale;
  const double cx = rng.uniform(radius, side - radius);
  const double cy = rng.uniform(radius, side - radius);
  const double angle = rng.uniform(-0.25, 0.25);
  const double ca = std::cos(angle), sa = std::sin(angle);
  // Mild background gradient.
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);

  const int64_t plane = side * side;
  constexpr int kSuper = 2;
  for (int64_t y = 0; y < side; ++y) {
    for (int64_t x = 0; x < side; ++x) {
      double coverage = 0.0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper - cx;
          const double py = y + (sy + 0.5) / kSuper - cy;
          const double u = (ca * px + sa * py) / radius;
          const double v = (-sa * px + ca * py) / radius;
          coverage += inside(label, u, v) ? 1.0 : 0.0;
        }
      }
      coverage /= kSuper * kSuper;
      const double shade = gx * (x / double(side) - 0.5) + gy * (y / double(side) - 0.5);
      for (int c = 0; c < 3; ++c) {
        double value = coverage * foreground[c] + (1.0 - coverage) * (background[c] + shade);
        value += 0.03 * rng.normal();
        out[c * plane + y * side + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
      }
    }
  }
}

LabeledImages select(const LabeledImages& set, const torch::Tensor& mask) {
  auto index = mask.nonzero().squeeze(1);
  return {set.images.index_select(0, index), set.labels.index_select(0, index)};
}

}  // namespace

LabeledImages LabeledImages::of_class(int64_t label) const {
  if (label < 0 || label >= kNumClasses) throw InputError("class id out of range");
  return select(*this, labels == label);
}

LabeledImages LabeledImages::excluding(int64_t label) const { return select(*this, labels != label); }

LabeledImages LabeledImages::take(int64_t count) const {
  count = std::min(count, size());
  return {images.slice(0, 0, count), labels.slice(0, 0, count)};
}

LabeledImages render_shapes(int64_t count, uint64_t seed, int64_t side) {
  auto images = torch::empty({count, 3, side, side}, torch::kFloat32);
  auto labels = torch::empty({count}, torch::kInt64);
  auto* pixels = images.data_ptr<float>();
  auto* label_ptr = labels.data_ptr<int64_t>();
  Rng rng(seed);
  for (int64_t i = 0; i < count; ++i) {
    const int64_t label = i % kNumClasses;
    label_ptr[i] = label;
    render_one(label, rng, side, pixels + i * 3 * side * side);
  }
  return {images, labels};
}

LabeledImages training_split(int64_t count) { return render_shapes(count, kTrainSeed); }

LabeledImages heldout_split(int64_t count) { return render_shapes(count, kHeldoutSeed); }

const LabeledImages& training_pool() {
  static const LabeledImages pool = training_split();
  return pool;
}

const LabeledImages& heldout_pool() {
  static const LabeledImages pool = heldout_split();
  return pool;
}

}  // namespace featadv
