#include "featadv/compositing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "featadv/errors.hpp"
#include "featadv/image.hpp"
#include "featadv/transforms.hpp"

namespace featadv {

using torch::indexing::Slice;

namespace {

std::string window_text(Location l, int64_t h, int64_t w) {
  return "(" + std::to_string(l.row) + "," + std::to_string(l.col) + ") size " + std::to_string(h) + "x" +
         std::to_string(w);
}

}  // namespace

int64_t window_side(int64_t side, double area_fraction) {
  if (!(area_fraction > 0.0 && area_fraction <= 1.0)) throw InputError("area_fraction must be in (0,1]");
  return std::lround(static_cast<double>(side) * std::sqrt(area_fraction));
}

torch::Tensor insert_patch(const torch::Tensor& source, const torch::Tensor& patch, Location location,
                           double area_fraction) {
  return insert_patch_sized(source, patch, location, window_side(source.size(-1), area_fraction));
}

torch::Tensor insert_patch_sized(const torch::Tensor& source, const torch::Tensor& patch, Location location,
                                 int64_t side) {
  if (patch.dim() != 3 || patch.size(0) != 3) throw InputError("patch must be [3,p,p]");
  if (patch.size(1) != patch.size(2)) throw InputError("patch must be square");
  if (side == 0) return source;
  const auto height = source.size(-2), width = source.size(-1);
  if (side < 0 || location.row < 0 || location.col < 0 || location.row + side > height ||
      location.col + side > width) {
    throw InputError("patch window " + window_text(location, side, side) + " does not fit a " +
                     std::to_string(height) + "x" + std::to_string(width) + " image; valid rows [0," +
                     std::to_string(height - side) + "], cols [0," + std::to_string(width - side) + "]");
  }
  auto resized = resize_bilinear(patch, side, side).to(source.scalar_type());
  auto out = source.clone();
  auto window = out.index({"...", Slice(location.row, location.row + side), Slice(location.col, location.col + side)});
  window.copy_(source.dim() == 4 ? resized.unsqueeze(0).expand_as(window) : resized);
  return out;
}

torch::Tensor apply_region(const torch::Tensor& latent, const torch::Tensor& insertion, Location offset) {
  if (latent.dim() != 4) throw InputError("latent must be [B,C,h,w]");
  const auto block = insertion.dim() == 3 ? insertion.unsqueeze(0) : insertion;
  if (block.dim() != 4 || block.size(1) != latent.size(1) || block.size(2) != block.size(3)) {
    throw InputError("region insertion must be [C,s,s] spanning all latent channels");
  }
  if (block.size(0) != 1 && block.size(0) != latent.size(0)) throw InputError("region insertion batch mismatch");
  const auto s = block.size(2);
  if (offset.row < 0 || offset.col < 0 || offset.row + s > latent.size(2) || offset.col + s > latent.size(3)) {
    throw InputError("region window " + window_text(offset, s, s) + " outside latent");
  }
  auto out = latent.clone();
  auto window = out.index({Slice(), Slice(), Slice(offset.row, offset.row + s), Slice(offset.col, offset.col + s)});
  window.copy_(block.expand_as(window));
  return out;
}

int64_t channel_count(int64_t channels, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw InputError("channel fraction must be in (0,1]");
  return std::max<int64_t>(1, std::lround(fraction * static_cast<double>(channels)));
}

torch::Tensor apply_channel(const torch::Tensor& latent, const torch::Tensor& insertion, ChannelBlock block) {
  if (latent.dim() != 4) throw InputError("latent must be [B,C,h,w]");
  if (block.start < 0 || block.count <= 0 || block.start + block.count > latent.size(1)) {
    throw InputError("channel block [" + std::to_string(block.start) + "," + std::to_string(block.start + block.count) +
                     ") outside " + std::to_string(latent.size(1)) + " channels");
  }
  const auto values = insertion.dim() == 3 ? insertion.unsqueeze(0) : insertion;
  if (values.dim() != 4 || values.size(1) != block.count || values.size(2) != latent.size(2) ||
      values.size(3) != latent.size(3)) {
    throw InputError("channel insertion must be [count,h,w] spanning the full spatial extent");
  }
  auto out = latent.clone();
  auto window = out.index({Slice(), Slice(block.start, block.start + block.count)});
  window.copy_(values.expand_as(window));
  return out;
}

int64_t top_decile_count(int64_t pixels) { return std::lround(0.10 * static_cast<double>(pixels)); }

GeneralizedPatch extract_generalized_patch(const torch::Tensor& original, const torch::Tensor& adversarial,
                                           double smoothing_sigma) {
  if (original.sizes() != adversarial.sizes() || original.dim() != 3 || original.size(0) != 3) {
    throw InputError("original and adversarial images must have the same [3,H,W] shape");
  }
  if (!(smoothing_sigma >= 0.0)) throw InputError("smoothing sigma must be non-negative");
  const auto height = original.size(1), width = original.size(2);
  auto diff = (original.detach().to(torch::kFloat64) - adversarial.detach().to(torch::kFloat64)).abs().mean(0);
  auto smoothed = gaussian_blur(diff.view({1, 1, height, width}), smoothing_sigma).view({height * width}).contiguous();

  const auto* g = smoothed.data_ptr<double>();
  const auto n = height * width;
  const auto keep = top_decile_count(n);
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto ranks_before = [g](int64_t a, int64_t b) { return g[a] > g[b] || (g[a] == g[b] && a < b); };
  if (keep > 0 && keep < n) std::nth_element(order.begin(), order.begin() + keep, order.end(), ranks_before);

  auto mask = torch::zeros({n}, torch::kFloat64);
  auto* m = mask.data_ptr<double>();
  for (int64_t i = 0; i < keep; ++i) m[order[i]] = 1.0;
  auto mask_hw = mask.view({height, width}).to(adversarial.scalar_type());
  return {mask_hw, adversarial * mask_hw.unsqueeze(0)};
}

Box mask_bounding_box(const torch::Tensor& mask) {
  auto nz = mask.detach().nonzero();
  if (nz.size(0) == 0) throw InputError("mask is empty");
  const auto rows = nz.select(1, 0), cols = nz.select(1, 1);
  const auto r0 = rows.min().item<int64_t>(), r1 = rows.max().item<int64_t>();
  const auto c0 = cols.min().item<int64_t>(), c1 = cols.max().item<int64_t>();
  return {r0, c0, r1 - r0 + 1, c1 - c0 + 1};
}

torch::Tensor overlay_generalized_patch(const torch::Tensor& source, const torch::Tensor& masked_patch,
                                        const torch::Tensor& mask, Location location) {
  if (masked_patch.dim() != 3 || mask.dim() != 2 || masked_patch.size(1) != mask.size(0) ||
      masked_patch.size(2) != mask.size(1)) {
    throw InputError("masked patch [3,H,W] and mask [H,W] must agree");
  }
  if (!mask.detach().ne(0).any().item<bool>()) return source;
  const auto box = mask_bounding_box(mask);
  const auto height = source.size(-2), width = source.size(-1);
  if (location.row < 0 || location.col < 0 || location.row + box.height > height || location.col + box.width > width) {
    throw InputError("mask box " + window_text(location, box.height, box.width) + " does not fit the source");
  }
  auto m = mask.index({Slice(box.row, box.row + box.height), Slice(box.col, box.col + box.width)})
               .to(source.scalar_type());
  auto p = masked_patch.index({Slice(), Slice(box.row, box.row + box.height), Slice(box.col, box.col + box.width)})
               .to(source.scalar_type());
  auto rows = Slice(location.row, location.row + box.height);
  auto cols = Slice(location.col, location.col + box.width);
  auto region = source.index({"...", rows, cols});
  auto keep = m.ne(0);
  // torch::where keeps untouched pixels bitwise identical.
  auto blended = torch::where(keep, source.dim() == 4 ? p.unsqueeze(0).expand_as(region) : p, region);
  auto out = source.clone();
  out.index({"...", rows, cols}).copy_(blended);
  return out;
}

}  // namespace featadv
