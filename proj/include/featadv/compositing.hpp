#pragma once

// Insertion operators: pixel patches, latent region/channel blocks, and
// generalized (mask-shaped) patches. Every operator leaves the complement of
// its target window bitwise unchanged.

#include <cstdint>

#include <torch/torch.h>

namespace featadv {

/// Top-left corner of an inserted window.
struct Location {
  int64_t row = 0;
  int64_t col = 0;
  bool operator==(const Location&) const = default;
};

/// round(side * sqrt(area_fraction)).
int64_t window_side(int64_t side, double area_fraction);

/// Replaces a square window of `source` ([3,H,W] or [B,3,H,W]) with the
/// bilinearly resized `patch` ([3,p,p]). Side = window_side(W, area_fraction).
/// Differentiable w.r.t. both inputs. Throws InputError when out of bounds.
torch::Tensor insert_patch(const torch::Tensor& source, const torch::Tensor& patch, Location location,
                           double area_fraction);

/// Same operator with an explicit window side. A side of 0 returns `source`.
torch::Tensor insert_patch_sized(const torch::Tensor& source, const torch::Tensor& patch, Location location,
                                 int64_t side);

/// Replaces the window [offset, offset + s) x [offset, offset + s) of a
/// latent [B,C,h,w] across all channels. `insertion` is [C,s,s] (shared) or
/// [B,C,s,s].
torch::Tensor apply_region(const torch::Tensor& latent, const torch::Tensor& insertion, Location offset);

/// Contiguous channel block [start, start + count).
struct ChannelBlock {
  int64_t start = 0;
  int64_t count = 0;
};

/// round(fraction * channels), at least 1.
int64_t channel_count(int64_t channels, double fraction);

/// Replaces the listed channels over the full spatial extent. `insertion` is
/// [count,h,w] or [B,count,h,w].
torch::Tensor apply_channel(const torch::Tensor& latent, const torch::Tensor& insertion, ChannelBlock block);

struct GeneralizedPatch {
  torch::Tensor mask;          // [H,W], values in {0,1}
  torch::Tensor masked_patch;  // [3,H,W] = adversarial * mask
};

/// Number of pixels kept by the top-decile mask: round(0.10 * N).
int64_t top_decile_count(int64_t pixels);

/// Mask of the top round(0.10 N) pixels of the Gaussian-smoothed channel-mean
/// absolute difference, ties broken by ascending row-major index. Gradients
/// flow to `adversarial` through the masked patch; the mask is constant.
GeneralizedPatch extract_generalized_patch(const torch::Tensor& original, const torch::Tensor& adversarial,
                                           double smoothing_sigma);

struct Box {
  int64_t row = 0;
  int64_t col = 0;
  int64_t height = 0;
  int64_t width = 0;
};

/// Bounding box of the nonzero mask pixels. Throws InputError if empty.
Box mask_bounding_box(const torch::Tensor& mask);

/// Pastes the masked pixels with the mask's bounding box moved to
/// `location`. Pixels outside the translated mask are untouched.
torch::Tensor overlay_generalized_patch(const torch::Tensor& source, const torch::Tensor& masked_patch,
                                        const torch::Tensor& mask, Location location);

}  // namespace featadv
