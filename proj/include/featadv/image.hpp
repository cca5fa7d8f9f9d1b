#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace featadv {

/// An RGB image with values in [0,1]. Stored channel-first ([3,H,W]) so it
/// can flow through torch ops; the on-disk tensor layout is H x W x 3.
class ImageTensor {
 public:
  ImageTensor() = default;
  /// Validates shape [3,H,W], finiteness and range. Throws InputError.
  explicit ImageTensor(torch::Tensor chw);

  const torch::Tensor& data() const noexcept { return data_; }
  int64_t height() const { return data_.size(1); }
  int64_t width() const { return data_.size(2); }
  bool empty() const { return !data_.defined(); }

  /// Batched view [1,3,H,W].
  torch::Tensor batch() const { return data_.unsqueeze(0); }

 private:
  torch::Tensor data_;
};

/// Throws InputError unless `batch` is [B,3,H,W] (or [3,H,W]) and finite.
void check_finite_images(const torch::Tensor& batch);

/// Bilinear resize (half-pixel centers, no antialiasing) of [3,H,W] or
/// [B,3,H,W]. Differentiable, linear in the input.
torch::Tensor resize_bilinear(const torch::Tensor& images, int64_t height, int64_t width);

/// 8-bit RGB PNG encoding. Values are clamped to [0,1] and rounded.
std::string encode_png(const ImageTensor& image);
ImageTensor decode_png(std::string_view bytes);
void write_png(const std::filesystem::path& path, const ImageTensor& image);

/// Tensor-container round trip in H x W x 3 layout.
std::string encode_image(const ImageTensor& image);
ImageTensor decode_image(std::string_view bytes);

}  // namespace featadv
