#include "featadv/image.hpp"

#include <cstring>
#include <vector>

#include <png.h>

#include "featadv/errors.hpp"
#include "featadv/tensor_io.hpp"

namespace featadv {

ImageTensor::ImageTensor(torch::Tensor chw) : data_(std::move(chw)) {
  if (data_.dim() != 3 || data_.size(0) != 3) {
    throw InputError("image must be shaped [3,H,W]");
  }
  if (data_.size(1) < 1 || data_.size(2) < 1) throw InputError("image must be non-empty");
  check_finite_images(data_);
  auto values = data_.detach();
  if (values.min().item<double>() < 0.0 || values.max().item<double>() > 1.0) {
    throw InputError("image values must lie in [0,1]");
  }
}

void check_finite_images(const torch::Tensor& batch) {
  if (!batch.defined()) throw InputError("undefined image tensor");
  if (batch.dim() != 3 && batch.dim() != 4) throw InputError("expected [3,H,W] or [B,3,H,W]");
  if (batch.size(-3) != 3) throw InputError("expected 3 channels");
  if (!torch::isfinite(batch.detach()).all().item<bool>()) {
    throw InputError("image contains non-finite values");
  }
}

torch::Tensor resize_bilinear(const torch::Tensor& images, int64_t height, int64_t width) {
  const bool single = images.dim() == 3;
  auto batch = single ? images.unsqueeze(0) : images;
  if (batch.size(2) == height && batch.size(3) == width) return images;
  namespace F = torch::nn::functional;
  auto out = F::interpolate(batch, F::InterpolateFuncOptions()
                                       .size(std::vector<int64_t>{height, width})
                                       .mode(torch::kBilinear)
                                       .align_corners(false));
  return single ? out.squeeze(0) : out;
}

std::string encode_png(const ImageTensor& image) {
  auto hwc = (image.data().detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  png_image info;
  std::memset(&info, 0, sizeof(info));
  info.version = PNG_IMAGE_VERSION;
  info.width = static_cast<png_uint_32>(image.width());
  info.height = static_cast<png_uint_32>(image.height());
  info.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&info, nullptr, &size, 0, hwc.data_ptr<uint8_t>(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + info.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&info, out.data(), &size, 0, hwc.data_ptr<uint8_t>(), 0, nullptr)) {
    throw std::runtime_error(std::string("png encode failed: ") + info.message);
  }
  out.resize(size);
  return out;
}

ImageTensor decode_png(std::string_view bytes) {
  png_image info;
  std::memset(&info, 0, sizeof(info));
  info.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&info, bytes.data(), bytes.size())) {
    throw InputError(std::string("png decode failed: ") + info.message);
  }
  info.format = PNG_FORMAT_RGB;
  std::vector<uint8_t> pixels(PNG_IMAGE_SIZE(info));
  if (!png_image_finish_read(&info, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&info);
    throw InputError(std::string("png decode failed: ") + info.message);
  }
  auto hwc = torch::from_blob(pixels.data(), {static_cast<int64_t>(info.height), static_cast<int64_t>(info.width), 3},
                              torch::kUInt8);
  return ImageTensor(hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0).contiguous());
}

void write_png(const std::filesystem::path& path, const ImageTensor& image) {
  write_file_atomic(path, encode_png(image));
}

std::string encode_image(const ImageTensor& image) {
  return encode_tensor(image.data().permute({1, 2, 0}).contiguous());
}

ImageTensor decode_image(std::string_view bytes) {
  auto hwc = decode_tensor(bytes);
  if (hwc.dim() != 3 || hwc.size(2) != 3) throw InputError("image tensor must be H x W x 3");
  return ImageTensor(hwc.permute({2, 0, 1}).contiguous());
}

}  // namespace featadv
