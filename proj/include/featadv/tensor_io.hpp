#pragma once

// Binary tensor container: 8-byte magic "FVADV1\0\0", little-endian u32 rank,
// rank x u32 dims, then row-major little-endian float32 values.

#include <filesystem>
#include <string>
#include <string_view>

#include <torch/torch.h>

namespace featadv {

inline constexpr std::string_view kTensorMagic{"FVADV1\0\0", 8};

std::string encode_tensor(const torch::Tensor& tensor);
torch::Tensor decode_tensor(std::string_view bytes);

void write_tensor(const std::filesystem::path& path, const torch::Tensor& tensor);
torch::Tensor read_tensor(const std::filesystem::path& path);

/// Whole-file helpers. `write_file_atomic` writes to a sibling temp file and
/// renames it into place.
std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace featadv
