#include "featadv/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "featadv/errors.hpp"

namespace featadv {
namespace {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

void put_u32(std::string& out, uint32_t value) {
  char buf[4];
  std::memcpy(buf, &value, 4);
  out.append(buf, 4);
}

uint32_t get_u32(std::string_view bytes, size_t offset) {
  uint32_t value = 0;
  std::memcpy(&value, bytes.data() + offset, 4);
  return value;
}

}  // namespace

std::string encode_tensor(const torch::Tensor& tensor) {
  auto values = tensor.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  std::string out(kTensorMagic);
  put_u32(out, static_cast<uint32_t>(values.dim()));
  for (auto d : values.sizes()) put_u32(out, static_cast<uint32_t>(d));
  out.append(reinterpret_cast<const char*>(values.data_ptr<float>()),
             static_cast<size_t>(values.numel()) * sizeof(float));
  return out;
}

torch::Tensor decode_tensor(std::string_view bytes) {
  if (bytes.size() < 12 || bytes.substr(0, 8) != kTensorMagic) {
    throw InputError("not a tensor container (bad magic)");
  }
  const uint32_t rank = get_u32(bytes, 8);
  size_t offset = 12;
  if (bytes.size() < offset + 4ull * rank) throw InputError("truncated tensor header");
  std::vector<int64_t> dims(rank);
  int64_t count = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    dims[i] = get_u32(bytes, offset);
    count *= dims[i];
    offset += 4;
  }
  if (bytes.size() != offset + static_cast<size_t>(count) * sizeof(float)) {
    throw InputError("tensor payload size does not match header");
  }
  auto out = torch::empty(dims, torch::kFloat32);
  std::memcpy(out.data_ptr<float>(), bytes.data() + offset, static_cast<size_t>(count) * sizeof(float));
  return out;
}

void write_tensor(const std::filesystem::path& path, const torch::Tensor& tensor) {
  write_file_atomic(path, encode_tensor(tensor));
}

torch::Tensor read_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return std::move(buffer).str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace featadv
