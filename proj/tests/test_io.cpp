#include <doctest.h>

#include "featadv/errors.hpp"
#include "featadv/hashing.hpp"
#include "featadv/image.hpp"
#include "featadv/rng.hpp"
#include "featadv/tensor_io.hpp"
#include "support.hpp"

using namespace featadv;

TEST_CASE("sha256 of known strings") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("tensor container round trip") {
  auto t = torch::rand({2, 3, 5});
  const auto bytes = encode_tensor(t);
  CHECK(bytes.substr(0, 8) == std::string(kTensorMagic));
  CHECK(bytes.size() == 8 + 4 + 3 * 4 + 30 * 4);
  auto back = decode_tensor(bytes);
  CHECK(back.sizes() == t.sizes());
  CHECK(torch::equal(back, t));
}

TEST_CASE("tensor container rejects garbage") {
  CHECK_THROWS(decode_tensor("not a tensor"));
  auto bytes = encode_tensor(torch::zeros({4}));
  bytes.pop_back();
  CHECK_THROWS(decode_tensor(bytes));
}

TEST_CASE("atomic write leaves no temp files") {
  testing::TempDir dir;
  write_file_atomic(dir / "a.bin", "hello");
  write_file_atomic(dir / "a.bin", "world");
  CHECK(read_file(dir / "a.bin") == "world");
  int files = 0;
  for ([[maybe_unused]] auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == 1);
}

TEST_CASE("png round trip is exact on 8-bit values") {
  auto img = torch::randint(0, 256, {3, 7, 9}).to(torch::kFloat32) / 255.0;
  ImageTensor image(img);
  auto back = decode_png(encode_png(image));
  CHECK(back.height() == 7);
  CHECK(back.width() == 9);
  CHECK(testing::max_abs_diff(back.data(), img) < 1e-6);
}

TEST_CASE("image validation") {
  CHECK_THROWS_AS(ImageTensor(torch::rand({4, 4})), InputError);
  CHECK_THROWS_AS(ImageTensor(torch::full({3, 2, 2}, 1.5)), InputError);
  auto nan = torch::zeros({3, 2, 2});
  nan[0][0][0] = std::nan("");
  CHECK_THROWS_AS(ImageTensor{nan}, InputError);
  CHECK_THROWS_AS(decode_png("\x89PNG broken"), InputError);
}

TEST_CASE("bilinear resize is the identity at the same size and linear") {
  auto img = torch::rand({3, 6, 6}, torch::kFloat64);
  CHECK(testing::max_abs_diff(resize_bilinear(img, 6, 6), img) < 1e-12);
  auto r1 = resize_bilinear(img, 11, 4);
  auto r2 = resize_bilinear(0.3 * img, 11, 4);
  CHECK(testing::max_abs_diff(0.3 * r1, r2) < 1e-12);
}

TEST_CASE("rng streams are reproducible and independent") {
  Rng a(5), b(5), c(derive_seed(5, 1));
  for (int i = 0; i < 10; ++i) CHECK(a.next() == b.next());
  CHECK(Rng(5).next() != c.next());
  CHECK(derive_seed(5, 1) != derive_seed(5, 2));
  Rng r(9);
  for (int i = 0; i < 1000; ++i) {
    const auto k = r.integer(-2, 3);
    CHECK(k >= -2);
    CHECK(k <= 3);
  }
}
