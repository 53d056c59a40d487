#pragma once

#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "gsfield/errors.hpp"

namespace gsf {

// On-disk format: magic "TNSR", u32 version, u8 dtype, u8 rank,
// u64 dims[rank], little-endian row-major payload.
enum class Dtype : uint8_t { F32 = 0, F64 = 1, I64 = 2, U8 = 3 };

inline size_t dtype_size(Dtype d) {
  switch (d) {
    case Dtype::F32: return 4;
    case Dtype::F64: return 8;
    case Dtype::I64: return 8;
    case Dtype::U8: return 1;
  }
  return 0;
}

struct Tensor {
  Dtype dtype = Dtype::F32;
  std::vector<uint64_t> dims;
  std::vector<uint8_t> data;  // raw little-endian payload

  static Tensor zeros(Dtype dt, std::vector<uint64_t> shape);

  size_t numel() const {
    size_t n = 1;
    for (uint64_t d : dims) n *= d;
    return n;
  }

  template <typename T>
  std::span<T> as() {
    return {reinterpret_cast<T*>(data.data()), data.size() / sizeof(T)};
  }
  template <typename T>
  std::span<const T> as() const {
    return {reinterpret_cast<const T*>(data.data()), data.size() / sizeof(T)};
  }

  bool operator==(const Tensor& o) const {
    return dtype == o.dtype && dims == o.dims && data == o.data;
  }
};

Tensor make_f32(std::vector<uint64_t> shape, std::span<const float> values);
Tensor make_f64(std::vector<uint64_t> shape, std::span<const double> values);
Tensor make_i64(std::vector<uint64_t> shape, std::span<const int64_t> values);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// HxWx3 float image, values in [0,1], row-major.
struct Image {
  int width = 0, height = 0;
  std::vector<float> rgb;  // height*width*3

  float& at(int y, int x, int c) { return rgb[(size_t(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(size_t(y) * width + x) * 3 + c]; }
};

// Binary PPM (P6, maxval 255) for 8-bit previews.
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

// Binary PGM (P5) for masks: nonzero = set.
void write_pgm(const std::filesystem::path& path, int width, int height,
               std::span<const uint8_t> gray);
std::vector<uint8_t> read_pgm(const std::filesystem::path& path, int& width,
                              int& height);

}  // namespace gsf
