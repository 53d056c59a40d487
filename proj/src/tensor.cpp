#include "gsfield/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace gsf {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& os, T value) {
  // host is little-endian on every supported target
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

}  // namespace

Tensor Tensor::zeros(Dtype dt, std::vector<uint64_t> shape) {
  Tensor t;
  t.dtype = dt;
  t.dims = std::move(shape);
  t.data.assign(t.numel() * dtype_size(dt), 0);
  return t;
}

Tensor make_f32(std::vector<uint64_t> shape, std::span<const float> values) {
  Tensor t = Tensor::zeros(Dtype::F32, std::move(shape));
  std::memcpy(t.data.data(), values.data(), values.size_bytes());
  return t;
}

Tensor make_f64(std::vector<uint64_t> shape, std::span<const double> values) {
  Tensor t = Tensor::zeros(Dtype::F64, std::move(shape));
  std::memcpy(t.data.data(), values.data(), values.size_bytes());
  return t;
}

Tensor make_i64(std::vector<uint64_t> shape, std::span<const int64_t> values) {
  Tensor t = Tensor::zeros(Dtype::I64, std::move(shape));
  std::memcpy(t.data.data(), values.data(), values.size_bytes());
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(kMagic, 4);
  write_le<uint32_t>(os, kVersion);
  write_le<uint8_t>(os, static_cast<uint8_t>(t.dtype));
  write_le<uint8_t>(os, static_cast<uint8_t>(t.dims.size()));
  for (uint64_t d : t.dims) write_le<uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data.data()),
           std::streamsize(t.data.size()));
  if (!os) throw IoError("short write: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw MalformedHeaderError("bad tensor magic: " + path.string());
  uint32_t version = read_le<uint32_t>(is);
  if (version != kVersion)
    throw VersionMismatchError("tensor version " + std::to_string(version) +
                               ": " + path.string());
  uint8_t dt = read_le<uint8_t>(is);
  uint8_t rank = read_le<uint8_t>(is);
  if (dt > 3 || !is)
    throw MalformedHeaderError("bad tensor dtype: " + path.string());
  Tensor t;
  t.dtype = static_cast<Dtype>(dt);
  t.dims.resize(rank);
  for (auto& d : t.dims) d = read_le<uint64_t>(is);
  if (!is) throw MalformedHeaderError("bad tensor dims: " + path.string());
  size_t bytes = t.numel() * dtype_size(t.dtype);
  t.data.resize(bytes);
  is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(bytes));
  if (size_t(is.gcount()) != bytes)
    throw TruncatedPayloadError("tensor payload short: " + path.string());
  return t;
}

void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<uint8_t> row(size_t(img.width) * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(img.at(y, x, c), 0.f, 1.f);
        row[size_t(x) * 3 + c] = uint8_t(std::lround(v * 255.f));
      }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw IoError("short write: " + path.string());
}

namespace {
int read_pnm_int(std::istream& is) {
  int c = is.get();
  while (c == '#' || std::isspace(c)) {
    if (c == '#')
      while (c != '\n' && c != EOF) c = is.get();
    c = is.get();
  }
  int v = 0;
  while (std::isdigit(c)) {
    v = v * 10 + (c - '0');
    c = is.get();
  }
  return v;
}
}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char p, six;
  is.get(p);
  is.get(six);
  if (p != 'P' || six != '6')
    throw MalformedHeaderError("not a P6 ppm: " + path.string());
  int w = read_pnm_int(is), h = read_pnm_int(is), maxval = read_pnm_int(is);
  if (w <= 0 || h <= 0 || maxval != 255)
    throw MalformedHeaderError("bad ppm header: " + path.string());
  Image img;
  img.width = w;
  img.height = h;
  img.rgb.resize(size_t(w) * h * 3);
  std::vector<uint8_t> raw(img.rgb.size());
  is.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (size_t(is.gcount()) != raw.size())
    throw TruncatedPayloadError("ppm payload short: " + path.string());
  for (size_t i = 0; i < raw.size(); ++i) img.rgb[i] = float(raw[i]) / 255.f;
  return img;
}

void write_pgm(const std::filesystem::path& path, int width, int height,
               std::span<const uint8_t> gray) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os << "P5\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(gray.data()), std::streamsize(gray.size()));
  if (!os) throw IoError("short write: " + path.string());
}

std::vector<uint8_t> read_pgm(const std::filesystem::path& path, int& width,
                              int& height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char p, five;
  is.get(p);
  is.get(five);
  if (p != 'P' || five != '5')
    throw MalformedHeaderError("not a P5 pgm: " + path.string());
  width = read_pnm_int(is);
  height = read_pnm_int(is);
  int maxval = read_pnm_int(is);
  if (width <= 0 || height <= 0 || maxval != 255)
    throw MalformedHeaderError("bad pgm header: " + path.string());
  std::vector<uint8_t> gray(size_t(width) * height);
  is.read(reinterpret_cast<char*>(gray.data()), std::streamsize(gray.size()));
  if (size_t(is.gcount()) != gray.size())
    throw TruncatedPayloadError("pgm payload short: " + path.string());
  return gray;
}

}  // namespace gsf
