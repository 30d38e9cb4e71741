#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "moc/error.hpp"
#include "moc/tensor.hpp"

// Binary netpbm: P6 (RGB) and P5 (gray), maxval 255 only.

namespace moc {

struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

namespace detail {

inline void skip_space_and_comments(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_header_int(std::istream& in, const char* what) {
  skip_space_and_comments(in);
  int v = -1;
  if (!(in >> v) || v <= 0) throw FormatError(std::string("netpbm: bad ") + what);
  return v;
}

}  // namespace detail

inline RawImage read_netpbm(std::istream& in, const std::string& source = "<stream>") {
  char magic[2] = {0, 0};
  if (!in.read(magic, 2) || magic[0] != 'P' || (magic[1] != '6' && magic[1] != '5')) {
    throw FormatError(source + ": not a binary PPM/PGM (expected P6 or P5 magic)");
  }
  RawImage img;
  img.channels = magic[1] == '6' ? 3 : 1;
  try {
    img.width = detail::read_header_int(in, "width");
    img.height = detail::read_header_int(in, "height");
    const int maxval = detail::read_header_int(in, "maxval");
    if (maxval != 255) throw FormatError("netpbm: only maxval 255 is supported");
  } catch (const FormatError& e) {
    throw FormatError(source + ": " + e.what());
  }
  const int sep = in.get();
  if (sep != ' ' && sep != '\n' && sep != '\t' && sep != '\r') {
    throw FormatError(source + ": missing whitespace after header");
  }
  const std::size_t bytes = static_cast<std::size_t>(img.width) * img.height * img.channels;
  img.pixels.resize(bytes);
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(bytes))) {
    throw FormatError(source + ": truncated pixel payload (expected " + std::to_string(bytes) + " bytes)");
  }
  return img;
}

inline RawImage read_netpbm_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_netpbm(in, path.string());
}

inline void write_netpbm(std::ostream& out, const RawImage& img) {
  if (img.channels != 1 && img.channels != 3) throw ArgumentError("netpbm: channels must be 1 or 3");
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * img.height * img.channels) {
    throw ShapeError("netpbm: pixel buffer does not match extents");
  }
  out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_netpbm_file(const std::filesystem::path& path, const RawImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  write_netpbm(out, img);
  if (!out) throw IoError("write failed for " + path.string());
}

/// H x W x 3 tensor with channels scaled to [0, 1].
template <class T = float>
BasicTensor<T> image_to_tensor(const RawImage& img) {
  if (img.channels != 3) throw FormatError("expected an RGB (P6) image");
  BasicTensor<T> t(Shape{img.height, img.width, 3});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = static_cast<T>(img.pixels[i]) / T(255);
  return t;
}

template <class T = float>
BasicTensor<T> load_image(const std::filesystem::path& path) {
  return image_to_tensor<T>(read_netpbm_file(path));
}

}  // namespace moc
