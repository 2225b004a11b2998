// SPDX-License-Identifier: Apache-2.0
#include "surfcap/image.hpp"

#include "surfcap/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace surfcap {

namespace {

int quantize(double v, int maxval) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<int>(std::lround(c * maxval));
}

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

struct Netpbm {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 0;
};

Netpbm read_header(std::istream& in, const std::filesystem::path& path) {
  Netpbm h;
  try {
    h.magic = header_token(in);
    h.width = std::stoi(header_token(in));
    h.height = std::stoi(header_token(in));
    h.maxval = std::stoi(header_token(in));
  } catch (const std::exception&) {
    throw Error(ErrorCode::ParseError, "malformed netpbm header in " + path.string());
  }
  in.get();  // single whitespace byte before raster
  if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 65535)
    throw Error(ErrorCode::ParseError, "invalid netpbm dimensions in " + path.string());
  return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::MissingFile, "cannot write " + path.string());
  return out;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& rgb) {
  if (rgb.channels != 3) throw Error(ErrorCode::DimensionMismatch, "PPM needs 3 channels");
  std::ofstream out = open_out(path);
  out << "P6\n" << rgb.width << " " << rgb.height << "\n255\n";
  std::string raster(rgb.data.size(), '\0');
  for (std::size_t i = 0; i < rgb.data.size(); ++i)
    raster[i] = static_cast<char>(quantize(rgb.data[i], 255));
  out.write(raster.data(), static_cast<std::streamsize>(raster.size()));
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const Netpbm h = read_header(in, path);
  if (h.magic != "P6" || h.maxval != 255)
    throw Error(ErrorCode::ParseError, path.string() + " is not an 8-bit P6 image");
  Image img(h.width, h.height, 3);
  std::string raster(img.data.size(), '\0');
  in.read(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (in.gcount() != static_cast<std::streamsize>(raster.size()))
    throw Error(ErrorCode::ParseError, "truncated raster in " + path.string());
  for (std::size_t i = 0; i < raster.size(); ++i)
    img.data[i] = static_cast<unsigned char>(raster[i]) / 255.0;
  return img;
}

void write_pgm(const std::filesystem::path& path, const Image& gray, int maxval) {
  if (gray.channels != 1) throw Error(ErrorCode::DimensionMismatch, "PGM needs 1 channel");
  if (maxval != 255 && maxval != 65535)
    throw Error(ErrorCode::InvalidArgument, "PGM maxval must be 255 or 65535");
  std::ofstream out = open_out(path);
  out << "P5\n" << gray.width << " " << gray.height << "\n" << maxval << "\n";
  std::string raster;
  raster.reserve(gray.data.size() * (maxval > 255 ? 2 : 1));
  for (double v : gray.data) {
    const int q = quantize(v, maxval);
    if (maxval > 255) raster.push_back(static_cast<char>(q >> 8));
    raster.push_back(static_cast<char>(q & 0xff));
  }
  out.write(raster.data(), static_cast<std::streamsize>(raster.size()));
}

Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in = open_in(path);
  const Netpbm h = read_header(in, path);
  if (h.magic != "P5") throw Error(ErrorCode::ParseError, path.string() + " is not P5");
  const int bytes = h.maxval > 255 ? 2 : 1;
  Image img(h.width, h.height, 1);
  std::string raster(img.data.size() * bytes, '\0');
  in.read(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (in.gcount() != static_cast<std::streamsize>(raster.size()))
    throw Error(ErrorCode::ParseError, "truncated raster in " + path.string());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    int q = static_cast<unsigned char>(raster[i * bytes]);
    if (bytes == 2) q = (q << 8) | static_cast<unsigned char>(raster[i * 2 + 1]);
    img.data[i] = static_cast<double>(q) / h.maxval;
  }
  return img;
}

Image downsample(const Image& img, int factor) {
  if (factor <= 1) return img;
  Image out(img.width / factor, img.height / factor, img.channels);
  const double norm = 1.0 / (factor * factor);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += img.at(x * factor + dx, y * factor + dy, c);
        out.at(x, y, c) = acc * norm;
      }
  return out;
}

}  // namespace surfcap
