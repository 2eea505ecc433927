#include "pil/pgm.hpp"

#include <fstream>
#include <string>

#include "pil/errors.hpp"

namespace pil {

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  if (image.pixels.size() != image.width * image.height) throw ShapeError("pgm pixel count does not match size");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

namespace {

std::size_t next_header_number(std::istream& in, const std::filesystem::path& path) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(in >> v)) throw IoError("malformed PGM header in " + path.string());
  return v;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  char magic[2] = {};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') throw IoError(path.string() + " is not a binary PGM");
  GrayImage img;
  img.width = next_header_number(in, path);
  img.height = next_header_number(in, path);
  const std::size_t maxval = next_header_number(in, path);
  if (maxval != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  in.get();  // single whitespace before the raster
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw IoError(path.string() + ": truncated PGM raster");
  }
  return img;
}

}  // namespace pil
