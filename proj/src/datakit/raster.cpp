#include "hydra/raster.hpp"

#include <cctype>
#include <fstream>
#include <iterator>

#include "hydra/errors.hpp"

namespace hydra::data {

namespace {

class HeaderReader {
 public:
  HeaderReader(const std::vector<std::uint8_t>& bytes, const std::string& origin)
      : bytes_(bytes), origin_(origin) {}

  std::size_t number() {
    skip_space_and_comments();
    if (pos_ >= bytes_.size() || !std::isdigit(bytes_[pos_])) fail("expected a number");
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + (bytes_[pos_++] - '0');
      if (v > 1u << 20) fail("header value too large");
    }
    return v;
  }

  void single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("missing whitespace after maxval");
    ++pos_;
  }

  std::size_t pos() const { return pos_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(origin_ + ": " + what + " at byte " + std::to_string(pos_));
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& bytes_;
  const std::string& origin_;
  std::size_t pos_ = 2;
};

}  // namespace

Raster decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError(origin + ": not a binary PGM/PPM (expected P5 or P6 magic)");
  }
  HeaderReader reader(bytes, origin);
  Raster r;
  r.channels = bytes[1] == '6' ? 3 : 1;
  r.width = reader.number();
  r.height = reader.number();
  const std::size_t maxval = reader.number();
  if (r.width == 0 || r.height == 0) reader.fail("zero image dimension");
  if (maxval != 255) reader.fail("only maxval 255 is supported");
  reader.single_whitespace();
  const std::size_t need = r.width * r.height * r.channels;
  if (bytes.size() - reader.pos() < need) {
    throw FormatError(origin + ": truncated payload, expected " + std::to_string(need) + " bytes, found " +
                      std::to_string(bytes.size() - reader.pos()));
  }
  r.pixels.assign(bytes.begin() + static_cast<long>(reader.pos()),
                  bytes.begin() + static_cast<long>(reader.pos() + need));
  return r;
}

std::vector<std::uint8_t> encode_pnm(const Raster& raster) {
  if (raster.channels != 1 && raster.channels != 3) throw FormatError("raster must have 1 or 3 channels");
  if (raster.pixels.size() != raster.width * raster.height * raster.channels) {
    throw FormatError("raster pixel count does not match its size");
  }
  const std::string header = std::string(raster.channels == 3 ? "P6" : "P5") + "\n" +
                             std::to_string(raster.width) + " " + std::to_string(raster.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), raster.pixels.begin(), raster.pixels.end());
  return out;
}

Raster read_pnm(const std::filesystem::path& path) { return decode_pnm(read_file_bytes(path), path.string()); }

void write_pnm(const std::filesystem::path& path, const Raster& raster) {
  write_file_atomic(path, encode_pnm(raster));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(contents.data()), static_cast<std::streamsize>(contents.size()));
    if (!out) throw FormatError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  write_file_atomic(path, std::vector<std::uint8_t>(contents.begin(), contents.end()));
}

}  // namespace hydra::data
