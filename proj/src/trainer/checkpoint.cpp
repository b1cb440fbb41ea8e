#include <bit>
#include <cstring>

#include "hydra/errors.hpp"
#include "hydra/raster.hpp"
#include "hydra/trainer.hpp"

namespace hydra::train {

namespace {

constexpr char kMagic[4] = {'H', 'P', 'N', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, const std::string& origin) : b_(b), origin_(origin) {}

  template <typename U>
  U le(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (b_.size() - pos_ < n) fail(std::string("truncated ") + what);
  }
  [[noreturn]] void fail(const std::string& what) const { fail_at(pos_, what); }
  [[noreturn]] void fail_at(std::size_t offset, const std::string& what) const {
    throw FormatError(origin_ + ": " + what + " at offset " + std::to_string(offset));
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

void put_name(Writer& w, const std::string& name) {
  if (name.empty() || name.size() > 0xffff) throw FormatError("checkpoint name length out of range: " + name);
  w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const net::NetworkParams& params) {
  Writer w;
  w.bytes(kMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.entries.size()));
  for (const auto& [name, t] : params.entries) {  // std::map: lexicographic
    put_name(w, name);
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.dims()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  w.le<std::uint32_t>(static_cast<std::uint32_t>(params.stage_markers.size()));
  for (const auto& m : params.stage_markers) put_name(w, m);
  return std::move(w.out);
}

net::NetworkParams decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  r.need(4, "magic");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) r.fail("bad magic (expected HPN1)");
  r.str(4, "magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion) r.fail_at(4, "unsupported version " + std::to_string(version));
  const auto count = r.le<std::uint32_t>("entry count");
  net::NetworkParams params;
  std::string prev;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t at = r.pos();
    const auto len = r.le<std::uint16_t>("name length");
    if (len == 0) r.fail_at(at, "empty parameter name");
    std::string name = r.str(len, "name");
    if (!prev.empty() && name <= prev) r.fail_at(at, "entries not in lexicographic order at '" + name + "'");
    const auto rank = r.le<std::uint8_t>("rank");
    if (rank == 0 || rank > 8) r.fail("bad rank " + std::to_string(rank));
    Shape dims;
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto v = r.le<std::uint32_t>("dims");
      if (v == 0) r.fail("zero dimension");
      dims.push_back(v);
      numel *= v;
      if (numel > (std::size_t{1} << 32)) r.fail("tensor too large");
    }
    r.need(numel * 4, "payload");
    std::vector<float> data(numel);
    for (auto& x : data) x = std::bit_cast<float>(r.le<std::uint32_t>("payload"));
    params.add(name, Tensor(std::move(dims), std::move(data)));
    prev = std::move(name);
  }
  const auto markers = r.le<std::uint32_t>("stage-marker count");
  for (std::uint32_t m = 0; m < markers; ++m) {
    const auto len = r.le<std::uint16_t>("marker length");
    params.stage_markers.insert(r.str(len, "marker"));
  }
  if (!r.done()) r.fail("trailing bytes");
  return params;
}

void save_checkpoint(const net::NetworkParams& params, const std::filesystem::path& path) {
  data::write_file_atomic(path, encode_checkpoint(params));
}

net::NetworkParams load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(data::read_file_bytes(path), path.string());
}

}  // namespace hydra::train
