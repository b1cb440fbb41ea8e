#include <json.hpp>

#include "hydra/datakit.hpp"
#include "hydra/errors.hpp"

namespace hydra::data {

using ordered_json = nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(const std::string& origin, std::size_t line, const std::string& what) {
  throw FormatError(origin + ":" + std::to_string(line) + ": " + what);
}

template <typename T>
T field(const ordered_json& obj, const char* key, const std::string& origin, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(origin, line, std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(origin, line, std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace

Manifest parse_manifest(std::string_view text, const std::string& origin) {
  Manifest m;
  std::size_t line_no = 0;
  bool header = false;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    ordered_json obj;
    try {
      obj = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      fail(origin, line_no, std::string("invalid JSON (") + e.what() + ")");
    }
    if (!obj.is_object()) fail(origin, line_no, "expected a JSON object");
    if (!header) {
      m.attributes = field<std::vector<std::string>>(obj, "attributes", origin, line_no);
      const auto version = field<int>(obj, "version", origin, line_no);
      if (version != 1) fail(origin, line_no, "unsupported manifest version " + std::to_string(version));
      header = true;
      continue;
    }
    SampleRecord r;
    r.path = field<std::string>(obj, "path", origin, line_no);
    const auto attrs = field<std::vector<int>>(obj, "attrs", origin, line_no);
    if (attrs.size() != m.attributes.size()) {
      fail(origin, line_no,
           "expected " + std::to_string(m.attributes.size()) + " attribute bits, got " + std::to_string(attrs.size()));
    }
    for (int a : attrs) {
      if (a != 0 && a != 1) fail(origin, line_no, "attribute bits must be 0 or 1");
      r.attrs.push_back(static_cast<std::uint8_t>(a));
    }
    r.id = field<std::int64_t>(obj, "id", origin, line_no);
    r.tracklet = field<std::int64_t>(obj, "tracklet", origin, line_no);
    r.camera = field<std::int64_t>(obj, "camera", origin, line_no);
    r.scene = field<std::int64_t>(obj, "scene", origin, line_no);
    r.w = field<std::size_t>(obj, "w", origin, line_no);
    r.h = field<std::size_t>(obj, "h", origin, line_no);
    m.records.push_back(std::move(r));
  }
  if (!header) throw FormatError(origin + ": missing header line");
  return m;
}

std::string format_manifest(const Manifest& manifest) {
  std::string out;
  ordered_json header;
  header["attributes"] = manifest.attributes;
  header["version"] = 1;
  out += header.dump() + "\n";
  for (const auto& r : manifest.records) {
    if (r.attrs.size() != manifest.attributes.size()) {
      throw FormatError("record " + r.path + " has " + std::to_string(r.attrs.size()) + " attribute bits, expected " +
                        std::to_string(manifest.attributes.size()));
    }
    ordered_json line;
    line["path"] = r.path;
    line["attrs"] = std::vector<int>(r.attrs.begin(), r.attrs.end());
    line["id"] = r.id;
    line["tracklet"] = r.tracklet;
    line["camera"] = r.camera;
    line["scene"] = r.scene;
    line["w"] = r.w;
    line["h"] = r.h;
    out += line.dump() + "\n";
  }
  return out;
}

Manifest read_manifest(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_manifest(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), path.string());
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  write_file_atomic(path, format_manifest(manifest));
}

}  // namespace hydra::data
