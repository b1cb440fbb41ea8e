#include <algorithm>
#include <cmath>
#include <cstdio>
#include <json.hpp>

#include "hydra/datakit.hpp"
#include "hydra/errors.hpp"
#include "hydra/parallel.hpp"
#include "hydra/random.hpp"

namespace hydra::data {

using ordered_json = nlohmann::ordered_json;

std::string_view level_name(Level level) {
  switch (level) {
    case Level::kTexture: return "texture";
    case Level::kObject: return "object";
    case Level::kGlobal: return "global";
  }
  return "texture";
}

Level parse_level(std::string_view name) {
  if (name == "texture") return Level::kTexture;
  if (name == "object") return Level::kObject;
  if (name == "global") return Level::kGlobal;
  throw ConfigError("unknown attribute level '" + std::string(name) + "'");
}

namespace {

Level pattern_level(const std::string& pattern) {
  if (pattern == "hstripes_upper" || pattern == "vstripes_upper" || pattern == "checker_lower") {
    return Level::kTexture;
  }
  if (pattern == "blob_head" || pattern == "blob_hip" || pattern == "blob_feet") return Level::kObject;
  if (pattern == "tint_warm" || pattern == "tint_green") return Level::kGlobal;
  throw ConfigError("unknown attribute pattern '" + pattern + "'");
}

}  // namespace

SynthSpec SynthSpec::defaults() {
  SynthSpec s;
  s.attributes = {
      {"upper_hstripes", Level::kTexture, "hstripes_upper", 0.45, 0.22, 4},
      {"upper_vstripes", Level::kTexture, "vstripes_upper", 0.35, 0.22, 4},
      {"lower_checker", Level::kTexture, "checker_lower", 0.4, 0.22, 4},
      {"hat", Level::kObject, "blob_head", 0.4, 0.0, 6},
      {"bag", Level::kObject, "blob_hip", 0.45, 0.0, 7},
      {"shoes", Level::kObject, "blob_feet", 0.35, 0.0, 5},
      {"warm_light", Level::kGlobal, "tint_warm", 0.5, 0.2, 0},
      {"green_cast", Level::kGlobal, "tint_green", 0.3, 0.2, 0},
  };
  return s;
}

SynthSpec SynthSpec::reid_defaults() {
  SynthSpec s = defaults();
  s.num_identities = 100;
  s.images_per_tracklet = 5;
  s.attributes_per_identity = true;
  return s;
}

void SynthSpec::validate() const {
  if (num_identities == 0 || cameras == 0 || images_per_tracklet == 0) {
    throw ConfigError("synthetic spec needs positive identity, camera and image counts");
  }
  if (height < 32 || width < 32) throw ConfigError("synthetic images must be at least 32x32");
  if (attributes.empty()) throw ConfigError("synthetic spec declares no attributes");
  for (const auto& a : attributes) {
    if (!(a.positive_rate > 0 && a.positive_rate < 1)) {
      throw ConfigError("attribute '" + a.name + "' positive_rate must lie in (0,1)");
    }
    if (pattern_level(a.pattern) != a.level) {
      throw ConfigError("attribute '" + a.name + "' pattern " + a.pattern + " is not a " +
                        std::string(level_name(a.level)) + " pattern");
    }
    if (a.level != Level::kGlobal && a.size == 0) throw ConfigError("attribute '" + a.name + "' needs size > 0");
    if (a.contrast < 0 || a.contrast > 0.5) throw ConfigError("attribute '" + a.name + "' contrast must be in [0,0.5]");
  }
  if (brightness_jitter < 0 || brightness_jitter >= 1) throw ConfigError("brightness_jitter must be in [0,1)");
  if (shift_jitter < 0 || shift_jitter >= 0.5) throw ConfigError("shift_jitter must be in [0,0.5)");
  if (max_noise < 0) throw ConfigError("max_noise must be nonnegative");
}

namespace {

constexpr double kBlobOffset = 0.45;

struct Identity {
  std::array<double, 3> upper, lower, skin;
  double build;   // torso/leg width factor
  double stature; // vertical extent factor
};

Identity make_identity(std::uint64_t seed, std::size_t id) {
  Engine eng = make_engine(seed, "identity-" + std::to_string(id));
  Identity p;
  for (auto& c : p.upper) c = uniform(eng, 0.2, 0.8);
  for (auto& c : p.lower) c = uniform(eng, 0.2, 0.8);
  const double tone = uniform(eng, 0.35, 0.8);
  p.skin = {tone, tone * 0.8, tone * 0.65};
  p.build = uniform(eng, 0.85, 1.15);
  p.stature = uniform(eng, 0.92, 1.04);
  return p;
}

std::array<double, 3> scene_color(std::uint64_t seed, std::size_t camera) {
  Engine eng = make_engine(seed, "camera-" + std::to_string(camera));
  return {uniform(eng, 0.3, 0.6), uniform(eng, 0.3, 0.6), uniform(eng, 0.3, 0.6)};
}

struct Canvas {
  std::size_t w, h;
  std::vector<double> px;  // h*w*3
  double* at(long y, long x) {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return nullptr;
    return &px[(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3];
  }
};

struct Box {
  long y0, y1, x0, x1;  // half-open
  bool contains(long y, long x) const { return y >= y0 && y < y1 && x >= x0 && x < x1; }
};

}  // namespace

Raster render_sample(const SynthSpec& spec, std::size_t identity, std::size_t camera, std::size_t index,
                     std::span<const std::uint8_t> attrs) {
  if (attrs.size() != spec.attributes.size()) throw ShapeError("render_sample: attribute count mismatch");
  const Identity who = make_identity(spec.seed, identity);
  Engine eng = make_engine(spec.seed, "image-" + std::to_string(identity) + "-" + std::to_string(camera) + "-" +
                                          std::to_string(index));
  const double H = static_cast<double>(spec.height), W = static_cast<double>(spec.width);
  Canvas cv{spec.width, spec.height, std::vector<double>(spec.width * spec.height * 3)};

  const auto bg = scene_color(spec.seed, camera);
  for (std::size_t y = 0; y < spec.height; ++y) {
    const double shade = 0.85 + 0.3 * static_cast<double>(y) / H;  // floor darker than sky
    for (std::size_t x = 0; x < spec.width; ++x) {
      double* p = cv.at(static_cast<long>(y), static_cast<long>(x));
      for (int c = 0; c < 3; ++c) p[c] = bg[c] * shade;
    }
  }

  const double dx = uniform(eng, -spec.shift_jitter, spec.shift_jitter) * W;
  const double dy = uniform(eng, -spec.shift_jitter, spec.shift_jitter) * H * 0.5;
  const double cx = 0.5 * W + dx;
  const double top = 0.06 * H + dy;
  const double unit = H * who.stature;
  const long head_r = std::lround(0.06 * unit);
  const long head_cy = std::lround(top + 0.08 * unit);
  const long torso_half = std::lround(0.2 * W * who.build);
  const Box torso{std::lround(top + 0.15 * unit), std::lround(top + 0.5 * unit), std::lround(cx) - torso_half,
                  std::lround(cx) + torso_half};
  const long leg_w = std::lround(0.14 * W * who.build);
  const long gap = std::max(1L, std::lround(0.03 * W));
  const Box leg_l{torso.y1, std::lround(top + 0.88 * unit), std::lround(cx) - gap - leg_w, std::lround(cx) - gap};
  const Box leg_r{torso.y1, leg_l.y1, std::lround(cx) + gap, std::lround(cx) + gap + leg_w};

  // Texture parameters by attribute.
  const auto find = [&](const char* pattern) -> const AttributePlan* {
    for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
      if (spec.attributes[a].pattern == pattern && attrs[a]) return &spec.attributes[a];
    }
    return nullptr;
  };
  const AttributePlan* hstripes = find("hstripes_upper");
  const AttributePlan* vstripes = find("vstripes_upper");
  const AttributePlan* checker = find("checker_lower");
  const auto phase = static_cast<long>(uniform_index(eng, 8));

  // Head.
  for (long y = head_cy - head_r; y <= head_cy + head_r; ++y) {
    for (long x = std::lround(cx) - head_r; x <= std::lround(cx) + head_r; ++x) {
      const double ry = static_cast<double>(y - head_cy), rx = static_cast<double>(x) - cx;
      if (rx * rx + ry * ry > static_cast<double>(head_r * head_r)) continue;
      if (double* p = cv.at(y, x)) std::copy(who.skin.begin(), who.skin.end(), p);
    }
  }
  // Torso with optional stripes; the +/- modulation keeps the region mean.
  for (long y = torso.y0; y < torso.y1; ++y) {
    for (long x = torso.x0; x < torso.x1; ++x) {
      double* p = cv.at(y, x);
      if (!p) continue;
      double mod = 0;
      if (hstripes) {
        const long period = static_cast<long>(hstripes->size);
        mod += (((y - torso.y0 + phase) / period) % 2 ? 1.0 : -1.0) * hstripes->contrast;
      }
      if (vstripes) {
        const long period = static_cast<long>(vstripes->size);
        mod += (((x - torso.x0 + phase) / period) % 2 ? 1.0 : -1.0) * vstripes->contrast;
      }
      for (int c = 0; c < 3; ++c) p[c] = who.upper[c] + mod;
    }
  }
  for (const Box& leg : {leg_l, leg_r}) {
    for (long y = leg.y0; y < leg.y1; ++y) {
      for (long x = leg.x0; x < leg.x1; ++x) {
        double* p = cv.at(y, x);
        if (!p) continue;
        double mod = 0;
        if (checker) {
          const long cell = static_cast<long>(checker->size);
          mod = ((((y - leg.y0 + phase) / cell) + ((x - leg.x0) / cell)) % 2 ? 1.0 : -1.0) * checker->contrast;
        }
        for (int c = 0; c < 3; ++c) p[c] = who.lower[c] + mod;
      }
    }
  }

  // Objects: square blobs of random polarity at fixed body zones.
  for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
    const auto& plan = spec.attributes[a];
    if (plan.level != Level::kObject) continue;
    const bool bright = uniform_index(eng, 2) == 1;  // drawn for negatives too, keeps streams aligned
    if (!attrs[a]) continue;
    const long s = static_cast<long>(plan.size);
    long by = 0, bx = 0;
    if (plan.pattern == "blob_head") {
      by = head_cy - head_r - s / 2;
      bx = std::lround(cx) - s / 2;
    } else if (plan.pattern == "blob_hip") {
      by = std::lround(top + 0.4 * unit);
      bx = torso.x1 - s / 2;
    } else {
      by = leg_l.y1 - s / 2;
      bx = leg_l.x0 + (leg_w - s) / 2;
    }
    // An offset rather than a fixed value keeps the zone's mean close to a
    // negative's, so raw pixel intensity alone does not reveal the blob.
    const double delta = bright ? kBlobOffset : -kBlobOffset;
    for (long y = by; y < by + s; ++y) {
      for (long x = bx; x < bx + s; ++x) {
        if (double* p = cv.at(y, x)) {
          for (int c = 0; c < 3; ++c) p[c] = std::clamp(p[c] + delta, 0.0, 1.0);
        }
      }
    }
  }

  // Global tints.
  std::array<double, 3> gain{1, 1, 1};
  for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
    const auto& plan = spec.attributes[a];
    if (plan.level != Level::kGlobal || !attrs[a]) continue;
    if (plan.pattern == "tint_warm") {
      gain[0] *= 1 + plan.contrast;
      gain[2] *= 1 - plan.contrast;
    } else {
      gain[1] *= 1 + plan.contrast;
      gain[0] *= 1 - plan.contrast / 2;
      gain[2] *= 1 - plan.contrast / 2;
    }
  }

  const double brightness = uniform(eng, 1 - spec.brightness_jitter, 1 + spec.brightness_jitter);
  const double sigma = uniform(eng, 0, spec.max_noise);
  std::normal_distribution<double> noise(0, 1);
  Raster r{spec.width, spec.height, 3, std::vector<std::uint8_t>(spec.width * spec.height * 3)};
  for (std::size_t i = 0; i < cv.px.size(); ++i) {
    const double v = cv.px[i] * gain[i % 3] * brightness + sigma * noise(eng);
    r.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
  }
  return r;
}

Manifest plan_synthetic(const SynthSpec& spec) {
  spec.validate();
  Manifest m;
  for (const auto& a : spec.attributes) m.attributes.push_back(a.name);
  const std::size_t M = spec.attributes.size();

  auto draw_bits = [&](Engine& eng) {
    std::vector<std::uint8_t> bits(M);
    for (std::size_t a = 0; a < M; ++a) bits[a] = uniform(eng, 0, 1) < spec.attributes[a].positive_rate;
    return bits;
  };

  std::size_t serial = 0;
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    Engine id_eng = make_engine(spec.seed, "identity-attrs-" + std::to_string(id));
    const auto identity_bits = draw_bits(id_eng);
    for (std::size_t cam = 0; cam < spec.cameras; ++cam) {
      for (std::size_t k = 0; k < spec.images_per_tracklet; ++k) {
        Engine eng = make_engine(spec.seed, "labels-" + std::to_string(id) + "-" + std::to_string(cam) + "-" +
                                                std::to_string(k));
        char name[32];
        std::snprintf(name, sizeof name, "images/%06zu.ppm", serial++);
        SampleRecord r;
        r.path = name;
        r.attrs = spec.attributes_per_identity ? identity_bits : draw_bits(eng);
        r.id = static_cast<std::int64_t>(id);
        r.tracklet = static_cast<std::int64_t>(id * spec.cameras + cam);
        r.camera = static_cast<std::int64_t>(cam);
        r.scene = static_cast<std::int64_t>(cam);
        r.w = spec.width;
        r.h = spec.height;
        m.records.push_back(std::move(r));
      }
    }
  }
  return m;
}

Manifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir) {
  Manifest m = plan_synthetic(spec);
  std::filesystem::create_directories(out_dir / "images");
  const std::size_t per_identity = spec.cameras * spec.images_per_tracklet;
  parallel_for(m.records.size(), [&](std::size_t i) {
    const std::size_t id = i / per_identity;
    const std::size_t cam = (i % per_identity) / spec.images_per_tracklet;
    const std::size_t k = i % spec.images_per_tracklet;
    write_pnm(out_dir / m.records[i].path, render_sample(spec, id, cam, k, m.records[i].attrs));
  });
  write_manifest(m, out_dir / "manifest.jsonl");
  return m;
}

std::string format_synth_spec(const SynthSpec& spec) {
  ordered_json j;
  j["num_identities"] = spec.num_identities;
  j["cameras"] = spec.cameras;
  j["images_per_tracklet"] = spec.images_per_tracklet;
  j["height"] = spec.height;
  j["width"] = spec.width;
  j["attributes_per_identity"] = spec.attributes_per_identity;
  j["brightness_jitter"] = spec.brightness_jitter;
  j["shift_jitter"] = spec.shift_jitter;
  j["max_noise"] = spec.max_noise;
  j["seed"] = spec.seed;
  j["attributes"] = ordered_json::array();
  for (const auto& a : spec.attributes) {
    j["attributes"].push_back({{"name", a.name},
                               {"level", level_name(a.level)},
                               {"pattern", a.pattern},
                               {"positive_rate", a.positive_rate},
                               {"contrast", a.contrast},
                               {"size", a.size}});
  }
  return j.dump(2) + "\n";
}

SynthSpec parse_synth_spec(std::string_view text, const std::string& origin) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw ConfigError(origin + ": synthetic spec must be a JSON object");
  SynthSpec s = SynthSpec::defaults();
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "num_identities") s.num_identities = v.get<std::size_t>();
      else if (key == "cameras") s.cameras = v.get<std::size_t>();
      else if (key == "images_per_tracklet") s.images_per_tracklet = v.get<std::size_t>();
      else if (key == "height") s.height = v.get<std::size_t>();
      else if (key == "width") s.width = v.get<std::size_t>();
      else if (key == "attributes_per_identity") s.attributes_per_identity = v.get<bool>();
      else if (key == "brightness_jitter") s.brightness_jitter = v.get<double>();
      else if (key == "shift_jitter") s.shift_jitter = v.get<double>();
      else if (key == "max_noise") s.max_noise = v.get<double>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else if (key == "attributes") {
        s.attributes.clear();
        for (const auto& a : v) {
          AttributePlan p;
          p.name = a.at("name").get<std::string>();
          p.pattern = a.at("pattern").get<std::string>();
          p.level = a.contains("level") ? parse_level(a.at("level").get<std::string>()) : pattern_level(p.pattern);
          p.positive_rate = a.value("positive_rate", 0.5);
          p.contrast = a.value("contrast", p.level == Level::kObject ? 0.0 : 0.2);
          p.size = a.value("size", std::size_t{4});
          s.attributes.push_back(std::move(p));
        }
      } else {
        throw ConfigError(origin + ": unknown synthetic spec field '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(origin + ": malformed synthetic spec (" + e.what() + ")");
  }
  s.validate();
  return s;
}

}  // namespace hydra::data
