#include <algorithm>
#include <json.hpp>
#include <numeric>
#include <set>

#include "hydra/datakit.hpp"
#include "hydra/errors.hpp"
#include "hydra/random.hpp"

namespace hydra::data {

using ordered_json = nlohmann::ordered_json;

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw UsageError("unknown split '" + std::string(name) + "' (expected train, val or test)");
}

std::vector<std::size_t> SplitAssignment::indices(const Manifest& manifest, Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    auto it = tracklets.find(manifest.records[i].tracklet);
    if (it == tracklets.end()) {
      throw FormatError("tracklet " + std::to_string(manifest.records[i].tracklet) + " missing from split");
    }
    if (it->second == split) out.push_back(i);
  }
  return out;
}

namespace {

// Largest-remainder apportionment of `total` by `ratio`.
std::array<std::size_t, 3> apportion(std::size_t total, const std::array<std::size_t, 3>& ratio) {
  const std::size_t denom = ratio[0] + ratio[1] + ratio[2];
  std::array<std::size_t, 3> counts{};
  std::array<std::size_t, 3> rem{};
  std::size_t used = 0;
  for (std::size_t s = 0; s < 3; ++s) {
    counts[s] = total * ratio[s] / denom;
    rem[s] = total * ratio[s] % denom;
    used += counts[s];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; used < total; ++i, ++used) ++counts[order[i % 3]];
  return counts;
}

// Attributes lacking a positive or a negative in some split.
std::vector<std::size_t> uncovered(const Manifest& m, const std::map<std::int64_t, Split>& assign) {
  const std::size_t attrs = m.attributes.size();
  std::vector<std::array<std::array<bool, 2>, 3>> seen(attrs);
  for (const auto& r : m.records) {
    const auto s = static_cast<std::size_t>(assign.at(r.tracklet));
    for (std::size_t a = 0; a < attrs; ++a) seen[a][s][r.attrs[a]] = true;
  }
  std::vector<std::size_t> bad;
  for (std::size_t a = 0; a < attrs; ++a) {
    for (const auto& s : seen[a]) {
      if (!s[0] || !s[1]) {
        bad.push_back(a);
        break;
      }
    }
  }
  return bad;
}

std::string attribute_list(const Manifest& m, const std::vector<std::size_t>& idx) {
  std::string out;
  for (auto a : idx) out += (out.empty() ? "" : ", ") + m.attributes[a];
  return out;
}

}  // namespace

SplitAssignment tracklet_split(const Manifest& manifest, std::uint64_t seed, std::array<std::size_t, 3> ratio,
                               std::size_t max_attempts) {
  if (ratio[0] + ratio[1] + ratio[2] == 0) throw ConfigError("split ratio must not be all zero");
  std::set<std::int64_t> unique;
  std::map<std::int64_t, std::int64_t> owner;
  for (const auto& r : manifest.records) {
    unique.insert(r.tracklet);
    auto [it, fresh] = owner.emplace(r.tracklet, r.id);
    if (!fresh && it->second != r.id) {
      throw FormatError("tracklet " + std::to_string(r.tracklet) + " mixes identities");
    }
  }
  if (unique.size() < 10) {
    throw InfeasibleError("tracklet split needs at least 10 tracklets, found " + std::to_string(unique.size()));
  }

  // An attribute is splittable only if positives and negatives each span at
  // least three tracklets.
  std::vector<std::size_t> sparse;
  for (std::size_t a = 0; a < manifest.attributes.size(); ++a) {
    std::set<std::int64_t> pos, neg;
    for (const auto& r : manifest.records) (r.attrs[a] ? pos : neg).insert(r.tracklet);
    if (pos.size() < 3 || neg.size() < 3) sparse.push_back(a);
  }
  if (!sparse.empty()) {
    throw InfeasibleError("attributes without positives and negatives over three tracklets: " +
                          attribute_list(manifest, sparse));
  }

  const std::vector<std::int64_t> ids(unique.begin(), unique.end());
  const auto counts = apportion(ids.size(), ratio);
  std::vector<std::size_t> last_bad;
  for (std::size_t attempt = 0; attempt < max_attempts; ++attempt) {
    Engine eng = make_engine(seed, "tracklet-split-" + std::to_string(attempt));
    auto order = ids;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(eng, i)]);
    SplitAssignment out;
    out.seed = seed;
    out.ratio = ratio;
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t c = 0; c < counts[s]; ++c) out.tracklets[order[pos++]] = static_cast<Split>(s);
    }
    last_bad = uncovered(manifest, out.tracklets);
    if (last_bad.empty()) return out;
  }
  throw InfeasibleError("no split within " + std::to_string(max_attempts) +
                        " attempts covers positives and negatives of: " + attribute_list(manifest, last_bad));
}

std::string format_split(const SplitAssignment& split) {
  ordered_json j;
  for (const auto& [t, s] : split.tracklets) j[std::to_string(t)] = split_name(s);
  j["seed"] = split.seed;
  j["ratio"] = split.ratio;
  return j.dump(1) + "\n";
}

SplitAssignment parse_split_file(std::string_view text, const std::string& origin) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(origin + ": invalid split JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw FormatError(origin + ": split file must be a JSON object");
  SplitAssignment out;
  try {
    out.seed = j.at("seed").get<std::uint64_t>();
    out.ratio = j.at("ratio").get<std::array<std::size_t, 3>>();
    for (const auto& [key, value] : j.items()) {
      if (key == "seed" || key == "ratio") continue;
      std::size_t used = 0;
      const auto id = std::stoll(key, &used);
      if (used != key.size()) throw FormatError(origin + ": bad tracklet key '" + key + "'");
      out.tracklets[id] = parse_split(value.get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": malformed split file (" + e.what() + ")");
  } catch (const std::invalid_argument&) {
    throw FormatError(origin + ": tracklet keys must be integers");
  } catch (const UsageError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  return out;
}

void write_split(const SplitAssignment& split, const std::filesystem::path& path) {
  write_file_atomic(path, format_split(split));
}

SplitAssignment read_split(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_split_file(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                          path.string());
}

ReidSplit reid_identity_split(const Manifest& manifest, std::uint64_t seed, double train_fraction) {
  if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train_fraction must lie in (0,1)");
  std::set<std::int64_t> unique;
  for (const auto& r : manifest.records) unique.insert(r.id);
  std::vector<std::int64_t> ids(unique.begin(), unique.end());
  if (ids.size() < 2) throw InfeasibleError("re-identification split needs at least two identities");
  Engine eng = make_engine(seed, "reid-split");
  for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[uniform_index(eng, i)]);
  auto n_train = static_cast<std::size_t>(static_cast<double>(ids.size()) * train_fraction + 0.5);
  n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - 1);
  const std::set<std::int64_t> train_ids(ids.begin(), ids.begin() + static_cast<long>(n_train));
  ReidSplit out;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    (train_ids.count(manifest.records[i].id) ? out.train : out.test).push_back(i);
  }
  return out;
}

}  // namespace hydra::data
