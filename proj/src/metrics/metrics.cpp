#include "hydra/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "hydra/errors.hpp"
#include "hydra/random.hpp"
#include "hydra/raster.hpp"
#include "hydra/trainer.hpp"

namespace hydra::metrics {

namespace {

void check_sizes(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> predicted, std::size_t n,
                 std::size_t m) {
  if (n == 0 || m == 0) throw UsageError("metrics need at least one sample and one attribute");
  if (labels.size() != n * m || predicted.size() != n * m) {
    throw ShapeError("metrics: expected " + std::to_string(n * m) + " labels and predictions, got " +
                     std::to_string(labels.size()) + " and " + std::to_string(predicted.size()));
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>(v >> (8 * b)));
}

}  // namespace

void AttributePredictions::validate() const {
  if (probabilities.size() != n * m || labels.size() != n * m) {
    throw ShapeError("attribute predictions: expected " + std::to_string(n * m) + " entries");
  }
  for (double p : probabilities) {
    if (!(p >= 0.0 && p <= 1.0)) throw NumericError("attribute predictions: probability outside [0,1]");
  }
  for (auto b : labels) {
    if (b > 1) throw FormatError("attribute predictions: label is not 0/1");
  }
}

std::vector<std::uint8_t> AttributePredictions::predicted() const {
  std::vector<std::uint8_t> out(probabilities.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = probabilities[i] >= threshold ? 1 : 0;
  return out;
}

double mean_accuracy(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> predicted, std::size_t n,
                     std::size_t m, std::vector<std::size_t>* one_sided) {
  check_sizes(labels, predicted, n, m);
  long double total = 0.0L;
  for (std::size_t j = 0; j < m; ++j) {
    std::size_t pos = 0, neg = 0, tp = 0, tn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const bool y = labels[i * m + j] != 0;
      const bool f = predicted[i * m + j] != 0;
      if (y) {
        ++pos;
        tp += f ? 1 : 0;
      } else {
        ++neg;
        tn += f ? 0 : 1;
      }
    }
    if (pos > 0 && neg > 0) {
      total += 0.5L * (static_cast<long double>(tp) / pos + static_cast<long double>(tn) / neg);
    } else {
      total += pos > 0 ? static_cast<long double>(tp) / pos : static_cast<long double>(tn) / neg;
      if (one_sided) one_sided->push_back(j);
    }
  }
  return static_cast<double>(total / m);
}

double mean_accuracy(const AttributePredictions& preds, std::vector<std::size_t>* one_sided) {
  preds.validate();
  return mean_accuracy(preds.labels, preds.predicted(), preds.n, preds.m, one_sided);
}

InstanceMetrics instance_metrics(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> predicted,
                                 std::size_t n, std::size_t m) {
  check_sizes(labels, predicted, n, m);
  // Extended-precision sums, rounded once, so rational results such as
  // F1 = 4/7 come out correctly rounded.
  long double acc = 0.0L, prec = 0.0L, rec = 0.0L;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t y = 0, f = 0, both = 0;
    for (std::size_t j = 0; j < m; ++j) {
      const bool yj = labels[i * m + j] != 0;
      const bool fj = predicted[i * m + j] != 0;
      y += yj;
      f += fj;
      both += yj && fj;
    }
    const std::size_t uni = y + f - both;
    acc += uni == 0 ? 1.0L : static_cast<long double>(both) / uni;
    prec += f == 0 ? (y == 0 ? 1.0L : 0.0L) : static_cast<long double>(both) / f;
    rec += y == 0 ? (f == 0 ? 1.0L : 0.0L) : static_cast<long double>(both) / y;
  }
  acc /= n;
  prec /= n;
  rec /= n;
  InstanceMetrics out;
  out.accuracy = static_cast<double>(acc);
  out.precision = static_cast<double>(prec);
  out.recall = static_cast<double>(rec);
  out.f1 = prec + rec == 0.0L ? 0.0 : static_cast<double>(2.0L * prec * rec / (prec + rec));
  return out;
}

InstanceMetrics instance_metrics(const AttributePredictions& preds) {
  preds.validate();
  return instance_metrics(preds.labels, preds.predicted(), preds.n, preds.m);
}

double cosine_similarity(std::span<const float> a, std::span<const float> b, bool* degenerate) {
  if (a.size() != b.size()) {
    throw ShapeError("cosine similarity: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::map<std::size_t, double> cmc_single_query(const ReidSet& probes, const ReidSet& gallery,
                                               const CmcOptions& options) {
  if (probes.size() == 0 || gallery.size() == 0) throw UsageError("CMC needs probes and a gallery");
  if (probes.dim != gallery.dim) throw ShapeError("CMC: probe and gallery embedding sizes differ");
  if (options.ranks.empty()) throw UsageError("CMC: no ranks requested");
  if (!options.fixed_gallery && options.trials == 0) throw UsageError("CMC: trials must be positive");

  std::map<std::int64_t, std::vector<std::size_t>> by_id;
  for (std::size_t g = 0; g < gallery.size(); ++g) by_id[gallery.ids[g]].push_back(g);
  for (auto id : probes.ids) {
    if (!by_id.contains(id)) throw ProtocolError("CMC: probe identity " + std::to_string(id) + " has no gallery image");
  }

  const std::size_t np = probes.size();
  const std::size_t ng = gallery.size();
  std::vector<double> sim(np * ng);
  for (std::size_t p = 0; p < np; ++p) {
    for (std::size_t g = 0; g < ng; ++g) sim[p * ng + g] = cosine_similarity(probes.row(p), gallery.row(g));
  }

  // 1-based rank of the highest-ranked true match within `candidates`
  // (gallery indices in ascending order); ties go to the lower index.
  auto rank_of = [&](std::size_t p, const std::vector<std::size_t>& candidates) {
    const double* s = sim.data() + p * ng;
    std::size_t best = ng;
    for (std::size_t g : candidates) {
      if (gallery.ids[g] == probes.ids[p] && (best == ng || s[g] > s[best])) best = g;
    }
    std::size_t rank = 1;
    for (std::size_t g : candidates) {
      if (g == best) continue;
      if (s[g] > s[best] || (s[g] == s[best] && g < best)) ++rank;
    }
    return rank;
  };

  const std::size_t max_rank = *std::max_element(options.ranks.begin(), options.ranks.end());
  std::vector<double> hits(max_rank + 1, 0.0);
  std::size_t trials = options.fixed_gallery ? 1 : options.trials;
  std::vector<std::size_t> candidates;
  for (std::size_t t = 0; t < trials; ++t) {
    candidates.clear();
    if (options.fixed_gallery) {
      candidates.resize(ng);
      std::iota(candidates.begin(), candidates.end(), 0);
    } else {
      Engine eng = make_engine(options.seed, "cmc-trial-" + std::to_string(t));
      for (const auto& [id, members] : by_id) candidates.push_back(members[uniform_index(eng, members.size())]);
      std::sort(candidates.begin(), candidates.end());
    }
    for (std::size_t p = 0; p < np; ++p) {
      const std::size_t r = rank_of(p, candidates);
      if (r <= max_rank) hits[r] += 1.0;
    }
  }
  std::map<std::size_t, double> out;
  const double denom = static_cast<double>(trials * np);
  for (std::size_t r : options.ranks) {
    if (r == 0) throw UsageError("CMC ranks are 1-based");
    double cum = 0.0;
    for (std::size_t k = 1; k <= r; ++k) cum += hits[k];
    out[r] = cum / denom;
  }
  return out;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  auto put = [&](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
    else j[key] = nullptr;
  };
  put("mA", mA);
  put("accuracy", accuracy);
  put("precision", precision);
  put("recall", recall);
  put("f1", f1);
  // Ranking fields only exist for re-identification reports.
  if (task == "reid") {
    nlohmann::ordered_json cmc_json = nlohmann::ordered_json::object();
    for (const auto& [r, v] : cmc) cmc_json[std::to_string(r)] = v;
    j["cmc"] = cmc_json;
    j["trials"] = trials;
    j["seed"] = seed;
  } else {
    j["cmc"] = nullptr;
    j["trials"] = nullptr;
    j["seed"] = nullptr;
  }
  return j.dump(2) + "\n";
}

MetricsReport evaluate_attributes(const net::NetworkParams& params, const net::HPNetConfig& config,
                                  const data::LoadedSplit& split, double threshold, std::size_t batch_size) {
  if (config.task != net::Task::kAttributes) throw UsageError("evaluate_attributes needs an attribute model");
  if (split.size() == 0) throw UsageError("evaluate_attributes: empty split");
  if (split.num_attributes != config.num_attributes) {
    throw ShapeError("evaluate_attributes: model predicts " + std::to_string(config.num_attributes) +
                     " attributes, data has " + std::to_string(split.num_attributes));
  }
  NoGradGuard guard;
  const Tensor fused = train::compute_fused(params, config, split.images, batch_size);
  const Tensor logits = net::head_forward(params, fused).logits;

  AttributePredictions preds;
  preds.n = split.size();
  preds.m = split.num_attributes;
  preds.labels = split.attrs;
  preds.threshold = threshold;
  preds.probabilities.resize(preds.n * preds.m);
  for (std::size_t i = 0; i < preds.probabilities.size(); ++i) preds.probabilities[i] = sigmoid(logits.data()[i]);

  MetricsReport report;
  report.task = "attributes";
  std::vector<std::size_t> one_sided;
  report.mA = mean_accuracy(preds, &one_sided);
  for (auto j : one_sided) {
    report.warnings.push_back("attribute " + std::to_string(j) + " has only one label value in this split");
  }
  const auto inst = instance_metrics(preds);
  report.accuracy = inst.accuracy;
  report.precision = inst.precision;
  report.recall = inst.recall;
  report.f1 = inst.f1;
  return report;
}

ReidSet embed(const net::NetworkParams& params, const net::HPNetConfig& config, const data::LoadedSplit& split,
              std::size_t batch_size) {
  NoGradGuard guard;
  const Tensor fused = train::compute_fused(params, config, split.images, batch_size);
  const Tensor emb = net::head_forward(params, fused).embedding;
  ReidSet set;
  set.dim = emb.dim(1);
  set.embeddings.assign(emb.data().begin(), emb.data().end());
  set.ids = split.ids;
  set.cameras = split.cameras;
  return set;
}

MetricsReport evaluate_reid(const net::NetworkParams& params, const net::HPNetConfig& config,
                            const data::LoadedSplit& split, const CmcOptions& options) {
  if (split.size() == 0) throw UsageError("evaluate_reid: empty split");
  const ReidSet all = embed(params, config, split);
  ReidSet probes, gallery;
  probes.dim = gallery.dim = all.dim;
  for (std::size_t i = 0; i < all.size(); ++i) {
    ReidSet& dst = all.cameras[i] == 0 ? probes : gallery;
    dst.ids.push_back(all.ids[i]);
    dst.cameras.push_back(all.cameras[i]);
    const auto row = all.row(i);
    dst.embeddings.insert(dst.embeddings.end(), row.begin(), row.end());
  }
  MetricsReport report;
  report.task = "reid";
  std::size_t zero_rows = 0;
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto row = all.row(i);
    if (std::all_of(row.begin(), row.end(), [](float v) { return v == 0.0f; })) ++zero_rows;
  }
  if (zero_rows > 0) {
    report.warnings.push_back(std::to_string(zero_rows) + " zero embeddings; their similarities are 0");
  }
  report.cmc = cmc_single_query(probes, gallery, options);
  report.trials = options.fixed_gallery ? 1 : options.trials;
  report.seed = options.seed;
  return report;
}

void write_embeddings(const ReidSet& set, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(8 + set.embeddings.size() * 4);
  append_u32(bytes, static_cast<std::uint32_t>(set.size()));
  append_u32(bytes, static_cast<std::uint32_t>(set.dim));
  for (float v : set.embeddings) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    append_u32(bytes, u);
  }
  std::ostringstream ids;
  for (std::size_t i = 0; i < set.size(); ++i) {
    nlohmann::ordered_json j;
    j["id"] = set.ids[i];
    j["camera"] = set.cameras[i];
    ids << j.dump() << "\n";
  }
  data::write_file_atomic(path, bytes);
  data::write_file_atomic(std::filesystem::path(path.string() + ".ids.jsonl"), ids.str());
}

}  // namespace hydra::metrics
