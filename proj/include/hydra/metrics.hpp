#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hydra/datakit.hpp"
#include "hydra/hpnet.hpp"

namespace hydra::metrics {

struct AttributePredictions {
  std::size_t n = 0;
  std::size_t m = 0;
  std::vector<double> probabilities;  // n x m in [0,1]
  std::vector<std::uint8_t> labels;   // n x m bits
  double threshold = 0.5;

  void validate() const;
  std::vector<std::uint8_t> predicted() const;  // probability >= threshold
};

// Label-based mean accuracy over already-thresholded bits. An attribute
// lacking positives (or negatives) scores its one defined half-term; its
// index is appended to `one_sided` when given.
double mean_accuracy(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> predicted, std::size_t n,
                     std::size_t m, std::vector<std::size_t>* one_sided = nullptr);
double mean_accuracy(const AttributePredictions& preds, std::vector<std::size_t>* one_sided = nullptr);

struct InstanceMetrics {
  double accuracy = 0;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

// Example-based set metrics. Empty sets: |f| = 0 gives a precision term of 1
// when |Y| = 0 and 0 otherwise, recall symmetrically, and |Y u f| = 0 gives an
// accuracy term of 1. F1 is taken from the mean precision and recall and is
// 0 when both are 0.
InstanceMetrics instance_metrics(std::span<const std::uint8_t> labels, std::span<const std::uint8_t> predicted,
                                 std::size_t n, std::size_t m);
InstanceMetrics instance_metrics(const AttributePredictions& preds);

// a.b / (|a||b|); a zero vector yields 0 and sets *degenerate.
double cosine_similarity(std::span<const float> a, std::span<const float> b, bool* degenerate = nullptr);

struct ReidSet {
  std::size_t dim = 0;
  std::vector<float> embeddings;  // count x dim
  std::vector<std::int64_t> ids;
  std::vector<std::int64_t> cameras;

  std::size_t size() const { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {embeddings.data() + i * dim, dim}; }
};

struct CmcOptions {
  std::vector<std::size_t> ranks{1, 5, 10, 20};
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  // Rank against every gallery image once instead of sampling one image per
  // identity per trial.
  bool fixed_gallery = false;
};

// Mean over trials and probes of [true identity within the top r]. Gallery
// order after sorting by descending similarity is stable in gallery index,
// so ties favour earlier entries. Throws ProtocolError naming any probe
// identity absent from the gallery.
std::map<std::size_t, double> cmc_single_query(const ReidSet& probes, const ReidSet& gallery,
                                               const CmcOptions& options);

struct MetricsReport {
  std::string task;
  std::optional<double> mA, accuracy, precision, recall, f1;
  std::map<std::size_t, double> cmc;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;  // not serialized

  std::string to_json() const;
};

// Eval-mode forward over the split; thresholds sigmoid(logits) at `threshold`.
MetricsReport evaluate_attributes(const net::NetworkParams& params, const net::HPNetConfig& config,
                                  const data::LoadedSplit& split, double threshold = 0.5,
                                  std::size_t batch_size = 64);

// Embeddings in eval mode; camera 0 images are probes, the rest gallery.
ReidSet embed(const net::NetworkParams& params, const net::HPNetConfig& config, const data::LoadedSplit& split,
              std::size_t batch_size = 64);
MetricsReport evaluate_reid(const net::NetworkParams& params, const net::HPNetConfig& config,
                            const data::LoadedSplit& split, const CmcOptions& options);

// Header (u32 count, u32 dim) then little-endian f32 rows, plus a JSON-lines
// sidecar with {"id", "camera"} per row at `path` + ".ids.jsonl".
void write_embeddings(const ReidSet& set, const std::filesystem::path& path);

}  // namespace hydra::metrics
