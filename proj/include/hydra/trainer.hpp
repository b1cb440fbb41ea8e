#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "hydra/datakit.hpp"
#include "hydra/hpnet.hpp"

namespace hydra::train {

struct LossSpec {
  enum class Kind { kWeightedBce, kIdentitySoftmax };
  Kind kind = Kind::kWeightedBce;
  std::vector<double> ratios;  // per-attribute positive ratio on the training split
  double sigma = 1.0;

  // Ratios measured on `labels` (N x M row-major).
  static LossSpec from_labels(std::span<const std::uint8_t> labels, std::size_t num_attributes,
                              double sigma = 1.0);
  static LossSpec identity() { return {Kind::kIdentitySoftmax, {}, 1.0}; }
  // Throws ConfigError when a ratio lies outside (0,1) or sigma <= 0.
  void validate() const;
  std::vector<double> positive_weights() const;  // exp((1 - r) / sigma^2)
  std::vector<double> negative_weights() const;  // exp(r / sigma^2)
};

// Mean over samples and attributes of w(y) * BCE(sigmoid(logit), y).
Tensor weighted_attribute_loss(const Tensor& logits, std::span<const std::uint8_t> labels, const LossSpec& spec);

struct StageHyper {
  std::size_t epochs = 0;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t lr_step = 0;  // epochs between decays; 0 disables decay
  double lr_decay = 0.1;
  double weight_decay = 0.0;

  double lr_at(std::size_t epoch) const;
  void validate(const std::string& stage) const;
};

struct TrainHyper {
  StageHyper stage1{8, 0.05, 0.9, 32, 6, 0.1, 1e-4};
  StageHyper stage2{2, 0.02, 0.9, 32, 0, 0.1, 1e-4};
  StageHyper stage3{30, 0.02, 0.9, 64, 20, 0.1, 1e-3};
};

// Stage ids: "1", "2a", "2b", "2c", "3".
std::string stage2_id(std::size_t module);

struct StagePlan {
  std::string id;
  std::set<std::string> trainable;
  std::set<std::string> frozen;
  LossSpec::Kind loss = LossSpec::Kind::kWeightedBce;
  StageHyper hyper;
};

// Which existing parameters a stage may touch. Temporary heads are not part
// of `params` and therefore not listed. Running statistics are never
// trainable.
StagePlan plan_stage(const net::NetworkParams& params, const net::HPNetConfig& config, const std::string& id,
                     const StageHyper& hyper);

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;  // 1-based
  double loss = 0;
  double lr = 0;
  std::uint64_t seed = 0;
  double wall_ms = 0;
};

// JSON-lines training log; each record is flushed as it is written.
class TrainLog {
 public:
  TrainLog() = default;
  explicit TrainLog(const std::filesystem::path& path);
  void write(const EpochRecord& record);
  const std::vector<EpochRecord>& records() const { return records_; }

 private:
  std::filesystem::path path_;
  std::vector<EpochRecord> records_;
};

struct StageReport {
  std::vector<double> epoch_loss;
};

// Momentum SGD over the named tensors: v <- mu v + g (+ wd p); p <- p - lr v.
class Sgd {
 public:
  void step(net::NetworkParams& params, const std::vector<std::string>& names, double lr, double momentum,
            double weight_decay = 0.0);
  void step(std::map<std::string, Tensor>& tensors, double lr, double momentum, double weight_decay = 0.0);

 private:
  std::map<std::string, std::vector<float>> velocity_;
};

// One plain update, exposed for tests: returns updated values and velocity.
void sgd_update(std::span<float> param, std::span<const float> grad, std::span<float> velocity, double lr,
                double momentum, double weight_decay = 0.0);

struct TrainContext {
  std::uint64_t seed = 1;
  TrainLog* log = nullptr;
};

// Stage 1: a fresh M-net plus a temporary GAP+FC head, trained on the task
// loss. The head is dropped before returning; the result carries marker "1".
net::NetworkParams stage1_train(const net::HPNetConfig& config, const data::LoadedSplit& train,
                                const LossSpec& loss, const StageHyper& hyper, const TrainContext& ctx,
                                StageReport* report = nullptr);

// Copies the M-net into afnet{i} for every enabled mask row and appends
// fresh attention generators. Requires marker "1".
net::NetworkParams construct_afnet(const net::NetworkParams& mnet, const net::HPNetConfig& config,
                                   std::uint64_t seed);

// Stage 2 for MDA module i (1..3): trains att{i} and, for every enabled
// direction k, blocks k+1..3 of afnet{i}, through a temporary head on the
// module's vector. Everything else stays bit-identical.
void stage2_finetune(net::NetworkParams& params, const net::HPNetConfig& config, std::size_t module,
                     const data::LoadedSplit& train, const LossSpec& loss, const StageHyper& hyper,
                     const TrainContext& ctx, StageReport* report = nullptr);

// Stage 3: appends fresh fusion and head layers and trains only those, on
// features computed once with every convolutional layer frozen.
void stage3_train_fusion(net::NetworkParams& params, const net::HPNetConfig& config,
                         const data::LoadedSplit& train, const LossSpec& loss, const StageHyper& hyper,
                         const TrainContext& ctx, StageReport* report = nullptr);

// Trained results shared between runs that use the same seed, data and
// hyperparameters but different connectivity masks. Stage 2 of module i only
// depends on mask row i, so it is keyed by module and row.
struct PipelineCache {
  std::optional<net::NetworkParams> stage1;
  std::map<std::string, net::NetworkParams> modules;
};

// Stage 1, AF-net construction, stage 2 for every enabled module and stage 3.
net::NetworkParams train_all(const net::HPNetConfig& config, const data::LoadedSplit& train, const LossSpec& loss,
                             const TrainHyper& hyper, const TrainContext& ctx, PipelineCache* cache = nullptr);

// Throws StageOrderError unless every stage preceding `stage` is recorded.
void require_stages_before(const net::NetworkParams& params, const net::HPNetConfig& config,
                           const std::string& stage);

// Eval-mode fused features of all rows, in batches.
Tensor compute_fused(const net::NetworkParams& params, const net::HPNetConfig& config, const Tensor& images,
                     std::size_t batch_size = 64);

// Identity labels remapped to 0..K-1 in order of first appearance sorted by id.
std::vector<int> dense_identity_labels(std::span<const std::int64_t> ids, std::size_t* classes = nullptr);

// Binary checkpoint; see the format notes in the README.
inline constexpr std::uint32_t kCheckpointVersion = 1;
std::vector<std::uint8_t> encode_checkpoint(const net::NetworkParams& params);
net::NetworkParams decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");
void save_checkpoint(const net::NetworkParams& params, const std::filesystem::path& path);
net::NetworkParams load_checkpoint(const std::filesystem::path& path);

}  // namespace hydra::train
