#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "hydra/ops.hpp"
#include "hydra/tensor.hpp"

namespace hydra::net {

inline constexpr std::size_t kBlocks = 3;

enum class Task { kAttributes, kReid };

std::string_view task_name(Task task);
Task parse_task(std::string_view name);

// Which (i, k) attention directions exist: mask[i][k] means the attention
// stack generated from block i+1 is applied to the output of block k+1.
struct Connectivity {
  std::array<std::array<bool, kBlocks>, kBlocks> mask{};

  static Connectivity full();
  static Connectivity none();
  // Named ablation layouts: complete, mnet, naive, middle_pruned,
  // one_branch_pruned, two_branches_pruned.
  static Connectivity named(std::string_view name);
  static const std::vector<std::string>& ablation_names();
  // Three row strings separated by commas, e.g. "111,010,001".
  static Connectivity parse(std::string_view text);

  bool row_enabled(std::size_t i) const;
  std::size_t direction_count() const;
  std::string str() const;
  bool operator==(const Connectivity&) const = default;
};

struct HPNetConfig {
  std::size_t stem_channels = 16;
  std::array<std::size_t, kBlocks> block_channels{32, 48, 64};
  std::size_t attention_channels = 8;  // L
  std::size_t num_attributes = 8;
  std::size_t num_identities = 0;  // identity classes for the ReID head
  std::size_t feature_dim = 128;
  Connectivity connectivity = Connectivity::full();
  std::size_t input_height = 96;
  std::size_t input_width = 64;
  Task task = Task::kAttributes;

  // Throws ConfigError on nonpositive sizes or an input too small for the
  // three stride-2 reductions.
  void validate() const;
  std::size_t output_classes() const;
  // Spatial size of block j (1-based) output.
  std::pair<std::size_t, std::size_t> block_resolution(std::size_t j) const;
  // Length of the vector one MDA module contributes under its mask row.
  std::size_t mda_feature_length(std::size_t i) const;
  std::size_t fused_length() const;
};

// Named tensors in lexicographic order, plus the completed-stage markers.
// Tensor handles are shallow; use deep_copy() for an independent snapshot.
class NetworkParams {
 public:
  std::map<std::string, Tensor> entries;
  std::set<std::string> stage_markers;

  bool contains(const std::string& name) const { return entries.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void add(const std::string& name, Tensor value);
  std::vector<std::string> names_with_prefix(std::string_view prefix) const;
  void erase_prefix(std::string_view prefix);
  std::size_t total_values() const;
  NetworkParams deep_copy() const;
  bool bit_equal(const NetworkParams& other) const;
};

// Column name prefixes: "mnet" and "afnet1".."afnet3".
std::string column_prefix(std::size_t column);  // 0 -> mnet, i -> afnet{i}
std::string block_prefix(std::string_view column, std::size_t j);
std::string attention_prefix(std::size_t i);

bool is_running_stat(std::string_view name);

// Parameters of one backbone column (stem + three inception-lite blocks)
// under `prefix`, initialized deterministically from (seed, name).
void add_column(NetworkParams& params, const HPNetConfig& config, const std::string& prefix,
                std::uint64_t seed);
void add_attention(NetworkParams& params, const HPNetConfig& config, std::size_t i, std::uint64_t seed);
void add_linear(NetworkParams& params, const std::string& prefix, std::size_t in, std::size_t out,
                std::uint64_t seed);

// M-net: one column plus no heads.
NetworkParams build_mnet(const HPNetConfig& config, std::uint64_t seed);
// Every column, attention generator and head the config calls for, freshly
// initialized. Columns are independent draws, not copies of the M-net.
NetworkParams build_hpnet(const HPNetConfig& config, std::uint64_t seed);

// Decides which batch-norm layers run in train mode. Everything else uses
// running statistics. Train-mode layers update their running statistics in
// place through the shared tensor handles.
struct ForwardContext {
  std::set<std::string> train_prefixes;  // a BN layer is in train mode if its prefix starts with one
  bool is_train(const std::string& layer_prefix) const;
  static ForwardContext eval() { return {}; }
};

struct ColumnFeatures {
  std::array<Tensor, kBlocks> block;  // F^1..F^3, block outputs before downsampling
};

struct AttentionStack {
  Tensor alpha;  // [N, L, H_i, W_i], nonnegative
  std::size_t source_block = 0;  // 1-based i
};

Tensor conv_bn_relu(const NetworkParams& params, const std::string& prefix, const Tensor& x,
                    std::size_t stride, std::size_t padding, const ForwardContext& ctx);
Tensor stem_forward(const NetworkParams& params, const std::string& column, const Tensor& images,
                    const ForwardContext& ctx);
Tensor block_forward(const NetworkParams& params, const std::string& column, std::size_t j,
                     const Tensor& x, const ForwardContext& ctx);
ColumnFeatures column_forward(const NetworkParams& params, const std::string& column,
                              const Tensor& images, const ForwardContext& ctx);
// Carries a block-k-level map through blocks k+1..3 of `column`. For k = 3
// the input is returned as is.
Tensor propagate_from(const NetworkParams& params, const std::string& column, std::size_t k,
                      const Tensor& x, const ForwardContext& ctx);

AttentionStack generate_attention(const NetworkParams& params, std::size_t i, const Tensor& f_i,
                                  const ForwardContext& ctx);
// alpha_l (1-based l) times F^k, resizing alpha to F^k's grid first.
Tensor apply_attention(const AttentionStack& stack, const Tensor& f_k, std::size_t l);

// One MDA module. `features` is the column's own F^1..F^3. Returns nullopt
// when the mask row is empty. `alpha_override` replaces the generated stack.
std::optional<Tensor> mda_forward(const NetworkParams& params, const HPNetConfig& config, std::size_t i,
                                  const ColumnFeatures& features, const ForwardContext& ctx,
                                  const AttentionStack* alpha_override = nullptr,
                                  AttentionStack* alpha_out = nullptr);

// M-net pooled feature followed by the enabled MDA vectors in (i, k, l) order.
Tensor fused_features(const NetworkParams& params, const HPNetConfig& config, const Tensor& images,
                      const ForwardContext& ctx, std::vector<AttentionStack>* attention = nullptr);

struct HeadOutput {
  Tensor embedding;  // [N, D]
  Tensor logits;     // [N, M] or [N, identities]
};
HeadOutput head_forward(const NetworkParams& params, const Tensor& fused);

struct HPNetOutput {
  Tensor logits;
  Tensor embedding;
  std::vector<AttentionStack> attention;
};
HPNetOutput hpnet_forward(const NetworkParams& params, const HPNetConfig& config, const Tensor& images,
                          const ForwardContext& ctx = ForwardContext::eval());

// Attention sub-branches (i, k) instantiated under the config.
std::vector<std::pair<std::size_t, std::size_t>> attention_branches(const HPNetConfig& config);

// Writes alpha^i_l for every generated stack as binary PGM named
// attn_b{i}_c{l}.pgm, each channel scaled by its own maximum to [0,255].
// `image` is [1,3,H,W]. Returns the written paths.
std::vector<std::filesystem::path> export_attention(const NetworkParams& params, const HPNetConfig& config,
                                                    const Tensor& image, const std::filesystem::path& out_dir);

// One line per entry: "name [dims]".
std::string architecture_summary(const NetworkParams& params);

}  // namespace hydra::net
