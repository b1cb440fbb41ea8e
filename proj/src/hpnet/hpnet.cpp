#include "hydra/hpnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

#include "hydra/errors.hpp"
#include "hydra/random.hpp"
#include "hydra/raster.hpp"

namespace hydra::net {

std::string_view task_name(Task task) { return task == Task::kReid ? "reid" : "attributes"; }

Task parse_task(std::string_view name) {
  if (name == "attributes") return Task::kAttributes;
  if (name == "reid") return Task::kReid;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected attributes or reid)");
}

// ---------------------------------------------------------------- connectivity

Connectivity Connectivity::full() {
  Connectivity c;
  for (auto& row : c.mask) row.fill(true);
  return c;
}

Connectivity Connectivity::none() { return {}; }

const std::vector<std::string>& Connectivity::ablation_names() {
  static const std::vector<std::string> names = {"complete",      "mnet",
                                                 "naive",         "middle_pruned",
                                                 "one_branch_pruned", "two_branches_pruned"};
  return names;
}

Connectivity Connectivity::named(std::string_view name) {
  Connectivity c = full();
  if (name == "complete") return c;
  if (name == "mnet") return none();
  if (name == "naive") {
    c = none();
    for (std::size_t i = 0; i < kBlocks; ++i) c.mask[i][i] = true;
    return c;
  }
  if (name == "middle_pruned") {
    for (std::size_t k = 0; k < kBlocks; ++k) c.mask[1][k] = false;
    for (std::size_t i = 0; i < kBlocks; ++i) c.mask[i][1] = false;
    return c;
  }
  if (name == "one_branch_pruned") {
    c.mask[0].fill(false);
    return c;
  }
  if (name == "two_branches_pruned") {
    c.mask[0].fill(false);
    c.mask[1].fill(false);
    return c;
  }
  throw UsageError("unknown ablation configuration '" + std::string(name) + "'");
}

Connectivity Connectivity::parse(std::string_view text) {
  Connectivity c;
  std::size_t row = 0, col = 0;
  for (char ch : text) {
    if (ch == ',') {
      if (col != kBlocks) break;
      ++row;
      col = 0;
      continue;
    }
    if ((ch != '0' && ch != '1') || row >= kBlocks || col >= kBlocks) {
      throw ConfigError("connectivity must look like 111,111,111, got '" + std::string(text) + "'");
    }
    c.mask[row][col++] = ch == '1';
  }
  if (row != kBlocks - 1 || col != kBlocks) {
    throw ConfigError("connectivity must look like 111,111,111, got '" + std::string(text) + "'");
  }
  return c;
}

bool Connectivity::row_enabled(std::size_t i) const {
  return std::any_of(mask[i].begin(), mask[i].end(), [](bool b) { return b; });
}

std::size_t Connectivity::direction_count() const {
  std::size_t n = 0;
  for (const auto& row : mask) n += static_cast<std::size_t>(std::count(row.begin(), row.end(), true));
  return n;
}

std::string Connectivity::str() const {
  std::string s;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    if (i) s += ',';
    for (bool b : mask[i]) s += b ? '1' : '0';
  }
  return s;
}

// ---------------------------------------------------------------- config

void HPNetConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string(what) + " must be positive");
  };
  positive(stem_channels, "stem_channels");
  for (auto c : block_channels) {
    positive(c, "block_channels");
    if (c < 4) throw ConfigError("block_channels must be at least 4 (three inception paths)");
  }
  positive(attention_channels, "attention_channels");
  positive(feature_dim, "feature_dim");
  if (task == Task::kAttributes) positive(num_attributes, "num_attributes");
  if (task == Task::kReid) positive(num_identities, "num_identities");
  if (input_height < 8 || input_width < 8) {
    throw ConfigError("input resolution " + std::to_string(input_height) + "x" + std::to_string(input_width) +
                      " is below the 8x8 minimum for three downsamplings");
  }
}

std::size_t HPNetConfig::output_classes() const {
  return task == Task::kReid ? num_identities : num_attributes;
}

std::pair<std::size_t, std::size_t> HPNetConfig::block_resolution(std::size_t j) const {
  std::size_t h = input_height / 2, w = input_width / 2;  // after the stem pool
  for (std::size_t b = 1; b < j; ++b) {
    h /= 2;
    w /= 2;
  }
  return {h, w};
}

std::size_t HPNetConfig::mda_feature_length(std::size_t i) const {
  std::size_t directions = 0;
  for (bool b : connectivity.mask[i - 1]) directions += b ? 1 : 0;
  return directions * attention_channels * block_channels[kBlocks - 1];
}

std::size_t HPNetConfig::fused_length() const {
  std::size_t n = block_channels[kBlocks - 1];
  for (std::size_t i = 1; i <= kBlocks; ++i) n += mda_feature_length(i);
  return n;
}

// ---------------------------------------------------------------- params

const Tensor& NetworkParams::at(const std::string& name) const {
  auto it = entries.find(name);
  if (it == entries.end()) throw ParameterError("missing parameter '" + name + "'");
  return it->second;
}

Tensor& NetworkParams::at(const std::string& name) {
  auto it = entries.find(name);
  if (it == entries.end()) throw ParameterError("missing parameter '" + name + "'");
  return it->second;
}

void NetworkParams::add(const std::string& name, Tensor value) {
  if (!entries.emplace(name, std::move(value)).second) {
    throw ParameterError("duplicate parameter '" + name + "'");
  }
}

std::vector<std::string> NetworkParams::names_with_prefix(std::string_view prefix) const {
  std::vector<std::string> out;
  for (auto it = entries.lower_bound(std::string(prefix)); it != entries.end(); ++it) {
    if (it->first.compare(0, prefix.size(), prefix) != 0) break;
    out.push_back(it->first);
  }
  return out;
}

void NetworkParams::erase_prefix(std::string_view prefix) {
  for (const auto& name : names_with_prefix(prefix)) entries.erase(name);
}

std::size_t NetworkParams::total_values() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries) n += t.numel();
  return n;
}

NetworkParams NetworkParams::deep_copy() const {
  NetworkParams out;
  for (const auto& [name, t] : entries) out.entries.emplace(name, t.clone());
  out.stage_markers = stage_markers;
  return out;
}

bool NetworkParams::bit_equal(const NetworkParams& other) const {
  if (entries.size() != other.entries.size() || stage_markers != other.stage_markers) return false;
  for (const auto& [name, t] : entries) {
    auto it = other.entries.find(name);
    if (it == other.entries.end() || it->second.dims() != t.dims()) return false;
    auto a = t.data();
    auto b = it->second.data();
    if (!std::equal(a.begin(), a.end(), b.begin(), [](float x, float y) {
          return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y);
        })) {
      return false;
    }
  }
  return true;
}

std::string column_prefix(std::size_t column) {
  return column == 0 ? "mnet" : "afnet" + std::to_string(column);
}

std::string block_prefix(std::string_view column, std::size_t j) {
  return std::string(column) + ".block" + std::to_string(j);
}

std::string attention_prefix(std::size_t i) { return "att" + std::to_string(i); }

bool is_running_stat(std::string_view name) {
  return name.ends_with(".running_mean") || name.ends_with(".running_var");
}

namespace {

struct BlockWidths {
  std::size_t path1, reduce, path2, path3;
};

BlockWidths split_block(std::size_t out) {
  BlockWidths w;
  w.path1 = out / 4;
  w.reduce = std::max<std::size_t>(1, out / 4);
  w.path2 = out / 2;
  w.path3 = out - w.path1 - w.path2;
  return w;
}

Tensor uniform_tensor(Shape dims, double bound, std::uint64_t seed, const std::string& name) {
  Engine eng = make_engine(seed, name);
  std::vector<float> v(shape_numel(dims));
  for (auto& x : v) x = static_cast<float>(uniform(eng, -bound, bound));
  return Tensor(std::move(dims), std::move(v));
}

void add_conv_bn(NetworkParams& params, const std::string& prefix, std::size_t in, std::size_t out,
                 std::size_t k, std::uint64_t seed) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  params.add(prefix + ".w", uniform_tensor({out, in, k, k}, bound, seed, prefix + ".w"));
  params.add(prefix + ".b", Tensor::zeros({out}));
  params.add(prefix + ".bn.gamma", Tensor::full({out}, 1.f));
  params.add(prefix + ".bn.beta", Tensor::zeros({out}));
  params.add(prefix + ".bn.running_mean", Tensor::zeros({out}));
  params.add(prefix + ".bn.running_var", Tensor::full({out}, 1.f));
}

}  // namespace

void add_column(NetworkParams& params, const HPNetConfig& config, const std::string& prefix,
                std::uint64_t seed) {
  const std::size_t s = config.stem_channels;
  add_conv_bn(params, prefix + ".stem.conv1", 3, s, 3, seed);
  add_conv_bn(params, prefix + ".stem.conv2", s, s, 3, seed);
  std::size_t in = s;
  for (std::size_t j = 1; j <= kBlocks; ++j) {
    const auto bw = split_block(config.block_channels[j - 1]);
    const auto bp = block_prefix(prefix, j);
    add_conv_bn(params, bp + ".path1", in, bw.path1, 1, seed);
    add_conv_bn(params, bp + ".path2_reduce", in, bw.reduce, 1, seed);
    add_conv_bn(params, bp + ".path2", bw.reduce, bw.path2, 3, seed);
    add_conv_bn(params, bp + ".path3", in, bw.path3, 1, seed);
    in = config.block_channels[j - 1];
  }
}

void add_attention(NetworkParams& params, const HPNetConfig& config, std::size_t i, std::uint64_t seed) {
  add_conv_bn(params, attention_prefix(i), config.block_channels[i - 1], config.attention_channels, 1, seed);
}

void add_linear(NetworkParams& params, const std::string& prefix, std::size_t in, std::size_t out,
                std::uint64_t seed) {
  const double bound = std::sqrt(3.0 / static_cast<double>(in));
  params.add(prefix + ".w", uniform_tensor({in, out}, bound, seed, prefix + ".w"));
  params.add(prefix + ".b", Tensor::zeros({out}));
}

NetworkParams build_mnet(const HPNetConfig& config, std::uint64_t seed) {
  config.validate();
  NetworkParams params;
  add_column(params, config, column_prefix(0), seed);
  return params;
}

NetworkParams build_hpnet(const HPNetConfig& config, std::uint64_t seed) {
  NetworkParams params = build_mnet(config, seed);
  for (std::size_t i = 1; i <= kBlocks; ++i) {
    if (!config.connectivity.row_enabled(i - 1)) continue;
    add_column(params, config, column_prefix(i), seed);
    add_attention(params, config, i, seed);
  }
  add_linear(params, "fusion", config.fused_length(), config.feature_dim, seed);
  add_linear(params, "head", config.feature_dim, config.output_classes(), seed);
  return params;
}

// ---------------------------------------------------------------- forward

bool ForwardContext::is_train(const std::string& layer_prefix) const {
  for (const auto& p : train_prefixes) {
    if (layer_prefix.compare(0, p.size(), p) == 0) return true;
  }
  return false;
}

Tensor conv_bn_relu(const NetworkParams& params, const std::string& prefix, const Tensor& x,
                    std::size_t stride, std::size_t padding, const ForwardContext& ctx) {
  auto y = conv2d(x, params.at(prefix + ".w"), params.at(prefix + ".b"), stride, padding);
  BatchNormStats<float> stats{params.at(prefix + ".bn.running_mean"), params.at(prefix + ".bn.running_var")};
  const BnMode mode = ctx.is_train(prefix) ? BnMode::kTrain : BnMode::kEval;
  return relu(batchnorm(y, params.at(prefix + ".bn.gamma"), params.at(prefix + ".bn.beta"), &stats, mode));
}

Tensor stem_forward(const NetworkParams& params, const std::string& column, const Tensor& images,
                    const ForwardContext& ctx) {
  auto x = conv_bn_relu(params, column + ".stem.conv1", images, 1, 1, ctx);
  x = max_pool(x, 2, 2);
  return conv_bn_relu(params, column + ".stem.conv2", x, 1, 1, ctx);
}

Tensor block_forward(const NetworkParams& params, const std::string& column, std::size_t j,
                     const Tensor& x, const ForwardContext& ctx) {
  const auto bp = block_prefix(column, j);
  auto p1 = conv_bn_relu(params, bp + ".path1", x, 1, 0, ctx);
  auto p2 = conv_bn_relu(params, bp + ".path2", conv_bn_relu(params, bp + ".path2_reduce", x, 1, 0, ctx), 1, 1,
                         ctx);
  auto p3 = conv_bn_relu(params, bp + ".path3", max_pool(x, 3, 1, 1), 1, 0, ctx);
  return concat_channels(std::vector<Tensor>{p1, p2, p3});
}

ColumnFeatures column_forward(const NetworkParams& params, const std::string& column, const Tensor& images,
                              const ForwardContext& ctx) {
  ColumnFeatures f;
  f.block[0] = block_forward(params, column, 1, stem_forward(params, column, images, ctx), ctx);
  f.block[1] = block_forward(params, column, 2, max_pool(f.block[0], 2, 2), ctx);
  f.block[2] = block_forward(params, column, 3, max_pool(f.block[1], 2, 2), ctx);
  return f;
}

Tensor propagate_from(const NetworkParams& params, const std::string& column, std::size_t k, const Tensor& x,
                      const ForwardContext& ctx) {
  Tensor y = x;
  for (std::size_t j = k + 1; j <= kBlocks; ++j) y = block_forward(params, column, j, max_pool(y, 2, 2), ctx);
  return y;
}

AttentionStack generate_attention(const NetworkParams& params, std::size_t i, const Tensor& f_i,
                                  const ForwardContext& ctx) {
  return {conv_bn_relu(params, attention_prefix(i), f_i, 1, 0, ctx), i};
}

Tensor apply_attention(const AttentionStack& stack, const Tensor& f_k, std::size_t l) {
  const std::size_t channels = stack.alpha.dim(1);
  if (l < 1 || l > channels) {
    throw IndexError("attention channel " + std::to_string(l) + " outside 1.." + std::to_string(channels));
  }
  auto a = slice_channels(stack.alpha, l - 1, 1);
  if (a.dim(2) != f_k.dim(2) || a.dim(3) != f_k.dim(3)) a = bilinear_resize(a, f_k.dim(2), f_k.dim(3));
  return mul_broadcast(a, f_k);
}

std::optional<Tensor> mda_forward(const NetworkParams& params, const HPNetConfig& config, std::size_t i,
                                  const ColumnFeatures& features, const ForwardContext& ctx,
                                  const AttentionStack* alpha_override, AttentionStack* alpha_out) {
  if (i < 1 || i > kBlocks) throw IndexError("MDA module index must be 1..3");
  if (!config.connectivity.row_enabled(i - 1)) return std::nullopt;
  const auto column = column_prefix(i);
  const AttentionStack stack =
      alpha_override ? *alpha_override : generate_attention(params, i, features.block[i - 1], ctx);
  if (alpha_out) *alpha_out = stack;
  const std::size_t L = stack.alpha.dim(1);

  std::vector<Tensor> directions;
  for (std::size_t k = 1; k <= kBlocks; ++k) {
    if (!config.connectivity.mask[i - 1][k - 1]) continue;
    const Tensor& fk = features.block[k - 1];
    // Resize the whole stack once; per-channel resize is independent.
    AttentionStack aligned = stack;
    if (stack.alpha.dim(2) != fk.dim(2) || stack.alpha.dim(3) != fk.dim(3)) {
      aligned.alpha = bilinear_resize(stack.alpha, fk.dim(2), fk.dim(3));
    }
    std::vector<Tensor> masked;
    masked.reserve(L);
    for (std::size_t l = 1; l <= L; ++l) masked.push_back(apply_attention(aligned, fk, l));
    // L-fold batch expansion: row l*N + n carries sample n under channel l.
    auto propagated = propagate_from(params, column, k, concat_batch(masked), ctx);
    directions.push_back(batch_to_channels(global_avg_pool(propagated), L));
  }
  return concat_channels(directions);
}

Tensor fused_features(const NetworkParams& params, const HPNetConfig& config, const Tensor& images,
                      const ForwardContext& ctx, std::vector<AttentionStack>* attention) {
  std::vector<Tensor> parts;
  parts.push_back(global_avg_pool(column_forward(params, column_prefix(0), images, ctx).block[2]));
  for (std::size_t i = 1; i <= kBlocks; ++i) {
    if (!config.connectivity.row_enabled(i - 1)) continue;
    auto feats = column_forward(params, column_prefix(i), images, ctx);
    AttentionStack stack;
    auto v = mda_forward(params, config, i, feats, ctx, nullptr, &stack);
    parts.push_back(*v);
    if (attention) attention->push_back(stack);
  }
  return parts.size() == 1 ? parts.front() : concat_channels(parts);
}

HeadOutput head_forward(const NetworkParams& params, const Tensor& fused) {
  HeadOutput out;
  out.embedding = fully_connected(fused, params.at("fusion.w"), params.at("fusion.b"));
  out.logits = fully_connected(out.embedding, params.at("head.w"), params.at("head.b"));
  return out;
}

HPNetOutput hpnet_forward(const NetworkParams& params, const HPNetConfig& config, const Tensor& images,
                          const ForwardContext& ctx) {
  config.validate();
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != config.input_height ||
      images.dim(3) != config.input_width) {
    throw ShapeError("images must be [N,3," + std::to_string(config.input_height) + "," +
                     std::to_string(config.input_width) + "], got " + shape_str(images.dims()));
  }
  HPNetOutput out;
  auto fused = fused_features(params, config, images, ctx, &out.attention);
  auto head = head_forward(params, fused);
  out.logits = head.logits;
  out.embedding = head.embedding;
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> attention_branches(const HPNetConfig& config) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    for (std::size_t k = 0; k < kBlocks; ++k) {
      if (config.connectivity.mask[i][k]) out.emplace_back(i + 1, k + 1);
    }
  }
  return out;
}

std::vector<std::filesystem::path> export_attention(const NetworkParams& params, const HPNetConfig& config,
                                                    const Tensor& image, const std::filesystem::path& out_dir) {
  if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("export_attention expects one image [1,3,H,W]");
  std::vector<AttentionStack> stacks;
  {
    NoGradGuard guard;
    fused_features(params, config, image, ForwardContext::eval(), &stacks);
  }
  std::vector<std::filesystem::path> written;
  for (const auto& stack : stacks) {
    const std::size_t L = stack.alpha.dim(1), h = stack.alpha.dim(2), w = stack.alpha.dim(3);
    auto a = stack.alpha.data();
    for (std::size_t l = 0; l < L; ++l) {
      const float* ch = a.data() + l * h * w;
      const float peak = *std::max_element(ch, ch + h * w);
      data::Raster r{w, h, 1, std::vector<std::uint8_t>(h * w, 0)};
      if (peak > 0) {
        for (std::size_t q = 0; q < h * w; ++q) {
          const double v = std::round(255.0 * std::max(0.f, ch[q]) / peak);
          r.pixels[q] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
      }
      auto path = out_dir / ("attn_b" + std::to_string(stack.source_block) + "_c" + std::to_string(l + 1) + ".pgm");
      try {
        data::write_pnm(path, r);
      } catch (const std::exception& e) {
        throw FormatError("failed to write " + path.string() + ": " + e.what());
      }
      written.push_back(path);
    }
  }
  return written;
}

std::string architecture_summary(const NetworkParams& params) {
  std::ostringstream os;
  for (const auto& [name, t] : params.entries) os << name << ' ' << shape_str(t.dims()) << '\n';
  if (!params.stage_markers.empty()) {
    os << "# stages:";
    for (const auto& s : params.stage_markers) os << ' ' << s;
    os << '\n';
  }
  return os.str();
}

}  // namespace hydra::net
