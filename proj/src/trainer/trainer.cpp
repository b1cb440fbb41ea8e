#include "hydra/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "hydra/errors.hpp"
#include "hydra/parallel.hpp"
#include "hydra/ops.hpp"
#include "hydra/random.hpp"

namespace hydra::train {

using net::NetworkParams;

// ------------------------------------------------------------------- losses

LossSpec LossSpec::from_labels(std::span<const std::uint8_t> labels, std::size_t num_attributes, double sigma) {
  if (num_attributes == 0 || labels.size() % num_attributes != 0 || labels.empty()) {
    throw ShapeError("label matrix does not divide into " + std::to_string(num_attributes) + " attributes");
  }
  const std::size_t n = labels.size() / num_attributes;
  LossSpec spec;
  spec.sigma = sigma;
  spec.ratios.assign(num_attributes, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t m = 0; m < num_attributes; ++m) spec.ratios[m] += labels[i * num_attributes + m];
  }
  for (auto& r : spec.ratios) r /= static_cast<double>(n);
  return spec;
}

void LossSpec::validate() const {
  if (kind == Kind::kIdentitySoftmax) return;
  if (!(sigma > 0)) throw ConfigError("loss sigma must be positive");
  for (std::size_t m = 0; m < ratios.size(); ++m) {
    if (!(ratios[m] > 0 && ratios[m] < 1)) {
      throw ConfigError("attribute " + std::to_string(m) + " positive ratio " + std::to_string(ratios[m]) +
                        " outside (0,1)");
    }
  }
}

std::vector<double> LossSpec::positive_weights() const {
  std::vector<double> w;
  for (double r : ratios) w.push_back(std::exp((1 - r) / (sigma * sigma)));
  return w;
}

std::vector<double> LossSpec::negative_weights() const {
  std::vector<double> w;
  for (double r : ratios) w.push_back(std::exp(r / (sigma * sigma)));
  return w;
}

Tensor weighted_attribute_loss(const Tensor& logits, std::span<const std::uint8_t> labels, const LossSpec& spec) {
  spec.validate();
  if (logits.rank() != 2 || logits.dim(1) != spec.ratios.size()) {
    throw ShapeError("logits " + shape_str(logits.dims()) + " do not match " + std::to_string(spec.ratios.size()) +
                     " attribute ratios");
  }
  const auto pos = spec.positive_weights();
  const auto neg = spec.negative_weights();
  return weighted_bce_with_logits(logits, labels, pos, neg);
}

// ---------------------------------------------------------------- schedule

double StageHyper::lr_at(std::size_t epoch) const {
  if (lr_step == 0) return lr;
  return lr * std::pow(lr_decay, static_cast<double>(epoch / lr_step));
}

void StageHyper::validate(const std::string& stage) const {
  if (!(lr > 0)) throw ConfigError("stage " + stage + ": lr must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("stage " + stage + ": momentum must lie in [0,1)");
  if (batch_size == 0) throw ConfigError("stage " + stage + ": batch_size must be positive");
  if (weight_decay < 0) throw ConfigError("stage " + stage + ": weight_decay must be nonnegative");
}

std::string stage2_id(std::size_t module) {
  if (module < 1 || module > net::kBlocks) throw ParameterError("MDA module index must be 1..3");
  return std::string("2") + static_cast<char>('a' + module - 1);
}

// ------------------------------------------------------------------- plans

namespace {

std::size_t first_direction(const net::HPNetConfig& config, std::size_t module) {
  for (std::size_t k = 1; k <= net::kBlocks; ++k) {
    if (config.connectivity.mask[module - 1][k - 1]) return k;
  }
  return 0;
}

std::vector<std::string> trainable_prefixes(const net::HPNetConfig& config, const std::string& id) {
  if (id == "1") return {"mnet."};
  if (id == "3") return {"fusion.", "head."};
  for (std::size_t i = 1; i <= net::kBlocks; ++i) {
    if (id != stage2_id(i)) continue;
    std::vector<std::string> out{net::attention_prefix(i) + "."};
    const std::size_t k = first_direction(config, i);
    if (k == 0) throw ParameterError("MDA module " + std::to_string(i) + " has no enabled direction");
    for (std::size_t j = k + 1; j <= net::kBlocks; ++j) out.push_back(net::block_prefix(net::column_prefix(i), j) + ".");
    return out;
  }
  throw ParameterError("unknown stage '" + id + "'");
}

}  // namespace

StagePlan plan_stage(const NetworkParams& params, const net::HPNetConfig& config, const std::string& id,
                     const StageHyper& hyper) {
  StagePlan plan;
  plan.id = id;
  plan.hyper = hyper;
  plan.loss = config.task == net::Task::kReid ? LossSpec::Kind::kIdentitySoftmax : LossSpec::Kind::kWeightedBce;
  const auto prefixes = trainable_prefixes(config, id);
  for (const auto& [name, t] : params.entries) {
    const bool hit = std::any_of(prefixes.begin(), prefixes.end(),
                                 [&](const std::string& p) { return name.compare(0, p.size(), p) == 0; });
    (hit && !net::is_running_stat(name) ? plan.trainable : plan.frozen).insert(name);
  }
  return plan;
}

// --------------------------------------------------------------------- log

TrainLog::TrainLog(const std::filesystem::path& path) : path_(path) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  std::ofstream(path_, std::ios::trunc);
}

void TrainLog::write(const EpochRecord& r) {
  records_.push_back(r);
  if (path_.empty()) return;
  nlohmann::ordered_json j;
  j["stage"] = r.stage;
  j["epoch"] = r.epoch;
  j["loss"] = r.loss;
  j["lr"] = r.lr;
  j["seed"] = r.seed;
  j["wall_ms"] = std::round(r.wall_ms);
  std::ofstream out(path_, std::ios::app);
  out << j.dump() << '\n';
  if (!out) throw FormatError("cannot append to training log " + path_.string());
}

// --------------------------------------------------------------------- SGD

void sgd_update(std::span<float> param, std::span<const float> grad, std::span<float> velocity, double lr,
                double momentum, double weight_decay) {
  for (std::size_t q = 0; q < param.size(); ++q) {
    const double g = (grad.empty() ? 0.0 : grad[q]) + weight_decay * param[q];
    velocity[q] = static_cast<float>(momentum * velocity[q] + g);
    param[q] = static_cast<float>(param[q] - lr * velocity[q]);
  }
}

void Sgd::step(NetworkParams& params, const std::vector<std::string>& names, double lr, double momentum,
               double weight_decay) {
  for (const auto& name : names) {
    Tensor& t = params.at(name);
    auto& v = velocity_[name];
    if (v.size() != t.numel()) v.assign(t.numel(), 0.f);
    auto g = t.grad();
    for (float x : g) {
      if (!std::isfinite(x)) throw NumericError("non-finite gradient in " + name);
    }
    sgd_update(t.mutable_data(), g, v, lr, momentum, weight_decay);
    t.zero_grad();
  }
}

void Sgd::step(std::map<std::string, Tensor>& tensors, double lr, double momentum, double weight_decay) {
  for (auto& [name, t] : tensors) {
    auto& v = velocity_[name];
    if (v.size() != t.numel()) v.assign(t.numel(), 0.f);
    sgd_update(t.mutable_data(), t.grad(), v, lr, momentum, weight_decay);
    t.zero_grad();
  }
}

// ------------------------------------------------------------------ stages

std::vector<int> dense_identity_labels(std::span<const std::int64_t> ids, std::size_t* classes) {
  std::vector<std::int64_t> unique(ids.begin(), ids.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<int> out;
  out.reserve(ids.size());
  for (auto id : ids) {
    out.push_back(static_cast<int>(std::lower_bound(unique.begin(), unique.end(), id) - unique.begin()));
  }
  if (classes) *classes = unique.size();
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

struct Targets {
  const data::LoadedSplit* split = nullptr;
  const LossSpec* loss = nullptr;
  std::vector<int> identity;  // dense labels for the softmax loss
};

Targets make_targets(const data::LoadedSplit& split, const LossSpec& loss, std::size_t classes) {
  loss.validate();
  Targets t{&split, &loss, {}};
  if (loss.kind == LossSpec::Kind::kIdentitySoftmax) {
    std::size_t k = 0;
    t.identity = dense_identity_labels(split.ids, &k);
    if (k != classes) {
      throw ConfigError("training split has " + std::to_string(k) + " identities, head expects " +
                        std::to_string(classes));
    }
  } else if (loss.ratios.size() != split.num_attributes || split.num_attributes != classes) {
    throw ConfigError("attribute count mismatch between loss, data and head");
  }
  return t;
}

Tensor batch_loss(const Tensor& logits, const Targets& t, std::span<const std::size_t> rows) {
  if (t.loss->kind == LossSpec::Kind::kIdentitySoftmax) {
    std::vector<int> labels;
    for (auto r : rows) labels.push_back(t.identity[r]);
    return softmax_cross_entropy(logits, labels);
  }
  std::vector<std::uint8_t> labels;
  for (auto r : rows) {
    auto l = t.split->labels(r);
    labels.insert(labels.end(), l.begin(), l.end());
  }
  return weighted_attribute_loss(logits, labels, *t.loss);
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed,
                                                    const std::string& stage, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Engine eng = make_engine(seed, "shuffle-" + stage + "-" + std::to_string(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(eng, i)]);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) {
    out.emplace_back(order.begin() + static_cast<long>(s), order.begin() + static_cast<long>(std::min(n, s + batch)));
  }
  // A trailing singleton batch would give degenerate batch statistics.
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

void set_trainable(NetworkParams& params, const std::set<std::string>& names, bool on) {
  for (const auto& n : names) params.at(n).set_requires_grad(on);
}

// Runs `epochs` passes; `step` returns the batch loss after backward.
template <typename StepFn>
void run_epochs(const std::string& stage, std::size_t n, const StageHyper& hyper, const TrainContext& ctx,
                StageReport* report, StepFn&& step) {
  const auto start = Clock::now();
  for (std::size_t e = 0; e < hyper.epochs; ++e) {
    const double lr = hyper.lr_at(e);
    double total = 0;
    std::size_t seen = 0;
    for (const auto& rows : epoch_batches(n, hyper.batch_size, ctx.seed, stage, e)) {
      const double loss = step(rows, lr);
      if (!std::isfinite(loss)) {
        throw NumericError("stage " + stage + " diverged at epoch " + std::to_string(e + 1) + " (loss " +
                           std::to_string(loss) + ")");
      }
      total += loss * static_cast<double>(rows.size());
      seen += rows.size();
    }
    const double mean = total / static_cast<double>(seen);
    if (report) report->epoch_loss.push_back(mean);
    if (ctx.log) {
      ctx.log->write({stage, e + 1, mean, lr, ctx.seed,
                      std::chrono::duration<double, std::milli>(Clock::now() - start).count()});
    }
  }
}

std::vector<std::string> sorted(const std::set<std::string>& s) { return {s.begin(), s.end()}; }

}  // namespace

void require_stages_before(const NetworkParams& params, const net::HPNetConfig& config, const std::string& stage) {
  if (stage == "1") return;
  if (!params.stage_markers.count("1")) throw StageOrderError("stage " + stage + " requires a completed stage 1");
  for (std::size_t i = 1; i <= net::kBlocks; ++i) {
    if (stage == stage2_id(i)) {
      if (!config.connectivity.row_enabled(i - 1)) {
        throw ParameterError("MDA module " + std::to_string(i) + " is disabled by the connectivity mask");
      }
      if (params.names_with_prefix(net::column_prefix(i) + ".").empty() ||
          params.names_with_prefix(net::attention_prefix(i) + ".").empty()) {
        throw StageOrderError("stage " + stage + " requires AF-net column " + net::column_prefix(i) +
                              " (run construct_afnet after stage 1)");
      }
      return;
    }
  }
  if (stage == "3") {
    for (std::size_t i = 1; i <= net::kBlocks; ++i) {
      if (config.connectivity.row_enabled(i - 1) && !params.stage_markers.count(stage2_id(i))) {
        throw StageOrderError("stage 3 requires completed stage " + stage2_id(i));
      }
    }
    return;
  }
  throw ParameterError("unknown stage '" + stage + "'");
}

NetworkParams stage1_train(const net::HPNetConfig& config, const data::LoadedSplit& train, const LossSpec& loss,
                           const StageHyper& hyper, const TrainContext& ctx, StageReport* report) {
  hyper.validate("1");
  NetworkParams params = net::build_mnet(config, ctx.seed);
  const auto targets = make_targets(train, loss, config.output_classes());
  const auto plan = plan_stage(params, config, "1", hyper);

  NetworkParams head;
  net::add_linear(head, "mnet_head", config.block_channels[net::kBlocks - 1], config.output_classes(), ctx.seed);
  for (auto& [name, t] : head.entries) t.set_requires_grad(true);
  set_trainable(params, plan.trainable, true);
  const auto names = sorted(plan.trainable);

  net::ForwardContext fctx;
  fctx.train_prefixes = {"mnet."};
  Sgd sgd;
  run_epochs("1", train.size(), hyper, ctx, report, [&](const std::vector<std::size_t>& rows, double lr) {
    const Tensor x = data::gather_images(train, rows);
    const auto f = net::column_forward(params, "mnet", x, fctx);
    const Tensor logits =
        fully_connected(global_avg_pool(f.block[2]), head.at("mnet_head.w"), head.at("mnet_head.b"));
    Tensor l = batch_loss(logits, targets, rows);
    const double value = l.item();
    l.backward();
    sgd.step(params, names, lr, hyper.momentum, hyper.weight_decay);
    sgd.step(head.entries, lr, hyper.momentum, hyper.weight_decay);
    return value;
  });
  set_trainable(params, plan.trainable, false);
  params.stage_markers.insert("1");
  return params;
}

NetworkParams construct_afnet(const NetworkParams& mnet, const net::HPNetConfig& config, std::uint64_t seed) {
  if (!mnet.stage_markers.count("1")) throw StageOrderError("construct_afnet requires a completed stage 1");
  NetworkParams out = mnet.deep_copy();
  const auto column = mnet.names_with_prefix("mnet.");
  if (column.empty()) throw StageOrderError("construct_afnet: no M-net parameters found");
  for (std::size_t i = 1; i <= net::kBlocks; ++i) {
    if (!config.connectivity.row_enabled(i - 1)) continue;
    const std::string col = net::column_prefix(i);
    out.erase_prefix(col + ".");
    out.erase_prefix(net::attention_prefix(i) + ".");
    for (const auto& name : column) out.add(col + name.substr(4), mnet.at(name).clone());
    net::add_attention(out, config, i, seed);
  }
  return out;
}

void stage2_finetune(NetworkParams& params, const net::HPNetConfig& config, std::size_t module,
                     const data::LoadedSplit& train, const LossSpec& loss, const StageHyper& hyper,
                     const TrainContext& ctx, StageReport* report) {
  const std::string id = stage2_id(module);
  hyper.validate(id);
  require_stages_before(params, config, id);
  const auto targets = make_targets(train, loss, config.output_classes());
  const auto plan = plan_stage(params, config, id, hyper);

  NetworkParams head;
  const std::string head_name = "branch" + std::to_string(module) + "_head";
  net::add_linear(head, head_name, config.mda_feature_length(module), config.output_classes(), ctx.seed);
  for (auto& [name, t] : head.entries) t.set_requires_grad(true);
  set_trainable(params, plan.trainable, true);
  const auto names = sorted(plan.trainable);

  // Column batch norms keep their stage-1 statistics; only the attention
  // generator normalizes with batch statistics.
  net::ForwardContext fctx;
  fctx.train_prefixes = {net::attention_prefix(module) + "."};
  const std::string column = net::column_prefix(module);
  Sgd sgd;
  run_epochs(id, train.size(), hyper, ctx, report, [&](const std::vector<std::size_t>& rows, double lr) {
    const Tensor x = data::gather_images(train, rows);
    net::ColumnFeatures feats;
    {
      NoGradGuard guard;
      feats = net::column_forward(params, column, x, net::ForwardContext::eval());
    }
    const auto v = net::mda_forward(params, config, module, feats, fctx);
    const Tensor logits = fully_connected(*v, head.at(head_name + ".w"), head.at(head_name + ".b"));
    Tensor l = batch_loss(logits, targets, rows);
    const double value = l.item();
    l.backward();
    sgd.step(params, names, lr, hyper.momentum, hyper.weight_decay);
    sgd.step(head.entries, lr, hyper.momentum, hyper.weight_decay);
    return value;
  });
  set_trainable(params, plan.trainable, false);
  params.stage_markers.insert(id);
}

Tensor compute_fused(const NetworkParams& params, const net::HPNetConfig& config, const Tensor& images,
                     std::size_t batch_size) {
  NoGradGuard guard;
  const std::size_t n = images.dim(0);
  const std::size_t per = images.numel() / n;
  const std::size_t len = config.fused_length();
  std::vector<float> out(n * len);
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  parallel_for(batches, [&](std::size_t b) {
    NoGradGuard local;  // graph recording is per thread
    const std::size_t s = b * batch_size, e = std::min(n, s + batch_size);
    std::vector<float> chunk(images.data().begin() + static_cast<long>(s * per),
                             images.data().begin() + static_cast<long>(e * per));
    auto dims = images.dims();
    dims[0] = e - s;
    const Tensor f = net::fused_features(params, config, Tensor(dims, std::move(chunk)), net::ForwardContext::eval());
    std::copy(f.data().begin(), f.data().end(), out.begin() + static_cast<long>(s * len));
  });
  return Tensor({n, len}, std::move(out));
}

void stage3_train_fusion(NetworkParams& params, const net::HPNetConfig& config, const data::LoadedSplit& train,
                         const LossSpec& loss, const StageHyper& hyper, const TrainContext& ctx,
                         StageReport* report) {
  hyper.validate("3");
  require_stages_before(params, config, "3");
  const auto targets = make_targets(train, loss, config.output_classes());
  params.erase_prefix("fusion.");
  params.erase_prefix("head.");
  params.stage_markers.erase("3");
  net::add_linear(params, "fusion", config.fused_length(), config.feature_dim, ctx.seed);
  net::add_linear(params, "head", config.feature_dim, config.output_classes(), ctx.seed);
  const auto plan = plan_stage(params, config, "3", hyper);

  // Every layer below the fusion is frozen and in eval mode, so the fused
  // features are fixed for the whole stage.
  const Tensor features = compute_fused(params, config, train.images);
  const std::size_t len = features.dim(1);

  set_trainable(params, plan.trainable, true);
  const auto names = sorted(plan.trainable);
  Sgd sgd;
  run_epochs("3", train.size(), hyper, ctx, report, [&](const std::vector<std::size_t>& rows, double lr) {
    std::vector<float> chunk(rows.size() * len);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(features.data().begin() + static_cast<long>(rows[i] * len), len,
                  chunk.begin() + static_cast<long>(i * len));
    }
    const auto out = net::head_forward(params, Tensor({rows.size(), len}, std::move(chunk)));
    Tensor l = batch_loss(out.logits, targets, rows);
    const double value = l.item();
    l.backward();
    sgd.step(params, names, lr, hyper.momentum, hyper.weight_decay);
    return value;
  });
  set_trainable(params, plan.trainable, false);
  params.stage_markers.insert("3");
}

NetworkParams train_all(const net::HPNetConfig& config, const data::LoadedSplit& train, const LossSpec& loss,
                        const TrainHyper& hyper, const TrainContext& ctx, PipelineCache* cache) {
  NetworkParams mnet;
  if (cache && cache->stage1) {
    mnet = cache->stage1->deep_copy();
  } else {
    mnet = stage1_train(config, train, loss, hyper.stage1, ctx);
    if (cache) cache->stage1 = mnet.deep_copy();
  }
  NetworkParams params = construct_afnet(mnet, config, ctx.seed);
  for (std::size_t i = 1; i <= net::kBlocks; ++i) {
    if (!config.connectivity.row_enabled(i - 1)) continue;
    std::string key = std::to_string(i) + ":";
    for (std::size_t k = 0; k < net::kBlocks; ++k) key += config.connectivity.mask[i - 1][k] ? '1' : '0';
    const std::vector<std::string> prefixes{net::column_prefix(i) + ".", net::attention_prefix(i) + "."};
    if (cache && cache->modules.count(key)) {
      for (const auto& [name, t] : cache->modules.at(key).entries) params.at(name) = t.clone();
      params.stage_markers.insert(stage2_id(i));
      continue;
    }
    stage2_finetune(params, config, i, train, loss, hyper.stage2, ctx);
    if (cache) {
      NetworkParams snapshot;
      for (const auto& prefix : prefixes) {
        for (const auto& name : params.names_with_prefix(prefix)) snapshot.add(name, params.at(name).clone());
      }
      cache->modules[key] = std::move(snapshot);
    }
  }
  stage3_train_fusion(params, config, train, loss, hyper.stage3, ctx);
  return params;
}

}  // namespace hydra::train
