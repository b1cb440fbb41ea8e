#include <exception>
#include <fstream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hydra/cli.hpp"
#include "hydra/errors.hpp"

namespace hydra::cli {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

void check_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

std::string key_path(const std::string& where, const std::string& key) {
  return where.empty() ? key : where + "." + key;
}

void read_size(const json& j, const std::string& where, const std::string& key, std::size_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(key_path(where, key) + " must be a nonnegative integer");
  out = v.get<std::size_t>();
}

void read_u64(const json& j, const std::string& where, const std::string& key, std::uint64_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(key_path(where, key) + " must be a nonnegative integer");
  out = v.get<std::uint64_t>();
}

void read_double(const json& j, const std::string& where, const std::string& key, double& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(key_path(where, key) + " must be a number");
  out = v.get<double>();
}

void read_string(const json& j, const std::string& where, const std::string& key, std::string& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_string()) throw ConfigError(key_path(where, key) + " must be a string");
  out = v.get<std::string>();
}

// Accepts a layout name ("complete", "mnet", ...) or three bit rows.
net::Connectivity parse_mask(const std::string& text) {
  if (text.find(',') != std::string::npos) return net::Connectivity::parse(text);
  try {
    return net::Connectivity::named(text);
  } catch (const UsageError&) {
    throw ConfigError("connectivity must be a layout name or look like 111,111,111, got '" + text + "'");
  }
}

void read_stage(const json& j, const std::string& where, train::StageHyper& h) {
  check_keys(j, where, {"epochs", "lr", "momentum", "batch_size", "lr_step", "lr_decay", "weight_decay"});
  read_size(j, where, "epochs", h.epochs);
  read_double(j, where, "lr", h.lr);
  read_double(j, where, "momentum", h.momentum);
  read_size(j, where, "batch_size", h.batch_size);
  read_size(j, where, "lr_step", h.lr_step);
  read_double(j, where, "lr_decay", h.lr_decay);
  read_double(j, where, "weight_decay", h.weight_decay);
}

ordered_json stage_json(const train::StageHyper& h) {
  ordered_json j;
  j["epochs"] = h.epochs;
  j["lr"] = h.lr;
  j["momentum"] = h.momentum;
  j["batch_size"] = h.batch_size;
  j["lr_step"] = h.lr_step;
  j["lr_decay"] = h.lr_decay;
  j["weight_decay"] = h.weight_decay;
  return j;
}

void validate(const RunConfig& c) {
  // Class counts are taken from the data at train time; zero means unset.
  net::HPNetConfig m = c.model;
  if (m.num_attributes == 0) m.num_attributes = 1;
  if (m.num_identities == 0) m.num_identities = 1;
  m.validate();
  c.hyper.stage1.validate("stage1");
  c.hyper.stage2.validate("stage2");
  c.hyper.stage3.validate("stage3");
  if (!(c.threshold > 0.0 && c.threshold < 1.0)) throw ConfigError("eval.threshold must lie in (0,1)");
  if (c.trials == 0) throw ConfigError("eval.trials must be at least 1");
  if (c.ablation_seeds.empty()) throw ConfigError("ablation_seeds must not be empty");
  try {
    data::parse_split(c.eval_split);
  } catch (const Error& e) {
    throw ConfigError(std::string("eval.split: ") + e.what());
  }
  if (c.manifest.empty()) throw ConfigError("data.manifest must not be empty");
  if (c.out.empty()) throw ConfigError("out must not be empty");
}

}  // namespace

std::string RunConfig::split_path() const {
  if (!split.empty()) return split;
  return (std::filesystem::path(manifest).parent_path() / "split.json").string();
}

std::string RunConfig::to_json() const {
  ordered_json j;
  j["task"] = std::string(net::task_name(model.task));
  j["data"] = {{"manifest", manifest}, {"split", split}};
  ordered_json m;
  m["stem_channels"] = model.stem_channels;
  m["block_channels"] = model.block_channels;
  m["attention_channels"] = model.attention_channels;
  m["feature_dim"] = model.feature_dim;
  m["input_height"] = model.input_height;
  m["input_width"] = model.input_width;
  m["num_attributes"] = model.num_attributes;
  m["num_identities"] = model.num_identities;
  m["connectivity"] = model.connectivity.str();
  j["model"] = m;
  j["train"] = {{"stage1", stage_json(hyper.stage1)}, {"stage2", stage_json(hyper.stage2)},
                {"stage3", stage_json(hyper.stage3)}};
  j["eval"] = {{"threshold", threshold}, {"trials", trials}, {"split", eval_split}};
  j["seed"] = seed;
  j["ablation_seeds"] = ablation_seeds;
  j["out"] = out;
  j["threads"] = threads;
  return j.dump(2) + "\n";
}

RunConfig apply_config_text(const RunConfig& base, std::string_view text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
  RunConfig c = base;
  try {
    check_keys(j, "", {"task", "data", "model", "train", "eval", "seed", "ablation_seeds", "out", "threads"});
    if (j.contains("task")) {
      std::string task;
      read_string(j, "", "task", task);
      c.model.task = net::parse_task(task);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, "data", {"manifest", "split"});
      read_string(d, "data", "manifest", c.manifest);
      read_string(d, "data", "split", c.split);
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, "model", {"stem_channels", "block_channels", "attention_channels", "feature_dim", "input_height",
                              "input_width", "num_attributes", "num_identities", "connectivity"});
      read_size(m, "model", "stem_channels", c.model.stem_channels);
      if (m.contains("block_channels")) {
        const auto& b = m.at("block_channels");
        if (!b.is_array() || b.size() != net::kBlocks) {
          throw ConfigError("model.block_channels must be an array of three integers");
        }
        for (std::size_t k = 0; k < net::kBlocks; ++k) {
          if (!b[k].is_number_unsigned()) throw ConfigError("model.block_channels must hold nonnegative integers");
          c.model.block_channels[k] = b[k].get<std::size_t>();
        }
      }
      read_size(m, "model", "attention_channels", c.model.attention_channels);
      read_size(m, "model", "feature_dim", c.model.feature_dim);
      read_size(m, "model", "input_height", c.model.input_height);
      read_size(m, "model", "input_width", c.model.input_width);
      read_size(m, "model", "num_attributes", c.model.num_attributes);
      read_size(m, "model", "num_identities", c.model.num_identities);
      if (m.contains("connectivity")) {
        std::string mask;
        read_string(m, "model", "connectivity", mask);
        c.model.connectivity = parse_mask(mask);
      }
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, "train", {"stage1", "stage2", "stage3"});
      if (t.contains("stage1")) read_stage(t.at("stage1"), "train.stage1", c.hyper.stage1);
      if (t.contains("stage2")) read_stage(t.at("stage2"), "train.stage2", c.hyper.stage2);
      if (t.contains("stage3")) read_stage(t.at("stage3"), "train.stage3", c.hyper.stage3);
    }
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      check_keys(e, "eval", {"threshold", "trials", "split"});
      read_double(e, "eval", "threshold", c.threshold);
      read_size(e, "eval", "trials", c.trials);
      read_string(e, "eval", "split", c.eval_split);
    }
    read_u64(j, "", "seed", c.seed);
    if (j.contains("ablation_seeds")) {
      const auto& s = j.at("ablation_seeds");
      if (!s.is_array()) throw ConfigError("ablation_seeds must be an array of integers");
      c.ablation_seeds.clear();
      for (const auto& v : s) {
        if (!v.is_number_unsigned()) throw ConfigError("ablation_seeds must hold nonnegative integers");
        c.ablation_seeds.push_back(v.get<std::uint64_t>());
      }
    }
    read_string(j, "", "out", c.out);
    read_size(j, "", "threads", c.threads);
    validate(c);
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return c;
}

RunConfig load_config_file(const RunConfig& base, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return apply_config_text(base, ss.str(), path.string());
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& config_path, const Overrides& flags) {
  RunConfig c;
  if (config_path) c = load_config_file(c, *config_path);
  if (flags.seed) c.seed = *flags.seed;
  if (flags.threads) c.threads = *flags.threads;
  if (flags.out) c.out = *flags.out;
  if (flags.manifest) c.manifest = *flags.manifest;
  if (flags.split) c.split = *flags.split;
  if (flags.mask) c.model.connectivity = parse_mask(*flags.mask);
  if (flags.task) c.model.task = net::parse_task(*flags.task);
  validate(c);
  return c;
}

int exit_code_for(const std::exception& e) {
  if (const auto* h = dynamic_cast<const Error*>(&e)) return static_cast<int>(h->exit_code());
  if (dynamic_cast<const CLI::Error*>(&e)) return kExitUsage;
  return kExitData;
}

}  // namespace hydra::cli
