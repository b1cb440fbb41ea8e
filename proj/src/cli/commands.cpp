#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "hydra/cli.hpp"
#include "hydra/datakit.hpp"
#include "hydra/errors.hpp"
#include "hydra/gradcheck.hpp"
#include "hydra/metrics.hpp"
#include "hydra/parallel.hpp"
#include "hydra/raster.hpp"

namespace hydra::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Dataset {
  data::Manifest manifest;
  fs::path root;
  data::SplitAssignment split;
};

Dataset open_dataset(const RunConfig& c) {
  Dataset d;
  d.manifest = data::read_manifest(c.manifest);
  d.root = fs::path(c.manifest).parent_path();
  d.split = data::read_split(c.split_path());
  return d;
}

// Class counts come from the data: attributes from the manifest header,
// identities from the training split.
void bind_counts(RunConfig& c, const Dataset& d) {
  c.model.num_attributes = d.manifest.attributes.size();
  std::set<std::int64_t> ids;
  for (auto i : d.split.indices(d.manifest, data::Split::kTrain)) ids.insert(d.manifest.records[i].id);
  c.model.num_identities = ids.size();
  c.model.validate();
}

data::LoadedSplit load(const RunConfig& c, const Dataset& d, data::Split which) {
  const auto rows = d.split.indices(d.manifest, which);
  if (rows.empty()) {
    throw InfeasibleError("split '" + std::string(data::split_name(which)) + "' of " + c.split_path() +
                          " holds no images");
  }
  return data::load_records(d.manifest, d.root, rows, c.model.input_height, c.model.input_width);
}

train::LossSpec make_loss(const RunConfig& c, const data::LoadedSplit& train) {
  if (c.model.task == net::Task::kReid) return train::LossSpec::identity();
  auto loss = train::LossSpec::from_labels(train.attrs, train.num_attributes);
  loss.validate();
  return loss;
}

// The part of a run configuration a checkpoint of `stage` depends on.
std::string lineage(const RunConfig& c, int stage) {
  const auto full = nlohmann::json::parse(c.to_json());
  nlohmann::json j;
  j["task"] = full["task"];
  j["model"] = full["model"];
  j["model"].erase("num_attributes");
  j["model"].erase("num_identities");
  if (stage > 0) {
    j["data"] = full["data"];
    j["seed"] = full["seed"];
    for (int s = 1; s < stage; ++s) {
      const auto key = "stage" + std::to_string(s);
      j["train"][key] = full["train"][key];
    }
  }
  return j.dump();
}

// Rejects a run whose configuration differs from the one recorded next to
// existing checkpoints. stage 0 compares only task and architecture.
void check_sidecar(const RunConfig& c, const fs::path& sidecar, int stage) {
  if (!fs::exists(sidecar)) return;
  RunConfig recorded = apply_config_text(RunConfig{}, read_text(sidecar), sidecar.string());
  if (lineage(recorded, stage) != lineage(c, stage)) {
    throw ConfigError("configuration differs from " + sidecar.string() +
                      " recorded with the checkpoints; pass it with --config or retrain from stage 1");
  }
}

fs::path default_checkpoint(const RunConfig& c) { return fs::path(c.out) / "final.ckpt"; }

// With `from_head` the class counts are read off the checkpoint instead of
// being checked against the dataset.
net::NetworkParams load_trained(RunConfig& c, const fs::path& ckpt, bool from_head = false) {
  if (!fs::exists(ckpt)) {
    throw StageOrderError("checkpoint " + ckpt.string() + " not found; run train --stage all first");
  }
  auto params = train::load_checkpoint(ckpt);
  if (!params.stage_markers.count("3")) {
    throw StageOrderError("checkpoint " + ckpt.string() + " has not completed stage 3");
  }
  const std::size_t classes = params.at("head.w").dim(1);
  if (c.model.task == net::Task::kReid) {
    c.model.num_identities = classes;
  } else if (from_head) {
    c.model.num_attributes = classes;
  } else if (classes != c.model.num_attributes) {
    throw UsageError("checkpoint head has " + std::to_string(classes) + " outputs but the attribute task expects " +
                     std::to_string(c.model.num_attributes) + "; check --task");
  }
  check_sidecar(c, ckpt.parent_path() / "config.json", 0);
  return params;
}

void write_report(std::ostream& out, const std::string& text, const std::optional<std::string>& path) {
  out << text;
  if (path) data::write_file_atomic(*path, text);
}

// ------------------------------------------------------------- commands

int cmd_synth(const RunConfig& c, const Overrides& flags, const std::optional<std::string>& spec_path,
              const std::string& preset, std::ostream& out) {
  data::SynthSpec spec;
  if (preset == "default") {
    spec = data::SynthSpec::defaults();
  } else if (preset == "reid") {
    spec = data::SynthSpec::reid_defaults();
  } else {
    throw UsageError("unknown synth preset '" + preset + "' (expected default or reid)");
  }
  if (spec_path) spec = data::parse_synth_spec(read_text(*spec_path), *spec_path);
  if (flags.seed) spec.seed = *flags.seed;
  spec.validate();
  const fs::path manifest(c.manifest);
  if (manifest.filename() != "manifest.jsonl") {
    throw UsageError("synth writes manifest.jsonl; point --manifest at <dir>/manifest.jsonl");
  }
  const auto m = data::generate_synthetic(spec, manifest.parent_path().empty() ? fs::path(".") : manifest.parent_path());
  ordered_json j;
  j["manifest"] = c.manifest;
  j["images"] = m.records.size();
  j["attributes"] = m.attributes;
  j["seed"] = spec.seed;
  out << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_split(const RunConfig& c, std::ostream& out) {
  const auto manifest = data::read_manifest(c.manifest);
  data::SplitAssignment split;
  if (c.model.task == net::Task::kReid) {
    const auto halves = data::reid_identity_split(manifest, c.seed);
    split.seed = c.seed;
    split.ratio = {1, 0, 1};
    for (auto i : halves.train) split.tracklets[manifest.records[i].tracklet] = data::Split::kTrain;
    for (auto i : halves.test) split.tracklets[manifest.records[i].tracklet] = data::Split::kTest;
  } else {
    split = data::tracklet_split(manifest, c.seed);
  }
  data::write_split(split, c.split_path());
  ordered_json j;
  j["split"] = c.split_path();
  j["task"] = std::string(net::task_name(c.model.task));
  for (auto s : {data::Split::kTrain, data::Split::kVal, data::Split::kTest}) {
    j[std::string(data::split_name(s))] = split.indices(manifest, s).size();
  }
  out << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_train(RunConfig c, const std::string& stage, std::ostream& out) {
  static const std::set<std::string> stages{"1", "2", "3", "all"};
  if (!stages.count(stage)) throw UsageError("--stage must be 1, 2, 3 or all");
  const fs::path dir(c.out);
  const fs::path sidecar = dir / "config.json";
  const fs::path ckpt1 = dir / "stage1.ckpt", ckpt2 = dir / "stage2.ckpt", ckpt3 = dir / "final.ckpt";

  // Prerequisites are checked before any data is read.
  const int first = stage == "all" ? 1 : std::stoi(stage);
  const int last = stage == "all" ? 3 : first;
  if (first == 2 && !fs::exists(ckpt1)) {
    throw StageOrderError("stage 2 needs " + ckpt1.string() + "; run train --stage 1 first");
  }
  if (first == 3 && !fs::exists(ckpt2)) {
    throw StageOrderError("stage 3 needs " + ckpt2.string() + "; run train --stage 2 first");
  }
  const Dataset d = open_dataset(c);
  bind_counts(c, d);
  if (first > 1) check_sidecar(c, sidecar, first);
  fs::create_directories(dir);

  const auto train = load(c, d, data::Split::kTrain);
  const auto loss = make_loss(c, train);
  train::TrainLog log(dir / ("train_" + stage + ".jsonl"));
  const train::TrainContext ctx{c.seed, &log};

  // Later checkpoints are stale once an earlier stage is retrained.
  if (first == 1) {
    fs::remove(ckpt2);
    fs::remove(ckpt3);
  } else if (first == 2) {
    fs::remove(ckpt3);
  }
  data::write_file_atomic(sidecar, c.to_json());

  std::vector<std::string> written;
  net::NetworkParams params;
  for (int s = first; s <= last; ++s) {
    if (s == 1) {
      params = train::stage1_train(c.model, train, loss, c.hyper.stage1, ctx);
      train::save_checkpoint(params, ckpt1);
      written.push_back(ckpt1.string());
    } else if (s == 2) {
      if (first == 2) params = train::load_checkpoint(ckpt1);
      params = train::construct_afnet(params, c.model, c.seed);
      for (std::size_t i = 1; i <= net::kBlocks; ++i) {
        if (c.model.connectivity.row_enabled(i - 1)) {
          train::stage2_finetune(params, c.model, i, train, loss, c.hyper.stage2, ctx);
        }
      }
      train::save_checkpoint(params, ckpt2);
      written.push_back(ckpt2.string());
    } else {
      if (first == 3) params = train::load_checkpoint(ckpt2);
      train::stage3_train_fusion(params, c.model, train, loss, c.hyper.stage3, ctx);
      train::save_checkpoint(params, ckpt3);
      written.push_back(ckpt3.string());
    }
  }

  ordered_json j;
  j["stage"] = stage;
  j["checkpoints"] = written;
  j["epochs"] = log.records().size();
  j["final_loss"] = log.records().empty() ? nullptr : ordered_json(log.records().back().loss);
  out << j.dump(2) << "\n";
  return kExitOk;
}

metrics::MetricsReport evaluate(const RunConfig& c, const net::NetworkParams& params, const net::HPNetConfig& model,
                                const data::LoadedSplit& split, std::uint64_t seed, bool fixed_gallery) {
  if (model.task == net::Task::kReid) {
    metrics::CmcOptions options;
    options.trials = c.trials;
    options.seed = seed;
    options.fixed_gallery = fixed_gallery;
    return metrics::evaluate_reid(params, model, split, options);
  }
  return metrics::evaluate_attributes(params, model, split, c.threshold);
}

int cmd_eval(RunConfig c, const std::optional<std::string>& ckpt_flag, const std::optional<std::string>& report,
             const std::optional<std::string>& embeddings, bool fixed_gallery, std::ostream& out,
             std::ostream& err) {
  const fs::path ckpt = ckpt_flag ? fs::path(*ckpt_flag) : default_checkpoint(c);
  if (!fs::exists(ckpt)) {
    throw StageOrderError("checkpoint " + ckpt.string() + " not found; run train --stage all first");
  }
  const Dataset d = open_dataset(c);
  bind_counts(c, d);
  const auto params = load_trained(c, ckpt);
  const auto split = load(c, d, data::parse_split(c.eval_split));
  const auto r = evaluate(c, params, c.model, split, c.seed, fixed_gallery);
  for (const auto& w : r.warnings) err << "warning: " << w << "\n";
  if (embeddings) {
    if (c.model.task != net::Task::kReid) throw UsageError("--embeddings applies to the reid task only");
    metrics::write_embeddings(metrics::embed(params, c.model, split), *embeddings);
  }
  write_report(out, r.to_json(), report);
  return kExitOk;
}

std::map<std::string, double> headline(const metrics::MetricsReport& r) {
  std::map<std::string, double> m;
  if (r.task == "reid") {
    for (const auto& [rank, v] : r.cmc) m["top" + std::to_string(rank)] = v;
  } else {
    m["mA"] = *r.mA;
    m["accuracy"] = *r.accuracy;
    m["precision"] = *r.precision;
    m["recall"] = *r.recall;
    m["f1"] = *r.f1;
  }
  return m;
}

int cmd_ablate(RunConfig c, const std::string& grid, const std::optional<std::string>& only,
               const std::optional<std::string>& seeds_flag, bool fixed_gallery, std::ostream& out,
               std::ostream& err) {
  if (grid != "fig6") throw UsageError("unknown ablation grid '" + grid + "' (expected fig6)");
  std::vector<std::string> names = only ? split_list(*only) : net::Connectivity::ablation_names();
  if (names.empty()) throw UsageError("--only lists no configurations");
  for (const auto& n : names) net::Connectivity::named(n);
  std::vector<std::uint64_t> seeds = c.ablation_seeds;
  if (seeds_flag) {
    seeds.clear();
    for (const auto& s : split_list(*seeds_flag)) {
      try {
        std::size_t used = 0;
        seeds.push_back(std::stoull(s, &used));
        if (used != s.size()) throw std::invalid_argument(s);
      } catch (const std::exception&) {
        throw UsageError("--seeds expects comma-separated integers, got '" + s + "'");
      }
    }
    if (seeds.empty()) throw UsageError("--seeds lists no seeds");
  }

  const Dataset d = open_dataset(c);
  bind_counts(c, d);
  const auto train = load(c, d, data::Split::kTrain);
  const auto evalset = load(c, d, data::parse_split(c.eval_split));
  const auto loss = make_loss(c, train);
  const fs::path dir = fs::path(c.out) / "ablation";
  fs::create_directories(dir);

  std::map<std::string, std::vector<std::map<std::string, double>>> results;
  for (auto seed : seeds) {
    train::PipelineCache cache;
    for (const auto& name : names) {
      net::HPNetConfig model = c.model;
      model.connectivity = net::Connectivity::named(name);
      const train::TrainContext ctx{seed, nullptr};
      const auto params = train::train_all(model, train, loss, c.hyper, ctx, &cache);
      const auto r = evaluate(c, params, model, evalset, seed, fixed_gallery);
      for (const auto& w : r.warnings) err << "warning: " << name << " seed " << seed << ": " << w << "\n";
      data::write_file_atomic(dir / (name + "_seed" + std::to_string(seed) + ".json"), r.to_json());
      results[name].push_back(headline(r));
      err << "ablate: " << name << " seed " << seed << " done\n";
    }
  }

  ordered_json summary;
  summary["grid"] = grid;
  summary["task"] = std::string(net::task_name(c.model.task));
  summary["split"] = c.eval_split;
  summary["seeds"] = seeds;
  summary["rows"] = ordered_json::array();
  std::vector<std::string> columns;
  for (const auto& [k, v] : results.at(names.front()).front()) columns.push_back(k);
  if (c.model.task != net::Task::kReid) columns = {"mA", "accuracy", "precision", "recall", "f1"};

  std::ostringstream table;
  table << std::left << std::setw(22) << "config" << std::setw(14) << "mask";
  for (const auto& col : columns) table << std::right << std::setw(11) << col;
  table << "\n";
  for (const auto& name : names) {
    ordered_json row;
    row["config"] = name;
    row["mask"] = net::Connectivity::named(name).str();
    ordered_json mean, per_seed = ordered_json::array();
    table << std::left << std::setw(22) << name << std::setw(14) << net::Connectivity::named(name).str();
    for (const auto& col : columns) {
      double sum = 0;
      for (const auto& m : results.at(name)) sum += m.at(col);
      const double v = sum / static_cast<double>(results.at(name).size());
      mean[col] = v;
      table << std::right << std::setw(11) << std::fixed << std::setprecision(4) << v;
    }
    table << "\n";
    for (const auto& m : results.at(name)) {
      ordered_json s;
      for (const auto& col : columns) s[col] = m.at(col);
      per_seed.push_back(s);
    }
    row["mean"] = mean;
    row["per_seed"] = per_seed;
    summary["rows"].push_back(row);
  }
  data::write_file_atomic(fs::path(c.out) / "ablation.json", summary.dump(2) + "\n");
  out << table.str();
  return kExitOk;
}

int cmd_gradcheck(const RunConfig& c, const std::string& ops_text, std::size_t instances,
                  const std::optional<std::string>& report, std::ostream& out) {
  std::vector<std::string> ops = ops_text == "all" ? gradcheck_op_names() : split_list(ops_text);
  if (ops.empty()) throw UsageError("--ops lists no operations");
  if (instances == 0) throw UsageError("--instances must be positive");
  const auto reports = run_gradcheck_suite(ops, instances, c.seed);
  ordered_json j;
  j["eps"] = kGradCheckEps;
  j["tolerance"] = kGradCheckTolerance;
  j["seed"] = c.seed;
  j["ops"] = ordered_json::array();
  bool ok = true;
  for (const auto& r : reports) {
    ok = ok && r.passed;
    j["ops"].push_back({{"op", r.op},
                        {"instances", r.instances},
                        {"max_relative_error", r.max_relative_error},
                        {"passed", r.passed}});
  }
  j["passed"] = ok;
  write_report(out, j.dump(2) + "\n", report);
  return ok ? kExitOk : kExitNumeric;
}

int cmd_export_attn(RunConfig c, const std::optional<std::string>& ckpt_flag, const std::string& image,
                    const std::optional<std::string>& dir_flag, std::ostream& out) {
  const auto params = load_trained(c, ckpt_flag ? fs::path(*ckpt_flag) : default_checkpoint(c), true);
  const auto x = data::load_image(image, c.model.input_height, c.model.input_width);
  const Tensor batch({1, 3, c.model.input_height, c.model.input_width},
                     std::vector<float>(x.data().begin(), x.data().end()));
  const fs::path dir = dir_flag ? fs::path(*dir_flag) : fs::path(c.out) / "attention";
  const auto paths = net::export_attention(params, c.model, batch, dir);
  ordered_json j;
  j["directory"] = dir.string();
  j["files"] = ordered_json::array();
  for (const auto& p : paths) j["files"].push_back(p.filename().string());
  out << j.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"hydra: multi-directional attention networks for pedestrian attributes and re-identification"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path;
  Overrides flags;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", flags.seed, "Random seed");
  app.add_option("--threads", flags.threads, "Worker threads (0: all hardware threads)");
  app.add_option("--out", flags.out, "Run output directory");
  app.add_option("--manifest", flags.manifest, "Dataset manifest path");
  app.add_option("--split-file", flags.split, "Split file path");
  app.add_option("--mask", flags.mask, "Connectivity: layout name or rows like 111,010,001");
  app.add_option("--task", flags.task, "attributes or reid");

  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset next to the manifest path");
  std::optional<std::string> spec_path;
  std::string preset = "default";
  synth->add_option("--spec", spec_path, "Synthetic spec JSON");
  synth->add_option("--preset", preset, "default or reid");

  auto* split = app.add_subcommand("split", "Write a tracklet or identity split");

  auto* train = app.add_subcommand("train", "Run training stages");
  std::string stage;
  train->add_option("--stage", stage, "1, 2, 3 or all")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a trained checkpoint");
  std::optional<std::string> ckpt, report, embeddings, eval_split;
  bool fixed_gallery = false;
  eval->add_option("--checkpoint", ckpt, "Checkpoint (default <out>/final.ckpt)");
  eval->add_option("--split", eval_split, "train, val or test");
  eval->add_option("--report", report, "Also write the report here");
  eval->add_option("--embeddings", embeddings, "Dump reid embeddings here");
  eval->add_flag("--fixed-gallery", fixed_gallery, "Rank against the whole gallery once");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the ablation layouts");
  std::string grid;
  std::optional<std::string> only, seeds;
  bool ablate_fixed = false;
  ablate->add_option("--grid", grid, "Ablation grid (fig6)")->required();
  ablate->add_option("--only", only, "Comma-separated subset of layout names");
  ablate->add_option("--seeds", seeds, "Comma-separated training seeds");
  ablate->add_option("--split", eval_split, "Evaluation split");
  ablate->add_flag("--fixed-gallery", ablate_fixed, "Rank against the whole gallery once");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every primitive");
  std::string ops = "all";
  std::size_t instances = 20;
  std::optional<std::string> grad_report;
  gradcheck->add_option("--ops", ops, "all or a comma-separated list");
  gradcheck->add_option("--instances", instances, "Random instances per op");
  gradcheck->add_option("--report", grad_report, "Also write the report here");

  auto* export_attn = app.add_subcommand("export-attn", "Write attention maps of one image as PGM files");
  std::string image;
  std::optional<std::string> attn_dir, attn_ckpt;
  export_attn->add_option("--checkpoint", attn_ckpt, "Checkpoint (default <out>/final.ckpt)");
  export_attn->add_option("--image", image, "Input PPM image")->required();
  export_attn->add_option("--dir", attn_dir, "Output directory (default <out>/attention)");

  std::vector<const char*> argv{"hydra"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    err << "error: " << e.what() << "\n" << "run with --help for usage\n";
    return kExitUsage;
  }

  try {
    RunConfig c = resolve_config(config_path, flags);
    if (eval_split) c.eval_split = *eval_split;
    data::parse_split(c.eval_split);
    set_thread_count(c.threads);
    if (*synth) return cmd_synth(c, flags, spec_path, preset, out);
    if (*split) return cmd_split(c, out);
    if (*train) return cmd_train(c, stage, out);
    if (*eval) return cmd_eval(c, ckpt, report, embeddings, fixed_gallery, out, err);
    if (*ablate) return cmd_ablate(c, grid, only, seeds, ablate_fixed, out, err);
    if (*gradcheck) return cmd_gradcheck(c, ops, instances, grad_report, out);
    if (*export_attn) return cmd_export_attn(c, attn_ckpt, image, attn_dir, out);
    throw UsageError("no command given");
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
}

}  // namespace hydra::cli
