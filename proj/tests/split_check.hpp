#pragma once

#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>

#include "hydra/datakit.hpp"
#include "hydra/errors.hpp"
#include "hydra/random.hpp"

namespace hydra::checks {

struct SplitSweep {
  std::size_t datasets = 0;
  std::size_t feasible = 0;
  std::size_t infeasible_reported = 0;
  std::size_t integrity_failures = 0;
  std::size_t ratio_failures = 0;
  std::size_t coverage_failures = 0;
  std::string first_failure;
};

// Random small datasets (labels only) split with random seeds. A split must
// either satisfy integrity, ratio and coverage, or raise InfeasibleError.
inline SplitSweep sweep_random_splits(std::size_t count, std::uint64_t seed) {
  SplitSweep out;
  Engine eng = make_engine(seed, "split-sweep");
  for (std::size_t d = 0; d < count; ++d) {
    data::SynthSpec spec = data::SynthSpec::defaults();
    spec.num_identities = 5 + uniform_index(eng, 40);
    spec.cameras = 1 + uniform_index(eng, 3);
    spec.images_per_tracklet = 1 + uniform_index(eng, 4);
    spec.attributes_per_identity = uniform_index(eng, 2) == 1;
    for (auto& a : spec.attributes) a.positive_rate = uniform(eng, 0.03, 0.97);
    spec.seed = 1000 + d;
    const auto manifest = data::plan_synthetic(spec);
    ++out.datasets;
    data::SplitAssignment split;
    try {
      split = data::tracklet_split(manifest, 77 + d);
    } catch (const InfeasibleError&) {
      ++out.infeasible_reported;
      continue;
    }
    ++out.feasible;
    auto fail = [&](std::size_t& counter, const std::string& what) {
      ++counter;
      if (out.first_failure.empty()) out.first_failure = "dataset " + std::to_string(d) + ": " + what;
    };

    std::map<std::int64_t, std::set<data::Split>> seen;
    std::array<std::size_t, 3> tracklets{};
    for (const auto& [t, s] : split.tracklets) ++tracklets[static_cast<int>(s)];
    const data::Split all[] = {data::Split::kTrain, data::Split::kVal, data::Split::kTest};
    for (auto s : all) {
      for (auto i : split.indices(manifest, s)) seen[manifest.records[i].tracklet].insert(s);
    }
    std::size_t covered = 0;
    for (const auto& [t, splits] : seen) {
      covered += 1;
      if (splits.size() != 1) fail(out.integrity_failures, "tracklet " + std::to_string(t) + " straddles splits");
    }
    if (covered != split.tracklets.size()) fail(out.integrity_failures, "tracklet count mismatch");

    const double total = static_cast<double>(split.tracklets.size());
    const double target[] = {0.8 * total, 0.1 * total, 0.1 * total};
    for (int s = 0; s < 3; ++s) {
      if (std::abs(static_cast<double>(tracklets[s]) - target[s]) > 1.0) {
        fail(out.ratio_failures, "split " + std::to_string(s) + " holds " + std::to_string(tracklets[s]) +
                                     " tracklets, target " + std::to_string(target[s]));
      }
    }
    for (auto s : all) {
      const auto rows = split.indices(manifest, s);
      for (std::size_t a = 0; a < manifest.attributes.size(); ++a) {
        bool pos = false, neg = false;
        for (auto i : rows) (manifest.records[i].attrs[a] ? pos : neg) = true;
        if (!pos || !neg) fail(out.coverage_failures, "attribute " + manifest.attributes[a] + " uncovered");
      }
    }
  }
  return out;
}

}  // namespace hydra::checks
