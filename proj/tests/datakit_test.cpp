#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "hydra/datakit.hpp"
#include "hydra/errors.hpp"
#include "hydra/metrics.hpp"
#include "hydra/raster.hpp"
#include "split_check.hpp"

using namespace hydra;
using namespace hydra::data;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("hydra_datakit_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

Manifest small_manifest() {
  Manifest m;
  m.attributes = {"a", "b"};
  m.records.push_back({"images/000000.ppm", {1, 0}, 3, 6, 0, 0, 64, 96});
  m.records.push_back({"images/000001.ppm", {0, 1}, 3, 7, 1, 1, 64, 96});
  return m;
}

// Tracklets t = 0..n-1, one identity each, attribute bit alternating.
Manifest tracklet_manifest(std::size_t n) {
  Manifest m;
  m.attributes = {"x"};
  for (std::size_t t = 0; t < n; ++t) {
    for (int k = 0; k < 2; ++k) {
      m.records.push_back({"i.ppm", {static_cast<std::uint8_t>((t + k) % 2)}, static_cast<std::int64_t>(t),
                           static_cast<std::int64_t>(t), 0, 0, 8, 8});
    }
  }
  return m;
}

Raster solid(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  Raster out{w, h, 3, {}};
  for (std::size_t i = 0; i < w * h; ++i) out.pixels.insert(out.pixels.end(), {r, g, b});
  return out;
}

}  // namespace

TEST(Manifest, RoundTrip) {
  const auto m = small_manifest();
  EXPECT_EQ(parse_manifest(format_manifest(m)), m);
  const auto dir = scratch("manifest");
  write_manifest(m, dir / "manifest.jsonl");
  EXPECT_EQ(read_manifest(dir / "manifest.jsonl"), m);
}

TEST(Manifest, EmptyAfterHeader) {
  const auto m = parse_manifest("{\"attributes\": [\"a\"], \"version\": 1}\n");
  EXPECT_EQ(m.attributes, std::vector<std::string>{"a"});
  EXPECT_TRUE(m.records.empty());
}

TEST(Manifest, ErrorsCarryLineNumbers) {
  const std::string header = "{\"attributes\": [\"a\", \"b\"], \"version\": 1}\n";
  const std::string good =
      "{\"path\": \"p.ppm\", \"attrs\": [1, 0], \"id\": 1, \"tracklet\": 1, \"camera\": 0, \"scene\": 0, \"w\": 8, "
      "\"h\": 8}\n";
  auto expect_line = [](const std::string& text, const std::string& where) {
    try {
      parse_manifest(text, "m.jsonl");
      FAIL() << "accepted: " << text;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(where), std::string::npos) << e.what();
    }
  };
  expect_line(header + good + "{\"path\": \"p.ppm\", \"attrs\": [1], \"id\": 1, \"tracklet\": 1, \"camera\": 0, "
                              "\"scene\": 0, \"w\": 8, \"h\": 8}\n",
              "m.jsonl:3");
  expect_line(header + "{\"path\": \"p.ppm\", \"attrs\": [1, 2], \"id\": 1, \"tracklet\": 1, \"camera\": 0, "
                       "\"scene\": 0, \"w\": 8, \"h\": 8}\n",
              "m.jsonl:2");
  expect_line(header + "{\"path\": \"p.ppm\"}\n", "m.jsonl:2");
  expect_line(header + "not json\n", "m.jsonl:2");
  expect_line("{\"attributes\": [\"a\"], \"version\": 2}\n", "m.jsonl:1");
  expect_line("", "m.jsonl");
}

TEST(Split, TenTrackletsCutEightOneOne) {
  const auto m = tracklet_manifest(10);
  const auto s = tracklet_split(m, 5);
  std::array<int, 3> counts{};
  for (const auto& [t, which] : s.tracklets) ++counts[static_cast<int>(which)];
  EXPECT_EQ(counts, (std::array<int, 3>{8, 1, 1}));
  EXPECT_EQ(tracklet_split(m, 5), s);
  EXPECT_EQ(parse_split_file(format_split(s)), s);
}

TEST(Split, IntegrityRatioAndCoverageOverRandomDatasets) {
  const auto sweep = checks::sweep_random_splits(100, 3);
  EXPECT_EQ(sweep.datasets, 100u);
  EXPECT_EQ(sweep.integrity_failures, 0u) << sweep.first_failure;
  EXPECT_EQ(sweep.ratio_failures, 0u) << sweep.first_failure;
  EXPECT_EQ(sweep.coverage_failures, 0u) << sweep.first_failure;
  EXPECT_GT(sweep.feasible, 0u);
  EXPECT_GT(sweep.infeasible_reported, 0u);
  EXPECT_EQ(sweep.feasible + sweep.infeasible_reported, sweep.datasets);
}

TEST(Split, InfeasibleCasesAreReported) {
  EXPECT_THROW(tracklet_split(tracklet_manifest(9), 1), InfeasibleError);
  auto m = tracklet_manifest(12);
  for (auto& r : m.records) r.attrs[0] = 1;
  try {
    tracklet_split(m, 1);
    FAIL() << "constant attribute accepted";
  } catch (const InfeasibleError& e) {
    EXPECT_NE(std::string(e.what()).find("x"), std::string::npos) << e.what();
  }
  auto mixed = tracklet_manifest(12);
  mixed.records[1].id = 99;
  EXPECT_THROW(tracklet_split(mixed, 1), FormatError);
}

TEST(Synth, ByteIdenticalAcrossRuns) {
  auto spec = SynthSpec::defaults();
  spec.num_identities = 6;
  spec.images_per_tracklet = 2;
  const auto a = scratch("synth_a"), b = scratch("synth_b");
  generate_synthetic(spec, a);
  generate_synthetic(spec, b);
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(entry.path(), a);
    EXPECT_EQ(read_file_bytes(entry.path()), read_file_bytes(b / rel)) << rel;
  }
  EXPECT_EQ(read_manifest(a / "manifest.jsonl").records.size(), 24u);
  EXPECT_EQ(parse_synth_spec(format_synth_spec(spec)).attributes.size(), spec.attributes.size());
}

TEST(Synth, PositiveRateConcentrates) {
  auto spec = SynthSpec::defaults();
  spec.num_identities = 100;
  spec.images_per_tracklet = 10;
  for (auto& a : spec.attributes) a.positive_rate = 0.5;
  const auto m = plan_synthetic(spec);
  ASSERT_EQ(m.records.size(), 2000u);
  for (std::size_t a = 0; a < m.attributes.size(); ++a) {
    double pos = 0;
    for (const auto& r : m.records) pos += r.attrs[a];
    EXPECT_NEAR(pos / 2000.0, 0.5, 0.05) << m.attributes[a];
  }
}

TEST(Synth, ObjectBlobOnlyInPositives) {
  const auto spec = SynthSpec::defaults();
  const std::vector<std::uint8_t> none(spec.attributes.size(), 0);
  for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
    if (spec.attributes[a].level != Level::kObject) continue;
    auto with = none;
    with[a] = 1;
    const std::size_t side = spec.attributes[a].size;
    for (std::size_t k = 0; k < 10; ++k) {
      const Raster off = render_sample(spec, k, k % 2, k, none);
      const Raster on = render_sample(spec, k, k % 2, k, with);
      // The negative differs from the positive only inside the planted
      // side x side zone.
      std::size_t y0 = spec.height, y1 = 0, x0 = spec.width, x1 = 0, diff = 0;
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
          bool d = false;
          for (std::size_t c = 0; c < 3; ++c) d |= off.at(y, x, c) != on.at(y, x, c);
          if (!d) continue;
          ++diff;
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
        }
      }
      ASSERT_GT(diff, 0u) << spec.attributes[a].name;
      EXPECT_LE(y1 - y0 + 1, side);
      EXPECT_LE(x1 - x0 + 1, side);
    }
  }
}

TEST(Synth, SpecValidation) {
  auto spec = SynthSpec::defaults();
  spec.attributes[0].positive_rate = 1.0;
  EXPECT_THROW(spec.validate(), ConfigError);
  spec = SynthSpec::defaults();
  spec.height = 16;
  EXPECT_THROW(spec.validate(), ConfigError);
  EXPECT_THROW(parse_synth_spec("{\"bogus\": 1}"), ConfigError);
}

TEST(Loader, SolidColorIsConstantPerChannel) {
  const Raster r = solid(20, 30, 255, 0, 128);
  const Tensor t = raster_to_tensor(r, 30, 20, Normalization{{0, 0, 0}, {1, 1, 1}});
  ASSERT_EQ(t.dims(), (Shape{3, 30, 20}));
  const std::size_t plane = 600;
  for (std::size_t i = 0; i < plane; ++i) {
    EXPECT_EQ(t.data()[i], 1.0f);
    EXPECT_EQ(t.data()[plane + i], 0.0f);
    EXPECT_EQ(t.data()[2 * plane + i], 128.0f / 255.0f);
  }
}

TEST(Loader, CodecRoundTrip) {
  Raster r{7, 5, 3, {}};
  for (std::size_t i = 0; i < 7 * 5 * 3; ++i) r.pixels.push_back(static_cast<std::uint8_t>(i * 37 % 256));
  const auto bytes = encode_pnm(r);
  const Raster back = decode_pnm(bytes);
  EXPECT_EQ(back.pixels, r.pixels);
  EXPECT_EQ(encode_pnm(back), bytes);
  const auto dir = scratch("codec");
  write_pnm(dir / "x.ppm", r);
  const Tensor t = load_image(dir / "x.ppm", 5, 7);
  EXPECT_EQ(t.dims(), (Shape{3, 5, 7}));
  EXPECT_THROW(decode_pnm(std::vector<std::uint8_t>{'P', '6', '\n'}), FormatError);
}

TEST(Loader, UniformImageStaysUniformAfterResize) {
  const Raster r = solid(13, 9, 40, 90, 200);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{96, 64}, {5, 3}, {32, 32}}) {
    const Tensor t = raster_to_tensor(r, h, w);
    for (std::size_t c = 0; c < 3; ++c) {
      const auto first = t.data()[c * h * w];
      for (std::size_t i = 0; i < h * w; ++i) EXPECT_FLOAT_EQ(t.data()[c * h * w + i], first);
    }
  }
}

TEST(Loader, LoadRecordsAndSubset) {
  auto spec = SynthSpec::defaults();
  spec.num_identities = 3;
  spec.images_per_tracklet = 2;
  const auto dir = scratch("load");
  const auto m = generate_synthetic(spec, dir);
  std::vector<std::size_t> idx(m.records.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto s = load_records(m, dir, idx, 48, 32);
  EXPECT_EQ(s.images.dims(), (Shape{12, 3, 48, 32}));
  EXPECT_EQ(s.ids[2], m.records[2].id);
  const std::vector<std::size_t> rows{3, 1};
  const auto sub = subset(s, rows);
  EXPECT_EQ(sub.size(), 2u);
  EXPECT_EQ(sub.labels(0)[0], s.labels(3)[0]);
  EXPECT_THROW(load_records(m, dir, std::vector<std::size_t>{}, 48, 32), UsageError);
}

TEST(Reid, IdentityDisjointHalves) {
  const auto m = plan_synthetic(SynthSpec::reid_defaults());
  const auto s = reid_identity_split(m, 4);
  std::set<std::int64_t> train_ids, test_ids;
  for (auto i : s.train) train_ids.insert(m.records[i].id);
  for (auto i : s.test) test_ids.insert(m.records[i].id);
  EXPECT_EQ(train_ids.size(), 50u);
  EXPECT_EQ(test_ids.size(), 50u);
  for (auto id : test_ids) EXPECT_FALSE(train_ids.count(id));
  EXPECT_EQ(s.train.size() + s.test.size(), m.records.size());
}

// A least-squares linear probe on downsampled raw pixels separates the global
// tints but not the randomly polarized object blobs.
TEST(Synth, LinearProbeSeparatesGlobalButNotObjectLevels) {
  auto spec = SynthSpec::defaults();
  spec.num_identities = 100;
  spec.images_per_tracklet = 8;  // 1600 images
  const auto m = plan_synthetic(spec);
  const std::size_t h = 24, w = 16, d = 3 * h * w;
  const std::size_t n = m.records.size();
  Eigen::MatrixXd X(n, d + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = m.records[i];
    const std::size_t k = i % spec.images_per_tracklet;
    const Raster img = render_sample(spec, static_cast<std::size_t>(r.id), static_cast<std::size_t>(r.camera), k, r.attrs);
    const Tensor t = raster_to_tensor(img, h, w);
    for (std::size_t j = 0; j < d; ++j) X(static_cast<long>(i), static_cast<long>(j)) = t.data()[j];
    X(static_cast<long>(i), static_cast<long>(d)) = 1.0;
  }
  // Identities 0..79 train, 80..99 test.
  std::vector<long> tr, te;
  for (std::size_t i = 0; i < n; ++i) (m.records[i].id < 80 ? tr : te).push_back(static_cast<long>(i));
  const Eigen::MatrixXd Xtr = X(tr, Eigen::all), Xte = X(te, Eigen::all);
  const Eigen::MatrixXd K = Xtr * Xtr.transpose() + 10.0 * Eigen::MatrixXd::Identity(Xtr.rows(), Xtr.rows());
  const Eigen::LDLT<Eigen::MatrixXd> solver(K);

  auto level_mA = [&](Level level) {
    std::vector<std::uint8_t> labels, preds;
    std::size_t attrs = 0;
    for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
      if (spec.attributes[a].level != level) continue;
      ++attrs;
    }
    labels.resize(te.size() * attrs);
    preds.resize(te.size() * attrs);
    std::size_t col = 0;
    for (std::size_t a = 0; a < spec.attributes.size(); ++a) {
      if (spec.attributes[a].level != level) continue;
      Eigen::VectorXd y(static_cast<long>(tr.size()));
      for (std::size_t i = 0; i < tr.size(); ++i) y(static_cast<long>(i)) = m.records[tr[i]].attrs[a] ? 1.0 : -1.0;
      const Eigen::VectorXd wts = Xtr.transpose() * solver.solve(y);
      const Eigen::VectorXd s_tr = Xtr * wts, s_te = Xte * wts;
      double mp = 0, mn = 0, np = 0, nn = 0;
      for (std::size_t i = 0; i < tr.size(); ++i) {
        if (y(static_cast<long>(i)) > 0) mp += s_tr(static_cast<long>(i)), ++np;
        else mn += s_tr(static_cast<long>(i)), ++nn;
      }
      const double cut = 0.5 * (mp / np + mn / nn);
      for (std::size_t i = 0; i < te.size(); ++i) {
        labels[i * attrs + col] = m.records[te[i]].attrs[a];
        preds[i * attrs + col] = s_te(static_cast<long>(i)) > cut ? 1 : 0;
      }
      ++col;
    }
    return metrics::mean_accuracy(labels, preds, te.size(), attrs);
  };
  const double global = level_mA(Level::kGlobal);
  const double object = level_mA(Level::kObject);
  EXPECT_GE(global, 0.6);
  EXPECT_LT(object, 0.6);
  std::cout << "linear probe mA: global " << global << ", object " << object << "\n";
}
