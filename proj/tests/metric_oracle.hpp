#pragma once

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <set>
#include <vector>

namespace hydra::checks {

// Reference evaluator written against set semantics rather than counters.
struct Reference {
  double mA, acc, prec, rec, f1;
};

inline Reference brute_force(const std::vector<std::vector<int>>& y, const std::vector<std::vector<int>>& f) {
  const std::size_t n = y.size(), m = y[0].size();
  Reference r{};
  for (std::size_t j = 0; j < m; ++j) {
    std::set<std::size_t> pos, neg;
    for (std::size_t i = 0; i < n; ++i) (y[i][j] ? pos : neg).insert(i);
    double hit_pos = 0, hit_neg = 0;
    for (auto i : pos) hit_pos += f[i][j] == 1;
    for (auto i : neg) hit_neg += f[i][j] == 0;
    std::vector<double> terms;
    if (!pos.empty()) terms.push_back(hit_pos / pos.size());
    if (!neg.empty()) terms.push_back(hit_neg / neg.size());
    double s = 0;
    for (double t : terms) s += t;
    r.mA += s / terms.size();
  }
  r.mA /= m;
  for (std::size_t i = 0; i < n; ++i) {
    std::set<std::size_t> ys, fs, inter, uni;
    for (std::size_t j = 0; j < m; ++j) {
      if (y[i][j]) ys.insert(j);
      if (f[i][j]) fs.insert(j);
    }
    std::set_intersection(ys.begin(), ys.end(), fs.begin(), fs.end(), std::inserter(inter, inter.end()));
    std::set_union(ys.begin(), ys.end(), fs.begin(), fs.end(), std::inserter(uni, uni.end()));
    r.acc += uni.empty() ? 1.0 : static_cast<double>(inter.size()) / uni.size();
    if (fs.empty()) r.prec += ys.empty() ? 1.0 : 0.0;
    else r.prec += static_cast<double>(inter.size()) / fs.size();
    if (ys.empty()) r.rec += fs.empty() ? 1.0 : 0.0;
    else r.rec += static_cast<double>(inter.size()) / ys.size();
  }
  r.acc /= n;
  r.prec /= n;
  r.rec /= n;
  r.f1 = (r.prec + r.rec) == 0 ? 0.0 : 2 * r.prec * r.rec / (r.prec + r.rec);
  return r;
}

inline std::vector<std::uint8_t> flatten(const std::vector<std::vector<int>>& v) {
  std::vector<std::uint8_t> out;
  for (const auto& row : v) {
    for (int x : row) out.push_back(static_cast<std::uint8_t>(x));
  }
  return out;
}

}  // namespace hydra::checks
