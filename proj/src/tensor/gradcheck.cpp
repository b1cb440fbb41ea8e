#include "hydra/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "hydra/errors.hpp"
#include "hydra/ops.hpp"
#include "hydra/random.hpp"

namespace hydra {

double grad_check(const Graph64& graph, const std::vector<Tensor64>& inputs, double eps) {
  if (!(eps > 0)) throw ParameterError("grad_check: eps must be positive");

  // Work on private copies so the caller's tensors are untouched.
  std::vector<Tensor64> leaves;
  leaves.reserve(inputs.size());
  for (const auto& in : inputs) leaves.push_back(cast<double>(in, in.requires_grad()));

  Tensor64 loss = graph(leaves);
  loss.backward();

  double worst = 0;
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    std::vector<double> analytic(leaf.numel(), 0.0);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto at = [&](double step) {
        values[i] = saved + step;
        return graph(leaves).item();
      };
      double numeric = 0;
      {
        NoGradGuard guard;
        // Five-point stencil: the plain central difference leaves an O(eps^2)
        // error that dominates gradients near 1e-6 at eps = 1e-3.
        numeric = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps);
      }
      values[i] = saved;
      const double a = analytic[i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

namespace {

Tensor64 random_tensor(Engine& eng, Shape dims, double lo, double hi, bool requires_grad) {
  std::vector<double> v(shape_numel(dims));
  for (auto& x : v) x = uniform(eng, lo, hi);
  return Tensor64(std::move(dims), std::move(v), requires_grad);
}

// Values bounded away from zero by `margin`.
Tensor64 signed_away_from_zero(Engine& eng, Shape dims, double margin, bool requires_grad) {
  std::vector<double> v(shape_numel(dims));
  for (auto& x : v) {
    const double mag = uniform(eng, margin, 1.0);
    x = uniform(eng, 0, 1) < 0.5 ? -mag : mag;
  }
  return Tensor64(std::move(dims), std::move(v), requires_grad);
}

// Distinct values separated by at least `gap`, randomly placed.
Tensor64 distinct_values(Engine& eng, Shape dims, double gap, bool requires_grad) {
  const std::size_t n = shape_numel(dims);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = (static_cast<double>(i) - n / 2.0) * gap;
  std::shuffle(v.begin(), v.end(), eng);
  return Tensor64(std::move(dims), std::move(v), requires_grad);
}

std::size_t pick(Engine& eng, std::size_t lo, std::size_t hi) {
  return lo + uniform_index(eng, hi - lo + 1);
}

// Scalarizes an op output with a fixed random projection so every output
// element contributes a distinct weight.
Graph64 projected(std::function<Tensor64(const std::vector<Tensor64>&)> op, Shape out_dims,
                  Engine& eng) {
  auto proj = random_tensor(eng, std::move(out_dims), -1.0, 1.0, false);
  return [op = std::move(op), proj](const std::vector<Tensor64>& in) {
    return sum(mul(op(in), proj));
  };
}

struct Instance {
  Graph64 graph;
  std::vector<Tensor64> inputs;
};

using Generator = std::function<Instance(Engine&, double eps)>;

Instance conv_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 2), c = pick(eng, 1, 3), k = pick(eng, 1, 3);
  const std::size_t ks = uniform(eng, 0, 1) < 0.5 ? 1 : 3;
  const std::size_t stride = pick(eng, 1, 2);
  const std::size_t pad = ks == 3 ? pick(eng, 0, 1) : 0;
  const std::size_t h = pick(eng, 3, 6), w = pick(eng, 3, 6);
  auto x = random_tensor(eng, {n, c, h, w}, -1, 1, true);
  auto wt = random_tensor(eng, {k, c, ks, ks}, -1, 1, true);
  auto b = random_tensor(eng, {k}, -1, 1, true);
  const std::size_t oh = (h + 2 * pad - ks) / stride + 1, ow = (w + 2 * pad - ks) / stride + 1;
  auto g = projected(
      [stride, pad](const std::vector<Tensor64>& in) { return conv2d(in[0], in[1], in[2], stride, pad); },
      {n, k, oh, ow}, eng);
  return {g, {x, wt, b}};
}

Instance batchnorm_instance(Engine& eng, BnMode mode) {
  const std::size_t n = pick(eng, 2, 3), c = pick(eng, 1, 3), h = pick(eng, 1, 3), w = pick(eng, 2, 3);
  auto x = random_tensor(eng, {n, c, h, w}, -2, 2, true);
  auto gamma = random_tensor(eng, {c}, 0.5, 1.5, true);
  auto beta = random_tensor(eng, {c}, -0.5, 0.5, true);
  auto mean = random_tensor(eng, {c}, -0.5, 0.5, false);
  auto var = random_tensor(eng, {c}, 0.5, 1.5, false);
  auto g = projected(
      [mode, mean, var](const std::vector<Tensor64>& in) {
        BatchNormStats<double> stats{mean.clone(), var.clone()};
        return batchnorm(in[0], in[1], in[2], &stats, mode);
      },
      {n, c, h, w}, eng);
  return {g, {x, gamma, beta}};
}

Instance relu_instance(Engine& eng, double eps) {
  Shape dims{pick(eng, 1, 2), pick(eng, 1, 3), pick(eng, 1, 4), pick(eng, 1, 4)};
  auto x = signed_away_from_zero(eng, dims, 10 * eps, true);
  auto g = projected([](const std::vector<Tensor64>& in) { return relu(in[0]); }, dims, eng);
  return {g, {x}};
}

Instance mul_broadcast_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 2), c = pick(eng, 1, 4), h = pick(eng, 1, 4), w = pick(eng, 1, 4);
  auto a = random_tensor(eng, {n, 1, h, w}, -1, 1, true);
  auto f = random_tensor(eng, {n, c, h, w}, -1, 1, true);
  auto g = projected([](const std::vector<Tensor64>& in) { return mul_broadcast(in[0], in[1]); },
                     {n, c, h, w}, eng);
  return {g, {a, f}};
}

Instance mul_instance(Engine& eng, double) {
  Shape dims{pick(eng, 1, 3), pick(eng, 1, 5)};
  auto a = random_tensor(eng, dims, -1, 1, true);
  auto b = random_tensor(eng, dims, -1, 1, true);
  auto g = projected([](const std::vector<Tensor64>& in) { return mul(in[0], in[1]); }, dims, eng);
  return {g, {a, b}};
}

Instance sum_instance(Engine& eng, double) {
  Shape dims{pick(eng, 1, 3), pick(eng, 1, 3), pick(eng, 1, 3)};
  auto x = random_tensor(eng, dims, -1, 1, true);
  // sum of squares so the gradient depends on the input
  Graph64 g = [](const std::vector<Tensor64>& in) { return sum(mul(in[0], in[0])); };
  return {g, {x}};
}

Instance concat_channels_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 2), h = pick(eng, 1, 3), w = pick(eng, 1, 3);
  const std::size_t parts = pick(eng, 1, 3);
  std::vector<Tensor64> in;
  std::size_t total = 0;
  for (std::size_t i = 0; i < parts; ++i) {
    const std::size_t c = pick(eng, 1, 3);
    total += c;
    in.push_back(random_tensor(eng, {n, c, h, w}, -1, 1, true));
  }
  auto g = projected([](const std::vector<Tensor64>& v) { return concat_channels(v); },
                     {n, total, h, w}, eng);
  return {g, in};
}

Instance slice_channels_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 2), c = pick(eng, 2, 5), h = pick(eng, 1, 3), w = pick(eng, 1, 3);
  const std::size_t begin = pick(eng, 0, c - 1);
  const std::size_t count = pick(eng, 1, c - begin);
  auto x = random_tensor(eng, {n, c, h, w}, -1, 1, true);
  auto g = projected(
      [begin, count](const std::vector<Tensor64>& in) { return slice_channels(in[0], begin, count); },
      {n, count, h, w}, eng);
  return {g, {x}};
}

Instance concat_batch_instance(Engine& eng, double) {
  const std::size_t c = pick(eng, 1, 3), h = pick(eng, 1, 3), w = pick(eng, 1, 3);
  const std::size_t parts = pick(eng, 1, 3);
  std::vector<Tensor64> in;
  std::size_t total = 0;
  for (std::size_t i = 0; i < parts; ++i) {
    const std::size_t n = pick(eng, 1, 2);
    total += n;
    in.push_back(random_tensor(eng, {n, c, h, w}, -1, 1, true));
  }
  auto g = projected([](const std::vector<Tensor64>& v) { return concat_batch(v); }, {total, c, h, w},
                     eng);
  return {g, in};
}

Instance batch_to_channels_instance(Engine& eng, double) {
  const std::size_t groups = pick(eng, 1, 4), n = pick(eng, 1, 3), c = pick(eng, 1, 4);
  auto x = random_tensor(eng, {groups * n, c}, -1, 1, true);
  auto g = projected(
      [groups](const std::vector<Tensor64>& in) { return batch_to_channels(in[0], groups); },
      {n, groups * c}, eng);
  return {g, {x}};
}

Instance gap_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 2), c = pick(eng, 1, 3), h = pick(eng, 1, 4), w = pick(eng, 1, 4);
  auto x = random_tensor(eng, {n, c, h, w}, -1, 1, true);
  auto g = projected([](const std::vector<Tensor64>& in) { return global_avg_pool(in[0]); }, {n, c},
                     eng);
  return {g, {x}};
}

Instance fc_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 3), d = pick(eng, 1, 5), e = pick(eng, 1, 4);
  auto x = random_tensor(eng, {n, d}, -1, 1, true);
  auto w = random_tensor(eng, {d, e}, -1, 1, true);
  auto b = random_tensor(eng, {e}, -1, 1, true);
  auto g = projected([](const std::vector<Tensor64>& in) { return fully_connected(in[0], in[1], in[2]); },
                     {n, e}, eng);
  return {g, {x, w, b}};
}

Instance max_pool_instance(Engine& eng, double eps) {
  const std::size_t n = pick(eng, 1, 2), c = pick(eng, 1, 2);
  const std::size_t k = pick(eng, 1, 3), stride = pick(eng, 1, 2);
  const std::size_t pad = k > 1 ? pick(eng, 0, k / 2) : 0;
  const std::size_t h = pick(eng, k, k + 3), w = pick(eng, k, k + 3);
  auto x = distinct_values(eng, {n, c, h, w}, 20 * eps, true);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
  auto g = projected(
      [k, stride, pad](const std::vector<Tensor64>& in) { return max_pool(in[0], k, stride, pad); },
      {n, c, oh, ow}, eng);
  return {g, {x}};
}

Instance resize_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 2), c = pick(eng, 1, 2), h = pick(eng, 1, 5), w = pick(eng, 1, 5);
  const std::size_t oh = pick(eng, 1, 7), ow = pick(eng, 1, 7);
  auto x = random_tensor(eng, {n, c, h, w}, -1, 1, true);
  auto g = projected(
      [oh, ow](const std::vector<Tensor64>& in) { return bilinear_resize(in[0], oh, ow); },
      {n, c, oh, ow}, eng);
  return {g, {x}};
}

Instance weighted_bce_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 4), m = pick(eng, 1, 5);
  auto z = random_tensor(eng, {n, m}, -3, 3, true);
  std::vector<std::uint8_t> y(n * m);
  for (auto& v : y) v = uniform(eng, 0, 1) < 0.5 ? 1 : 0;
  std::vector<double> pw(m), nw(m);
  for (std::size_t j = 0; j < m; ++j) {
    const double r = uniform(eng, 0.05, 0.95);
    pw[j] = std::exp(1 - r);
    nw[j] = std::exp(r);
  }
  Graph64 g = [y, pw, nw](const std::vector<Tensor64>& in) {
    return weighted_bce_with_logits(in[0], std::span<const std::uint8_t>(y), std::span<const double>(pw),
                                    std::span<const double>(nw));
  };
  return {g, {z}};
}

Instance softmax_ce_instance(Engine& eng, double) {
  const std::size_t n = pick(eng, 1, 4), k = pick(eng, 2, 6);
  auto z = random_tensor(eng, {n, k}, -3, 3, true);
  std::vector<int> t(n);
  for (auto& v : t) v = static_cast<int>(uniform_index(eng, k));
  Graph64 g = [t](const std::vector<Tensor64>& in) {
    return softmax_cross_entropy(in[0], std::span<const int>(t));
  };
  return {g, {z}};
}

// True when no single-coordinate perturbation the checker makes of the inputs flips the
// sign of any output of `pre`. Batch statistics couple every pre-activation
// to every input, so a margin at the unperturbed point is not enough.
bool kink_free(const Graph64& pre, std::vector<Tensor64> inputs, double eps) {
  NoGradGuard guard;
  const auto base = pre(inputs);
  const std::vector<double> center(base.data().begin(), base.data().end());
  for (double v : center) {
    if (std::abs(v) < 10 * eps) return false;
  }
  for (auto& t : inputs) {
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      for (double step : {eps, -eps, 2 * eps, -2 * eps}) {
        values[i] = saved + step;
        const auto moved = pre(inputs);
        auto out = moved.data();
        for (std::size_t j = 0; j < out.size(); ++j) {
          if ((out[j] > 0) != (center[j] > 0)) {
            values[i] = saved;
            return false;
          }
        }
      }
      values[i] = saved;
    }
  }
  return true;
}

// conv -> BN(train) -> ReLU -> GAP, redrawn until the finite differences
// cannot cross the ReLU kink.
Instance composite_instance(Engine& eng, double eps) {
  for (;;) {
    const std::size_t n = 2, c = pick(eng, 1, 2), k = pick(eng, 1, 3), h = pick(eng, 3, 4), w = pick(eng, 3, 4);
    auto x = random_tensor(eng, {n, c, h, w}, -1, 1, true);
    auto wt = random_tensor(eng, {k, c, 3, 3}, -1, 1, true);
    auto b = random_tensor(eng, {k}, -1, 1, true);
    auto gamma = random_tensor(eng, {k}, 0.5, 1.5, true);
    auto beta = random_tensor(eng, {k}, -0.5, 0.5, true);
    auto pre = [](const std::vector<Tensor64>& in) {
      return batchnorm(conv2d(in[0], in[1], in[2], 1, 1), in[3], in[4], static_cast<BatchNormStats<double>*>(nullptr), BnMode::kTrain);
    };
    std::vector<Tensor64> inputs{x, wt, b, gamma, beta};
    if (!kink_free(pre, inputs, eps)) continue;
    auto g = projected([pre](const std::vector<Tensor64>& in) { return global_avg_pool(relu(pre(in))); },
                       {n, k}, eng);
    return {g, inputs};
  }
}

const std::map<std::string, Generator>& generators() {
  static const std::map<std::string, Generator> table = {
      {"batchnorm_eval", [](Engine& e, double) { return batchnorm_instance(e, BnMode::kEval); }},
      {"batchnorm_train", [](Engine& e, double) { return batchnorm_instance(e, BnMode::kTrain); }},
      {"batch_to_channels", batch_to_channels_instance},
      {"bilinear_resize", resize_instance},
      {"composite", composite_instance},
      {"concat_batch", concat_batch_instance},
      {"concat_channels", concat_channels_instance},
      {"conv2d", conv_instance},
      {"fully_connected", fc_instance},
      {"global_avg_pool", gap_instance},
      {"max_pool", max_pool_instance},
      {"mul", mul_instance},
      {"mul_broadcast", mul_broadcast_instance},
      {"relu", relu_instance},
      {"slice_channels", slice_channels_instance},
      {"softmax_cross_entropy", softmax_ce_instance},
      {"sum", sum_instance},
      {"weighted_bce", weighted_bce_instance},
  };
  return table;
}

}  // namespace

std::vector<std::string> gradcheck_op_names() {
  std::vector<std::string> names;
  for (const auto& [name, gen] : generators()) names.push_back(name);
  return names;
}

std::vector<OpCheckReport> run_gradcheck_suite(const std::vector<std::string>& ops,
                                               std::size_t instances, std::uint64_t seed, double eps,
                                               double tolerance) {
  const auto& table = generators();
  std::vector<OpCheckReport> reports;
  for (const auto& op : ops) {
    auto it = table.find(op);
    if (it == table.end()) throw UsageError("unknown gradcheck op '" + op + "'");
    OpCheckReport rep;
    rep.op = op;
    Engine eng = make_engine(seed, op);
    for (std::size_t i = 0; i < instances; ++i) {
      Instance inst = it->second(eng, eps);
      rep.max_relative_error = std::max(rep.max_relative_error, grad_check(inst.graph, inst.inputs, eps));
      ++rep.instances;
    }
    rep.passed = rep.max_relative_error < tolerance;
    reports.push_back(rep);
  }
  return reports;
}

}  // namespace hydra
