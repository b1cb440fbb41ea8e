#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "hydra/tensor.hpp"

namespace hydra {

// All image tensors are row-major N,C,H,W.

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding);

enum class BnMode { kTrain, kEval };

inline constexpr double kBnMomentum = 0.9;
inline constexpr double kBnEpsilon = 1e-5;

// Running statistics live in ordinary tensors so they can be checkpointed
// next to the learnable parameters. Train mode updates them in place:
// running = momentum * running + (1 - momentum) * batch (biased variance).
template <typename T>
struct BatchNormStats {
  BasicTensor<T> mean;
  BasicTensor<T> var;
};

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, BatchNormStats<T>* stats, BnMode mode,
                         double epsilon = kBnEpsilon, double momentum = kBnMomentum);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

// out[n,c,h,w] = attn[n,0,h,w] * feat[n,c,h,w]
template <typename T>
BasicTensor<T> mul_broadcast(const BasicTensor<T>& attn, const BasicTensor<T>& feat);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& parts);

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& input, std::size_t begin, std::size_t count);

// Stacks along the leading (batch) axis.
template <typename T>
BasicTensor<T> concat_batch(const std::vector<BasicTensor<T>>& parts);

// [G*N, C] -> [N, G*C] with out[n, g*C + c] = in[g*N + n, c]. Undoes a
// G-fold batch expansion after pooling.
template <typename T>
BasicTensor<T> batch_to_channels(const BasicTensor<T>& input, std::size_t groups);

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input);

// input [N,D], weight [D,E], bias [E]
template <typename T>
BasicTensor<T> fully_connected(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                               const BasicTensor<T>& bias);

// Padded cells never win. Gradient goes to the first maximum in row-major order.
template <typename T>
BasicTensor<T> max_pool(const BasicTensor<T>& input, std::size_t k, std::size_t stride,
                        std::size_t padding = 0);

// Bilinear interpolation with half-pixel centers (align_corners = false).
template <typename T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, std::size_t out_h, std::size_t out_w);

// Mean over all N*M entries of w * BCE(sigmoid(logit), target), where w is
// pos_weight[m] for target 1 and neg_weight[m] for target 0.
template <typename T>
BasicTensor<T> weighted_bce_with_logits(const BasicTensor<T>& logits,
                                        std::span<const std::uint8_t> targets,
                                        std::span<const double> pos_weight,
                                        std::span<const double> neg_weight);

// Mean softmax cross-entropy against integer class targets.
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> targets);

}  // namespace hydra
