#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "corelm/tensor.hpp"

namespace corelm {

// Boolean keep-mask over an m x n score matrix; false entries are excluded
// from the softmax and come out exactly zero.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  bool allowed(std::size_t i, std::size_t j) const { return keep[i * cols + j] != 0; }

  static Mask causal(std::size_t n);
  static Mask all(std::size_t rows, std::size_t cols);
};

// All ops are pure functions of their inputs. When a tape is active on the
// calling thread and any input requires a gradient, the op records its
// adjoint and the result requires a gradient too.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[..., d] + bias[d], broadcast over the leading dimensions only.
Tensor add_bias(const Tensor& x, const Tensor& bias);
// x W + b for x[rows x in], W[in x out], b[out].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr);
Tensor log_softmax_rows(const Tensor& x);

// Normalizes over the last dimension with the population variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Head h gets columns [h*w, (h+1)*w) with w = cols / n_heads.
std::vector<Tensor> split_heads(const Tensor& x, std::size_t n_heads);
Tensor concat_heads(std::span<const Tensor> heads);

// Rows of `table` selected by index; the adjoint scatter-adds.
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices);

// (1 - g) * a + g * b. g is either [rows x 1] (one coefficient per row,
// broadcast across the row) or the same shape as a.
Tensor blend(const Tensor& a, const Tensor& b, const Tensor& g);

Tensor sum(const Tensor& x);

enum class Reduction { kMean, kSum };

// Per-row negative log-softmax at the target index. Targets equal to
// `ignore_index` are skipped; the mean is over the remaining rows.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets,
                     Reduction reduction = Reduction::kMean, std::int64_t ignore_index = -1);

}  // namespace corelm
