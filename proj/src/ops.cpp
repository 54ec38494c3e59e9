#include "corelm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>

#include "corelm/error.hpp"

namespace corelm {

namespace {

using detail::NodePtr;

GradientTape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  GradientTape* tape = GradientTape::active();
  if (tape == nullptr) return nullptr;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->requires_grad() && t->is_leaf()) tape->register_leaf(*t);
  }
  return tape;
}

void mark_tracked(const Tensor& out) {
  node_of(out)->requires_grad = true;
  node_of(out)->is_leaf = false;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()) + " differ");
  }
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B^T where B is [n x k]
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[m x n] += A^T * B where A is [k x m] and B is [k x n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Mask Mask::causal(std::size_t n) {
  Mask m{n, n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) m.keep[i * n + j] = 1;
  }
  return m;
}

Mask Mask::all(std::size_t rows, std::size_t cols) { return Mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)}; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: cannot multiply " + shape_string(a.shape()) + " by " + shape_string(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  Tensor result = make_result({m, n}, std::move(out));
  if (GradientTape* tape = recording_tape({&a, &b})) {
    mark_tracked(result);
    tape->record("matmul", [an = node_of(a), bn = node_of(b), on = node_of(result), m, n, k] {
      if (on->grad.empty()) return;
      if (an->requires_grad) gemm_nt(m, k, n, on->grad.data(), bn->data.data(), an->grad_buffer().data());
      if (bn->requires_grad) gemm_tn(k, n, m, an->data.data(), on->grad.data(), bn->grad_buffer().data());
    });
  }
  return result;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  auto src = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  Tensor result = make_result({n, m}, std::move(out));
  if (GradientTape* tape = recording_tape({&a})) {
    mark_tracked(result);
    tape->record("transpose", [an = node_of(a), on = node_of(result), m, n] {
      if (on->grad.empty()) return;
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += on->grad[j * m + i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Tensor result = make_result(shape, std::vector<double>(a.data().begin(), a.data().end()));
  if (GradientTape* tape = recording_tape({&a})) {
    mark_tracked(result);
    tape->record("reshape", [an = node_of(a), on = node_of(result)] {
      if (on->grad.empty()) return;
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor result = make_result(a.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&a, &b})) {
    mark_tracked(result);
    tape->record("add", [an = node_of(a), bn = node_of(b), on = node_of(result)] {
      if (on->grad.empty()) return;
      for (const NodePtr& in : {an, bn}) {
        if (!in->requires_grad) continue;
        auto& g = in->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
    });
  }
  return result;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  Tensor result = make_result(a.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&a, &b})) {
    mark_tracked(result);
    tape->record("sub", [an = node_of(a), bn = node_of(b), on = node_of(result)] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= on->grad[i];
      }
    });
  }
  return result;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor result = make_result(a.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&a, &b})) {
    mark_tracked(result);
    tape->record("hadamard", [an = node_of(a), bn = node_of(b), on = node_of(result)] {
      if (on->grad.empty()) return;
      if (an->requires_grad) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * an->data[i];
      }
    });
  }
  return result;
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  Tensor result = make_result(a.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&a})) {
    mark_tracked(result);
    tape->record("scale", [an = node_of(a), on = node_of(result), factor] {
      if (on->grad.empty()) return;
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i] * factor;
    });
  }
  return result;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.numel() != x.cols()) {
    throw ShapeError("add_bias: bias " + shape_string(bias.shape()) + " does not match last dimension of " +
                     shape_string(x.shape()));
  }
  const std::size_t rows = x.rows(), cols = x.cols();
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += b[j];
  Tensor result = make_result(x.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&x, &bias})) {
    mark_tracked(result);
    tape->record("add_bias", [xn = node_of(x), bn = node_of(bias), on = node_of(result), rows, cols] {
      if (on->grad.empty()) return;
      if (xn->requires_grad) {
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->grad_buffer();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < cols; ++j) g[j] += on->grad[i * cols + j];
      }
    });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return add_bias(matmul(x, weight), bias); }

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  Tensor result = make_result(x.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&x})) {
    mark_tracked(result);
    tape->record("relu", [xn = node_of(x), on = node_of(result)] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xn->data[i] > 0.0) g[i] += on->grad[i];
      }
    });
  }
  return result;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.numel());
  auto v = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(v[i]);
  Tensor result = make_result(x.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&x})) {
    mark_tracked(result);
    tape->record("sigmoid", [xn = node_of(x), on = node_of(result)] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = on->data[i];
        g[i] += on->grad[i] * s * (1.0 - s);
      }
    });
  }
  return result;
}

Tensor softmax_rows(const Tensor& x, const Mask* mask) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (mask != nullptr && (mask->rows != rows || mask->cols != cols)) {
    throw ShapeError("softmax_rows: mask " + std::to_string(mask->rows) + "x" + std::to_string(mask->cols) +
                     " does not match " + shape_string(x.shape()));
  }
  auto v = x.data();
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t i = 0; i < rows; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < cols; ++j) {
      if (mask && !mask->allowed(i, j)) continue;
      any = true;
      mx = std::max(mx, v[i * cols + j]);
    }
    if (!any) throw ValueError("softmax_rows: row " + std::to_string(i) + " is fully masked");
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (mask && !mask->allowed(i, j)) continue;
      const double e = std::exp(v[i * cols + j] - mx);
      out[i * cols + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] /= total;
  }
  Tensor result = make_result(x.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&x})) {
    mark_tracked(result);
    tape->record("softmax_rows", [xn = node_of(x), on = node_of(result), rows, cols] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i) {
        const double* y = on->data.data() + i * cols;
        const double* dy = on->grad.data() + i * cols;
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += y[j] * dy[j];
        for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return result;
}

Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t rows = x.rows(), cols = x.cols();
  auto v = x.data();
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = v.data() + i * cols;
    const double mx = *std::max_element(r, r + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(r[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = r[j] - lse;
  }
  Tensor result = make_result(x.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&x})) {
    mark_tracked(result);
    tape->record("log_softmax_rows", [xn = node_of(x), on = node_of(result), rows, cols] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i) {
        const double* y = on->data.data() + i * cols;
        const double* dy = on->grad.data() + i * cols;
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) total += dy[j];
        for (std::size_t j = 0; j < cols; ++j) g[i * cols + j] += dy[j] - std::exp(y[j]) * total;
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (gain.rank() != 1 || gain.numel() != d || bias.rank() != 1 || bias.numel() != d) {
    throw ShapeError("layer_norm: gain " + shape_string(gain.shape()) + " / bias " + shape_string(bias.shape()) +
                     " do not match last dimension of " + shape_string(x.shape()));
  }
  if (!(eps >= 0.0)) throw ValueError("layer_norm: eps must be non-negative");
  auto v = x.data();
  auto gv = gain.data();
  auto bv = bias.data();
  std::vector<double> out(rows * d);
  std::vector<double> xhat(rows * d);
  std::vector<double> inv_std(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* r = v.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += r[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (r[j] - mean) * inv_std[i];
      xhat[i * d + j] = h;
      out[i * d + j] = gv[j] * h + bv[j];
    }
  }
  Tensor result = make_result(x.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&x, &gain, &bias})) {
    mark_tracked(result);
    tape->record("layer_norm", [xn = node_of(x), gn = node_of(gain), bn = node_of(bias), on = node_of(result),
                                xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d] {
      if (on->grad.empty()) return;
      const double* dy = on->grad.data();
      if (gn->requires_grad) {
        auto& gg = gn->grad_buffer();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < d; ++j) gg[j] += dy[i * d + j] * xhat[i * d + j];
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += dy[i * d + j];
      }
      if (xn->requires_grad) {
        auto& gx = xn->grad_buffer();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t i = 0; i < rows; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[i * d + j] * gn->data[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[i * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = dy[i * d + j] * gn->data[j];
            gx[i * d + j] += inv_std[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return result;
}

static Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t width) {
  require_rank2(x, "split_heads");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  std::vector<double> out(rows * width);
  auto v = x.data();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < width; ++j) out[i * width + j] = v[i * cols + begin + j];
  Tensor result = make_result({rows, width}, std::move(out));
  if (GradientTape* tape = recording_tape({&x})) {
    mark_tracked(result);
    tape->record("slice_cols", [xn = node_of(x), on = node_of(result), rows, cols, begin, width] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < width; ++j) g[i * cols + begin + j] += on->grad[i * width + j];
    });
  }
  return result;
}

std::vector<Tensor> split_heads(const Tensor& x, std::size_t n_heads) {
  require_rank2(x, "split_heads");
  const std::size_t cols = x.shape()[1];
  if (n_heads == 0 || cols % n_heads != 0) {
    throw ShapeError("split_heads: width " + std::to_string(cols) + " not divisible by " + std::to_string(n_heads) +
                     " heads");
  }
  const std::size_t width = cols / n_heads;
  std::vector<Tensor> heads;
  heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) heads.push_back(slice_cols(x, h * width, width));
  return heads;
}

Tensor concat_heads(std::span<const Tensor> heads) {
  if (heads.empty()) throw ShapeError("concat_heads: no heads");
  const std::size_t rows = heads[0].rows();
  std::size_t total = 0;
  for (const Tensor& h : heads) {
    require_rank2(h, "concat_heads");
    if (h.rows() != rows) throw ShapeError("concat_heads: heads disagree on row count");
    total += h.cols();
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (const Tensor& h : heads) {
    const std::size_t w = h.cols();
    auto v = h.data();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * total + offset + j] = v[i * w + j];
    offset += w;
  }
  Tensor result = make_result({rows, total}, std::move(out));
  GradientTape* tape = GradientTape::active();
  bool any = false;
  for (const Tensor& h : heads) any = any || h.requires_grad();
  if (tape != nullptr && any) {
    std::vector<NodePtr> nodes;
    for (const Tensor& h : heads) {
      if (h.requires_grad() && h.is_leaf()) tape->register_leaf(h);
      nodes.push_back(node_of(h));
    }
    mark_tracked(result);
    tape->record("concat_heads", [nodes = std::move(nodes), on = node_of(result), rows, total] {
      if (on->grad.empty()) return;
      std::size_t off = 0;
      for (const NodePtr& n : nodes) {
        const std::size_t w = n->shape[1];
        if (n->requires_grad) {
          auto& g = n->grad_buffer();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += on->grad[i * total + off + j];
        }
        off += w;
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> indices) {
  require_rank2(table, "gather_rows");
  if (indices.empty()) throw ShapeError("gather_rows: no indices");
  const std::size_t n = table.shape()[0], d = table.shape()[1];
  std::vector<double> out(indices.size() * d);
  auto v = table.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::int64_t r = indices[i];
    if (r < 0 || static_cast<std::size_t>(r) >= n) {
      throw ValueError("gather_rows: index " + std::to_string(r) + " outside [0, " + std::to_string(n) + ")");
    }
    std::copy_n(v.data() + static_cast<std::size_t>(r) * d, d, out.data() + i * d);
  }
  Tensor result = make_result({indices.size(), d}, std::move(out));
  if (GradientTape* tape = recording_tape({&table})) {
    mark_tracked(result);
    tape->record("gather_rows", [tn = node_of(table), on = node_of(result),
                                 idx = std::vector<std::int64_t>(indices.begin(), indices.end()), d] {
      if (on->grad.empty()) return;
      auto& g = tn->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        double* dst = g.data() + static_cast<std::size_t>(idx[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += on->grad[i * d + j];
      }
    });
  }
  return result;
}

Tensor blend(const Tensor& a, const Tensor& b, const Tensor& g) {
  require_same_shape(a, b, "blend");
  const std::size_t rows = a.rows(), cols = a.cols();
  const bool per_row = g.numel() == rows && g.cols() == 1 && g.shape() != a.shape();
  if (!per_row && g.shape() != a.shape()) {
    throw ShapeError("blend: gate " + shape_string(g.shape()) + " is neither [rows x 1] nor " +
                     shape_string(a.shape()));
  }
  auto av = a.data(), bv = b.data(), gv = g.data();
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const std::size_t k = i * cols + j;
      const double c = per_row ? gv[i] : gv[k];
      out[k] = (1.0 - c) * av[k] + c * bv[k];
    }
  }
  Tensor result = make_result(a.shape(), std::move(out));
  if (GradientTape* tape = recording_tape({&a, &b, &g})) {
    mark_tracked(result);
    tape->record("blend", [an = node_of(a), bn = node_of(b), gn = node_of(g), on = node_of(result), rows, cols,
                           per_row] {
      if (on->grad.empty()) return;
      const double* dz = on->grad.data();
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t k = i * cols + j;
          const std::size_t gi = per_row ? i : k;
          const double c = gn->data[gi];
          if (an->requires_grad) an->accumulate(k, (1.0 - c) * dz[k]);
          if (bn->requires_grad) bn->accumulate(k, c * dz[k]);
          if (gn->requires_grad) gn->accumulate(gi, dz[k] * (bn->data[k] - an->data[k]));
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = make_result({1}, {s});
  if (GradientTape* tape = recording_tape({&x})) {
    mark_tracked(result);
    tape->record("sum", [xn = node_of(x), on = node_of(result)] {
      if (on->grad.empty()) return;
      auto& g = xn->grad_buffer();
      for (double& v : g) v += on->grad[0];
    });
  }
  return result;
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int64_t> targets, Reduction reduction,
                     std::int64_t ignore_index) {
  const std::size_t rows = logits.rows(), vocab = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(logits.shape()));
  }
  auto v = logits.data();
  std::vector<double> probs(rows * vocab, 0.0);
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    const std::int64_t t = targets[i];
    if (t == ignore_index) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw ValueError("cross_entropy: target " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    const double* r = v.data() + i * vocab;
    const double mx = *std::max_element(r, r + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      const double e = std::exp(r[j] - mx);
      probs[i * vocab + j] = e;
      z += e;
    }
    for (std::size_t j = 0; j < vocab; ++j) probs[i * vocab + j] /= z;
    total += -(r[t] - mx - std::log(z));
    ++counted;
  }
  if (counted == 0) throw ValueError("cross_entropy: no scoreable targets");
  const double norm = reduction == Reduction::kMean ? 1.0 / static_cast<double>(counted) : 1.0;
  Tensor result = make_result({1}, {total * norm});
  if (GradientTape* tape = recording_tape({&logits})) {
    mark_tracked(result);
    tape->record("cross_entropy", [ln = node_of(logits), on = node_of(result), probs = std::move(probs),
                                   tg = std::vector<std::int64_t>(targets.begin(), targets.end()), rows, vocab,
                                   norm, ignore_index] {
      if (on->grad.empty()) return;
      auto& g = ln->grad_buffer();
      const double upstream = on->grad[0] * norm;
      for (std::size_t i = 0; i < rows; ++i) {
        if (tg[i] == ignore_index) continue;
        for (std::size_t j = 0; j < vocab; ++j) {
          const double onehot = static_cast<std::int64_t>(j) == tg[i] ? 1.0 : 0.0;
          g[i * vocab + j] += upstream * (probs[i * vocab + j] - onehot);
        }
      }
    });
  }
  return result;
}

}  // namespace corelm
