#pragma once

// Differentiable tensor operations. Every op validates shapes, computes its
// forward values eagerly and, when an input requires gradients, records a
// closure that accumulates into the inputs' gradient buffers.

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>

#include "cadg/tensor.hpp"

namespace cadg {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

/// Batch broadcast of two leading-dimension prefixes (numpy rules).
struct BatchPlan {
  Shape batch;
  std::vector<std::size_t> a_index;
  std::vector<std::size_t> b_index;
};

inline BatchPlan plan_batches(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  BatchPlan plan;
  plan.batch.resize(r);
  std::vector<std::size_t> ea(r, 1), eb(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    if (i >= r - a.size()) ea[i] = a[i - (r - a.size())];
    if (i >= r - b.size()) eb[i] = b[i - (r - b.size())];
    if (ea[i] != eb[i] && ea[i] != 1 && eb[i] != 1) {
      throw DimensionError("batch dimensions " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    plan.batch[i] = std::max(ea[i], eb[i]);
  }
  const std::size_t total = numel(plan.batch);
  plan.a_index.resize(total);
  plan.b_index.resize(total);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t ia = 0, ib = 0;
    for (std::size_t i = 0; i < r; ++i) {
      ia = ia * ea[i] + (ea[i] == 1 ? 0 : idx[i]);
      ib = ib * eb[i] + (eb[i] == 1 ? 0 : idx[i]);
    }
    plan.a_index[flat] = ia;
    plan.b_index[flat] = ib;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < plan.batch[i]) break;
      idx[i] = 0;
    }
  }
  return plan;
}

inline void require_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

/// Matrix product over the last two axes with broadcast leading axes.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using namespace detail;
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.extent(-2), k = a.extent(-1), n = b.extent(-1);
  if (b.extent(-2) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);

  // Shared right operand: fold every leading axis of `a` into one GEMM.
  if (batch_b.empty()) {
    const std::size_t rows = numel(batch_a) * m;
    Shape out_shape = batch_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Buffer out(rows * n);
    MutMat(out.data(), rows, n).noalias() =
        ConstMat(a.data().data(), rows, k) * ConstMat(b.data().data(), k, n);
    return make_result(std::move(out_shape), std::move(out), {a, b}, [rows, k, n](Node& self) {
      Node& pa = parent(self, 0);
      Node& pb = parent(self, 1);
      ConstMat dc(self.grad.data(), rows, n);
      if (pa.requires_grad) {
        MutMat(pa.ensure_grad().data(), rows, k).noalias() +=
            dc * ConstMat(pb.data.data(), k, n).transpose();
      }
      if (pb.requires_grad) {
        MutMat(pb.ensure_grad().data(), k, n).noalias() +=
            ConstMat(pa.data.data(), rows, k).transpose() * dc;
      }
    });
  }

  auto plan = std::make_shared<BatchPlan>(plan_batches(batch_a, batch_b));
  const std::size_t count = plan->a_index.size();
  Shape out_shape = plan->batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Buffer out(count * m * n);
  for (std::size_t i = 0; i < count; ++i) {
    MutMat(out.data() + i * m * n, m, n).noalias() =
        ConstMat(a.data().data() + plan->a_index[i] * m * k, m, k) *
        ConstMat(b.data().data() + plan->b_index[i] * k * n, k, n);
  }
  return make_result(std::move(out_shape), std::move(out), {a, b}, [plan, m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    for (std::size_t i = 0; i < plan->a_index.size(); ++i) {
      ConstMat dc(self.grad.data() + i * m * n, m, n);
      const std::size_t oa = plan->a_index[i] * m * k;
      const std::size_t ob = plan->b_index[i] * k * n;
      if (pa.requires_grad) {
        MutMat(pa.ensure_grad().data() + oa, m, k).noalias() +=
            dc * ConstMat(pb.data.data() + ob, k, n).transpose();
      }
      if (pb.requires_grad) {
        MutMat(pb.ensure_grad().data() + ob, k, n).noalias() +=
            ConstMat(pa.data.data() + oa, m, k).transpose() * dc;
      }
    }
  });
}

/// Elementwise sum. `b` may match `a` exactly or match a trailing suffix of
/// `a`'s shape, in which case it is broadcast over the leading axes.
inline Tensor add(const Tensor& a, const Tensor& b) {
  using namespace detail;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!suffix) {
    throw DimensionError("add: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  }
  const std::size_t inner = b.size();
  Buffer out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % inner];
  return make_result(sa, std::move(out), {a, b}, [inner](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
    }
  });
}

/// Elementwise product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  using namespace detail;
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  using namespace detail;
  Buffer out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
    Node& pa = parent(self, 0);
    auto& g = pa.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// Sum of all elements, as a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
  using namespace detail;
  double total = 0.0;
  for (double v : a.data()) total += v;
  return make_result(Shape{}, Buffer{total}, {a}, [](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

/// GELU, tanh approximation.
inline Tensor gelu(const Tensor& x) {
  using namespace detail;
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a3 = 0.044715;
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + a3 * v * v * v)));
  }
  return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
    Node& px = parent(self, 0);
    auto& g = px.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = px.data[i];
      const double t = std::tanh(c * (v + a3 * v * v * v));
      const double dt = (1.0 - t * t) * c * (1.0 + 3.0 * a3 * v * v);
      g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
    }
  });
}

/// Numerically stable softmax along `axis` (negative counts from the back).
inline Tensor softmax(const Tensor& x, int axis) {
  using namespace detail;
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  }
  require_finite(x.data(), "softmax");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = ax + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::size_t n = s[static_cast<std::size_t>(ax)];

  Buffer out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result(s, std::move(out), {x}, [outer, inner, n](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          dot += self.grad[base + j * inner] * self.data[base + j * inner];
        }
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

/// Normalizes over the last axis, then applies per-feature gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  using namespace detail;
  if (x.rank() == 0) throw DimensionError("layer_norm: input must have at least one axis");
  const std::size_t n = x.extent(-1);
  if (n == 0) throw DimensionError("layer_norm: zero-length last axis");
  if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                         shape_str(bias.shape()) + " must be [" + std::to_string(n) + "]");
  }
  const std::size_t rows = x.size() / n;
  auto xhat = std::make_shared<Buffer>(x.size());
  auto inv_std = std::make_shared<Buffer>(rows);
  Buffer out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * inv;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gain[j] + bias[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gain, bias},
                     [xhat, inv_std, rows, n](Node& self) {
                       Node& px = parent(self, 0);
                       Node& pg = parent(self, 1);
                       Node& pb = parent(self, 2);
                       const double nd = static_cast<double>(n);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* dy = self.grad.data() + r * n;
                         const double* h = xhat->data() + r * n;
                         if (pg.requires_grad) {
                           auto& gg = pg.ensure_grad();
                           for (std::size_t j = 0; j < n; ++j) gg[j] += dy[j] * h[j];
                         }
                         if (pb.requires_grad) {
                           auto& gb = pb.ensure_grad();
                           for (std::size_t j = 0; j < n; ++j) gb[j] += dy[j];
                         }
                         if (px.requires_grad) {
                           auto& gx = px.ensure_grad();
                           double sum_d = 0.0, sum_dh = 0.0;
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = dy[j] * pg.data[j];
                             sum_d += d;
                             sum_dh += d * h[j];
                           }
                           const double inv = (*inv_std)[r];
                           for (std::size_t j = 0; j < n; ++j) {
                             const double d = dy[j] * pg.data[j];
                             gx[r * n + j] += inv / nd * (nd * d - sum_d - h[j] * sum_dh);
                           }
                         }
                       }
                     });
}

/// Joins two token sequences along the second-to-last (token) axis.
inline Tensor concat_tokens(const Tensor& a, const Tensor& b) {
  using namespace detail;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sa.size() >= 2 && sa.size() == sb.size() && sa.back() == sb.back();
  for (std::size_t i = 0; ok && i + 2 < sa.size(); ++i) ok = sa[i] == sb[i];
  if (!ok) {
    throw DimensionError("concat_tokens: shape mismatch " + shape_str(sa) + " vs " +
                         shape_str(sb));
  }
  const std::size_t d = sa.back();
  const std::size_t ta = sa[sa.size() - 2], tb = sb[sb.size() - 2];
  const std::size_t outer = a.size() / (ta * d);
  Shape out_shape = sa;
  out_shape[out_shape.size() - 2] = ta + tb;
  Buffer out(a.size() + b.size());
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + o * ta * d, ta * d, out.data() + o * (ta + tb) * d);
    std::copy_n(b.data().data() + o * tb * d, tb * d, out.data() + o * (ta + tb) * d + ta * d);
  }
  return make_result(std::move(out_shape), std::move(out), {a, b},
                     [outer, ta, tb, d](Node& self) {
                       Node& pa = parent(self, 0);
                       Node& pb = parent(self, 1);
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* src = self.grad.data() + o * (ta + tb) * d;
                         if (pa.requires_grad) {
                           auto& g = pa.ensure_grad();
                           for (std::size_t i = 0; i < ta * d; ++i) g[o * ta * d + i] += src[i];
                         }
                         if (pb.requires_grad) {
                           auto& g = pb.ensure_grad();
                           for (std::size_t i = 0; i < tb * d; ++i) {
                             g[o * tb * d + i] += src[ta * d + i];
                           }
                         }
                       }
                     });
}

/// Repeats `x` along a new leading axis of extent `count`.
inline Tensor broadcast_batch(const Tensor& x, std::size_t count) {
  using namespace detail;
  if (count == 0) throw DimensionError("broadcast_batch: count must be positive");
  Shape out_shape{count};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  const std::size_t inner = x.size();
  Buffer out(count * inner);
  for (std::size_t c = 0; c < count; ++c) std::copy_n(x.data().data(), inner, out.data() + c * inner);
  return make_result(std::move(out_shape), std::move(out), {x}, [count, inner](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t c = 0; c < count; ++c) {
      for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[c * inner + i];
    }
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  using namespace detail;
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Swaps the last two axes.
inline Tensor transpose_last2(const Tensor& x) {
  using namespace detail;
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + shape_str(x.shape()));
  const std::size_t m = x.extent(-2), n = x.extent(-1);
  const std::size_t outer = x.size() / (m * n);
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Buffer out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) out[o * m * n + j * m + i] = x[o * m * n + i * n + j];
    }
  }
  return make_result(std::move(out_shape), std::move(out), {x}, [outer, m, n](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          g[o * m * n + i * n + j] += self.grad[o * m * n + j * m + i];
        }
      }
    }
  });
}

/// [B, T, h*dk] -> [B, h, T, dk]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  using namespace detail;
  if (x.rank() != 3 || heads == 0 || x.extent(-1) % heads != 0) {
    throw DimensionError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                         std::to_string(heads) + " heads");
  }
  const std::size_t b = x.extent(0), t = x.extent(1), d = x.extent(2), dk = d / heads;
  Buffer out(x.size());
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ti = 0; ti < t; ++ti) {
      for (std::size_t h = 0; h < heads; ++h) {
        std::copy_n(x.data().data() + (bi * t + ti) * d + h * dk, dk,
                    out.data() + ((bi * heads + h) * t + ti) * dk);
      }
    }
  }
  return make_result(Shape{b, heads, t, dk}, std::move(out), {x},
                     [b, t, d, dk, heads](Node& self) {
                       auto& g = parent(self, 0).ensure_grad();
                       for (std::size_t bi = 0; bi < b; ++bi) {
                         for (std::size_t ti = 0; ti < t; ++ti) {
                           for (std::size_t h = 0; h < heads; ++h) {
                             const double* src = self.grad.data() + ((bi * heads + h) * t + ti) * dk;
                             double* dst = g.data() + (bi * t + ti) * d + h * dk;
                             for (std::size_t j = 0; j < dk; ++j) dst[j] += src[j];
                           }
                         }
                       }
                     });
}

/// [B, h, T, dk] -> [B, T, h*dk]
inline Tensor merge_heads(const Tensor& x) {
  using namespace detail;
  if (x.rank() != 4) throw DimensionError("merge_heads: expected rank 4, got " + shape_str(x.shape()));
  const std::size_t b = x.extent(0), heads = x.extent(1), t = x.extent(2), dk = x.extent(3);
  const std::size_t d = heads * dk;
  Buffer out(x.size());
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t ti = 0; ti < t; ++ti) {
        std::copy_n(x.data().data() + ((bi * heads + h) * t + ti) * dk, dk,
                    out.data() + (bi * t + ti) * d + h * dk);
      }
    }
  }
  return make_result(Shape{b, t, d}, std::move(out), {x}, [b, t, d, dk, heads](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t ti = 0; ti < t; ++ti) {
          const double* src = self.grad.data() + (bi * t + ti) * d + h * dk;
          double* dst = g.data() + ((bi * heads + h) * t + ti) * dk;
          for (std::size_t j = 0; j < dk; ++j) dst[j] += src[j];
        }
      }
    }
  });
}

/// Picks token `index` from every sequence: [B, T, d] -> [B, d].
inline Tensor select_token(const Tensor& x, std::size_t index) {
  using namespace detail;
  if (x.rank() != 3 || index >= x.extent(1)) {
    throw DimensionError("select_token: index " + std::to_string(index) + " invalid for " +
                         shape_str(x.shape()));
  }
  const std::size_t b = x.extent(0), t = x.extent(1), d = x.extent(2);
  Buffer out(b * d);
  for (std::size_t bi = 0; bi < b; ++bi) {
    std::copy_n(x.data().data() + (bi * t + index) * d, d, out.data() + bi * d);
  }
  return make_result(Shape{b, d}, std::move(out), {x}, [b, t, d, index](Node& self) {
    auto& g = parent(self, 0).ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t j = 0; j < d; ++j) g[(bi * t + index) * d + j] += self.grad[bi * d + j];
    }
  });
}

/// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  using namespace detail;
  if (logits.rank() != 2 || logits.extent(0) != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = logits.extent(0), k = logits.extent(1);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw std::out_of_range("cross_entropy: label " + std::to_string(y) + " outside [0," +
                              std::to_string(k) + ")");
    }
  }
  require_finite(logits.data(), "cross_entropy");
  auto probs = std::make_shared<Buffer>(logits.size());
  auto targets = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const double* z = logits.data().data() + r * k;
    double mx = z[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, z[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(z[j] - lse);
    total += lse - z[labels[r]];
  }
  return make_result(Shape{}, Buffer{total / static_cast<double>(b)}, {logits},
                     [probs, targets, b, k](Node& self) {
                       auto& g = parent(self, 0).ensure_grad();
                       const double w = self.grad[0] / static_cast<double>(b);
                       for (std::size_t r = 0; r < b; ++r) {
                         for (std::size_t j = 0; j < k; ++j) {
                           const double onehot = static_cast<int>(j) == (*targets)[r] ? 1.0 : 0.0;
                           g[r * k + j] += w * ((*probs)[r * k + j] - onehot);
                         }
                       }
                     });
}

/// x W + b, with `x` of shape [..., in], W [in, out] and b [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add(matmul(x, weight), bias);
}

}  // namespace cadg
