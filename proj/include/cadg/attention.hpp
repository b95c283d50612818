#pragma once

// Patch embedding and scaled dot-product attention. `attend` is deliberately
// agnostic about where its queries and keys/values come from: fed from one
// sequence it is self-attention, fed from two it is cross-attention.

#include <cmath>
#include <string>

#include "cadg/ops.hpp"
#include "cadg/tensor.hpp"

namespace cadg {

struct PatchConfig {
  std::size_t image_height = 32;
  std::size_t image_width = 32;
  std::size_t channels = 1;
  std::size_t patch_size = 8;
  std::size_t model_dim = 64;
  std::size_t head_count = 4;

  /// N = H*W/P^2
  std::size_t token_count() const {
    return (image_height / patch_size) * (image_width / patch_size);
  }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return model_dim / head_count; }

  void validate() const {
    if (image_height == 0 || image_width == 0 || channels == 0 || patch_size == 0 ||
        model_dim == 0 || head_count == 0) {
      throw ConfigError("patch config: all extents must be positive");
    }
    if (image_height % patch_size != 0 || image_width % patch_size != 0) {
      throw ConfigError("patch config: image " + std::to_string(image_height) + "x" +
                        std::to_string(image_width) + " not divisible by patch size " +
                        std::to_string(patch_size));
    }
    if (model_dim % head_count != 0) {
      throw ConfigError("patch config: model_dim " + std::to_string(model_dim) +
                        " not divisible by head_count " + std::to_string(head_count));
    }
  }
};

/// Splits [B,H,W,C] images into [B,N,P*P*C] patches. Patches follow raster
/// order over the patch grid; each patch is its P x P x C block flattened in
/// raster order. Images are treated as data (no gradient is recorded).
inline Tensor patchify(const Tensor& images, const PatchConfig& cfg) {
  cfg.validate();
  const Shape expected_tail{cfg.image_height, cfg.image_width, cfg.channels};
  if (images.rank() != 4 || !std::equal(expected_tail.begin(), expected_tail.end(),
                                        images.shape().begin() + 1)) {
    throw DimensionError("patchify: images " + shape_str(images.shape()) + " do not match [B," +
                         std::to_string(cfg.image_height) + "," + std::to_string(cfg.image_width) +
                         "," + std::to_string(cfg.channels) + "]");
  }
  const std::size_t b = images.extent(0), w = cfg.image_width, c = cfg.channels;
  const std::size_t p = cfg.patch_size, gh = cfg.image_height / p, gw = w / p;
  const std::size_t n = gh * gw, pd = cfg.patch_dim();
  std::vector<double> out(b * n * pd);
  const double* src = images.data().data();
  const std::size_t image_stride = cfg.image_height * w * c;
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        double* dst = out.data() + (bi * n + gy * gw + gx) * pd;
        for (std::size_t py = 0; py < p; ++py) {
          const double* row = src + bi * image_stride + ((gy * p + py) * w + gx * p) * c;
          std::copy_n(row, p * c, dst + py * p * c);
        }
      }
    }
  }
  return Tensor(Shape{b, n, pd}, out);
}

struct EmbedWeights {
  Tensor patch_proj;   // [P*P*C, d]
  Tensor patch_bias;   // [d]
  Tensor class_token;  // [d]
  Tensor position;     // [N+1, d]
};

/// Projects patches to d dims, prepends the class token at index 0 and adds
/// the positional table: [B,N,P*P*C] -> [B,N+1,d].
inline Tensor embed(const Tensor& patches, const EmbedWeights& w) {
  if (patches.rank() != 3) throw DimensionError("embed: patches must be [B,N,D], got " + shape_str(patches.shape()));
  const std::size_t d = w.patch_proj.extent(-1);
  if (w.position.shape() != Shape{patches.extent(1) + 1, d}) {
    throw DimensionError("embed: position table " + shape_str(w.position.shape()) +
                         " does not fit " + std::to_string(patches.extent(1)) + " patches");
  }
  const Tensor projected = linear(patches, w.patch_proj, w.patch_bias);
  const Tensor cls = broadcast_batch(reshape(w.class_token, Shape{1, d}), patches.extent(0));
  return add(concat_tokens(cls, projected), w.position);
}

struct AttentionWeights {
  Tensor w_q;       // [d, d]
  Tensor w_k;       // [d, d]
  Tensor w_v;       // [d, d]
  Tensor w_out;     // [d, d]
  Tensor b_out;     // [d]
};

struct ProjectedTriple {
  Tensor q;
  Tensor k;
  Tensor v;
};

inline ProjectedTriple project_qkv(const Tensor& x, const AttentionWeights& w) {
  if (x.rank() != 3 || x.extent(-1) != w.w_q.extent(0)) {
    throw DimensionError("project_qkv: input " + shape_str(x.shape()) + " vs W_q " +
                         shape_str(w.w_q.shape()));
  }
  return {matmul(x, w.w_q), matmul(x, w.w_k), matmul(x, w.w_v)};
}

namespace detail {

inline void check_attention_inputs(const Tensor& q, const Tensor& k, std::size_t heads) {
  if (q.rank() != 3 || k.rank() != 3 || q.extent(0) != k.extent(0) || q.extent(2) != k.extent(2)) {
    throw DimensionError("attention: Q " + shape_str(q.shape()) + " incompatible with K " +
                         shape_str(k.shape()));
  }
  if (heads == 0 || q.extent(2) % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(q.extent(2)) +
                         " not divisible by head_count " + std::to_string(heads));
  }
}

inline Tensor scaled_scores(const Tensor& q, const Tensor& k, std::size_t heads) {
  const double dk = static_cast<double>(q.extent(2) / heads);
  const Tensor qh = split_heads(q, heads);
  const Tensor kh = split_heads(k, heads);
  return scale(matmul(qh, transpose_last2(kh)), 1.0 / std::sqrt(dk));
}

}  // namespace detail

/// Per-head softmax(Q K^T / sqrt(d_k)) as [B, heads, M, N].
inline Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t heads) {
  detail::check_attention_inputs(q, k, heads);
  return softmax(detail::scaled_scores(q, k, heads), -1);
}

/// Multi-head attention with output projection: Q [B,M,d], K/V [B,N,d] -> [B,M,d].
inline Tensor attend(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                     const AttentionWeights& w) {
  detail::check_attention_inputs(q, k, heads);
  if (v.shape() != k.shape()) {
    throw DimensionError("attend: K " + shape_str(k.shape()) + " and V " + shape_str(v.shape()) +
                         " token counts differ");
  }
  const Tensor weights = softmax(detail::scaled_scores(q, k, heads), -1);
  const Tensor mixed = merge_heads(matmul(weights, split_heads(v, heads)));
  return linear(mixed, w.w_out, w.b_out);
}

}  // namespace cadg
