#pragma once

// Four-branch weight-sharing cross-attention network.
//
// Two self streams (s1, s2) run an ordinary pre-norm transformer over each
// image of a same-class pair. Two cross streams (c1, c2) start from the same
// embeddings and, at every layer, attend with the queries of one self stream
// against the keys/values of the other, re-using the projections the self
// streams already computed. One parameter set serves all four streams and the
// classifier reads the class token of each.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cadg/attention.hpp"
#include "cadg/checkpoint.hpp"
#include "cadg/ops.hpp"
#include "cadg/tensor.hpp"

namespace cadg {

struct ModelConfig {
  PatchConfig patch;
  std::size_t layers = 4;
  std::size_t mlp_hidden = 128;
  std::size_t classes = 4;
  double ln_eps = 1e-5;

  void validate() const {
    patch.validate();
    if (layers == 0 || mlp_hidden == 0) throw ConfigError("model: layers and mlp_hidden must be positive");
    if (classes < 2) throw ConfigError("model: need at least 2 classes");
  }
};

/// lambda_1..lambda_4 of the combined loss.
struct LossWeights {
  double self1 = 0.25;
  double self2 = 0.25;
  double cross1 = 0.25;
  double cross2 = 0.25;

  void validate() const {
    if (self1 < 0 || self2 < 0 || cross1 < 0 || cross2 < 0) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  AttentionWeights attn;
  Tensor ln2_gain, ln2_bias;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct CadgWeights {
  ModelConfig config;
  LossWeights lambda;
  EmbedWeights embed;
  std::vector<LayerWeights> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor classifier_w, classifier_b;

  static CadgWeights init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = cfg.patch.model_dim, h = cfg.mlp_hidden;
    auto xavier = [&rng](std::size_t in, std::size_t out) {
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      std::vector<double> v(in * out);
      for (auto& x : v) x = dist(rng);
      return Tensor(Shape{in, out}, v, true);
    };
    auto normal = [&rng](Shape shape, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      std::vector<double> v(numel(shape));
      for (auto& x : v) x = dist(rng);
      return Tensor(std::move(shape), v, true);
    };
    auto constant = [](std::size_t n, double value) { return Tensor(Shape{n}, value, true); };

    CadgWeights w;
    w.config = cfg;
    w.embed.patch_proj = xavier(cfg.patch.patch_dim(), d);
    w.embed.patch_bias = constant(d, 0.0);
    // Unit scale, as in common from-scratch ViTs: tokens start at the same
    // magnitude as projected patches instead of near zero, where layer norm is
    // sharply curved.
    w.embed.class_token = normal(Shape{d}, 1.0);
    w.embed.position = normal(Shape{cfg.patch.token_count() + 1, d}, 1.0);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      LayerWeights lw;
      lw.ln1_gain = constant(d, 1.0);
      lw.ln1_bias = constant(d, 0.0);
      lw.attn.w_q = xavier(d, d);
      lw.attn.w_k = xavier(d, d);
      lw.attn.w_v = xavier(d, d);
      lw.attn.w_out = xavier(d, d);
      lw.attn.b_out = constant(d, 0.0);
      lw.ln2_gain = constant(d, 1.0);
      lw.ln2_bias = constant(d, 0.0);
      lw.mlp_w1 = xavier(d, h);
      lw.mlp_b1 = constant(h, 0.0);
      lw.mlp_w2 = xavier(h, d);
      lw.mlp_b2 = constant(d, 0.0);
      w.layers.push_back(std::move(lw));
    }
    w.final_ln_gain = constant(d, 1.0);
    w.final_ln_bias = constant(d, 0.0);
    w.classifier_w = xavier(d, cfg.classes);
    w.classifier_b = constant(cfg.classes, 0.0);
    return w;
  }

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out{{"embed.patch_proj", embed.patch_proj},
                                 {"embed.patch_bias", embed.patch_bias},
                                 {"embed.class_token", embed.class_token},
                                 {"embed.position", embed.position}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& lw = layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      out.push_back({p + "ln1.gain", lw.ln1_gain});
      out.push_back({p + "ln1.bias", lw.ln1_bias});
      out.push_back({p + "attn.w_q", lw.attn.w_q});
      out.push_back({p + "attn.w_k", lw.attn.w_k});
      out.push_back({p + "attn.w_v", lw.attn.w_v});
      out.push_back({p + "attn.w_out", lw.attn.w_out});
      out.push_back({p + "attn.b_out", lw.attn.b_out});
      out.push_back({p + "ln2.gain", lw.ln2_gain});
      out.push_back({p + "ln2.bias", lw.ln2_bias});
      out.push_back({p + "mlp.w1", lw.mlp_w1});
      out.push_back({p + "mlp.b1", lw.mlp_b1});
      out.push_back({p + "mlp.w2", lw.mlp_w2});
      out.push_back({p + "mlp.b2", lw.mlp_b2});
    }
    out.push_back({"final_ln.gain", final_ln_gain});
    out.push_back({"final_ln.bias", final_ln_bias});
    out.push_back({"classifier.weight", classifier_w});
    out.push_back({"classifier.bias", classifier_b});
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : parameters()) n += t.size();
    return n;
  }

  /// Independent copy of every parameter value.
  CadgWeights clone() const {
    CadgWeights copy = init(config, 0);
    copy.lambda = lambda;
    copy.assign(named_parameters());
    return copy;
  }

  /// Overwrites parameter values from a named list (e.g. a loaded checkpoint).
  void assign(std::span<const NamedTensor> values) {
    auto mine = named_parameters();
    if (values.size() != mine.size()) {
      throw FormatError("checkpoint has " + std::to_string(values.size()) + " tensors, model expects " +
                        std::to_string(mine.size()));
    }
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (values[i].name != mine[i].name || values[i].tensor.shape() != mine[i].tensor.shape()) {
        throw FormatError("checkpoint tensor " + values[i].name + " " +
                          shape_str(values[i].tensor.shape()) + " does not match " + mine[i].name +
                          " " + shape_str(mine[i].tensor.shape()));
      }
      auto src = values[i].tensor.data();
      std::copy(src.begin(), src.end(), mine[i].tensor.data().begin());
    }
  }
};

/// Four token streams, plus the self-stream projections of the last layer run.
struct BranchStates {
  Tensor s1, s2, c1, c2;
  ProjectedTriple triple1, triple2;
};

struct CadgOutput {
  Tensor logits_s1, logits_s2, logits_c1, logits_c2;
  Tensor loss_total, loss_s1, loss_s2, loss_c1, loss_c2;
};

namespace detail {

inline Tensor mlp_sublayer(const Tensor& x, const LayerWeights& lw, double eps) {
  const Tensor h = gelu(linear(layer_norm(x, lw.ln2_gain, lw.ln2_bias, eps), lw.mlp_w1, lw.mlp_b1));
  return add(x, linear(h, lw.mlp_w2, lw.mlp_b2));
}

/// Pre-norm self-attention block; exposes the Q/K/V it projected.
inline Tensor self_block(const Tensor& s, const LayerWeights& lw, const ModelConfig& cfg,
                         ProjectedTriple& triple) {
  triple = project_qkv(layer_norm(s, lw.ln1_gain, lw.ln1_bias, cfg.ln_eps), lw.attn);
  const Tensor attended = add(s, attend(triple.q, triple.k, triple.v, cfg.patch.head_count, lw.attn));
  return mlp_sublayer(attended, lw, cfg.ln_eps);
}

inline Tensor cross_block(const Tensor& c, const ProjectedTriple& queries_from,
                          const ProjectedTriple& keys_from, const LayerWeights& lw,
                          const ModelConfig& cfg) {
  const Tensor attended = add(c, attend(queries_from.q, keys_from.k, keys_from.v,
                                        cfg.patch.head_count, lw.attn));
  return mlp_sublayer(attended, lw, cfg.ln_eps);
}

inline Tensor classify(const Tensor& stream, const CadgWeights& w) {
  const Tensor cls = layer_norm(select_token(stream, 0), w.final_ln_gain, w.final_ln_bias,
                                w.config.ln_eps);
  return linear(cls, w.classifier_w, w.classifier_b);
}

inline void check_images(const Tensor& x, const ModelConfig& cfg, const char* what) {
  const auto& p = cfg.patch;
  if (x.rank() != 4 || x.extent(1) != p.image_height || x.extent(2) != p.image_width ||
      x.extent(3) != p.channels) {
    throw DimensionError(std::string(what) + ": images " + shape_str(x.shape()) +
                         " do not match the model's image geometry");
  }
}

}  // namespace detail

/// Pixels in [0,1] are shifted to be zero-centred before the patch projection;
/// uncentred input puts a large shared component on every token and stalls
/// SGD from scratch on a flat plateau.
inline constexpr double kPixelCenter = 0.5;

/// Embeds a [B,H,W,C] image batch into [B,N+1,d] tokens.
inline Tensor embed_images(const Tensor& images, const CadgWeights& w) {
  detail::check_images(images, w.config, "embed_images");
  const Tensor centred = add(images, Tensor(Shape{images.extent(3)}, -kPixelCenter));
  return embed(patchify(centred, w.config.patch), w.embed);
}

/// One layer applied to all four streams.
inline BranchStates cadg_layer(std::size_t n, const BranchStates& states, const CadgWeights& w) {
  if (n >= w.layers.size()) {
    throw std::out_of_range("cadg_layer: layer " + std::to_string(n) + " of " +
                            std::to_string(w.layers.size()));
  }
  if (!states.s1.defined() || !states.s2.defined() || !states.c1.defined() || !states.c2.defined()) {
    throw std::logic_error("cadg_layer: uninitialized streams");
  }
  const auto& lw = w.layers[n];
  BranchStates next;
  next.s1 = detail::self_block(states.s1, lw, w.config, next.triple1);
  next.s2 = detail::self_block(states.s2, lw, w.config, next.triple2);
  next.c1 = detail::cross_block(states.c1, next.triple1, next.triple2, lw, w.config);
  next.c2 = detail::cross_block(states.c2, next.triple2, next.triple1, lw, w.config);
  return next;
}

/// Runs all layers; when `trace` is given, the states after each layer are appended.
inline BranchStates run_streams(const Tensor& x1, const Tensor& x2, const CadgWeights& w,
                                std::vector<BranchStates>* trace = nullptr) {
  detail::check_images(x1, w.config, "forward");
  detail::check_images(x2, w.config, "forward");
  if (x1.extent(0) != x2.extent(0)) {
    throw DimensionError("forward: batch mismatch " + shape_str(x1.shape()) + " vs " +
                         shape_str(x2.shape()));
  }
  BranchStates states;
  states.s1 = embed_images(x1, w);
  states.s2 = embed_images(x2, w);
  states.c1 = states.s1;
  states.c2 = states.s2;
  for (std::size_t n = 0; n < w.layers.size(); ++n) {
    states = cadg_layer(n, states, w);
    if (trace) trace->push_back(states);
  }
  return states;
}

/// Four logit sets for a pair batch, without losses.
inline CadgOutput forward_logits(const Tensor& x1, const Tensor& x2, const CadgWeights& w,
                                 std::vector<BranchStates>* trace = nullptr) {
  const BranchStates st = run_streams(x1, x2, w, trace);
  CadgOutput out;
  out.logits_s1 = detail::classify(st.s1, w);
  out.logits_s2 = detail::classify(st.s2, w);
  out.logits_c1 = detail::classify(st.c1, w);
  out.logits_c2 = detail::classify(st.c2, w);
  return out;
}

/// Full forward pass with the four branch losses and their weighted sum.
inline CadgOutput forward(const Tensor& x1, const Tensor& x2, std::span<const int> labels,
                          const CadgWeights& w, std::vector<BranchStates>* trace = nullptr) {
  w.lambda.validate();
  if (labels.size() != x1.extent(0)) {
    throw DimensionError("forward: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(x1.extent(0)));
  }
  CadgOutput out = forward_logits(x1, x2, w, trace);
  out.loss_s1 = cross_entropy(out.logits_s1, labels);
  out.loss_s2 = cross_entropy(out.logits_s2, labels);
  out.loss_c1 = cross_entropy(out.logits_c1, labels);
  out.loss_c2 = cross_entropy(out.logits_c2, labels);
  out.loss_total = add(add(add(scale(out.loss_s1, w.lambda.self1), scale(out.loss_s2, w.lambda.self2)),
                           scale(out.loss_c1, w.lambda.cross1)),
                       scale(out.loss_c2, w.lambda.cross2));
  return out;
}

/// Single-stream path: one image batch through the self branch to logits.
inline Tensor self_logits(const Tensor& x, const CadgWeights& w) {
  Tensor s = embed_images(x, w);
  ProjectedTriple scratch;
  for (const auto& lw : w.layers) s = detail::self_block(s, lw, w.config, scratch);
  return detail::classify(s, w);
}

enum class InferMode { self, self_pair };

inline std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t b = logits.extent(0), k = logits.extent(1);
  std::vector<int> out(b);
  for (std::size_t r = 0; r < b; ++r) {
    const auto row = logits.data().subspan(r * k, k);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// Logits used for prediction. `self_pair` averages the four branch logits of
/// forward(x, x), which coincide with the self-stream logits.
inline Tensor infer_logits(const Tensor& x, const CadgWeights& w, InferMode mode = InferMode::self) {
  NoGradGuard no_grad;
  if (mode == InferMode::self) return self_logits(x, w);
  const CadgOutput out = forward_logits(x, x, w);
  return scale(add(add(add(out.logits_s1, out.logits_s2), out.logits_c1), out.logits_c2), 0.25);
}

inline std::vector<int> infer(const Tensor& x, const CadgWeights& w, InferMode mode = InferMode::self) {
  return argmax_rows(infer_logits(x, w, mode));
}

/// Per-head attention matrices of both cross streams at `layer`, each [B, heads, N+1, N+1].
struct AlignmentMaps {
  Tensor cross1;
  Tensor cross2;
};

inline AlignmentMaps alignment_map(const Tensor& x1, const Tensor& x2, const CadgWeights& w,
                                   std::size_t layer) {
  if (layer >= w.layers.size()) {
    throw std::out_of_range("alignment_map: layer " + std::to_string(layer) + " of " +
                            std::to_string(w.layers.size()));
  }
  NoGradGuard no_grad;
  detail::check_images(x1, w.config, "alignment_map");
  detail::check_images(x2, w.config, "alignment_map");
  BranchStates states;
  states.s1 = embed_images(x1, w);
  states.s2 = embed_images(x2, w);
  states.c1 = states.s1;
  states.c2 = states.s2;
  for (std::size_t n = 0; n <= layer; ++n) states = cadg_layer(n, states, w);
  const std::size_t heads = w.config.patch.head_count;
  return {attention_weights(states.triple1.q, states.triple2.k, heads),
          attention_weights(states.triple2.q, states.triple1.k, heads)};
}

/// CSV rows `layer,head,query_index,key_index,weight` for batch element `sample`.
inline void write_alignment_csv(std::ostream& os, const Tensor& map, std::size_t layer,
                                std::size_t sample = 0) {
  const std::size_t heads = map.extent(1), m = map.extent(2), n = map.extent(3);
  if (sample >= map.extent(0)) throw std::out_of_range("write_alignment_csv: sample index");
  os << "layer,head,query_index,key_index,weight\n";
  const auto prev = os.precision(17);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        os << layer << ',' << h << ',' << i << ',' << j << ','
           << map[((sample * heads + h) * m + i) * n + j] << '\n';
      }
    }
  }
  os.precision(prev);
}

}  // namespace cadg
