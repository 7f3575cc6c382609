// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "nadir/model_config.hpp"
#include "nadir/ops.hpp"
#include "nadir/rng.hpp"
#include "nadir/tokenizer.hpp"

namespace nadir {

// Ordered (name, tensor) registry; the order defines the checkpoint
// manifest and the optimizer state layout.
template <typename T>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<T>>> items;

  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items) n += t.size();
    return n;
  }
};

template <typename T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;  // [d, d], no bias
  // differential variant only, one entry per head
  std::vector<Tensor<T>> lam_q1, lam_k1, lam_q2, lam_k2;  // [d_h]
  std::vector<Tensor<T>> head_norm_gain;                  // [2*d_h]
};

template <typename T>
struct ExpertParams {
  Tensor<T> w1, b1;  // [d, e/2]
  Tensor<T> w2, b2;  // [e/2, e]
  Tensor<T> w3, b3;  // [e, d]
};

template <typename T>
struct FfnParams {
  Tensor<T> router_w, router_b;       // moe only: [d, M], [M]
  std::vector<ExpertParams<T>> experts;  // M entries (1 for dense)
};

template <typename T>
struct EncoderLayerParams {
  Tensor<T> ln1_gain, ln2_gain;
  AttentionParams<T> attn;
  FfnParams<T> ffn;
};

template <typename T>
struct DecoderParams {
  Tensor<T> tgt_embed;  // [V_tgt, d]
  Tensor<T> ln1_gain, ln2_gain, ln3_gain;
  AttentionParams<T> self_attn;   // standard layout
  AttentionParams<T> cross_attn;  // q from decoder, k/v from encoder memory
  ExpertParams<T> ffn;
  Tensor<T> out_w, out_b;  // [d, V_tgt]
};

template <typename T>
struct ModelParams {
  Tensor<T> tok_embed;  // [V_src, d]
  std::vector<EncoderLayerParams<T>> layers;
  Tensor<T> head_w1, head_b1;  // [d, d]
  Tensor<T> head_w2, head_b2;  // [d, V_tgt]
  std::optional<DecoderParams<T>> decoder;
  ParamRegistry<T> registry;
};

namespace detail {

template <typename T>
Tensor<T> init_linear(Shape shape, std::size_t fan_in, Rng& rng) {
  double k = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<T> v(numel(shape));
  for (T& x : v) x = static_cast<T>((rng.uniform() * 2.0 - 1.0) * k);
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> init_normal(Shape shape, double stddev, Rng& rng) {
  std::vector<T> v(numel(shape));
  for (T& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

template <typename T>
AttentionParams<T> build_attention(ParamRegistry<T>& reg, const std::string& prefix,
                                   const ModelConfig& cfg, bool differential, Rng& rng) {
  std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
  std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  AttentionParams<T> p;
  p.wq = reg.add(prefix + ".wq", init_linear<T>({d, d}, d, rng));
  p.wk = reg.add(prefix + ".wk", init_linear<T>({d, d}, d, rng));
  p.wv = reg.add(prefix + ".wv", init_linear<T>({d, d}, d, rng));
  p.wo = reg.add(prefix + ".wo", init_linear<T>({d, d}, d, rng));
  if (differential) {
    for (int h = 0; h < cfg.num_heads; ++h) {
      std::string hp = prefix + ".head" + std::to_string(h);
      p.lam_q1.push_back(reg.add(hp + ".lam_q1", init_normal<T>({dh}, 0.1, rng)));
      p.lam_k1.push_back(reg.add(hp + ".lam_k1", init_normal<T>({dh}, 0.1, rng)));
      p.lam_q2.push_back(reg.add(hp + ".lam_q2", init_normal<T>({dh}, 0.1, rng)));
      p.lam_k2.push_back(reg.add(hp + ".lam_k2", init_normal<T>({dh}, 0.1, rng)));
      p.head_norm_gain.push_back(reg.add(hp + ".norm_gain", Tensor<T>::full({2 * dh}, T(1))));
    }
  }
  return p;
}

template <typename T>
ExpertParams<T> build_expert(ParamRegistry<T>& reg, const std::string& prefix,
                             const ModelConfig& cfg, Rng& rng) {
  std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
  std::size_t e = static_cast<std::size_t>(cfg.expert_dim);
  ExpertParams<T> p;
  p.w1 = reg.add(prefix + ".w1", init_linear<T>({d, e / 2}, d, rng));
  p.b1 = reg.add(prefix + ".b1", Tensor<T>::zeros({e / 2}));
  p.w2 = reg.add(prefix + ".w2", init_linear<T>({e / 2, e}, e / 2, rng));
  p.b2 = reg.add(prefix + ".b2", Tensor<T>::zeros({e}));
  p.w3 = reg.add(prefix + ".w3", init_linear<T>({e, d}, e, rng));
  p.b3 = reg.add(prefix + ".b3", Tensor<T>::zeros({d}));
  return p;
}

}  // namespace detail

// All learnable weights, deterministically initialized from the seed in
// registry order.
template <typename T>
ModelParams<T> build_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.vocab_src < static_cast<int>(Vocab::kNumSpecials) ||
      cfg.vocab_tgt < static_cast<int>(Vocab::kNumSpecials))
    throw ConfigError("build_params: vocab sizes not set");
  Rng rng(Rng::mix({seed, 0x70617261756d73ull}));
  std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
  ModelParams<T> mp;
  auto& reg = mp.registry;
  mp.tok_embed = reg.add("embed.tok",
                         detail::init_normal<T>({static_cast<std::size_t>(cfg.vocab_src), d},
                                                0.02, rng));
  bool diff = cfg.attention_variant == AttentionVariant::Differential;
  for (int l = 0; l < cfg.num_layers; ++l) {
    std::string lp = "layer" + std::to_string(l);
    EncoderLayerParams<T> layer;
    layer.ln1_gain = reg.add(lp + ".ln1", Tensor<T>::full({d}, T(1)));
    layer.attn = detail::build_attention(reg, lp + ".attn", cfg, diff, rng);
    layer.ln2_gain = reg.add(lp + ".ln2", Tensor<T>::full({d}, T(1)));
    if (cfg.ffn_variant == FfnVariant::Moe) {
      layer.ffn.router_w =
          reg.add(lp + ".moe.router.w",
                  detail::init_linear<T>({d, static_cast<std::size_t>(cfg.num_experts)}, d, rng));
      layer.ffn.router_b = reg.add(lp + ".moe.router.b",
                                   Tensor<T>::zeros({static_cast<std::size_t>(cfg.num_experts)}));
      for (int e = 0; e < cfg.num_experts; ++e)
        layer.ffn.experts.push_back(
            detail::build_expert(reg, lp + ".moe.expert" + std::to_string(e), cfg, rng));
    } else {
      layer.ffn.experts.push_back(detail::build_expert(reg, lp + ".ffn", cfg, rng));
    }
    mp.layers.push_back(std::move(layer));
  }
  std::size_t vt = static_cast<std::size_t>(cfg.vocab_tgt);
  mp.head_w1 = reg.add("head.w1", detail::init_linear<T>({d, d}, d, rng));
  mp.head_b1 = reg.add("head.b1", Tensor<T>::zeros({d}));
  mp.head_w2 = reg.add("head.w2", detail::init_linear<T>({d, vt}, d, rng));
  mp.head_b2 = reg.add("head.b2", Tensor<T>::zeros({vt}));
  if (cfg.with_ar_decoder) {
    DecoderParams<T> dec;
    dec.tgt_embed = reg.add("decoder.embed", detail::init_normal<T>({vt, d}, 0.02, rng));
    dec.ln1_gain = reg.add("decoder.ln1", Tensor<T>::full({d}, T(1)));
    dec.self_attn = detail::build_attention(reg, "decoder.self", cfg, /*differential=*/false, rng);
    dec.ln2_gain = reg.add("decoder.ln2", Tensor<T>::full({d}, T(1)));
    dec.cross_attn =
        detail::build_attention(reg, "decoder.cross", cfg, /*differential=*/false, rng);
    dec.ln3_gain = reg.add("decoder.ln3", Tensor<T>::full({d}, T(1)));
    dec.ffn = detail::build_expert(reg, "decoder.ffn", cfg, rng);
    dec.out_w = reg.add("decoder.out.w", detail::init_linear<T>({d, vt}, d, rng));
    dec.out_b = reg.add("decoder.out.b", Tensor<T>::zeros({vt}));
    mp.decoder = std::move(dec);
  }
  return mp;
}

// Exact number of learnable scalars for a config (vocab sizes included).
std::size_t param_count(const ModelConfig& cfg);

// Per-token routing decisions of one MoE layer pass.
template <typename T>
struct RoutingTrace {
  Tensor<T> gate_probs;  // [N, M], graph-connected
  std::vector<std::array<std::int32_t, 2>> chosen;    // -1 for unused slot
  std::vector<std::array<T, 2>> weights;
  std::vector<std::array<std::uint8_t, 2>> dropped;   // capacity overflow
  std::size_t capacity = 0;

  std::size_t dropped_slots() const {
    std::size_t n = 0;
    for (const auto& d : dropped) n += (d[0] ? 1 : 0) + (d[1] ? 1 : 0);
    return n;
  }
  std::size_t routed_slots() const {
    std::size_t n = 0;
    for (const auto& c : chosen) n += (c[0] >= 0 ? 1 : 0) + (c[1] >= 0 ? 1 : 0);
    return n;
  }
};

template <typename T>
struct MoeResult {
  Tensor<T> y;
  RoutingTrace<T> trace;
};

// Optional probe into attention internals (tests, collapse checks).
template <typename T>
struct AttnDebug {
  std::vector<Tensor<T>> pre_norm;  // per head, [B, T, 2*d_h]
  std::vector<T> lambda_value;
};

namespace detail {

// The three-layer GELU expert stack.
template <typename T>
Tensor<T> expert_stack(const Tensor<T>& x, const ExpertParams<T>& p, Graph<T>* g) {
  Tensor<T> h = ops::gelu(ops::linear(x, p.w1, p.b1, g), g);
  h = ops::gelu(ops::linear(h, p.w2, p.b2, g), g);
  return ops::linear(h, p.w3, p.b3, g);
}

inline std::vector<std::size_t> iota_positions(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace detail

// Differential attention over a fully bidirectional sequence. Per head the
// two Q/K branches are ropes, softmaxed and combined as A1 - lambda * A2
// before the value product; the head output is RMS-normalized and rescaled
// by (1 - lambda_init).
template <typename T>
Tensor<T> diff_attention(const Tensor<T>& x, const AttentionParams<T>& p, const ModelConfig& cfg,
                         int layer_index, const BoolTensor* key_pad, Graph<T>* g = nullptr,
                         AttnDebug<T>* dbg = nullptr) {
  std::size_t B = x.dim(0), Tn = x.dim(1);
  std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  T lam_init = static_cast<T>(cfg.lambda_init(layer_index));
  T inv_scale = static_cast<T>(1.0 / std::sqrt(cfg.attn_scale_divisor()));
  auto positions = detail::iota_positions(Tn);

  Tensor<T> q = ops::matmul(x, p.wq, g);
  Tensor<T> k = ops::matmul(x, p.wk, g);
  Tensor<T> v = ops::matmul(x, p.wv, g);

  std::vector<Tensor<T>> head_outs;
  for (int h = 0; h < cfg.num_heads; ++h) {
    std::size_t off = static_cast<std::size_t>(h) * 2 * dh;
    Tensor<T> q1 = ops::rope(ops::slice_lastdim(q, off, dh, g), positions, g);
    Tensor<T> q2 = ops::rope(ops::slice_lastdim(q, off + dh, dh, g), positions, g);
    Tensor<T> k1 = ops::rope(ops::slice_lastdim(k, off, dh, g), positions, g);
    Tensor<T> k2 = ops::rope(ops::slice_lastdim(k, off + dh, dh, g), positions, g);
    Tensor<T> vh = ops::slice_lastdim(v, off, 2 * dh, g);

    Tensor<T> a1 = ops::softmax_lastdim(ops::scale(ops::matmul_nt(q1, k1, g), inv_scale, g),
                                        key_pad, g);
    Tensor<T> a2 = ops::softmax_lastdim(ops::scale(ops::matmul_nt(q2, k2, g), inv_scale, g),
                                        key_pad, g);

    Tensor<T> lam = ops::add_const(
        ops::sub(ops::exp_elem(ops::dot(p.lam_q1[h], p.lam_k1[h], g), g),
                 ops::exp_elem(ops::dot(p.lam_q2[h], p.lam_k2[h], g), g), g),
        lam_init, g);
    Tensor<T> mix = ops::sub(a1, ops::mul_scalar(a2, lam, g), g);
    Tensor<T> oh = ops::matmul(mix, vh, g);
    if (dbg) {
      dbg->pre_norm.push_back(oh);
      dbg->lambda_value.push_back(lam.item());
    }
    Tensor<T> ohn = ops::rmsnorm(oh, p.head_norm_gain[h], T(1e-6), g);
    head_outs.push_back(ops::scale(ohn, T(1) - lam_init, g));
  }
  Tensor<T> cat = ops::concat_lastdim(head_outs, g);
  (void)B;
  return ops::matmul(cat, p.wo, g);
}

// Conventional multi-head scaled dot-product attention (the ablation arm
// and the AR decoder blocks). kv defaults to x; mask is any boolean tensor
// broadcastable over [B, Tq, Tk].
template <typename T>
Tensor<T> standard_attention(const Tensor<T>& x, const Tensor<T>& kv, const AttentionParams<T>& p,
                             const ModelConfig& cfg, const BoolTensor* mask, bool use_rope,
                             Graph<T>* g = nullptr,
                             const std::vector<std::size_t>* q_positions = nullptr) {
  std::size_t dh = static_cast<std::size_t>(cfg.embed_dim) /
                   static_cast<std::size_t>(cfg.num_heads);
  T inv_scale = static_cast<T>(
      1.0 / std::sqrt(cfg.attn_scale == AttnScaleDim::HeadDim ? static_cast<double>(dh)
                                                              : static_cast<double>(cfg.embed_dim)));
  std::size_t Tq = x.dim(1), Tk = kv.dim(1);
  auto qpos = q_positions ? *q_positions : detail::iota_positions(Tq);
  auto kpos = detail::iota_positions(Tk);

  Tensor<T> q = ops::matmul(x, p.wq, g);
  Tensor<T> k = ops::matmul(kv, p.wk, g);
  Tensor<T> v = ops::matmul(kv, p.wv, g);

  std::vector<Tensor<T>> head_outs;
  for (int h = 0; h < cfg.num_heads; ++h) {
    std::size_t off = static_cast<std::size_t>(h) * dh;
    Tensor<T> qh = ops::slice_lastdim(q, off, dh, g);
    Tensor<T> kh = ops::slice_lastdim(k, off, dh, g);
    Tensor<T> vh = ops::slice_lastdim(v, off, dh, g);
    if (use_rope) {
      qh = ops::rope(qh, qpos, g);
      kh = ops::rope(kh, kpos, g);
    }
    Tensor<T> a = ops::softmax_lastdim(ops::scale(ops::matmul_nt(qh, kh, g), inv_scale, g),
                                       mask, g);
    head_outs.push_back(ops::matmul(a, vh, g));
  }
  (void)Tq;
  return ops::matmul(ops::concat_lastdim(head_outs, g), p.wo, g);
}

// Top-k routed mixture of experts over flattened tokens x [N, d].
// Capacity ceil(cf * N * k / M) is enforced in token order during training;
// dropped slots contribute zero with no weight renormalization.
template <typename T>
MoeResult<T> moe_forward(const Tensor<T>& x, const FfnParams<T>& p, const ModelConfig& cfg,
                         bool training, Graph<T>* g = nullptr) {
  if (x.rank() != 2) throw DimensionError("moe_forward: expects [N, d]");
  std::size_t N = x.dim(0);
  std::size_t M = p.experts.size();
  std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), M);

  Tensor<T> logits = ops::linear(x, p.router_w, p.router_b, g);
  Tensor<T> gate = ops::softmax_lastdim(logits, nullptr, g);

  RoutingTrace<T> trace;
  trace.gate_probs = gate;
  trace.chosen.assign(N, {-1, -1});
  trace.weights.assign(N, {T(0), T(0)});
  trace.dropped.assign(N, {0, 0});
  trace.capacity =
      training ? static_cast<std::size_t>(std::ceil(cfg.capacity_factor * static_cast<double>(N) *
                                                    static_cast<double>(k) / static_cast<double>(M)))
               : N;

  std::vector<std::size_t> expert_load(M, 0);
  std::vector<std::vector<std::size_t>> expert_rows(M);
  std::vector<std::size_t> order(M);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = gate.data().data() + n * M;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;  // ties to the lower expert index
    });
    for (std::size_t s = 0; s < k; ++s) {
      std::size_t e = order[s];
      trace.chosen[n][s] = static_cast<std::int32_t>(e);
      trace.weights[n][s] = row[e];
      if (expert_load[e] >= trace.capacity) {
        trace.dropped[n][s] = 1;
      } else {
        ++expert_load[e];
        expert_rows[e].push_back(n);
      }
    }
  }

  Tensor<T> y = Tensor<T>::zeros({N, static_cast<std::size_t>(cfg.embed_dim)});
  for (std::size_t e = 0; e < M; ++e) {
    const auto& rows = expert_rows[e];
    if (rows.empty()) continue;
    Tensor<T> xe = ops::gather_rows(x, rows, g);
    Tensor<T> ye = detail::expert_stack(xe, p.experts[e], g);
    Tensor<T> we = ops::gather_elems(gate, rows, std::vector<std::size_t>(rows.size(), e), g);
    y = ops::scatter_rows_add(y, ops::scale_rows(ye, we, g), rows, g);
  }
  return {y, std::move(trace)};
}

// The shared single-FFN ablation arm; position-wise over any [.., d].
template <typename T>
Tensor<T> dense_ffn_forward(const Tensor<T>& x, const FfnParams<T>& p, Graph<T>* g = nullptr) {
  return detail::expert_stack(x, p.experts.at(0), g);
}

template <typename T>
struct EncodeResult {
  Tensor<T> hidden;  // [B, T, d]
  std::vector<RoutingTrace<T>> traces;
};

struct GenCounters {
  std::size_t encoder_passes = 0;
  std::size_t head_passes = 0;
  std::size_t decoder_steps = 0;
};

struct GenResult {
  std::string text;
  bool terminated = false;
};

template <typename T>
struct Model {
  ModelConfig config;
  ModelParams<T> params;
  mutable GenCounters counters;

  static Model make(const ModelConfig& cfg, std::uint64_t seed) {
    Model m;
    m.config = cfg;
    m.params = build_params<T>(cfg, seed);
    return m;
  }
};

// Pre-norm residual encoder: embed -> L x [attention, FFN/MoE], dropout
// after each sublayer in training mode.
template <typename T>
EncodeResult<T> encoder_forward(const Model<T>& m, const Batch& batch, bool training, Rng* rng,
                                Graph<T>* g = nullptr) {
  const ModelConfig& cfg = m.config;
  std::size_t B = batch.batch_size, Tn = batch.seq_len;
  std::size_t d = static_cast<std::size_t>(cfg.embed_dim);
  if (training && cfg.dropout_p > 0.0 && rng == nullptr)
    throw ConfigError("encoder_forward: training with dropout requires an RNG");

  BoolTensor key_pad;
  key_pad.shape = {B, 1, Tn};
  key_pad.v = batch.src_pad_mask;

  Tensor<T> x = ops::embedding_gather(m.params.tok_embed, batch.src_ids, {B, Tn}, g);
  EncodeResult<T> out;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const auto& lp = m.params.layers[static_cast<std::size_t>(l)];
    Tensor<T> h1 = ops::rmsnorm(x, lp.ln1_gain, T(1e-6), g);
    Tensor<T> a;
    if (cfg.attention_variant == AttentionVariant::Differential)
      a = diff_attention(h1, lp.attn, cfg, l, &key_pad, g);
    else
      a = standard_attention(h1, h1, lp.attn, cfg, &key_pad, /*use_rope=*/true, g);
    if (training && cfg.dropout_p > 0.0) a = ops::dropout(a, cfg.dropout_p, true, *rng, g);
    x = ops::add(x, a, g);

    Tensor<T> h2 = ops::rmsnorm(x, lp.ln2_gain, T(1e-6), g);
    Tensor<T> f;
    if (cfg.ffn_variant == FfnVariant::Moe) {
      Tensor<T> flat = ops::reshape(h2, {B * Tn, d}, g);
      auto moe = moe_forward(flat, lp.ffn, cfg, training, g);
      out.traces.push_back(std::move(moe.trace));
      f = ops::reshape(moe.y, {B, Tn, d}, g);
    } else {
      f = dense_ffn_forward(h2, lp.ffn, g);
    }
    if (training && cfg.dropout_p > 0.0) f = ops::dropout(f, cfg.dropout_p, true, *rng, g);
    x = ops::add(x, f, g);
  }
  out.hidden = x;
  return out;
}

// Position-wise NAR head: FFN(d->d) -> GELU -> FFN(d->V_tgt).
template <typename T>
Tensor<T> nar_head(const Model<T>& m, const Tensor<T>& hidden, Graph<T>* g = nullptr) {
  Tensor<T> h = ops::gelu(ops::linear(hidden, m.params.head_w1, m.params.head_b1, g), g);
  return ops::linear(h, m.params.head_w2, m.params.head_b2, g);
}

template <typename T>
Tensor<T> nar_logits(const Model<T>& m, const Batch& batch, bool training, Rng* rng,
                     Graph<T>* g = nullptr, std::vector<RoutingTrace<T>>* traces = nullptr) {
  auto enc = encoder_forward(m, batch, training, rng, g);
  if (traces) *traces = std::move(enc.traces);
  m.counters.encoder_passes++;
  m.counters.head_passes++;
  return nar_head(m, enc.hidden, g);
}

// Single-pass parallel generation: one encoder+head forward, per-position
// argmax, first-EOS truncation.
template <typename T>
std::vector<GenResult> nar_generate(const Model<T>& m, const Batch& src_batch,
                                    const Vocab& vocab_tgt) {
  Tensor<T> logits = nar_logits(m, src_batch, /*training=*/false, nullptr);
  auto ids = ops::argmax_lastdim(logits);
  std::vector<GenResult> out;
  std::size_t Tn = src_batch.seq_len;
  for (std::size_t b = 0; b < src_batch.batch_size; ++b) {
    std::vector<std::int32_t> row(ids.begin() + static_cast<std::ptrdiff_t>(b * Tn),
                                  ids.begin() + static_cast<std::ptrdiff_t>((b + 1) * Tn));
    auto [text, terminated] = decode_until_eos(row, vocab_tgt);
    out.push_back({text, terminated});
  }
  return out;
}

namespace detail {

// One teacher-forced / incremental decoder pass over dec_in ids [B, Td].
template <typename T>
Tensor<T> decoder_logits(const Model<T>& m, const std::vector<std::int32_t>& dec_ids,
                         std::size_t B, std::size_t Td, const Tensor<T>& memory,
                         const BoolTensor* mem_pad, bool training, Rng* rng,
                         Graph<T>* g = nullptr) {
  const auto& dec = *m.params.decoder;
  const ModelConfig& cfg = m.config;
  Tensor<T> x = ops::embedding_gather(dec.tgt_embed, dec_ids, {B, Td}, g);

  // causal OR decoder-pad mask, [B, Td, Td]
  BoolTensor self_mask;
  self_mask.shape = {B, Td, Td};
  self_mask.v.assign(B * Td * Td, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t qt = 0; qt < Td; ++qt)
      for (std::size_t kt = 0; kt < Td; ++kt) {
        bool causal = kt > qt;
        bool pad = dec_ids[b * Td + kt] == Vocab::kPad;
        self_mask.v[(b * Td + qt) * Td + kt] = (causal || pad) ? 1 : 0;
      }

  Tensor<T> h1 = ops::rmsnorm(x, dec.ln1_gain, T(1e-6), g);
  Tensor<T> a = standard_attention(h1, h1, dec.self_attn, cfg, &self_mask, /*use_rope=*/true, g);
  if (training && cfg.dropout_p > 0.0) a = ops::dropout(a, cfg.dropout_p, true, *rng, g);
  x = ops::add(x, a, g);

  Tensor<T> h2 = ops::rmsnorm(x, dec.ln2_gain, T(1e-6), g);
  Tensor<T> c = standard_attention(h2, memory, dec.cross_attn, cfg, mem_pad, /*use_rope=*/false, g);
  if (training && cfg.dropout_p > 0.0) c = ops::dropout(c, cfg.dropout_p, true, *rng, g);
  x = ops::add(x, c, g);

  Tensor<T> h3 = ops::rmsnorm(x, dec.ln3_gain, T(1e-6), g);
  Tensor<T> f = expert_stack(h3, dec.ffn, g);
  if (training && cfg.dropout_p > 0.0) f = ops::dropout(f, cfg.dropout_p, true, *rng, g);
  x = ops::add(x, f, g);

  return ops::linear(x, dec.out_w, dec.out_b, g);
}

}  // namespace detail

// Greedy autoregressive baseline: one character per sequential decoder
// step until EOS or max_len. EOS doubles as the start token.
template <typename T>
std::vector<GenResult> ar_generate(const Model<T>& m, const Batch& src_batch,
                                   std::size_t max_len, const Vocab& vocab_tgt) {
  if (!m.params.decoder) throw ConfigError("ar_generate: model has no AR decoder");
  std::size_t B = src_batch.batch_size;
  auto enc = encoder_forward(m, src_batch, /*training=*/false, nullptr);
  m.counters.encoder_passes++;

  BoolTensor mem_pad;
  mem_pad.shape = {B, 1, src_batch.seq_len};
  mem_pad.v = src_batch.src_pad_mask;

  std::vector<std::int32_t> ys(B, Vocab::kEos);  // [B, 1] start column
  std::vector<std::uint8_t> done(B, 0);
  std::size_t Td = 1;
  for (std::size_t step = 0; step < max_len; ++step) {
    Tensor<T> logits =
        detail::decoder_logits(m, ys, B, Td, enc.hidden, &mem_pad, /*training=*/false, nullptr);
    m.counters.decoder_steps++;
    auto ids = ops::argmax_lastdim(logits);  // [B * Td]
    std::vector<std::int32_t> next(B);
    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      next[b] = ids[b * Td + (Td - 1)];
      if (next[b] == Vocab::kEos) done[b] = 1;
      if (!done[b]) all_done = false;
    }
    // grow ys to [B, Td+1]
    std::vector<std::int32_t> grown((Td + 1) * B);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(ys.begin() + static_cast<std::ptrdiff_t>(b * Td), Td,
                  grown.begin() + static_cast<std::ptrdiff_t>(b * (Td + 1)));
      grown[b * (Td + 1) + Td] = next[b];
    }
    ys = std::move(grown);
    ++Td;
    if (all_done) break;
  }
  std::vector<GenResult> out;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::int32_t> row(ys.begin() + static_cast<std::ptrdiff_t>(b * Td) + 1,
                                  ys.begin() + static_cast<std::ptrdiff_t>((b + 1) * Td));
    auto [text, terminated] = decode_until_eos(row, vocab_tgt);
    out.push_back({text, terminated});
  }
  return out;
}

}  // namespace nadir
