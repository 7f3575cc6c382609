// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "nadir/model.hpp"
#include "nadir/ops.hpp"
#include "nadir/tokenizer.hpp"

namespace nadir {

template <typename T>
struct LossBreakdown {
  Tensor<T> token_loss;  // scalar, graph-connected
  Tensor<T> load_loss;   // scalar (0 for dense variants)
  Tensor<T> total;       // alpha * token + beta * load
  std::size_t masked_tokens = 0;
  std::vector<T> per_layer_load;
};

// Loss mask over [B, T]. "target": positions up to and including the target
// EOS. "predicted": up to the first predicted EOS (all T when none).
// "union": elementwise OR of both.
inline std::vector<std::uint8_t> eos_loss_mask(const Batch& batch,
                                               const std::vector<std::int32_t>* predicted_ids,
                                               EosMaskPolicy policy) {
  std::size_t B = batch.batch_size, Tn = batch.seq_len;
  if (!batch.has_targets) throw DataError("eos_loss_mask: batch has no targets");
  std::vector<std::uint8_t> mask(B * Tn, 0);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t eos = batch.tgt_lengths[b];
    if (eos >= Tn || batch.tgt_ids[b * Tn + eos] != Vocab::kEos)
      throw DataError("eos_loss_mask: target row " + std::to_string(b) + " lacks EOS");
    std::size_t tgt_end = eos;  // inclusive
    std::size_t pred_end = Tn - 1;
    if (policy != EosMaskPolicy::Target) {
      if (!predicted_ids) throw ConfigError("eos_loss_mask: policy needs predicted ids");
      pred_end = Tn - 1;
      for (std::size_t t = 0; t < Tn; ++t)
        if ((*predicted_ids)[b * Tn + t] == Vocab::kEos) {
          pred_end = t;
          break;
        }
    }
    std::size_t end;
    switch (policy) {
      case EosMaskPolicy::Target: end = tgt_end; break;
      case EosMaskPolicy::Predicted: end = pred_end; break;
      default: end = std::max(tgt_end, pred_end); break;
    }
    for (std::size_t t = 0; t <= end; ++t) mask[b * Tn + t] = 1;
  }
  return mask;
}

// Mean cross-entropy over masked positions (normalizer = masked count, not
// B*T; see README on the paper's prefactor).
template <typename T>
Tensor<T> token_loss(const Tensor<T>& logits, const std::vector<std::int32_t>& targets,
                     const std::vector<std::uint8_t>& mask, std::size_t* masked_count_out,
                     Graph<T>* g = nullptr) {
  if (logits.rank() != 3) throw DimensionError("token_loss: logits must be [B, T, V]");
  std::size_t B = logits.dim(0), Tn = logits.dim(1), V = logits.dim(2);
  if (targets.size() != B * Tn || mask.size() != B * Tn)
    throw DimensionError("token_loss: targets/mask size mismatch");
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) throw InvariantError("token_loss: zero masked positions");
  if (masked_count_out) *masked_count_out = count;

  Tensor<T> flat = ops::reshape(logits, {B * Tn, V}, g);
  Tensor<T> ce = ops::cross_entropy_logits(flat, targets, g);
  std::vector<T> mf(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mf[i] = mask[i] ? T(1) : T(0);
  Tensor<T> masked = ops::mul(ce, Tensor<T>::from({B * Tn}, std::move(mf)), g);
  return ops::scale(ops::sum(masked, g), T(1) / static_cast<T>(count), g);
}

// M * sum_e(mean_n gate[n, e])^2 for one layer; >= 1 for any row-stochastic
// gate matrix, = 1 exactly at uniform utilization.
template <typename T>
Tensor<T> load_balance_loss_layer(const Tensor<T>& gate_probs, Graph<T>* g = nullptr) {
  if (gate_probs.rank() != 2) throw DimensionError("load_balance_loss: expects [N, M]");
  std::size_t N = gate_probs.dim(0), M = gate_probs.dim(1);
  Tensor<T> avg = ops::matmul(Tensor<T>::full({1, N}, T(1) / static_cast<T>(N)), gate_probs, g);
  Tensor<T> sq = ops::mul(avg, avg, g);
  return ops::scale(ops::sum(sq, g), static_cast<T>(M), g);
}

// Mean over layers so beta keeps its meaning regardless of depth.
template <typename T>
Tensor<T> load_balance_loss(const std::vector<Tensor<T>>& gate_probs_per_layer,
                            std::vector<T>* per_layer = nullptr, Graph<T>* g = nullptr) {
  if (gate_probs_per_layer.empty()) return Tensor<T>::scalar(T(0));
  Tensor<T> acc;
  for (const auto& gate : gate_probs_per_layer) {
    Tensor<T> l = load_balance_loss_layer(gate, g);
    if (per_layer) per_layer->push_back(l.item());
    acc = acc.defined() ? ops::add(acc, l, g) : l;
  }
  return ops::scale(acc, T(1) / static_cast<T>(gate_probs_per_layer.size()), g);
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& logits, const Batch& batch,
                            const std::vector<RoutingTrace<T>>& traces, double alpha, double beta,
                            EosMaskPolicy policy, Graph<T>* g = nullptr) {
  LossBreakdown<T> out;
  std::vector<std::int32_t> predicted;
  const std::vector<std::int32_t>* pred_ptr = nullptr;
  if (policy != EosMaskPolicy::Target) {
    predicted = ops::argmax_lastdim(logits);
    pred_ptr = &predicted;
  }
  auto mask = eos_loss_mask(batch, pred_ptr, policy);
  out.token_loss = token_loss(logits, batch.tgt_ids, mask, &out.masked_tokens, g);
  std::vector<Tensor<T>> gates;
  gates.reserve(traces.size());
  for (const auto& tr : traces) gates.push_back(tr.gate_probs);
  out.load_loss = load_balance_loss(gates, &out.per_layer_load, g);
  out.total = ops::add(ops::scale(out.token_loss, static_cast<T>(alpha), g),
                       ops::scale(out.load_loss, static_cast<T>(beta), g), g);
  return out;
}

}  // namespace nadir
