// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>

#include <json.hpp>

#include "nadir/common.hpp"

namespace nadir {

enum class AttentionVariant { Standard, Differential };
enum class FfnVariant { Dense, Moe };
enum class LambdaSchedule { Depthwise, Constant };
enum class EosMaskPolicy { Target, Predicted, Union };
enum class AttnScaleDim { HeadDim, ModelDim };

std::string to_string(AttentionVariant v);
std::string to_string(FfnVariant v);
std::string to_string(LambdaSchedule v);
std::string to_string(EosMaskPolicy v);
std::string to_string(AttnScaleDim v);

AttentionVariant attention_variant_from(const std::string& s);
FfnVariant ffn_variant_from(const std::string& s);
LambdaSchedule lambda_schedule_from(const std::string& s);
EosMaskPolicy eos_mask_policy_from(const std::string& s);
AttnScaleDim attn_scale_from(const std::string& s);

struct ModelConfig {
  int embed_dim = 768;
  int num_layers = 4;
  int num_heads = 8;
  int num_experts = 5;
  int top_k = 2;
  int expert_dim = 512;
  double capacity_factor = 1.25;
  double dropout_p = 0.1;
  int max_len = 32;
  AttentionVariant attention_variant = AttentionVariant::Differential;
  FfnVariant ffn_variant = FfnVariant::Moe;
  LambdaSchedule lambda_schedule = LambdaSchedule::Depthwise;
  double lambda_const = 0.5;
  EosMaskPolicy eos_mask_policy = EosMaskPolicy::Target;
  AttnScaleDim attn_scale = AttnScaleDim::HeadDim;
  bool with_ar_decoder = false;
  int vocab_src = 0;
  int vocab_tgt = 0;

  // Per-branch head dim: the differential variant splits Q/K into two
  // branches, so d = 2 * h * d_h there and d = h * d_h for standard.
  int head_dim() const {
    int div = attention_variant == AttentionVariant::Differential ? 2 * num_heads : num_heads;
    return embed_dim / div;
  }

  double lambda_init(int layer_index) const {
    if (lambda_schedule == LambdaSchedule::Constant) return lambda_const;
    return 0.8 - 0.6 * std::exp(-0.3 * static_cast<double>(layer_index));
  }

  double attn_scale_divisor() const {
    return attn_scale == AttnScaleDim::HeadDim ? static_cast<double>(head_dim())
                                               : static_cast<double>(embed_dim);
  }

  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

}  // namespace nadir
