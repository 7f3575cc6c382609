// SPDX-License-Identifier: Apache-2.0
#include "nadir/model_config.hpp"

namespace nadir {

std::string to_string(AttentionVariant v) {
  return v == AttentionVariant::Standard ? "standard" : "differential";
}
std::string to_string(FfnVariant v) { return v == FfnVariant::Dense ? "dense" : "moe"; }
std::string to_string(LambdaSchedule v) {
  return v == LambdaSchedule::Depthwise ? "depthwise" : "constant";
}
std::string to_string(EosMaskPolicy v) {
  switch (v) {
    case EosMaskPolicy::Target: return "target";
    case EosMaskPolicy::Predicted: return "predicted";
    default: return "union";
  }
}
std::string to_string(AttnScaleDim v) {
  return v == AttnScaleDim::HeadDim ? "head_dim" : "model_dim";
}

AttentionVariant attention_variant_from(const std::string& s) {
  if (s == "standard") return AttentionVariant::Standard;
  if (s == "differential") return AttentionVariant::Differential;
  throw ConfigError("unknown attention_variant: " + s);
}
FfnVariant ffn_variant_from(const std::string& s) {
  if (s == "dense") return FfnVariant::Dense;
  if (s == "moe") return FfnVariant::Moe;
  throw ConfigError("unknown ffn_variant: " + s);
}
LambdaSchedule lambda_schedule_from(const std::string& s) {
  if (s == "depthwise") return LambdaSchedule::Depthwise;
  if (s == "constant") return LambdaSchedule::Constant;
  throw ConfigError("unknown lambda_schedule: " + s);
}
EosMaskPolicy eos_mask_policy_from(const std::string& s) {
  if (s == "target") return EosMaskPolicy::Target;
  if (s == "predicted") return EosMaskPolicy::Predicted;
  if (s == "union") return EosMaskPolicy::Union;
  throw ConfigError("unknown eos_mask_policy: " + s);
}
AttnScaleDim attn_scale_from(const std::string& s) {
  if (s == "head_dim") return AttnScaleDim::HeadDim;
  if (s == "model_dim") return AttnScaleDim::ModelDim;
  throw ConfigError("unknown attn_scale: " + s);
}

void ModelConfig::validate() const {
  if (embed_dim <= 0 || num_layers < 0 || num_heads <= 0)
    throw ConfigError("model dims must be positive");
  int div = attention_variant == AttentionVariant::Differential ? 2 * num_heads : num_heads;
  if (embed_dim % div != 0)
    throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                      " must be divisible by " + std::to_string(div) + " for " +
                      to_string(attention_variant) + " attention");
  if (head_dim() % 2 != 0)
    throw ConfigError("per-branch head dim must be even for RoPE, got " +
                      std::to_string(head_dim()));
  if (ffn_variant == FfnVariant::Moe) {
    if (num_experts < 1) throw ConfigError("num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts)
      throw ConfigError("top_k must satisfy 1 <= top_k <= num_experts");
    if (capacity_factor < 1.0) throw ConfigError("capacity_factor must be >= 1.0");
  }
  if (expert_dim < 2 || expert_dim % 2 != 0)
    throw ConfigError("expert_dim must be a positive even number");
  if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout_p must be in [0, 1)");
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["embed_dim"] = embed_dim;
  j["num_layers"] = num_layers;
  j["num_heads"] = num_heads;
  j["num_experts"] = num_experts;
  j["top_k"] = top_k;
  j["expert_dim"] = expert_dim;
  j["capacity_factor"] = capacity_factor;
  j["dropout_p"] = dropout_p;
  j["max_len"] = max_len;
  j["attention_variant"] = to_string(attention_variant);
  j["ffn_variant"] = to_string(ffn_variant);
  j["lambda_schedule"] = to_string(lambda_schedule);
  j["lambda_const"] = lambda_const;
  j["eos_mask_policy"] = to_string(eos_mask_policy);
  j["attn_scale"] = to_string(attn_scale);
  j["with_ar_decoder"] = with_ar_decoder;
  j["vocab_src"] = vocab_src;
  j["vocab_tgt"] = vocab_tgt;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.num_layers = j.value("num_layers", c.num_layers);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.num_experts = j.value("num_experts", c.num_experts);
  c.top_k = j.value("top_k", c.top_k);
  c.expert_dim = j.value("expert_dim", c.expert_dim);
  c.capacity_factor = j.value("capacity_factor", c.capacity_factor);
  c.dropout_p = j.value("dropout_p", c.dropout_p);
  c.max_len = j.value("max_len", c.max_len);
  if (j.contains("attention_variant"))
    c.attention_variant = attention_variant_from(j["attention_variant"].get<std::string>());
  if (j.contains("ffn_variant"))
    c.ffn_variant = ffn_variant_from(j["ffn_variant"].get<std::string>());
  if (j.contains("lambda_schedule"))
    c.lambda_schedule = lambda_schedule_from(j["lambda_schedule"].get<std::string>());
  c.lambda_const = j.value("lambda_const", c.lambda_const);
  if (j.contains("eos_mask_policy"))
    c.eos_mask_policy = eos_mask_policy_from(j["eos_mask_policy"].get<std::string>());
  if (j.contains("attn_scale")) c.attn_scale = attn_scale_from(j["attn_scale"].get<std::string>());
  c.with_ar_decoder = j.value("with_ar_decoder", c.with_ar_decoder);
  c.vocab_src = j.value("vocab_src", c.vocab_src);
  c.vocab_tgt = j.value("vocab_tgt", c.vocab_tgt);
  return c;
}

}  // namespace nadir
