#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "sparseadapter/model.hpp"

namespace sparseadapter {

// Adds the adapter groups for `spec` to every layer. Adapter weight matrices
// are prunable; biases and prefix vectors are trainable only.
void insert_adapters(Model& model, const AdapterSpec& spec, std::uint64_t seed);

// Bottleneck delta gelu(x W_down + b_down) W_up + b_up for the site whose
// groups are named `<site>.down`, `<site>.b_down`, `<site>.up`, `<site>.b_up`.
Var bottleneck_delta(const Var& x, ParamBinder& params, const std::string& site);

// x + bottleneck_delta(x): the serial (Houlsby/Pfeiffer) adapter.
Var bottleneck_adapter(const Var& x, ParamBinder& params, const std::string& site);

// (alpha / r) * (x A) B for the projection whose LoRA groups are `<proj>.lora_a`, `<proj>.lora_b`.
Var lora_delta(const Var& x, ParamBinder& params, const std::string& proj, double scale);

// Evaluates one adapter site on a concrete input. Bottleneck sites
// ("layerN.attn.adapter", "layerN.ffn.adapter") return x + delta; LoRA sites
// ("layerN.attn.q", "layerN.attn.v") return the base projection plus the LoRA delta.
Tensor adapter_forward(const Model& model, const std::string& site, const Tensor& x);

struct ParamReport {
  std::size_t total_backbone = 0;
  std::size_t adapter_total = 0;     // all adapter parameters, including biases and prefixes
  std::size_t adapter_prunable = 0;  // adapter weight matrices only
  std::size_t adapter_kept = 0;      // adapter_total minus masked-out weights
  std::size_t prunable_kept = 0;     // adapter_prunable minus masked-out weights
  std::size_t head = 0;
  std::size_t total = 0;
  double fraction_kept = 0.0;            // adapter_kept / total
  double fraction_kept_with_head = 0.0;  // (adapter_kept + head) / total
  double weight_fraction_kept = 0.0;     // prunable_kept / total
};

ParamReport trainable_param_report(const Model& model);

struct LargeSparseConfig {
  std::size_t r_base = 0;
  std::size_t scale_k = 1;
  std::size_t r = 0;
  double s = 0.0;
};

// Bottleneck k * r_base at sparsity 1 - 1/k keeps the dense r_base budget.
LargeSparseConfig large_sparse_config(std::size_t r_base, std::size_t k);

}  // namespace sparseadapter
