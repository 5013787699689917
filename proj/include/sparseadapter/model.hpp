#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sparseadapter/autodiff.hpp"
#include "sparseadapter/tensor.hpp"

namespace sparseadapter {

class PruneMask;

struct EncoderConfig {
  std::size_t vocab_size = 1000;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t n_layers = 4;
  std::size_t max_seq_len = 64;
  std::size_t n_classes = 4;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

enum class AdapterVariant { houlsby, pfeiffer, lora, mam };

std::string_view to_string(AdapterVariant v);
AdapterVariant parse_adapter_variant(std::string_view name);

struct AdapterSpec {
  AdapterVariant variant = AdapterVariant::houlsby;
  std::size_t r = 64;
  double lora_alpha = 16.0;  // lora/mam delta is scaled by lora_alpha / r
  std::size_t prefix_len = 0;  // mam only
  double gaussian_std = 1e-2;
  // Conventional zero init of the up-projection (LoRA B). Degenerate for
  // magnitude/SNIP/GraSP scoring, so off by default.
  bool zero_init_up = false;
  // Permits r >= d_model. Large-Sparse scaling of a desk-scale model needs it.
  bool allow_wide = false;

  void validate(std::size_t d_model) const;
  friend bool operator==(const AdapterSpec&, const AdapterSpec&) = default;
};

enum class ParamRole { backbone, adapter, head };

struct ParamGroup {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  bool prunable = false;
  std::size_t n_in = 0;   // rows of a 2-D weight
  std::size_t n_out = 0;  // cols of a 2-D weight
  ParamRole role = ParamRole::backbone;
};

// A sequence-classification batch; all sequences share one length.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;  // batch * seq_len, row-major
  std::vector<int> labels;  // batch
};

class Model {
 public:
  explicit Model(EncoderConfig cfg) : cfg_(std::move(cfg)) {}

  const EncoderConfig& config() const noexcept { return cfg_; }

  const std::vector<ParamGroup>& params() const noexcept { return params_; }
  std::vector<ParamGroup>& params() noexcept { return params_; }
  bool has_param(std::string_view name) const { return index_.contains(std::string(name)); }
  ParamGroup& param(std::string_view name);
  const ParamGroup& param(std::string_view name) const;

  // Registers a group; names must be unique.
  void add_param(ParamGroup group);

  const std::optional<AdapterSpec>& adapter() const noexcept { return adapter_; }
  void set_adapter(AdapterSpec spec) { adapter_ = std::move(spec); }

  const PruneMask* mask() const noexcept { return mask_.get(); }
  std::shared_ptr<const PruneMask> shared_mask() const noexcept { return mask_; }
  void set_mask(std::shared_ptr<const PruneMask> mask) { mask_ = std::move(mask); }

 private:
  EncoderConfig cfg_;
  std::vector<ParamGroup> params_;
  std::map<std::string, std::size_t> index_;
  std::optional<AdapterSpec> adapter_;
  std::shared_ptr<const PruneMask> mask_;
};

Model build_encoder(const EncoderConfig& cfg, std::uint64_t seed);

// Marks every group except adapters and the classifier head as frozen.
void freeze_backbone(Model& model);

// Resolves parameter names to tape leaves for one forward pass. Names in
// `overrides` use the supplied Vars; the rest become leaves that require grad
// iff `track_grads` and the group is trainable.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const Model& model, bool track_grads, std::map<std::string, Var> overrides = {});

  Var operator()(const std::string& name);
  Tape& tape() noexcept { return tape_; }

 private:
  Tape& tape_;
  const Model& model_;
  bool track_grads_;
  std::map<std::string, Var> bound_;
};

// Logits of shape (batch, n_classes).
Var forward(const Model& model, ParamBinder& params, const TokenBatch& batch);
Var forward(const Model& model, Tape& tape, const TokenBatch& batch);

// Evaluation-only forward pass.
Tensor predict_logits(const Model& model, const TokenBatch& batch);

// Mean cross-entropy of a batch.
Var classification_loss(const Model& model, ParamBinder& params, const TokenBatch& batch);

}  // namespace sparseadapter
