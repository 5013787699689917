#include "sparseadapter/model.hpp"

#include <cmath>

#include "sparseadapter/adapters.hpp"
#include "sparseadapter/errors.hpp"
#include "sparseadapter/ops.hpp"
#include "sparseadapter/rng.hpp"

namespace sparseadapter {

namespace {

constexpr double kEmbeddingStd = 1.0;
constexpr double kPositionStd = 0.1;
constexpr double kWeightStd = 0.02;

Tensor gaussian(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l); }

}  // namespace

void EncoderConfig::validate() const {
  auto positive = [](std::size_t v, const char* field) {
    if (v < 1) throw ContractViolation(std::string("encoder config: ") + field + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(n_layers, "n_layers");
  positive(max_seq_len, "max_seq_len");
  positive(n_classes, "n_classes");
  if (d_model % n_heads != 0) {
    throw ContractViolation("encoder config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                            std::to_string(n_heads));
  }
}

std::string_view to_string(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::houlsby: return "houlsby";
    case AdapterVariant::pfeiffer: return "pfeiffer";
    case AdapterVariant::lora: return "lora";
    case AdapterVariant::mam: return "mam";
  }
  return "unknown";
}

AdapterVariant parse_adapter_variant(std::string_view name) {
  for (auto v : {AdapterVariant::houlsby, AdapterVariant::pfeiffer, AdapterVariant::lora, AdapterVariant::mam}) {
    if (to_string(v) == name) return v;
  }
  throw ContractViolation("unknown adapter variant '" + std::string(name) + "'");
}

void AdapterSpec::validate(std::size_t d_model) const {
  if (r < 1) throw ContractViolation("adapter: r must be >= 1");
  if (r >= d_model && !allow_wide) {
    throw ContractViolation("adapter: bottleneck r=" + std::to_string(r) + " must be < d_model=" + std::to_string(d_model));
  }
  if (!(gaussian_std > 0.0)) throw ContractViolation("adapter: gaussian_std must be > 0");
  if ((variant == AdapterVariant::lora || variant == AdapterVariant::mam) && !(lora_alpha > 0.0)) {
    throw ContractViolation("adapter: lora_alpha must be > 0");
  }
  if (variant == AdapterVariant::mam && prefix_len < 1) throw ContractViolation("adapter: mam requires prefix_len >= 1");
}

ParamGroup& Model::param(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractViolation("no parameter group named '" + std::string(name) + "'");
  return params_[it->second];
}

const ParamGroup& Model::param(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ContractViolation("no parameter group named '" + std::string(name) + "'");
  return params_[it->second];
}

void Model::add_param(ParamGroup group) {
  if (group.prunable && !group.trainable) throw ContractViolation("group '" + group.name + "': prunable implies trainable");
  if (index_.contains(group.name)) throw ContractViolation("duplicate parameter group '" + group.name + "'");
  index_.emplace(group.name, params_.size());
  params_.push_back(std::move(group));
}

Model build_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model model(cfg);
  std::uint64_t stream = 0;
  auto add_matrix = [&](std::string name, std::size_t n_in, std::size_t n_out, double stddev, ParamRole role) {
    Rng rng = Rng::derive(seed, stream++);
    model.add_param({std::move(name), gaussian({n_in, n_out}, stddev, rng), true, false, n_in, n_out, role});
  };
  auto add_vector = [&](std::string name, std::size_t n, double fill, ParamRole role) {
    ++stream;
    model.add_param({std::move(name), Tensor({n}, fill), true, false, 0, 0, role});
  };

  const std::size_t d = cfg.d_model;
  add_matrix("embed.tok", cfg.vocab_size, d, kEmbeddingStd, ParamRole::backbone);
  add_matrix("embed.pos", cfg.max_seq_len, d, kPositionStd, ParamRole::backbone);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    add_vector(p + ".ln1.gamma", d, 1.0, ParamRole::backbone);
    add_vector(p + ".ln1.beta", d, 0.0, ParamRole::backbone);
    for (const char* proj : {"q", "k", "v", "o"}) {
      add_matrix(p + ".attn." + proj + ".weight", d, d, kWeightStd, ParamRole::backbone);
      add_vector(p + ".attn." + proj + ".bias", d, 0.0, ParamRole::backbone);
    }
    add_vector(p + ".ln2.gamma", d, 1.0, ParamRole::backbone);
    add_vector(p + ".ln2.beta", d, 0.0, ParamRole::backbone);
    add_matrix(p + ".ffn.fc1.weight", d, cfg.d_ff, kWeightStd, ParamRole::backbone);
    add_vector(p + ".ffn.fc1.bias", cfg.d_ff, 0.0, ParamRole::backbone);
    add_matrix(p + ".ffn.fc2.weight", cfg.d_ff, d, kWeightStd, ParamRole::backbone);
    add_vector(p + ".ffn.fc2.bias", d, 0.0, ParamRole::backbone);
  }
  add_vector("final_ln.gamma", d, 1.0, ParamRole::backbone);
  add_vector("final_ln.beta", d, 0.0, ParamRole::backbone);
  add_matrix("head.weight", d, cfg.n_classes, kWeightStd, ParamRole::head);
  add_vector("head.bias", cfg.n_classes, 0.0, ParamRole::head);
  return model;
}

void freeze_backbone(Model& model) {
  for (ParamGroup& g : model.params()) {
    if (g.role == ParamRole::backbone) {
      g.trainable = false;
      g.prunable = false;
    }
  }
}

ParamBinder::ParamBinder(Tape& tape, const Model& model, bool track_grads, std::map<std::string, Var> overrides)
    : tape_(tape), model_(model), track_grads_(track_grads), bound_(std::move(overrides)) {}

Var ParamBinder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const ParamGroup& g = model_.param(name);
  Var v = tape_.leaf(g.tensor, track_grads_ && g.trainable, name);
  bound_.emplace(name, v);
  return v;
}

Var forward(const Model& model, ParamBinder& P, const TokenBatch& batch) {
  using namespace ops;
  const EncoderConfig& cfg = model.config();
  const std::size_t B = batch.batch, T = batch.seq_len, d = cfg.d_model, H = cfg.n_heads;
  if (B == 0 || T == 0) throw ContractViolation("forward: empty batch");
  if (batch.tokens.size() != B * T) throw ContractViolation("forward: token count does not match batch shape");
  if (T > cfg.max_seq_len) {
    throw ContractViolation("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  }
  std::vector<std::size_t> tok_ids(B * T), pos_ids(B * T);
  for (std::size_t i = 0; i < B * T; ++i) {
    const int t = batch.tokens[i];
    if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
      throw ContractViolation("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                              std::to_string(cfg.vocab_size));
    }
    tok_ids[i] = static_cast<std::size_t>(t);
    pos_ids[i] = i % T;
  }

  Tape& tape = P.tape();
  const std::optional<AdapterSpec>& spec = model.adapter();
  const auto variant = spec ? std::optional<AdapterVariant>(spec->variant) : std::nullopt;
  const double delta_scale = spec ? spec->lora_alpha / static_cast<double>(spec->r) : 0.0;
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(d / H));

  Var x = add(gather_rows(P("embed.tok"), tok_ids), gather_rows(P("embed.pos"), pos_ids));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = layer_prefix(l);
    Var h = layer_norm(x, P(p + ".ln1.gamma"), P(p + ".ln1.beta"));
    auto project = [&](const char* name) {
      const std::string base = p + ".attn." + name;
      Var y = add_rowvec(matmul(h, P(base + ".weight")), P(base + ".bias"));
      if (variant == AdapterVariant::lora && (name[0] == 'q' || name[0] == 'v')) {
        y = add(y, lora_delta(h, P, base, delta_scale));
      }
      return y;
    };
    Var q = split_heads(project("q"), B, T, H);
    Var k = split_heads(project("k"), B, T, H);
    Var v = split_heads(project("v"), B, T, H);
    if (variant == AdapterVariant::mam) {
      const std::size_t plen = spec->prefix_len;
      k = concat_mid(tile_batch(split_heads(P(p + ".attn.prefix_k"), 1, plen, H), B), k);
      v = concat_mid(tile_batch(split_heads(P(p + ".attn.prefix_v"), 1, plen, H), B), v);
    }
    Var att = softmax_last(scale(matmul(q, k, false, true), attn_scale));
    Var ctx = merge_heads(matmul(att, v), B, T, H);
    Var o = add_rowvec(matmul(ctx, P(p + ".attn.o.weight")), P(p + ".attn.o.bias"));
    if (variant == AdapterVariant::houlsby) o = bottleneck_adapter(o, P, p + ".attn.adapter");
    x = add(x, o);

    Var h2 = layer_norm(x, P(p + ".ln2.gamma"), P(p + ".ln2.beta"));
    Var f = add_rowvec(matmul(h2, P(p + ".ffn.fc1.weight")), P(p + ".ffn.fc1.bias"));
    f = add_rowvec(matmul(gelu(f), P(p + ".ffn.fc2.weight")), P(p + ".ffn.fc2.bias"));
    if (variant == AdapterVariant::houlsby || variant == AdapterVariant::pfeiffer) {
      f = bottleneck_adapter(f, P, p + ".ffn.adapter");
    } else if (variant == AdapterVariant::mam) {
      f = add(f, scale(bottleneck_delta(h2, P, p + ".ffn.adapter"), delta_scale));
    }
    x = add(x, f);
  }
  x = layer_norm(x, P("final_ln.gamma"), P("final_ln.beta"));

  Tensor pool({B, B * T});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) pool[b * B * T + b * T + t] = 1.0 / static_cast<double>(T);
  Var pooled = matmul(tape.constant(std::move(pool)), x);
  return add_rowvec(matmul(pooled, P("head.weight")), P("head.bias"));
}

Var forward(const Model& model, Tape& tape, const TokenBatch& batch) {
  ParamBinder binder(tape, model, true);
  return forward(model, binder, batch);
}

Tensor predict_logits(const Model& model, const TokenBatch& batch) {
  Tape tape;
  tape.set_grad_enabled(false);
  ParamBinder binder(tape, model, false);
  return forward(model, binder, batch).value();
}

Var classification_loss(const Model& model, ParamBinder& params, const TokenBatch& batch) {
  return ops::cross_entropy(forward(model, params, batch), batch.labels);
}

}  // namespace sparseadapter
