#include "sparseadapter/adapters.hpp"

#include "sparseadapter/errors.hpp"
#include "sparseadapter/ops.hpp"
#include "sparseadapter/pruning.hpp"
#include "sparseadapter/rng.hpp"

namespace sparseadapter {

namespace {

bool has_adapters(const Model& model) {
  for (const ParamGroup& g : model.params())
    if (g.role == ParamRole::adapter) return true;
  return false;
}

}  // namespace

void insert_adapters(Model& model, const AdapterSpec& spec, std::uint64_t seed) {
  if (has_adapters(model) || model.adapter()) throw ContractViolation("insert_adapters: model already has adapters");
  const std::size_t d = model.config().d_model;
  spec.validate(d);
  const std::size_t r = spec.r;

  std::uint64_t stream = 0;
  auto matrix = [&](std::string name, std::size_t n_in, std::size_t n_out, bool zero) {
    Rng rng = Rng::derive(seed, stream++);
    Tensor t({n_in, n_out});
    if (!zero) {
      for (double& v : t.data()) v = rng.normal(0.0, spec.gaussian_std);
    }
    model.add_param({std::move(name), std::move(t), true, true, n_in, n_out, ParamRole::adapter});
  };
  auto vector = [&](std::string name, std::size_t n) {
    ++stream;
    model.add_param({std::move(name), Tensor({n}), true, false, 0, 0, ParamRole::adapter});
  };
  auto bottleneck = [&](const std::string& site) {
    matrix(site + ".down", d, r, false);
    vector(site + ".b_down", r);
    matrix(site + ".up", r, d, spec.zero_init_up);
    vector(site + ".b_up", d);
  };

  for (std::size_t l = 0; l < model.config().n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l);
    switch (spec.variant) {
      case AdapterVariant::houlsby:
        bottleneck(p + ".attn.adapter");
        bottleneck(p + ".ffn.adapter");
        break;
      case AdapterVariant::pfeiffer:
        bottleneck(p + ".ffn.adapter");
        break;
      case AdapterVariant::lora:
        for (const char* proj : {"q", "v"}) {
          matrix(p + ".attn." + proj + ".lora_a", d, r, false);
          matrix(p + ".attn." + proj + ".lora_b", r, d, spec.zero_init_up);
        }
        break;
      case AdapterVariant::mam: {
        bottleneck(p + ".ffn.adapter");
        for (const char* name : {".attn.prefix_k", ".attn.prefix_v"}) {
          Rng rng = Rng::derive(seed, stream++);
          Tensor t({spec.prefix_len, d});
          for (double& v : t.data()) v = rng.normal(0.0, spec.gaussian_std);
          model.add_param({p + name, std::move(t), true, false, 0, 0, ParamRole::adapter});
        }
        break;
      }
    }
  }
  model.set_adapter(spec);
}

Var bottleneck_delta(const Var& x, ParamBinder& P, const std::string& site) {
  using namespace ops;
  Var hidden = gelu(add_rowvec(matmul(x, P(site + ".down")), P(site + ".b_down")));
  return add_rowvec(matmul(hidden, P(site + ".up")), P(site + ".b_up"));
}

Var bottleneck_adapter(const Var& x, ParamBinder& P, const std::string& site) {
  return ops::add(x, bottleneck_delta(x, P, site));
}

Var lora_delta(const Var& x, ParamBinder& P, const std::string& proj, double scale) {
  using namespace ops;
  return ops::scale(matmul(matmul(x, P(proj + ".lora_a")), P(proj + ".lora_b")), scale);
}

Tensor adapter_forward(const Model& model, const std::string& site, const Tensor& x) {
  const std::size_t d = model.config().d_model;
  if (x.rank() != 2 || x.cols() != d) {
    throw ContractViolation("adapter_forward: input " + shape_to_string(x.shape()) + " must be (n, " +
                            std::to_string(d) + ")");
  }
  const auto& spec = model.adapter();
  if (!spec) throw ContractViolation("adapter_forward: model has no adapters");
  Tape tape;
  tape.set_grad_enabled(false);
  ParamBinder P(tape, model, false);
  Var in = tape.constant(x);
  if (model.has_param(site + ".down")) return bottleneck_adapter(in, P, site).value();
  if (model.has_param(site + ".lora_a")) {
    Var base = ops::add_rowvec(ops::matmul(in, P(site + ".weight")), P(site + ".bias"));
    const double scale = spec->lora_alpha / static_cast<double>(spec->r);
    return ops::add(base, lora_delta(in, P, site, scale)).value();
  }
  throw ContractViolation("adapter_forward: no adapter at site '" + site + "'");
}

ParamReport trainable_param_report(const Model& model) {
  ParamReport rep;
  const PruneMask* mask = model.mask();
  for (const ParamGroup& g : model.params()) {
    const std::size_t n = g.tensor.numel();
    rep.total += n;
    switch (g.role) {
      case ParamRole::backbone: rep.total_backbone += n; break;
      case ParamRole::head: rep.head += n; break;
      case ParamRole::adapter: {
        rep.adapter_total += n;
        std::size_t kept = n;
        if (g.prunable) {
          rep.adapter_prunable += n;
          if (mask != nullptr && mask->contains(g.name)) kept = mask->kept(g.name);
          rep.prunable_kept += kept;
        }
        rep.adapter_kept += kept;
        break;
      }
    }
  }
  if (rep.total > 0) {
    const double total = static_cast<double>(rep.total);
    rep.fraction_kept = static_cast<double>(rep.adapter_kept) / total;
    rep.fraction_kept_with_head = static_cast<double>(rep.adapter_kept + rep.head) / total;
    rep.weight_fraction_kept = static_cast<double>(rep.prunable_kept) / total;
  }
  return rep;
}

LargeSparseConfig large_sparse_config(std::size_t r_base, std::size_t k) {
  if (k < 1) throw ContractViolation("large_sparse_config: k must be >= 1");
  if (r_base < 1) throw ContractViolation("large_sparse_config: r_base must be >= 1");
  return {r_base, k, k * r_base, 1.0 - 1.0 / static_cast<double>(k)};
}

}  // namespace sparseadapter
