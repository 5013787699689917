#include "sparseadapter/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "sparseadapter/errors.hpp"

namespace sparseadapter::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

void require(bool ok, const std::string& op, const std::string& msg) {
  if (!ok) throw ContractViolation(op + ": " + msg);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
}

Shape with_last(Shape s, std::size_t last) {
  if (s.empty()) s.push_back(last);
  else s.back() = last;
  return s;
}

template <class F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
  return out;
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_value(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_d1(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

double gelu_d2(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  const double ddu = kGeluC * 6.0 * kGeluA * x;
  return sech2 * du + 0.5 * x * sech2 * (ddu - 2.0 * t * du * du);
}

}  // namespace

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == sb.size() && (sa.size() == 2 || sa.size() == 3), "matmul",
          "operands must both be rank 2 or rank 3, got " + shape_to_string(sa) + " and " + shape_to_string(sb));
  const bool batched = sa.size() == 3;
  const std::size_t nb = batched ? sa[0] : 1;
  require(!batched || sb[0] == nb, "matmul", "batch mismatch");
  const std::size_t ar = sa[sa.size() - 2], ac = sa.back();
  const std::size_t br = sb[sb.size() - 2], bc = sb.back();
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t k2 = trans_b ? bc : br, n = trans_b ? br : bc;
  require(k == k2, "matmul",
          "inner dimensions differ: " + shape_to_string(sa) + (trans_a ? "^T" : "") + " x " + shape_to_string(sb) +
              (trans_b ? "^T" : ""));
  Shape out_shape = batched ? Shape{nb, m, n} : Shape{m, n};

  auto forward = [=](std::span<const Tensor* const> in) {
    Tensor out(out_shape);
    for (std::size_t bi = 0; bi < nb; ++bi) {
      ConstMap A(in[0]->ptr() + bi * ar * ac, static_cast<Eigen::Index>(ar), static_cast<Eigen::Index>(ac));
      ConstMap B(in[1]->ptr() + bi * br * bc, static_cast<Eigen::Index>(br), static_cast<Eigen::Index>(bc));
      MutMap C(out.ptr() + bi * m * n, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
      if (!trans_a && !trans_b) C.noalias() = A * B;
      else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
      else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
      else C.noalias() = A.transpose() * B.transpose();
    }
    return out;
  };
  auto backward = [=](const BackwardContext& c) {
    const Var& A = c.inputs[0];
    const Var& B = c.inputs[1];
    const Var& G = c.grad;
    Var da, db;
    if (!trans_a && !trans_b) {
      if (c.needs(0)) da = matmul(G, B, false, true);
      if (c.needs(1)) db = matmul(A, G, true, false);
    } else if (trans_a && !trans_b) {
      if (c.needs(0)) da = matmul(B, G, false, true);
      if (c.needs(1)) db = matmul(A, G, false, false);
    } else if (!trans_a && trans_b) {
      if (c.needs(0)) da = matmul(G, B, false, false);
      if (c.needs(1)) db = matmul(G, A, true, false);
    } else {
      if (c.needs(0)) da = matmul(B, G, true, true);
      if (c.needs(1)) db = matmul(G, A, true, true);
    }
    return std::vector<Var>{da, db};
  };
  return a.tape().record("matmul", {a, b}, forward, backward);
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  return a.tape().record(
      "add", {a, b}, [](auto in) { return map_binary(*in[0], *in[1], [](double x, double y) { return x + y; }); },
      [](const BackwardContext& c) { return std::vector<Var>{c.grad, c.grad}; });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  return a.tape().record(
      "sub", {a, b}, [](auto in) { return map_binary(*in[0], *in[1], [](double x, double y) { return x - y; }); },
      [](const BackwardContext& c) {
        return std::vector<Var>{c.grad, c.needs(1) ? scale(c.grad, -1.0) : Var()};
      });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  return a.tape().record(
      "mul", {a, b}, [](auto in) { return map_binary(*in[0], *in[1], [](double x, double y) { return x * y; }); },
      [](const BackwardContext& c) {
        return std::vector<Var>{c.needs(0) ? mul(c.grad, c.inputs[1]) : Var(),
                                c.needs(1) ? mul(c.grad, c.inputs[0]) : Var()};
      });
}

Var scale(const Var& x, double k) {
  return x.tape().record(
      "scale", {x}, [k](auto in) { return map_unary(*in[0], [k](double v) { return k * v; }); },
      [k](const BackwardContext& c) { return std::vector<Var>{scale(c.grad, k)}; });
}

Var add_scalar(const Var& x, double k) {
  return x.tape().record(
      "add_scalar", {x}, [k](auto in) { return map_unary(*in[0], [k](double v) { return v + k; }); },
      [](const BackwardContext& c) { return std::vector<Var>{c.grad}; });
}

Var mul_scalar(const Var& x, const Var& s) {
  require(s.value().numel() == 1, "mul_scalar", "scale must have one element");
  return x.tape().record(
      "mul_scalar", {x, s},
      [](auto in) {
        const double k = (*in[1])[0];
        return map_unary(*in[0], [k](double v) { return v * k; });
      },
      [](const BackwardContext& c) {
        Var dx, ds;
        if (c.needs(0)) dx = mul_scalar(c.grad, c.inputs[1]);
        if (c.needs(1)) ds = reshape(sum_all(mul(c.grad, c.inputs[0])), c.inputs[1].shape());
        return std::vector<Var>{dx, ds};
      });
}

Var add_rowvec(const Var& x, const Var& b) {
  require(b.shape().size() == 1 && b.shape()[0] == x.value().cols(), "add_rowvec",
          "bias " + shape_to_string(b.shape()) + " does not match last axis of " + shape_to_string(x.shape()));
  return x.tape().record(
      "add_rowvec", {x, b},
      [](auto in) {
        const Tensor& t = *in[0];
        const Tensor& v = *in[1];
        Tensor out = t;
        const std::size_t d = t.cols();
        for (std::size_t r = 0; r < t.rows(); ++r)
          for (std::size_t j = 0; j < d; ++j) out[r * d + j] += v[j];
        return out;
      },
      [](const BackwardContext& c) {
        return std::vector<Var>{c.grad, c.needs(1) ? sum_rows(c.grad) : Var()};
      });
}

Var mul_rowvec(const Var& x, const Var& g) {
  require(g.shape().size() == 1 && g.shape()[0] == x.value().cols(), "mul_rowvec",
          "scale " + shape_to_string(g.shape()) + " does not match last axis of " + shape_to_string(x.shape()));
  return x.tape().record(
      "mul_rowvec", {x, g},
      [](auto in) {
        const Tensor& t = *in[0];
        const Tensor& v = *in[1];
        Tensor out(t.shape());
        const std::size_t d = t.cols();
        for (std::size_t r = 0; r < t.rows(); ++r)
          for (std::size_t j = 0; j < d; ++j) out[r * d + j] = t[r * d + j] * v[j];
        return out;
      },
      [](const BackwardContext& c) {
        Var dx, dg;
        if (c.needs(0)) dx = mul_rowvec(c.grad, c.inputs[1]);
        if (c.needs(1)) dg = sum_rows(mul(c.grad, c.inputs[0]));
        return std::vector<Var>{dx, dg};
      });
}

Var sum_rows(const Var& x) {
  const Shape in_shape = x.shape();
  return x.tape().record(
      "sum_rows", {x},
      [](auto in) {
        const Tensor& t = *in[0];
        const std::size_t d = t.cols();
        Tensor out({d});
        for (std::size_t r = 0; r < t.rows(); ++r)
          for (std::size_t j = 0; j < d; ++j) out[j] += t[r * d + j];
        return out;
      },
      [in_shape](const BackwardContext& c) { return std::vector<Var>{broadcast_rows(c.grad, in_shape)}; });
}

Var broadcast_rows(const Var& v, const Shape& shape) {
  require(v.shape().size() == 1 && !shape.empty() && v.shape()[0] == shape.back(), "broadcast_rows",
          "cannot broadcast " + shape_to_string(v.shape()) + " to " + shape_to_string(shape));
  return v.tape().record(
      "broadcast_rows", {v},
      [shape](auto in) {
        const Tensor& t = *in[0];
        Tensor out(shape);
        const std::size_t d = t.numel();
        for (std::size_t r = 0; r < out.rows(); ++r) std::copy(t.ptr(), t.ptr() + d, out.ptr() + r * d);
        return out;
      },
      [](const BackwardContext& c) { return std::vector<Var>{sum_rows(c.grad)}; });
}

Var row_sum(const Var& x) {
  const std::size_t d = x.value().cols();
  return x.tape().record(
      "row_sum", {x},
      [](auto in) {
        const Tensor& t = *in[0];
        const std::size_t cols = t.cols();
        Tensor out(with_last(t.shape(), 1));
        for (std::size_t r = 0; r < t.rows(); ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < cols; ++j) s += t[r * cols + j];
          out[r] = s;
        }
        return out;
      },
      [d](const BackwardContext& c) { return std::vector<Var>{broadcast_last(c.grad, d)}; });
}

Var row_mean(const Var& x) { return scale(row_sum(x), 1.0 / static_cast<double>(x.value().cols())); }

Var broadcast_last(const Var& x, std::size_t d) {
  require(x.value().cols() == 1, "broadcast_last", "last axis must be 1, got " + shape_to_string(x.shape()));
  return x.tape().record(
      "broadcast_last", {x},
      [d](auto in) {
        const Tensor& t = *in[0];
        Tensor out(with_last(t.shape(), d));
        for (std::size_t r = 0; r < t.numel(); ++r) std::fill_n(out.ptr() + r * d, d, t[r]);
        return out;
      },
      [](const BackwardContext& c) { return std::vector<Var>{row_sum(c.grad)}; });
}

Var pow_scalar(const Var& x, double p) {
  return x.tape().record(
      "pow_scalar", {x}, [p](auto in) { return map_unary(*in[0], [p](double v) { return std::pow(v, p); }); },
      [p](const BackwardContext& c) {
        return std::vector<Var>{mul(c.grad, scale(pow_scalar(c.inputs[0], p - 1.0), p))};
      });
}

Var exp(const Var& x) {
  return x.tape().record(
      "exp", {x}, [](auto in) { return map_unary(*in[0], [](double v) { return std::exp(v); }); },
      [](const BackwardContext& c) { return std::vector<Var>{mul(c.grad, c.output)}; });
}

Var log(const Var& x) {
  return x.tape().record(
      "log", {x}, [](auto in) { return map_unary(*in[0], [](double v) { return std::log(v); }); },
      [](const BackwardContext& c) { return std::vector<Var>{mul(c.grad, pow_scalar(c.inputs[0], -1.0))}; });
}

Var tanh(const Var& x) {
  return x.tape().record(
      "tanh", {x}, [](auto in) { return map_unary(*in[0], [](double v) { return std::tanh(v); }); },
      [](const BackwardContext& c) {
        Var one_minus_sq = add_scalar(scale(mul(c.output, c.output), -1.0), 1.0);
        return std::vector<Var>{mul(c.grad, one_minus_sq)};
      });
}

Var relu(const Var& x) {
  return x.tape().record(
      "relu", {x}, [](auto in) { return map_unary(*in[0], [](double v) { return v > 0.0 ? v : 0.0; }); },
      [](const BackwardContext& c) {
        Tensor step = map_unary(c.inputs[0].value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; });
        return std::vector<Var>{mul(c.grad, c.grad.tape().constant(std::move(step)))};
      });
}

Var gelu(const Var& x) {
  return x.tape().record(
      "gelu", {x}, [](auto in) { return map_unary(*in[0], gelu_value); },
      [](const BackwardContext& c) { return std::vector<Var>{mul(c.grad, gelu_grad(c.inputs[0]))}; });
}

Var gelu_grad(const Var& x) {
  return x.tape().record(
      "gelu_grad", {x}, [](auto in) { return map_unary(*in[0], gelu_d1); },
      [](const BackwardContext& c) { return std::vector<Var>{mul(c.grad, gelu_grad2(c.inputs[0]))}; });
}

Var gelu_grad2(const Var& x) {
  return x.tape().record(
      "gelu_grad2", {x}, [](auto in) { return map_unary(*in[0], gelu_d2); },
      [](const BackwardContext&) -> std::vector<Var> {
        throw ContractViolation("gelu: derivatives beyond second order are not supported");
      });
}

Var softmax_last(const Var& x) {
  const std::size_t d = x.value().cols();
  return x.tape().record(
      "softmax", {x},
      [](auto in) {
        const Tensor& t = *in[0];
        const std::size_t cols = t.cols();
        Tensor out(t.shape());
        for (std::size_t r = 0; r < t.rows(); ++r) {
          const double* row = t.ptr() + r * cols;
          double* o = out.ptr() + r * cols;
          const double mx = *std::max_element(row, row + cols);
          double s = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(row[j] - mx);
            s += o[j];
          }
          for (std::size_t j = 0; j < cols; ++j) o[j] /= s;
        }
        return out;
      },
      [d](const BackwardContext& c) {
        const Var& y = c.output;
        Var inner = broadcast_last(row_sum(mul(c.grad, y)), d);
        return std::vector<Var>{mul(y, sub(c.grad, inner))};
      });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Shape& s = logits.shape();
  require(s.size() == 2 && s[0] == labels.size(), "cross_entropy",
          "logits " + shape_to_string(s) + " vs " + std::to_string(labels.size()) + " labels");
  const std::size_t n = s[0], k = s[1];
  for (int y : labels) require(y >= 0 && static_cast<std::size_t>(y) < k, "cross_entropy", "label out of range");
  return logits.tape().record(
      "cross_entropy", {logits},
      [labels, n, k](auto in) {
        const Tensor& t = *in[0];
        double total = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
          const double* row = t.ptr() + r * k;
          const double mx = *std::max_element(row, row + k);
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
          total += mx + std::log(s) - row[labels[r]];
        }
        return Tensor::scalar(total / static_cast<double>(n));
      },
      [labels, n, k](const BackwardContext& c) {
        Tensor onehot({n, k});
        for (std::size_t r = 0; r < n; ++r) onehot[r * k + labels[r]] = 1.0;
        Tape& tape = c.grad.tape();
        Var diff = sub(softmax_last(c.inputs[0]), tape.constant(std::move(onehot)));
        return std::vector<Var>{mul_scalar(diff, scale(c.grad, 1.0 / static_cast<double>(n)))};
      });
}

Var sum_all(const Var& x) {
  const Shape in_shape = x.shape();
  return x.tape().record(
      "sum_all", {x},
      [](auto in) {
        double s = 0.0;
        for (double v : in[0]->data()) s += v;
        return Tensor::scalar(s);
      },
      [in_shape](const BackwardContext& c) { return std::vector<Var>{fill(c.grad, in_shape)}; });
}

Var fill(const Var& s, const Shape& shape) {
  require(s.value().numel() == 1, "fill", "source must have one element");
  const Shape src_shape = s.shape();
  return s.tape().record(
      "fill", {s}, [shape](auto in) { return Tensor(shape, (*in[0])[0]); },
      [src_shape](const BackwardContext& c) { return std::vector<Var>{reshape(sum_all(c.grad), src_shape)}; });
}

Var reshape(const Var& x, const Shape& shape) {
  require(shape_numel(shape) == x.value().numel(), "reshape",
          "cannot reshape " + shape_to_string(x.shape()) + " to " + shape_to_string(shape));
  const Shape in_shape = x.shape();
  return x.tape().record(
      "reshape", {x}, [shape](auto in) { return in[0]->reshaped(shape); },
      [in_shape](const BackwardContext& c) { return std::vector<Var>{reshape(c.grad, in_shape)}; });
}

Var split_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Shape& s = x.shape();
  require(s.size() == 2 && s[0] == batch * seq && s[1] % heads == 0, "split_heads",
          "bad input shape " + shape_to_string(s));
  const std::size_t dh = s[1] / heads;
  return x.tape().record(
      "split_heads", {x},
      [=](auto in) {
        const Tensor& t = *in[0];
        Tensor out({batch * heads, seq, dh});
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < seq; ++i)
              std::copy_n(t.ptr() + (b * seq + i) * heads * dh + h * dh, dh,
                          out.ptr() + ((b * heads + h) * seq + i) * dh);
        return out;
      },
      [=](const BackwardContext& c) { return std::vector<Var>{merge_heads(c.grad, batch, seq, heads)}; });
}

Var merge_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads) {
  const Shape& s = x.shape();
  require(s.size() == 3 && s[0] == batch * heads && s[1] == seq, "merge_heads",
          "bad input shape " + shape_to_string(s));
  const std::size_t dh = s[2];
  return x.tape().record(
      "merge_heads", {x},
      [=](auto in) {
        const Tensor& t = *in[0];
        Tensor out({batch * seq, heads * dh});
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < seq; ++i)
              std::copy_n(t.ptr() + ((b * heads + h) * seq + i) * dh, dh,
                          out.ptr() + (b * seq + i) * heads * dh + h * dh);
        return out;
      },
      [=](const BackwardContext& c) { return std::vector<Var>{split_heads(c.grad, batch, seq, heads)}; });
}

Var gather_rows(const Var& table, const std::vector<std::size_t>& ids) {
  const Shape& s = table.shape();
  require(s.size() == 2, "gather_rows", "table must be rank 2");
  const std::size_t n_rows = s[0], d = s[1];
  for (std::size_t id : ids) require(id < n_rows, "gather_rows", "index " + std::to_string(id) + " out of range");
  return table.tape().record(
      "gather_rows", {table},
      [ids, d](auto in) {
        Tensor out({ids.size(), d});
        for (std::size_t i = 0; i < ids.size(); ++i) std::copy_n(in[0]->ptr() + ids[i] * d, d, out.ptr() + i * d);
        return out;
      },
      [ids, n_rows](const BackwardContext& c) { return std::vector<Var>{scatter_add_rows(c.grad, ids, n_rows)}; });
}

Var scatter_add_rows(const Var& x, const std::vector<std::size_t>& ids, std::size_t n_rows) {
  const Shape& s = x.shape();
  require(s.size() == 2 && s[0] == ids.size(), "scatter_add_rows", "bad input shape " + shape_to_string(s));
  const std::size_t d = s[1];
  return x.tape().record(
      "scatter_add_rows", {x},
      [ids, n_rows, d](auto in) {
        Tensor out({n_rows, d});
        for (std::size_t i = 0; i < ids.size(); ++i)
          for (std::size_t j = 0; j < d; ++j) out[ids[i] * d + j] += (*in[0])[i * d + j];
        return out;
      },
      [ids](const BackwardContext& c) { return std::vector<Var>{gather_rows(c.grad, ids)}; });
}

Var tile_batch(const Var& x, std::size_t batch) {
  const Shape& s = x.shape();
  require(s.size() == 3, "tile_batch", "input must be rank 3");
  Shape out_shape{batch * s[0], s[1], s[2]};
  return x.tape().record(
      "tile_batch", {x},
      [out_shape, batch](auto in) {
        const Tensor& t = *in[0];
        Tensor out(out_shape);
        for (std::size_t b = 0; b < batch; ++b) std::copy_n(t.ptr(), t.numel(), out.ptr() + b * t.numel());
        return out;
      },
      [batch](const BackwardContext& c) { return std::vector<Var>{sum_batch(c.grad, batch)}; });
}

Var sum_batch(const Var& x, std::size_t batch) {
  const Shape& s = x.shape();
  require(s.size() == 3 && batch > 0 && s[0] % batch == 0, "sum_batch", "bad input shape " + shape_to_string(s));
  Shape out_shape{s[0] / batch, s[1], s[2]};
  return x.tape().record(
      "sum_batch", {x},
      [out_shape, batch](auto in) {
        const Tensor& t = *in[0];
        Tensor out(out_shape);
        const std::size_t block = out.numel();
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t i = 0; i < block; ++i) out[i] += t[b * block + i];
        return out;
      },
      [batch](const BackwardContext& c) { return std::vector<Var>{tile_batch(c.grad, batch)}; });
}

Var concat_mid(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[2], "concat_mid",
          "incompatible shapes " + shape_to_string(sa) + " and " + shape_to_string(sb));
  const std::size_t n = sa[0], ta = sa[1], tb = sb[1], k = sa[2];
  return a.tape().record(
      "concat_mid", {a, b},
      [=](auto in) {
        Tensor out({n, ta + tb, k});
        for (std::size_t i = 0; i < n; ++i) {
          std::copy_n(in[0]->ptr() + i * ta * k, ta * k, out.ptr() + i * (ta + tb) * k);
          std::copy_n(in[1]->ptr() + i * tb * k, tb * k, out.ptr() + i * (ta + tb) * k + ta * k);
        }
        return out;
      },
      [ta, tb](const BackwardContext& c) {
        return std::vector<Var>{c.needs(0) ? slice_mid(c.grad, 0, ta) : Var(),
                                c.needs(1) ? slice_mid(c.grad, ta, tb) : Var()};
      });
}

Var slice_mid(const Var& x, std::size_t start, std::size_t len) {
  const Shape& s = x.shape();
  require(s.size() == 3 && start + len <= s[1], "slice_mid", "slice out of range for " + shape_to_string(s));
  const std::size_t n = s[0], t = s[1], k = s[2];
  return x.tape().record(
      "slice_mid", {x},
      [=](auto in) {
        Tensor out({n, len, k});
        for (std::size_t i = 0; i < n; ++i) std::copy_n(in[0]->ptr() + (i * t + start) * k, len * k, out.ptr() + i * len * k);
        return out;
      },
      [=](const BackwardContext& c) { return std::vector<Var>{pad_mid(c.grad, start, t - start - len)}; });
}

Var pad_mid(const Var& x, std::size_t before, std::size_t after) {
  const Shape& s = x.shape();
  require(s.size() == 3, "pad_mid", "input must be rank 3");
  const std::size_t n = s[0], t = s[1], k = s[2], total = before + t + after;
  return x.tape().record(
      "pad_mid", {x},
      [=](auto in) {
        Tensor out({n, total, k});
        for (std::size_t i = 0; i < n; ++i) std::copy_n(in[0]->ptr() + i * t * k, t * k, out.ptr() + (i * total + before) * k);
        return out;
      },
      [before, t](const BackwardContext& c) { return std::vector<Var>{slice_mid(c.grad, before, t)}; });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t d = x.value().cols();
  Var centered = sub(x, broadcast_last(row_mean(x), d));
  Var var = row_mean(mul(centered, centered));
  Var inv_std = pow_scalar(add_scalar(var, eps), -0.5);
  Var normed = mul(centered, broadcast_last(inv_std, d));
  return add_rowvec(mul_rowvec(normed, gamma), beta);
}

}  // namespace sparseadapter::ops
