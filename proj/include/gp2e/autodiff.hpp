// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gp2e/tensor.hpp"

namespace gp2e {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Parameter name -> gradient of identical shape.
using GradMap = std::map<std::string, Tensor>;

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_mat(const Tensor& t) { return ConstMap(t.data().data(), t.rows(), t.cols()); }
inline MutMap as_mat(Tensor& t) { return MutMap(t.data().data(), t.rows(), t.cols()); }

// Name of an op whose backward rule is deliberately skewed. Only set by the
// gradient-check negative control.
inline std::string& corrupted_backward_op() {
  thread_local std::string op;
  return op;
}

}  // namespace detail

/// Records forward operations so reverse-mode gradients can be computed.
/// Single-owner: one forward/backward sequence at a time.
class Tape {
 public:
  /// input_grads[k] is null when input k does not need a gradient.
  using BackwardFn =
      std::function<void(const Tensor& grad_out, const Tensor& out, std::vector<Tensor*>& input_grads)>;

  struct Record {
    std::string op;
    std::vector<std::size_t> inputs;
    std::size_t output = 0;
    Shape output_shape;
    std::vector<Shape> input_shapes;
    BackwardFn backward;  // empty when no input requires a gradient
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Tensor v) { return push(std::move(v), {}, false); }

  /// Leaf whose gradient is reported by backward() under `name`.
  Var parameter(const std::string& name, Tensor v) {
    if (param_ids_.count(name)) throw ContractError("parameter '" + name + "' bound twice on one tape");
    Var var = push(std::move(v), name, grad_enabled_);
    param_ids_.emplace(name, var.id);
    return var;
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Appends an op result. `bw` receives the output gradient and accumulates into inputs.
  Var record(std::string_view op, const std::vector<Var>& inputs, Tensor out, BackwardFn bw) {
    require_finite(out, std::string(op).c_str());
    bool needs = false;
    Record rec;
    rec.op = std::string(op);
    for (const Var& in : inputs) {
      if (in.tape != this) throw ContractError(std::string(op) + ": input recorded on a different tape");
      rec.inputs.push_back(in.id);
      rec.input_shapes.push_back(nodes_[in.id].value.shape());
      needs = needs || nodes_[in.id].requires_grad;
    }
    needs = needs && grad_enabled_;
    rec.output_shape = out.shape();
    Var result = push(std::move(out), {}, needs);
    rec.output = result.id;
    if (needs) rec.backward = std::move(bw);
    records_.push_back(std::move(rec));
    return result;
  }

  const std::vector<Record>& records() const noexcept { return records_; }

  /// Number of recorded products whose output is an n x n matrix formed by
  /// contracting two n-row operands (point-by-point similarity matrices).
  std::size_t count_pairwise_products(std::size_t n) const {
    std::size_t c = 0;
    for (const auto& r : records_) {
      if (r.op != "matmul" && r.op != "matmul_nt") continue;
      if (r.output_shape.size() != 2 || r.output_shape[0] != n || r.output_shape[1] != n) continue;
      if (r.op == "matmul_nt" && r.input_shapes[1][0] == n) ++c;
      if (r.op == "matmul" && r.input_shapes[1][1] == n && r.input_shapes[1][0] != n) ++c;
    }
    return c;
  }

  /// Hash of every piecewise branch taken so far: relu input signs and the
  /// winning row of each max-pool column. Two evaluations with equal
  /// signatures lie on the same smooth piece.
  std::uint64_t branch_signature() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t v) { h = (h ^ v) * 1099511628211ull; };
    for (const auto& r : records_) {
      const Tensor& x = nodes_[r.inputs.empty() ? r.output : r.inputs[0]].value;
      if (r.op == "relu") {
        for (double v : x.data()) mix(v > 0.0);
      } else if (r.op == "reduce_max_points") {
        for (std::size_t k = 0; k < x.dim(1); ++k) {
          std::size_t arg = 0;
          for (std::size_t row = 1; row < x.dim(0); ++row)
            if (x(row, k) > x(arg, k)) arg = row;
          mix(arg);
        }
      }
    }
    return h;
  }

  /// Reverse pass from a scalar loss. Consumes the tape.
  GradMap backward(Var loss) {
    if (consumed_) throw ContractError("backward called twice on the same tape");
    if (loss.tape != this) throw ContractError("loss recorded on a different tape");
    if (loss.value().size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.value().shape()));
    }
    consumed_ = true;
    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[loss.id] = Tensor(loss.value().shape(), 1.0);
    const std::string& corrupt = detail::corrupted_backward_op();

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (!it->backward || !grads[it->output]) continue;
      std::vector<Tensor*> in_grads;
      in_grads.reserve(it->inputs.size());
      for (std::size_t id : it->inputs) {
        if (!nodes_[id].requires_grad) {
          in_grads.push_back(nullptr);
          continue;
        }
        if (!grads[id]) grads[id] = Tensor(nodes_[id].value.shape(), 0.0);
        in_grads.push_back(&*grads[id]);
      }
      if (!corrupt.empty() && corrupt == it->op) {
        Tensor skewed = *grads[it->output];
        for (double& g : skewed.data()) g *= 1.5;
        it->backward(skewed, nodes_[it->output].value, in_grads);
      } else {
        it->backward(*grads[it->output], nodes_[it->output].value, in_grads);
      }
      if (it->output != loss.id) grads[it->output].reset();
    }

    GradMap out;
    for (const auto& [name, id] : param_ids_) {
      out.emplace(name, grads[id] ? std::move(*grads[id]) : Tensor(nodes_[id].value.shape(), 0.0));
    }
    return out;
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
  };

  Var push(Tensor v, const std::string& /*name*/, bool requires_grad) {
    nodes_.push_back(Node{std::move(v), requires_grad});
    return Var{this, nodes_.size() - 1};
  }

  bool grad_enabled_;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<Record> records_;
  std::map<std::string, std::size_t> param_ids_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

inline void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// ---------------------------------------------------------------------------
// Primitive differentiable ops.

/// a[m x k] . b[k x n]
inline Var matmul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul");
  require_rank2(B, "matmul");
  if (A.dim(1) != B.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
  }
  Tensor out(Shape{A.dim(0), B.dim(1)});
  detail::as_mat(out).noalias() = detail::as_mat(A) * detail::as_mat(B);
  Tape* tape = a.tape;
  return tape->record("matmul", {a, b}, std::move(out),
                      [tape, ia = a.id, ib = b.id](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                        const Tensor& A = tape->value(ia);
                        const Tensor& B = tape->value(ib);
                        if (in[0]) detail::as_mat(*in[0]).noalias() += detail::as_mat(g) * detail::as_mat(B).transpose();
                        if (in[1]) detail::as_mat(*in[1]).noalias() += detail::as_mat(A).transpose() * detail::as_mat(g);
                      });
}

/// a[m x k] . b[n x k]^T
inline Var matmul_nt(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  require_rank2(A, "matmul_nt");
  require_rank2(B, "matmul_nt");
  if (A.dim(1) != B.dim(1)) {
    throw DimensionError("matmul_nt: inner extents differ, " + shape_str(A.shape()) + " x " +
                         shape_str(B.shape()) + "^T");
  }
  Tensor out(Shape{A.dim(0), B.dim(0)});
  detail::as_mat(out).noalias() = detail::as_mat(A) * detail::as_mat(B).transpose();
  Tape* tape = a.tape;
  return tape->record("matmul_nt", {a, b}, std::move(out),
                      [tape, ia = a.id, ib = b.id](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                        const Tensor& A = tape->value(ia);
                        const Tensor& B = tape->value(ib);
                        if (in[0]) detail::as_mat(*in[0]).noalias() += detail::as_mat(g) * detail::as_mat(B);
                        if (in[1]) detail::as_mat(*in[1]).noalias() += detail::as_mat(g).transpose() * detail::as_mat(A);
                      });
}

inline Var add(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) throw DimensionError("add: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return a.tape->record("add", {a, b}, std::move(out), [](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
    accumulate(in[0], g);
    accumulate(in[1], g);
  });
}

/// x[N x c] + bias[c] broadcast over rows.
inline Var add_row(Var x, Var bias) {
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  require_rank2(X, "add_row");
  if (b.rank() != 1 || b.dim(0) != X.dim(1)) {
    throw DimensionError("add_row: bias " + shape_str(b.shape()) + " does not match " + shape_str(X.shape()));
  }
  Tensor out = X;
  const std::size_t n = X.dim(0), c = X.dim(1);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < c; ++k) out(r, k) += b[k];
  return x.tape->record("add_row", {x, bias}, std::move(out), [n, c](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
    accumulate(in[0], g);
    if (in[1]) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t k = 0; k < c; ++k) (*in[1])[k] += g(r, k);
    }
  });
}

inline Var mul(Var a, Var b) {
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) throw DimensionError("mul: " + shape_str(A.shape()) + " vs " + shape_str(B.shape()));
  Tensor out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  Tape* tape = a.tape;
  return tape->record("mul", {a, b}, std::move(out),
                      [tape, ia = a.id, ib = b.id](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                        const Tensor& A = tape->value(ia);
                        const Tensor& B = tape->value(ib);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (in[0]) (*in[0])[i] += g[i] * B[i];
                          if (in[1]) (*in[1])[i] += g[i] * A[i];
                        }
                      });
}

inline Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= s;
  return a.tape->record("scale", {a}, std::move(out), [s](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
    for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += s * g[i];
  });
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape->record("sum", {a}, Tensor::scalar(s), [](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
    const double gv = g[0];
    for (double& v : in[0]->data()) v += gv;
  });
}

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->record("reshape", {a}, std::move(out), [](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
    auto d = in[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

/// Channel-wise concatenation of N x c_i parts, preserving part order.
inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no parts");
  const std::size_t n = parts[0].value().rank() == 2 ? parts[0].value().dim(0) : 0;
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    require_rank2(t, "concat_channels");
    if (t.dim(0) != n) {
      throw DimensionError("concat_channels: point count " + std::to_string(t.dim(0)) + " differs from " +
                           std::to_string(n));
    }
    widths.push_back(t.dim(1));
    total += t.dim(1);
  }
  Tensor out(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& t = parts[p].value();
    for (std::size_t r = 0; r < n; ++r)
      std::copy(t.row(r).begin(), t.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(off));
    off += widths[p];
  }
  return parts[0].tape->record("concat_channels", parts, std::move(out),
                               [n, widths, total](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                                 std::size_t off = 0;
                                 for (std::size_t p = 0; p < in.size(); ++p) {
                                   if (in[p]) {
                                     for (std::size_t r = 0; r < n; ++r)
                                       for (std::size_t k = 0; k < widths[p]; ++k)
                                         (*in[p])(r, k) += g[r * total + off + k];
                                   }
                                   off += widths[p];
                                 }
                               });
}

/// Concatenation of rank-1 vectors.
inline Var concat_vectors(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_vectors: no parts");
  std::vector<double> out;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    if (p.value().rank() != 1) throw DimensionError("concat_vectors: expected vectors, got " + shape_str(p.shape()));
    sizes.push_back(p.value().size());
    out.insert(out.end(), p.value().data().begin(), p.value().data().end());
  }
  return parts[0].tape->record("concat_vectors", parts, Tensor::vector(std::move(out)),
                               [sizes](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                                 std::size_t off = 0;
                                 for (std::size_t p = 0; p < in.size(); ++p) {
                                   if (in[p])
                                     for (std::size_t k = 0; k < sizes[p]; ++k) (*in[p])[k] += g[off + k];
                                   off += sizes[p];
                                 }
                               });
}

/// Stacks equal-length vectors into a B x d matrix.
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const std::size_t d = rows[0].value().size();
  std::vector<double> out;
  out.reserve(rows.size() * d);
  for (const Var& r : rows) {
    if (r.value().size() != d) throw DimensionError("stack_rows: ragged rows");
    out.insert(out.end(), r.value().data().begin(), r.value().data().end());
  }
  return rows[0].tape->record("stack_rows", rows, Tensor(Shape{rows.size(), d}, std::move(out)),
                              [d](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                                for (std::size_t p = 0; p < in.size(); ++p)
                                  if (in[p])
                                    for (std::size_t k = 0; k < d; ++k) (*in[p])[k] += g[p * d + k];
                              });
}

/// Per-channel maximum over the point axis. Gradient goes to the lowest-index argmax.
inline Var reduce_max_points(Var x) {
  const Tensor& X = x.value();
  require_rank2(X, "reduce_max_points");
  const std::size_t n = X.dim(0), c = X.dim(1);
  if (n == 0) throw DimensionError("reduce_max_points: empty point set");
  Tensor out(Shape{c});
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t k = 0; k < c; ++k) out[k] = X(0, k);
  for (std::size_t r = 1; r < n; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      if (X(r, k) > out[k]) {
        out[k] = X(r, k);
        arg[k] = r;
      }
    }
  }
  return x.tape->record("reduce_max_points", {x}, std::move(out),
                        [arg = std::move(arg), c](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                          for (std::size_t k = 0; k < c; ++k) (*in[0])(arg[k], k) += g[k];
                        });
}

inline Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  Tape* tape = x.tape;
  return tape->record("relu", {x}, std::move(out), [tape, ix = x.id](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
    const Tensor& X = tape->value(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > 0.0) (*in[0])[i] += g[i];
  });
}

/// Row-wise softmax with max subtraction.
inline Var softmax_rows(Var x) {
  const Tensor& X = x.value();
  require_rank2(X, "softmax_rows");
  const std::size_t n = X.dim(0), m = X.dim(1);
  Tensor out(X.shape());
  for (std::size_t r = 0; r < n; ++r) {
    auto in_row = X.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in_row.begin(), in_row.end());
    double z = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      o[k] = std::exp(in_row[k] - mx);
      z += o[k];
    }
    for (std::size_t k = 0; k < m; ++k) o[k] /= z;
  }
  return x.tape->record("softmax_rows", {x}, std::move(out),
                        [n, m](const Tensor& g, const Tensor& Y, std::vector<Tensor*>& in) {
                          for (std::size_t r = 0; r < n; ++r) {
                            double dot = 0.0;
                            for (std::size_t k = 0; k < m; ++k) dot += g(r, k) * Y(r, k);
                            for (std::size_t k = 0; k < m; ++k) (*in[0])(r, k) += Y(r, k) * (g(r, k) - dot);
                          }
                        });
}

/// Looks up table[index[i]] for every element; index has the output's shape.
inline Var gather(Var table, Shape out_shape, std::vector<std::size_t> index) {
  const Tensor& T = table.value();
  if (T.rank() != 1) throw DimensionError("gather: table must be a vector, got " + shape_str(T.shape()));
  if (shape_numel(out_shape) != index.size()) throw DimensionError("gather: index count does not match shape");
  Tensor out(std::move(out_shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= T.size()) throw DimensionError("gather: index out of range");
    out[i] = T[index[i]];
  }
  return table.tape->record("gather", {table}, std::move(out),
                            [index = std::move(index)](const Tensor& g, const Tensor&, std::vector<Tensor*>& in) {
                              for (std::size_t i = 0; i < index.size(); ++i) (*in[0])[index[i]] += g[i];
                            });
}

/// Central-difference gradient of a scalar function.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at index " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// Relative error used by every gradient check; elements where both sides are
/// below `floor_abs` are treated as agreeing.
inline double max_relative_error(const Tensor& analytic, const Tensor& numeric, double floor_abs = 1e-10) {
  if (analytic.shape() != numeric.shape()) {
    throw DimensionError("gradient shapes differ: " + shape_str(analytic.shape()) + " vs " +
                         shape_str(numeric.shape()));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    if (std::abs(a) < floor_abs && std::abs(n) < floor_abs) continue;
    const double denom = std::max({std::abs(a), std::abs(n), 1e-12});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace gp2e
