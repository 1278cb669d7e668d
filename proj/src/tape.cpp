// SPDX-License-Identifier: Apache-2.0
#include "ermoe/tape.hpp"

#include <algorithm>
#include <cmath>

#include "ermoe/errors.hpp"
#include "ermoe/linalg.hpp"

namespace ermoe {

namespace {

void check_same_tape(const Var& a, const Var& b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw ContractError(std::string(op) + ": operands must live on one tape");
}

void axpy(Tensor& dst, const Tensor& src, double c = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.at(i) += c * src.at(i);
}

}  // namespace

const Tensor& Var::value() const { return tape_->value_of(id_); }

Var GradTape::leaf(Tensor value) { return emit(std::move(value), {}, nullptr); }

Var GradTape::emit(Tensor value, std::vector<int> parents, Backprop backprop) {
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void GradTape::backward(const Var& loss) {
  if (!loss.valid() || loss.tape() != this)
    throw ContractError("backward: loss is not a node of this tape");
  const Tensor& root = value_of(loss.id());
  if (!root.is_scalar())
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(root.shape()));

  if (ran_backward_) {
    for (Node& n : nodes_) n.grad = Tensor();
  }
  ran_backward_ = true;

  // Mark ancestors of the loss; only they get adjoint passes.
  std::vector<char> reach(nodes_.size(), 0);
  std::vector<int> stack{loss.id()};
  reach[static_cast<std::size_t>(loss.id())] = 1;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<std::size_t>(id)].parents) {
      if (!reach[static_cast<std::size_t>(p)]) {
        reach[static_cast<std::size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (reach[i]) nodes_[i].grad = Tensor(nodes_[i].value.shape());
  }
  nodes_[static_cast<std::size_t>(loss.id())].grad = Tensor::scalar(1.0);

  // Creation order is topological; the reverse walk hits each node once.
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (reach[static_cast<std::size_t>(id)] && n.backprop) n.backprop(*this, id);
  }
}

const Tensor& GradTape::grad(const Var& v) const {
  if (!v.valid() || v.tape() != this)
    throw ContractError("grad: not a node of this tape");
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.size() == n.value.size() && n.grad.size() > 0) return n.grad;
  // Loss never touched this node: report a zero of the right shape.
  auto* self = const_cast<GradTape*>(this);
  self->nodes_[static_cast<std::size_t>(v.id())].grad = Tensor(n.value.shape());
  return nodes_[static_cast<std::size_t>(v.id())].grad;
}

const Tensor& GradTape::value(const Var& v) const {
  if (!v.valid() || v.tape() != this)
    throw ContractError("value: not a node of this tape");
  return value_of(v.id());
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_tape(a, b, "add");
  if (!a.value().same_shape(b.value())) throw DimensionError("add: shape mismatch");
  GradTape& t = *a.tape();
  Tensor out = a.value();
  axpy(out, b.value());
  const int pa = a.id(), pb = b.id();
  return t.emit(std::move(out), {pa, pb}, [pa, pb](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    axpy(t.grad_slot(pa), g);
    axpy(t.grad_slot(pb), g);
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_tape(a, b, "sub");
  if (!a.value().same_shape(b.value())) throw DimensionError("sub: shape mismatch");
  GradTape& t = *a.tape();
  Tensor out = a.value();
  axpy(out, b.value(), -1.0);
  const int pa = a.id(), pb = b.id();
  return t.emit(std::move(out), {pa, pb}, [pa, pb](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    axpy(t.grad_slot(pa), g);
    axpy(t.grad_slot(pb), g, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_tape(a, b, "mul");
  if (!a.value().same_shape(b.value())) throw DimensionError("mul: shape mismatch");
  GradTape& t = *a.tape();
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = a.value().at(i) * b.value().at(i);
  const int pa = a.id(), pb = b.id();
  return t.emit(std::move(out), {pa, pb}, [pa, pb](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& av = t.value_of(pa);
    const Tensor& bv = t.value_of(pb);
    Tensor& ga = t.grad_slot(pa);
    Tensor& gb = t.grad_slot(pb);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga.at(i) += g.at(i) * bv.at(i);
      gb.at(i) += g.at(i) * av.at(i);
    }
  });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  GradTape& t = *a.tape();
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = c * a.value().at(i);
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa, c](GradTape& t, int self) {
    axpy(t.grad_slot(pa), t.grad_slot(self), c);
  });
}

Var square(const Var& a) {
  GradTape& t = *a.tape();
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = a.value().at(i);
    out.at(i) = v * v;
  }
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& av = t.value_of(pa);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < g.size(); ++i) ga.at(i) += 2.0 * av.at(i) * g.at(i);
  });
}

Var abs_val(const Var& a) {
  GradTape& t = *a.tape();
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::abs(a.value().at(i));
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& av = t.value_of(pa);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = av.at(i) > 0.0 ? 1.0 : (av.at(i) < 0.0 ? -1.0 : 0.0);
      ga.at(i) += s * g.at(i);
    }
  });
}

Var relu(const Var& a) {
  GradTape& t = *a.tape();
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = std::max(a.value().at(i), 0.0);
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& av = t.value_of(pa);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av.at(i) > 0.0) ga.at(i) += g.at(i);
    }
  });
}

Var gelu_op(const Var& a) {
  GradTape& t = *a.tape();
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = gelu(a.value().at(i));
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& av = t.value_of(pa);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < g.size(); ++i) ga.at(i) += gelu_grad(av.at(i)) * g.at(i);
  });
}

Var sum(const Var& a) {
  GradTape& t = *a.tape();
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value().at(i);
  const int pa = a.id();
  return t.emit(Tensor::scalar(s), {pa}, [pa](GradTape& t, int self) {
    const double g = t.grad_slot(self).item();
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < ga.size(); ++i) ga.at(i) += g;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  return scale(sum(a), 1.0 / n);
}

Var dot(const Var& a, const Var& b) {
  check_same_tape(a, b, "dot");
  if (a.value().rank() != 1 || b.value().rank() != 1 ||
      a.value().size() != b.value().size())
    throw DimensionError("dot: rank-1 operands of equal length required");
  GradTape& t = *a.tape();
  const double s = ermoe::dot(a.value(), b.value());
  const int pa = a.id(), pb = b.id();
  return t.emit(Tensor::scalar(s), {pa, pb}, [pa, pb](GradTape& t, int self) {
    const double g = t.grad_slot(self).item();
    axpy(t.grad_slot(pa), t.value_of(pb), g);
    axpy(t.grad_slot(pb), t.value_of(pa), g);
  });
}

Var matmul(const Var& a, const Var& b) {
  check_same_tape(a, b, "matmul");
  GradTape& t = *a.tape();
  Tensor out = ermoe::matmul(a.value(), b.value());  // shape checks live there
  const int pa = a.id(), pb = b.id();
  const bool vec = b.value().rank() == 1;
  return t.emit(std::move(out), {pa, pb}, [pa, pb, vec](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& av = t.value_of(pa);
    const Tensor& bv = t.value_of(pb);
    Tensor& ga = t.grad_slot(pa);
    Tensor& gb = t.grad_slot(pb);
    const std::size_t m = av.dim(0), k = av.dim(1);
    if (vec) {
      // y = A b:  gA += g (x) b,  gb += A^T g
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) ga.at2(i, p) += g.at(i) * bv.at(p);
      for (std::size_t p = 0; p < k; ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += av.at2(i, p) * g.at(i);
        gb.at(p) += s;
      }
    } else {
      const std::size_t n = bv.dim(1);
      // gA += G B^T, gB += A^T G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g.at2(i, j) * bv.at2(p, j);
          ga.at2(i, p) += s;
        }
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += av.at2(i, p) * g.at2(i, j);
          gb.at2(p, j) += s;
        }
    }
  });
}

Var transpose(const Var& a) {
  GradTape& t = *a.tape();
  Tensor out = ermoe::transpose(a.value());
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < g.dim(0); ++i)
      for (std::size_t j = 0; j < g.dim(1); ++j) ga.at2(j, i) += g.at2(i, j);
  });
}

Var row(const Var& a, std::size_t i) {
  if (a.value().rank() != 2) throw DimensionError("row: rank-2 input required");
  if (i >= a.value().dim(0)) throw DimensionError("row: index out of range");
  GradTape& t = *a.tape();
  const std::size_t d = a.value().dim(1);
  Tensor out(Shape{d});
  for (std::size_t j = 0; j < d; ++j) out.at(j) = a.value().at2(i, j);
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa, i, d](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t j = 0; j < d; ++j) ga.at2(i, j) += g.at(j);
  });
}

Var slice_cols(const Var& a, std::size_t c0, std::size_t c1) {
  if (a.value().rank() != 2) throw DimensionError("slice_cols: rank-2 input required");
  if (c0 >= c1 || c1 > a.value().dim(1)) throw DimensionError("slice_cols: bad range");
  GradTape& t = *a.tape();
  const std::size_t n = a.value().dim(0), w = c1 - c0;
  Tensor out(Shape{n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at2(i, j) = a.value().at2(i, c0 + j);
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa, c0, n, w](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) ga.at2(i, c0 + j) += g.at2(i, j);
  });
}

Var gather_cols(const Var& a, std::vector<std::size_t> idx) {
  if (a.value().rank() != 2) throw DimensionError("gather_cols: rank-2 input required");
  for (std::size_t j : idx)
    if (j >= a.value().dim(1)) throw DimensionError("gather_cols: index out of range");
  GradTape& t = *a.tape();
  const std::size_t n = a.value().dim(0), w = idx.size();
  Tensor out(Shape{n, w});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out.at2(i, j) = a.value().at2(i, idx[j]);
  const int pa = a.id();
  return t.emit(std::move(out), {pa}, [pa, idx = std::move(idx), n](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& ga = t.grad_slot(pa);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < idx.size(); ++j) ga.at2(i, idx[j]) += g.at2(i, j);
  });
}

Var concat_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw DimensionError("concat_rows: empty input");
  GradTape& t = *rows.front().tape();
  const std::size_t d = rows.front().value().size();
  std::vector<int> parents;
  for (const Var& r : rows) {
    check_same_tape(rows.front(), r, "concat_rows");
    if (r.value().rank() != 1 || r.value().size() != d)
      throw DimensionError("concat_rows: rows must be rank-1 of equal length");
    parents.push_back(r.id());
  }
  const std::size_t n = rows.size();
  Tensor out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at2(i, j) = rows[i].value().at(j);
  auto ps = parents;
  return t.emit(std::move(out), std::move(parents), [ps, d](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Tensor& gr = t.grad_slot(ps[i]);
      for (std::size_t j = 0; j < d; ++j) gr.at(j) += g.at2(i, j);
    }
  });
}

Var concat_cols(const std::vector<Var>& mats) {
  if (mats.empty()) throw DimensionError("concat_cols: empty input");
  GradTape& t = *mats.front().tape();
  const std::size_t n = mats.front().value().dim(0);
  std::size_t total = 0;
  std::vector<int> parents;
  std::vector<std::size_t> widths;
  for (const Var& m : mats) {
    check_same_tape(mats.front(), m, "concat_cols");
    if (m.value().rank() != 2 || m.value().dim(0) != n)
      throw DimensionError("concat_cols: rank-2 inputs with equal row count required");
    parents.push_back(m.id());
    widths.push_back(m.value().dim(1));
    total += m.value().dim(1);
  }
  Tensor out(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t b = 0; b < mats.size(); ++b) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[b]; ++j)
        out.at2(i, off + j) = mats[b].value().at2(i, j);
    off += widths[b];
  }
  auto ps = parents;
  return t.emit(std::move(out), std::move(parents),
                [ps, widths, n](GradTape& t, int self) {
                  const Tensor& g = t.grad_slot(self);
                  std::size_t off = 0;
                  for (std::size_t b = 0; b < ps.size(); ++b) {
                    Tensor& gm = t.grad_slot(ps[b]);
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < widths[b]; ++j)
                        gm.at2(i, j) += g.at2(i, off + j);
                    off += widths[b];
                  }
                });
}

Var concat_scalars(const std::vector<Var>& vals) {
  if (vals.empty()) throw DimensionError("concat_scalars: empty input");
  GradTape& t = *vals.front().tape();
  std::vector<int> parents;
  Tensor out(Shape{vals.size()});
  for (std::size_t i = 0; i < vals.size(); ++i) {
    check_same_tape(vals.front(), vals[i], "concat_scalars");
    if (!vals[i].value().is_scalar())
      throw DimensionError("concat_scalars: scalar inputs required");
    out.at(i) = vals[i].value().item();
    parents.push_back(vals[i].id());
  }
  auto ps = parents;
  return t.emit(std::move(out), std::move(parents), [ps](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    for (std::size_t i = 0; i < ps.size(); ++i) t.grad_slot(ps[i]).at(0) += g.at(i);
  });
}

Var add_rowvec(const Var& a, const Var& b) {
  check_same_tape(a, b, "add_rowvec");
  if (a.value().rank() != 2 || b.value().rank() != 1 || a.value().dim(1) != b.value().dim(0))
    throw DimensionError("add_rowvec: [n,d] + [d] required");
  GradTape& t = *a.tape();
  const std::size_t n = a.value().dim(0), d = a.value().dim(1);
  Tensor out = a.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at2(i, j) += b.value().at(j);
  const int pa = a.id(), pb = b.id();
  return t.emit(std::move(out), {pa, pb}, [pa, pb, n, d](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    axpy(t.grad_slot(pa), g);
    Tensor& gb = t.grad_slot(pb);
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += g.at2(i, j);
      gb.at(j) += s;
    }
  });
}

Var col_scale(const Var& a, const Var& s) {
  check_same_tape(a, s, "col_scale");
  if (a.value().rank() != 2 || s.value().rank() != 1 || a.value().dim(1) != s.value().dim(0))
    throw DimensionError("col_scale: [n,d] * diag([d]) required");
  GradTape& t = *a.tape();
  const std::size_t n = a.value().dim(0), d = a.value().dim(1);
  Tensor out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at2(i, j) = a.value().at2(i, j) * s.value().at(j);
  const int pa = a.id(), ps = s.id();
  return t.emit(std::move(out), {pa, ps}, [pa, ps, n, d](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& av = t.value_of(pa);
    const Tensor& sv = t.value_of(ps);
    Tensor& ga = t.grad_slot(pa);
    Tensor& gs = t.grad_slot(ps);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        ga.at2(i, j) += g.at2(i, j) * sv.at(j);
        gs.at(j) += g.at2(i, j) * av.at2(i, j);
      }
  });
}

Var mul_scalar(const Var& v, const Var& s) {
  check_same_tape(v, s, "mul_scalar");
  if (!s.value().is_scalar()) throw DimensionError("mul_scalar: scalar multiplier required");
  GradTape& t = *v.tape();
  const double sv = s.value().item();
  Tensor out(v.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = sv * v.value().at(i);
  const int pv = v.id(), ps = s.id();
  return t.emit(std::move(out), {pv, ps}, [pv, ps](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const double sv = t.value_of(ps).item();
    const Tensor& vv = t.value_of(pv);
    axpy(t.grad_slot(pv), g, sv);
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += g.at(i) * vv.at(i);
    t.grad_slot(ps).at(0) += acc;
  });
}

Var div_scalar(const Var& v, const Var& s) {
  check_same_tape(v, s, "div_scalar");
  if (!s.value().is_scalar()) throw DimensionError("div_scalar: scalar divisor required");
  GradTape& t = *v.tape();
  const double sv = s.value().item();
  Tensor out(v.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = v.value().at(i) / sv;
  const int pv = v.id(), ps = s.id();
  return t.emit(std::move(out), {pv, ps}, [pv, ps](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const double sv = t.value_of(ps).item();
    const Tensor& vv = t.value_of(pv);
    axpy(t.grad_slot(pv), g, 1.0 / sv);
    double acc = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) acc += g.at(i) * vv.at(i);
    t.grad_slot(ps).at(0) -= acc / (sv * sv);
  });
}

Var l2_normalize(const Var& v, double eps) {
  GradTape& t = *v.tape();
  const double n = ermoe::norm2(v.value());
  const double m = std::max(n, eps);
  Tensor out(v.value().shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) = v.value().at(i) / m;
  const int pv = v.id();
  const bool below = n < eps;
  return t.emit(std::move(out), {pv}, [pv, n, eps, below](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    Tensor& gv = t.grad_slot(pv);
    if (below) {
      axpy(gv, g, 1.0 / eps);
      return;
    }
    const Tensor& y = t.value_of(self);
    double yg = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) yg += y.at(i) * g.at(i);
    for (std::size_t i = 0; i < g.size(); ++i) gv.at(i) += (g.at(i) - y.at(i) * yg) / n;
  });
}

CosineVar cosine(const Var& u, const Var& v, double eps) {
  check_same_tape(u, v, "cosine");
  if (u.value().size() != v.value().size()) throw DimensionError("cosine: size mismatch");
  GradTape& t = *u.tape();
  const double nu = ermoe::norm2(u.value());
  const double nv = ermoe::norm2(v.value());
  if (nu < eps || nv < eps) {
    return {t.leaf(Tensor::scalar(0.0)), true};
  }
  const double raw = ermoe::dot(u.value(), v.value()) / (nu * nv);
  const double c = std::clamp(raw, -1.0, 1.0);
  const int pu = u.id(), pv = v.id();
  Var out = t.emit(Tensor::scalar(c), {pu, pv}, [pu, pv, nu, nv, raw](GradTape& t, int self) {
    const double g = t.grad_slot(self).item();
    const Tensor& uv = t.value_of(pu);
    const Tensor& vv = t.value_of(pv);
    Tensor& gu = t.grad_slot(pu);
    Tensor& gv = t.grad_slot(pv);
    const double inv = 1.0 / (nu * nv);
    for (std::size_t i = 0; i < uv.size(); ++i) {
      gu.at(i) += g * (vv.at(i) * inv - raw * uv.at(i) / (nu * nu));
      gv.at(i) += g * (uv.at(i) * inv - raw * vv.at(i) / (nv * nv));
    }
  });
  return {out, false};
}

Var softmax(const Var& logits, double temperature) {
  if (logits.value().rank() != 1) throw DimensionError("softmax: rank-1 input required");
  GradTape& t = *logits.tape();
  Tensor p = ermoe::softmax(logits.value(), temperature);  // validates temperature
  const int pl = logits.id();
  return t.emit(std::move(p), {pl}, [pl, temperature](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& p = t.value_of(self);
    Tensor& gl = t.grad_slot(pl);
    double gp = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) gp += g.at(i) * p.at(i);
    for (std::size_t i = 0; i < g.size(); ++i)
      gl.at(i) += p.at(i) * (g.at(i) - gp) / temperature;
  });
}

Var row_softmax(const Var& logits, double temperature) {
  if (logits.value().rank() != 2) throw DimensionError("row_softmax: rank-2 input required");
  if (temperature <= 0.0) throw ConfigError("softmax temperature must be positive");
  GradTape& t = *logits.tape();
  const std::size_t n = logits.value().dim(0), m = logits.value().dim(1);
  Tensor p(Shape{n, m});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j)
      mx = std::max(mx, logits.value().at2(i, j) / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p.at2(i, j) = std::exp(logits.value().at2(i, j) / temperature - mx);
      z += p.at2(i, j);
    }
    for (std::size_t j = 0; j < m; ++j) p.at2(i, j) /= z;
  }
  const int pl = logits.id();
  return t.emit(std::move(p), {pl}, [pl, n, m, temperature](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& p = t.value_of(self);
    Tensor& gl = t.grad_slot(pl);
    for (std::size_t i = 0; i < n; ++i) {
      double gp = 0.0;
      for (std::size_t j = 0; j < m; ++j) gp += g.at2(i, j) * p.at2(i, j);
      for (std::size_t j = 0; j < m; ++j)
        gl.at2(i, j) += p.at2(i, j) * (g.at2(i, j) - gp) / temperature;
    }
  });
}

Var log_softmax(const Var& logits) {
  if (logits.value().rank() != 1) throw DimensionError("log_softmax: rank-1 input required");
  GradTape& t = *logits.tape();
  const Tensor& l = logits.value();
  double mx = -INFINITY;
  for (std::size_t i = 0; i < l.size(); ++i) mx = std::max(mx, l.at(i));
  double z = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) z += std::exp(l.at(i) - mx);
  const double lse = mx + std::log(z);
  Tensor out(l.shape());
  for (std::size_t i = 0; i < l.size(); ++i) out.at(i) = l.at(i) - lse;
  const int pl = logits.id();
  return t.emit(std::move(out), {pl}, [pl](GradTape& t, int self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& y = t.value_of(self);
    Tensor& gl = t.grad_slot(pl);
    double gs = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) gs += g.at(i);
    for (std::size_t i = 0; i < g.size(); ++i)
      gl.at(i) += g.at(i) - std::exp(y.at(i)) * gs;
  });
}

Var frobenius_sq(const Var& a) {
  GradTape& t = *a.tape();
  double s = 0.0;
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    const double v = a.value().at(i);
    s += v * v;
  }
  const int pa = a.id();
  return t.emit(Tensor::scalar(s), {pa}, [pa](GradTape& t, int self) {
    const double g = t.grad_slot(self).item();
    axpy(t.grad_slot(pa), t.value_of(pa), 2.0 * g);
  });
}

Var dot_const(const Var& a, const Tensor& c) {
  if (a.value().size() != c.size()) throw DimensionError("dot_const: size mismatch");
  GradTape& t = *a.tape();
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += a.value().at(i) * c.at(i);
  const int pa = a.id();
  return t.emit(Tensor::scalar(s), {pa}, [pa, c](GradTape& t, int self) {
    axpy(t.grad_slot(pa), c, t.grad_slot(self).item());
  });
}

}  // namespace ermoe
