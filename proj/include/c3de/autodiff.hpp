// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "c3de/tensor.hpp"

namespace c3de {

enum class OpKind {
  kInput,
  kParam,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddScalar,
  kMatMul,
  kSigmoid,
  kTanh,
  kSoftmax,
  kAbs,
  kSum,
  kMean,
  kSumAxis,
  kConcat,
  kSlice,
  kReshape,
  kLinComb,
  kHuber,
  kGruField,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kInput: return "input";
    case OpKind::kParam: return "param";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "hadamard";
    case OpKind::kScale: return "scale";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kAbs: return "abs";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
    case OpKind::kLinComb: return "lincomb";
    case OpKind::kHuber: return "huber";
    case OpKind::kGruField: return "gru_field";
  }
  return "?";
}

class Tape;

/// Handle to a node on a Tape. Cheap to copy; invalid once the tape is cleared.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;
  std::uint64_t generation = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

struct TapeNode {
  OpKind op = OpKind::kConstant;
  std::vector<std::size_t> parents;
  Tensor value;
  std::vector<Tensor> saved;
  std::vector<double> scalars;
  std::size_t axis = 0;
  Parameter* param = nullptr;
  bool requires_grad = false;
  Tensor grad;  // empty until something flows in

  const Tensor& val() const { return param ? param->value : value; }
};

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
                    std::size_t n, std::size_t k) {
  // Transposing B first keeps the inner loop a contiguous axpy.
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm_nn(a, bt.data(), c, m, n, k);
}

// Maps every output flat index onto an operand flat index under trailing-axis
// broadcasting. Returns an empty vector when the operand already has the
// output shape.
inline std::vector<std::size_t> broadcast_index(const Shape& operand, const Shape& out) {
  if (operand == out) return {};
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  const std::size_t opn = shape_numel(operand);
  if (opn == 1) return idx;
  // suffix case: operand shape equals the trailing axes of out
  if (operand.size() <= out.size() &&
      std::equal(operand.rbegin(), operand.rend(), out.rbegin())) {
    for (std::size_t i = 0; i < n; ++i) idx[i] = i % opn;
    return idx;
  }
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  {
    std::size_t s = 1;
    for (std::size_t ax = 0; ax < operand.size(); ++ax) {
      const std::size_t oax = operand.size() - 1 - ax;
      const std::size_t tax = r - 1 - ax;
      strides[tax] = operand[oax] == 1 ? 0 : s;
      s *= operand[oax];
    }
  }
  std::vector<std::size_t> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = off;
    for (std::size_t ax = r; ax-- > 0;) {
      ++counter[ax];
      off += strides[ax];
      if (counter[ax] < out[ax]) break;
      off -= strides[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return idx;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                  shape_str(a) + " and " + shape_str(b));
    }
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

inline void check_finite(const Tensor& t, OpKind op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw std::domain_error(std::string("non-finite value produced by op '") +
                              op_name(op) + "'");
    }
  }
}

}  // namespace detail

/// Append-only record of one forward pass. Reverse sweep writes gradients into
/// input leaves (kept across calls) and into Parameter::grad.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor t) { return push(OpKind::kConstant, {}, std::move(t), false); }

  Var input(Tensor t, bool requires_grad = true) {
    return push(OpKind::kInput, {}, std::move(t), requires_grad);
  }

  /// Leaf bound to a Parameter; one node per parameter per tape.
  Var param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return handle(it->second);
    TapeNode node;
    node.op = OpKind::kParam;
    node.param = &p;
    node.requires_grad = !p.frozen;
    nodes_.push_back(std::move(node));
    const std::size_t id = nodes_.size() - 1;
    param_nodes_[&p] = id;
    return handle(id);
  }

  const Tensor& value(const Var& v) const { return node(v).val(); }

  /// Gradient accumulated at a node during the last sweep (zeros if none).
  Tensor grad(const Var& v) const {
    const TapeNode& n = node(v);
    if (n.grad.size() == 0) return Tensor(n.val().shape(), 0.0);
    return n.grad;
  }

  /// Gradient of the last sweep at the leaf for `p`, zeros if unused.
  Tensor param_grad(const Parameter& p) const {
    auto it = param_nodes_.find(const_cast<Parameter*>(&p));
    if (it == param_nodes_.end() || nodes_[it->second].grad.size() == 0) {
      return Tensor(p.value.shape(), 0.0);
    }
    return nodes_[it->second].grad;
  }

  /// Reverse sweep from a scalar root; deposits into Parameter::grad.
  void backward(const Var& root) {
    const TapeNode& r = node(root);
    if (r.val().size() != 1) {
      throw std::invalid_argument("backward: root must be scalar, got shape " +
                                  shape_str(r.val().shape()));
    }
    sweep(root, Tensor(r.val().shape(), 1.0), /*keep_inputs=*/true);
    for (auto& [p, id] : param_nodes_) {
      const TapeNode& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    }
  }

  /// Vector-Jacobian product: seeds `root` with `seed`; results are read back
  /// through grad()/param_grad(). Parameters are not touched.
  void vjp(const Var& root, const Tensor& seed) {
    const TapeNode& r = node(root);
    if (r.val().shape() != seed.shape()) {
      throw std::invalid_argument("vjp: seed shape " + shape_str(seed.shape()) +
                                  " does not match root " + shape_str(r.val().shape()));
    }
    sweep(root, seed, /*keep_inputs=*/false);
  }

  void clear() {
    nodes_.clear();
    param_nodes_.clear();
    ++generation_;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const TapeNode& node_at(std::size_t id) const { return nodes_.at(id); }

  // Records an op; used by the free functions below.
  Var push(OpKind op, std::vector<std::size_t> parents, Tensor value, bool requires_grad,
           std::vector<Tensor> saved = {}, std::vector<double> scalars = {},
           std::size_t axis = 0) {
    if (op != OpKind::kInput && op != OpKind::kConstant) detail::check_finite(value, op);
    TapeNode n;
    n.op = op;
    n.parents = std::move(parents);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) {
      n.saved = std::move(saved);
      n.scalars = std::move(scalars);
    } else {
      n.parents.clear();
    }
    n.axis = axis;
    nodes_.push_back(std::move(n));
    return handle(nodes_.size() - 1);
  }

  const TapeNode& node(const Var& v) const {
    if (v.tape != this || v.generation != generation_ || v.id >= nodes_.size()) {
      throw std::logic_error("tape: variable is detached from this tape");
    }
    return nodes_[v.id];
  }

  bool requires_grad(const Var& v) const { return node(v).requires_grad; }

 private:
  Var handle(std::size_t id) { return Var{this, id, generation_}; }

  void sweep(const Var& root, const Tensor& seed, bool keep_inputs);
  void backprop_node(std::size_t id);

  Tensor& grad_buffer(std::size_t id) {
    TapeNode& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor(n.val().shape(), 0.0);
    return n.grad;
  }

  std::vector<TapeNode> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
  std::uint64_t generation_ = 1;
};

inline const Tensor& Var::value() const {
  if (!tape) throw std::logic_error("var: not attached to a tape");
  return tape->value(*this);
}

inline void Tape::sweep(const Var& root, const Tensor& seed, bool keep_inputs) {
  node(root);  // validates handle
  for (TapeNode& n : nodes_) {
    if (keep_inputs && n.op == OpKind::kInput) continue;
    n.grad = Tensor();
  }
  if (!nodes_[root.id].requires_grad) return;
  Tensor& g = grad_buffer(root.id);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::size_t id = root.id + 1; id-- > 0;) {
    const TapeNode& n = nodes_[id];
    if (!n.requires_grad || n.grad.size() == 0 || n.parents.empty()) continue;
    backprop_node(id);
  }
}

inline void Tape::backprop_node(std::size_t id) {
  // Copy what we need: grad_buffer() may reallocate nothing, but keep refs local.
  const TapeNode& n = nodes_[id];
  const Tensor& g = n.grad;
  const auto& ps = n.parents;
  auto wants = [&](std::size_t k) { return nodes_[ps[k]].requires_grad; };
  auto pval = [&](std::size_t k) -> const Tensor& { return nodes_[ps[k]].val(); };

  switch (n.op) {
    case OpKind::kAdd:
    case OpKind::kSub:
    case OpKind::kMul: {
      const Shape& out = n.value.shape();
      for (std::size_t k = 0; k < 2; ++k) {
        if (!wants(k)) continue;
        const Tensor& self = pval(k);
        const Tensor& other = pval(1 - k);
        const auto idx = detail::broadcast_index(self.shape(), out);
        const auto oidx = detail::broadcast_index(other.shape(), out);
        Tensor& dst = grad_buffer(ps[k]);
        const double sign = (n.op == OpKind::kSub && k == 1) ? -1.0 : 1.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double gi = sign * g[i];
          if (n.op == OpKind::kMul) gi *= other[oidx.empty() ? i : oidx[i]];
          dst[idx.empty() ? i : idx[i]] += gi;
        }
      }
      break;
    }
    case OpKind::kScale: {
      Tensor& dst = grad_buffer(ps[0]);
      const double s = n.scalars[0];
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += s * g[i];
      break;
    }
    case OpKind::kAddScalar:
    case OpKind::kReshape: {
      Tensor& dst = grad_buffer(ps[0]);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      break;
    }
    case OpKind::kMatMul: {
      const Tensor& a = pval(0);
      const Tensor& b = pval(1);
      const std::size_t m = a.dim(0), k = a.dim(1), nn = b.dim(1);
      if (wants(0)) {
        detail::gemm_nt(g.values().data(), b.values().data(),
                        grad_buffer(ps[0]).values().data(), m, nn, k);
      }
      if (wants(1)) {
        detail::gemm_tn(a.values().data(), g.values().data(),
                        grad_buffer(ps[1]).values().data(), m, k, nn);
      }
      break;
    }
    case OpKind::kSigmoid: {
      Tensor& dst = grad_buffer(ps[0]);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case OpKind::kTanh: {
      Tensor& dst = grad_buffer(ps[0]);
      const Tensor& y = n.value;
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case OpKind::kSoftmax: {
      Tensor& dst = grad_buffer(ps[0]);
      const Tensor& y = n.value;
      const std::size_t cols = y.shape().back();
      const std::size_t rows = y.size() / cols;
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          dst[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
        }
      }
      break;
    }
    case OpKind::kAbs: {
      Tensor& dst = grad_buffer(ps[0]);
      const Tensor& x = pval(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        dst[i] += g[i] * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
      }
      break;
    }
    case OpKind::kSum:
    case OpKind::kMean: {
      Tensor& dst = grad_buffer(ps[0]);
      const double s = n.op == OpKind::kMean ? g[0] / static_cast<double>(dst.size()) : g[0];
      for (double& d : dst.values()) d += s;
      break;
    }
    case OpKind::kSumAxis: {
      Tensor& dst = grad_buffer(ps[0]);
      const Shape& in = dst.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t ax = 0; ax < n.axis; ++ax) outer *= in[ax];
      for (std::size_t ax = n.axis + 1; ax < in.size(); ++ax) inner *= in[ax];
      const std::size_t len = in[n.axis];
      const double s = n.scalars.empty() ? 1.0 : n.scalars[0];
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
          for (std::size_t i = 0; i < inner; ++i) {
            dst[(o * len + l) * inner + i] += s * g[o * inner + i];
          }
        }
      }
      break;
    }
    case OpKind::kConcat: {
      const Shape& out = n.value.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t ax = 0; ax < n.axis; ++ax) outer *= out[ax];
      for (std::size_t ax = n.axis + 1; ax < out.size(); ++ax) inner *= out[ax];
      const std::size_t total = out[n.axis];
      std::size_t offset = 0;
      for (std::size_t k = 0; k < ps.size(); ++k) {
        const std::size_t len = pval(k).dim(n.axis);
        if (wants(k)) {
          Tensor& dst = grad_buffer(ps[k]);
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t l = 0; l < len; ++l) {
              for (std::size_t i = 0; i < inner; ++i) {
                dst[(o * len + l) * inner + i] += g[(o * total + offset + l) * inner + i];
              }
            }
          }
        }
        offset += len;
      }
      break;
    }
    case OpKind::kSlice: {
      Tensor& dst = grad_buffer(ps[0]);
      const Shape& in = dst.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t ax = 0; ax < n.axis; ++ax) outer *= in[ax];
      for (std::size_t ax = n.axis + 1; ax < in.size(); ++ax) inner *= in[ax];
      const std::size_t total = in[n.axis];
      const auto begin = static_cast<std::size_t>(n.scalars[0]);
      const std::size_t len = n.value.dim(n.axis);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
          for (std::size_t i = 0; i < inner; ++i) {
            dst[(o * total + begin + l) * inner + i] += g[(o * len + l) * inner + i];
          }
        }
      }
      break;
    }
    case OpKind::kLinComb: {
      for (std::size_t k = 0; k < ps.size(); ++k) {
        if (!wants(k)) continue;
        Tensor& dst = grad_buffer(ps[k]);
        const double c = n.scalars[k];
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += c * g[i];
      }
      break;
    }
    case OpKind::kHuber: {
      Tensor& dst = grad_buffer(ps[0]);
      const Tensor& yhat = pval(0);
      const Tensor& y = n.saved[0];
      const double delta = n.scalars[0];
      const double scale = g[0] / static_cast<double>(y.size());
      for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = yhat[i] - y[i];
        const double d = std::abs(r) <= delta ? r : delta * (r > 0 ? 1.0 : -1.0);
        dst[i] += scale * d;
      }
      break;
    }
    case OpKind::kGruField: {
      // parents: h, xdot, Wr, Wz, Wh, Ur, Uz, Uh, br, bz, bh
      const Tensor& h = pval(0);
      const Tensor& xd = pval(1);
      const Tensor& Wr = pval(2);
      const Tensor& Wz = pval(3);
      const Tensor& Wh = pval(4);
      const Tensor& Ur = pval(5);
      const Tensor& Uz = pval(6);
      const Tensor& Uh = pval(7);
      const Tensor& r = n.saved[0];
      const Tensor& z = n.saved[1];
      const Tensor& ht = n.saved[2];
      const std::size_t rows = h.dim(0), hid = h.dim(1), cin = xd.dim(1);

      Tensor d_h(h.shape(), 0.0), d_az(h.shape(), 0.0), d_ah(h.shape(), 0.0),
          d_ar(h.shape(), 0.0), rh(h.shape(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double omz = 1.0 - z[i];
        d_h[i] = -g[i] * omz;
        d_ah[i] = g[i] * omz * (1.0 - ht[i] * ht[i]);
        d_az[i] = -g[i] * (ht[i] - h[i]) * z[i] * omz;
        rh[i] = r[i] * h[i];
      }
      Tensor d_rh(h.shape(), 0.0);
      detail::gemm_nt(d_ah.values().data(), Uh.values().data(), d_rh.values().data(), rows,
                      hid, hid);
      for (std::size_t i = 0; i < g.size(); ++i) {
        d_h[i] += d_rh[i] * r[i];
        d_ar[i] = d_rh[i] * h[i] * r[i] * (1.0 - r[i]);
      }
      detail::gemm_nt(d_ar.values().data(), Ur.values().data(), d_h.values().data(), rows,
                      hid, hid);
      detail::gemm_nt(d_az.values().data(), Uz.values().data(), d_h.values().data(), rows,
                      hid, hid);
      if (wants(0)) {
        Tensor& dst = grad_buffer(ps[0]);
        for (std::size_t i = 0; i < d_h.size(); ++i) dst[i] += d_h[i];
      }
      if (wants(1)) {
        double* dx = grad_buffer(ps[1]).values().data();
        detail::gemm_nt(d_ar.values().data(), Wr.values().data(), dx, rows, hid, cin);
        detail::gemm_nt(d_az.values().data(), Wz.values().data(), dx, rows, hid, cin);
        detail::gemm_nt(d_ah.values().data(), Wh.values().data(), dx, rows, hid, cin);
      }
      const Tensor* pre[3] = {&d_ar, &d_az, &d_ah};
      for (std::size_t k = 0; k < 3; ++k) {
        if (wants(2 + k)) {
          detail::gemm_tn(xd.values().data(), pre[k]->values().data(),
                          grad_buffer(ps[2 + k]).values().data(), rows, cin, hid);
        }
        if (wants(5 + k)) {
          const Tensor& lhs = k == 2 ? rh : h;
          detail::gemm_tn(lhs.values().data(), pre[k]->values().data(),
                          grad_buffer(ps[5 + k]).values().data(), rows, hid, hid);
        }
        if (wants(8 + k)) {
          Tensor& db = grad_buffer(ps[8 + k]);
          for (std::size_t row = 0; row < rows; ++row) {
            for (std::size_t j = 0; j < hid; ++j) db[j] += (*pre[k])[row * hid + j];
          }
        }
      }
      break;
    }
    case OpKind::kInput:
    case OpKind::kParam:
    case OpKind::kConstant:
      break;
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape || !a.tape) {
    throw std::logic_error("autodiff: operands live on different tapes");
  }
  return *a.tape;
}

inline Var binary(OpKind op, const Var& a, const Var& b) {
  Tape& t = same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const char* name = op_name(op);
  Shape out_shape = broadcast_shape(av.shape(), bv.shape(), name);
  Tensor out(out_shape, 0.0);
  const auto ia = broadcast_index(av.shape(), out_shape);
  const auto ib = broadcast_index(bv.shape(), out_shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[ia.empty() ? i : ia[i]];
    const double y = bv[ib.empty() ? i : ib[i]];
    out[i] = op == OpKind::kAdd ? x + y : (op == OpKind::kSub ? x - y : x * y);
  }
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(op, {a.id, b.id}, std::move(out), rg);
}

inline Var unary(OpKind op, const Var& a, Tensor out, std::vector<double> scalars = {}) {
  Tape& t = *a.tape;
  return t.push(op, {a.id}, std::move(out), t.requires_grad(a), {}, std::move(scalars));
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) { return detail::binary(OpKind::kAdd, a, b); }
inline Var sub(const Var& a, const Var& b) { return detail::binary(OpKind::kSub, a, b); }
inline Var hadamard(const Var& a, const Var& b) { return detail::binary(OpKind::kMul, a, b); }

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return detail::unary(OpKind::kScale, a, std::move(out), {s});
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return detail::unary(OpKind::kAddScalar, a, std::move(out), {s});
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return hadamard(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

inline Var matmul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape()) +
                                " and " + shape_str(bv.shape()));
  }
  Tensor out(Shape{av.dim(0), bv.dim(1)}, 0.0);
  detail::gemm_nn(av.values().data(), bv.values().data(), out.values().data(), av.dim(0),
                  av.dim(1), bv.dim(1));
  const bool rg = t.requires_grad(a) || t.requires_grad(b);
  return t.push(OpKind::kMatMul, {a.id, b.id}, std::move(out), rg);
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = detail::sigmoid(v);
  return detail::unary(OpKind::kSigmoid, a, std::move(out));
}

inline Var tanh(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::tanh(v);
  return detail::unary(OpKind::kTanh, a, std::move(out));
}

inline Var abs(const Var& a) {
  Tensor out = a.value();
  for (double& v : out.values()) v = std::abs(v);
  return detail::unary(OpKind::kAbs, a, std::move(out));
}

/// Softmax over the last axis.
inline void softmax_rows(std::span<const double> in, std::span<double> out, std::size_t cols) {
  const std::size_t rows = in.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      s += y[c];
    }
    for (std::size_t c = 0; c < cols; ++c) y[c] /= s;
  }
}

inline Var softmax(const Var& a) {
  Tensor out = a.value();
  softmax_rows(a.value().values(), out.values(), out.shape().back());
  return detail::unary(OpKind::kSoftmax, a, std::move(out));
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return detail::unary(OpKind::kSum, a, Tensor::scalar(s));
}

inline Var mean(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return detail::unary(OpKind::kMean, a, Tensor::scalar(s / static_cast<double>(a.size())));
}

/// Sums out one axis (rank drops by one; rank-1 input gives shape [1]).
inline Var sum_axis(const Var& a, std::size_t axis, double scale_by = 1.0) {
  const Shape& in = a.shape();
  if (axis >= in.size()) {
    throw std::invalid_argument("sum_axis: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= in[ax];
  for (std::size_t ax = axis + 1; ax < in.size(); ++ax) inner *= in[ax];
  Shape out_shape;
  for (std::size_t ax = 0; ax < in.size(); ++ax) {
    if (ax != axis) out_shape.push_back(in[ax]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape, 0.0);
  const Tensor& x = a.value();
  const std::size_t len = in[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + l) * inner + i];
    }
  }
  if (scale_by != 1.0) {
    for (double& v : out.values()) v *= scale_by;
  }
  Tape& t = *a.tape;
  return t.push(OpKind::kSumAxis, {a.id}, std::move(out), t.requires_grad(a), {}, {scale_by},
                axis);
}

inline Var mean_axis(const Var& a, std::size_t axis) {
  return sum_axis(a, axis, 1.0 / static_cast<double>(a.shape().at(axis)));
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  Tape& t = *parts.front().tape;
  Shape out_shape = parts.front().shape();
  if (axis >= out_shape.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t total = 0;
  bool rg = false;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p);
    Shape s = p.shape();
    Shape s0 = out_shape;
    if (s.size() != s0.size()) {
      throw std::invalid_argument("concat: rank mismatch " + shape_str(s0) + " vs " +
                                  shape_str(s));
    }
    s[axis] = s0[axis] = 0;
    if (s != s0) {
      throw std::invalid_argument("concat: shape mismatch " + shape_str(out_shape) + " vs " +
                                  shape_str(p.shape()));
    }
    total += p.shape()[axis];
    rg = rg || t.requires_grad(p);
    ids.push_back(p.id);
  }
  out_shape[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= out_shape[ax];
  for (std::size_t ax = axis + 1; ax < out_shape.size(); ++ax) inner *= out_shape[ax];
  Tensor out(out_shape, 0.0);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    const std::size_t len = x.dim(axis);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t l = 0; l < len; ++l) {
        for (std::size_t i = 0; i < inner; ++i) {
          out[(o * total + offset + l) * inner + i] = x[(o * len + l) * inner + i];
        }
      }
    }
    offset += len;
  }
  return t.push(OpKind::kConcat, std::move(ids), std::move(out), rg, {}, {}, axis);
}

inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in = a.shape();
  if (axis >= in.size() || begin >= end || end > in[axis]) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + "," +
                                std::to_string(end) + ") invalid on axis " +
                                std::to_string(axis) + " of " + shape_str(in));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t ax = 0; ax < axis; ++ax) outer *= in[ax];
  for (std::size_t ax = axis + 1; ax < in.size(); ++ax) inner *= in[ax];
  Shape out_shape = in;
  const std::size_t len = end - begin;
  out_shape[axis] = len;
  Tensor out(out_shape, 0.0);
  const Tensor& x = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      for (std::size_t i = 0; i < inner; ++i) {
        out[(o * len + l) * inner + i] = x[(o * in[axis] + begin + l) * inner + i];
      }
    }
  }
  Tape& t = *a.tape;
  return t.push(OpKind::kSlice, {a.id}, std::move(out), t.requires_grad(a), {},
                {static_cast<double>(begin)}, axis);
}

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::unary(OpKind::kReshape, a, std::move(out));
}

/// sum_k coeffs[k] * terms[k]; all terms share one shape.
inline Var lincomb(const std::vector<Var>& terms, const std::vector<double>& coeffs) {
  if (terms.empty() || terms.size() != coeffs.size()) {
    throw std::invalid_argument("lincomb: need one coefficient per term");
  }
  Tape& t = *terms.front().tape;
  Tensor out(terms.front().shape(), 0.0);
  bool rg = false;
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    detail::same_tape(terms.front(), terms[k]);
    const Tensor& x = terms[k].value();
    if (x.shape() != out.shape()) {
      throw std::invalid_argument("lincomb: shape mismatch " + shape_str(out.shape()) +
                                  " vs " + shape_str(x.shape()));
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += coeffs[k] * x[i];
    rg = rg || t.requires_grad(terms[k]);
    ids.push_back(terms[k].id);
  }
  return t.push(OpKind::kLinComb, std::move(ids), std::move(out), rg, {}, coeffs);
}

/// Mean Huber loss of prediction `yhat` against constant target `y`.
inline Var huber_loss(const Var& yhat, const Tensor& y, double delta) {
  if (!(delta > 0)) throw std::invalid_argument("huber: delta must be positive");
  if (yhat.shape() != y.shape()) {
    throw std::invalid_argument("huber: shape mismatch " + shape_str(y.shape()) + " vs " +
                                shape_str(yhat.shape()));
  }
  const Tensor& p = yhat.value();
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = std::abs(y[i] - p[i]);
    s += r <= delta ? 0.5 * r * r : delta * r - 0.5 * delta * delta;
  }
  Tape& t = *yhat.tape;
  return t.push(OpKind::kHuber, {yhat.id}, Tensor::scalar(s / static_cast<double>(y.size())),
                t.requires_grad(yhat), {y}, {delta});
}

/// Fused continuous-time GRU field on row-major batches:
///   z = sigmoid(xdot Wz + h Uz + bz), r = sigmoid(xdot Wr + h Ur + br)
///   htilde = tanh(xdot Wh + (r*h) Uh + bh),  out = (1 - z) * (htilde - h)
/// `w` holds Wr, Wz, Wh, Ur, Uz, Uh, br, bz, bh in that order.
inline Var gru_field_op(const Var& h, const Var& xdot, const std::vector<Var>& w) {
  if (w.size() != 9) throw std::invalid_argument("gru_field: expects 9 parameter tensors");
  const Tensor& hv = h.value();
  const Tensor& xv = xdot.value();
  if (hv.rank() != 2 || xv.rank() != 2 || hv.dim(0) != xv.dim(0)) {
    throw std::invalid_argument("gru_field: hidden " + shape_str(hv.shape()) +
                                " and control " + shape_str(xv.shape()) + " disagree");
  }
  const std::size_t rows = hv.dim(0), hid = hv.dim(1), cin = xv.dim(1);
  for (std::size_t k = 0; k < 3; ++k) {
    if (w[k].shape() != Shape{cin, hid}) {
      throw std::invalid_argument("gru_field: input weight shape " + shape_str(w[k].shape()) +
                                  " expected " + shape_str({cin, hid}));
    }
    if (w[3 + k].shape() != Shape{hid, hid}) {
      throw std::invalid_argument("gru_field: hidden weight shape " +
                                  shape_str(w[3 + k].shape()) + " expected " +
                                  shape_str({hid, hid}));
    }
    if (w[6 + k].shape() != Shape{hid}) {
      throw std::invalid_argument("gru_field: bias shape " + shape_str(w[6 + k].shape()) +
                                  " expected " + shape_str({hid}));
    }
  }
  Tensor ar(hv.shape(), 0.0), az(hv.shape(), 0.0), ah(hv.shape(), 0.0);
  const double* xp = xv.values().data();
  const double* hp = hv.values().data();
  detail::gemm_nn(xp, w[0].value().values().data(), ar.values().data(), rows, cin, hid);
  detail::gemm_nn(hp, w[3].value().values().data(), ar.values().data(), rows, hid, hid);
  detail::gemm_nn(xp, w[1].value().values().data(), az.values().data(), rows, cin, hid);
  detail::gemm_nn(hp, w[4].value().values().data(), az.values().data(), rows, hid, hid);
  Tensor r(hv.shape(), 0.0), z(hv.shape(), 0.0), rh(hv.shape(), 0.0);
  const Tensor& br = w[6].value();
  const Tensor& bz = w[7].value();
  const Tensor& bh = w[8].value();
  for (std::size_t row = 0; row < rows; ++row) {
    for (std::size_t j = 0; j < hid; ++j) {
      const std::size_t i = row * hid + j;
      r[i] = detail::sigmoid(ar[i] + br[j]);
      z[i] = detail::sigmoid(az[i] + bz[j]);
      rh[i] = r[i] * hv[i];
    }
  }
  detail::gemm_nn(xp, w[2].value().values().data(), ah.values().data(), rows, cin, hid);
  detail::gemm_nn(rh.values().data(), w[5].value().values().data(), ah.values().data(), rows,
                  hid, hid);
  Tensor out(hv.shape(), 0.0);
  for (std::size_t row = 0; row < rows; ++row) {
    for (std::size_t j = 0; j < hid; ++j) {
      const std::size_t i = row * hid + j;
      ah[i] = std::tanh(ah[i] + bh[j]);
      out[i] = (1.0 - z[i]) * (ah[i] - hv[i]);
    }
  }
  Tape& t = *h.tape;
  bool rg = t.requires_grad(h) || t.requires_grad(xdot);
  std::vector<std::size_t> ids{h.id, xdot.id};
  for (const Var& v : w) {
    detail::same_tape(h, v);
    rg = rg || t.requires_grad(v);
    ids.push_back(v.id);
  }
  return t.push(OpKind::kGruField, std::move(ids), std::move(out), rg,
                {std::move(r), std::move(z), std::move(ah)});
}

}  // namespace c3de
