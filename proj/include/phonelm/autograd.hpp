#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "phonelm/errors.hpp"
#include "phonelm/rng.hpp"
#include "phonelm/tensor.hpp"

namespace phonelm {

template <typename T>
class Tape;

// Handle to a node on a tape. Copyable, trivially small.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  uint32_t id = 0;

  const TensorT<T>& value() const { return tape->value(*this); }
  const TensorT<T>& grad() const { return tape->grad(*this); }
  bool requires_grad() const { return tape->needs_grad(id); }
};

// Reverse-mode tape. Ops append nodes; backward() walks them in reverse
// creation order, which is a topological order of the DAG and makes
// gradient accumulation (and therefore float results) fully deterministic.
template <typename T>
class Tape {
 public:
  Var<T> leaf(TensorT<T> value, bool requires_grad = false,
              std::string name = {}) {
    nodes_.push_back(Node{std::move(value), TensorT<T>{}, requires_grad,
                          std::move(name), nullptr});
    return Var<T>{this, static_cast<uint32_t>(nodes_.size() - 1)};
  }
  Var<T> constant(TensorT<T> value) { return leaf(std::move(value), false); }
  Var<T> scalar(T v) { return constant(TensorT<T>::scalar(v)); }

  const TensorT<T>& value(Var<T> v) const { return nodes_[v.id].value; }
  const TensorT<T>& val(uint32_t id) const { return nodes_[id].value; }
  bool needs_grad(uint32_t id) const { return nodes_[id].needs; }
  const std::string& name(uint32_t id) const { return nodes_[id].name; }

  // Gradient buffer of a node; allocated (zeroed) on first access.
  TensorT<T>& grad_buf(uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = TensorT<T>(n.value.shape());
    return n.grad;
  }
  const TensorT<T>& grad(Var<T> v) { return grad_buf(v.id); }
  bool grad_present(uint32_t id) const { return !nodes_[id].grad.empty(); }

  void backward(Var<T> loss) {
    if (value(loss).size() != 1) {
      throw ConfigError("backward target must be a scalar");
    }
    grad_buf(loss.id).fill(T{1});
    for (uint32_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.back && !n.grad.empty()) n.back();
    }
  }

  size_t size() const { return nodes_.size(); }

  // Id the next pushed node will get; ops capture it in their backward
  // closure before pushing.
  uint32_t next_id() const { return static_cast<uint32_t>(nodes_.size()); }

  Var<T> push(TensorT<T> value, bool needs_grad,
              std::function<void()> back) {
    nodes_.push_back(
        Node{std::move(value), TensorT<T>{}, needs_grad,
             std::string{}, needs_grad ? std::move(back) : nullptr});
    return Var<T>{this, static_cast<uint32_t>(nodes_.size() - 1)};
  }

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    bool needs = false;
    std::string name;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------
// Primitive ops. Each returns a new node; backward closures add into the
// parents' gradient buffers.
// ---------------------------------------------------------------------
namespace ag {

template <typename T>
Tape<T>& tape_of(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ConfigError("vars from different tapes");
  return *a.tape;
}

// y = a + b (same shape)
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tp = tape_of(a, b);
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  if (!av.same_shape(bv)) throw ConfigError("add: shape mismatch");
  TensorT<T> out = av;
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, bid = b.id, yid = tp.next_id();
  return tp.push(std::move(out), req, [t, aid, bid, yid] {
    const auto& g = t->grad_buf(yid);
    if (t->needs_grad(aid)) t->grad_buf(aid).add_scaled(g, T{1});
    if (t->needs_grad(bid)) t->grad_buf(bid).add_scaled(g, T{1});
  });
}

// y = a * b elementwise (same shape)
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tp = tape_of(a, b);
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  if (!av.same_shape(bv)) throw ConfigError("mul: shape mismatch");
  TensorT<T> out = av;
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, bid = b.id, yid = tp.next_id();
  return tp.push(std::move(out), req, [t, aid, bid, yid] {
    const auto& g = t->grad_buf(yid);
    const auto& av2 = t->val(aid);
    const auto& bv2 = t->val(bid);
    if (t->needs_grad(aid)) {
      auto& ga = t->grad_buf(aid);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (t->needs_grad(bid)) {
      auto& gb = t->grad_buf(bid);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av2[i];
    }
  });
}

// y = c * a for a compile-time constant scalar c
template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tape<T>& tp = *a.tape;
  TensorT<T> out = tp.val(a.id);
  for (size_t i = 0; i < out.size(); ++i) out[i] *= c;
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(aid), [t, aid, yid, c] {
    if (t->needs_grad(aid)) t->grad_buf(aid).add_scaled(t->grad_buf(yid), c);
  });
}

// y[n,d] = a[n,d] + b[d] broadcast over rows
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> b) {
  Tape<T>& tp = tape_of(a, b);
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  if (av.rank() != 2 || bv.rank() != 1 || av.dim(1) != bv.dim(0)) {
    throw ConfigError("add_bias: expected [n,d] + [d]");
  }
  const size_t n = av.dim(0), d = av.dim(1);
  TensorT<T> out = av;
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < d; ++j) out[i * d + j] += bv[j];
  }
  const bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, bid = b.id, yid = tp.next_id();
  return tp.push(std::move(out), req, [t, aid, bid, yid, n, d] {
    const auto& g = t->grad_buf(yid);
    if (t->needs_grad(aid)) t->grad_buf(aid).add_scaled(g, T{1});
    if (t->needs_grad(bid)) {
      auto& gb = t->grad_buf(bid);
      for (size_t i = 0; i < n; ++i) {
        for (size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
    }
  });
}

// y[n,m] = a[n,k] * b[k,m]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tp = tape_of(a, b);
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ConfigError("matmul: incompatible shapes");
  }
  const size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  TensorT<T> out({n, m});
  kern::mm_nn_acc(av.data(), bv.data(), out.data(), n, k, m);
  const bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, bid = b.id, yid = tp.next_id();
  return tp.push(std::move(out), req, [t, aid, bid, yid, n, k, m] {
    const auto& g = t->grad_buf(yid);
    if (t->needs_grad(aid)) {
      // da[n,k] += g[n,m] * b[k,m]^T
      kern::mm_nt_acc(g.data(), t->val(bid).data(),
                      t->grad_buf(aid).data(), n, m, k);
    }
    if (t->needs_grad(bid)) {
      // db[k,m] += a[n,k]^T * g[n,m]
      kern::mm_tn_acc(t->val(aid).data(), g.data(),
                      t->grad_buf(bid).data(), n, k, m);
    }
  });
}

// y[n,m] = a[n,k] * b[m,k]^T
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& tp = tape_of(a, b);
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw ConfigError("matmul_nt: incompatible shapes");
  }
  const size_t n = av.dim(0), k = av.dim(1), m = bv.dim(0);
  TensorT<T> out({n, m});
  kern::mm_nt_acc(av.data(), bv.data(), out.data(), n, k, m);
  const bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, bid = b.id, yid = tp.next_id();
  return tp.push(std::move(out), req, [t, aid, bid, yid, n, k, m] {
    const auto& g = t->grad_buf(yid);
    if (t->needs_grad(aid)) {
      // da[n,k] += g[n,m] * b[m,k]
      kern::mm_nn_acc(g.data(), t->val(bid).data(),
                      t->grad_buf(aid).data(), n, m, k);
    }
    if (t->needs_grad(bid)) {
      // db[m,k] += g[n,m]^T * a[n,k]
      kern::mm_tn_acc(g.data(), t->val(aid).data(),
                      t->grad_buf(bid).data(), n, m, k);
    }
  });
}

// [s, h*dh] -> [h, s, dh]
template <typename T>
Var<T> split_heads(Var<T> x, size_t heads) {
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  if (xv.rank() != 2 || xv.dim(1) % heads != 0) {
    throw ConfigError("split_heads: hidden not divisible by heads");
  }
  const size_t s = xv.dim(0), d = xv.dim(1), dh = d / heads;
  TensorT<T> out({heads, s, dh});
  for (size_t h = 0; h < heads; ++h) {
    for (size_t i = 0; i < s; ++i) {
      for (size_t j = 0; j < dh; ++j) {
        out[(h * s + i) * dh + j] = xv[i * d + h * dh + j];
      }
    }
  }
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(x.id),
                 [t, xid, yid, heads, s, d, dh] {
                   if (!t->needs_grad(xid)) return;
                   const auto& g = t->grad_buf(yid);
                   auto& gx = t->grad_buf(xid);
                   for (size_t h = 0; h < heads; ++h) {
                     for (size_t i = 0; i < s; ++i) {
                       for (size_t j = 0; j < dh; ++j) {
                         gx[i * d + h * dh + j] += g[(h * s + i) * dh + j];
                       }
                     }
                   }
                 });
}

// [h, s, dh] -> [s, h*dh]
template <typename T>
Var<T> merge_heads(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  if (xv.rank() != 3) throw ConfigError("merge_heads: expected rank 3");
  const size_t heads = xv.dim(0), s = xv.dim(1), dh = xv.dim(2);
  const size_t d = heads * dh;
  TensorT<T> out({s, d});
  for (size_t h = 0; h < heads; ++h) {
    for (size_t i = 0; i < s; ++i) {
      for (size_t j = 0; j < dh; ++j) {
        out[i * d + h * dh + j] = xv[(h * s + i) * dh + j];
      }
    }
  }
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(x.id),
                 [t, xid, yid, heads, s, d, dh] {
                   if (!t->needs_grad(xid)) return;
                   const auto& g = t->grad_buf(yid);
                   auto& gx = t->grad_buf(xid);
                   for (size_t h = 0; h < heads; ++h) {
                     for (size_t i = 0; i < s; ++i) {
                       for (size_t j = 0; j < dh; ++j) {
                         gx[(h * s + i) * dh + j] += g[i * d + h * dh + j];
                       }
                     }
                   }
                 });
}

// y[h,s,m] = a[h,s,k] * b[h,k,m]
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b) {
  Tape<T>& tp = tape_of(a, b);
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != bv.dim(1)) {
    throw ConfigError("bmm: incompatible shapes");
  }
  const size_t hh = av.dim(0), s = av.dim(1), k = av.dim(2), m = bv.dim(2);
  TensorT<T> out({hh, s, m});
  for (size_t h = 0; h < hh; ++h) {
    kern::mm_nn_acc(av.data() + h * s * k, bv.data() + h * k * m,
                    out.data() + h * s * m, s, k, m);
  }
  const bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, bid = b.id, yid = tp.next_id();
  return tp.push(std::move(out), req, [t, aid, bid, yid, hh, s, k, m] {
    const auto& g = t->grad_buf(yid);
    for (size_t h = 0; h < hh; ++h) {
      if (t->needs_grad(aid)) {
        kern::mm_nt_acc(g.data() + h * s * m, t->val(bid).data() + h * k * m,
                        t->grad_buf(aid).data() + h * s * k, s, m, k);
      }
      if (t->needs_grad(bid)) {
        kern::mm_tn_acc(t->val(aid).data() + h * s * k, g.data() + h * s * m,
                        t->grad_buf(bid).data() + h * k * m, s, k, m);
      }
    }
  });
}

// y[h,s,m] = a[h,s,k] * b[h,m,k]^T
template <typename T>
Var<T> bmm_nt(Var<T> a, Var<T> b) {
  Tape<T>& tp = tape_of(a, b);
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0) ||
      av.dim(2) != bv.dim(2)) {
    throw ConfigError("bmm_nt: incompatible shapes");
  }
  const size_t hh = av.dim(0), s = av.dim(1), k = av.dim(2), m = bv.dim(1);
  TensorT<T> out({hh, s, m});
  for (size_t h = 0; h < hh; ++h) {
    kern::mm_nt_acc(av.data() + h * s * k, bv.data() + h * m * k,
                    out.data() + h * s * m, s, k, m);
  }
  const bool req = tp.needs_grad(a.id) || tp.needs_grad(b.id);
  Tape<T>* t = &tp;
  const uint32_t aid = a.id, bid = b.id, yid = tp.next_id();
  return tp.push(std::move(out), req, [t, aid, bid, yid, hh, s, k, m] {
    const auto& g = t->grad_buf(yid);
    for (size_t h = 0; h < hh; ++h) {
      if (t->needs_grad(aid)) {
        kern::mm_nn_acc(g.data() + h * s * m, t->val(bid).data() + h * m * k,
                        t->grad_buf(aid).data() + h * s * k, s, m, k);
      }
      if (t->needs_grad(bid)) {
        kern::mm_tn_acc(g.data() + h * s * m, t->val(aid).data() + h * s * k,
                        t->grad_buf(bid).data() + h * m * k, s, m, k);
      }
    }
  });
}

// Row-stabilized softmax over the last axis.
template <typename T>
Var<T> softmax_lastdim(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  if (xv.rank() == 0 || xv.dim(xv.rank() - 1) == 0) {
    throw ConfigError("softmax: empty last axis");
  }
  const size_t m = xv.dim(xv.rank() - 1);
  const size_t rows = xv.size() / m;
  TensorT<T> out(xv.shape());
  for (size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * m;
    T* o = out.data() + r * m;
    T mx = in[0];
    for (size_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
    T sum{};
    for (size_t j = 0; j < m; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const T inv = T{1} / sum;
    for (size_t j = 0; j < m; ++j) o[j] *= inv;
  }
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(x.id), [t, xid, yid, m] {
    if (!t->needs_grad(xid)) return;
    const auto& g = t->grad_buf(yid);
    const auto& y = t->val(yid);
    auto& gx = t->grad_buf(xid);
    const size_t rows = y.size() / m;
    for (size_t r = 0; r < rows; ++r) {
      const T* yr = y.data() + r * m;
      const T* gr = g.data() + r * m;
      T* gxr = gx.data() + r * m;
      T dot{};
      for (size_t j = 0; j < m; ++j) dot += gr[j] * yr[j];
      for (size_t j = 0; j < m; ++j) gxr[j] += yr[j] * (gr[j] - dot);
    }
  });
}

// Layer normalization over the last axis with learned gain/shift.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  const auto& gv = tp.val(gamma.id);
  const auto& bv = tp.val(beta.id);
  if (xv.rank() == 0 || xv.dim(xv.rank() - 1) == 0) {
    throw ConfigError("layer_norm: empty last axis");
  }
  const size_t d = xv.dim(xv.rank() - 1);
  if (gv.size() != d || bv.size() != d) {
    throw ConfigError("layer_norm: gamma/beta size mismatch");
  }
  const size_t rows = xv.size() / d;
  TensorT<T> out(xv.shape());
  TensorT<T> xhat(xv.shape());
  std::vector<T> inv_std(rows);
  for (size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean{};
    for (size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var{};
    for (size_t j = 0; j < d; ++j) {
      const T c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (size_t j = 0; j < d; ++j) {
      const T xh = (in[j] - mean) * is;
      xhat[r * d + j] = xh;
      out[r * d + j] = gv[j] * xh + bv[j];
    }
  }
  const bool req = tp.needs_grad(x.id) || tp.needs_grad(gamma.id) ||
                   tp.needs_grad(beta.id);
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, gid = gamma.id, bid = beta.id,
                 yid = tp.next_id();
  return tp.push(
      std::move(out), req,
      [t, xid, gid, bid, yid, d, xh = std::move(xhat),
       is = std::move(inv_std)] {
        const auto& g = t->grad_buf(yid);
        const auto& gv2 = t->val(gid);
        const size_t rows = g.size() / d;
        if (t->needs_grad(gid)) {
          auto& gg = t->grad_buf(gid);
          for (size_t r = 0; r < rows; ++r) {
            for (size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * xh[r * d + j];
            }
          }
        }
        if (t->needs_grad(bid)) {
          auto& gb = t->grad_buf(bid);
          for (size_t r = 0; r < rows; ++r) {
            for (size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
          }
        }
        if (t->needs_grad(xid)) {
          auto& gx = t->grad_buf(xid);
          std::vector<T> h(d);
          for (size_t r = 0; r < rows; ++r) {
            T mean_h{}, mean_hx{};
            for (size_t j = 0; j < d; ++j) {
              h[j] = g[r * d + j] * gv2[j];
              mean_h += h[j];
              mean_hx += h[j] * xh[r * d + j];
            }
            mean_h /= static_cast<T>(d);
            mean_hx /= static_cast<T>(d);
            for (size_t j = 0; j < d; ++j) {
              gx[r * d + j] +=
                  is[r] * (h[j] - mean_h - xh[r * d + j] * mean_hx);
            }
          }
        }
      });
}

// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  TensorT<T> out(xv.shape());
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < xv.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(x.id), [t, xid, yid] {
    if (!t->needs_grad(xid)) return;
    const auto& g = t->grad_buf(yid);
    const auto& xv2 = t->val(xid);
    auto& gx = t->grad_buf(xid);
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (size_t i = 0; i < gx.size(); ++i) {
      const double v = static_cast<double>(xv2[i]);
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * static_cast<T>(cdf + v * pdf);
    }
  });
}

// Row gather from an embedding table: y[i,:] = table[ids[i],:]
template <typename T>
Var<T> embedding(Var<T> table, const std::vector<int32_t>& ids) {
  Tape<T>& tp = *table.tape;
  const auto& tv = tp.val(table.id);
  if (tv.rank() != 2) throw ConfigError("embedding: table must be rank 2");
  const size_t v = tv.dim(0), d = tv.dim(1);
  for (int32_t id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= v) {
      throw ConfigError("embedding: id out of range: " + std::to_string(id));
    }
  }
  TensorT<T> out({ids.size(), d});
  for (size_t i = 0; i < ids.size(); ++i) {
    const T* src = tv.data() + static_cast<size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  Tape<T>* t = &tp;
  const uint32_t tid = table.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(table.id),
                 [t, tid, yid, ids, d] {
                   if (!t->needs_grad(tid)) return;
                   const auto& g = t->grad_buf(yid);
                   auto& gt = t->grad_buf(tid);
                   for (size_t i = 0; i < ids.size(); ++i) {
                     T* dst = gt.data() + static_cast<size_t>(ids[i]) * d;
                     const T* src = g.data() + i * d;
                     for (size_t j = 0; j < d; ++j) dst[j] += src[j];
                   }
                 });
}

// y[k,:] = x[idx[k],:]
template <typename T>
Var<T> gather_rows(Var<T> x, const std::vector<size_t>& idx) {
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  if (xv.rank() != 2) throw ConfigError("gather_rows: expected rank 2");
  const size_t n = xv.dim(0), d = xv.dim(1);
  for (size_t i : idx) {
    if (i >= n) throw ConfigError("gather_rows: index out of range");
  }
  TensorT<T> out({idx.size(), d});
  for (size_t k = 0; k < idx.size(); ++k) {
    const T* src = xv.data() + idx[k] * d;
    std::copy(src, src + d, out.data() + k * d);
  }
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(x.id), [t, xid, yid, idx, d] {
    if (!t->needs_grad(xid)) return;
    const auto& g = t->grad_buf(yid);
    auto& gx = t->grad_buf(xid);
    for (size_t k = 0; k < idx.size(); ++k) {
      T* dst = gx.data() + idx[k] * d;
      const T* src = g.data() + k * d;
      for (size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

// scores[h,i,j] += bias[j]; bias is a constant (attention key mask).
template <typename T>
Var<T> add_key_bias(Var<T> scores, std::vector<T> bias) {
  Tape<T>& tp = *scores.tape;
  const auto& sv = tp.val(scores.id);
  if (sv.rank() != 3 || sv.dim(2) != bias.size()) {
    throw ConfigError("add_key_bias: bias length mismatch");
  }
  const size_t hs = sv.dim(0) * sv.dim(1), m = sv.dim(2);
  TensorT<T> out = sv;
  for (size_t r = 0; r < hs; ++r) {
    for (size_t j = 0; j < m; ++j) out[r * m + j] += bias[j];
  }
  Tape<T>* t = &tp;
  const uint32_t xid = scores.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(scores.id), [t, xid, yid] {
    if (!t->needs_grad(xid)) return;
    t->grad_buf(xid).add_scaled(t->grad_buf(yid), T{1});
  });
}

// Inverted dropout; the mask is drawn once at graph build time.
template <typename T>
Var<T> dropout(Var<T> x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout: rate must be < 1");
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  std::vector<T> mask(xv.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& mv : mask) {
    mv = rng.next_double() >= rate ? keep_scale : T{};
  }
  TensorT<T> out(xv.shape());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, yid = tp.next_id();
  return tp.push(std::move(out), tp.needs_grad(x.id),
                 [t, xid, yid, mk = std::move(mask)] {
                   if (!t->needs_grad(xid)) return;
                   const auto& g = t->grad_buf(yid);
                   auto& gx = t->grad_buf(xid);
                   for (size_t i = 0; i < gx.size(); ++i) {
                     gx[i] += g[i] * mk[i];
                   }
                 });
}

// Sum of all entries -> scalar.
template <typename T>
Var<T> sum_all(Var<T> x) {
  Tape<T>& tp = *x.tape;
  const auto& xv = tp.val(x.id);
  T s{};
  for (size_t i = 0; i < xv.size(); ++i) s += xv[i];
  Tape<T>* t = &tp;
  const uint32_t xid = x.id, yid = tp.next_id();
  return tp.push(TensorT<T>::scalar(s), tp.needs_grad(x.id), [t, xid, yid] {
    if (!t->needs_grad(xid)) return;
    const T g = t->grad_buf(yid)[0];
    auto& gx = t->grad_buf(xid);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

// Summed token-level cross entropy: sum over rows of
// logsumexp(z) - z[target]. Row-max stabilization keeps it finite for
// logits up to ~1e4.
template <typename T>
Var<T> cross_entropy_sum(Var<T> logits, const std::vector<int32_t>& targets) {
  Tape<T>& tp = *logits.tape;
  const auto& zv = tp.val(logits.id);
  if (zv.rank() != 2 || zv.dim(0) != targets.size()) {
    throw ConfigError("cross_entropy: logits/targets mismatch");
  }
  const size_t n = zv.dim(0), v = zv.dim(1);
  for (int32_t tgt : targets) {
    if (tgt < 0 || static_cast<size_t>(tgt) >= v) {
      throw ConfigError("cross_entropy: target out of range: " +
                        std::to_string(tgt));
    }
  }
  T loss{};
  for (size_t i = 0; i < n; ++i) {
    const T* z = zv.data() + i * v;
    T mx = z[0];
    for (size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
    T sum{};
    for (size_t j = 0; j < v; ++j) sum += std::exp(z[j] - mx);
    loss += std::log(sum) - (z[static_cast<size_t>(targets[i])] - mx);
  }
  Tape<T>* t = &tp;
  const uint32_t zid = logits.id, yid = tp.next_id();
  return tp.push(TensorT<T>::scalar(loss), tp.needs_grad(logits.id),
                 [t, zid, yid, targets, v] {
                   if (!t->needs_grad(zid)) return;
                   const T g = t->grad_buf(yid)[0];
                   const auto& zv2 = t->val(zid);
                   auto& gz = t->grad_buf(zid);
                   const size_t n2 = targets.size();
                   for (size_t i = 0; i < n2; ++i) {
                     const T* z = zv2.data() + i * v;
                     T* gr = gz.data() + i * v;
                     T mx = z[0];
                     for (size_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
                     T sum{};
                     for (size_t j = 0; j < v; ++j) {
                       sum += std::exp(z[j] - mx);
                     }
                     const T inv = T{1} / sum;
                     for (size_t j = 0; j < v; ++j) {
                       gr[j] += g * std::exp(z[j] - mx) * inv;
                     }
                     gr[static_cast<size_t>(targets[i])] -= g;
                   }
                 });
}

// Mean token-level cross entropy.
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits,
                          const std::vector<int32_t>& targets) {
  if (targets.empty()) throw ConfigError("cross_entropy_mean: no targets");
  return scale(cross_entropy_sum(logits, targets),
               T{1} / static_cast<T>(targets.size()));
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_bias(matmul(x, w), b);
}

}  // namespace ag

}  // namespace phonelm
