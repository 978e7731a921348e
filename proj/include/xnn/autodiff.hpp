#pragma once

#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xnn/axis_perm.hpp"
#include "xnn/common.hpp"
#include "xnn/ops.hpp"
#include "xnn/rng.hpp"
#include "xnn/tensor.hpp"

namespace xnn {

// ---------------------------------------------------------------------------
// Named parameter collection with deterministic (insertion) iteration order.
// ---------------------------------------------------------------------------

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value) {
    require(index_.find(name) == index_.end(), "ParamStore: duplicate parameter ", name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(value));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.find(name) != index_.end(); }

  Tensor& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "ParamStore: no parameter named ", name);
    return items_[it->second].second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "ParamStore: no parameter named ", name);
    return items_[it->second].second;
  }

  std::size_t size() const { return items_.size(); }
  const std::pair<std::string, Tensor>& item(std::size_t i) const { return items_[i]; }
  std::pair<std::string, Tensor>& item(std::size_t i) { return items_[i]; }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  /// Same names and shapes, all values zero.
  ParamStore zeros_like() const {
    ParamStore z;
    for (const auto& [name, t] : items_) z.add(name, Tensor(t.shape(), t.spatial_rank()));
    return z;
  }

  // XNNP checkpoint: magic "XNNP", then per parameter a u32 UTF-8 name length,
  // the name bytes, and an embedded XNNT record; records run to end of file.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    require(bool(os), "ParamStore::save: cannot open ", path);
    io::write_magic(os, "XNNP");
    for (const auto& [name, t] : items_) {
      io::write_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_xnnt(os, t);
    }
    require(bool(os), "ParamStore::save: write failed for ", path);
  }

  static ParamStore load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(bool(is), "ParamStore::load: cannot open ", path);
    io::check_magic(is, "XNNP", "XNNP");
    ParamStore ps;
    while (is.peek() != std::char_traits<char>::eof()) {
      const std::uint32_t len = io::read_u32(is);
      std::string name(len, '\0');
      is.read(name.data(), len);
      require(bool(is), "XNNP: truncated name");
      ps.add(name, read_xnnt(is));
    }
    return ps;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape.  Nodes are recorded in evaluation order; backward visits
// them in reverse insertion order, which makes gradients bit-reproducible.
// ---------------------------------------------------------------------------

class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;
  const Tensor& value() const;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Var leaf(Tensor value, const char* label = "leaf") {
    return push(std::move(value), nullptr, label);
  }

  Var record(Tensor value, BackwardFn fn, const char* label) {
    require(all_finite(value), "tape: non-finite value produced by '", label, "' at node ",
            nodes_.size());
    return push(std::move(value), std::move(fn), label);
  }

  const Tensor& value(int idx) const { return nodes_[static_cast<std::size_t>(idx)].value; }

  bool has_grad(int idx) const { return nodes_[static_cast<std::size_t>(idx)].grad.has_value(); }

  const Tensor& grad(int idx) const {
    require(has_grad(idx), "tape: node ", idx, " has no gradient");
    return *nodes_[static_cast<std::size_t>(idx)].grad;
  }

  /// Gradient of a node, or zeros when backward never reached it.
  Tensor grad_or_zero(int idx) const {
    const auto& n = nodes_[static_cast<std::size_t>(idx)];
    if (!n.grad) return Tensor(n.value.shape(), n.value.spatial_rank());
    return *n.grad;
  }

  void accumulate(int idx, const Tensor& g) {
    auto& n = nodes_[static_cast<std::size_t>(idx)];
    if (!n.grad) {
      n.grad = g;
    } else {
      require(n.grad->same_shape(g), "tape: gradient shape mismatch at node ", idx);
      for (std::size_t i = 0; i < g.numel(); ++i) (*n.grad)[i] += g[i];
    }
  }

  void zero_grads() {
    for (auto& n : nodes_) n.grad.reset();
  }

  void backward(const Var& root) {
    require(root.tape == this, "backward: var belongs to another tape");
    require(value(root.idx).numel() == 1, "backward: root must be a scalar, has ",
            value(root.idx).numel(), " elements");
    const auto& rv = value(root.idx);
    accumulate(root.idx, Tensor(rv.shape(), rv.spatial_rank(), std::vector<double>(1, 1.0)));
    for (int i = root.idx; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  const char* label(int idx) const { return nodes_[static_cast<std::size_t>(idx)].label; }

 private:
  struct Node {
    Tensor value;
    std::optional<Tensor> grad;
    BackwardFn backward;
    const char* label;
  };

  Var push(Tensor value, BackwardFn fn, const char* label) {
    nodes_.push_back(Node{std::move(value), std::nullopt, std::move(fn), label});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(idx); }

// ---------------------------------------------------------------------------
// Recorded counterparts of the tensor kernels.  Same names as the pure ops;
// overload resolution picks the tape path when arguments are Vars.
// ---------------------------------------------------------------------------

inline Var permute(const Var& x, const AxisPerm& p) {
  Tensor y = permute(x.value(), p);
  const int xi = x.idx;
  const AxisPerm pinv = p.inverse();
  return x.tape->record(std::move(y),
                        [xi, pinv](Tape& t, int self) {
                          t.accumulate(xi, permute(t.grad(self), pinv));
                        },
                        "permute");
}

inline Var adaptive_pool(const Var& x, const std::vector<int>& axes,
                         const std::vector<std::size_t>& targets, PoolMode mode) {
  Tensor y = adaptive_pool(x.value(), axes, targets, mode);
  const int xi = x.idx;
  return x.tape->record(
      std::move(y),
      [xi, axes, targets, mode](Tape& t, int self) {
        t.accumulate(xi, adaptive_pool_backward(t.value(xi), t.value(self), t.grad(self), axes,
                                                targets, mode));
      },
      "adaptive_pool");
}

inline Var global_pool(const Var& x, PoolMode mode) {
  std::vector<int> axes;
  std::vector<std::size_t> targets;
  for (int a = 0; a < x.value().spatial_rank(); ++a) {
    axes.push_back(a);
    targets.push_back(1);
  }
  if (axes.empty()) return x;
  return adaptive_pool(x, axes, targets, mode);
}

inline Var resize_repeat(const Var& x, int axis, int factor) {
  Tensor y = resize_repeat(x.value(), axis, factor);
  const int xi = x.idx;
  return x.tape->record(std::move(y),
                        [xi, axis, factor](Tape& t, int self) {
                          t.accumulate(xi, resize_repeat_backward(t.value(xi), t.grad(self), axis,
                                                                  factor));
                        },
                        "resize_repeat");
}

inline Var reshape(const Var& x, std::vector<std::size_t> shape, int spatial_rank) {
  const auto old_shape = x.value().shape();
  const int old_rank = x.value().spatial_rank();
  Tensor y = reshape(x.value(), std::move(shape), spatial_rank);
  const int xi = x.idx;
  return x.tape->record(std::move(y),
                        [xi, old_shape, old_rank](Tape& t, int self) {
                          t.accumulate(xi, reshape(t.grad(self), old_shape, old_rank));
                        },
                        "reshape");
}

inline Var zero_pad_axis(const Var& x, int axis, std::size_t lo, std::size_t hi) {
  const std::size_t len = x.value().extent(static_cast<std::size_t>(axis));
  Tensor y = zero_pad_axis(x.value(), axis, lo, hi);
  const int xi = x.idx;
  return x.tape->record(std::move(y),
                        [xi, axis, lo, len](Tape& t, int self) {
                          t.accumulate(xi, slice_axis(t.grad(self), axis, lo, len));
                        },
                        "zero_pad_axis");
}

namespace detail {

inline Var conv_trailing_var(const Var& x, const Var& w, const Var& b, int kernel, int stride,
                             Padding padding, int arity) {
  Tensor y = conv_trailing(x.value(), w.value(), b.value(), kernel, stride, padding, arity);
  const int xi = x.idx, wi = w.idx, bi = b.idx;
  return x.tape->record(
      std::move(y),
      [xi, wi, bi, kernel, stride, padding, arity](Tape& t, int self) {
        const Tensor& xv = t.value(xi);
        const Tensor& wv = t.value(wi);
        Tensor dx(xv.shape(), xv.spatial_rank());
        Tensor dw(wv.shape(), wv.spatial_rank());
        Tensor db(t.value(bi).shape(), t.value(bi).spatial_rank());
        conv_trailing_backward(xv, wv, t.grad(self), kernel, stride, padding, arity, &dx, &dw,
                               &db);
        t.accumulate(xi, dx);
        t.accumulate(wi, dw);
        t.accumulate(bi, db);
      },
      "conv");
}

}  // namespace detail

inline Var conv_lastaxes(const Var& x, const Var& w, const Var& b, const ConvSpec& spec) {
  require(spec.spatial_arity == 1 || spec.spatial_arity == 2,
          "conv_lastaxes: spatial arity must be 1 or 2");
  require(x.value().channels() == static_cast<std::size_t>(spec.in_channels),
          "conv_lastaxes: input channel mismatch");
  return detail::conv_trailing_var(x, w, b, spec.kernel, spec.stride, spec.padding,
                                   spec.spatial_arity);
}

inline Var linear_lastaxis(const Var& x, const Var& w, const Var& b, std::size_t out_spatial,
                           std::size_t out_channels) {
  Tensor y = linear_lastaxis(x.value(), w.value(), b.value(), out_spatial, out_channels);
  const int xi = x.idx, wi = w.idx, bi = b.idx;
  return x.tape->record(
      std::move(y),
      [xi, wi, bi](Tape& t, int self) {
        const Tensor& xv = t.value(xi);
        const Tensor& wv = t.value(wi);
        Tensor dx(xv.shape(), xv.spatial_rank());
        Tensor dw(wv.shape(), wv.spatial_rank());
        Tensor db(t.value(bi).shape(), t.value(bi).spatial_rank());
        linear_lastaxis_backward(xv, wv, t.grad(self), &dx, &dw, &db);
        t.accumulate(xi, dx);
        t.accumulate(wi, dw);
        t.accumulate(bi, db);
      },
      "linear_lastaxis");
}

inline Var dense_channels(const Var& x, const Var& w, const Var& b) {
  Tensor y = dense_channels(x.value(), w.value(), b.value());
  const int xi = x.idx, wi = w.idx, bi = b.idx;
  return x.tape->record(
      std::move(y),
      [xi, wi, bi](Tape& t, int self) {
        const Tensor& xv = t.value(xi);
        const Tensor& wv = t.value(wi);
        Tensor dx(xv.shape(), xv.spatial_rank());
        Tensor dw(wv.shape(), wv.spatial_rank());
        Tensor db(t.value(bi).shape(), t.value(bi).spatial_rank());
        dense_channels_backward(xv, wv, t.grad(self), &dx, &dw, &db);
        t.accumulate(xi, dx);
        t.accumulate(wi, dw);
        t.accumulate(bi, db);
      },
      "dense_channels");
}

inline Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta) {
  Tensor y = layer_norm_channels(x.value(), gamma.value(), beta.value());
  const int xi = x.idx, gi = gamma.idx, bi = beta.idx;
  return x.tape->record(
      std::move(y),
      [xi, gi, bi](Tape& t, int self) {
        const Tensor& xv = t.value(xi);
        const Tensor& gv = t.value(gi);
        Tensor dx(xv.shape(), xv.spatial_rank());
        Tensor dg(gv.shape(), gv.spatial_rank());
        Tensor db(t.value(bi).shape(), t.value(bi).spatial_rank());
        layer_norm_channels_backward(xv, gv, t.grad(self), &dx, &dg, &db);
        t.accumulate(xi, dx);
        t.accumulate(gi, dg);
        t.accumulate(bi, db);
      },
      "layer_norm");
}

/// Pure-tensor overload matching the Var signature used by generic layers.
inline Tensor self_attention_lastaxis(const Tensor& x, const Tensor& wq, const Tensor& wk,
                                      const Tensor& wv, const Tensor& wo, int heads) {
  return self_attention_lastaxis(x, AttentionParams{wq, wk, wv, wo, heads});
}

inline Var self_attention_lastaxis(const Var& x, const Var& wq, const Var& wk, const Var& wv,
                                   const Var& wo, int heads) {
  AttentionParams p{wq.value(), wk.value(), wv.value(), wo.value(), heads};
  auto det = std::make_shared<AttentionDetail>(self_attention_detail(x.value(), p));
  Tensor y = det->y;
  const int xi = x.idx, qi = wq.idx, ki = wk.idx, vi = wv.idx, oi = wo.idx;
  return x.tape->record(
      std::move(y),
      [xi, qi, ki, vi, oi, heads, det](Tape& t, int self) {
        AttentionParams p2{t.value(qi), t.value(ki), t.value(vi), t.value(oi), heads};
        AttentionGrads g = self_attention_backward(t.value(xi), p2, *det, t.grad(self));
        t.accumulate(xi, g.dx);
        t.accumulate(qi, g.dwq);
        t.accumulate(ki, g.dwk);
        t.accumulate(vi, g.dwv);
        t.accumulate(oi, g.dwo);
      },
      "self_attention");
}

inline Var relu(const Var& x) {
  Tensor y = relu(x.value());
  const int xi = x.idx;
  return x.tape->record(std::move(y),
                        [xi](Tape& t, int self) {
                          const Tensor& xv = t.value(xi);
                          Tensor dx = t.grad(self);
                          for (std::size_t i = 0; i < dx.numel(); ++i)
                            if (xv[i] <= 0.0) dx[i] = 0.0;
                          t.accumulate(xi, dx);
                        },
                        "relu");
}

inline Var gelu(const Var& x) {
  Tensor y = gelu(x.value());
  const int xi = x.idx;
  return x.tape->record(std::move(y),
                        [xi](Tape& t, int self) {
                          const Tensor& xv = t.value(xi);
                          Tensor dx = t.grad(self);
                          for (std::size_t i = 0; i < dx.numel(); ++i)
                            dx[i] *= gelu_grad_scalar(xv[i]);
                          t.accumulate(xi, dx);
                        },
                        "gelu");
}

inline Var sigmoid(const Var& x) {
  Tensor y = sigmoid(x.value());
  const int xi = x.idx;
  return x.tape->record(std::move(y),
                        [xi](Tape& t, int self) {
                          const Tensor& yv = t.value(self);
                          Tensor dx = t.grad(self);
                          for (std::size_t i = 0; i < dx.numel(); ++i)
                            dx[i] *= yv[i] * (1.0 - yv[i]);
                          t.accumulate(xi, dx);
                        },
                        "sigmoid");
}

inline Var add(const Var& a, const Var& b) {
  Tensor y = add(a.value(), b.value());
  const int ai = a.idx, bi = b.idx;
  return a.tape->record(std::move(y),
                        [ai, bi](Tape& t, int self) {
                          t.accumulate(ai, t.grad(self));
                          t.accumulate(bi, t.grad(self));
                        },
                        "add");
}

inline Var sub(const Var& a, const Var& b) {
  Tensor y = sub(a.value(), b.value());
  const int ai = a.idx, bi = b.idx;
  return a.tape->record(std::move(y),
                        [ai, bi](Tape& t, int self) {
                          t.accumulate(ai, t.grad(self));
                          t.accumulate(bi, scale(t.grad(self), -1.0));
                        },
                        "sub");
}

inline Var mul(const Var& a, const Var& b) {
  Tensor y = mul(a.value(), b.value());
  const int ai = a.idx, bi = b.idx;
  return a.tape->record(std::move(y),
                        [ai, bi](Tape& t, int self) {
                          t.accumulate(ai, mul(t.grad(self), t.value(bi)));
                          t.accumulate(bi, mul(t.grad(self), t.value(ai)));
                        },
                        "mul");
}

inline Var scale(const Var& a, double s) {
  Tensor y = scale(a.value(), s);
  const int ai = a.idx;
  return a.tape->record(std::move(y),
                        [ai, s](Tape& t, int self) { t.accumulate(ai, scale(t.grad(self), s)); },
                        "scale");
}

inline Var max_merge(const Var& a, const Var& b) {
  Tensor y = max_merge(a.value(), b.value());
  const int ai = a.idx, bi = b.idx;
  return a.tape->record(
      std::move(y),
      [ai, bi](Tape& t, int self) {
        const Tensor& av = t.value(ai);
        const Tensor& bv = t.value(bi);
        const Tensor& g = t.grad(self);
        Tensor da(av.shape(), av.spatial_rank());
        Tensor db(bv.shape(), bv.spatial_rank());
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (av[i] >= bv[i])
            da[i] = g[i];
          else
            db[i] = g[i];
        }
        t.accumulate(ai, da);
        t.accumulate(bi, db);
      },
      "max_merge");
}

inline Var sum_all(const Var& x) {
  Tensor y = sum_all(x.value());
  const int xi = x.idx;
  return x.tape->record(std::move(y),
                        [xi](Tape& t, int self) {
                          const double g = t.grad(self).as_scalar();
                          const Tensor& xv = t.value(xi);
                          Tensor dx(xv.shape(), xv.spatial_rank());
                          for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = g;
                          t.accumulate(xi, dx);
                        },
                        "sum_all");
}

inline Var mean_all(const Var& x) {
  const double inv = 1.0 / static_cast<double>(x.value().numel());
  return scale(sum_all(x), inv);
}

/// Numerically stable binary cross-entropy from a logit:
/// max(z,0) - z*y + log(1 + exp(-|z|)); d/dz = sigmoid(z) - y.
inline double bce_from_logit_value(double z, double y) {
  return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

inline Tensor bce_from_logit(const Tensor& logit, double label) {
  return Tensor::scalar(bce_from_logit_value(logit.as_scalar(), label));
}

inline Var bce_from_logit(const Var& logit, double label) {
  const double z = logit.value().as_scalar();
  require(std::isfinite(z), "bce_from_logit: non-finite logit");
  Tensor y = Tensor::scalar(bce_from_logit_value(z, label));
  const int li = logit.idx;
  return logit.tape->record(
      std::move(y),
      [li, label](Tape& t, int self) {
        const double z2 = t.value(li).as_scalar();
        const double g = t.grad(self).as_scalar() * (sigmoid_scalar(z2) - label);
        t.accumulate(li, Tensor::scalar(g));
      },
      "bce_from_logit");
}

// ---------------------------------------------------------------------------
// Parameter access contexts for layer code that is generic over Tensor / Var.
// ---------------------------------------------------------------------------

struct TensorCtx {
  using value_type = Tensor;
  const ParamStore* params;

  Tensor operator()(const std::string& name) const { return params->at(name); }
  Tensor lift_input(const Tensor& x) const { return x; }
};

struct TapeCtx {
  using value_type = Var;
  Tape* tape;
  ParamStore* params;
  std::unordered_map<std::string, int> cache;
  std::vector<std::pair<std::string, int>> order;

  Var operator()(const std::string& name) {
    auto it = cache.find(name);
    if (it != cache.end()) return Var{tape, it->second};
    Var v = tape->leaf(params->at(name), "param");
    cache[name] = v.idx;
    order.emplace_back(name, v.idx);
    return v;
  }

  Var lift_input(const Tensor& x) const { return tape->leaf(x, "input"); }

  /// Gradients for every parameter touched during the recording.
  ParamStore gradients() const {
    ParamStore g;
    for (const auto& [name, idx] : order) g.add(name, tape->grad_or_zero(idx));
    return g;
  }
};

// ---------------------------------------------------------------------------
// Finite-difference verification harness.
// ---------------------------------------------------------------------------

struct FdReport {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

/// f must be callable with both context flavors and return the loss (Var for
/// TapeCtx, Tensor for TensorCtx).  Relative error uses the guard
/// |analytic - cd| / (|analytic| + |cd| + 1e-12) per coordinate.
template <class F>
FdReport finite_difference_check(F&& f, ParamStore& params, double h, std::size_t max_coords,
                                 std::uint64_t seed) {
  ParamStore analytic;
  {
    Tape tape;
    TapeCtx ctx{&tape, &params, {}, {}};
    Var loss = f(ctx);
    tape.backward(loss);
    analytic = ctx.gradients();
  }

  // Enumerate (param, element) coordinates, subsample deterministically.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p)
    for (std::size_t e = 0; e < params.item(p).second.numel(); ++e) coords.emplace_back(p, e);
  CounterRng rng(seed, 0xfd);
  rng.shuffle(coords);
  if (coords.size() > max_coords) coords.resize(max_coords);

  FdReport rep;
  rep.coords_checked = coords.size();
  for (auto [p, e] : coords) {
    const std::string& name = params.item(p).first;
    Tensor& t = params.item(p).second;
    const double orig = t[e];
    t[e] = orig + h;
    TensorCtx cp{&params};
    const double fp = f(cp).as_scalar();
    t[e] = orig - h;
    TensorCtx cm{&params};
    const double fm = f(cm).as_scalar();
    t[e] = orig;
    const double cd = (fp - fm) / (2.0 * h);
    const double an = analytic.has(name) ? analytic.at(name)[e] : 0.0;
    const double rel = std::abs(an - cd) / (std::abs(an) + std::abs(cd) + 1e-12);
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
  }
  return rep;
}

}  // namespace xnn
