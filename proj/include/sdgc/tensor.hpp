#pragma once

// Reverse-mode autodiff on dense row-major tensors. Define-by-run: each op
// records a node on the tape of its tracked inputs; backward() walks the
// records in reverse once and then clears the tape. Templated on the scalar
// type: float for training, double for finite-difference verification.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "sdgc/common.hpp"
#include "sdgc/rng.hpp"

namespace sdgc::ad {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

template <typename T>
class Tape;

template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> values;
  std::shared_ptr<std::vector<T>> grad;  // filled by backward() for tracked leaves
  int node = -1;
  Tape<T>* tape = nullptr;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.values = std::make_shared<std::vector<T>>(static_cast<size_t>(numel(t.shape)), T(0));
    return t;
  }

  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.values->begin(), t.values->end(), v);
    return t;
  }

  static Tensor from(Shape s, std::vector<T> vals) {
    if (numel(s) != static_cast<int64_t>(vals.size()))
      throw Error(cat("tensor: shape ", shape_str(s), " incompatible with ", vals.size(), " values"));
    Tensor t;
    t.shape = std::move(s);
    t.values = std::make_shared<std::vector<T>>(std::move(vals));
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  static Tensor randn(Shape s, Rng& rng, double scale = 1.0) {
    Tensor t = zeros(std::move(s));
    rng.fill_normal(*t.values, scale);
    return t;
  }

  int64_t size() const { return values ? static_cast<int64_t>(values->size()) : 0; }
  T* data() { return values->data(); }
  const T* data() const { return values->data(); }
  T item() const {
    if (size() != 1) throw Error(cat("item: tensor ", shape_str(shape), " is not scalar"));
    return (*values)[0];
  }
  T at(int64_t i) const { return (*values)[static_cast<size_t>(i)]; }
  bool tracked() const { return node >= 0 && tape != nullptr; }

  // Same buffers, no tape attachment; safe to move across computations.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.values = values;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.values = std::make_shared<std::vector<T>>(*values);
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> t;
    t.shape = shape;
    t.values = std::make_shared<std::vector<U>>(values->size());
    for (size_t i = 0; i < values->size(); ++i) (*t.values)[i] = static_cast<U>((*values)[i]);
    return t;
  }
};

namespace detail {

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

template <typename T>
void check_input(const char* op, const Tensor<T>& t) {
  // Tracked tensors were validated when produced; fresh inputs get scanned here.
  if (!t.tracked() && !all_finite(*t.values)) throw NumericError(cat(op, ": non-finite input"));
}

}  // namespace detail

template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;  // (tape, own node id)

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a tracked leaf. The handle shares buffers with `t` (whose grad
  // buffer is allocated here), so after backward() the caller sees gradients.
  Tensor<T> var(Tensor<T>& t) {
    if (consumed_) throw Error("tape: var() on a consumed tape");
    if (!detail::all_finite(*t.values)) throw NumericError("tape: non-finite input to var()");
    if (!t.grad) t.grad = std::make_shared<std::vector<T>>();
    Tensor<T> out = t;
    Node n;
    n.op = "leaf";
    n.nel = out.size();
    n.leaf_grad = out.grad;
    out.node = static_cast<int>(nodes_.size());
    out.tape = this;
    nodes_.push_back(std::move(n));
    return out;
  }

  int push(const char* op, int64_t nel, BackFn back) {
    if (consumed_) throw Error(cat(op, ": op recorded on a consumed tape"));
    Node n;
    n.op = op;
    n.nel = nel;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Gradient buffer of node `id` for accumulation; lazily allocated and zeroed.
  std::vector<T>& grad_acc(int id) {
    auto& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(id)].nel), T(0));
    return g;
  }

  const std::vector<T>& grad_out(int id) const { return grads_[static_cast<size_t>(id)]; }

  void backward(const Tensor<T>& loss) {
    if (consumed_) throw Error("tape: backward on a consumed tape");
    if (nodes_.empty()) throw Error("tape: backward on an empty tape");
    if (!loss.tracked() || loss.tape != this) throw Error("tape: loss is not tracked on this tape");
    if (loss.size() != 1) throw Error(cat("tape: loss must be scalar, got ", shape_str(loss.shape)));

    grads_.assign(nodes_.size(), {});
    grads_[static_cast<size_t>(loss.node)] = {T(1)};
    for (auto& n : nodes_)
      if (n.leaf_grad) n.leaf_grad->assign(static_cast<size_t>(n.nel), T(0));

    for (int i = loss.node; i >= 0; --i) {
      auto& n = nodes_[static_cast<size_t>(i)];
      auto& gi = grads_[static_cast<size_t>(i)];
      if (gi.empty()) continue;
      if (n.back) n.back(*this, i);
      if (n.leaf_grad) {
        auto& dst = *n.leaf_grad;
        for (size_t k = 0; k < gi.size(); ++k) dst[k] += gi[k];
      }
      gi.clear();
      gi.shrink_to_fit();
    }
    nodes_.clear();
    grads_.clear();
    consumed_ = true;
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    const char* op = "";
    int64_t nel = 0;
    BackFn back;
    std::shared_ptr<std::vector<T>> leaf_grad;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
Tape<T>* common_tape(const char* op, std::initializer_list<const Tensor<T>*> ins) {
  Tape<T>* tape = nullptr;
  for (const auto* t : ins) {
    if (!t->tracked()) continue;
    if (tape && tape != t->tape) throw Error(cat(op, ": inputs belong to different tapes"));
    tape = t->tape;
  }
  return tape;
}

template <typename T>
void attach(const char* op, Tensor<T>& out, Tape<T>* tape, typename Tape<T>::BackFn back) {
  if (!all_finite(*out.values)) throw NumericError(cat(op, ": non-finite values in result"));
  if (tape) {
    out.tape = tape;
    out.node = tape->push(op, out.size(), std::move(back));
  }
}

template <typename T>
void acc_into(Tape<T>& tp, int node, const std::vector<T>& contrib) {
  auto& g = tp.grad_acc(node);
  for (size_t i = 0; i < contrib.size(); ++i) g[i] += contrib[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw Error(cat("add: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
  detail::check_input("add", a);
  detail::check_input("add", b);
  Tape<T>* tape = detail::common_tape<T>("add", {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const T *pa = a.data(), *pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  int an = a.node, bn = b.node;
  detail::attach<T>("add", out, tape, [an, bn](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (an >= 0) detail::acc_into(tp, an, go);
    if (bn >= 0) detail::acc_into(tp, bn, go);
  });
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw Error(cat("sub: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
  detail::check_input("sub", a);
  detail::check_input("sub", b);
  Tape<T>* tape = detail::common_tape<T>("sub", {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const T *pa = a.data(), *pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  int an = a.node, bn = b.node;
  detail::attach<T>("sub", out, tape, [an, bn](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (an >= 0) detail::acc_into(tp, an, go);
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw Error(cat("mul: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
  detail::check_input("mul", a);
  detail::check_input("mul", b);
  Tape<T>* tape = detail::common_tape<T>("mul", {&a, &b});
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const T *pa = a.data(), *pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  int an = a.node, bn = b.node;
  auto va = a.values, vb = b.values;
  detail::attach<T>("mul", out, tape, [an, bn, va, vb](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (an >= 0) {
      auto& ga = tp.grad_acc(an);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*vb)[i];
    }
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * (*va)[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
  detail::check_input("scalar_mul", x);
  if (!std::isfinite(static_cast<double>(c))) throw NumericError("scalar_mul: non-finite scalar");
  Tape<T>* tape = detail::common_tape<T>("scalar_mul", {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] * c;
  int xn = x.node;
  detail::attach<T>("scalar_mul", out, tape, [xn, c](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (xn >= 0) {
      auto& gx = tp.grad_acc(xn);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * c;
    }
  });
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  detail::check_input("add_scalar", x);
  if (!std::isfinite(static_cast<double>(c))) throw NumericError("add_scalar: non-finite scalar");
  Tape<T>* tape = detail::common_tape<T>("add_scalar", {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] + c;
  int xn = x.node;
  detail::attach<T>("add_scalar", out, tape, [xn](Tape<T>& tp, int self) {
    if (xn >= 0) detail::acc_into(tp, xn, tp.grad_out(self));
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  detail::check_input("relu", x);
  Tape<T>* tape = detail::common_tape<T>("relu", {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
  int xn = x.node;
  auto vx = x.values;
  detail::attach<T>("relu", out, tape, [xn, vx](Tape<T>& tp, int self) {
    if (xn < 0) return;
    const auto& go = tp.grad_out(self);
    auto& gx = tp.grad_acc(xn);
    for (size_t i = 0; i < go.size(); ++i)
      if ((*vx)[i] > T(0)) gx[i] += go[i];
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  detail::check_input("sigmoid", x);
  Tape<T>* tape = detail::common_tape<T>("sigmoid", {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    double v = static_cast<double>(px[i]);
    po[i] = static_cast<T>(1.0 / (1.0 + std::exp(-v)));
  }
  int xn = x.node;
  auto vy = out.values;
  detail::attach<T>("sigmoid", out, tape, [xn, vy](Tape<T>& tp, int self) {
    if (xn < 0) return;
    const auto& go = tp.grad_out(self);
    auto& gx = tp.grad_acc(xn);
    for (size_t i = 0; i < go.size(); ++i) {
      T y = (*vy)[i];
      gx[i] += go[i] * y * (T(1) - y);
    }
  });
  return out;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  detail::check_input("exp", x);
  Tape<T>* tape = detail::common_tape<T>("exp", {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = static_cast<T>(std::exp(static_cast<double>(px[i])));
  int xn = x.node;
  auto vy = out.values;
  detail::attach<T>("exp", out, tape, [xn, vy](Tape<T>& tp, int self) {
    if (xn < 0) return;
    const auto& go = tp.grad_out(self);
    auto& gx = tp.grad_acc(xn);
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*vy)[i];
  });
  return out;
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  detail::check_input("log", x);
  Tape<T>* tape = detail::common_tape<T>("log", {&x});
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < x.size(); ++i) po[i] = static_cast<T>(std::log(static_cast<double>(px[i])));
  int xn = x.node;
  auto vx = x.values;
  detail::attach<T>("log", out, tape, [xn, vx](Tape<T>& tp, int self) {
    if (xn < 0) return;
    const auto& go = tp.grad_out(self);
    auto& gx = tp.grad_acc(xn);
    for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] / (*vx)[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  detail::check_input("sum", x);
  Tape<T>* tape = detail::common_tape<T>("sum", {&x});
  double acc = 0;
  const T* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) acc += static_cast<double>(px[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  int xn = x.node;
  int64_t n = x.size();
  detail::attach<T>("sum", out, tape, [xn, n](Tape<T>& tp, int self) {
    if (xn < 0) return;
    T g = tp.grad_out(self)[0];
    auto& gx = tp.grad_acc(xn);
    for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  detail::check_input("mean", x);
  Tape<T>* tape = detail::common_tape<T>("mean", {&x});
  double acc = 0;
  const T* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) acc += static_cast<double>(px[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(x.size())));
  int xn = x.node;
  int64_t n = x.size();
  detail::attach<T>("mean", out, tape, [xn, n](Tape<T>& tp, int self) {
    if (xn < 0) return;
    T g = tp.grad_out(self)[0] / static_cast<T>(n);
    auto& gx = tp.grad_acc(xn);
    for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
  });
  return out;
}

// squared L2 norm over all elements
template <typename T>
Tensor<T> sqnorm(const Tensor<T>& x) {
  detail::check_input("sqnorm", x);
  Tape<T>* tape = detail::common_tape<T>("sqnorm", {&x});
  double acc = 0;
  const T* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) acc += static_cast<double>(px[i]) * static_cast<double>(px[i]);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  int xn = x.node;
  auto vx = x.values;
  detail::attach<T>("sqnorm", out, tape, [xn, vx](Tape<T>& tp, int self) {
    if (xn < 0) return;
    T g = tp.grad_out(self)[0];
    auto& gx = tp.grad_acc(xn);
    for (size_t i = 0; i < vx->size(); ++i) gx[i] += T(2) * (*vx)[i] * g;
  });
  return out;
}

template <typename T>
Tensor<T> l1norm(const Tensor<T>& x) {
  detail::check_input("l1norm", x);
  Tape<T>* tape = detail::common_tape<T>("l1norm", {&x});
  double acc = 0;
  const T* px = x.data();
  for (int64_t i = 0; i < x.size(); ++i) acc += std::abs(static_cast<double>(px[i]));
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  int xn = x.node;
  auto vx = x.values;
  detail::attach<T>("l1norm", out, tape, [xn, vx](Tape<T>& tp, int self) {
    if (xn < 0) return;
    T g = tp.grad_out(self)[0];
    auto& gx = tp.grad_acc(xn);
    for (size_t i = 0; i < vx->size(); ++i) {
      T v = (*vx)[i];
      gx[i] += (v > T(0) ? g : (v < T(0) ? -g : T(0)));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    throw Error(cat("reshape: cannot view ", shape_str(x.shape), " as ", shape_str(new_shape)));
  detail::check_input("reshape", x);
  Tape<T>* tape = detail::common_tape<T>("reshape", {&x});
  Tensor<T> out;
  out.shape = std::move(new_shape);
  out.values = std::make_shared<std::vector<T>>(*x.values);
  int xn = x.node;
  detail::attach<T>("reshape", out, tape, [xn](Tape<T>& tp, int self) {
    if (xn >= 0) detail::acc_into(tp, xn, tp.grad_out(self));
  });
  return out;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, int axis) {
  if (a.shape.size() != b.shape.size())
    throw Error(cat("concat: rank mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
  int rank = static_cast<int>(a.shape.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw Error(cat("concat: bad axis ", axis));
  for (int i = 0; i < rank; ++i)
    if (i != axis && a.shape[static_cast<size_t>(i)] != b.shape[static_cast<size_t>(i)])
      throw Error(cat("concat: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
  detail::check_input("concat", a);
  detail::check_input("concat", b);
  Tape<T>* tape = detail::common_tape<T>("concat", {&a, &b});

  Shape os = a.shape;
  os[static_cast<size_t>(axis)] += b.shape[static_cast<size_t>(axis)];
  Tensor<T> out = Tensor<T>::zeros(os);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= a.shape[static_cast<size_t>(i)];
  int64_t da = a.shape[static_cast<size_t>(axis)] * inner;
  int64_t db = b.shape[static_cast<size_t>(axis)] * inner;
  for (int64_t o = 0; o < outer; ++o) {
    std::memcpy(out.data() + o * (da + db), a.data() + o * da, sizeof(T) * static_cast<size_t>(da));
    std::memcpy(out.data() + o * (da + db) + da, b.data() + o * db, sizeof(T) * static_cast<size_t>(db));
  }
  int an = a.node, bn = b.node;
  detail::attach<T>("concat", out, tape, [an, bn, outer, da, db](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (an >= 0) {
      auto& ga = tp.grad_acc(an);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < da; ++i) ga[static_cast<size_t>(o * da + i)] += go[static_cast<size_t>(o * (da + db) + i)];
    }
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < db; ++i) gb[static_cast<size_t>(o * db + i)] += go[static_cast<size_t>(o * (da + db) + da + i)];
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, const std::vector<int64_t>& starts, const std::vector<int64_t>& sizes) {
  int rank = static_cast<int>(x.shape.size());
  if (static_cast<int>(starts.size()) != rank || static_cast<int>(sizes.size()) != rank)
    throw Error(cat("slice: starts/sizes rank mismatch for ", shape_str(x.shape)));
  for (int i = 0; i < rank; ++i) {
    if (starts[static_cast<size_t>(i)] < 0 || sizes[static_cast<size_t>(i)] < 1 ||
        starts[static_cast<size_t>(i)] + sizes[static_cast<size_t>(i)] > x.shape[static_cast<size_t>(i)])
      throw Error(cat("slice: window out of range for ", shape_str(x.shape)));
  }
  detail::check_input("slice", x);
  Tape<T>* tape = detail::common_tape<T>("slice", {&x});
  Tensor<T> out = Tensor<T>::zeros(Shape(sizes.begin(), sizes.end()));

  std::vector<int64_t> xstride(static_cast<size_t>(rank), 1);
  for (int i = rank - 2; i >= 0; --i)
    xstride[static_cast<size_t>(i)] = xstride[static_cast<size_t>(i + 1)] * x.shape[static_cast<size_t>(i + 1)];

  int64_t n = out.size();
  std::vector<int64_t> src_index(static_cast<size_t>(n));
  std::vector<int64_t> idx(static_cast<size_t>(rank), 0);
  for (int64_t k = 0; k < n; ++k) {
    int64_t off = 0;
    for (int i = 0; i < rank; ++i) off += (starts[static_cast<size_t>(i)] + idx[static_cast<size_t>(i)]) * xstride[static_cast<size_t>(i)];
    src_index[static_cast<size_t>(k)] = off;
    out.data()[k] = x.data()[off];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < sizes[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
  int xn = x.node;
  auto map = std::make_shared<std::vector<int64_t>>(std::move(src_index));
  detail::attach<T>("slice", out, tape, [xn, map](Tape<T>& tp, int self) {
    if (xn < 0) return;
    const auto& go = tp.grad_out(self);
    auto& gx = tp.grad_acc(xn);
    for (size_t k = 0; k < go.size(); ++k) gx[static_cast<size_t>((*map)[k])] += go[k];
  });
  return out;
}

// rank-2 (m,n)->(n,m) or rank-3 batched (B,m,n)->(B,n,m)
template <typename T>
Tensor<T> transpose_last(const Tensor<T>& x) {
  int rank = static_cast<int>(x.shape.size());
  if (rank != 2 && rank != 3) throw Error(cat("transpose_last: expected rank 2 or 3, got ", shape_str(x.shape)));
  detail::check_input("transpose_last", x);
  Tape<T>* tape = detail::common_tape<T>("transpose_last", {&x});
  int64_t B = rank == 3 ? x.shape[0] : 1;
  int64_t m = x.shape[static_cast<size_t>(rank - 2)], n = x.shape[static_cast<size_t>(rank - 1)];
  Shape os = x.shape;
  os[static_cast<size_t>(rank - 2)] = n;
  os[static_cast<size_t>(rank - 1)] = m;
  Tensor<T> out = Tensor<T>::zeros(os);
  for (int64_t b = 0; b < B; ++b) {
    CMapRM<T> xm(x.data() + b * m * n, m, n);
    MapRM<T> om(out.data() + b * m * n, n, m);
    om = xm.transpose();
  }
  int xn = x.node;
  detail::attach<T>("transpose_last", out, tape, [xn, B, m, n](Tape<T>& tp, int self) {
    if (xn < 0) return;
    const auto& go = tp.grad_out(self);
    auto& gx = tp.grad_acc(xn);
    for (int64_t b = 0; b < B; ++b) {
      CMapRM<T> gom(go.data() + b * m * n, n, m);
      MapRM<T> gxm(gx.data() + b * m * n, m, n);
      gxm += gom.transpose();
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
    throw Error(cat("matmul: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
  detail::check_input("matmul", a);
  detail::check_input("matmul", b);
  Tape<T>* tape = detail::common_tape<T>("matmul", {&a, &b});
  int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n});
  {
    CMapRM<T> am(a.data(), m, k), bm(b.data(), k, n);
    MapRM<T> om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  int an = a.node, bn = b.node;
  auto va = a.values, vb = b.values;
  detail::attach<T>("matmul", out, tape, [an, bn, va, vb, m, k, n](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    CMapRM<T> gom(go.data(), m, n);
    if (an >= 0) {
      auto& ga = tp.grad_acc(an);
      CMapRM<T> bm(vb->data(), k, n);
      MapRM<T> gam(ga.data(), m, k);
      gam.noalias() += gom * bm.transpose();
    }
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      CMapRM<T> am(va->data(), m, k);
      MapRM<T> gbm(gb.data(), k, n);
      gbm.noalias() += am.transpose() * gom;
    }
  });
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.size() != 3 || b.shape.size() != 3 || a.shape[0] != b.shape[0] || a.shape[2] != b.shape[1])
    throw Error(cat("bmm: shape mismatch ", shape_str(a.shape), " vs ", shape_str(b.shape)));
  detail::check_input("bmm", a);
  detail::check_input("bmm", b);
  Tape<T>* tape = detail::common_tape<T>("bmm", {&a, &b});
  int64_t B = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
  Tensor<T> out = Tensor<T>::zeros({B, m, n});
  for (int64_t i = 0; i < B; ++i) {
    CMapRM<T> am(a.data() + i * m * k, m, k), bm(b.data() + i * k * n, k, n);
    MapRM<T> om(out.data() + i * m * n, m, n);
    om.noalias() = am * bm;
  }
  int an = a.node, bn = b.node;
  auto va = a.values, vb = b.values;
  detail::attach<T>("bmm", out, tape, [an, bn, va, vb, B, m, k, n](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    for (int64_t i = 0; i < B; ++i) {
      CMapRM<T> gom(go.data() + i * m * n, m, n);
      if (an >= 0) {
        auto& ga = tp.grad_acc(an);
        CMapRM<T> bm(vb->data() + i * k * n, k, n);
        MapRM<T> gam(ga.data() + i * m * k, m, k);
        gam.noalias() += gom * bm.transpose();
      }
      if (bn >= 0) {
        auto& gb = tp.grad_acc(bn);
        CMapRM<T> am(va->data() + i * m * k, m, k);
        MapRM<T> gbm(gb.data() + i * k * n, k, n);
        gbm.noalias() += am.transpose() * gom;
      }
    }
  });
  return out;
}

// x:(N,D)+bias(D) or x:(N,C,H,W)+bias(C)
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  int rank = static_cast<int>(x.shape.size());
  int64_t C = 0, inner = 1, N = 0;
  if (rank == 2 && b.shape.size() == 1 && b.shape[0] == x.shape[1]) {
    N = x.shape[0];
    C = x.shape[1];
  } else if (rank == 4 && b.shape.size() == 1 && b.shape[0] == x.shape[1]) {
    N = x.shape[0];
    C = x.shape[1];
    inner = x.shape[2] * x.shape[3];
  } else {
    throw Error(cat("add_bias: shape mismatch ", shape_str(x.shape), " vs ", shape_str(b.shape)));
  }
  detail::check_input("add_bias", x);
  detail::check_input("add_bias", b);
  Tape<T>* tape = detail::common_tape<T>("add_bias", {&x, &b});
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T *px = x.data(), *pb = b.data();
  T* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      T bias = pb[c];
      int64_t base = (n * C + c) * inner;
      for (int64_t i = 0; i < inner; ++i) po[base + i] = px[base + i] + bias;
    }
  int xn = x.node, bn = b.node;
  detail::attach<T>("add_bias", out, tape, [xn, bn, N, C, inner](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (xn >= 0) detail::acc_into(tp, xn, go);
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          int64_t base = (n * C + c) * inner;
          T acc = T(0);
          for (int64_t i = 0; i < inner; ++i) acc += go[static_cast<size_t>(base + i)];
          gb[static_cast<size_t>(c)] += acc;
        }
    }
  });
  return out;
}

// y = x * scale[c] + shift[c]; x rank 2 (N,C) or rank 4 (N,C,H,W)
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
  int rank = static_cast<int>(x.shape.size());
  if ((rank != 2 && rank != 4) || scale.shape.size() != 1 || shift.shape != scale.shape ||
      scale.shape[0] != x.shape[1])
    throw Error(cat("channel_affine: shape mismatch ", shape_str(x.shape), " vs ", shape_str(scale.shape)));
  detail::check_input("channel_affine", x);
  detail::check_input("channel_affine", scale);
  detail::check_input("channel_affine", shift);
  Tape<T>* tape = detail::common_tape<T>("channel_affine", {&x, &scale, &shift});
  int64_t N = x.shape[0], C = x.shape[1];
  int64_t inner = rank == 4 ? x.shape[2] * x.shape[3] : 1;
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T *px = x.data(), *ps = scale.data(), *pt = shift.data();
  T* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      int64_t base = (n * C + c) * inner;
      for (int64_t i = 0; i < inner; ++i) po[base + i] = px[base + i] * ps[c] + pt[c];
    }
  int xn = x.node, sn = scale.node, tn = shift.node;
  auto vx = x.values, vs = scale.values;
  detail::attach<T>("channel_affine", out, tape, [xn, sn, tn, vx, vs, N, C, inner](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (xn >= 0) {
      auto& gx = tp.grad_acc(xn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          int64_t base = (n * C + c) * inner;
          T s = (*vs)[static_cast<size_t>(c)];
          for (int64_t i = 0; i < inner; ++i) gx[static_cast<size_t>(base + i)] += go[static_cast<size_t>(base + i)] * s;
        }
    }
    if (sn >= 0) {
      auto& gs = tp.grad_acc(sn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          int64_t base = (n * C + c) * inner;
          T acc = T(0);
          for (int64_t i = 0; i < inner; ++i) acc += go[static_cast<size_t>(base + i)] * (*vx)[static_cast<size_t>(base + i)];
          gs[static_cast<size_t>(c)] += acc;
        }
    }
    if (tn >= 0) {
      auto& gt = tp.grad_acc(tn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          int64_t base = (n * C + c) * inner;
          T acc = T(0);
          for (int64_t i = 0; i < inner; ++i) acc += go[static_cast<size_t>(base + i)];
          gt[static_cast<size_t>(c)] += acc;
        }
    }
  });
  return out;
}

// softmax over the last dimension
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.shape.empty()) throw Error("softmax: rank-0 input");
  detail::check_input("softmax", x);
  Tape<T>* tape = detail::common_tape<T>("softmax", {&x});
  int64_t D = x.shape.back();
  int64_t R = x.size() / D;
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t r = 0; r < R; ++r) {
    const T* row = px + r * D;
    T* orow = po + r * D;
    double mx = -1e300;
    for (int64_t i = 0; i < D; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double denom = 0;
    for (int64_t i = 0; i < D; ++i) {
      double e = std::exp(static_cast<double>(row[i]) - mx);
      orow[i] = static_cast<T>(e);
      denom += e;
    }
    for (int64_t i = 0; i < D; ++i) orow[i] = static_cast<T>(static_cast<double>(orow[i]) / denom);
  }
  int xn = x.node;
  auto vy = out.values;
  detail::attach<T>("softmax", out, tape, [xn, vy, R, D](Tape<T>& tp, int self) {
    if (xn < 0) return;
    const auto& go = tp.grad_out(self);
    auto& gx = tp.grad_acc(xn);
    for (int64_t r = 0; r < R; ++r) {
      const T* y = vy->data() + r * D;
      const T* g = go.data() + r * D;
      double dot = 0;
      for (int64_t i = 0; i < D; ++i) dot += static_cast<double>(g[i]) * static_cast<double>(y[i]);
      T* dst = gx.data() + r * D;
      for (int64_t i = 0; i < D; ++i) dst[i] += y[i] * (g[i] - static_cast<T>(dot));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// normalization

namespace detail {

// Shared normalization backward: xhat/istd saved per reduction block.
// Blocks are index ranges of equal size M laid out via an indexer callable.
template <typename T>
struct NormSaved {
  std::shared_ptr<std::vector<T>> xhat;
  std::shared_ptr<std::vector<T>> istd;  // one per block
};

}  // namespace detail

// layer normalization over the last dimension with per-position affine
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5) {
  if (x.shape.empty() || gamma.shape.size() != 1 || gamma.shape[0] != x.shape.back() || beta.shape != gamma.shape)
    throw Error(cat("layernorm: shape mismatch ", shape_str(x.shape), " vs ", shape_str(gamma.shape)));
  detail::check_input("layernorm", x);
  detail::check_input("layernorm", gamma);
  detail::check_input("layernorm", beta);
  Tape<T>* tape = detail::common_tape<T>("layernorm", {&x, &gamma, &beta});
  int64_t D = x.shape.back(), R = x.size() / D;
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(R));
  const T *px = x.data(), *pg = gamma.data(), *pb = beta.data();
  T* po = out.data();
  for (int64_t r = 0; r < R; ++r) {
    const T* row = px + r * D;
    double mu = 0;
    for (int64_t i = 0; i < D; ++i) mu += static_cast<double>(row[i]);
    mu /= static_cast<double>(D);
    double var = 0;
    for (int64_t i = 0; i < D; ++i) {
      double d = static_cast<double>(row[i]) - mu;
      var += d * d;
    }
    var /= static_cast<double>(D);
    double is = 1.0 / std::sqrt(var + eps);
    (*istd)[static_cast<size_t>(r)] = static_cast<T>(is);
    for (int64_t i = 0; i < D; ++i) {
      T xh = static_cast<T>((static_cast<double>(row[i]) - mu) * is);
      (*xhat)[static_cast<size_t>(r * D + i)] = xh;
      po[r * D + i] = xh * pg[i] + pb[i];
    }
  }
  int xn = x.node, gn = gamma.node, bn = beta.node;
  auto vg = gamma.values;
  detail::attach<T>("layernorm", out, tape, [xn, gn, bn, xhat, istd, vg, R, D](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (xn >= 0) {
      auto& gx = tp.grad_acc(xn);
      for (int64_t r = 0; r < R; ++r) {
        const T* g = go.data() + r * D;
        const T* xh = xhat->data() + r * D;
        double s1 = 0, s2 = 0;
        for (int64_t i = 0; i < D; ++i) {
          double dxh = static_cast<double>(g[i]) * static_cast<double>((*vg)[static_cast<size_t>(i)]);
          s1 += dxh;
          s2 += dxh * static_cast<double>(xh[i]);
        }
        double is = static_cast<double>((*istd)[static_cast<size_t>(r)]);
        T* dst = gx.data() + r * D;
        for (int64_t i = 0; i < D; ++i) {
          double dxh = static_cast<double>(g[i]) * static_cast<double>((*vg)[static_cast<size_t>(i)]);
          dst[i] += static_cast<T>(is * (dxh - s1 / static_cast<double>(D) -
                                         static_cast<double>(xh[i]) * s2 / static_cast<double>(D)));
        }
      }
    }
    if (gn >= 0) {
      auto& gg = tp.grad_acc(gn);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t i = 0; i < D; ++i)
          gg[static_cast<size_t>(i)] += go[static_cast<size_t>(r * D + i)] * (*xhat)[static_cast<size_t>(r * D + i)];
    }
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      for (int64_t r = 0; r < R; ++r)
        for (int64_t i = 0; i < D; ++i) gb[static_cast<size_t>(i)] += go[static_cast<size_t>(r * D + i)];
    }
  });
  return out;
}

// group normalization on (N,C,H,W) with per-channel affine
template <typename T>
Tensor<T> groupnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int64_t groups,
                    double eps = 1e-5) {
  if (x.shape.size() != 4 || gamma.shape.size() != 1 || gamma.shape[0] != x.shape[1] || beta.shape != gamma.shape)
    throw Error(cat("groupnorm: shape mismatch ", shape_str(x.shape), " vs ", shape_str(gamma.shape)));
  int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
  if (groups < 1 || C % groups != 0)
    throw Error(cat("groupnorm: channels ", C, " not divisible by groups ", groups));
  detail::check_input("groupnorm", x);
  detail::check_input("groupnorm", gamma);
  detail::check_input("groupnorm", beta);
  Tape<T>* tape = detail::common_tape<T>("groupnorm", {&x, &gamma, &beta});
  int64_t Cg = C / groups, M = Cg * HW;
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(N * groups));
  const T *px = x.data(), *pg = gamma.data(), *pb = beta.data();
  T* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t g = 0; g < groups; ++g) {
      int64_t base = (n * C + g * Cg) * HW;
      double mu = 0;
      for (int64_t i = 0; i < M; ++i) mu += static_cast<double>(px[base + i]);
      mu /= static_cast<double>(M);
      double var = 0;
      for (int64_t i = 0; i < M; ++i) {
        double d = static_cast<double>(px[base + i]) - mu;
        var += d * d;
      }
      var /= static_cast<double>(M);
      double is = 1.0 / std::sqrt(var + eps);
      (*istd)[static_cast<size_t>(n * groups + g)] = static_cast<T>(is);
      for (int64_t c = 0; c < Cg; ++c) {
        T gm = pg[g * Cg + c], bt = pb[g * Cg + c];
        for (int64_t i = 0; i < HW; ++i) {
          int64_t k = base + c * HW + i;
          T xh = static_cast<T>((static_cast<double>(px[k]) - mu) * is);
          (*xhat)[static_cast<size_t>(k)] = xh;
          po[k] = xh * gm + bt;
        }
      }
    }
  int xn = x.node, gn = gamma.node, bn = beta.node;
  auto vg = gamma.values;
  detail::attach<T>("groupnorm", out, tape,
                    [xn, gn, bn, xhat, istd, vg, N, C, HW, groups, Cg, M](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (xn >= 0) {
      auto& gx = tp.grad_acc(xn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
          int64_t base = (n * C + g * Cg) * HW;
          double s1 = 0, s2 = 0;
          for (int64_t c = 0; c < Cg; ++c) {
            double gm = static_cast<double>((*vg)[static_cast<size_t>(g * Cg + c)]);
            for (int64_t i = 0; i < HW; ++i) {
              int64_t k = base + c * HW + i;
              double dxh = static_cast<double>(go[static_cast<size_t>(k)]) * gm;
              s1 += dxh;
              s2 += dxh * static_cast<double>((*xhat)[static_cast<size_t>(k)]);
            }
          }
          double is = static_cast<double>((*istd)[static_cast<size_t>(n * groups + g)]);
          for (int64_t c = 0; c < Cg; ++c) {
            double gm = static_cast<double>((*vg)[static_cast<size_t>(g * Cg + c)]);
            for (int64_t i = 0; i < HW; ++i) {
              int64_t k = base + c * HW + i;
              double dxh = static_cast<double>(go[static_cast<size_t>(k)]) * gm;
              gx[static_cast<size_t>(k)] += static_cast<T>(
                  is * (dxh - s1 / static_cast<double>(M) -
                        static_cast<double>((*xhat)[static_cast<size_t>(k)]) * s2 / static_cast<double>(M)));
            }
          }
        }
    }
    if (gn >= 0) {
      auto& gg = tp.grad_acc(gn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          int64_t base = (n * C + c) * HW;
          T acc = T(0);
          for (int64_t i = 0; i < HW; ++i)
            acc += go[static_cast<size_t>(base + i)] * (*xhat)[static_cast<size_t>(base + i)];
          gg[static_cast<size_t>(c)] += acc;
        }
    }
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          int64_t base = (n * C + c) * HW;
          T acc = T(0);
          for (int64_t i = 0; i < HW; ++i) acc += go[static_cast<size_t>(base + i)];
          gb[static_cast<size_t>(c)] += acc;
        }
    }
  });
  return out;
}

// batch normalization (training mode, batch statistics) on (N,C,H,W) or (N,C).
// Batch mean/var per channel are written to *out_mean / *out_var when given.
template <typename T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-5,
                          std::vector<double>* out_mean = nullptr, std::vector<double>* out_var = nullptr) {
  int rank = static_cast<int>(x.shape.size());
  if ((rank != 2 && rank != 4) || gamma.shape.size() != 1 || gamma.shape[0] != x.shape[1] ||
      beta.shape != gamma.shape)
    throw Error(cat("batchnorm: shape mismatch ", shape_str(x.shape), " vs ", shape_str(gamma.shape)));
  detail::check_input("batchnorm", x);
  detail::check_input("batchnorm", gamma);
  detail::check_input("batchnorm", beta);
  Tape<T>* tape = detail::common_tape<T>("batchnorm", {&x, &gamma, &beta});
  int64_t N = x.shape[0], C = x.shape[1];
  int64_t HW = rank == 4 ? x.shape[2] * x.shape[3] : 1;
  int64_t M = N * HW;
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
  auto istd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  if (out_mean) out_mean->assign(static_cast<size_t>(C), 0.0);
  if (out_var) out_var->assign(static_cast<size_t>(C), 0.0);
  const T *px = x.data(), *pg = gamma.data(), *pb = beta.data();
  T* po = out.data();
  for (int64_t c = 0; c < C; ++c) {
    double mu = 0;
    for (int64_t n = 0; n < N; ++n) {
      int64_t base = (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) mu += static_cast<double>(px[base + i]);
    }
    mu /= static_cast<double>(M);
    double var = 0;
    for (int64_t n = 0; n < N; ++n) {
      int64_t base = (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        double d = static_cast<double>(px[base + i]) - mu;
        var += d * d;
      }
    }
    var /= static_cast<double>(M);
    double is = 1.0 / std::sqrt(var + eps);
    (*istd)[static_cast<size_t>(c)] = static_cast<T>(is);
    if (out_mean) (*out_mean)[static_cast<size_t>(c)] = mu;
    if (out_var) (*out_var)[static_cast<size_t>(c)] = var;
    for (int64_t n = 0; n < N; ++n) {
      int64_t base = (n * C + c) * HW;
      for (int64_t i = 0; i < HW; ++i) {
        T xh = static_cast<T>((static_cast<double>(px[base + i]) - mu) * is);
        (*xhat)[static_cast<size_t>(base + i)] = xh;
        po[base + i] = xh * pg[c] + pb[c];
      }
    }
  }
  int xn = x.node, gn = gamma.node, bn = beta.node;
  auto vg = gamma.values;
  detail::attach<T>("batchnorm", out, tape, [xn, gn, bn, xhat, istd, vg, N, C, HW, M](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (xn >= 0) {
      auto& gx = tp.grad_acc(xn);
      for (int64_t c = 0; c < C; ++c) {
        double gm = static_cast<double>((*vg)[static_cast<size_t>(c)]);
        double s1 = 0, s2 = 0;
        for (int64_t n = 0; n < N; ++n) {
          int64_t base = (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            double dxh = static_cast<double>(go[static_cast<size_t>(base + i)]) * gm;
            s1 += dxh;
            s2 += dxh * static_cast<double>((*xhat)[static_cast<size_t>(base + i)]);
          }
        }
        double is = static_cast<double>((*istd)[static_cast<size_t>(c)]);
        for (int64_t n = 0; n < N; ++n) {
          int64_t base = (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            double dxh = static_cast<double>(go[static_cast<size_t>(base + i)]) * gm;
            gx[static_cast<size_t>(base + i)] += static_cast<T>(
                is * (dxh - s1 / static_cast<double>(M) -
                      static_cast<double>((*xhat)[static_cast<size_t>(base + i)]) * s2 / static_cast<double>(M)));
          }
        }
      }
    }
    if (gn >= 0) {
      auto& gg = tp.grad_acc(gn);
      for (int64_t c = 0; c < C; ++c) {
        T acc = T(0);
        for (int64_t n = 0; n < N; ++n) {
          int64_t base = (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i)
            acc += go[static_cast<size_t>(base + i)] * (*xhat)[static_cast<size_t>(base + i)];
        }
        gg[static_cast<size_t>(c)] += acc;
      }
    }
    if (bn >= 0) {
      auto& gb = tp.grad_acc(bn);
      for (int64_t c = 0; c < C; ++c) {
        T acc = T(0);
        for (int64_t n = 0; n < N; ++n) {
          int64_t base = (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) acc += go[static_cast<size_t>(base + i)];
        }
        gb[static_cast<size_t>(c)] += acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// convolution

namespace detail {

// col is (Cin*kh*kw) x (OH*OW), row-major
template <typename T>
void im2col(const T* x, int64_t Cin, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
            int64_t OH, int64_t OW, T* col) {
  int64_t P = OH * OW;
  for (int64_t c = 0; c < Cin; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* dst = col + ((c * kh + ki) * kw + kj) * P;
        for (int64_t oi = 0; oi < OH; ++oi) {
          int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= H) {
            std::fill(dst + oi * OW, dst + (oi + 1) * OW, T(0));
            continue;
          }
          const T* src = x + (c * H + ii) * W;
          for (int64_t oj = 0; oj < OW; ++oj) {
            int64_t ij = oj * stride - pad + kj;
            dst[oi * OW + oj] = (ij >= 0 && ij < W) ? src[ij] : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const T* col, int64_t Cin, int64_t H, int64_t W, int64_t kh, int64_t kw, int64_t stride,
                int64_t pad, int64_t OH, int64_t OW, T* x) {
  int64_t P = OH * OW;
  for (int64_t c = 0; c < Cin; ++c)
    for (int64_t ki = 0; ki < kh; ++ki)
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* src = col + ((c * kh + ki) * kw + kj) * P;
        for (int64_t oi = 0; oi < OH; ++oi) {
          int64_t ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= H) continue;
          T* dst = x + (c * H + ii) * W;
          for (int64_t oj = 0; oj < OW; ++oj) {
            int64_t ij = oj * stride - pad + kj;
            if (ij >= 0 && ij < W) dst[ij] += src[oi * OW + oj];
          }
        }
      }
}

}  // namespace detail

// x:(N,Cin,H,W)  w:(Cout,Cin,kh,kw)  bias:(Cout) or empty
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride, int64_t pad) {
  if (x.shape.size() != 4 || w.shape.size() != 4 || x.shape[1] != w.shape[1])
    throw Error(cat("conv2d: input ", shape_str(x.shape), " incompatible with kernel ", shape_str(w.shape)));
  if (stride < 1 || pad < 0) throw Error(cat("conv2d: bad stride/pad ", stride, "/", pad));
  int64_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
  int64_t Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  int64_t OH = (H + 2 * pad - kh) / stride + 1;
  int64_t OW = (W + 2 * pad - kw) / stride + 1;
  if (H + 2 * pad < kh || W + 2 * pad < kw || OH < 1 || OW < 1)
    throw Error(cat("conv2d: kernel ", shape_str(w.shape), " too large for input ", shape_str(x.shape)));
  bool has_bias = bias.size() > 0;
  if (has_bias && (bias.shape.size() != 1 || bias.shape[0] != Cout))
    throw Error(cat("conv2d: bias ", shape_str(bias.shape), " incompatible with kernel ", shape_str(w.shape)));
  detail::check_input("conv2d", x);
  detail::check_input("conv2d", w);
  if (has_bias) detail::check_input("conv2d", bias);
  Tape<T>* tape = detail::common_tape<T>("conv2d", {&x, &w, &bias});

  int64_t CK = Cin * kh * kw, P = OH * OW;
  Tensor<T> out = Tensor<T>::zeros({N, Cout, OH, OW});
  std::vector<T> col(static_cast<size_t>(CK * P));
  for (int64_t n = 0; n < N; ++n) {
    detail::im2col(x.data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, OH, OW, col.data());
    CMapRM<T> wm(w.data(), Cout, CK);
    CMapRM<T> cm(col.data(), CK, P);
    MapRM<T> om(out.data() + n * Cout * P, Cout, P);
    om.noalias() = wm * cm;
    if (has_bias) {
      const T* pb = bias.data();
      T* po = out.data() + n * Cout * P;
      for (int64_t c = 0; c < Cout; ++c)
        for (int64_t i = 0; i < P; ++i) po[c * P + i] += pb[c];
    }
  }
  int xn = x.node, wn = w.node, bn = has_bias ? bias.node : -1;
  auto vx = x.values, vw = w.values;
  detail::attach<T>("conv2d", out, tape,
                    [xn, wn, bn, vx, vw, N, Cin, H, W, Cout, kh, kw, stride, pad, OH, OW, CK, P](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    std::vector<T> col(static_cast<size_t>(CK * P));
    std::vector<T> dcol(static_cast<size_t>(CK * P));
    for (int64_t n = 0; n < N; ++n) {
      CMapRM<T> gom(go.data() + n * Cout * P, Cout, P);
      if (wn >= 0 || xn >= 0) {
        if (wn >= 0) {
          detail::im2col(vx->data() + n * Cin * H * W, Cin, H, W, kh, kw, stride, pad, OH, OW, col.data());
          auto& gw = tp.grad_acc(wn);
          CMapRM<T> cm(col.data(), CK, P);
          MapRM<T> gwm(gw.data(), Cout, CK);
          gwm.noalias() += gom * cm.transpose();
        }
        if (xn >= 0) {
          CMapRM<T> wm(vw->data(), Cout, CK);
          MapRM<T> dcm(dcol.data(), CK, P);
          dcm.noalias() = wm.transpose() * gom;
          auto& gx = tp.grad_acc(xn);
          detail::col2im_acc(dcol.data(), Cin, H, W, kh, kw, stride, pad, OH, OW, gx.data() + n * Cin * H * W);
        }
      }
      if (bn >= 0) {
        auto& gb = tp.grad_acc(bn);
        for (int64_t c = 0; c < Cout; ++c) {
          T acc = T(0);
          for (int64_t i = 0; i < P; ++i) acc += go[static_cast<size_t>((n * Cout + c) * P + i)];
          gb[static_cast<size_t>(c)] += acc;
        }
      }
    }
  });
  return out;
}

// transposed convolution; x:(N,Cin,H,W)  w:(Cin,Cout,kh,kw)  out:(N,Cout,OH,OW)
// OH = (H-1)*stride - 2*pad + kh + out_pad
template <typename T>
Tensor<T> tconv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int64_t stride, int64_t pad,
                  int64_t out_pad = 0) {
  if (x.shape.size() != 4 || w.shape.size() != 4 || x.shape[1] != w.shape[0])
    throw Error(cat("tconv2d: input ", shape_str(x.shape), " incompatible with kernel ", shape_str(w.shape)));
  if (stride < 1 || pad < 0 || out_pad < 0 || out_pad >= stride)
    throw Error(cat("tconv2d: bad stride/pad/out_pad ", stride, "/", pad, "/", out_pad));
  int64_t N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
  int64_t Cout = w.shape[1], kh = w.shape[2], kw = w.shape[3];
  int64_t OH = (H - 1) * stride - 2 * pad + kh + out_pad;
  int64_t OW = (W - 1) * stride - 2 * pad + kw + out_pad;
  if (OH < 1 || OW < 1) throw Error(cat("tconv2d: empty output for input ", shape_str(x.shape)));
  bool has_bias = bias.size() > 0;
  if (has_bias && (bias.shape.size() != 1 || bias.shape[0] != Cout))
    throw Error(cat("tconv2d: bias ", shape_str(bias.shape), " incompatible with kernel ", shape_str(w.shape)));
  detail::check_input("tconv2d", x);
  detail::check_input("tconv2d", w);
  if (has_bias) detail::check_input("tconv2d", bias);
  Tape<T>* tape = detail::common_tape<T>("tconv2d", {&x, &w, &bias});

  int64_t CK = Cout * kh * kw, Pin = H * W;
  Tensor<T> out = Tensor<T>::zeros({N, Cout, OH, OW});
  std::vector<T> tmp(static_cast<size_t>(CK * Pin));
  for (int64_t n = 0; n < N; ++n) {
    CMapRM<T> wm(w.data(), Cin, CK);
    CMapRM<T> xm(x.data() + n * Cin * Pin, Cin, Pin);
    MapRM<T> tm(tmp.data(), CK, Pin);
    tm.noalias() = wm.transpose() * xm;
    // scatter into the (larger) output image: adjoint of im2col on out
    detail::col2im_acc(tmp.data(), Cout, OH, OW, kh, kw, stride, pad, H, W, out.data() + n * Cout * OH * OW);
    if (has_bias) {
      const T* pb = bias.data();
      T* po = out.data() + n * Cout * OH * OW;
      for (int64_t c = 0; c < Cout; ++c)
        for (int64_t i = 0; i < OH * OW; ++i) po[c * OH * OW + i] += pb[c];
    }
  }
  int xn = x.node, wn = w.node, bn = has_bias ? bias.node : -1;
  auto vx = x.values, vw = w.values;
  detail::attach<T>("tconv2d", out, tape,
                    [xn, wn, bn, vx, vw, N, Cin, H, W, Cout, kh, kw, stride, pad, OH, OW, CK, Pin](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    std::vector<T> gcol(static_cast<size_t>(CK * Pin));
    for (int64_t n = 0; n < N; ++n) {
      // gather patches of dOut back onto the input grid
      detail::im2col(go.data() + n * Cout * OH * OW, Cout, OH, OW, kh, kw, stride, pad, H, W, gcol.data());
      CMapRM<T> gcm(gcol.data(), CK, Pin);
      if (xn >= 0) {
        auto& gx = tp.grad_acc(xn);
        CMapRM<T> wm(vw->data(), Cin, CK);
        MapRM<T> gxm(gx.data() + n * Cin * Pin, Cin, Pin);
        gxm.noalias() += wm * gcm;
      }
      if (wn >= 0) {
        auto& gw = tp.grad_acc(wn);
        CMapRM<T> xm(vx->data() + n * Cin * Pin, Cin, Pin);
        MapRM<T> gwm(gw.data(), Cin, CK);
        gwm.noalias() += xm * gcm.transpose();
      }
      if (bn >= 0) {
        auto& gb = tp.grad_acc(bn);
        for (int64_t c = 0; c < Cout; ++c) {
          T acc = T(0);
          for (int64_t i = 0; i < OH * OW; ++i) acc += go[static_cast<size_t>((n * Cout + c) * OH * OW + i)];
          gb[static_cast<size_t>(c)] += acc;
        }
      }
    }
  });
  return out;
}

// circular convolution: taps (m) against signal (d), m <= d; out_i = sum_k taps_k * sig_{(i-k) mod d}
template <typename T>
Tensor<T> circconv(const Tensor<T>& taps, const Tensor<T>& sig) {
  if (taps.shape.size() != 1 || sig.shape.size() != 1 || taps.shape[0] > sig.shape[0])
    throw Error(cat("circconv: taps ", shape_str(taps.shape), " incompatible with signal ", shape_str(sig.shape)));
  detail::check_input("circconv", taps);
  detail::check_input("circconv", sig);
  Tape<T>* tape = detail::common_tape<T>("circconv", {&taps, &sig});
  int64_t m = taps.shape[0], d = sig.shape[0];
  Tensor<T> out = Tensor<T>::zeros({d});
  const T *ph = taps.data(), *pz = sig.data();
  T* po = out.data();
  for (int64_t k = 0; k < m; ++k) {
    T hk = ph[k];
    if (hk == T(0)) continue;
    for (int64_t i = 0; i < d; ++i) po[i] += hk * pz[(i - k + d) % d];
  }
  int hn = taps.node, zn = sig.node;
  auto vh = taps.values, vz = sig.values;
  detail::attach<T>("circconv", out, tape, [hn, zn, vh, vz, m, d](Tape<T>& tp, int self) {
    const auto& go = tp.grad_out(self);
    if (hn >= 0) {
      auto& gh = tp.grad_acc(hn);
      for (int64_t k = 0; k < m; ++k) {
        T acc = T(0);
        for (int64_t i = 0; i < d; ++i) acc += go[static_cast<size_t>(i)] * (*vz)[static_cast<size_t>((i - k + d) % d)];
        gh[static_cast<size_t>(k)] += acc;
      }
    }
    if (zn >= 0) {
      auto& gz = tp.grad_acc(zn);
      for (int64_t k = 0; k < m; ++k) {
        T hk = (*vh)[static_cast<size_t>(k)];
        if (hk == T(0)) continue;
        for (int64_t i = 0; i < d; ++i) gz[static_cast<size_t>((i - k + d) % d)] += hk * go[static_cast<size_t>(i)];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// optimizer

template <typename T>
struct SgdState {
  double lr = 1e-3;       // default initial learning rate
  double momentum = 0.0;  // in [0,1)
  std::unordered_map<const void*, std::vector<T>> velocity;

  void validate() const {
    if (!(lr > 0)) throw Error(cat("sgd: learning rate must be > 0, got ", lr));
    if (momentum < 0 || momentum >= 1) throw Error(cat("sgd: momentum must be in [0,1), got ", momentum));
  }
};

template <typename T>
void sgd_step(const std::vector<Tensor<T>*>& params, SgdState<T>& state) {
  state.validate();
  for (Tensor<T>* p : params) {
    if (!p->grad || p->grad->size() != p->values->size())
      throw Error(cat("sgd: missing gradient for parameter of shape ", shape_str(p->shape)));
    auto& g = *p->grad;
    auto& v = *p->values;
    if (state.momentum > 0) {
      auto& vel = state.velocity[p->values.get()];
      if (vel.size() != v.size()) vel.assign(v.size(), T(0));
      T mu = static_cast<T>(state.momentum);
      T lr = static_cast<T>(state.lr);
      for (size_t i = 0; i < v.size(); ++i) {
        vel[i] = mu * vel[i] + g[i];
        v[i] -= lr * vel[i];
      }
    } else {
      T lr = static_cast<T>(state.lr);
      for (size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    }
  }
}

// ---------------------------------------------------------------------------
// gradient verification (f64 only; central differences, step 1e-5)

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
};

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>& fn, const Tensor<T>& point,
                           double tol, double fd_step = 1e-5) {
  static_assert(std::is_same_v<T, double>, "grad_check requires f64; finite differences are unreliable in f32");
  Tensor<T> x = point.clone();
  {
    Tape<T> tape;
    Tensor<T> xv = tape.var(x);
    Tensor<T> loss = fn(tape, xv);
    if (loss.size() != 1) throw Error("grad_check: fn must be scalar-valued");
    tape.backward(loss);
  }
  std::vector<T> analytic = *x.grad;

  auto eval = [&](Tensor<T>& p) -> double {
    Tape<T> tape;
    Tensor<T> pv = tape.var(p);
    Tensor<T> loss = fn(tape, pv);
    double v = static_cast<double>(loss.item());
    if (!std::isfinite(v)) throw NumericError("grad_check: fn non-finite at perturbation");
    return v;
  };

  GradCheckReport rep;
  Tensor<T> probe = point.clone();
  for (int64_t i = 0; i < probe.size(); ++i) {
    T saved = probe.data()[i];
    probe.data()[i] = saved + static_cast<T>(fd_step);
    double fp = eval(probe);
    probe.data()[i] = saved - static_cast<T>(fd_step);
    double fm = eval(probe);
    probe.data()[i] = saved;
    double fd = (fp - fm) / (2 * fd_step);
    double an = static_cast<double>(analytic[static_cast<size_t>(i)]);
    double denom = std::max(std::abs(an), std::abs(fd)) + 1e-6;
    rep.max_rel_err = std::max(rep.max_rel_err, std::abs(an - fd) / denom);
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

// ---------------------------------------------------------------------------
// host-side helpers (no tape)

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a.at(i)) * static_cast<double>(b.at(i));
  return acc;
}

template <typename T>
double norm(const Tensor<T>& a) {
  double acc = 0;
  for (int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a.at(i)) * static_cast<double>(a.at(i));
  return std::sqrt(acc);
}

}  // namespace sdgc::ad
