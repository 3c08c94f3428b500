#pragma once

// Dense row-major tensors with a tape for reverse-mode differentiation.
// The op vocabulary is fixed: exactly what the segmentation model and its
// losses need, each with a hand-written backward. Templated on the scalar
// so training runs in float and gradient checks run in double.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "evseg/common.hpp"

namespace evseg {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ")";
  return os.str();
}

template <class S>
class Tape;

template <class S>
class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<S>>()) {}

  Tensor(Shape shape, std::shared_ptr<std::vector<S>> data, Tape<S>* tape, int node)
      : shape_(std::move(shape)), data_(std::move(data)), tape_(tape), node_(node) {}

  static Tensor zeros(Shape shape) {
    auto d = std::make_shared<std::vector<S>>(numel(shape), S(0));
    return Tensor(std::move(shape), std::move(d), nullptr, -1);
  }
  static Tensor full(Shape shape, S v) {
    auto d = std::make_shared<std::vector<S>>(numel(shape), v);
    return Tensor(std::move(shape), std::move(d), nullptr, -1);
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), S(1)); }
  static Tensor scalar(S v) { return full({}, v); }
  static Tensor from_vector(Shape shape, std::vector<S> values) {
    if (values.size() != numel(shape))
      throw ValidationError("tensor: data length does not match shape " + shape_str(shape));
    auto d = std::make_shared<std::vector<S>>(std::move(values));
    return Tensor(std::move(shape), std::move(d), nullptr, -1);
  }
  static Tensor rand_uniform(Rng& rng, Shape shape, S lo, S hi) {
    auto d = std::make_shared<std::vector<S>>(numel(shape));
    for (auto& v : *d) v = static_cast<S>(rng.uniform(lo, hi));
    return Tensor(std::move(shape), std::move(d), nullptr, -1);
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }
  const std::shared_ptr<std::vector<S>>& storage() const { return data_; }

  S value() const {
    if (size() != 1) throw ValidationError("tensor: value() on non-scalar " + shape_str(shape_));
    return (*data_)[0];
  }

  bool on_tape() const { return tape_ != nullptr; }
  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }

  // Detached copy of the values (never on a tape).
  Tensor detach() const {
    auto d = std::make_shared<std::vector<S>>(*data_);
    return Tensor(shape_, std::move(d), nullptr, -1);
  }

  template <class T>
  Tensor<T> cast() const {
    auto d = std::make_shared<std::vector<T>>(size());
    for (std::size_t i = 0; i < size(); ++i) (*d)[i] = static_cast<T>((*data_)[i]);
    return Tensor<T>(shape_, std::move(d), nullptr, -1);
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<S>> data_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

template <class S>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, int)>;

  int add_node(Shape shape, BackFn back) {
    nodes_.push_back(Node{std::move(shape), {}, std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  // Gradient buffer for a node, allocated (zeroed) on first touch.
  std::vector<S>& grad_buf(int id) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) n.grad.assign(numel(n.shape), S(0));
    return n.grad;
  }

  bool grad_touched(int id) const { return !nodes_.at(static_cast<std::size_t>(id)).grad.empty(); }

  const std::vector<S>& grad_at(int id) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) throw ValidationError("tape: gradient read before backward");
    return n.grad;
  }

  // Registers a leaf. The returned tensor shares storage with `t`.
  Tensor<S> watch(const Tensor<S>& t) {
    if (t.on_tape()) throw ValidationError("tape: watch() of a tensor already on a tape");
    int id = add_node(t.shape(), BackFn{});
    return Tensor<S>(t.shape(), t.storage(), this, id);
  }

  void backward(const Tensor<S>& loss) {
    if (loss.tape() != this) throw ValidationError("tape: backward() on a foreign tensor");
    if (loss.size() != 1) throw ValidationError("tape: backward() needs a scalar loss");
    grad_buf(loss.node())[0] = S(1);
    const bool check = finite_checks_enabled();
    for (int id = loss.node(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.grad.empty()) continue;
      if (check) {
        for (S g : n.grad)
          if (!std::isfinite(static_cast<double>(g)))
            throw ValidationError("tape: non-finite gradient at node " + std::to_string(id));
      }
      if (n.back) n.back(*this, id);
    }
  }

  // Gradient of a watched/derived tensor; zeros if backward never reached it.
  std::vector<S> grad(const Tensor<S>& t) const {
    if (t.tape() != this) throw ValidationError("tape: grad() on a foreign tensor");
    const Node& n = nodes_.at(static_cast<std::size_t>(t.node()));
    if (n.grad.empty()) return std::vector<S>(numel(n.shape), S(0));
    return n.grad;
  }

 private:
  struct Node {
    Shape shape;
    std::vector<S> grad;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <class S>
void check_finite(const Tensor<S>& t, const char* op) {
  if (!finite_checks_enabled()) return;
  const S* d = t.data();
  for (std::size_t i = 0; i < t.size(); ++i)
    if (!std::isfinite(static_cast<double>(d[i])))
      throw ValidationError(std::string("non-finite value in op '") + op + "'");
}

template <class S>
Tape<S>* join_tapes(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.on_tape() && b.on_tape() && a.tape() != b.tape())
    throw ValidationError("tensor op: inputs live on different tapes");
  return a.on_tape() ? a.tape() : b.tape();
}

// Trailing-singleton broadcast: returns the step size ("inner") such that
// element i of the full tensor maps to element i/inner of the small one.
// Zero means the shapes are not compatible.
inline std::size_t broadcast_inner(const Shape& full, const Shape& small) {
  if (numel(small) == 1) return std::max<std::size_t>(numel(full), 1);
  if (full.size() != small.size()) return 0;
  std::size_t k = full.size();
  while (k > 0 && small[k - 1] == 1 && full[k - 1] != small[k - 1]) --k;
  std::size_t inner = 1;
  for (std::size_t i = k; i < full.size(); ++i) {
    if (small[i] != 1) return 0;
    inner *= full[i];
  }
  for (std::size_t i = 0; i < k; ++i)
    if (full[i] != small[i]) return 0;
  return inner;
}

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<MatRM<S>>;
template <class S>
using MapCM = Eigen::Map<const MatRM<S>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with trailing-singleton broadcast.

namespace detail {

// fwd(av, bv) and the two partials dfa(av, bv), dfb(av, bv).
template <class S, class F, class Da, class Db>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b, const char* name, F fwd, Da dfa, Db dfb) {
  const Tensor<S>*big = &a, *small = &b;
  bool b_is_small = true;
  std::size_t inner = broadcast_inner(a.shape(), b.shape());
  if (inner == 0) {
    inner = broadcast_inner(b.shape(), a.shape());
    if (inner == 0)
      throw ValidationError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
    big = &b;
    small = &a;
    b_is_small = false;
  }
  const std::size_t n = big->size();
  auto out = std::make_shared<std::vector<S>>(n);
  {
    const S* bigd = big->data();
    const S* smd = small->data();
    for (std::size_t i = 0; i < n; ++i) {
      const S x = b_is_small ? bigd[i] : smd[i / inner];
      const S y = b_is_small ? smd[i / inner] : bigd[i];
      (*out)[i] = fwd(x, y);
    }
  }
  Tensor<S> r(big->shape(), out, nullptr, -1);
  if (Tape<S>* tp = join_tapes(a, b)) {
    const int pa = a.on_tape() ? a.node() : -1;
    const int pb = b.on_tape() ? b.node() : -1;
    auto ad = a.storage();
    auto bd = b.storage();
    int id = tp->add_node(big->shape(), [pa, pb, ad, bd, inner, b_is_small, dfa, dfb](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      const std::size_t n2 = g.size();
      auto aval = [&](std::size_t i) { return b_is_small ? (*ad)[i] : (*ad)[i / inner]; };
      auto bval = [&](std::size_t i) { return b_is_small ? (*bd)[i / inner] : (*bd)[i]; };
      if (pa >= 0) {
        auto& ga = t.grad_buf(pa);
        if (ga.size() == n2) {
          for (std::size_t i = 0; i < n2; ++i) ga[i] += g[i] * dfa(aval(i), bval(i));
        } else {
          for (std::size_t i = 0; i < n2; ++i) ga[i / inner] += g[i] * dfa(aval(i), bval(i));
        }
      }
      if (pb >= 0) {
        auto& gb = t.grad_buf(pb);
        if (gb.size() == n2) {
          for (std::size_t i = 0; i < n2; ++i) gb[i] += g[i] * dfb(aval(i), bval(i));
        } else {
          for (std::size_t i = 0; i < n2; ++i) gb[i / inner] += g[i] * dfb(aval(i), bval(i));
        }
      }
    });
    r = Tensor<S>(big->shape(), out, tp, id);
  }
  check_finite(r, name);
  return r;
}

}  // namespace detail

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "add", [](S x, S y) { return x + y; }, [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "sub", [](S x, S y) { return x - y; }, [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "mul", [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      a, b, "div", [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); });
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.

namespace detail {

template <class S, class F, class D>
Tensor<S> unary_op(const Tensor<S>& x, const char* name, F fwd, D dfx) {
  const std::size_t n = x.size();
  auto out = std::make_shared<std::vector<S>>(n);
  const S* xd = x.data();
  for (std::size_t i = 0; i < n; ++i) (*out)[i] = fwd(xd[i]);
  Tensor<S> r(x.shape(), out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    auto xs = x.storage();
    auto os = out;
    int id = tp->add_node(x.shape(), [px, xs, os, dfx](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfx((*xs)[i], (*os)[i]);
    });
    r = Tensor<S>(x.shape(), os, tp, id);
  }
  check_finite(r, name);
  return r;
}

}  // namespace detail

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return detail::unary_op(
      x, "scale", [c](S v) { return c * v; }, [c](S, S) { return c; });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary_op(
      x, "add_scalar", [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <class S>
Tensor<S> neg(const Tensor<S>& x) { return scale(x, S(-1)); }

template <class S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::unary_op(
      x, "exp", [](S v) { return std::exp(v); }, [](S, S o) { return o; });
}

template <class S>
Tensor<S> log(const Tensor<S>& x) {
  const S* d = x.data();
  for (std::size_t i = 0; i < x.size(); ++i)
    if (d[i] <= S(0)) throw ValidationError("log: non-positive input");
  return detail::unary_op(
      x, "log", [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

// Elementwise x^p for a fixed exponent. Fractional p requires x >= 0.
template <class S>
Tensor<S> power(const Tensor<S>& x, S p) {
  if (p != std::floor(p)) {
    const S* d = x.data();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (d[i] < S(0)) throw ValidationError("power: negative base with fractional exponent");
  }
  return detail::unary_op(
      x, "power", [p](S v) { return std::pow(v, p); },
      [p](S v, S) { return p * std::pow(v, p - S(1)); });
}

template <class S>
Tensor<S> absval(const Tensor<S>& x) {
  return detail::unary_op(
      x, "abs", [](S v) { return std::abs(v); },
      [](S v, S) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op(
      x, "relu", [](S v) { return v > S(0) ? v : S(0); }, [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op(
      x, "sigmoid",
      [](S v) {
        if (v >= S(0)) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S o) { return o * (S(1) - o); });
}

// Gradient passes through where lo <= x <= hi.
template <class S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  return detail::unary_op(
      x, "clamp", [lo, hi](S v) { return std::clamp(v, lo, hi); },
      [lo, hi](S v, S) { return (v >= lo && v <= hi) ? S(1) : S(0); });
}

// ---------------------------------------------------------------------------
// Shape ops.

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size())
    throw ValidationError("reshape: size mismatch " + shape_str(x.shape()) + " -> " + shape_str(shape));
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    int id = tp->add_node(shape, [px](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return Tensor<S>(std::move(shape), x.storage(), tp, id);
  }
  return Tensor<S>(std::move(shape), x.storage(), nullptr, -1);
}

template <class S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() != 2) throw ValidationError("transpose: rank-2 tensor required");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto out = std::make_shared<std::vector<S>>(x.size());
  const S* xd = x.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) (*out)[j * m + i] = xd[i * n + j];
  Tensor<S> r({n, m}, out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    int id = tp->add_node({n, m}, [px, m, n](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < m; ++i) gx[i * n + j] += g[j * m + i];
    });
    r = Tensor<S>({n, m}, out, tp, id);
  }
  return r;
}

// Removes `axis` by selecting `index` along it.
template <class S>
Tensor<S> select(const Tensor<S>& x, std::size_t axis, std::size_t index) {
  if (axis >= x.rank()) throw ValidationError("select: axis out of range");
  if (index >= x.dim(axis)) throw ValidationError("select: index out of range");
  const auto& sh = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  const std::size_t n_axis = sh[axis];
  Shape oshape;
  for (std::size_t i = 0; i < sh.size(); ++i)
    if (i != axis) oshape.push_back(sh[i]);
  auto out = std::make_shared<std::vector<S>>(outer * inner);
  const S* xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) (*out)[o * inner + i] = xd[(o * n_axis + index) * inner + i];
  Tensor<S> r(oshape, out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    int id = tp->add_node(oshape, [px, outer, inner, n_axis, index](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * n_axis + index) * inner + i] += g[o * inner + i];
    });
    r = Tensor<S>(oshape, out, tp, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reductions.

namespace detail {

inline void axis_split(const Shape& sh, std::size_t axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
  outer = 1;
  inner = 1;
  n = sh.at(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
  for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
}

inline Shape drop_axis(const Shape& sh, std::size_t axis) {
  Shape r;
  for (std::size_t i = 0; i < sh.size(); ++i)
    if (i != axis) r.push_back(sh[i]);
  return r;
}

}  // namespace detail

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  S acc = 0;
  const S* xd = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += xd[i];
  auto out = std::make_shared<std::vector<S>>(1, acc);
  Tensor<S> r({}, out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    const std::size_t n = x.size();
    int id = tp->add_node({}, [px, n](Tape<S>& t, int self) {
      const S g = t.grad_at(self)[0];
      auto& gx = t.grad_buf(px);
      for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
    r = Tensor<S>({}, out, tp, id);
  }
  detail::check_finite(r, "sum");
  return r;
}

template <class S>
Tensor<S> sum(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ValidationError("sum: axis out of range");
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  Shape oshape = detail::drop_axis(x.shape(), axis);
  auto out = std::make_shared<std::vector<S>>(outer * inner, S(0));
  const S* xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) (*out)[o * inner + i] += xd[(o * n + k) * inner + i];
  Tensor<S> r(oshape, out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    int id = tp->add_node(oshape, [px, outer, n, inner](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += g[o * inner + i];
    });
    r = Tensor<S>(oshape, out, tp, id);
  }
  detail::check_finite(r, "sum");
  return r;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  if (x.size() == 0) throw ValidationError("mean: empty tensor");
  return scale(sum(x), S(1) / static_cast<S>(x.size()));
}

template <class S>
Tensor<S> mean(const Tensor<S>& x, std::size_t axis) {
  return scale(sum(x, axis), S(1) / static_cast<S>(x.dim(axis)));
}

template <class S>
Tensor<S> max(const Tensor<S>& x) {
  if (x.size() == 0) throw ValidationError("max: empty tensor");
  const S* xd = x.data();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (xd[i] > xd[arg]) arg = i;
  auto out = std::make_shared<std::vector<S>>(1, xd[arg]);
  Tensor<S> r({}, out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    int id = tp->add_node({}, [px, arg](Tape<S>& t, int self) {
      t.grad_buf(px)[arg] += t.grad_at(self)[0];
    });
    r = Tensor<S>({}, out, tp, id);
  }
  return r;
}

template <class S>
Tensor<S> max(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ValidationError("max: axis out of range");
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  Shape oshape = detail::drop_axis(x.shape(), axis);
  auto out = std::make_shared<std::vector<S>>(outer * inner);
  auto args = std::make_shared<std::vector<std::size_t>>(outer * inner);
  const S* xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = 0;
      S bv = xd[(o * n) * inner + i];
      for (std::size_t k = 1; k < n; ++k) {
        const S v = xd[(o * n + k) * inner + i];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      (*out)[o * inner + i] = bv;
      (*args)[o * inner + i] = best;
    }
  Tensor<S> r(oshape, out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    int id = tp->add_node(oshape, [px, args, outer, n, inner](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
          gx[(o * n + (*args)[o * inner + i]) * inner + i] += g[o * inner + i];
    });
    r = Tensor<S>(oshape, out, tp, id);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Linear algebra.

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ValidationError("matmul: shape mismatch " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = std::make_shared<std::vector<S>>(m * n);
  {
    detail::MapCM<S> A(a.data(), m, k), B(b.data(), k, n);
    detail::MapM<S> C(out->data(), m, n);
    C.noalias() = A * B;
  }
  Tensor<S> r({m, n}, out, nullptr, -1);
  if (Tape<S>* tp = detail::join_tapes(a, b)) {
    const int pa = a.on_tape() ? a.node() : -1;
    const int pb = b.on_tape() ? b.node() : -1;
    auto ad = a.storage();
    auto bd = b.storage();
    int id = tp->add_node({m, n}, [pa, pb, ad, bd, m, k, n](Tape<S>& t, int self) {
      detail::MapCM<S> G(t.grad_at(self).data(), m, n);
      detail::MapCM<S> A(ad->data(), m, k), B(bd->data(), k, n);
      if (pa >= 0) {
        detail::MapM<S> GA(t.grad_buf(pa).data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (pb >= 0) {
        detail::MapM<S> GB(t.grad_buf(pb).data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
    r = Tensor<S>({m, n}, out, tp, id);
  }
  detail::check_finite(r, "matmul");
  return r;
}

// ---------------------------------------------------------------------------
// Softmax (max-stabilized) along one axis.

template <class S>
Tensor<S> softmax(const Tensor<S>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ValidationError("softmax: axis out of range");
  std::size_t outer, n, inner;
  detail::axis_split(x.shape(), axis, outer, n, inner);
  auto out = std::make_shared<std::vector<S>>(x.size());
  const S* xd = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      S mx = xd[(o * n) * inner + i];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xd[(o * n + k) * inner + i]);
      S z = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const S e = std::exp(xd[(o * n + k) * inner + i] - mx);
        (*out)[(o * n + k) * inner + i] = e;
        z += e;
      }
      for (std::size_t k = 0; k < n; ++k) (*out)[(o * n + k) * inner + i] /= z;
    }
  Tensor<S> r(x.shape(), out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    auto ys = out;
    int id = tp->add_node(x.shape(), [px, ys, outer, n, inner](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          S dot = 0;
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t idx = (o * n + k) * inner + i;
            dot += g[idx] * (*ys)[idx];
          }
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t idx = (o * n + k) * inner + i;
            gx[idx] += (*ys)[idx] * (g[idx] - dot);
          }
        }
    });
    r = Tensor<S>(x.shape(), out, tp, id);
  }
  detail::check_finite(r, "softmax");
  return r;
}

// ---------------------------------------------------------------------------
// 3x3 convolution (cross-correlation), zero padding 1, stride 1 or 2.
// im2col + GEMM forward; col2im backward.

namespace detail {

template <class S>
void im2col_3x3(const S* x, std::size_t ic, std::size_t h, std::size_t w, std::size_t stride,
                std::size_t ho, std::size_t wo, S* col) {
  // col is (ic*9) x (ho*wo), row-major
  for (std::size_t c = 0; c < ic; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        S* row = col + ((c * 9 + ky * 3 + kx) * ho * wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
            row[oy * wo + ox] =
                (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 && ix < static_cast<std::ptrdiff_t>(w))
                    ? x[(c * h + iy) * w + ix]
                    : S(0);
          }
        }
      }
}

template <class S>
void col2im_3x3(const S* col, std::size_t ic, std::size_t h, std::size_t w, std::size_t stride,
                std::size_t ho, std::size_t wo, S* gx) {
  for (std::size_t c = 0; c < ic; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        const S* row = col + ((c * 9 + ky * 3 + kx) * ho * wo);
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - 1;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - 1;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            gx[(c * h + iy) * w + ix] += row[oy * wo + ox];
          }
        }
      }
}

}  // namespace detail

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& w, std::size_t stride) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3 || w.dim(1) != x.dim(0))
    throw ValidationError("conv2d: expected x(CxHxW), w(Ox" + std::to_string(x.rank() ? x.dim(0) : 0) +
                          "x3x3), got x" + shape_str(x.shape()) + " w" + shape_str(w.shape()));
  if (stride != 1 && stride != 2) throw ValidationError("conv2d: stride must be 1 or 2");
  const std::size_t ic = x.dim(0), h = x.dim(1), wd = x.dim(2), oc = w.dim(0);
  const std::size_t ho = (h + 2 - 3) / stride + 1;
  const std::size_t wo = (wd + 2 - 3) / stride + 1;
  auto col = std::make_shared<std::vector<S>>(ic * 9 * ho * wo);
  detail::im2col_3x3(x.data(), ic, h, wd, stride, ho, wo, col->data());
  auto out = std::make_shared<std::vector<S>>(oc * ho * wo);
  {
    detail::MapCM<S> W(w.data(), oc, ic * 9), C(col->data(), ic * 9, ho * wo);
    detail::MapM<S> O(out->data(), oc, ho * wo);
    O.noalias() = W * C;
  }
  Shape oshape{oc, ho, wo};
  Tensor<S> r(oshape, out, nullptr, -1);
  if (Tape<S>* tp = detail::join_tapes(x, w)) {
    const int px = x.on_tape() ? x.node() : -1;
    const int pw = w.on_tape() ? w.node() : -1;
    auto wd_ptr = w.storage();
    int id = tp->add_node(oshape, [px, pw, wd_ptr, col, ic, h, wd, oc, ho, wo, stride](Tape<S>& t, int self) {
      detail::MapCM<S> G(t.grad_at(self).data(), oc, ho * wo);
      if (pw >= 0) {
        detail::MapCM<S> C(col->data(), ic * 9, ho * wo);
        detail::MapM<S> GW(t.grad_buf(pw).data(), oc, ic * 9);
        GW.noalias() += G * C.transpose();
      }
      if (px >= 0) {
        std::vector<S> gcol(ic * 9 * ho * wo);
        detail::MapCM<S> W(wd_ptr->data(), oc, ic * 9);
        detail::MapM<S> GC(gcol.data(), ic * 9, ho * wo);
        GC.noalias() = W.transpose() * G;
        detail::col2im_3x3(gcol.data(), ic, h, wd, stride, ho, wo, t.grad_buf(px).data());
      }
    });
    r = Tensor<S>(oshape, out, tp, id);
  }
  detail::check_finite(r, "conv2d");
  return r;
}

// ---------------------------------------------------------------------------
// Bilinear sampling at absolute pixel coordinates, border-clamped.
// coords is 2 x Hc x Wc holding (x, y); output is C x Hc x Wc.

template <class S>
Tensor<S> bilinear_sample(const Tensor<S>& img, const Tensor<S>& coords) {
  if (img.rank() != 3 || coords.rank() != 3 || coords.dim(0) != 2)
    throw ValidationError("bilinear_sample: expected img(CxHxW), coords(2xHcxWc)");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const std::size_t hc = coords.dim(1), wc = coords.dim(2);
  const std::size_t np = hc * wc;
  auto out = std::make_shared<std::vector<S>>(C * np);
  const S* id_ = img.data();
  const S* cd = coords.data();
  auto sample_plan = [&](std::size_t p, std::size_t& x0, std::size_t& x1, std::size_t& y0, std::size_t& y1,
                         S& wx, S& wy, bool& in_x, bool& in_y) {
    const S fx = cd[p];
    const S fy = cd[np + p];
    in_x = fx > S(0) && fx < S(W - 1);
    in_y = fy > S(0) && fy < S(H - 1);
    const S cx = std::clamp(fx, S(0), S(W - 1));
    const S cy = std::clamp(fy, S(0), S(H - 1));
    const S fx0 = std::floor(cx), fy0 = std::floor(cy);
    x0 = static_cast<std::size_t>(fx0);
    y0 = static_cast<std::size_t>(fy0);
    x1 = std::min(x0 + 1, W - 1);
    y1 = std::min(y0 + 1, H - 1);
    wx = cx - fx0;
    wy = cy - fy0;
  };
  for (std::size_t p = 0; p < np; ++p) {
    std::size_t x0, x1, y0, y1;
    S wx, wy;
    bool in_x, in_y;
    sample_plan(p, x0, x1, y0, y1, wx, wy, in_x, in_y);
    for (std::size_t c = 0; c < C; ++c) {
      const S* plane = id_ + c * H * W;
      (*out)[c * np + p] = (S(1) - wy) * ((S(1) - wx) * plane[y0 * W + x0] + wx * plane[y0 * W + x1]) +
                           wy * ((S(1) - wx) * plane[y1 * W + x0] + wx * plane[y1 * W + x1]);
    }
  }
  Shape oshape{C, hc, wc};
  Tensor<S> r(oshape, out, nullptr, -1);
  if (Tape<S>* tp = detail::join_tapes(img, coords)) {
    const int pi = img.on_tape() ? img.node() : -1;
    const int pc = coords.on_tape() ? coords.node() : -1;
    auto is = img.storage();
    auto cs = coords.storage();
    int id = tp->add_node(oshape, [pi, pc, is, cs, C, H, W, np](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      const S* idp = is->data();
      const S* cdp = cs->data();
      std::vector<S>* gi = pi >= 0 ? &t.grad_buf(pi) : nullptr;
      std::vector<S>* gc = pc >= 0 ? &t.grad_buf(pc) : nullptr;
      for (std::size_t p = 0; p < np; ++p) {
        const S fx = cdp[p];
        const S fy = cdp[np + p];
        const bool in_x = fx > S(0) && fx < S(W - 1);
        const bool in_y = fy > S(0) && fy < S(H - 1);
        const S cx = std::clamp(fx, S(0), S(W - 1));
        const S cy = std::clamp(fy, S(0), S(H - 1));
        const S fx0 = std::floor(cx), fy0 = std::floor(cy);
        const std::size_t x0 = static_cast<std::size_t>(fx0), y0 = static_cast<std::size_t>(fy0);
        const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
        const S wx = cx - fx0, wy = cy - fy0;
        S dx_acc = 0, dy_acc = 0;
        for (std::size_t c = 0; c < C; ++c) {
          const S go = g[c * np + p];
          if (go == S(0)) continue;
          const S* plane = idp + c * H * W;
          if (gi) {
            (*gi)[c * H * W + y0 * W + x0] += go * (S(1) - wy) * (S(1) - wx);
            (*gi)[c * H * W + y0 * W + x1] += go * (S(1) - wy) * wx;
            (*gi)[c * H * W + y1 * W + x0] += go * wy * (S(1) - wx);
            (*gi)[c * H * W + y1 * W + x1] += go * wy * wx;
          }
          if (gc) {
            dx_acc += go * ((S(1) - wy) * (plane[y0 * W + x1] - plane[y0 * W + x0]) +
                            wy * (plane[y1 * W + x1] - plane[y1 * W + x0]));
            dy_acc += go * ((S(1) - wx) * (plane[y1 * W + x0] - plane[y0 * W + x0]) +
                            wx * (plane[y1 * W + x1] - plane[y0 * W + x1]));
          }
        }
        if (gc) {
          if (in_x) (*gc)[p] += dx_acc;
          if (in_y) (*gc)[np + p] += dy_acc;
        }
      }
    });
    r = Tensor<S>(oshape, out, tp, id);
  }
  detail::check_finite(r, "bilinear_sample");
  return r;
}

// ---------------------------------------------------------------------------
// Bilinear resize, align-corners-false.

template <class S>
Tensor<S> upsample_bilinear(const Tensor<S>& x, std::size_t H, std::size_t W) {
  if (x.rank() != 3) throw ValidationError("upsample_bilinear: expected CxHxW");
  const std::size_t C = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (H < h || W < w) throw ValidationError("upsample_bilinear: target smaller than source");
  struct Taps {
    std::size_t i0, i1;
    S w1;
  };
  auto plan = [](std::size_t out_n, std::size_t in_n) {
    std::vector<Taps> taps(out_n);
    const double s = static_cast<double>(in_n) / static_cast<double>(out_n);
    for (std::size_t o = 0; o < out_n; ++o) {
      const double src = (static_cast<double>(o) + 0.5) * s - 0.5;
      const double f = std::floor(src);
      const double frac = src - f;
      const std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(f);
      taps[o].i0 = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i0, 0, static_cast<std::ptrdiff_t>(in_n) - 1));
      taps[o].i1 =
          static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i0 + 1, 0, static_cast<std::ptrdiff_t>(in_n) - 1));
      taps[o].w1 = static_cast<S>(frac);
    }
    return taps;
  };
  auto tx = std::make_shared<std::vector<Taps>>(plan(W, w));
  auto ty = std::make_shared<std::vector<Taps>>(plan(H, h));
  auto out = std::make_shared<std::vector<S>>(C * H * W);
  const S* xd = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    const S* plane = xd + c * h * w;
    for (std::size_t oy = 0; oy < H; ++oy) {
      const auto& tyo = (*ty)[oy];
      for (std::size_t ox = 0; ox < W; ++ox) {
        const auto& txo = (*tx)[ox];
        const S top = (S(1) - txo.w1) * plane[tyo.i0 * w + txo.i0] + txo.w1 * plane[tyo.i0 * w + txo.i1];
        const S bot = (S(1) - txo.w1) * plane[tyo.i1 * w + txo.i0] + txo.w1 * plane[tyo.i1 * w + txo.i1];
        (*out)[(c * H + oy) * W + ox] = (S(1) - tyo.w1) * top + tyo.w1 * bot;
      }
    }
  }
  Shape oshape{C, H, W};
  Tensor<S> r(oshape, out, nullptr, -1);
  if (Tape<S>* tp = x.tape()) {
    const int px = x.node();
    int id = tp->add_node(oshape, [px, tx, ty, C, H, W, h, w](Tape<S>& t, int self) {
      const auto& g = t.grad_at(self);
      auto& gx = t.grad_buf(px);
      for (std::size_t c = 0; c < C; ++c) {
        S* gplane = gx.data() + c * h * w;
        for (std::size_t oy = 0; oy < H; ++oy) {
          const auto& tyo = (*ty)[oy];
          for (std::size_t ox = 0; ox < W; ++ox) {
            const auto& txo = (*tx)[ox];
            const S go = g[(c * H + oy) * W + ox];
            gplane[tyo.i0 * w + txo.i0] += go * (S(1) - tyo.w1) * (S(1) - txo.w1);
            gplane[tyo.i0 * w + txo.i1] += go * (S(1) - tyo.w1) * txo.w1;
            gplane[tyo.i1 * w + txo.i0] += go * tyo.w1 * (S(1) - txo.w1);
            gplane[tyo.i1 * w + txo.i1] += go * tyo.w1 * txo.w1;
          }
        }
      }
    });
    r = Tensor<S>(oshape, out, tp, id);
  }
  detail::check_finite(r, "upsample_bilinear");
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (central differences).

template <class S>
double grad_check_multi(const std::function<Tensor<S>(Tape<S>&, const std::vector<Tensor<S>>&)>& f,
                        const std::vector<Tensor<S>>& inputs, S h) {
  Tape<S> tape;
  std::vector<Tensor<S>> watched;
  watched.reserve(inputs.size());
  for (const auto& x : inputs) watched.push_back(tape.watch(x));
  Tensor<S> loss = f(tape, watched);
  tape.backward(loss);

  auto eval = [&](const std::vector<Tensor<S>>& xs) {
    Tape<S> t2;
    return f(t2, xs).value();
  };

  double worst = 0;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const std::vector<S> analytic = tape.grad(watched[which]);
    std::vector<Tensor<S>> probe;
    for (const auto& x : inputs) probe.push_back(x.detach());
    for (std::size_t i = 0; i < inputs[which].size(); ++i) {
      S* slot = probe[which].data() + i;
      const S orig = *slot;
      *slot = orig + h;
      const double fp = static_cast<double>(eval(probe));
      *slot = orig - h;
      const double fm = static_cast<double>(eval(probe));
      *slot = orig;
      const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max(1e-12, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

template <class S>
double grad_check(const std::function<Tensor<S>(Tape<S>&, const Tensor<S>&)>& f, const Tensor<S>& x, S h) {
  return grad_check_multi<S>(
      [&f](Tape<S>& t, const std::vector<Tensor<S>>& xs) { return f(t, xs[0]); }, {x}, h);
}

}  // namespace evseg
