#include "dysmm/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dysmm/error.hpp"

namespace dysmm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

Tape& same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw Error("operands recorded on different tapes");
  return a.tape();
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void add_into(Tensor& dst, std::span<const double> src) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

/// Flat index into c for every flat index of out. c has the same rank as out
/// with each dimension equal to out's or 1.
std::vector<std::size_t> broadcast_map(const Shape& out, const Shape& c) {
  if (out.size() != c.size())
    throw ShapeError("broadcast: rank mismatch " + shape_str(out) + " vs " + shape_str(c));
  for (std::size_t i = 0; i < out.size(); ++i)
    if (c[i] != 1 && c[i] != out[i])
      throw ShapeError("broadcast: " + shape_str(c) + " does not broadcast to " + shape_str(out));
  const std::size_t n = shape_size(out);
  std::vector<std::size_t> map(n);
  if (out == c) {
    std::iota(map.begin(), map.end(), std::size_t{0});
    return map;
  }
  const std::size_t r = out.size();
  std::vector<std::size_t> cstride(r, 1);
  for (std::size_t i = r; i-- > 1;) cstride[i - 1] = cstride[i] * c[i];
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < r; ++k)
      if (c[k] != 1) off += idx[k] * cstride[k];
    map[flat] = off;
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < out[k]) break;
      idx[k] = 0;
    }
  }
  return map;
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename F, typename D>
Var unary(const char* name, Var a, F forward, D derivative) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = forward(x[i]);
  const std::size_t ia = a.id();
  return a.tape().record(name, std::move(y), {a},
                         [ia, derivative](const Tensor& g, const Tensor& out, Tape& t) {
                           const Tensor& in = t.value(ia);
                           Tensor& ga = t.grad_slot(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * derivative(in[i], out[i]);
                         });
}

}  // namespace

// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

std::size_t ParameterStore::add(std::string name, Tensor init) {
  if (by_name_.count(name)) throw Error("duplicate parameter name: " + name);
  by_name_.emplace(name, params_.size());
  params_.push_back({std::move(name), std::move(init)});
  return params_.size() - 1;
}

std::optional<std::size_t> ParameterStore::find(std::string_view name) const {
  auto it = by_name_.find(std::string(name));
  if (it == by_name_.end()) return std::nullopt;
  return it->second;
}

std::size_t ParameterStore::index(std::string_view name) const {
  auto i = find(name);
  if (!i) throw Error("unknown parameter: " + std::string(name));
  return *i;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Var Tape::constant(Tensor value) {
  nodes_.push_back({"constant", std::move(value), {}, nullptr, false});
  return {this, nodes_.size() - 1};
}

Var Tape::variable(Tensor value) {
  nodes_.push_back({"variable", std::move(value), {}, nullptr, true});
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(const ParameterStore& store, std::size_t index) {
  const auto key = std::make_pair(&store, index);
  if (auto it = param_nodes_.find(key); it != param_nodes_.end()) return {this, it->second};
  nodes_.push_back({"parameter", store[index].value, {}, nullptr, true});
  param_nodes_.emplace(key, nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(const ParameterStore& store, std::string_view name) {
  return parameter(store, store.index(name));
}

Var Tape::record(std::string_view op, Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NonFiniteError("non-finite output from " + std::string(op));
  Node node{op, std::move(value), {}, nullptr, false};
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (&v.tape() != this) throw Error(std::string(op) + ": input from another tape");
    node.inputs.push_back(v.id());
    node.requires_grad = node.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_slot(std::size_t id) {
  if (!has_grad_[id]) {
    grads_[id] = Tensor(nodes_[id].value.shape(), 0.0);
    has_grad_[id] = true;
  }
  return grads_[id];
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw Error("backward: loss from another tape");
  if (loss.value().size() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  grads_.assign(nodes_.size(), Tensor());
  has_grad_.assign(nodes_.size(), false);
  grad_slot(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!has_grad_[id] || !n.backward) continue;
    n.backward(grads_[id], n.value, *this);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.id() < has_grad_.size() && has_grad_[v.id()]) return grads_[v.id()];
  return Tensor(v.shape(), 0.0);
}

std::vector<Tensor> Tape::parameter_grads(const ParameterStore& store) const {
  std::vector<Tensor> out;
  out.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto it = param_nodes_.find({&store, i});
    if (it != param_nodes_.end() && it->second < has_grad_.size() && has_grad_[it->second])
      out.push_back(grads_[it->second]);
    else
      out.emplace_back(store[i].value.shape(), 0.0);
  }
  return out;
}

std::map<std::string, Tensor> Tape::gradient_map(const ParameterStore& store) const {
  auto grads = parameter_grads(store);
  std::map<std::string, Tensor> m;
  for (std::size_t i = 0; i < store.size(); ++i) m.emplace(store[i].name, std::move(grads[i]));
  return m;
}

bool Tape::uses_parameter(const ParameterStore& store, std::size_t index) const {
  return param_nodes_.count({&store, index}) > 0;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("add", a, b);
  Tensor y(a.shape());
  const auto& x0 = a.value();
  const auto& x1 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] + x1[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("add", std::move(y), {a, b}, [ia, ib](const Tensor& g, const Tensor&, Tape& tp) {
    if (tp.requires_grad(ia)) add_into(tp.grad_slot(ia), g.data());
    if (tp.requires_grad(ib)) add_into(tp.grad_slot(ib), g.data());
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("sub", a, b);
  Tensor y(a.shape());
  const auto& x0 = a.value();
  const auto& x1 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] - x1[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("sub", std::move(y), {a, b}, [ia, ib](const Tensor& g, const Tensor&, Tape& tp) {
    if (tp.requires_grad(ia)) add_into(tp.grad_slot(ia), g.data());
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("mul", a, b);
  Tensor y(a.shape());
  const auto& x0 = a.value();
  const auto& x1 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] * x1[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("mul", std::move(y), {a, b}, [ia, ib](const Tensor& g, const Tensor&, Tape& tp) {
    const Tensor& va = tp.value(ia);
    const Tensor& vb = tp.value(ib);
    if (tp.requires_grad(ia)) {
      Tensor& ga = tp.grad_slot(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = same_tape(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  if (bv.rank() != 1 || xv.rank() == 0 || xv.shape().back() != bv.dim(0))
    throw ShapeError("add_bias: " + shape_str(xv.shape()) + " + " + shape_str(bv.shape()));
  const std::size_t n = bv.size();
  Tensor y = xv;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i % n];
  const std::size_t ix = x.id(), ib = bias.id();
  return t.record("add_bias", std::move(y), {x, bias}, [ix, ib, n](const Tensor& g, const Tensor&, Tape& tp) {
    if (tp.requires_grad(ix)) add_into(tp.grad_slot(ix), g.data());
    if (tp.requires_grad(ib)) {
      Tensor& gb = tp.grad_slot(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

Var scale(Var a, double c) {
  return unary("scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var mul_const(Var a, const Tensor& c) {
  auto map = broadcast_map(a.shape(), c.shape());
  Tensor y(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * c[map[i]];
  const std::size_t ia = a.id();
  return a.tape().record("mul_const", std::move(y), {a},
                         [ia, c, map = std::move(map)](const Tensor& g, const Tensor&, Tape& tp) {
                           Tensor& ga = tp.grad_slot(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[map[i]];
                         });
}

Var blend(const Tensor& mask, Var a, Var b) {
  Tape& t = same_tape(a, b);
  require_same_shape("blend", a, b);
  auto map = broadcast_map(a.shape(), mask.shape());
  Tensor y(a.shape());
  const auto& va = a.value();
  const auto& vb = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double m = mask[map[i]];
    y[i] = m * va[i] + (1.0 - m) * vb[i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("blend", std::move(y), {a, b},
                  [ia, ib, mask, map = std::move(map)](const Tensor& g, const Tensor&, Tape& tp) {
                    if (tp.requires_grad(ia)) {
                      Tensor& ga = tp.grad_slot(ia);
                      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[map[i]];
                    }
                    if (tp.requires_grad(ib)) {
                      Tensor& gb = tp.grad_slot(ib);
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (1.0 - mask[map[i]]);
                    }
                  });
}

Var sigmoid(Var a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var log(Var a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() < 2 || bv.rank() != 2 || av.shape().back() != bv.dim(0))
    throw ShapeError("matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t k = bv.dim(0), n = bv.dim(1), m = av.size() / k;
  Shape out_shape = av.shape();
  out_shape.back() = n;
  Tensor y(out_shape);
  Map(y.data().data(), m, n).noalias() = MapC(av.data().data(), m, k) * MapC(bv.data().data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("matmul", std::move(y), {a, b}, [ia, ib, m, k, n](const Tensor& g, const Tensor&, Tape& tp) {
    MapC G(g.data().data(), m, n);
    if (tp.requires_grad(ia)) {
      Map(tp.grad_slot(ia).data().data(), m, k).noalias() += G * MapC(tp.value(ib).data().data(), k, n).transpose();
    }
    if (tp.requires_grad(ib)) {
      Map(tp.grad_slot(ib).data().data(), k, n).noalias() += MapC(tp.value(ia).data().data(), m, k).transpose() * G;
    }
  });
}

Var batched_matmul(Var a, Var b, bool transpose_b) {
  Tape& t = same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
    throw ShapeError("batched_matmul: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
  const std::size_t batch = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) throw ShapeError("batched_matmul: inner dimensions differ");
  Tensor y(Shape{batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    MapC A(av.data().data() + i * m * k, m, k);
    Map Y(y.data().data() + i * m * n, m, n);
    if (transpose_b)
      Y.noalias() = A * MapC(bv.data().data() + i * n * k, n, k).transpose();
    else
      Y.noalias() = A * MapC(bv.data().data() + i * k * n, k, n);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return t.record("batched_matmul", std::move(y), {a, b},
                  [ia, ib, batch, m, k, n, transpose_b](const Tensor& g, const Tensor&, Tape& tp) {
                    const Tensor& va = tp.value(ia);
                    const Tensor& vb = tp.value(ib);
                    const bool ga_on = tp.requires_grad(ia), gb_on = tp.requires_grad(ib);
                    for (std::size_t i = 0; i < batch; ++i) {
                      MapC G(g.data().data() + i * m * n, m, n);
                      MapC A(va.data().data() + i * m * k, m, k);
                      if (transpose_b) {
                        MapC B(vb.data().data() + i * n * k, n, k);
                        if (ga_on) Map(tp.grad_slot(ia).data().data() + i * m * k, m, k).noalias() += G * B;
                        if (gb_on)
                          Map(tp.grad_slot(ib).data().data() + i * n * k, n, k).noalias() += G.transpose() * A;
                      } else {
                        MapC B(vb.data().data() + i * k * n, k, n);
                        if (ga_on)
                          Map(tp.grad_slot(ia).data().data() + i * m * k, m, k).noalias() += G * B.transpose();
                        if (gb_on)
                          Map(tp.grad_slot(ib).data().data() + i * k * n, k, n).noalias() += A.transpose() * G;
                      }
                    }
                  });
}

// ---------------------------------------------------------------------------
// Structural

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = parts[0].tape();
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != out_shape[i])
        throw ShapeError("concat: " + shape_str(s) + " vs " + shape_str(out_shape));
    widths.push_back(s[axis]);
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto sp = split_axis(out_shape, axis);
  Tensor y(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    const std::size_t block = widths[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(v.data().data() + o * block, block, y.data().data() + o * total * sp.inner + offset * sp.inner);
    offset += widths[p];
  }
  std::vector<std::size_t> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return t.record("concat", std::move(y), parts, [ids, widths, sp, total](const Tensor& g, const Tensor&, Tape& tp) {
    std::size_t offset = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      const std::size_t block = widths[p] * sp.inner;
      if (tp.requires_grad(ids[p])) {
        Tensor& gp = tp.grad_slot(ids[p]);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const double* src = g.data().data() + o * total * sp.inner + offset * sp.inner;
          double* dst = gp.data().data() + o * block;
          for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
        }
      }
      offset += widths[p];
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& in_shape = a.shape();
  if (axis >= in_shape.size() || begin >= end || end > in_shape[axis])
    throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(in_shape));
  const auto sp = split_axis(in_shape, axis);
  Shape out_shape = in_shape;
  out_shape[axis] = end - begin;
  Tensor y(out_shape);
  const std::size_t block = (end - begin) * sp.inner;
  const auto& x = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data().data() + o * sp.n * sp.inner + begin * sp.inner, block, y.data().data() + o * block);
  const std::size_t ia = a.id();
  return a.tape().record("slice", std::move(y), {a}, [ia, sp, begin, block](const Tensor& g, const Tensor&, Tape& tp) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      double* dst = ga.data().data() + o * sp.n * sp.inner + begin * sp.inner;
      const double* src = g.data().data() + o * block;
      for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
    }
  });
}

Var reshape(Var a, Shape shape) {
  Tensor y = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record("reshape", std::move(y), {a}, [ia](const Tensor& g, const Tensor&, Tape& tp) {
    add_into(tp.grad_slot(ia), g.data());
  });
}

Var permute(Var a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = in[perm[i]];
  // src[k] = flat input index of flat output element k
  std::vector<std::size_t> src(shape_size(out));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < r; ++k) off += idx[k] * in_stride[perm[k]];
    src[flat] = off;
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < out[k]) break;
      idx[k] = 0;
    }
  }
  Tensor y(out);
  const auto& x = a.value();
  for (std::size_t i = 0; i < src.size(); ++i) y[i] = x[src[i]];
  const std::size_t ia = a.id();
  return a.tape().record("permute", std::move(y), {a}, [ia, src = std::move(src)](const Tensor& g, const Tensor&, Tape& tp) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < src.size(); ++i) ga[src[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  const auto& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record("sum", Tensor::scalar(s), {a}, [ia](const Tensor& g, const Tensor&, Tape& tp) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
  });
}

Var mean(Var a) {
  const auto& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.size());
  const std::size_t ia = a.id();
  return a.tape().record("mean", Tensor::scalar(s / n), {a}, [ia, n](const Tensor& g, const Tensor&, Tape& tp) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] / n;
  });
}

Var mean_axis(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor y(out_shape);
  const auto& x = a.value();
  const double inv = 1.0 / static_cast<double>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) y[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  for (auto& v : y.data()) v *= inv;
  const std::size_t ia = a.id();
  return a.tape().record("mean_axis", std::move(y), {a}, [ia, sp, inv](const Tensor& g, const Tensor&, Tape& tp) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i] * inv;
  });
}

// ---------------------------------------------------------------------------
// Layers

Var embedding(Var table, std::span<const int> ids, const Shape& index_shape) {
  const auto& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding: table must be 2-D");
  if (shape_size(index_shape) != ids.size()) throw ShapeError("embedding: index shape does not match ids");
  const std::size_t vocab = tv.dim(0), dim = tv.dim(1);
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw ShapeError("embedding: id " + std::to_string(id) + " outside [0, " + std::to_string(vocab) + ")");
  Shape out_shape = index_shape;
  out_shape.push_back(dim);
  Tensor y(out_shape);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tv.data().data() + static_cast<std::size_t>(ids[i]) * dim, dim, y.data().data() + i * dim);
  std::vector<int> saved(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.tape().record("embedding", std::move(y), {table},
                             [it, dim, saved = std::move(saved)](const Tensor& g, const Tensor&, Tape& tp) {
                               Tensor& gt = tp.grad_slot(it);
                               for (std::size_t i = 0; i < saved.size(); ++i)
                                 for (std::size_t j = 0; j < dim; ++j)
                                   gt[static_cast<std::size_t>(saved[i]) * dim + j] += g[i * dim + j];
                             });
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (in + 2 * pad < kernel)
    throw ShapeError("conv: input extent " + std::to_string(in) + " smaller than kernel " + std::to_string(kernel));
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, oh, ow;
  Conv2dOptions opt;
};

// col [cin*kh*kw, oh*ow] for one batch item
void im2col(const double* x, const ConvGeom& g, double* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.opt.stride_h + ki) -
                                    static_cast<std::ptrdiff_t>(g.opt.pad_h);
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * g.opt.stride_w + kj) -
                                      static_cast<std::ptrdiff_t>(g.opt.pad_w);
            const bool inside = ii >= 0 && jj >= 0 && ii < static_cast<std::ptrdiff_t>(g.h) &&
                                jj < static_cast<std::ptrdiff_t>(g.w);
            row[oi * g.ow + oj] = inside ? x[(c * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)] : 0.0;
          }
        }
      }
}

void col2im_add(const double* col, const ConvGeom& g, double* dx) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * plane;
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
          const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * g.opt.stride_h + ki) -
                                    static_cast<std::ptrdiff_t>(g.opt.pad_h);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.ow; ++oj) {
            const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * g.opt.stride_w + kj) -
                                      static_cast<std::ptrdiff_t>(g.opt.pad_w);
            if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.w)) continue;
            dx[(c * g.h + static_cast<std::size_t>(ii)) * g.w + static_cast<std::size_t>(jj)] += row[oi * g.ow + oj];
          }
        }
      }
}

}  // namespace

Var conv2d(Var x, Var kernel, std::optional<Var> bias, const Conv2dOptions& opt) {
  Tape& t = same_tape(x, kernel);
  const auto& xv = x.value();
  const auto& kv = kernel.value();
  if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(1) != kv.dim(1))
    throw ShapeError("conv2d: input " + shape_str(xv.shape()) + " kernel " + shape_str(kv.shape()));
  if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != kv.dim(0)))
    throw ShapeError("conv2d: bias must have one entry per output channel");
  ConvGeom g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3), 0, 0, opt};
  g.oh = conv_output_size(g.h, g.kh, opt.stride_h, opt.pad_h);
  g.ow = conv_output_size(g.w, g.kw, opt.stride_w, opt.pad_w);
  const std::size_t patch = g.cin * g.kh * g.kw, plane = g.oh * g.ow;
  Tensor y(Shape{g.batch, g.cout, g.oh, g.ow});
  std::vector<double> col(patch * plane);
  MapC K(kv.data().data(), g.cout, patch);
  for (std::size_t b = 0; b < g.batch; ++b) {
    im2col(xv.data().data() + b * g.cin * g.h * g.w, g, col.data());
    Map Y(y.data().data() + b * g.cout * plane, g.cout, plane);
    Y.noalias() = K * MapC(col.data(), patch, plane);
    if (bias) {
      const auto& bv = bias->value();
      for (std::size_t c = 0; c < g.cout; ++c) Y.row(static_cast<Eigen::Index>(c)).array() += bv[c];
    }
  }
  const std::size_t ix = x.id(), ik = kernel.id();
  const std::optional<std::size_t> ib = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
  std::vector<Var> inputs{x, kernel};
  if (bias) inputs.push_back(*bias);
  return t.record("conv2d", std::move(y), inputs, [ix, ik, ib, g](const Tensor& grad, const Tensor&, Tape& tp) {
    const std::size_t patch = g.cin * g.kh * g.kw, plane = g.oh * g.ow;
    const auto& xv = tp.value(ix);
    const auto& kv = tp.value(ik);
    const bool gx_on = tp.requires_grad(ix), gk_on = tp.requires_grad(ik);
    std::vector<double> col(patch * plane);
    for (std::size_t b = 0; b < g.batch; ++b) {
      MapC G(grad.data().data() + b * g.cout * plane, g.cout, plane);
      if (gk_on) {
        im2col(xv.data().data() + b * g.cin * g.h * g.w, g, col.data());
        Map(tp.grad_slot(ik).data().data(), g.cout, patch).noalias() += G * MapC(col.data(), patch, plane).transpose();
      }
      if (gx_on) {
        Map(col.data(), patch, plane).noalias() = MapC(kv.data().data(), g.cout, patch).transpose() * G;
        col2im_add(col.data(), g, tp.grad_slot(ix).data().data() + b * g.cin * g.h * g.w);
      }
      if (ib && tp.requires_grad(*ib)) {
        Tensor& gb = tp.grad_slot(*ib);
        for (std::size_t c = 0; c < g.cout; ++c) gb[c] += G.row(static_cast<Eigen::Index>(c)).sum();
      }
    }
  });
}

Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode, const BatchNormOptions& opt,
              const Tensor* weights) {
  Tape& t = same_tape(x, gamma);
  const auto& xv = x.value();
  if (xv.rank() < 2) throw ShapeError("batchnorm: input must be at least 2-D");
  const auto sp = split_axis(xv.shape(), 1);
  const std::size_t channels = sp.n;
  if (gamma.value().size() != channels || beta.value().size() != channels)
    throw ShapeError("batchnorm: gamma/beta must have one entry per channel");
  if (state.running_mean.size() != channels || state.running_var.size() != channels)
    throw ShapeError("batchnorm: running statistics have the wrong size");
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  auto channel_of = [&](std::size_t i) { return (i / sp.inner) % channels; };

  std::vector<double> w(xv.size(), 1.0);
  if (weights) {
    Shape ws = weights->shape();
    if (ws.size() != xv.rank() || ws[1] != 1) throw ShapeError("batchnorm: weights must broadcast with channel dim 1");
    auto map = broadcast_map(xv.shape(), ws);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = (*weights)[map[i]];
  }

  std::vector<double> mu(channels, 0.0), var(channels, 0.0), count(channels, 0.0);
  if (mode == Mode::train) {
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const auto c = channel_of(i);
      mu[c] += w[i] * xv[i];
      count[c] += w[i];
    }
    for (std::size_t c = 0; c < channels; ++c) {
      if (count[c] <= 0) throw ShapeError("batchnorm: no weighted positions in channel");
      mu[c] /= count[c];
    }
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const auto c = channel_of(i);
      const double d = xv[i] - mu[c];
      var[c] += w[i] * d * d;
    }
    for (std::size_t c = 0; c < channels; ++c) {
      var[c] /= count[c];
      const double unbiased = count[c] > 1 ? var[c] * count[c] / (count[c] - 1) : var[c];
      state.running_mean[c] = (1 - opt.momentum) * state.running_mean[c] + opt.momentum * mu[c];
      state.running_var[c] = (1 - opt.momentum) * state.running_var[c] + opt.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = state.running_mean[c];
      var[c] = state.running_var[c];
    }
  }
  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + opt.eps);

  Tensor xhat(xv.shape());
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const auto c = channel_of(i);
    xhat[i] = (xv[i] - mu[c]) * inv_std[c];
    y[i] = gv[c] * xhat[i] + bv[c];
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ibeta = beta.id();
  const bool train = mode == Mode::train;
  return t.record("batchnorm", std::move(y), {x, gamma, beta},
                  [ix, ig, ibeta, sp, channels, train, xhat = std::move(xhat), w = std::move(w),
                   inv_std = std::move(inv_std), count = std::move(count)](const Tensor& g, const Tensor&, Tape& tp) {
                    auto channel_of = [&](std::size_t i) { return (i / sp.inner) % channels; };
                    std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const auto c = channel_of(i);
                      sum_g[c] += g[i];
                      sum_gx[c] += g[i] * xhat[i];
                    }
                    if (tp.requires_grad(ibeta)) {
                      Tensor& gb = tp.grad_slot(ibeta);
                      for (std::size_t c = 0; c < channels; ++c) gb[c] += sum_g[c];
                    }
                    if (tp.requires_grad(ig)) {
                      Tensor& gg = tp.grad_slot(ig);
                      for (std::size_t c = 0; c < channels; ++c) gg[c] += sum_gx[c];
                    }
                    if (tp.requires_grad(ix)) {
                      const Tensor& gamma_v = tp.value(ig);
                      Tensor& gx = tp.grad_slot(ix);
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const auto c = channel_of(i);
                        double d = g[i];
                        if (train) d -= w[i] / count[c] * (sum_g[c] + xhat[i] * sum_gx[c]);
                        gx[i] += gamma_v[c] * inv_std[c] * d;
                      }
                    }
                  });
}

Var dropout(Var x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  Tensor keep(x.shape());
  const double s = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = rng.bernoulli(rate) ? 0.0 : s;
  return mul_const(x, keep);
}

Var masked_softmax(Var logits, const Tensor* mask, std::size_t axis) {
  const auto& x = logits.value();
  const auto sp = split_axis(x.shape(), axis);
  std::vector<std::size_t> map;
  if (mask) map = broadcast_map(x.shape(), mask->shape());
  auto on = [&](std::size_t i) { return !mask || (*mask)[map[i]] != 0.0; };
  Tensor y(x.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t i = base + j * sp.inner;
        if (on(i)) mx = std::max(mx, x[i]);
      }
      if (mx == -std::numeric_limits<double>::infinity())
        throw ShapeError("masked_softmax: fully masked row");
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const std::size_t i = base + j * sp.inner;
        y[i] = on(i) ? std::exp(x[i] - mx) : 0.0;
        z += y[i];
      }
      for (std::size_t j = 0; j < sp.n; ++j) y[base + j * sp.inner] /= z;
    }
  const std::size_t ia = logits.id();
  return logits.tape().record("masked_softmax", std::move(y), {logits}, [ia, sp](const Tensor& g, const Tensor& out, Tape& tp) {
    Tensor& ga = tp.grad_slot(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += out[base + j * sp.inner] * g[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.n; ++j) {
          const std::size_t i = base + j * sp.inner;
          ga[i] += out[i] * (g[i] - dot);
        }
      }
  });
}

// ---------------------------------------------------------------------------

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  return f(tape, vars).value().item();
}

void finish(GradCheckReport& r) {
  r.max_rel_error = 0.0;
  for (const auto& v : r.rel_errors)
    for (double e : v) r.max_rel_error = std::max(r.max_rel_error, e);
  r.passed = r.max_rel_error < r.tolerance;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double step, double tolerance) {
  if (step <= 0) throw Error("grad_check: step must be positive");
  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  Var loss = f(tape, vars);
  tape.backward(loss);
  const double base = loss.value().item();
  if (evaluate(f, inputs) != base) throw Error("grad_check: function is not deterministic");

  GradCheckReport report;
  report.tolerance = tolerance;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = tape.grad(vars[k]);
    std::vector<double> errs(inputs[k].size());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      probe[k][i] = orig + step;
      const double fp = evaluate(f, probe);
      probe[k][i] = orig - step;
      const double fm = evaluate(f, probe);
      probe[k][i] = orig;
      const double numeric = (fp - fm) / (2 * step);
      errs[i] = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
    }
    report.rel_errors.push_back(std::move(errs));
  }
  finish(report);
  return report;
}

GradCheckReport grad_check_parameters(const std::function<Var(Tape&)>& f, ParameterStore& store, double step,
                                      double tolerance) {
  if (step <= 0) throw Error("grad_check: step must be positive");
  auto eval = [&] {
    Tape t;
    return f(t).value().item();
  };
  Tape tape;
  Var loss = f(tape);
  tape.backward(loss);
  if (eval() != loss.value().item()) throw Error("grad_check: function is not deterministic");
  const auto analytic = tape.parameter_grads(store);

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t k = 0; k < store.size(); ++k) {
    Tensor& p = store[k].value;
    std::vector<double> errs(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + step;
      const double fp = eval();
      p[i] = orig - step;
      const double fm = eval();
      p[i] = orig;
      const double numeric = (fp - fm) / (2 * step);
      errs[i] = std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(numeric));
    }
    report.rel_errors.push_back(std::move(errs));
  }
  finish(report);
  return report;
}

}  // namespace dysmm
