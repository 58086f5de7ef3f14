#pragma once

// Differentiable operations on Tensor<T>. Everything here treats tensors as
// at most 2-D; rank-1 tensors of length n behave as 1 x n rows. Binary
// elementwise ops broadcast dimensions of size 1.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <vector>

#include "capt/tensor.hpp"

namespace capt::ad {

namespace detail {

struct Dims2 {
  std::size_t r, c;
};

template <class T>
Dims2 dims2(const Tensor<T>& t, const char* op) {
  if (t.rank() > 2) throw DimensionError(std::string(op) + ": rank > 2 not supported, got " + shape_str(t.shape()));
  return {t.rows(), t.cols()};
}

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

inline void check_axis(int axis, const char* op) {
  if (axis != 0 && axis != 1) throw DimensionError(std::string(op) + ": axis must be 0 or 1");
}

// Iterates the 1-D lines of a 2-D buffer along `axis`: calls fn(offset, stride, length).
template <class F>
void for_each_line(Dims2 d, int axis, F&& fn) {
  if (axis == 1) {
    for (std::size_t i = 0; i < d.r; ++i) fn(i * d.c, std::size_t{1}, d.c);
  } else {
    for (std::size_t j = 0; j < d.c; ++j) fn(j, d.c, d.r);
  }
}

inline Shape reduced_shape(Dims2 d, int axis) { return axis == 0 ? Shape{1, d.c} : Shape{d.r, 1}; }

// Elementwise unary op: f(x) -> y, df(x, y) -> dy/dx.
template <class T, class F, class DF>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, DF df) {
  std::vector<T> out(a.numel());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  return make_result<T>(op, a.shape(), std::move(out), {an}, [an, df](Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * df(an->value[i], o.value[i]);
  });
}

// Broadcasting binary op: f(x, y) -> z with partials dfa, dfb (x, y, z) -> dz/dx, dz/dy.
template <class T, class F, class DA, class DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa, DB dfb) {
  const Dims2 da = dims2(a, op), db = dims2(b, op);
  Shape out_shape;
  Dims2 d{};
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
    d = da;
  } else {
    d = {std::max(da.r, db.r), std::max(da.c, db.c)};
    auto ok = [&](Dims2 x) { return (x.r == d.r || x.r == 1) && (x.c == d.c || x.c == 1); };
    if (!ok(da) || !ok(db))
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                           shape_str(b.shape()));
    out_shape = {d.r, d.c};
  }
  const std::size_t ars = da.r == 1 ? 0 : da.c, acs = da.c == 1 ? 0 : 1;
  const std::size_t brs = db.r == 1 ? 0 : db.c, bcs = db.c == 1 ? 0 : 1;
  std::vector<T> out(d.r * d.c);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < d.r; ++i)
    for (std::size_t j = 0; j < d.c; ++j) out[i * d.c + j] = f(av[i * ars + j * acs], bv[i * brs + j * bcs]);
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(op, std::move(out_shape), std::move(out), {an, bn},
                        [an, bn, d, ars, acs, brs, bcs, dfa, dfb](Node<T>& o) {
                          T* ga = an->requires_grad ? an->ensure_grad().data() : nullptr;
                          T* gb = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
                          for (std::size_t i = 0; i < d.r; ++i)
                            for (std::size_t j = 0; j < d.c; ++j) {
                              const std::size_t k = i * d.c + j;
                              const std::size_t ka = i * ars + j * acs, kb = i * brs + j * bcs;
                              const T x = an->value[ka], y = bn->value[kb], z = o.value[k], g = o.grad[k];
                              if (ga) ga[ka] += g * dfa(x, y, z);
                              if (gb) gb[kb] += g * dfb(x, y, z);
                            }
                        });
}

}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto da = detail::dims2(a, "matmul"), db = detail::dims2(b, "matmul");
  if (da.c != db.r)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<T> out(da.r * db.c);
  detail::MapM<T>(out.data(), da.r, db.c).noalias() =
      detail::MapC<T>(a.values().data(), da.r, da.c) * detail::MapC<T>(b.values().data(), db.r, db.c);
  auto an = a.node();
  auto bn = b.node();
  return detail::make_result<T>("matmul", {da.r, db.c}, std::move(out), {an, bn}, [an, bn, da, db](Node<T>& o) {
    detail::MapC<T> g(o.grad.data(), da.r, db.c);
    if (an->requires_grad)
      detail::MapM<T>(an->ensure_grad().data(), da.r, da.c).noalias() +=
          g * detail::MapC<T>(bn->value.data(), db.r, db.c).transpose();
    if (bn->requires_grad)
      detail::MapM<T>(bn->ensure_grad().data(), db.r, db.c).noalias() +=
          detail::MapC<T>(an->value.data(), da.r, da.c).transpose() * g;
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const auto d = detail::dims2(a, "transpose");
  std::vector<T> out(d.r * d.c);
  detail::MapM<T>(out.data(), d.c, d.r) = detail::MapC<T>(a.values().data(), d.r, d.c).transpose();
  auto an = a.node();
  return detail::make_result<T>("transpose", {d.c, d.r}, std::move(out), {an}, [an, d](Node<T>& o) {
    detail::MapM<T>(an->ensure_grad().data(), d.r, d.c) += detail::MapC<T>(o.grad.data(), d.c, d.r).transpose();
  });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T z) { return -z / y; });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary<T>("scale", a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return detail::unary<T>("add_scalar", a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T x : a.values())
    if (x < T(0)) throw ContractError("sqrt of a negative value");
  return detail::unary<T>(
      "sqrt", a, [](T x) { return std::sqrt(x); },
      [](T, T y) {
        if (y == T(0)) throw DegenerateError("sqrt backward at zero");
        return T(0.5) / y;
      });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// log(1 + e^x), evaluated without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  return detail::unary<T>(
      "softplus", a, [](T x) { return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.values()) s += x;
  auto an = a.node();
  return detail::make_result<T>("sum", {1}, {s}, {an}, [an](Node<T>& o) {
    for (auto& g : an->ensure_grad()) g += o.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  T s = 0;
  for (T x : a.values()) s += x;
  auto an = a.node();
  return detail::make_result<T>("mean", {1}, {s * inv}, {an}, [an, inv](Node<T>& o) {
    for (auto& g : an->ensure_grad()) g += o.grad[0] * inv;
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a, int axis) {
  detail::check_axis(axis, "sum");
  const auto d = detail::dims2(a, "sum");
  const Shape os = detail::reduced_shape(d, axis);
  std::vector<T> out(shape_numel(os), T(0));
  const auto av = a.values();
  std::size_t line = 0;
  detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
    T s = 0;
    for (std::size_t t = 0; t < len; ++t) s += av[off + t * st];
    out[line++] = s;
  });
  auto an = a.node();
  return detail::make_result<T>("sum_axis", os, std::move(out), {an}, [an, d, axis](Node<T>& o) {
    auto& ga = an->ensure_grad();
    std::size_t line = 0;
    detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
      const T g = o.grad[line++];
      for (std::size_t t = 0; t < len; ++t) ga[off + t * st] += g;
    });
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, int axis) {
  const auto d = detail::dims2(a, "mean");
  const std::size_t len = axis == 0 ? d.r : d.c;
  return scale(sum(a, axis), T(1) / static_cast<T>(len));
}

// Maximum along an axis; the gradient goes to the first maximal element.
template <class T>
Tensor<T> max(const Tensor<T>& a, int axis) {
  detail::check_axis(axis, "max");
  const auto d = detail::dims2(a, "max");
  const Shape os = detail::reduced_shape(d, axis);
  std::vector<T> out(shape_numel(os));
  std::vector<std::size_t> arg(out.size());
  const auto av = a.values();
  std::size_t line = 0;
  detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
    std::size_t best = off;
    for (std::size_t t = 1; t < len; ++t)
      if (av[off + t * st] > av[best]) best = off + t * st;
    out[line] = av[best];
    arg[line++] = best;
  });
  auto an = a.node();
  return detail::make_result<T>("max_axis", os, std::move(out), {an}, [an, arg = std::move(arg)](Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) ga[arg[i]] += o.grad[i];
  });
}

// Max-pool over consecutive groups of `group` rows: (n*group) x d -> n x d.
template <class T>
Tensor<T> group_max(const Tensor<T>& a, std::size_t group) {
  const auto d = detail::dims2(a, "group_max");
  if (group == 0 || d.r % group != 0)
    throw DimensionError("group_max: row count " + std::to_string(d.r) + " not divisible by " + std::to_string(group));
  const std::size_t n = d.r / group;
  std::vector<T> out(n * d.c);
  std::vector<std::size_t> arg(n * d.c);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d.c; ++j) {
      std::size_t best = (i * group) * d.c + j;
      for (std::size_t t = 1; t < group; ++t) {
        const std::size_t k = (i * group + t) * d.c + j;
        if (av[k] > av[best]) best = k;
      }
      out[i * d.c + j] = av[best];
      arg[i * d.c + j] = best;
    }
  auto an = a.node();
  return detail::make_result<T>("group_max", {n, d.c}, std::move(out), {an}, [an, arg = std::move(arg)](Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < arg.size(); ++i) ga[arg[i]] += o.grad[i];
  });
}

// Euclidean norm of each line along `axis`. The backward pass is undefined
// for an all-zero line and raises DegenerateError there.
template <class T>
Tensor<T> l2norm(const Tensor<T>& a, int axis) {
  detail::check_axis(axis, "l2norm");
  const auto d = detail::dims2(a, "l2norm");
  const Shape os = detail::reduced_shape(d, axis);
  std::vector<T> out(shape_numel(os));
  const auto av = a.values();
  std::size_t line = 0;
  detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
    T s = 0;
    for (std::size_t t = 0; t < len; ++t) s += av[off + t * st] * av[off + t * st];
    out[line++] = std::sqrt(s);
  });
  auto an = a.node();
  return detail::make_result<T>("l2norm", os, std::move(out), {an}, [an, d, axis](Node<T>& o) {
    auto& ga = an->ensure_grad();
    std::size_t line = 0;
    detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
      const T y = o.value[line];
      const T g = o.grad[line++];
      if (y == T(0)) throw DegenerateError("l2norm backward through a zero vector");
      for (std::size_t t = 0; t < len; ++t) ga[off + t * st] += g * an->value[off + t * st] / y;
    });
  });
}

// Rows (axis 1) or columns (axis 0) scaled to unit Euclidean length.
template <class T>
Tensor<T> normalize(const Tensor<T>& a, int axis) {
  return div(a, l2norm(a, axis));
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  detail::check_axis(axis, "concat");
  if (parts.empty()) throw DimensionError("concat: no inputs");
  std::vector<detail::Dims2> ds;
  for (const auto& p : parts) ds.push_back(detail::dims2(p, "concat"));
  std::size_t r = 0, c = 0;
  if (axis == 1) {
    r = ds[0].r;
    for (auto x : ds) {
      if (x.r != r) throw DimensionError("concat(axis=1): row counts differ");
      c += x.c;
    }
  } else {
    c = ds[0].c;
    for (auto x : ds) {
      if (x.c != c) throw DimensionError("concat(axis=0): column counts differ");
      r += x.r;
    }
  }
  std::vector<T> out(r * c);
  std::vector<NodePtr<T>> nodes;
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    if (axis == 1) {
      for (std::size_t i = 0; i < r; ++i)
        std::copy_n(v.data() + i * ds[p].c, ds[p].c, out.data() + i * c + offset);
      offset += ds[p].c;
    } else {
      std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(offset * c));
      offset += ds[p].r;
    }
    nodes.push_back(parts[p].node());
  }
  auto captured = nodes;
  return detail::make_result<T>("concat", {r, c}, std::move(out), std::move(nodes),
                                [captured, ds, axis, c](Node<T>& o) {
                                  std::size_t offset = 0;
                                  for (std::size_t p = 0; p < captured.size(); ++p) {
                                    auto& in = *captured[p];
                                    if (in.requires_grad) {
                                      auto& g = in.ensure_grad();
                                      if (axis == 1) {
                                        for (std::size_t i = 0; i < ds[p].r; ++i)
                                          for (std::size_t j = 0; j < ds[p].c; ++j)
                                            g[i * ds[p].c + j] += o.grad[i * c + offset + j];
                                      } else {
                                        for (std::size_t k = 0; k < g.size(); ++k) g[k] += o.grad[offset * c + k];
                                      }
                                    }
                                    offset += axis == 1 ? ds[p].c : ds[p].r;
                                  }
                                });
}

// Columns [start, start + count) of a 2-D tensor.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  const auto d = detail::dims2(a, "slice_cols");
  if (count == 0 || start + count > d.c) throw DimensionError("slice_cols: range outside " + shape_str(a.shape()));
  std::vector<T> out(d.r * count);
  const auto av = a.values();
  for (std::size_t i = 0; i < d.r; ++i) std::copy_n(av.data() + i * d.c + start, count, out.data() + i * count);
  auto an = a.node();
  return detail::make_result<T>("slice_cols", {d.r, count}, std::move(out), {an}, [an, d, start, count](Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < d.r; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * d.c + start + j] += o.grad[i * count + j];
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<T> out(a.values().begin(), a.values().end());
  auto an = a.node();
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {an}, [an](Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

// Tiles a 1 x c row into an m x c matrix.
template <class T>
Tensor<T> repeat_rows(const Tensor<T>& a, std::size_t m) {
  const auto d = detail::dims2(a, "repeat_rows");
  if (d.r != 1) throw DimensionError("repeat_rows expects a single row, got " + shape_str(a.shape()));
  std::vector<T> out(m * d.c);
  for (std::size_t i = 0; i < m; ++i) std::copy(a.values().begin(), a.values().end(), out.begin() + i * d.c);
  auto an = a.node();
  return detail::make_result<T>("repeat_rows", {m, d.c}, std::move(out), {an}, [an, m, d](Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d.c; ++j) ga[j] += o.grad[i * d.c + j];
  });
}

// Numerically stable softmax along `axis` (max-subtraction per line).
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  detail::check_axis(axis, "softmax");
  const auto d = detail::dims2(a, "softmax");
  std::vector<T> out(a.numel());
  const auto av = a.values();
  detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, av[off + t * st]);
    T s = 0;
    for (std::size_t t = 0; t < len; ++t) s += (out[off + t * st] = std::exp(av[off + t * st] - mx));
    const T inv = T(1) / s;
    for (std::size_t t = 0; t < len; ++t) out[off + t * st] *= inv;
  });
  auto an = a.node();
  return detail::make_result<T>("softmax", a.shape(), std::move(out), {an}, [an, d, axis](Node<T>& o) {
    auto& ga = an->ensure_grad();
    detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
      T dot = 0;
      for (std::size_t t = 0; t < len; ++t) dot += o.grad[off + t * st] * o.value[off + t * st];
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t k = off + t * st;
        ga[k] += o.value[k] * (o.grad[k] - dot);
      }
    });
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis) {
  detail::check_axis(axis, "log_softmax");
  const auto d = detail::dims2(a, "log_softmax");
  std::vector<T> out(a.numel());
  const auto av = a.values();
  detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < len; ++t) mx = std::max(mx, av[off + t * st]);
    T s = 0;
    for (std::size_t t = 0; t < len; ++t) s += std::exp(av[off + t * st] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t t = 0; t < len; ++t) out[off + t * st] = av[off + t * st] - lse;
  });
  auto an = a.node();
  return detail::make_result<T>("log_softmax", a.shape(), std::move(out), {an}, [an, d, axis](Node<T>& o) {
    auto& ga = an->ensure_grad();
    detail::for_each_line(d, axis, [&](std::size_t off, std::size_t st, std::size_t len) {
      T gs = 0;
      for (std::size_t t = 0; t < len; ++t) gs += o.grad[off + t * st];
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t k = off + t * st;
        ga[k] += o.grad[k] - std::exp(o.value[k]) * gs;
      }
    });
  });
}

// Row-wise selection: out[i] = a[i, index[i]], shape m x 1.
template <class T>
Tensor<T> pick(const Tensor<T>& a, const std::vector<std::size_t>& index) {
  const auto d = detail::dims2(a, "pick");
  if (index.size() != d.r) throw DimensionError("pick: index count differs from row count");
  std::vector<T> out(d.r);
  for (std::size_t i = 0; i < d.r; ++i) {
    if (index[i] >= d.c) throw ContractError("pick: column index out of range");
    out[i] = a.values()[i * d.c + index[i]];
  }
  auto an = a.node();
  return detail::make_result<T>("pick", {d.r, 1}, std::move(out), {an}, [an, d, index](Node<T>& o) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < d.r; ++i) ga[i * d.c + index[i]] += o.grad[i];
  });
}

}  // namespace capt::ad
