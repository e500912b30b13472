#include "trfeddis/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "trfeddis/specfun.hpp"

namespace trfeddis::nd {

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::leaf(BasicTensor<T> value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Graph<T>::record(BasicTensor<T> value, std::vector<std::size_t> inputs,
                        BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [this](std::size_t i) { return nodes_[i].requires_grad; });
  if (node.requires_grad) node.backward = std::move(backward);
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
std::vector<T>& Graph<T>::grad_buffer(std::size_t id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

template <typename T>
void Graph<T>::zero_grad() {
  for (auto& node : nodes_) node.grad.clear();
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (&loss.graph() != this) throw std::invalid_argument("backward: loss belongs to another graph");
  if (loss.value().size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  for (auto& node : nodes_) {
    if (!node.is_leaf) node.grad.clear();
  }
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] += T(1);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& node = nodes_[id];
    if (node.is_leaf || !node.requires_grad || node.grad.empty()) continue;
    node.backward(*this, id);
  }
}

template class Graph<float>;
template class Graph<double>;

// ---------------------------------------------------------------------------
// Kernels

namespace {

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(const T* src, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": mixed graphs");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     to_string(a.shape()));
  }
}

// Shared shape of a unary elementwise op: value computed by `f`, gradient
// factor df(x, y) multiplies the incoming gradient.
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> x, F f, DF df) {
  auto& g = x.graph();
  const auto& xv = x.value();
  BasicTensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = static_cast<T>(f(static_cast<double>(xv[i])));
  const std::size_t xid = x.id();
  return g.record(std::move(out), {xid}, [xid, df](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    const auto& xv = g.value(xid);
    const auto& yv = g.value(self);
    auto& dx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      dx[i] += static_cast<T>(static_cast<double>(dy[i]) *
                              df(static_cast<double>(xv[i]), static_cast<double>(yv[i])));
    }
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().record(std::move(out), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    for (std::size_t id : {ai, bi}) {
      if (!g.requires_grad(id)) continue;
      auto& d = g.grad_buffer(id);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().record(std::move(out), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    if (g.requires_grad(ai)) {
      auto& d = g.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    }
    if (g.requires_grad(bi)) {
      auto& d = g.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] -= dy[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().record(std::move(out), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    const auto& av = g.value(ai);
    const auto& bv = g.value(bi);
    if (g.requires_grad(ai)) {
      auto& d = g.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * bv[i];
    }
    if (g.requires_grad(bi)) {
      auto& d = g.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "div");
  BasicTensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (bv[i] == T(0)) throw NumericDomainError("div: division by zero");
    out[i] /= bv[i];
  }
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().record(std::move(out), {ai, bi}, [ai, bi](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    const auto& bv = g.value(bi);
    const auto& yv = g.value(self);
    if (g.requires_grad(ai)) {
      auto& d = g.grad_buffer(ai);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] / bv[i];
    }
    if (g.requires_grad(bi)) {
      auto& d = g.grad_buffer(bi);
      for (std::size_t i = 0; i < dy.size(); ++i) d[i] -= dy[i] * yv[i] / bv[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

template <typename T>
Var<T> relu(Var<T> x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

template <typename T>
Var<T> softplus(Var<T> x) {
  return unary(
      x, [](double v) { return specfun::softplus(v); },
      [](double v, double) { return specfun::sigmoid(v); });
}

template <typename T>
Var<T> exp(Var<T> x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

template <typename T>
Var<T> log(Var<T> x, double floor) {
  if (floor <= 0.0) {
    for (auto v : x.value().data()) {
      if (!(v > T(0))) throw NumericDomainError("log: argument must be > 0");
    }
  }
  return unary(
      x, [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

template <typename T>
Var<T> digamma(Var<T> x) {
  for (auto v : x.value().data()) {
    if (!(v > T(0))) throw NumericDomainError("digamma: argument must be > 0");
  }
  return unary(
      x, [](double v) { return specfun::digamma(v); },
      [](double v, double) { return specfun::trigamma(v); });
}

template <typename T>
Var<T> lgamma(Var<T> x) {
  for (auto v : x.value().data()) {
    if (!(v > T(0))) throw NumericDomainError("lgamma: argument must be > 0");
  }
  return unary(
      x, [](double v) { return specfun::lgamma(v); },
      [](double v, double) { return specfun::digamma(v); });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

template <typename T>
Var<T> softmax(Var<T> x) {
  require_rank(x, 2, "softmax");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const auto& xv = x.value();
  BasicTensor<T> out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(xv.at(r, c)));
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(xv.at(r, c)) - mx);
    for (std::size_t c = 0; c < cols; ++c) {
      out.at(r, c) = static_cast<T>(std::exp(static_cast<double>(xv.at(r, c)) - mx) / z);
    }
  }
  const std::size_t xid = x.id();
  return x.graph().record(std::move(out), {xid}, [xid, rows, cols](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    const auto& y = g.value(self);
    auto& dx = g.grad_buffer(xid);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(dy[r * cols + c]) * y.at(r, c);
      for (std::size_t c = 0; c < cols; ++c) {
        dx[r * cols + c] += static_cast<T>(y.at(r, c) * (dy[r * cols + c] - dot));
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  double acc = 0.0;
  for (auto v : x.value().data()) acc += v;
  const std::size_t xid = x.id();
  return x.graph().record(BasicTensor<T>::scalar(static_cast<T>(acc)), {xid},
                          [xid](Graph<T>& g, std::size_t self) {
                            const T dy = g.grad(self)[0];
                            for (auto& d : g.grad_buffer(xid)) d += dy;
                          });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  double acc = 0.0;
  for (auto v : x.value().data()) acc += v;
  const std::size_t xid = x.id();
  return x.graph().record(BasicTensor<T>::scalar(static_cast<T>(acc / n)), {xid},
                          [xid, n](Graph<T>& g, std::size_t self) {
                            const T dy = static_cast<T>(g.grad(self)[0] / static_cast<double>(n));
                            for (auto& d : g.grad_buffer(xid)) d += dy;
                          });
}

template <typename T>
Var<T> row_sum(Var<T> x) {
  require_rank(x, 2, "row_sum");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  BasicTensor<T> out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += x.value().at(r, c);
    out[r] = static_cast<T>(acc);
  }
  const std::size_t xid = x.id();
  return x.graph().record(std::move(out), {xid}, [xid, rows, cols](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    auto& dx = g.grad_buffer(xid);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dx[r * cols + c] += dy[r];
  });
}

template <typename T>
Var<T> expand_cols(Var<T> v, std::size_t k) {
  require_rank(v, 1, "expand_cols");
  const std::size_t rows = v.shape()[0];
  BasicTensor<T> out(Shape{rows, k});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < k; ++c) out.at(r, c) = v.value()[r];
  const std::size_t vid = v.id();
  return v.graph().record(std::move(out), {vid}, [vid, rows, k](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    auto& dv = g.grad_buffer(vid);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += dy[r * k + c];
      dv[r] += static_cast<T>(acc);
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  BasicTensor<T> out = x.value().reshaped(std::move(shape));
  const std::size_t xid = x.id();
  return x.graph().record(std::move(out), {xid}, [xid](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    auto& dx = g.grad_buffer(xid);
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
  });
}

template <typename T>
Var<T> add_bias(Var<T> x, Var<T> b) {
  require_rank(b, 1, "add_bias");
  const std::size_t f = b.shape()[0];
  if (x.shape().empty() || x.shape().back() != f) {
    throw ShapeError("add_bias: trailing extent of " + to_string(x.shape()) + " != " +
                     std::to_string(f));
  }
  BasicTensor<T> out = x.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % f];
  const std::size_t xid = x.id(), bid = b.id();
  return x.graph().record(std::move(out), {xid, bid}, [xid, bid, f](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    if (g.requires_grad(xid)) {
      auto& dx = g.grad_buffer(xid);
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    }
    if (g.requires_grad(bid)) {
      std::vector<double> acc(f, 0.0);
      for (std::size_t i = 0; i < dy.size(); ++i) acc[i % f] += dy[i];
      auto& db = g.grad_buffer(bid);
      for (std::size_t j = 0; j < f; ++j) db[j] += static_cast<T>(acc[j]);
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner extents differ " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  BasicTensor<T> out(Shape{m, n});
  gemm_nn(m, n, k, a.value().data().data(), b.value().data().data(), out.data().data());
  const std::size_t ai = a.id(), bi = b.id();
  return a.graph().record(std::move(out), {ai, bi}, [ai, bi, m, n, k](Graph<T>& g, std::size_t self) {
    const T* dy = g.grad(self).data();
    if (g.requires_grad(ai)) {
      const auto bt = transpose(g.value(bi).data().data(), k, n);
      gemm_nn(m, k, n, dy, bt.data(), g.grad_buffer(ai).data());
    }
    if (g.requires_grad(bi)) {
      gemm_tn(k, n, m, g.value(ai).data().data(), dy, g.grad_buffer(bi).data());
    }
  });
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias) {
  require_rank(input, 2, "dense");
  require_rank(weight, 2, "dense");
  require_rank(bias, 1, "dense");
  const std::size_t batch = input.shape()[0], in = input.shape()[1], outw = weight.shape()[1];
  if (weight.shape()[0] != in || bias.shape()[0] != outw) {
    throw ShapeError("dense: input " + to_string(input.shape()) + ", weight " +
                     to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  }
  BasicTensor<T> out(Shape{batch, outw});
  for (std::size_t r = 0; r < batch; ++r)
    std::copy(bias.value().data().begin(), bias.value().data().end(), out.data().begin() + r * outw);
  gemm_nn(batch, outw, in, input.value().data().data(), weight.value().data().data(),
          out.data().data());
  const std::size_t xi = input.id(), wi = weight.id(), bi = bias.id();
  return input.graph().record(
      std::move(out), {xi, wi, bi}, [xi, wi, bi, batch, in, outw](Graph<T>& g, std::size_t self) {
        const T* dy = g.grad(self).data();
        if (g.requires_grad(xi)) {
          const auto wt = transpose(g.value(wi).data().data(), in, outw);
          gemm_nn(batch, in, outw, dy, wt.data(), g.grad_buffer(xi).data());
        }
        if (g.requires_grad(wi)) {
          gemm_tn(in, outw, batch, g.value(xi).data().data(), dy, g.grad_buffer(wi).data());
        }
        if (g.requires_grad(bi)) {
          std::vector<double> acc(outw, 0.0);
          for (std::size_t r = 0; r < batch; ++r)
            for (std::size_t j = 0; j < outw; ++j) acc[j] += dy[r * outw + j];
          auto& db = g.grad_buffer(bi);
          for (std::size_t j = 0; j < outw; ++j) db[j] += static_cast<T>(acc[j]);
        }
      });
}

namespace {

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, ksize, stride, padding;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * ksize * ksize; }
  std::size_t pixels() const { return out_h * out_w; }
};

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  if (s == 0) throw ShapeError("conv2d: stride must be positive");
  if (in + 2 * p < k || (in + 2 * p - k) % s != 0) {
    throw ShapeError("conv2d: non-integral output extent for input " + std::to_string(in) +
                     ", kernel " + std::to_string(k) + ", stride " + std::to_string(s) +
                     ", padding " + std::to_string(p));
  }
  return (in + 2 * p - k) / s + 1;
}

// col[(c*k + ki)*k + kj, oy*out_w + ox] = x[c, oy*s + ki - p, ox*s + kj - p]
template <typename T>
void im2col(const ConvGeometry& geo, const T* x, T* col) {
  const std::size_t hw = geo.pixels();
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t ki = 0; ki < geo.ksize; ++ki) {
      for (std::size_t kj = 0; kj < geo.ksize; ++kj) {
        T* row = col + ((c * geo.ksize + ki) * geo.ksize + kj) * hw;
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const long iy = static_cast<long>(oy * geo.stride + ki) - static_cast<long>(geo.padding);
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const long ix =
                static_cast<long>(ox * geo.stride + kj) - static_cast<long>(geo.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(geo.height) &&
                                ix < static_cast<long>(geo.width);
            row[oy * geo.out_w + ox] =
                inside ? x[(c * geo.height + iy) * geo.width + ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& geo, const T* col, T* dx) {
  const std::size_t hw = geo.pixels();
  for (std::size_t c = 0; c < geo.channels; ++c) {
    for (std::size_t ki = 0; ki < geo.ksize; ++ki) {
      for (std::size_t kj = 0; kj < geo.ksize; ++kj) {
        const T* row = col + ((c * geo.ksize + ki) * geo.ksize + kj) * hw;
        for (std::size_t oy = 0; oy < geo.out_h; ++oy) {
          const long iy = static_cast<long>(oy * geo.stride + ki) - static_cast<long>(geo.padding);
          if (iy < 0 || iy >= static_cast<long>(geo.height)) continue;
          for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
            const long ix =
                static_cast<long>(ox * geo.stride + kj) - static_cast<long>(geo.padding);
            if (ix < 0 || ix >= static_cast<long>(geo.width)) continue;
            dx[(c * geo.height + iy) * geo.width + ix] += row[oy * geo.out_w + ox];
          }
        }
      }
    }
  }
}

template <typename T>
ConvGeometry conv_geometry(const Shape& xs, const Shape& ks, const Shape& bs, std::size_t stride,
                           std::size_t padding) {
  if (xs.size() != 4 || ks.size() != 4 || bs.size() != 1) {
    throw ShapeError("conv2d: expected input[B,C,H,W], kernel[O,C,k,k], bias[O]; got " +
                     to_string(xs) + ", " + to_string(ks) + ", " + to_string(bs));
  }
  if (ks[1] != xs[1] || ks[2] != ks[3] || bs[0] != ks[0]) {
    throw ShapeError("conv2d: incompatible input " + to_string(xs) + ", kernel " + to_string(ks) +
                     ", bias " + to_string(bs));
  }
  ConvGeometry geo{xs[0], xs[1], xs[2], xs[3], ks[0], ks[2], stride, padding, 0, 0};
  geo.out_h = conv_extent(geo.height, geo.ksize, stride, padding);
  geo.out_w = conv_extent(geo.width, geo.ksize, stride, padding);
  return geo;
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding) {
  const ConvGeometry geo =
      conv_geometry<T>(input.shape(), kernel.shape(), bias.shape(), stride, padding);
  const std::size_t patch = geo.patch(), hw = geo.pixels();
  const std::size_t in_sz = geo.channels * geo.height * geo.width;
  const std::size_t out_sz = geo.out_channels * hw;

  auto cols = std::make_shared<std::vector<T>>(geo.batch * patch * hw);
  BasicTensor<T> out(Shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w});
  const T* x = input.value().data().data();
  const T* kmat = kernel.value().data().data();
  const auto& bv = bias.value();
  for (std::size_t b = 0; b < geo.batch; ++b) {
    T* col = cols->data() + b * patch * hw;
    im2col(geo, x + b * in_sz, col);
    T* ob = out.data().data() + b * out_sz;
    for (std::size_t o = 0; o < geo.out_channels; ++o) std::fill(ob + o * hw, ob + (o + 1) * hw, bv[o]);
    gemm_nn(geo.out_channels, hw, patch, kmat, col, ob);
  }

  const std::size_t xi = input.id(), ki = kernel.id(), bi = bias.id();
  return input.graph().record(
      std::move(out), {xi, ki, bi},
      [xi, ki, bi, geo, cols, patch, hw, in_sz, out_sz](Graph<T>& g, std::size_t self) {
        const T* dy = g.grad(self).data();
        if (g.requires_grad(bi)) {
          auto& db = g.grad_buffer(bi);
          for (std::size_t o = 0; o < geo.out_channels; ++o) {
            double acc = 0.0;
            for (std::size_t b = 0; b < geo.batch; ++b) {
              const T* row = dy + b * out_sz + o * hw;
              for (std::size_t p = 0; p < hw; ++p) acc += row[p];
            }
            db[o] += static_cast<T>(acc);
          }
        }
        if (g.requires_grad(ki)) {
          T* dk = g.grad_buffer(ki).data();
          for (std::size_t b = 0; b < geo.batch; ++b) {
            const auto colt = transpose(cols->data() + b * patch * hw, patch, hw);
            gemm_nn(geo.out_channels, patch, hw, dy + b * out_sz, colt.data(), dk);
          }
        }
        if (g.requires_grad(xi)) {
          const T* kmat = g.value(ki).data().data();
          T* dx = g.grad_buffer(xi).data();
          std::vector<T> dcol(patch * hw);
          for (std::size_t b = 0; b < geo.batch; ++b) {
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_tn(patch, hw, geo.out_channels, kmat, dy + b * out_sz, dcol.data());
            col2im(geo, dcol.data(), dx + b * in_sz);
          }
        }
      });
}

template <typename T>
Var<T> max_pool2d(Var<T> input, std::size_t size) {
  require_rank(input, 4, "max_pool2d");
  if (size == 0) throw ShapeError("max_pool2d: window must be positive");
  const auto& s = input.shape();
  const std::size_t nb = s[0], nc = s[1], h = s[2], w = s[3];
  const std::size_t oh = h / size, ow = w / size;
  if (oh == 0 || ow == 0) throw ShapeError("max_pool2d: window larger than input " + to_string(s));
  BasicTensor<T> out(Shape{nb, nc, oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& xv = input.value();
  for (std::size_t plane = 0; plane < nb * nc; ++plane) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = plane * h * w + (oy * size) * w + ox * size;
        for (std::size_t dy = 0; dy < size; ++dy) {
          for (std::size_t dx = 0; dx < size; ++dx) {
            const std::size_t idx = plane * h * w + (oy * size + dy) * w + ox * size + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  const std::size_t xi = input.id();
  return input.graph().record(std::move(out), {xi}, [xi, argmax](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    auto& dx = g.grad_buffer(xi);
    for (std::size_t o = 0; o < dy.size(); ++o) dx[(*argmax)[o]] += dy[o];
  });
}

template <typename T>
Var<T> avg_pool2d(Var<T> input, std::size_t size) {
  require_rank(input, 4, "avg_pool2d");
  if (size == 0) throw ShapeError("avg_pool2d: window must be positive");
  const auto& s = input.shape();
  const std::size_t nb = s[0], nc = s[1], h = s[2], w = s[3];
  const std::size_t oh = h / size, ow = w / size;
  if (oh == 0 || ow == 0) throw ShapeError("avg_pool2d: window larger than input " + to_string(s));
  BasicTensor<T> out(Shape{nb, nc, oh, ow});
  const auto& xv = input.value();
  const T inv = T(1) / static_cast<T>(size * size);
  for (std::size_t plane = 0; plane < nb * nc; ++plane) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = 0;
        for (std::size_t dy = 0; dy < size; ++dy) {
          for (std::size_t dx = 0; dx < size; ++dx) acc += xv[plane * h * w + (oy * size + dy) * w + ox * size + dx];
        }
        out[(plane * oh + oy) * ow + ox] = acc * inv;
      }
    }
  }
  const std::size_t xi = input.id();
  return input.graph().record(std::move(out), {xi}, [xi, nb, nc, h, w, oh, ow, size, inv](Graph<T>& g, std::size_t self) {
    const auto dy = g.grad(self);
    auto& dx = g.grad_buffer(xi);
    for (std::size_t plane = 0; plane < nb * nc; ++plane) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const T gv = dy[(plane * oh + oy) * ow + ox] * inv;
          for (std::size_t a = 0; a < size; ++a) {
            for (std::size_t b = 0; b < size; ++b) dx[plane * h * w + (oy * size + a) * w + ox * size + b] += gv;
          }
        }
      }
    }
  });
}

template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T> state, Mode mode) {
  const auto& s = input.shape();
  if (s.size() < 2) throw ShapeError("batch_norm: expected input[B,C,...], got " + to_string(s));
  const std::size_t nb = s[0], nc = s[1];
  const std::size_t inner = numel(s) / (nb * nc);
  if (gamma.shape() != Shape{nc} || beta.shape() != Shape{nc}) {
    throw ShapeError("batch_norm: affine parameters must have shape [" + std::to_string(nc) + "]");
  }
  if (!state.running_mean || !state.running_var || state.running_mean->shape() != Shape{nc} ||
      state.running_var->shape() != Shape{nc}) {
    throw ShapeError("batch_norm: running statistics missing or mis-shaped");
  }
  if (mode == Mode::kTrain && nb < 2) {
    throw ShapeError("batch_norm: train mode needs a batch of at least 2, got " + std::to_string(nb));
  }
  const std::size_t count = nb * inner;
  const auto& xv = input.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();

  std::vector<double> mu(nc), inv_std(nc);
  if (mode == Mode::kTrain) {
    for (std::size_t c = 0; c < nc; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < inner; ++i) acc += xv[(b * nc + c) * inner + i];
      const double m = acc / count;
      double var = 0.0;
      for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t i = 0; i < inner; ++i) {
          const double d = xv[(b * nc + c) * inner + i] - m;
          var += d * d;
        }
      var /= count;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      auto& rm = (*state.running_mean)[c];
      auto& rv = (*state.running_var)[c];
      const double unbiased = count > 1 ? var * count / (count - 1) : var;
      rm = static_cast<T>((1.0 - state.momentum) * rm + state.momentum * m);
      rv = static_cast<T>((1.0 - state.momentum) * rv + state.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < nc; ++c) {
      mu[c] = (*state.running_mean)[c];
      inv_std[c] = 1.0 / std::sqrt(static_cast<double>((*state.running_var)[c]) + state.eps);
    }
  }

  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  BasicTensor<T> out(s);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < nc; ++c)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (b * nc + c) * inner + i;
        const double xh = (xv[idx] - mu[c]) * inv_std[c];
        (*xhat)[idx] = static_cast<T>(xh);
        out[idx] = static_cast<T>(gv[c] * xh + bv[c]);
      }

  const std::size_t xi = input.id(), gi = gamma.id(), bi = beta.id();
  const bool train = mode == Mode::kTrain;
  return input.graph().record(
      std::move(out), {xi, gi, bi},
      [=, inv_std = std::move(inv_std)](Graph<T>& g, std::size_t self) {
        const auto dy = g.grad(self);
        const auto& gv = g.value(gi);
        std::vector<double> sum_dy(nc, 0.0), sum_dy_xhat(nc, 0.0);
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t i = 0; i < inner; ++i) {
              const std::size_t idx = (b * nc + c) * inner + i;
              sum_dy[c] += dy[idx];
              sum_dy_xhat[c] += static_cast<double>(dy[idx]) * (*xhat)[idx];
            }
        if (g.requires_grad(gi)) {
          auto& dg = g.grad_buffer(gi);
          for (std::size_t c = 0; c < nc; ++c) dg[c] += static_cast<T>(sum_dy_xhat[c]);
        }
        if (g.requires_grad(bi)) {
          auto& db = g.grad_buffer(bi);
          for (std::size_t c = 0; c < nc; ++c) db[c] += static_cast<T>(sum_dy[c]);
        }
        if (g.requires_grad(xi)) {
          auto& dx = g.grad_buffer(xi);
          for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t c = 0; c < nc; ++c) {
              const double k = gv[c] * inv_std[c];
              for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t idx = (b * nc + c) * inner + i;
                if (train) {
                  dx[idx] += static_cast<T>(
                      k * (dy[idx] - sum_dy[c] / count - (*xhat)[idx] * sum_dy_xhat[c] / count));
                } else {
                  dx[idx] += static_cast<T>(k * dy[idx]);
                }
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// Reference kernels

namespace reference {

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel,
                      const BasicTensor<T>& bias, std::size_t stride, std::size_t padding) {
  const ConvGeometry geo =
      conv_geometry<T>(input.shape(), kernel.shape(), bias.shape(), stride, padding);
  BasicTensor<T> out(Shape{geo.batch, geo.out_channels, geo.out_h, geo.out_w});
  for (std::size_t b = 0; b < geo.batch; ++b)
    for (std::size_t o = 0; o < geo.out_channels; ++o)
      for (std::size_t oy = 0; oy < geo.out_h; ++oy)
        for (std::size_t ox = 0; ox < geo.out_w; ++ox) {
          double acc = bias[o];
          for (std::size_t c = 0; c < geo.channels; ++c)
            for (std::size_t ki = 0; ki < geo.ksize; ++ki)
              for (std::size_t kj = 0; kj < geo.ksize; ++kj) {
                const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(padding);
                const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(geo.height) ||
                    ix >= static_cast<long>(geo.width))
                  continue;
                acc += static_cast<double>(
                           input[((b * geo.channels + c) * geo.height + iy) * geo.width + ix]) *
                       kernel[((o * geo.channels + c) * geo.ksize + ki) * geo.ksize + kj];
              }
          out[((b * geo.out_channels + o) * geo.out_h + oy) * geo.out_w + ox] = static_cast<T>(acc);
        }
  return out;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("reference::matmul: bad shapes " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  BasicTensor<T> out(Shape{a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < a.dim(1); ++k) acc += static_cast<double>(a.at(i, k)) * b.at(k, j);
      out.at(i, j) = static_cast<T>(acc);
    }
  return out;
}

}  // namespace reference

// ---------------------------------------------------------------------------
// Instantiations

#define TRFEDDIS_INSTANTIATE_OPS(T)                                                           \
  template Var<T> add(Var<T>, Var<T>);                                                        \
  template Var<T> sub(Var<T>, Var<T>);                                                        \
  template Var<T> mul(Var<T>, Var<T>);                                                        \
  template Var<T> div(Var<T>, Var<T>);                                                        \
  template Var<T> scale(Var<T>, double);                                                      \
  template Var<T> add_scalar(Var<T>, double);                                                 \
  template Var<T> relu(Var<T>);                                                               \
  template Var<T> softplus(Var<T>);                                                           \
  template Var<T> exp(Var<T>);                                                                \
  template Var<T> log(Var<T>, double);                                                        \
  template Var<T> digamma(Var<T>);                                                            \
  template Var<T> lgamma(Var<T>);                                                             \
  template Var<T> softmax(Var<T>);                                                            \
  template Var<T> sum(Var<T>);                                                                \
  template Var<T> mean(Var<T>);                                                               \
  template Var<T> row_sum(Var<T>);                                                            \
  template Var<T> expand_cols(Var<T>, std::size_t);                                           \
  template Var<T> reshape(Var<T>, Shape);                                                     \
  template Var<T> add_bias(Var<T>, Var<T>);                                                   \
  template Var<T> matmul(Var<T>, Var<T>);                                                     \
  template Var<T> dense(Var<T>, Var<T>, Var<T>);                                              \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                   \
  template Var<T> max_pool2d(Var<T>, std::size_t);                                            \
  template Var<T> avg_pool2d(Var<T>, std::size_t);                                            \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormState<T>, Mode);                \
  template BasicTensor<T> reference::conv2d(const BasicTensor<T>&, const BasicTensor<T>&,     \
                                            const BasicTensor<T>&, std::size_t, std::size_t); \
  template BasicTensor<T> reference::matmul(const BasicTensor<T>&, const BasicTensor<T>&);

TRFEDDIS_INSTANTIATE_OPS(float)
TRFEDDIS_INSTANTIATE_OPS(double)

#undef TRFEDDIS_INSTANTIATE_OPS

}  // namespace trfeddis::nd
