#include "advflyp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "advflyp/error.hpp"

namespace advflyp {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) fail(ErrorKind::Dimension, "zero-sized dimension in " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) fail(ErrorKind::Dimension, "zero-sized dimension in " + shape_string(shape_));
  if (data_.size() != shape_size(shape_))
    fail(ErrorKind::Dimension, "data length " + std::to_string(data_.size()) + " does not match shape " +
                                   shape_string(shape_));
}

Tensor Tensor::scalar(double value) { return Tensor({}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t n = rows.size();
  const std::size_t k = n ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(n * k);
  for (const auto& r : rows) {
    if (r.size() != k) fail(ErrorKind::Dimension, "ragged matrix literal");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({n, k}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) fail(ErrorKind::Contract, "item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    fail(ErrorKind::Dimension, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor out(std::move(shape), data_);
  out.requires_grad_ = requires_grad_;
  return out;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin >= end || end > shape_[0])
    fail(ErrorKind::Dimension, "bad row slice of " + shape_string(shape_));
  const std::size_t stride = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(data_.begin() + begin * stride, data_.begin() + end * stride));
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

// ---- graph --------------------------------------------------------------

const Tensor& Var::value() const { return graph_->value(id_); }
bool Var::requires_grad() const { return graph_->requires_grad(id_); }

const Tensor& Gradients::at(NodeId id) const {
  if (!contains(id)) fail(ErrorKind::Contract, "no gradient recorded for node " + std::to_string(id));
  return *grads_[id];
}

std::size_t Gradients::count() const {
  return static_cast<std::size_t>(std::count_if(grads_.begin(), grads_.end(), [](const auto& g) { return g.has_value(); }));
}

Var Graph::variable(Tensor value) {
  const bool rg = value.requires_grad();
  nodes_.push_back(Node{std::move(value), {}, nullptr, rg});
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
  value.set_requires_grad(false);
  nodes_.push_back(Node{std::move(value), {}, nullptr, false});
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Graph::record(Tensor value, std::initializer_list<Var> inputs, BackwardRule rule) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(rule));
}

Var Graph::record(Tensor value, const std::vector<Var>& inputs, BackwardRule rule) {
  Node node;
  node.value = std::move(value);
  node.rule = std::move(rule);
  for (const Var& in : inputs) {
    if (&in.graph() != this) fail(ErrorKind::Contract, "op mixes nodes of different graphs");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

std::vector<std::optional<Tensor>> Graph::sweep(Var loss) const {
  if (&loss.graph() != this) fail(ErrorKind::Contract, "loss belongs to another graph");
  const Tensor& lv = nodes_[loss.id()].value;
  if (!lv.is_scalar()) fail(ErrorKind::Contract, "backward needs a scalar loss, got " + shape_string(lv.shape()));

  std::vector<std::optional<Tensor>> grads(loss.id() + 1);
  if (!nodes_[loss.id()].requires_grad) return grads;
  grads[loss.id()] = Tensor(lv.shape(), 1.0);

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grads[id] || !node.rule) continue;
    in_values.clear();
    in_grads.clear();
    for (NodeId in : node.inputs) {
      in_values.push_back(&nodes_[in].value);
      if (nodes_[in].requires_grad) {
        if (!grads[in]) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
        in_grads.push_back(&*grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    node.rule(BackwardContext{node.value, *grads[id], in_values, in_grads});
    // Interior gradients are not part of the result.
    if (!node.inputs.empty() || node.rule) grads[id].reset();
  }
  return grads;
}

Gradients Graph::backward(Var loss) const {
  Gradients out;
  out.grads_ = sweep(loss);
  return out;
}

void Graph::backward_accumulate(Var loss, Gradients& into) const {
  auto fresh = sweep(loss);
  if (into.grads_.size() < fresh.size()) into.grads_.resize(fresh.size());
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    if (!fresh[i]) continue;
    if (!into.grads_[i]) {
      into.grads_[i] = std::move(fresh[i]);
      continue;
    }
    auto dst = into.grads_[i]->data();
    auto src = fresh[i]->data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
  }
}

// ---- kernels ------------------------------------------------------------

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(ErrorKind::Dimension, std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                                   shape_string(b.shape()) + " differ");
}

void require_matrix(const char* op, const Tensor& m) {
  if (m.ndim() != 2) fail(ErrorKind::Dimension, std::string(op) + ": expected a matrix, got " + shape_string(m.shape()));
}

void require_finite(const char* op, const Tensor& t) {
  if (!t.all_finite()) fail(ErrorKind::Numeric, std::string(op) + ": non-finite input");
}

// c[M×P] += a[M×K] · b[K×P]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * p;
    const double* ai = a + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      if (aik == 0.0) continue;
      const double* bk = b + kk * p;
      for (std::size_t j = 0; j < p; ++j) ci[j] += aik * bk[j];
    }
  }
}

// c[M×K] += a[M×P] · b[K×P]ᵀ
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t p, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * p;
    double* ci = c + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double* bk = b + kk * p;
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += ai[j] * bk[j];
      ci[kk] += acc;
    }
  }
}

// c[K×P] += a[M×K]ᵀ · b[M×P]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * p;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      if (aik == 0.0) continue;
      double* ck = c + kk * p;
      for (std::size_t j = 0; j < p; ++j) ck[j] += aik * bi[j];
    }
  }
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out(a.shape());
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

constexpr double kDegenerateNorm = 1e-12;

}  // namespace

// ---- ops ----------------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
    fail(ErrorKind::Dimension, "matmul: cannot multiply " + shape_string(av.shape()) + " by " + shape_string(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), p = bv.dim(1);
  Tensor out({m, p});
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, p);
  return a.graph().record(std::move(out), {a, b}, [m, k, p](const BackwardContext& ctx) {
    const double* g = ctx.output_grad.data().data();
    if (Tensor* ga = ctx.input_grads[0]) gemm_nt(g, ctx.inputs[1]->data().data(), ga->data().data(), m, p, k);
    if (Tensor* gb = ctx.input_grads[1]) gemm_tn(ctx.inputs[0]->data().data(), g, gb->data().data(), m, k, p);
  });
}

Var transpose(Var m) {
  const Tensor& v = m.value();
  require_matrix("transpose", v);
  const std::size_t r = v.dim(0), c = v.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = v.at(i, j);
  return m.graph().record(std::move(out), {m}, [r, c](const BackwardContext& ctx) {
    Tensor& g = *ctx.input_grads[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g.at(i, j) += ctx.output_grad.at(j, i);
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  auto dst = out.data();
  auto src = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  out.set_requires_grad(false);
  return a.graph().record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    for (Tensor* gi : ctx.input_grads) {
      if (!gi) continue;
      auto d = gi->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  auto dst = out.data();
  auto src = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= src[i];
  out.set_requires_grad(false);
  return a.graph().record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    if (Tensor* ga = ctx.input_grads[0]) {
      auto d = ga->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (Tensor* gb = ctx.input_grads[1]) {
      auto d = gb->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out(a.shape());
  auto x = a.value().data();
  auto y = b.value().data();
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = x[i] * y[i];
  return a.graph().record(std::move(out), {a, b}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto x = ctx.inputs[0]->data();
    auto y = ctx.inputs[1]->data();
    if (Tensor* ga = ctx.input_grads[0]) {
      auto d = ga->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i];
    }
    if (Tensor* gb = ctx.input_grads[1]) {
      auto d = gb->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = map(a.value(), [factor](double v) { return v * factor; });
  return a.graph().record(std::move(out), {a}, [factor](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * g[i];
  });
}

Var add_row_vector(Var m, Var row) {
  const Tensor& mv = m.value();
  const Tensor& rv = row.value();
  require_matrix("add_row_vector", mv);
  if (rv.size() != mv.dim(1))
    fail(ErrorKind::Dimension, "add_row_vector: row " + shape_string(rv.shape()) + " does not fit " + shape_string(mv.shape()));
  const std::size_t n = mv.dim(0), k = mv.dim(1);
  Tensor out = mv;
  out.set_requires_grad(false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) += rv[j];
  return m.graph().record(std::move(out), {m, row}, [n, k](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    if (Tensor* gm = ctx.input_grads[0]) {
      auto d = gm->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
    }
    if (Tensor* gr = ctx.input_grads[1]) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j) (*gr)[j] += g[i * k + j];
    }
  });
}

Var relu(Var a) {
  Tensor out = map(a.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return a.graph().record(std::move(out), {a}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto x = ctx.inputs[0]->data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x[i] > 0.0) d[i] += g[i];
  });
}

Var tanh(Var a) {
  Tensor out = map(a.value(), [](double v) { return std::tanh(v); });
  return a.graph().record(std::move(out), {a}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto y = ctx.output.data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var exp(Var a) {
  Tensor out = map(a.value(), [](double v) { return std::exp(v); });
  return a.graph().record(std::move(out), {a}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto y = ctx.output.data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] * y[i];
  });
}

Var log(Var a) {
  const Tensor& v = a.value();
  for (double x : v.data())
    if (!(x > 0.0)) fail(ErrorKind::Numeric, "log of non-positive value");
  Tensor out = map(v, [](double x) { return std::log(x); });
  return a.graph().record(std::move(out), {a}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto x = ctx.inputs[0]->data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i] / x[i];
  });
}

Var log_floor(Var a, double floor) {
  if (!(floor > 0.0)) fail(ErrorKind::Contract, "log_floor needs a positive floor");
  Tensor out = map(a.value(), [floor](double x) { return std::log(std::max(x, floor)); });
  return a.graph().record(std::move(out), {a}, [floor](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto x = ctx.inputs[0]->data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i)
      if (x[i] > floor) d[i] += g[i] / x[i];
  });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph().record(Tensor::scalar(s), {a}, [](const BackwardContext& ctx) {
    const double g = ctx.output_grad[0];
    for (double& d : ctx.input_grads[0]->data()) d += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph().record(Tensor::scalar(s / n), {a}, [n](const BackwardContext& ctx) {
    const double g = ctx.output_grad[0] / n;
    for (double& d : ctx.input_grads[0]->data()) d += g;
  });
}

Var row_sum(Var m) {
  const Tensor& v = m.value();
  require_matrix("row_sum", v);
  const std::size_t n = v.dim(0), k = v.dim(1);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i] += v.at(i, j);
  return m.graph().record(std::move(out), {m}, [n, k](const BackwardContext& ctx) {
    Tensor& d = *ctx.input_grads[0];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) d.at(i, j) += ctx.output_grad[i];
  });
}

Var col_mean(Var m) {
  const Tensor& v = m.value();
  require_matrix("col_mean", v);
  const std::size_t n = v.dim(0), k = v.dim(1);
  Tensor out({1, k});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[j] += v.at(i, j);
  for (std::size_t j = 0; j < k; ++j) out[j] /= static_cast<double>(n);
  return m.graph().record(std::move(out), {m}, [n, k](const BackwardContext& ctx) {
    Tensor& d = *ctx.input_grads[0];
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) d.at(i, j) += ctx.output_grad[j] * inv;
  });
}

Var frobenius_norm(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v * v;
  return a.graph().record(Tensor::scalar(std::sqrt(s)), {a}, [](const BackwardContext& ctx) {
    const double norm = ctx.output[0];
    // Subgradient 0 at the origin.
    if (norm == 0.0) return;
    const double g = ctx.output_grad[0] / norm;
    auto x = ctx.inputs[0]->data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * x[i];
  });
}

Var row_norms(Var m) {
  const Tensor& v = m.value();
  require_matrix("row_norms", v);
  const std::size_t n = v.dim(0), k = v.dim(1);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += v.at(i, j) * v.at(i, j);
    out[i] = std::sqrt(s);
  }
  return m.graph().record(std::move(out), {m}, [n, k](const BackwardContext& ctx) {
    Tensor& d = *ctx.input_grads[0];
    const Tensor& x = *ctx.inputs[0];
    for (std::size_t i = 0; i < n; ++i) {
      const double norm = ctx.output[i];
      if (norm == 0.0) continue;
      const double g = ctx.output_grad[i] / norm;
      for (std::size_t j = 0; j < k; ++j) d.at(i, j) += g * x.at(i, j);
    }
  });
}

Var softmax_rows(Var m) {
  const Tensor& v = m.value();
  require_matrix("softmax_rows", v);
  require_finite("softmax_rows", v);
  const std::size_t n = v.dim(0), k = v.dim(1);
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, v.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (out.at(i, j) = std::exp(v.at(i, j) - mx));
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) /= z;
  }
  return m.graph().record(std::move(out), {m}, [n, k](const BackwardContext& ctx) {
    const Tensor& y = ctx.output;
    const Tensor& g = ctx.output_grad;
    Tensor& d = *ctx.input_grads[0];
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g.at(i, j) * y.at(i, j);
      for (std::size_t j = 0; j < k; ++j) d.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

Var log_softmax_rows(Var m) {
  const Tensor& v = m.value();
  require_matrix("log_softmax_rows", v);
  require_finite("log_softmax_rows", v);
  const std::size_t n = v.dim(0), k = v.dim(1);
  Tensor out({n, k});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, v.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(v.at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = v.at(i, j) - lse;
  }
  return m.graph().record(std::move(out), {m}, [n, k](const BackwardContext& ctx) {
    const Tensor& y = ctx.output;
    const Tensor& g = ctx.output_grad;
    Tensor& d = *ctx.input_grads[0];
    for (std::size_t i = 0; i < n; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < k; ++j) gs += g.at(i, j);
      for (std::size_t j = 0; j < k; ++j) d.at(i, j) += g.at(i, j) - std::exp(y.at(i, j)) * gs;
    }
  });
}

Var l2_normalize_rows(Var m) {
  const Tensor& v = m.value();
  require_matrix("l2_normalize_rows", v);
  const std::size_t n = v.dim(0), k = v.dim(1);
  Tensor out({n, k});
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += v.at(i, j) * v.at(i, j);
    norms[i] = std::sqrt(s);
    if (!(norms[i] >= kDegenerateNorm))
      fail(ErrorKind::DegenerateEmbedding, "row " + std::to_string(i) + " has norm below 1e-12");
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = v.at(i, j) / norms[i];
  }
  return m.graph().record(std::move(out), {m}, [n, k, norms = std::move(norms)](const BackwardContext& ctx) {
    const Tensor& y = ctx.output;
    const Tensor& g = ctx.output_grad;
    Tensor& d = *ctx.input_grads[0];
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += y.at(i, j) * g.at(i, j);
      for (std::size_t j = 0; j < k; ++j) d.at(i, j) += (g.at(i, j) - y.at(i, j) * dot) / norms[i];
    }
  });
}

Var gather_rows(Var m, std::vector<std::size_t> rows) {
  const Tensor& v = m.value();
  require_matrix("gather_rows", v);
  const std::size_t k = v.dim(1);
  if (rows.empty()) fail(ErrorKind::Dimension, "gather_rows: empty index list");
  Tensor out({rows.size(), k});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= v.dim(0))
      fail(ErrorKind::Dimension, "gather_rows: row " + std::to_string(rows[i]) + " out of " + shape_string(v.shape()));
    for (std::size_t j = 0; j < k; ++j) out.at(i, j) = v.at(rows[i], j);
  }
  return m.graph().record(std::move(out), {m}, [k, rows = std::move(rows)](const BackwardContext& ctx) {
    Tensor& d = *ctx.input_grads[0];
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < k; ++j) d.at(rows[i], j) += ctx.output_grad.at(i, j);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorKind::Dimension, "concat_rows: nothing to concatenate");
  const std::size_t k = parts.front().value().dim(1);
  std::size_t n = 0;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    require_matrix("concat_rows", p.value());
    if (p.value().dim(1) != k)
      fail(ErrorKind::Dimension, "concat_rows: width " + std::to_string(p.value().dim(1)) + " vs " + std::to_string(k));
    offsets.push_back(n * k);
    n += p.value().dim(0);
  }
  Tensor out({n, k});
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto src = parts[p].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(offsets[p]));
  }
  return parts.front().graph().record(std::move(out), parts, [offsets = std::move(offsets)](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    for (std::size_t p = 0; p < ctx.input_grads.size(); ++p) {
      if (!ctx.input_grads[p]) continue;
      auto d = ctx.input_grads[p]->data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[offsets[p] + i];
    }
  });
}

Var take_per_row(Var m, std::vector<std::size_t> cols) {
  const Tensor& v = m.value();
  require_matrix("take_per_row", v);
  if (cols.size() != v.dim(0))
    fail(ErrorKind::Dimension, "take_per_row: " + std::to_string(cols.size()) + " indices for " + shape_string(v.shape()));
  Tensor out({cols.size()});
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= v.dim(1)) fail(ErrorKind::Dimension, "take_per_row: column index out of range");
    out[i] = v.at(i, cols[i]);
  }
  return m.graph().record(std::move(out), {m}, [cols = std::move(cols)](const BackwardContext& ctx) {
    Tensor& d = *ctx.input_grads[0];
    for (std::size_t i = 0; i < cols.size(); ++i) d.at(i, cols[i]) += ctx.output_grad[i];
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  out.set_requires_grad(false);
  return a.graph().record(std::move(out), {a}, [](const BackwardContext& ctx) {
    auto g = ctx.output_grad.data();
    auto d = ctx.input_grads[0]->data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[i];
  });
}

}  // namespace advflyp
