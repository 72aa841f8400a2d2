#include "spectra/autodiff/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace spectra::ad {

using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(const char* op, const std::string& what) {
  throw ShapeError(std::string(op) + ": " + what);
}

std::string shapes2(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " and " + shape_str(b.shape());
}

// Wraps a forward value into a tensor, attaching the adjoint when recording.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool record = grad_enabled();
  if (record) {
    record = false;
    for (const auto& t : inputs) record = record || t.requires_grad();
  }
  if (record) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input `k`, or nullptr when it needs none.
double* grad_ptr(Node& self, std::size_t k) {
  Node& in = *self.inputs[k];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

const double* value_ptr(const Node& self, std::size_t k) { return self.inputs[k]->value.data(); }

// --- broadcasting -----------------------------------------------------------

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

BroadcastPlan plan_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  BroadcastPlan p;
  if (sa == sb) {
    p.out = sa;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(sa.size(), sb.size());
  p.out.assign(r, 1);
  std::vector<std::size_t> da(r, 1), db(r, 1);
  std::copy(sa.begin(), sa.end(), da.begin() + static_cast<std::ptrdiff_t>(r - sa.size()));
  std::copy(sb.begin(), sb.end(), db.begin() + static_cast<std::ptrdiff_t>(r - sb.size()));
  for (std::size_t i = 0; i < r; ++i) {
    if (da[i] == db[i] || db[i] == 1) {
      p.out[i] = da[i];
    } else if (da[i] == 1) {
      p.out[i] = db[i];
    } else {
      shape_fail(op, "cannot broadcast " + shapes2(a, b));
    }
  }
  auto csa = contiguous_strides(da);
  auto csb = contiguous_strides(db);
  p.stride_a.resize(r);
  p.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    p.stride_a[i] = da[i] == 1 ? 0 : csa[i];
    p.stride_b[i] = db[i] == 1 ? 0 : csb[i];
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  if (p.same) {
    const std::size_t n = numel_of(p.out);
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  if (r == 0) {
    f(0, 0, 0);
    return;
  }
  const std::size_t inner = p.out[r - 1];
  const std::size_t ia_step = p.stride_a[r - 1];
  const std::size_t ib_step = p.stride_b[r - 1];
  const std::size_t total = numel_of(p.out);
  std::vector<std::size_t> counter(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(base + j, oa + j * ia_step, ob + j * ib_step);
    // advance the outer counter (axes 0..r-2)
    for (std::size_t ax = r - 1; ax-- > 0;) {
      if (++counter[ax] < p.out[ax]) {
        oa += p.stride_a[ax];
        ob += p.stride_b[ax];
        break;
      }
      oa -= p.stride_a[ax] * (p.out[ax] - 1);
      ob -= p.stride_b[ax] * (p.out[ax] - 1);
      counter[ax] = 0;
    }
  }
}

enum class BinaryKind { Add, Sub, Mul, Div };

Tensor binary(const char* op, BinaryKind kind, const Tensor& a, const Tensor& b) {
  BroadcastPlan plan = plan_broadcast(op, a, b);
  std::vector<double> out(numel_of(plan.out));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  switch (kind) {
    case BinaryKind::Add:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] + pb[j]; });
      break;
    case BinaryKind::Sub:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] - pb[j]; });
      break;
    case BinaryKind::Mul:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] * pb[j]; });
      break;
    case BinaryKind::Div:
      for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = pa[i] / pb[j]; });
      break;
  }
  Shape shape = plan.out;
  return make_result(op, std::move(shape), std::move(out), {a, b},
                     [plan = std::move(plan), kind](Node& self) {
                       const double* g = self.grad.data();
                       const double* va = value_ptr(self, 0);
                       const double* vb = value_ptr(self, 1);
                       double* ga = grad_ptr(self, 0);
                       double* gb = grad_ptr(self, 1);
                       for_each_broadcast(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
                         const double go = g[o];
                         switch (kind) {
                           case BinaryKind::Add:
                             if (ga) ga[i] += go;
                             if (gb) gb[j] += go;
                             break;
                           case BinaryKind::Sub:
                             if (ga) ga[i] += go;
                             if (gb) gb[j] -= go;
                             break;
                           case BinaryKind::Mul:
                             if (ga) ga[i] += go * vb[j];
                             if (gb) gb[j] += go * va[i];
                             break;
                           case BinaryKind::Div:
                             if (ga) ga[i] += go / vb[j];
                             if (gb) gb[j] -= go * va[i] / (vb[j] * vb[j]);
                             break;
                         }
                       });
                     });
}

// Elementwise map with derivative expressed through input x and output y.
template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D df) {
  const auto in = a.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [df](Node& self) {
    double* ga = grad_ptr(self, 0);
    if (!ga) return;
    const double* x = value_ptr(self, 0);
    const double* y = self.value.data();
    const double* g = self.grad.data();
    const std::size_t n = self.value.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_rank_at_least(const char* op, const Tensor& a, std::size_t r) {
  if (a.rank() < r) {
    shape_fail(op, "expected rank >= " + std::to_string(r) + ", got " + shape_str(a.shape()));
  }
}

void require_square_tail(const char* op, const Tensor& a) {
  require_rank_at_least(op, a, 2);
  const auto& s = a.shape();
  if (s[s.size() - 1] != s[s.size() - 2]) {
    shape_fail(op, "trailing block must be square, got " + shape_str(s));
  }
}

}  // namespace

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinaryKind::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinaryKind::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinaryKind::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinaryKind::Div, a, b); }

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      "add_scalar", a, [offset](double x) { return x + offset; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor sin(const Tensor& a) {
  return unary(
      "sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary(
      "cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return unary(
      "silu", a, [](double x) { return x * sigmoid_scalar(x); },
      [](double x, double) {
        const double s = sigmoid_scalar(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Tensor softplus(const Tensor& a) {
  return unary(
      "softplus", a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return sigmoid_scalar(x); });
}

Tensor elu(const Tensor& a) {
  return unary(
      "elu", a, [](double x) { return x > 0 ? x : std::expm1(x); },
      [](double x, double) { return x > 0 ? 1.0 : std::exp(x); });
}

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + x * pdf;
      });
}

Tensor clamp_min(const Tensor& a, double floor, std::size_t* clamped) {
  if (clamped) {
    std::size_t n = 0;
    for (double x : a.data()) n += (x < floor || std::isnan(x)) ? 1 : 0;
    *clamped = n;
  }
  return unary(
      "clamp_min", a, [floor](double x) { return (x >= floor) ? x : floor; },
      [floor](double x, double) { return x >= floor ? 1.0 : 0.0; });
}

// --- reductions --------------------------------------------------------------

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_result("sum", {}, {s}, {a}, [](Node& self) {
    double* ga = grad_ptr(self, 0);
    if (!ga) return;
    const double g = self.grad[0];
    const std::size_t n = self.inputs[0]->value.size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) shape_fail("mean", "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_last(const Tensor& a) {
  require_rank_at_least("sum_last", a, 1);
  Shape shape = a.shape();
  const std::size_t inner = shape.back();
  const std::size_t rows = inner == 0 ? 0 : a.numel() / inner;
  shape.back() = 1;
  std::vector<double> out(rows, 0.0);
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < inner; ++j) s += in[r * inner + j];
    out[r] = s;
  }
  return make_result("sum_last", std::move(shape), std::move(out), {a}, [rows, inner](Node& self) {
    double* ga = grad_ptr(self, 0);
    if (!ga) return;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < inner; ++j) ga[r * inner + j] += self.grad[r];
    }
  });
}

// --- shape -------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {a}, [](Node& self) {
    double* ga = grad_ptr(self, 0);
    if (!ga) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

namespace {

// Visits (out_index, in_index) pairs for a permutation of `in_shape`.
template <class F>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& order, F&& f) {
  const std::size_t r = in_shape.size();
  const auto in_strides = contiguous_strides(in_shape);
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[order[i]];
    src_stride[i] = in_strides[order[i]];
  }
  const std::size_t total = numel_of(in_shape);
  if (r == 0 || total == 0) {
    if (total == 1) f(0, 0);
    return;
  }
  const std::size_t inner = out_shape[r - 1];
  const std::size_t inner_stride = src_stride[r - 1];
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t base = 0; base < total; base += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(base + j, src + j * inner_stride);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& a, std::span<const std::size_t> order_in) {
  const Shape& in_shape = a.shape();
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> order(order_in.begin(), order_in.end());
  if (order.size() != r) shape_fail("permute", "order rank mismatch for " + shape_str(in_shape));
  std::vector<bool> seen(r, false);
  for (auto ax : order) {
    if (ax >= r || seen[ax]) shape_fail("permute", "invalid axis order for " + shape_str(in_shape));
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[order[i]];
  std::vector<double> out(a.numel());
  const auto in = a.data();
  for_each_permuted(in_shape, order, [&](std::size_t o, std::size_t i) { out[o] = in[i]; });
  return make_result("permute", std::move(out_shape), std::move(out), {a},
                     [in_shape, order](Node& self) {
                       double* ga = grad_ptr(self, 0);
                       if (!ga) return;
                       const double* g = self.grad.data();
                       for_each_permuted(in_shape, order,
                                         [&](std::size_t o, std::size_t i) { ga[i] += g[o]; });
                     });
}

Tensor permute(const Tensor& a, std::initializer_list<std::size_t> order) {
  return permute(a, std::span<const std::size_t>(order.begin(), order.size()));
}

Tensor transpose_last2(const Tensor& a) {
  require_rank_at_least("transpose_last2", a, 2);
  std::vector<std::size_t> order(a.rank());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(a, order);
}

Tensor slice_last(const Tensor& a, std::size_t start, std::size_t length) {
  require_rank_at_least("slice_last", a, 1);
  const std::size_t width = a.shape().back();
  if (start + length > width) {
    shape_fail("slice_last", "range [" + std::to_string(start) + ", " +
                                 std::to_string(start + length) + ") exceeds " +
                                 shape_str(a.shape()));
  }
  const std::size_t rows = width == 0 ? 0 : a.numel() / width;
  Shape shape = a.shape();
  shape.back() = length;
  std::vector<double> out(rows * length);
  const auto in = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(r * width + start), length,
                out.begin() + static_cast<std::ptrdiff_t>(r * length));
  }
  return make_result("slice_last", std::move(shape), std::move(out), {a},
                     [rows, width, start, length](Node& self) {
                       double* ga = grad_ptr(self, 0);
                       if (!ga) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t j = 0; j < length; ++j) {
                           ga[r * width + start + j] += self.grad[r * length + j];
                         }
                       }
                     });
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) shape_fail("concat_last", "no inputs");
  Shape lead = parts[0].shape();
  require_rank_at_least("concat_last", parts[0], 1);
  lead.pop_back();
  std::size_t width = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.empty()) shape_fail("concat_last", "scalar operand");
    widths.push_back(s.back());
    width += s.back();
    s.pop_back();
    if (s != lead) {
      shape_fail("concat_last", "leading dims differ: " + shape_str(parts[0].shape()) + " and " +
                                    shape_str(p.shape()));
    }
  }
  const std::size_t rows = numel_of(lead);
  std::vector<double> out(rows * width);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto in = parts[k].data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r * width + offset));
    }
    offset += widths[k];
  }
  Shape shape = lead;
  shape.push_back(width);
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_result("concat_last", std::move(shape), std::move(out), std::move(inputs),
                     [rows, width, widths](Node& self) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                         double* gk = grad_ptr(self, k);
                         if (gk) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t j = 0; j < widths[k]; ++j) {
                               gk[r * widths[k] + j] += self.grad[r * width + offset + j];
                             }
                           }
                         }
                         offset += widths[k];
                       }
                     });
}

Tensor concat_last(std::initializer_list<Tensor> parts) {
  return concat_last(std::span<const Tensor>(parts.begin(), parts.size()));
}

// --- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank_at_least("matmul", a, 2);
  require_rank_at_least("matmul", b, 2);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const std::size_t k = sa.back();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t n = sb.back();
  if (sb[sb.size() - 2] != k) shape_fail("matmul", "inner dims differ: " + shapes2(a, b));

  if (sb.size() == 2) {
    // Shared weight: fold every batch axis of `a` into the row count.
    const std::size_t rows = a.numel() / k;
    Shape shape = sa;
    shape.back() = n;
    std::vector<double> out(rows * n);
    MutMap(out.data(), rows, n).noalias() =
        ConstMap(a.data().data(), rows, k) * ConstMap(b.data().data(), k, n);
    return make_result("matmul", std::move(shape), std::move(out), {a, b}, [rows, k, n](Node& self) {
      ConstMap g(self.grad.data(), rows, n);
      if (double* ga = grad_ptr(self, 0)) {
        MutMap(ga, rows, k).noalias() += g * ConstMap(value_ptr(self, 1), k, n).transpose();
      }
      if (double* gb = grad_ptr(self, 1)) {
        MutMap(gb, k, n).noalias() += ConstMap(value_ptr(self, 0), rows, k).transpose() * g;
      }
    });
  }

  if (sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) {
    shape_fail("matmul", "batch dims differ: " + shapes2(a, b));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape shape = sa;
  shape.back() = n;
  std::vector<double> out(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    MutMap(out.data() + bi * m * n, m, n).noalias() =
        ConstMap(a.data().data() + bi * m * k, m, k) * ConstMap(b.data().data() + bi * k * n, k, n);
  }
  return make_result("matmul", std::move(shape), std::move(out), {a, b},
                     [batch, m, k, n](Node& self) {
                       double* ga = grad_ptr(self, 0);
                       double* gb = grad_ptr(self, 1);
                       const double* va = value_ptr(self, 0);
                       const double* vb = value_ptr(self, 1);
                       for (std::size_t bi = 0; bi < batch; ++bi) {
                         ConstMap g(self.grad.data() + bi * m * n, m, n);
                         if (ga) {
                           MutMap(ga + bi * m * k, m, k).noalias() +=
                               g * ConstMap(vb + bi * k * n, k, n).transpose();
                         }
                         if (gb) {
                           MutMap(gb + bi * k * n, k, n).noalias() +=
                               ConstMap(va + bi * m * k, m, k).transpose() * g;
                         }
                       }
                     });
}

// --- sequence primitives -----------------------------------------------------

Tensor causal_mask(const Tensor& scores) {
  require_square_tail("causal_mask", scores);
  const std::size_t len = scores.shape().back();
  const std::size_t blocks = scores.numel() / (len * len);
  std::vector<double> out(scores.data().begin(), scores.data().end());
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      for (std::size_t j = i + 1; j < len; ++j) out[(b * len + i) * len + j] = 0.0;
    }
  }
  return make_result("causal_mask", scores.shape(), std::move(out), {scores},
                     [blocks, len](Node& self) {
                       double* ga = grad_ptr(self, 0);
                       if (!ga) return;
                       for (std::size_t b = 0; b < blocks; ++b) {
                         for (std::size_t i = 0; i < len; ++i) {
                           for (std::size_t j = 0; j <= i; ++j) {
                             const std::size_t idx = (b * len + i) * len + j;
                             ga[idx] += self.grad[idx];
                           }
                         }
                       }
                     });
}

Tensor causal_softmax(const Tensor& scores) {
  require_square_tail("causal_softmax", scores);
  const std::size_t len = scores.shape().back();
  const std::size_t blocks = scores.numel() / (len * len);
  const auto in = scores.data();
  std::vector<double> out(scores.numel(), 0.0);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t row = (b * len + i) * len;
      double mx = in[row];
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, in[row + j]);
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        out[row + j] = std::exp(in[row + j] - mx);
        z += out[row + j];
      }
      for (std::size_t j = 0; j <= i; ++j) out[row + j] /= z;
    }
  }
  return make_result("causal_softmax", scores.shape(), std::move(out), {scores},
                     [blocks, len](Node& self) {
                       double* ga = grad_ptr(self, 0);
                       if (!ga) return;
                       const double* y = self.value.data();
                       const double* g = self.grad.data();
                       for (std::size_t b = 0; b < blocks; ++b) {
                         for (std::size_t i = 0; i < len; ++i) {
                           const std::size_t row = (b * len + i) * len;
                           double dot = 0.0;
                           for (std::size_t j = 0; j <= i; ++j) dot += g[row + j] * y[row + j];
                           for (std::size_t j = 0; j <= i; ++j) {
                             ga[row + j] += y[row + j] * (g[row + j] - dot);
                           }
                         }
                       }
                     });
}

Tensor causal_conv1d(const Tensor& u, const Tensor& kernel) {
  require_rank_at_least("causal_conv1d", u, 2);
  if (kernel.rank() != 2) {
    shape_fail("causal_conv1d", "kernel must be [K, C], got " + shape_str(kernel.shape()));
  }
  const std::size_t taps = kernel.dim(0);
  const std::size_t channels = kernel.dim(1);
  if (taps < 1) shape_fail("causal_conv1d", "kernel needs at least one tap");
  if (u.shape().back() != channels) {
    shape_fail("causal_conv1d", "channel mismatch: " + shapes2(u, kernel));
  }
  const std::size_t len = u.dim(u.rank() - 2);
  const std::size_t batch = u.numel() / (len * channels);
  const auto x = u.data();
  const auto w = kernel.data();
  std::vector<double> out(u.numel(), 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * len * channels;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t k = 0; k < taps; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(taps - 1);
        if (src < 0) continue;
        const std::size_t s = static_cast<std::size_t>(src);
        for (std::size_t c = 0; c < channels; ++c) {
          out[base + t * channels + c] += w[k * channels + c] * x[base + s * channels + c];
        }
      }
    }
  }
  return make_result("causal_conv1d", u.shape(), std::move(out), {u, kernel},
                     [batch, len, channels, taps](Node& self) {
                       double* gu = grad_ptr(self, 0);
                       double* gw = grad_ptr(self, 1);
                       const double* x = value_ptr(self, 0);
                       const double* w = value_ptr(self, 1);
                       const double* g = self.grad.data();
                       for (std::size_t b = 0; b < batch; ++b) {
                         const std::size_t base = b * len * channels;
                         for (std::size_t t = 0; t < len; ++t) {
                           for (std::size_t k = 0; k < taps; ++k) {
                             const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) -
                                                        static_cast<std::ptrdiff_t>(taps - 1);
                             if (src < 0) continue;
                             const std::size_t s = static_cast<std::size_t>(src);
                             for (std::size_t c = 0; c < channels; ++c) {
                               const double go = g[base + t * channels + c];
                               if (gu) gu[base + s * channels + c] += w[k * channels + c] * go;
                               if (gw) gw[k * channels + c] += x[base + s * channels + c] * go;
                             }
                           }
                         }
                       }
                     });
}

Tensor cumsum(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) {
    shape_fail("cumsum", "axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  }
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  const auto in = a.data();
  std::vector<double> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t idx = (o * len + t) * inner + j;
        acc += in[idx];
        out[idx] = acc;
      }
    }
  }
  return make_result("cumsum", s, std::move(out), {a}, [outer, inner, len](Node& self) {
    double* ga = grad_ptr(self, 0);
    if (!ga) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        double acc = 0.0;
        for (std::size_t t = len; t-- > 0;) {
          const std::size_t idx = (o * len + t) * inner + j;
          acc += self.grad[idx];
          ga[idx] += acc;
        }
      }
    }
  });
}

Tensor causal_decay(const Tensor& log_a) {
  require_rank_at_least("causal_decay", log_a, 1);
  const std::size_t len = log_a.shape().back();
  const std::size_t rows = len == 0 ? 0 : log_a.numel() / len;
  Shape shape = log_a.shape();
  shape.push_back(len);
  const auto la = log_a.data();
  std::vector<double> out(rows * len * len, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* l = la.data() + r * len;
    double* m = out.data() + r * len * len;
    for (std::size_t i = 0; i < len; ++i) {
      // segment sums accumulated from the diagonal outward
      double seg = 0.0;
      m[i * len + i] = 1.0;
      for (std::size_t j = i; j-- > 0;) {
        seg += l[j + 1];
        m[i * len + j] = std::exp(seg);
      }
    }
  }
  return make_result("causal_decay", std::move(shape), std::move(out), {log_a},
                     [rows, len](Node& self) {
                       double* ga = grad_ptr(self, 0);
                       if (!ga) return;
                       // d/dlog_a[l] = sum over (i, j) with j < l <= i of G_ij * M_ij
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* m = self.value.data() + r * len * len;
                         const double* g = self.grad.data() + r * len * len;
                         double* gl = ga + r * len;
                         for (std::size_t i = 0; i < len; ++i) {
                           double prefix = 0.0;  // sum_{j < l} G_ij M_ij
                           for (std::size_t l = 1; l <= i; ++l) {
                             prefix += g[i * len + l - 1] * m[i * len + l - 1];
                             gl[l] += prefix;
                           }
                         }
                       }
                     });
}

Tensor complex_diag_scan(const Tensor& x, const Tensor& lambda) {
  require_rank_at_least("complex_diag_scan", x, 2);
  if (lambda.rank() != 1 || lambda.dim(0) != x.shape().back() || lambda.dim(0) % 2 != 0) {
    shape_fail("complex_diag_scan", "lambda must be [2N] matching x's last axis: " + shapes2(x, lambda));
  }
  const std::size_t width = lambda.dim(0);
  const std::size_t n = width / 2;
  const std::size_t len = x.dim(x.rank() - 2);
  const std::size_t batch = x.numel() / (len * width);
  const auto xv = x.data();
  const auto lv = lambda.data();
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * len * width;
    for (std::size_t s = 0; s < n; ++s) {
      const double lr = lv[s], li = lv[n + s];
      double hr = 0.0, hi = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t o = base + t * width;
        const double nr = lr * hr - li * hi + xv[o + s];
        const double ni = lr * hi + li * hr + xv[o + n + s];
        hr = nr;
        hi = ni;
        out[o + s] = hr;
        out[o + n + s] = hi;
      }
    }
  }
  return make_result("complex_diag_scan", x.shape(), std::move(out), {x, lambda},
                     [batch, len, width, n](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       double* gl = grad_ptr(self, 1);
                       const double* lv = value_ptr(self, 1);
                       const double* h = self.value.data();
                       const double* g = self.grad.data();
                       for (std::size_t b = 0; b < batch; ++b) {
                         const std::size_t base = b * len * width;
                         for (std::size_t s = 0; s < n; ++s) {
                           const double lr = lv[s], li = lv[n + s];
                           double ar = 0.0, ai = 0.0;  // adjoint of h_t
                           for (std::size_t t = len; t-- > 0;) {
                             const std::size_t o = base + t * width;
                             // a_t = g_t + conj(lambda) * a_{t+1}
                             const double nr = g[o + s] + lr * ar + li * ai;
                             const double ni = g[o + n + s] + lr * ai - li * ar;
                             ar = nr;
                             ai = ni;
                             if (gx) {
                               gx[o + s] += ar;
                               gx[o + n + s] += ai;
                             }
                             if (gl && t > 0) {
                               const std::size_t p = o - width;
                               const double pr = h[p + s], pi = h[p + n + s];
                               // conj(h_{t-1}) * a_t
                               gl[s] += pr * ar + pi * ai;
                               gl[n + s] += pr * ai - pi * ar;
                             }
                           }
                         }
                       }
                     });
}

// --- indexing ----------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const int> indices) {
  if (table.rank() != 2) shape_fail("gather_rows", "table must be [V, D], got " + shape_str(table.shape()));
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  for (int i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= rows) {
      shape_fail("gather_rows", "index " + std::to_string(i) + " out of range for table " +
                                    shape_str(table.shape()));
    }
  }
  std::vector<double> out(idx.size() * width);
  const auto t = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[r]) * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  Shape shape{idx.size(), width};
  return make_result("gather_rows", std::move(shape), std::move(out), {table},
                     [idx = std::move(idx), width](Node& self) {
                       double* gt = grad_ptr(self, 0);
                       if (!gt) return;
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         double* dst = gt + static_cast<std::size_t>(idx[r]) * width;
                         for (std::size_t j = 0; j < width; ++j) dst[j] += self.grad[r * width + j];
                       }
                     });
}

Tensor scatter_add_rows(const Tensor& src, std::span<const int> indices, std::size_t rows) {
  if (src.rank() != 2) shape_fail("scatter_add_rows", "src must be [n, D], got " + shape_str(src.shape()));
  if (src.dim(0) != indices.size()) {
    shape_fail("scatter_add_rows", std::to_string(indices.size()) + " indices for src " +
                                       shape_str(src.shape()));
  }
  const std::size_t width = src.dim(1);
  std::vector<int> idx(indices.begin(), indices.end());
  std::vector<double> out(rows * width, 0.0);
  const auto s = src.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= rows) {
      shape_fail("scatter_add_rows", "index " + std::to_string(idx[r]) + " out of range for " +
                                         std::to_string(rows) + " rows");
    }
    for (std::size_t j = 0; j < width; ++j) {
      out[static_cast<std::size_t>(idx[r]) * width + j] += s[r * width + j];
    }
  }
  return make_result("scatter_add_rows", {rows, width}, std::move(out), {src},
                     [idx = std::move(idx), width](Node& self) {
                       double* gs = grad_ptr(self, 0);
                       if (!gs) return;
                       for (std::size_t r = 0; r < idx.size(); ++r) {
                         const double* from = self.grad.data() + static_cast<std::size_t>(idx[r]) * width;
                         for (std::size_t j = 0; j < width; ++j) gs[r * width + j] += from[j];
                       }
                     });
}

// --- normalization and loss --------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank_at_least("layer_norm", x, 1);
  const std::size_t width = x.shape().back();
  if (gamma.shape() != Shape{width} || beta.shape() != Shape{width}) {
    shape_fail("layer_norm", "gamma/beta must be [" + std::to_string(width) + "], got " +
                                 shapes2(gamma, beta));
  }
  const std::size_t rows = x.numel() / width;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t j = 0; j < width; ++j) mu += row[j];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(width);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < width; ++j) {
      const double h = (row[j] - mu) * rstd[r];
      xhat[r * width + j] = h;
      out[r * width + j] = h * gv[j] + bv[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [rows, width, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                       double* gx = grad_ptr(self, 0);
                       double* gg = grad_ptr(self, 1);
                       double* gb = grad_ptr(self, 2);
                       const double* gamma = value_ptr(self, 1);
                       const double* g = self.grad.data();
                       const double inv_w = 1.0 / static_cast<double>(width);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gr = g + r * width;
                         const double* hr = xhat.data() + r * width;
                         if (gg || gb) {
                           for (std::size_t j = 0; j < width; ++j) {
                             if (gg) gg[j] += gr[j] * hr[j];
                             if (gb) gb[j] += gr[j];
                           }
                         }
                         if (gx) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < width; ++j) {
                             const double dh = gr[j] * gamma[j];
                             m1 += dh;
                             m2 += dh * hr[j];
                           }
                           m1 *= inv_w;
                           m2 *= inv_w;
                           for (std::size_t j = 0; j < width; ++j) {
                             const double dh = gr[j] * gamma[j];
                             gx[r * width + j] += rstd[r] * (dh - m1 - hr[j] * m2);
                           }
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  require_rank_at_least("cross_entropy", logits, 1);
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.numel() / vocab;
  if (targets.size() != rows) {
    shape_fail("cross_entropy", std::to_string(targets.size()) + " targets for logits " +
                                    shape_str(logits.shape()));
  }
  const auto z = logits.data();
  std::vector<int> tgt(targets.begin(), targets.end());
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == ignore_index) continue;
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= vocab) {
      shape_fail("cross_entropy", "target " + std::to_string(tgt[r]) + " outside vocabulary of " +
                                      std::to_string(vocab));
    }
    const double* row = z.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
    total += (mx + std::log(s)) - row[tgt[r]];
    ++counted;
  }
  const double loss = counted ? total / static_cast<double>(counted) : 0.0;
  return make_result("cross_entropy", {}, {loss}, {logits},
                     [tgt = std::move(tgt), rows, vocab, counted, ignore_index](Node& self) {
                       double* gz = grad_ptr(self, 0);
                       if (!gz || counted == 0) return;
                       const double* z = value_ptr(self, 0);
                       const double coef = self.grad[0] / static_cast<double>(counted);
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (tgt[r] == ignore_index) continue;
                         const double* row = z + r * vocab;
                         const double mx = *std::max_element(row, row + vocab);
                         double s = 0.0;
                         for (std::size_t j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
                         for (std::size_t j = 0; j < vocab; ++j) {
                           gz[r * vocab + j] += coef * std::exp(row[j] - mx) / s;
                         }
                         gz[r * vocab + static_cast<std::size_t>(tgt[r])] -= coef;
                       }
                     });
}

}  // namespace spectra::ad
