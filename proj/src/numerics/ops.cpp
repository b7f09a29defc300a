#include "kpop/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "kpop/error.hpp"

namespace kpop::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

Tensor make_output(Shape shape) { return Tensor::zeros(std::move(shape)); }

std::vector<double>& grad_of(Impl* impl) {
  impl->ensure_grad();
  return impl->grad;
}

// Broadcast bookkeeping: per-input strides aligned to the output rank,
// zero where the input is broadcast. Adjacent axes that step uniformly in
// both inputs are merged so the inner loop runs as long as possible.
struct BroadcastPlan {
  Shape out;  // full output shape
  Shape dims;  // coalesced iteration shape
  std::vector<std::int64_t> sa, sb;
};

std::vector<std::int64_t> aligned_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> s(r, 0);
  std::int64_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    s[o] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return s;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::int64_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::int64_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[r - 1 - k] = std::max(da, db);
  }
  const auto sa = aligned_strides(a, out), sb = aligned_strides(b, out);
  BroadcastPlan p;
  p.out = out;
  for (std::size_t k = 0; k < r; ++k) {
    if (out[k] == 1) continue;
    if (!p.dims.empty()) {
      const std::int64_t n = out[k];
      if (p.sa.back() == sa[k] * n && p.sb.back() == sb[k] * n) {
        p.dims.back() *= n;
        p.sa.back() = sa[k];
        p.sb.back() = sb[k];
        continue;
      }
    }
    p.dims.push_back(out[k]);
    p.sa.push_back(sa[k]);
    p.sb.push_back(sb[k]);
  }
  return p;
}

// Calls f(i, ia, ib, len, ca, cb) once per contiguous inner run.
template <typename F>
void for_each_run(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.dims.size();
  if (r == 0) {
    f(0, 0, 0, 1, 0, 0);
    return;
  }
  const std::int64_t n = shape_numel(p.dims);
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  const std::int64_t inner = p.dims[r - 1];
  const std::int64_t ca = p.sa[r - 1], cb = p.sb[r - 1];
  for (std::int64_t i = 0; i < n; i += inner) {
    f(i, ia, ib, inner, ca, cb);
    for (std::size_t k = r - 1; k-- > 0;) {
      ++idx[k];
      ia += p.sa[k];
      ib += p.sb[k];
      if (idx[k] < p.dims[k]) break;
      ia -= p.sa[k] * idx[k];
      ib -= p.sb[k] * idx[k];
      idx[k] = 0;
    }
  }
}

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  BroadcastPlan plan;
  if (a.shape() == b.shape()) {
    plan.out = a.shape();
    const auto n = static_cast<std::int64_t>(a.numel());
    if (n != 1 || !a.shape().empty()) {
      plan.dims = {n};
      plan.sa = {1};
      plan.sb = {1};
    }
  } else {
    plan = plan_broadcast(a.shape(), b.shape(), name);
  }
  Tensor out = make_output(plan.out);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  for_each_run(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib, std::int64_t len, std::int64_t ca,
                         std::int64_t cb) {
    double* o = po + i;
    const double* x = pa + ia;
    const double* y = pb + ib;
    switch (op) {
      case BinOp::add: for (std::int64_t j = 0; j < len; ++j) o[j] = x[j * ca] + y[j * cb]; break;
      case BinOp::sub: for (std::int64_t j = 0; j < len; ++j) o[j] = x[j * ca] - y[j * cb]; break;
      case BinOp::mul: for (std::int64_t j = 0; j < len; ++j) o[j] = x[j * ca] * y[j * cb]; break;
    }
  });
  if (should_record({&a, &b})) {
    ImplPtr ai = a.shared_impl(), bi = b.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [ai, bi, oi, op, plan]() {
      const double* go = oi->grad.data();
      double* dA = ai->requires_grad ? grad_of(ai.get()).data() : nullptr;
      double* dB = bi->requires_grad ? grad_of(bi.get()).data() : nullptr;
      const double* va = ai->data.data();
      const double* vb = bi->data.data();
      const double sign = op == BinOp::sub ? -1.0 : 1.0;
      for_each_run(plan, [&](std::int64_t i, std::int64_t ia, std::int64_t ib, std::int64_t len, std::int64_t ca,
                             std::int64_t cb) {
        const double* g = go + i;
        if (op == BinOp::mul) {
          if (dA) for (std::int64_t j = 0; j < len; ++j) dA[ia + j * ca] += g[j] * vb[ib + j * cb];
          if (dB) for (std::int64_t j = 0; j < len; ++j) dB[ib + j * cb] += g[j] * va[ia + j * ca];
        } else {
          if (dA) for (std::int64_t j = 0; j < len; ++j) dA[ia + j * ca] += g[j];
          if (dB) for (std::int64_t j = 0; j < len; ++j) dB[ib + j * cb] += sign * g[j];
        }
      });
    });
  }
  return out;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out = make_output(x.shape());
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi, deriv]() {
      auto& dx = grad_of(xi.get());
      const auto n = dx.size();
      for (std::size_t i = 0; i < n; ++i) dx[i] += oi->grad[i] * deriv(xi->data[i], oi->data[i]);
    });
  }
  return out;
}

Tensor scalar_output(double v) { return Tensor::from_data({}, {v}); }

}  // namespace

void check_finite(const Tensor& x, const char* where) {
  if (!x.all_finite()) throw NumericError(std::string("non-finite value in ") + where);
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double sg = 1.0 / (1.0 + std::exp(-v));
        return sg * (1.0 + v * (1.0 - sg));
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = scalar_output(s);
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi]() {
      auto& dx = grad_of(xi.get());
      const double g = oi->grad[0];
      for (auto& d : dx) d += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_squares(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  Tensor out = scalar_output(s);
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi]() {
      auto& dx = grad_of(xi.get());
      const double g = 2.0 * oi->grad[0];
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * xi->data[i];
    });
  }
  return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  if (n == 0) throw DimensionError("mse of empty tensors");
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pa[i] - pb[i];
    s += d * d;
  }
  Tensor out = scalar_output(s / static_cast<double>(n));
  if (should_record({&a, &b})) {
    ImplPtr ai = a.shared_impl(), bi = b.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [ai, bi, oi, n]() {
      const double g = 2.0 * oi->grad[0] / static_cast<double>(n);
      double* dA = ai->requires_grad ? grad_of(ai.get()).data() : nullptr;
      double* dB = bi->requires_grad ? grad_of(bi.get()).data() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = g * (ai->data[i] - bi->data[i]);
        if (dA) dA[i] += d;
        if (dB) dB[i] -= d;
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy expects [n, classes], got " + shape_str(logits.shape()));
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n) throw DimensionError("cross_entropy: label count mismatch");
  check_finite(logits, "cross_entropy logits");
  std::vector<double> prob(static_cast<std::size_t>(n * k));
  const double* pl = logits.data().data();
  double loss = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw UsageError("cross_entropy: label out of range");
    const double* row = pl + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::int64_t j = 0; j < k; ++j) prob[static_cast<std::size_t>(i * k + j)] = std::exp(row[j] - mx) / z;
    loss -= (row[y] - mx) - std::log(z);
  }
  Tensor out = scalar_output(loss / static_cast<double>(n));
  if (should_record({&logits})) {
    ImplPtr li = logits.shared_impl();
    Impl* oi = out.impl();
    std::vector<int> ys(labels.begin(), labels.end());
    Tape::active()->record(out.shared_impl(), [li, oi, prob = std::move(prob), ys = std::move(ys), n, k]() {
      auto& d = grad_of(li.get());
      const double g = oi->grad[0] / static_cast<double>(n);
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
          const auto idx = static_cast<std::size_t>(i * k + j);
          d[idx] += g * (prob[idx] - (j == ys[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() > 3 || sb.size() < 2 || sb.size() > 3) {
    throw DimensionError("matmul: unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::int64_t ba = sa.size() == 3 ? sa[0] : 1;
  const std::int64_t bb = sb.size() == 3 ? sb[0] : 1;
  const std::int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  const std::int64_t k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != k2 || (ba != bb && ba != 1 && bb != 1)) {
    throw DimensionError("matmul: shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::int64_t batch = std::max(ba, bb);
  const bool batched_out = sa.size() == 3 || sb.size() == 3;
  Tensor out = make_output(batched_out ? Shape{batch, m, n} : Shape{m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < batch; ++i) {
    CMapMat A(pa + (ba == 1 ? 0 : i) * m * k, m, k);
    CMapMat B(pb + (bb == 1 ? 0 : i) * k * n, k, n);
    MapMat C(po + i * m * n, m, n);
    C.noalias() = A * B;
  }
  if (should_record({&a, &b})) {
    ImplPtr ai = a.shared_impl(), bi = b.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [ai, bi, oi, ba, bb, batch, m, k, n]() {
      const double* go = oi->grad.data();
      for (std::int64_t i = 0; i < batch; ++i) {
        CMapMat G(go + i * m * n, m, n);
        if (ai->requires_grad) {
          MapMat dA(grad_of(ai.get()).data() + (ba == 1 ? 0 : i) * m * k, m, k);
          CMapMat B(bi->data.data() + (bb == 1 ? 0 : i) * k * n, k, n);
          dA.noalias() += G * B.transpose();
        }
        if (bi->requires_grad) {
          MapMat dB(grad_of(bi.get()).data() + (bb == 1 ? 0 : i) * k * n, k, n);
          CMapMat A(ai->data.data() + (ba == 1 ? 0 : i) * m * k, m, k);
          dB.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be 2-D, got " + shape_str(w.shape()));
  const std::int64_t in = w.dim(0), outd = w.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outd)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / in;
  Shape oshape = x.shape();
  oshape.back() = outd;
  Tensor out = make_output(oshape);
  CMapMat X(x.data().data(), rows, in);
  CMapMat W(w.data().data(), in, outd);
  MapMat O(out.mutable_data().data(), rows, outd);
  O.noalias() = X * W;
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.data().data(), outd);
    O.rowwise() += bv;
  }
  if (should_record({&x, &w, &bias})) {
    ImplPtr xi = x.shared_impl(), wi = w.shared_impl();
    ImplPtr bi = bias.defined() ? bias.shared_impl() : nullptr;
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, wi, bi, oi, rows, in, outd]() {
      CMapMat G(oi->grad.data(), rows, outd);
      if (xi->requires_grad) {
        MapMat dX(grad_of(xi.get()).data(), rows, in);
        CMapMat W(wi->data.data(), in, outd);
        dX.noalias() += G * W.transpose();
      }
      if (wi->requires_grad) {
        MapMat dW(grad_of(wi.get()).data(), in, outd);
        CMapMat X(xi->data.data(), rows, in);
        dW.noalias() += X.transpose() * G;
      }
      if (bi && bi->requires_grad) {
        // Plain loops: Eigen reductions peel to the buffer alignment, which
        // would make the summation order depend on where malloc put G.
        double* db = grad_of(bi.get()).data();
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* g = oi->grad.data() + r * outd;
          for (std::int64_t j = 0; j < outd; ++j) db[j] += g[j];
        }
      }
    });
  }
  return out;
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw DimensionError("softmax over empty axis " + shape_str(x.shape()));
  check_finite(x, "softmax input");
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = static_cast<std::int64_t>(x.numel()) / n;
  Tensor out = make_output(x.shape());
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = px + r * n;
    double* o = po + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::int64_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    const double inv = 1.0 / z;
    for (std::int64_t j = 0; j < n; ++j) o[j] *= inv;
  }
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi, rows, n]() {
      auto& dx = grad_of(xi.get());
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* y = oi->data.data() + r * n;
        const double* g = oi->grad.data() + r * n;
        double dot = 0.0;
        for (std::int64_t j = 0; j < n; ++j) dot += g[j] * y[j];
        double* d = dx.data() + r * n;
        for (std::int64_t j = 0; j < n; ++j) d[j] += y[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  for (auto& d : shape) {
    if (d == -1) {
      std::int64_t known = 1;
      for (auto e : shape) {
        if (e != -1) known *= e;
      }
      d = known == 0 ? 0 : static_cast<std::int64_t>(x.numel()) / known;
    }
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> data(x.data().begin(), x.data().end());
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  Tensor out = Tensor::wrap(std::move(impl));
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi]() {
      auto& dx = grad_of(xi.get());
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += oi->grad[i];
    });
  }
  return out;
}

namespace {

// Walks the output in order; src_stride gives the source step per output axis.
template <typename F>
void permute_walk(const Shape& oshape, const std::vector<std::int64_t>& src_stride, F&& f) {
  const std::size_t r = oshape.size();
  const std::int64_t n = shape_numel(oshape);
  if (r == 0) {
    f(0, 0, 1, 0);
    return;
  }
  const std::int64_t inner = oshape[r - 1], cs = src_stride[r - 1];
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t src = 0;
  for (std::int64_t i = 0; i < n; i += inner) {
    f(i, src, inner, cs);
    for (std::size_t k = r - 1; k-- > 0;) {
      ++idx[k];
      src += src_stride[k];
      if (idx[k] < oshape[k]) break;
      src -= src_stride[k] * idx[k];
      idx[k] = 0;
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, std::vector<int> order) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (order.size() != r) throw DimensionError("permute: order rank mismatch for " + shape_str(s));
  std::vector<bool> seen(r, false);
  for (int o : order) {
    if (o < 0 || static_cast<std::size_t>(o) >= r || seen[static_cast<std::size_t>(o)]) {
      throw DimensionError("permute: invalid axis order");
    }
    seen[static_cast<std::size_t>(o)] = true;
  }
  std::vector<std::int64_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape oshape(r);
  for (std::size_t i = 0; i < r; ++i) oshape[i] = s[static_cast<std::size_t>(order[i])];
  // Merge output axes that are also adjacent, in order, in the source.
  Shape walk_shape;
  std::vector<std::int64_t> walk_stride;
  for (std::size_t i = 0; i < r; ++i) {
    const auto src_axis = static_cast<std::size_t>(order[i]);
    const std::int64_t n = s[src_axis], st = in_stride[src_axis];
    if (n == 1) continue;
    if (!walk_shape.empty() && walk_stride.back() == st * n) {
      walk_shape.back() *= n;
      walk_stride.back() = st;
      continue;
    }
    walk_shape.push_back(n);
    walk_stride.push_back(st);
  }
  Tensor out = make_output(oshape);
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  permute_walk(walk_shape, walk_stride, [&](std::int64_t i, std::int64_t src, std::int64_t len, std::int64_t cs) {
    for (std::int64_t j = 0; j < len; ++j) po[i + j] = px[src + j * cs];
  });
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi, walk_shape, walk_stride]() {
      double* dx = grad_of(xi.get()).data();
      const double* g = oi->grad.data();
      permute_walk(walk_shape, walk_stride, [&](std::int64_t i, std::int64_t src, std::int64_t len, std::int64_t cs) {
        for (std::int64_t j = 0; j < len; ++j) dx[src + j * cs] += g[i + j];
      });
    });
  }
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const auto& s0 = parts[0].shape();
  const int r = static_cast<int>(s0.size());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError("concat: axis out of range for " + shape_str(s0));
  Shape oshape = s0;
  oshape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = static_cast<int>(s.size()) == r;
    for (int i = 0; ok && i < r; ++i) {
      if (i != ax && s[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)]) ok = false;
    }
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0));
    oshape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
  }
  std::int64_t outer = 1;
  for (int i = 0; i < ax; ++i) outer *= s0[static_cast<std::size_t>(i)];
  std::int64_t inner = 1;
  for (int i = ax + 1; i < r; ++i) inner *= s0[static_cast<std::size_t>(i)];
  Tensor out = make_output(oshape);
  double* po = out.mutable_data().data();
  const std::int64_t orow = oshape[static_cast<std::size_t>(ax)] * inner;
  std::vector<std::int64_t> chunk, offset;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t c = p.dim(ax) * inner;
    chunk.push_back(c);
    offset.push_back(off);
    const double* pp = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o) std::copy(pp + o * c, pp + (o + 1) * c, po + o * orow + off);
    off += c;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && Tape::active()) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.shared_impl());
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [impls, oi, chunk, offset, outer, orow]() {
      for (std::size_t j = 0; j < impls.size(); ++j) {
        if (!impls[j]->requires_grad) continue;
        auto& d = grad_of(impls[j].get());
        const std::int64_t c = chunk[j];
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* g = oi->grad.data() + o * orow + offset[j];
          double* dd = d.data() + o * c;
          for (std::int64_t i = 0; i < c; ++i) dd[i] += g[i];
        }
      }
    });
  }
  return out;
}

Tensor expand_batch(const Tensor& x, std::int64_t b) {
  if (x.rank() < 1 || x.dim(0) != 1) throw DimensionError("expand_batch expects leading dim 1, got " + shape_str(x.shape()));
  if (b < 1) throw DimensionError("expand_batch: batch must be positive");
  Shape oshape = x.shape();
  oshape[0] = b;
  Tensor out = make_output(oshape);
  const std::size_t n = x.numel();
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t i = 0; i < b; ++i) std::copy(px, px + n, po + static_cast<std::size_t>(i) * n);
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi, b, n]() {
      auto& d = grad_of(xi.get());
      for (std::int64_t i = 0; i < b; ++i) {
        const double* g = oi->grad.data() + static_cast<std::size_t>(i) * n;
        for (std::size_t j = 0; j < n; ++j) d[j] += g[j];
      }
    });
  }
  return out;
}

namespace {

// cols[(c*kh + i)*kw + j, y*W + x] = input[c, y + i - pad, x + j - pad]
void im2col(const double* in, std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t pad, double* cols) {
  const std::int64_t hw = h * w;
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j) {
        double* row = cols + ((c * kh + i) * kw + j) * hw;
        const std::int64_t off = j - pad;
        const std::int64_t x0 = std::max<std::int64_t>(0, -off), x1 = std::min<std::int64_t>(w, w - off);
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + i - pad;
          double* dst = row + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, 0.0);
            continue;
          }
          const double* src = in + (c * h + sy) * w + off;
          std::fill(dst, dst + x0, 0.0);
          std::copy(src + x0, src + x1, dst + x0);
          std::fill(dst + x1, dst + w, 0.0);
        }
      }
    }
  }
}

void col2im(const double* cols, std::int64_t channels, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t pad, double* in_grad) {
  const std::int64_t hw = h * w;
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j) {
        const double* row = cols + ((c * kh + i) * kw + j) * hw;
        const std::int64_t off = j - pad;
        const std::int64_t x0 = std::max<std::int64_t>(0, -off), x1 = std::min<std::int64_t>(w, w - off);
        for (std::int64_t y = 0; y < h; ++y) {
          const std::int64_t sy = y + i - pad;
          if (sy < 0 || sy >= h) continue;
          double* dst = in_grad + (c * h + sy) * w + off;
          const double* src = row + y * w;
          for (std::int64_t x = x0; x < x1; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d: expected 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
  }
  const std::int64_t b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci) throw DimensionError("conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (2 * padding != kh - 1 || 2 * padding != kw - 1) throw DimensionError("conv2d: only same-size padding supported");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != co)) throw DimensionError("conv2d: bias shape mismatch");
  const std::int64_t hw = h * wd, kk = ci * kh * kw;
  Tensor out = make_output({b, co, h, wd});
  const bool track = should_record({&x, &w, &bias});
  std::vector<double> cols(static_cast<std::size_t>(kk * hw));
  CMapMat W(w.data().data(), co, kk);
  for (std::int64_t s = 0; s < b; ++s) {
    double* col = cols.data();
    im2col(x.data().data() + s * ci * hw, ci, h, wd, kh, kw, padding, col);
    MapMat O(out.mutable_data().data() + s * co * hw, co, hw);
    O.noalias() = W * CMapMat(col, kk, hw);
    if (bias.defined()) {
      Eigen::Map<const Eigen::VectorXd> bv(bias.data().data(), co);
      O.colwise() += bv;
    }
  }
  if (track) {
    ImplPtr xi = x.shared_impl(), wi = w.shared_impl();
    ImplPtr bi = bias.defined() ? bias.shared_impl() : nullptr;
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, wi, bi, oi, b, ci, h, wd, co, kh, kw, padding, hw, kk]() {
      std::vector<double> dcol(static_cast<std::size_t>(kk * hw));
      std::vector<double> cols(wi->requires_grad ? static_cast<std::size_t>(kk * hw) : 0);
      for (std::int64_t s = 0; s < b; ++s) {
        CMapMat G(oi->grad.data() + s * co * hw, co, hw);
        if (wi->requires_grad) {
          // Columns are rebuilt rather than kept alive across the whole graph.
          im2col(xi->data.data() + s * ci * hw, ci, h, wd, kh, kw, padding, cols.data());
          CMapMat col(cols.data(), kk, hw);
          MapMat dW(grad_of(wi.get()).data(), co, kk);
          dW.noalias() += G * col.transpose();
        }
        if (bi && bi->requires_grad) {
          double* db = grad_of(bi.get()).data();
          for (std::int64_t o = 0; o < co; ++o) {
            const double* g = oi->grad.data() + (s * co + o) * hw;
            double acc = 0.0;
            for (std::int64_t j = 0; j < hw; ++j) acc += g[j];
            db[o] += acc;
          }
        }
        if (xi->requires_grad) {
          CMapMat W(wi->data.data(), co, kk);
          MapMat dC(dcol.data(), kk, hw);
          dC.noalias() = W.transpose() * G;
          col2im(dcol.data(), ci, h, wd, kh, kw, padding, grad_of(xi.get()).data() + s * ci * hw);
        }
      }
    });
  }
  return out;
}

Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 4 || x.dim(2) % 2 || x.dim(3) % 2) {
    throw DimensionError("avg_pool2 expects NCHW with even spatial dims, got " + shape_str(x.shape()));
  }
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h / 2, ow = w / 2;
  Tensor out = make_output({x.dim(0), x.dim(1), oh, ow});
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx) {
        const double* s = px + (p * h + 2 * y) * w + 2 * xx;
        po[(p * oh + y) * ow + xx] = 0.25 * (s[0] + s[1] + s[w] + s[w + 1]);
      }
    }
  }
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi, planes, h, w, oh, ow]() {
      auto& d = grad_of(xi.get());
      for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t y = 0; y < oh; ++y) {
          for (std::int64_t xx = 0; xx < ow; ++xx) {
            const double g = 0.25 * oi->grad[static_cast<std::size_t>((p * oh + y) * ow + xx)];
            double* s = d.data() + (p * h + 2 * y) * w + 2 * xx;
            s[0] += g;
            s[1] += g;
            s[w] += g;
            s[w + 1] += g;
          }
        }
      }
    });
  }
  return out;
}

Tensor upsample2(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("upsample2 expects NCHW, got " + shape_str(x.shape()));
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = 2 * h, ow = 2 * w;
  Tensor out = make_output({x.dim(0), x.dim(1), oh, ow});
  const double* px = x.data().data();
  double* po = out.mutable_data().data();
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t xx = 0; xx < ow; ++xx) po[(p * oh + y) * ow + xx] = px[(p * h + y / 2) * w + xx / 2];
    }
  }
  if (should_record({&x})) {
    ImplPtr xi = x.shared_impl();
    Impl* oi = out.impl();
    Tape::active()->record(out.shared_impl(), [xi, oi, planes, h, w, oh, ow]() {
      auto& d = grad_of(xi.get());
      for (std::int64_t p = 0; p < planes; ++p) {
        for (std::int64_t y = 0; y < oh; ++y) {
          for (std::int64_t xx = 0; xx < ow; ++xx) {
            d[static_cast<std::size_t>((p * h + y / 2) * w + xx / 2)] +=
                oi->grad[static_cast<std::size_t>((p * oh + y) * ow + xx)];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace kpop::nn
