#include "qtrain/ops.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "qtrain/errors.hpp"

namespace qtrain {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

namespace {

std::shared_ptr<Node> new_node(const char* op, Shape shape,
                               std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  for (const auto& p : parents) {
    if (p->requires_grad) n->requires_grad = true;
  }
  n->parents = std::move(parents);
  return n;
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw StateError(msg);
}

}  // namespace

// ===== linear algebra =====

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2,
        "matmul expects 2-D operands, got " + shape_str(a.shape()) + " x " +
            shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  check(k == k2, "matmul inner dims differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  auto out = new_node("matmul", {m, n}, {a.node(), b.node()});
  {
    CMapM A(a.data().data(), m, k), B(b.data().data(), k, n);
    MapM C(out->value.data(), m, n);
    C.noalias() = A * B;
  }
  Node* o = out.get();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  out->backward = [o, pa, pb, m, k, n]() {
    CMapM dC(o->grad.data(), m, n);
    CMapM A(pa->value.data(), m, k), B(pb->value.data(), k, n);
    if (pa->requires_grad) {
      MapM dA(pa->ensure_grad().data(), m, k);
      dA.noalias() += dC * B.transpose();
    }
    if (pb->requires_grad) {
      MapM dB(pb->ensure_grad().data(), k, n);
      dB.noalias() += A.transpose() * dC;
    }
  };
  return Tensor::wrap(out);
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool trans_a,
                      bool trans_b) {
  check(a.rank() == 3 && b.rank() == 3,
        "batched_matmul expects 3-D operands, got " + shape_str(a.shape()) +
            " x " + shape_str(b.shape()));
  check(a.dim(0) == b.dim(0), "batched_matmul batch dims differ");
  int64_t g = a.dim(0);
  int64_t m = trans_a ? a.dim(2) : a.dim(1);
  int64_t k = trans_a ? a.dim(1) : a.dim(2);
  int64_t kb = trans_b ? b.dim(2) : b.dim(1);
  int64_t n = trans_b ? b.dim(1) : b.dim(2);
  check(k == kb, "batched_matmul inner dims differ");
  int64_t as = a.dim(1) * a.dim(2), bs = b.dim(1) * b.dim(2), cs = m * n;

  auto out = new_node("batched_matmul", {g, m, n}, {a.node(), b.node()});
  for (int64_t i = 0; i < g; ++i) {
    CMapM A(a.data().data() + i * as, a.dim(1), a.dim(2));
    CMapM B(b.data().data() + i * bs, b.dim(1), b.dim(2));
    MapM C(out->value.data() + i * cs, m, n);
    if (!trans_a && !trans_b)
      C.noalias() = A * B;
    else if (!trans_a && trans_b)
      C.noalias() = A * B.transpose();
    else if (trans_a && !trans_b)
      C.noalias() = A.transpose() * B;
    else
      C.noalias() = A.transpose() * B.transpose();
  }
  Node* o = out.get();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  int64_t ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  out->backward = [o, pa, pb, g, as, bs, cs, ar, ac, br, bc, m, n, trans_a,
                   trans_b]() {
    for (int64_t i = 0; i < g; ++i) {
      CMapM dC(o->grad.data() + i * cs, m, n);
      CMapM A(pa->value.data() + i * as, ar, ac);
      CMapM B(pb->value.data() + i * bs, br, bc);
      if (pa->requires_grad) {
        MapM dA(pa->ensure_grad().data() + i * as, ar, ac);
        if (!trans_a && !trans_b)
          dA.noalias() += dC * B.transpose();
        else if (!trans_a && trans_b)
          dA.noalias() += dC * B;
        else if (trans_a && !trans_b)
          dA.noalias() += B * dC.transpose();
        else
          dA.noalias() += B.transpose() * dC.transpose();
      }
      if (pb->requires_grad) {
        MapM dB(pb->ensure_grad().data() + i * bs, br, bc);
        if (!trans_a && !trans_b)
          dB.noalias() += A.transpose() * dC;
        else if (!trans_a && trans_b)
          dB.noalias() += dC.transpose() * A;
        else if (trans_a && !trans_b)
          dB.noalias() += A * dC;
        else
          dB.noalias() += dC.transpose() * A.transpose();
      }
    }
  };
  return Tensor::wrap(out);
}

Tensor transpose(const Tensor& x) {
  check(x.rank() == 2, "transpose expects 2-D, got " + shape_str(x.shape()));
  int64_t r = x.dim(0), c = x.dim(1);
  auto out = new_node("transpose", {c, r}, {x.node()});
  const std::vector<double>& xv = x.data();
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out->value[j * r + i] = xv[i * c + j];
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px, r, c]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) dx[i * c + j] += o->grad[j * r + i];
  };
  return Tensor::wrap(out);
}

Tensor reshape(const Tensor& x, Shape shape) {
  check(shape_numel(shape) == x.numel(),
        "reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) +
            " changes element count");
  auto out = new_node("reshape", std::move(shape), {x.node()});
  out->value = x.data();
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += o->grad[i];
  };
  return Tensor::wrap(out);
}

// ===== elementwise =====

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add shapes differ: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  auto out = new_node("add", a.shape(), {a.node(), b.node()});
  const std::vector<double>& av = a.data();
  const std::vector<double>& bv = b.data();
  for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] + bv[i];
  Node* o = out.get();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  out->backward = [o, pa, pb]() {
    if (pa->requires_grad) {
      std::vector<double>& da = pa->ensure_grad();
      for (size_t i = 0; i < da.size(); ++i) da[i] += o->grad[i];
    }
    if (pb->requires_grad) {
      std::vector<double>& db = pb->ensure_grad();
      for (size_t i = 0; i < db.size(); ++i) db[i] += o->grad[i];
    }
  };
  return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul shapes differ: " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  auto out = new_node("mul", a.shape(), {a.node(), b.node()});
  const std::vector<double>& av = a.data();
  const std::vector<double>& bv = b.data();
  for (size_t i = 0; i < av.size(); ++i) out->value[i] = av[i] * bv[i];
  Node* o = out.get();
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  out->backward = [o, pa, pb]() {
    if (pa->requires_grad) {
      std::vector<double>& da = pa->ensure_grad();
      for (size_t i = 0; i < da.size(); ++i) da[i] += o->grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      std::vector<double>& db = pb->ensure_grad();
      for (size_t i = 0; i < db.size(); ++i) db[i] += o->grad[i] * pa->value[i];
    }
  };
  return Tensor::wrap(out);
}

Tensor scale(const Tensor& x, double c) {
  auto out = new_node("scale", x.shape(), {x.node()});
  const std::vector<double>& xv = x.data();
  for (size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] * c;
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px, c]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += o->grad[i] * c;
  };
  return Tensor::wrap(out);
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check(x.rank() == 2 && v.rank() == 1 && x.dim(1) == v.dim(0),
        "add_rowvec expects [n,d] + [d], got " + shape_str(x.shape()) + " + " +
            shape_str(v.shape()));
  int64_t n = x.dim(0), d = x.dim(1);
  auto out = new_node("add_rowvec", x.shape(), {x.node(), v.node()});
  const std::vector<double>& xv = x.data();
  const std::vector<double>& vv = v.data();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out->value[i * d + j] = xv[i * d + j] + vv[j];
  Node* o = out.get();
  Node* px = x.node().get();
  Node* pv = v.node().get();
  out->backward = [o, px, pv, n, d]() {
    if (px->requires_grad) {
      std::vector<double>& dx = px->ensure_grad();
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += o->grad[i];
    }
    if (pv->requires_grad) {
      std::vector<double>& dv = pv->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) dv[j] += o->grad[i * d + j];
    }
  };
  return Tensor::wrap(out);
}

// ===== structural =====

Tensor tile_rows(const Tensor& x, int64_t times) {
  check(times >= 1, "tile_rows needs times >= 1");
  check(x.rank() >= 1, "tile_rows needs rank >= 1");
  Shape s = x.shape();
  s[0] *= times;
  auto out = new_node("tile_rows", std::move(s), {x.node()});
  const std::vector<double>& xv = x.data();
  for (int64_t t = 0; t < times; ++t)
    std::copy(xv.begin(), xv.end(), out->value.begin() + t * xv.size());
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px, times]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (int64_t t = 0; t < times; ++t) {
      const double* src = o->grad.data() + t * dx.size();
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += src[i];
    }
  };
  return Tensor::wrap(out);
}

Tensor gather_rows(const Tensor& table, const std::vector<int32_t>& ids) {
  check(table.rank() == 2, "gather_rows expects a 2-D table");
  int64_t rows = table.dim(0), d = table.dim(1);
  for (int32_t id : ids) {
    check(id >= 0 && id < rows,
          "gather_rows id " + std::to_string(id) + " out of range [0," +
              std::to_string(rows) + ")");
  }
  int64_t n = static_cast<int64_t>(ids.size());
  auto out = new_node("gather_rows", {n, d}, {table.node()});
  const std::vector<double>& tv = table.data();
  for (int64_t i = 0; i < n; ++i)
    std::copy(tv.begin() + ids[i] * d, tv.begin() + (ids[i] + 1) * d,
              out->value.begin() + i * d);
  Node* o = out.get();
  Node* pt = table.node().get();
  std::vector<int32_t> ids_copy = ids;
  out->backward = [o, pt, ids_copy, d]() {
    if (!pt->requires_grad) return;
    std::vector<double>& dt = pt->ensure_grad();
    for (size_t i = 0; i < ids_copy.size(); ++i) {
      const double* src = o->grad.data() + i * d;
      double* dst = dt.data() + static_cast<int64_t>(ids_copy[i]) * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return Tensor::wrap(out);
}

Tensor slice_cols(const Tensor& x, int64_t c0, int64_t c1) {
  check(x.rank() == 2, "slice_cols expects 2-D");
  int64_t n = x.dim(0), d = x.dim(1);
  check(0 <= c0 && c0 < c1 && c1 <= d, "slice_cols range invalid");
  int64_t w = c1 - c0;
  auto out = new_node("slice_cols", {n, w}, {x.node()});
  const std::vector<double>& xv = x.data();
  for (int64_t i = 0; i < n; ++i)
    std::copy(xv.begin() + i * d + c0, xv.begin() + i * d + c1,
              out->value.begin() + i * w);
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px, n, d, c0, w]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < w; ++j)
        dx[i * d + c0 + j] += o->grad[i * w + j];
  };
  return Tensor::wrap(out);
}

Tensor split_heads(const Tensor& x, int64_t batch, int64_t seq, int64_t heads) {
  check(x.rank() == 2 && x.dim(0) == batch * seq && x.dim(1) % heads == 0,
        "split_heads expects [batch*seq, heads*hd], got " +
            shape_str(x.shape()));
  int64_t hd = x.dim(1) / heads;
  auto out = new_node("split_heads", {batch * heads, seq, hd}, {x.node()});
  const std::vector<double>& xv = x.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < seq; ++t) {
        const double* src = xv.data() + (b * seq + t) * heads * hd + h * hd;
        double* dst = out->value.data() + ((b * heads + h) * seq + t) * hd;
        std::copy(src, src + hd, dst);
      }
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px, batch, seq, heads, hd]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < seq; ++t) {
          const double* src = o->grad.data() + ((b * heads + h) * seq + t) * hd;
          double* dst = dx.data() + (b * seq + t) * heads * hd + h * hd;
          for (int64_t j = 0; j < hd; ++j) dst[j] += src[j];
        }
  };
  return Tensor::wrap(out);
}

Tensor merge_heads(const Tensor& x, int64_t batch, int64_t seq, int64_t heads) {
  check(x.rank() == 3 && x.dim(0) == batch * heads && x.dim(1) == seq,
        "merge_heads expects [batch*heads, seq, hd], got " +
            shape_str(x.shape()));
  int64_t hd = x.dim(2);
  auto out = new_node("merge_heads", {batch * seq, heads * hd}, {x.node()});
  const std::vector<double>& xv = x.data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t t = 0; t < seq; ++t) {
        const double* src = xv.data() + ((b * heads + h) * seq + t) * hd;
        double* dst = out->value.data() + (b * seq + t) * heads * hd + h * hd;
        std::copy(src, src + hd, dst);
      }
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px, batch, seq, heads, hd]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (int64_t b = 0; b < batch; ++b)
      for (int64_t h = 0; h < heads; ++h)
        for (int64_t t = 0; t < seq; ++t) {
          const double* src = o->grad.data() + (b * seq + t) * heads * hd + h * hd;
          double* dst = dx.data() + ((b * heads + h) * seq + t) * hd;
          for (int64_t j = 0; j < hd; ++j) dst[j] += src[j];
        }
  };
  return Tensor::wrap(out);
}

Tensor causal_mask(const Tensor& scores) {
  check(scores.rank() == 3 && scores.dim(1) == scores.dim(2),
        "causal_mask expects [g,t,t], got " + shape_str(scores.shape()));
  int64_t g = scores.dim(0), t = scores.dim(1);
  auto out = new_node("causal_mask", scores.shape(), {scores.node()});
  const std::vector<double>& sv = scores.data();
  const double kMask = -1e30;
  for (int64_t gi = 0; gi < g; ++gi)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < t; ++j) {
        int64_t idx = (gi * t + i) * t + j;
        out->value[idx] = j > i ? sv[idx] + kMask : sv[idx];
      }
  Node* o = out.get();
  Node* px = scores.node().get();
  out->backward = [o, px]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (size_t i = 0; i < dx.size(); ++i) dx[i] += o->grad[i];
  };
  return Tensor::wrap(out);
}

// ===== nonlinearities =====

Tensor softmax_lastdim(const Tensor& x) {
  check(x.rank() >= 1, "softmax_lastdim needs rank >= 1");
  int64_t d = x.dim(-1);
  int64_t rows = x.numel() / d;
  auto out = new_node("softmax", x.shape(), {x.node()});
  const std::vector<double>& xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double* y = out->value.data() + r * d;
    double mx = in[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      y[j] = std::exp(in[j] - mx);
      sum += y[j];
    }
    for (int64_t j = 0; j < d; ++j) y[j] /= sum;
  }
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px, rows, d]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = o->value.data() + r * d;
      const double* dy = o->grad.data() + r * d;
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += dy[j] * y[j];
      for (int64_t j = 0; j < d; ++j) dx[r * d + j] += y[j] * (dy[j] - dot);
    }
  };
  return Tensor::wrap(out);
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  auto out = new_node("gelu", x.shape(), {x.node()});
  const std::vector<double>& xv = x.data();
  for (size_t i = 0; i < xv.size(); ++i) out->value[i] = gelu_scalar(xv[i]);
  Node* o = out.get();
  Node* px = x.node().get();
  out->backward = [o, px]() {
    if (!px->requires_grad) return;
    std::vector<double>& dx = px->ensure_grad();
    for (size_t i = 0; i < dx.size(); ++i) {
      double v = px->value[i];
      double u = kGeluC * (v + kGeluA * v * v * v);
      double t = std::tanh(u);
      double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      double g = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      dx[i] += o->grad[i] * g;
    }
  };
  return Tensor::wrap(out);
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps) {
  check(x.rank() >= 1, "layernorm needs rank >= 1");
  int64_t d = x.dim(-1);
  check(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 &&
            bias.dim(0) == d,
        "layernorm gain/bias must be [d]");
  int64_t rows = x.numel() / d;
  auto out = new_node("layernorm", x.shape(), {x.node(), gain.node(), bias.node()});
  // Row statistics are saved for backward instead of being recomputed, so
  // forward and backward agree bitwise.
  auto mean = std::make_shared<std::vector<double>>(rows);
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const std::vector<double>& xv = x.data();
  const std::vector<double>& gv = gain.data();
  const std::vector<double>& bv = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    double rs = 1.0 / std::sqrt(var + eps);
    (*mean)[r] = mu;
    (*rstd)[r] = rs;
    double* y = out->value.data() + r * d;
    for (int64_t j = 0; j < d; ++j) y[j] = (in[j] - mu) * rs * gv[j] + bv[j];
  }
  Node* o = out.get();
  Node* px = x.node().get();
  Node* pg = gain.node().get();
  Node* pb = bias.node().get();
  out->backward = [o, px, pg, pb, rows, d, mean, rstd]() {
    for (int64_t r = 0; r < rows; ++r) {
      const double* in = px->value.data() + r * d;
      const double* dy = o->grad.data() + r * d;
      const double* gv = pg->value.data();
      double mu = (*mean)[r], rs = (*rstd)[r];
      if (pg->requires_grad) {
        std::vector<double>& dg = pg->ensure_grad();
        for (int64_t j = 0; j < d; ++j) dg[j] += dy[j] * (in[j] - mu) * rs;
      }
      if (pb->requires_grad) {
        std::vector<double>& db = pb->ensure_grad();
        for (int64_t j = 0; j < d; ++j) db[j] += dy[j];
      }
      if (px->requires_grad) {
        std::vector<double>& dx = px->ensure_grad();
        double s1 = 0.0, s2 = 0.0;  // mean(g*dy), mean(g*dy*xhat)
        for (int64_t j = 0; j < d; ++j) {
          double xh = (in[j] - mu) * rs;
          s1 += gv[j] * dy[j];
          s2 += gv[j] * dy[j] * xh;
        }
        s1 /= static_cast<double>(d);
        s2 /= static_cast<double>(d);
        for (int64_t j = 0; j < d; ++j) {
          double xh = (in[j] - mu) * rs;
          dx[r * d + j] += rs * (gv[j] * dy[j] - s1 - xh * s2);
        }
      }
    }
  };
  return Tensor::wrap(out);
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int32_t>& targets) {
  check(logits.rank() == 2, "cross entropy expects logits [n,v]");
  int64_t n = logits.dim(0), v = logits.dim(1);
  check(static_cast<int64_t>(targets.size()) == n,
        "cross entropy target count differs from logit rows");
  for (int32_t t : targets)
    check(t >= 0 && t < v, "cross entropy target id out of range");
  auto out = new_node("cross_entropy", {1}, {logits.node()});
  auto probs = std::make_shared<std::vector<double>>(n * v);
  const std::vector<double>& lv = logits.data();
  double total = 0.0;
  for (int64_t r = 0; r < n; ++r) {
    const double* z = lv.data() + r * v;
    double mx = z[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    double* p = probs->data() + r * v;
    for (int64_t j = 0; j < v; ++j) {
      p[j] = std::exp(z[j] - mx);
      sum += p[j];
    }
    for (int64_t j = 0; j < v; ++j) p[j] /= sum;
    total += (mx + std::log(sum)) - z[targets[r]];
  }
  out->value[0] = total / static_cast<double>(n);
  Node* o = out.get();
  Node* pl = logits.node().get();
  std::vector<int32_t> tgt = targets;
  out->backward = [o, pl, probs, tgt, n, v]() {
    if (!pl->requires_grad) return;
    std::vector<double>& dl = pl->ensure_grad();
    double up = o->grad[0] / static_cast<double>(n);
    for (int64_t r = 0; r < n; ++r) {
      const double* p = probs->data() + r * v;
      double* d = dl.data() + r * v;
      for (int64_t j = 0; j < v; ++j) d[j] += up * p[j];
      d[tgt[r]] -= up;
    }
  };
  return Tensor::wrap(out);
}

Tensor custom_grad(const std::vector<Tensor>& parents,
                   std::vector<double> value, Shape shape, CustomBackward rule,
                   const char* op_name) {
  check(static_cast<int64_t>(value.size()) == shape_numel(shape),
        "custom_grad value count does not match shape");
  std::vector<std::shared_ptr<Node>> pn;
  pn.reserve(parents.size());
  for (const Tensor& p : parents) pn.push_back(p.node());
  auto out = new_node(op_name, std::move(shape), std::move(pn));
  out->value = std::move(value);
  Node* o = out.get();
  out->backward = [o, rule]() {
    std::vector<double*> dsts;
    dsts.reserve(o->parents.size());
    for (const auto& p : o->parents)
      dsts.push_back(p->requires_grad ? p->ensure_grad().data() : nullptr);
    rule(std::span<const double>(o->grad.data(), o->grad.size()), dsts);
  };
  return Tensor::wrap(out);
}

}  // namespace qtrain
