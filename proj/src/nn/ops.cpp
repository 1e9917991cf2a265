#include "firm/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <Eigen/Core>

#include "firm/errors.hpp"
#include "firm/imaging.hpp"

namespace firm::nn {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ArgumentError(std::string(op) + ": " + detail);
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_chw(const Tensor& x, const char* op) {
  require(x.ndim() == 3, op, "expected [C,H,W], got " + shape_str(x.shape()));
}

template <class F, class D>
Tensor unary(const Tensor& x, F f, D dfdx_from_xy) {
  const auto xv = x.value();
  std::vector<double> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  Node* xn = x.node();
  return make_result(x.shape(), std::move(y), {x}, [xn, dfdx_from_xy](Node& self) {
    if (double* gx = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gx[i] += self.grad[i] * dfdx_from_xy(xn->value[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(a.shape(), std::move(y), {a, b}, [an, bn](Node& self) {
    for (Node* p : {an, bn})
      if (double* g = grad_of(p))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(a.shape(), std::move(y), {a, b}, [an, bn](Node& self) {
    if (double* g = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(a.shape(), std::move(y), {a, b}, [an, bn](Node& self) {
    if (double* g = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn->value[i];
    if (double* g = grad_of(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an->value[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require(s.size() == 1, "mul_scalar", "scale must have one element");
  const double k = s.value()[0];
  std::vector<double> y(a.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = k * a.value()[i];
  Node *an = a.node(), *sn = s.node();
  return make_result(a.shape(), std::move(y), {a, s}, [an, sn](Node& self) {
    const double k = sn->value[0];
    if (double* g = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += k * self.grad[i];
    if (double* g = grad_of(sn)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
      g[0] += acc;
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor reciprocal(const Tensor& x) {
  return unary(x, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor add_channel(const Tensor& x, const Tensor& bias) {
  require_chw(x, "add_channel");
  require(bias.size() == static_cast<std::size_t>(x.dim(0)), "add_channel", "bias length must equal channels");
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<double> y(x.value().begin(), x.value().end());
  for (int c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] += bias.value()[c];
  Node *xn = x.node(), *bn = bias.node();
  const int channels = x.dim(0);
  return make_result(x.shape(), std::move(y), {x, bias}, [xn, bn, plane, channels](Node& self) {
    if (double* g = grad_of(xn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(bn))
      for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += self.grad[c * plane + i];
        g[c] += acc;
      }
  });
}

Tensor mul_channel(const Tensor& x, const Tensor& s) {
  require_chw(x, "mul_channel");
  require(s.size() == static_cast<std::size_t>(x.dim(0)), "mul_channel", "scale length must equal channels");
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  const int channels = x.dim(0);
  std::vector<double> y(x.size());
  for (int c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] = x.value()[c * plane + i] * s.value()[c];
  Node *xn = x.node(), *sn = s.node();
  return make_result(x.shape(), std::move(y), {x, s}, [xn, sn, plane, channels](Node& self) {
    double* gx = grad_of(xn);
    double* gs = grad_of(sn);
    for (int c = 0; c < channels; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = c * plane + i;
        if (gx) gx[k] += self.grad[k] * sn->value[c];
        acc += self.grad[k] * xn->value[k];
      }
      if (gs) gs[c] += acc;
    }
  });
}

Tensor mul_plane(const Tensor& x, const Tensor& plane_t) {
  require_chw(x, "mul_plane");
  require(plane_t.ndim() == 3 && plane_t.dim(0) == 1 && plane_t.dim(1) == x.dim(1) && plane_t.dim(2) == x.dim(2),
          "mul_plane", "plane must be [1,H,W] matching input");
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  const int channels = x.dim(0);
  std::vector<double> y(x.size());
  for (int c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < plane; ++i) y[c * plane + i] = x.value()[c * plane + i] * plane_t.value()[i];
  Node *xn = x.node(), *pn = plane_t.node();
  return make_result(x.shape(), std::move(y), {x, plane_t}, [xn, pn, plane, channels](Node& self) {
    double* gx = grad_of(xn);
    double* gp = grad_of(pn);
    for (int c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t k = c * plane + i;
        if (gx) gx[k] += self.grad[k] * pn->value[i];
        if (gp) gp[i] += self.grad[k] * xn->value[k];
      }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> y(a.value().begin(), a.value().end());
  Node* an = a.node();
  return make_result(std::move(shape), std::move(y), {a}, [an](Node& self) {
    if (double* g = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat0(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat0", "no inputs");
  Shape shape = parts[0].shape();
  require(!shape.empty(), "concat0", "scalar inputs");
  int lead = 0;
  for (const auto& p : parts) {
    require(p.ndim() == static_cast<int>(shape.size()) &&
                std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1),
            "concat0", "trailing dimensions differ");
    lead += p.dim(0);
  }
  shape[0] = lead;
  std::vector<double> y;
  y.reserve(numel(shape));
  std::vector<Node*> nodes;
  for (const auto& p : parts) {
    y.insert(y.end(), p.value().begin(), p.value().end());
    nodes.push_back(p.node());
  }
  return make_result(std::move(shape), std::move(y), parts, [nodes](Node& self) {
    std::size_t offset = 0;
    for (Node* p : nodes) {
      if (double* g = grad_of(p))
        for (std::size_t i = 0; i < p->value.size(); ++i) g[i] += self.grad[offset + i];
      offset += p->value.size();
    }
  });
}

Tensor slice0(const Tensor& a, int start, int count) {
  require(a.ndim() >= 1 && start >= 0 && count >= 1 && start + count <= a.dim(0), "slice0", "range out of bounds");
  Shape shape = a.shape();
  shape[0] = count;
  const std::size_t inner = a.size() / static_cast<std::size_t>(a.dim(0));
  const std::size_t off = inner * start;
  std::vector<double> y(a.value().begin() + off, a.value().begin() + off + inner * count);
  Node* an = a.node();
  return make_result(std::move(shape), std::move(y), {a}, [an, off](Node& self) {
    if (double* g = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  require(a.ndim() == 2, "transpose", "expected matrix");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> y(a.size());
  MapR(y.data(), n, m) = CMapR(a.value().data(), m, n).transpose();
  Node* an = a.node();
  return make_result({n, m}, std::move(y), {a}, [an, m, n](Node& self) {
    if (double* g = grad_of(an)) MapR(g, m, n) += CMapR(self.grad.data(), n, m).transpose();
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), "matmul",
          shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> y(static_cast<std::size_t>(m) * n);
  MapR(y.data(), m, n).noalias() = CMapR(a.value().data(), m, k) * CMapR(b.value().data(), k, n);
  Node *an = a.node(), *bn = b.node();
  return make_result({m, n}, std::move(y), {a, b}, [an, bn, m, k, n](Node& self) {
    CMapR gy(self.grad.data(), m, n);
    if (double* g = grad_of(an)) MapR(g, m, k).noalias() += gy * CMapR(bn->value.data(), k, n).transpose();
    if (double* g = grad_of(bn)) MapR(g, k, n).noalias() += CMapR(an->value.data(), m, k).transpose() * gy;
  });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.size() == static_cast<std::size_t>(a.dim(1)), "add_rowvec", "bias length mismatch");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> y(a.value().begin(), a.value().end());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y[static_cast<std::size_t>(i) * n + j] += b.value()[j];
  Node *an = a.node(), *bn = b.node();
  return make_result(a.shape(), std::move(y), {a, b}, [an, bn, m, n](Node& self) {
    if (double* g = grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    if (double* g = grad_of(bn))
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) g[j] += self.grad[static_cast<std::size_t>(i) * n + j];
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  return b.defined() ? add_rowvec(y, b) : y;
}

Tensor softmax_rows(const Tensor& a) {
  require(a.ndim() == 2, "softmax_rows", "expected matrix");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> y(a.size());
  for (int i = 0; i < m; ++i) {
    const double* row = a.value().data() + static_cast<std::size_t>(i) * n;
    double* out = y.data() + static_cast<std::size_t>(i) * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (out[j] = std::exp(row[j] - mx));
    for (int j = 0; j < n; ++j) out[j] /= s;
  }
  Node* an = a.node();
  return make_result(a.shape(), std::move(y), {a}, [an, m, n](Node& self) {
    double* g = grad_of(an);
    if (!g) return;
    for (int i = 0; i < m; ++i) {
      const std::size_t o = static_cast<std::size_t>(i) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += self.grad[o + j] * self.value[o + j];
      for (int j = 0; j < n; ++j) g[o + j] += self.value[o + j] * (self.grad[o + j] - dot);
    }
  });
}

namespace {

// Normalises `groups` vectors of length `len`, element (g, i) at g*gs + i*es.
Tensor layernorm_impl(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps, int groups, int len,
                      std::size_t gs, std::size_t es, const char* op) {
  require(gamma.size() == static_cast<std::size_t>(len) && beta.size() == static_cast<std::size_t>(len), op,
          "affine parameters must match normalised length");
  std::vector<double> y(a.size());
  std::vector<double> xhat(a.size());
  std::vector<double> inv_std(groups);
  const auto x = a.value();
  for (int g = 0; g < groups; ++g) {
    double mu = 0.0;
    for (int i = 0; i < len; ++i) mu += x[g * gs + i * es];
    mu /= len;
    double var = 0.0;
    for (int i = 0; i < len; ++i) {
      const double d = x[g * gs + i * es] - mu;
      var += d * d;
    }
    var /= len;
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < len; ++i) {
      const std::size_t k = g * gs + i * es;
      xhat[k] = (x[k] - mu) * inv_std[g];
      y[k] = xhat[k] * gamma.value()[i] + beta.value()[i];
    }
  }
  Node *an = a.node(), *gn = gamma.node(), *bn = beta.node();
  return make_result(a.shape(), std::move(y), {a, gamma, beta},
                     [an, gn, bn, groups, len, gs, es, xhat = std::move(xhat),
                      inv_std = std::move(inv_std)](Node& self) {
                       double* ga = grad_of(an);
                       double* gg = grad_of(gn);
                       double* gb = grad_of(bn);
                       for (int g = 0; g < groups; ++g) {
                         double m1 = 0.0, m2 = 0.0;
                         for (int i = 0; i < len; ++i) {
                           const std::size_t k = g * gs + i * es;
                           const double dxh = self.grad[k] * gn->value[i];
                           m1 += dxh;
                           m2 += dxh * xhat[k];
                           if (gg) gg[i] += self.grad[k] * xhat[k];
                           if (gb) gb[i] += self.grad[k];
                         }
                         m1 /= len;
                         m2 /= len;
                         if (!ga) continue;
                         for (int i = 0; i < len; ++i) {
                           const std::size_t k = g * gs + i * es;
                           const double dxh = self.grad[k] * gn->value[i];
                           ga[k] += inv_std[g] * (dxh - m1 - xhat[k] * m2);
                         }
                       }
                     });
}

}  // namespace

Tensor layernorm_rows(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  require(a.ndim() == 2, "layernorm_rows", "expected matrix");
  return layernorm_impl(a, gamma, beta, eps, a.dim(0), a.dim(1), static_cast<std::size_t>(a.dim(1)), 1,
                        "layernorm_rows");
}

// Same maths as layernorm_impl, but walks whole planes so the inner loops stay contiguous.
Tensor layernorm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_chw(x, "layernorm_channels");
  const int C = x.dim(0);
  const std::size_t P = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  require(gamma.size() == static_cast<std::size_t>(C) && beta.size() == static_cast<std::size_t>(C),
          "layernorm_channels", "affine parameters must match channel count");
  const double* xv = x.value().data();
  std::vector<double> mu(P, 0.0), inv(P, 0.0), xhat(x.size()), y(x.size());
  for (int c = 0; c < C; ++c) {
    const double* src = xv + c * P;
    for (std::size_t i = 0; i < P; ++i) mu[i] += src[i];
  }
  for (double& m : mu) m /= C;
  for (int c = 0; c < C; ++c) {
    const double* src = xv + c * P;
    for (std::size_t i = 0; i < P; ++i) {
      const double d = src[i] - mu[i];
      inv[i] += d * d;
    }
  }
  for (double& v : inv) v = 1.0 / std::sqrt(v / C + eps);
  for (int c = 0; c < C; ++c) {
    const double* src = xv + c * P;
    double* xh = xhat.data() + c * P;
    double* dst = y.data() + c * P;
    const double g = gamma.value()[c], b = beta.value()[c];
    for (std::size_t i = 0; i < P; ++i) {
      xh[i] = (src[i] - mu[i]) * inv[i];
      dst[i] = xh[i] * g + b;
    }
  }
  Node *an = x.node(), *gn = gamma.node(), *bn = beta.node();
  return make_result(x.shape(), std::move(y), {x, gamma, beta},
                     [an, gn, bn, C, P, xhat = std::move(xhat), inv = std::move(inv)](Node& self) {
                       double* ga = grad_of(an);
                       double* gg = grad_of(gn);
                       double* gb = grad_of(bn);
                       const double* gy = self.grad.data();
                       std::vector<double> m1(P, 0.0), m2(P, 0.0);
                       for (int c = 0; c < C; ++c) {
                         const double* g = gy + c * P;
                         const double* xh = xhat.data() + c * P;
                         const double gam = gn->value[c];
                         double sg = 0.0, sb = 0.0;
                         for (std::size_t i = 0; i < P; ++i) {
                           const double dxh = g[i] * gam;
                           m1[i] += dxh;
                           m2[i] += dxh * xh[i];
                           sg += g[i] * xh[i];
                           sb += g[i];
                         }
                         if (gg) gg[c] += sg;
                         if (gb) gb[c] += sb;
                       }
                       if (!ga) return;
                       for (std::size_t i = 0; i < P; ++i) {
                         m1[i] /= C;
                         m2[i] /= C;
                       }
                       for (int c = 0; c < C; ++c) {
                         const double* g = gy + c * P;
                         const double* xh = xhat.data() + c * P;
                         double* out = ga + c * P;
                         const double gam = gn->value[c];
                         for (std::size_t i = 0; i < P; ++i) out[i] += inv[i] * (g[i] * gam - m1[i] - xh[i] * m2[i]);
                       }
                     });
}

// Output columns [lo, hi) whose tap kx lands inside a row of width wd.
static std::pair<int, int> valid_range(int wo, int wd, int stride, int pad, int kx) {
  int lo = 0;
  while (lo < wo && lo * stride - pad + kx < 0) ++lo;
  int hi = wo;
  while (hi > lo && (hi - 1) * stride - pad + kx >= wd) --hi;
  return {lo, hi};
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad, int groups) {
  require_chw(x, "conv2d");
  require(w.ndim() == 4 && w.dim(2) == w.dim(3), "conv2d", "weight must be [Co,Ci/g,K,K]");
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), cig = w.dim(1), k = w.dim(2);
  require(groups >= 1 && ci % groups == 0 && co % groups == 0 && cig == ci / groups, "conv2d",
          "channel/group mismatch: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  require(!bias.defined() || bias.size() == static_cast<std::size_t>(co), "conv2d", "bias length mismatch");
  require(stride >= 1 && pad >= 0, "conv2d", "bad stride/pad");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  require(ho >= 1 && wo >= 1, "conv2d", "input smaller than kernel");
  const int cog = co / groups;
  const std::size_t in_plane = static_cast<std::size_t>(h) * wd;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  const int rows = cig * k * k;
  std::vector<double> y(static_cast<std::size_t>(co) * out_plane, 0.0);
  const double* xv = x.value().data();
  const double* wv = w.value().data();
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  const bool depthwise = (groups == ci && cig == 1 && cog == 1);

  auto build_cols = [=](int g, std::vector<double>& cols) {
    cols.assign(static_cast<std::size_t>(rows) * out_plane, 0.0);
    for (int c = 0; c < cig; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          double* dst = cols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * out_plane;
          const double* src = xv + static_cast<std::size_t>(g * cig + c) * in_plane;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < wd) dst[oy * wo + ox] = src[iy * wd + ix];
            }
          }
        }
  };

  if (depthwise) {
    for (int c = 0; c < ci; ++c)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double wgt = wv[(static_cast<std::size_t>(c) * k + ky) * k + kx];
          const auto [lo, hi] = valid_range(wo, wd, stride, pad, kx);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            const double* src = xv + static_cast<std::ptrdiff_t>(c * in_plane + static_cast<std::size_t>(iy) * wd) - pad + kx;
            double* dst = y.data() + c * out_plane + static_cast<std::size_t>(oy) * wo;
            for (int ox = lo; ox < hi; ++ox) dst[ox] += wgt * src[ox * stride];
          }
        }
  } else {
    std::vector<double> cols;
    for (int g = 0; g < groups; ++g) {
      const double* colp = xv + static_cast<std::size_t>(g * cig) * in_plane;
      if (!pointwise) {
        build_cols(g, cols);
        colp = cols.data();
      }
      MapR(y.data() + static_cast<std::size_t>(g * cog) * out_plane, cog, out_plane).noalias() =
          CMapR(wv + static_cast<std::size_t>(g * cog) * rows, cog, rows) * CMapR(colp, rows, out_plane);
    }
  }
  if (bias.defined())
    for (int c = 0; c < co; ++c)
      for (std::size_t i = 0; i < out_plane; ++i) y[c * out_plane + i] += bias.value()[c];

  Node *xn = x.node(), *wn = w.node(), *bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_result(
      {co, ho, wo}, std::move(y), parents,
      [=](Node& self) {
        double* gx = grad_of(xn);
        double* gw = grad_of(wn);
        double* gb = grad_of(bn);
        const double* gy = self.grad.data();
        if (gb)
          for (int c = 0; c < co; ++c) {
            double acc = 0.0;
            for (std::size_t i = 0; i < out_plane; ++i) acc += gy[c * out_plane + i];
            gb[c] += acc;
          }
        const double* xv2 = xn->value.data();
        const double* wv2 = wn->value.data();
        if (depthwise) {
          for (int c = 0; c < ci; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const std::size_t wi = (static_cast<std::size_t>(c) * k + ky) * k + kx;
                const double wgt = wv2[wi];
                const auto [lo, hi] = valid_range(wo, wd, stride, pad, kx);
                double acc = 0.0;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(c * in_plane + static_cast<std::size_t>(iy) * wd) - pad + kx;
                  const double* go = gy + c * out_plane + static_cast<std::size_t>(oy) * wo;
                  const double* src = xv2 + off;
                  for (int ox = lo; ox < hi; ++ox) acc += go[ox] * src[ox * stride];
                  if (gx) {
                    double* dx = gx + off;
                    for (int ox = lo; ox < hi; ++ox) dx[ox * stride] += go[ox] * wgt;
                  }
                }
                if (gw) gw[wi] += acc;
              }
          return;
        }
        std::vector<double> cols, dcols;
        for (int g = 0; g < groups; ++g) {
          CMapR gyg(gy + static_cast<std::size_t>(g * cog) * out_plane, cog, out_plane);
          const double* colp = xv2 + static_cast<std::size_t>(g * cig) * in_plane;
          if (!pointwise && gw) {
            // Rebuild columns from the stored input.
            cols.assign(static_cast<std::size_t>(rows) * out_plane, 0.0);
            for (int c = 0; c < cig; ++c)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  double* dst = cols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * out_plane;
                  const double* src = xv2 + static_cast<std::size_t>(g * cig + c) * in_plane;
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * stride - pad + kx;
                      if (ix >= 0 && ix < wd) dst[oy * wo + ox] = src[iy * wd + ix];
                    }
                  }
                }
            colp = cols.data();
          }
          if (gw)
            MapR(gw + static_cast<std::size_t>(g * cog) * rows, cog, rows).noalias() +=
                gyg * CMapR(colp, rows, out_plane).transpose();
          if (!gx) continue;
          CMapR wg(wv2 + static_cast<std::size_t>(g * cog) * rows, cog, rows);
          if (pointwise) {
            MapR(gx + static_cast<std::size_t>(g * cig) * in_plane, rows, out_plane).noalias() += wg.transpose() * gyg;
            continue;
          }
          dcols.resize(static_cast<std::size_t>(rows) * out_plane);
          MapR(dcols.data(), rows, out_plane).noalias() = wg.transpose() * gyg;
          for (int c = 0; c < cig; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const double* src = dcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * out_plane;
                double* dst = gx + static_cast<std::size_t>(g * cig + c) * in_plane;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - pad + kx;
                    if (ix >= 0 && ix < wd) dst[iy * wd + ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride) {
  require_chw(x, "conv_transpose2d");
  require(w.ndim() == 4 && w.dim(0) == x.dim(0) && w.dim(2) == stride && w.dim(3) == stride, "conv_transpose2d",
          "weight must be [Ci,Co,S,S] with kernel == stride");
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(1), s = stride;
  require(!bias.defined() || bias.size() == static_cast<std::size_t>(co), "conv_transpose2d", "bias length mismatch");
  const int ho = h * s, wo = wd * s;
  const std::size_t in_plane = static_cast<std::size_t>(h) * wd;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  const int taps = co * s * s;
  // cols[(o*s+dy)*s+dx, p] = sum_c w[c, o, dy, dx] * x[c, p]
  MatR cols = CMapR(w.value().data(), ci, taps).transpose() * CMapR(x.value().data(), ci, in_plane);
  std::vector<double> y(static_cast<std::size_t>(co) * out_plane);
  for (int o = 0; o < co; ++o)
    for (int dy = 0; dy < s; ++dy)
      for (int dx = 0; dx < s; ++dx) {
        const double b = bias.defined() ? bias.value()[o] : 0.0;
        const auto row = cols.row((o * s + dy) * s + dx);
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < wd; ++j)
            y[o * out_plane + static_cast<std::size_t>(i * s + dy) * wo + (j * s + dx)] = row(i * wd + j) + b;
      }
  Node *xn = x.node(), *wn = w.node(), *bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_result({co, ho, wo}, std::move(y), parents, [=](Node& self) {
    MatR dcols(taps, in_plane);
    for (int o = 0; o < co; ++o)
      for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j)
              dcols((o * s + dy) * s + dx, i * wd + j) =
                  self.grad[o * out_plane + static_cast<std::size_t>(i * s + dy) * wo + (j * s + dx)];
    if (double* gb = grad_of(bn))
      for (int o = 0; o < co; ++o) gb[o] += dcols.middleRows(o * s * s, s * s).sum();
    if (double* gw = grad_of(wn))
      MapR(gw, ci, taps).noalias() += CMapR(xn->value.data(), ci, in_plane) * dcols.transpose();
    if (double* gx = grad_of(xn))
      MapR(gx, ci, in_plane).noalias() += CMapR(wn->value.data(), ci, taps) * dcols;
  });
}

Tensor mean_spatial(const Tensor& x) {
  require_chw(x, "mean_spatial");
  const int c = x.dim(0);
  const std::size_t plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  std::vector<double> y(c);
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += x.value()[ch * plane + i];
    y[ch] = acc / static_cast<double>(plane);
  }
  Node* xn = x.node();
  return make_result({c}, std::move(y), {x}, [xn, c, plane](Node& self) {
    if (double* g = grad_of(xn))
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < plane; ++i) g[ch * plane + i] += self.grad[ch] / static_cast<double>(plane);
  });
}

Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
  require_chw(x, "resize_bilinear");
  require(out_h >= 1 && out_w >= 1, "resize_bilinear", "target size must be positive");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return x;
  const auto ty = firm::detail::bilinear_taps(h, out_h);
  const auto tx = firm::detail::bilinear_taps(w, out_w);
  const std::size_t ip = static_cast<std::size_t>(h) * w, op = static_cast<std::size_t>(out_h) * out_w;
  std::vector<double> y(static_cast<std::size_t>(c) * op);
  const double* xv = x.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < out_h; ++r)
      for (int q = 0; q < out_w; ++q) {
        const auto& a = ty[r];
        const auto& b = tx[q];
        const double* s = xv + ch * ip;
        y[ch * op + static_cast<std::size_t>(r) * out_w + q] =
            (1 - a.t) * ((1 - b.t) * s[a.i0 * w + b.i0] + b.t * s[a.i0 * w + b.i1]) +
            a.t * ((1 - b.t) * s[a.i1 * w + b.i0] + b.t * s[a.i1 * w + b.i1]);
      }
  Node* xn = x.node();
  return make_result({c, out_h, out_w}, std::move(y), {x}, [=](Node& self) {
    double* g = grad_of(xn);
    if (!g) return;
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < out_h; ++r)
        for (int q = 0; q < out_w; ++q) {
          const auto& a = ty[r];
          const auto& b = tx[q];
          const double d = self.grad[ch * op + static_cast<std::size_t>(r) * out_w + q];
          double* s = g + ch * ip;
          s[a.i0 * w + b.i0] += d * (1 - a.t) * (1 - b.t);
          s[a.i0 * w + b.i1] += d * (1 - a.t) * b.t;
          s[a.i1 * w + b.i0] += d * a.t * (1 - b.t);
          s[a.i1 * w + b.i1] += d * a.t * b.t;
        }
  });
}

Tensor avgpool2(const Tensor& x) {
  require_chw(x, "avgpool2");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = std::max(1, h / 2), ow = std::max(1, w / 2);
  const int fy = h >= 2 ? 2 : 1, fx = w >= 2 ? 2 : 1;
  const double inv = 1.0 / (fy * fx);
  std::vector<double> y(static_cast<std::size_t>(c) * oh * ow, 0.0);
  const double* xv = x.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int q = 0; q < ow; ++q) {
        double acc = 0.0;
        for (int dy = 0; dy < fy; ++dy)
          for (int dx = 0; dx < fx; ++dx) acc += xv[(static_cast<std::size_t>(ch) * h + r * fy + dy) * w + q * fx + dx];
        y[(static_cast<std::size_t>(ch) * oh + r) * ow + q] = acc * inv;
      }
  Node* xn = x.node();
  return make_result({c, oh, ow}, std::move(y), {x}, [=](Node& self) {
    double* g = grad_of(xn);
    if (!g) return;
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < oh; ++r)
        for (int q = 0; q < ow; ++q) {
          const double d = self.grad[(static_cast<std::size_t>(ch) * oh + r) * ow + q] * inv;
          for (int dy = 0; dy < fy; ++dy)
            for (int dx = 0; dx < fx; ++dx) g[(static_cast<std::size_t>(ch) * h + r * fy + dy) * w + q * fx + dx] += d;
        }
  });
}

namespace {

Tensor forward_difference(const Tensor& x, bool along_x) {
  require_chw(x, along_x ? "grad_x" : "grad_y");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int step = along_x ? 1 : w;
  std::vector<double> y(x.size(), 0.0);
  const double* xv = x.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < h; ++r)
      for (int q = 0; q < w; ++q) {
        if (along_x ? q + 1 >= w : r + 1 >= h) continue;
        const std::size_t k = (static_cast<std::size_t>(ch) * h + r) * w + q;
        y[k] = xv[k + step] - xv[k];
      }
  Node* xn = x.node();
  return make_result(x.shape(), std::move(y), {x}, [=](Node& self) {
    double* g = grad_of(xn);
    if (!g) return;
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < h; ++r)
        for (int q = 0; q < w; ++q) {
          if (along_x ? q + 1 >= w : r + 1 >= h) continue;
          const std::size_t k = (static_cast<std::size_t>(ch) * h + r) * w + q;
          g[k + step] += self.grad[k];
          g[k] -= self.grad[k];
        }
  });
}

}  // namespace

Tensor grad_x(const Tensor& x) { return forward_difference(x, true); }
Tensor grad_y(const Tensor& x) { return forward_difference(x, false); }

Tensor sum(const Tensor& a) {
  const double s = std::accumulate(a.value().begin(), a.value().end(), 0.0);
  Node* an = a.node();
  return make_result({1}, {s}, {a}, [an](Node& self) {
    if (double* g = grad_of(an))
      for (std::size_t i = 0; i < an->value.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor l1_loss(const Tensor& a, const Tensor& b) {
  require_same(a, b, "l1_loss");
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  Node *an = a.node(), *bn = b.node();
  return make_result({1}, {s / static_cast<double>(n)}, {a, b}, [an, bn, n](Node& self) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    const double k = self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = an->value[i] - bn->value[i];
      const double sg = d > 0 ? k : (d < 0 ? -k : 0.0);
      if (ga) ga[i] += sg;
      if (gb) gb[i] -= sg;
    }
  });
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mse_loss");
  const std::size_t n = a.size();
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (a.value()[i] - b.value()[i]) * (a.value()[i] - b.value()[i]);
  Node *an = a.node(), *bn = b.node();
  return make_result({1}, {s / static_cast<double>(n)}, {a, b}, [an, bn, n](Node& self) {
    double* ga = grad_of(an);
    double* gb = grad_of(bn);
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double d = k * (an->value[i] - bn->value[i]);
      if (ga) ga[i] += d;
      if (gb) gb[i] -= d;
    }
  });
}

Tensor weighted_sum(const std::vector<Tensor>& scalars, const std::vector<double>& weights) {
  require(scalars.size() == weights.size() && !scalars.empty(), "weighted_sum", "size mismatch");
  double s = 0.0;
  std::vector<Node*> nodes;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require(scalars[i].size() == 1, "weighted_sum", "inputs must be scalars");
    s += weights[i] * scalars[i].value()[0];
    nodes.push_back(scalars[i].node());
  }
  return make_result({1}, {s}, scalars, [nodes, weights](Node& self) {
    for (std::size_t i = 0; i < nodes.size(); ++i)
      if (double* g = grad_of(nodes[i])) g[0] += weights[i] * self.grad[0];
  });
}

}  // namespace firm::nn
