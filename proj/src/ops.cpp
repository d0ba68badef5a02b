#include "iir/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "iir/error.hpp"

namespace iir::ops {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;
using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using StridedR = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;
using CStridedR = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void check_finite(const char* op, const std::vector<Real>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

Tensor make(const char* op, Shape shape, std::vector<Real> value, std::vector<NodePtr> parents,
            std::function<void(Node&)> backward) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->is_leaf = false;
  node->op = op;
  bool needs = false;
  if (grad_mode_enabled()) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const NodePtr& node_of(const char* op, const Tensor& t) {
  if (!t.defined()) shape_fail(op, "undefined operand");
  return t.node();
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

std::size_t sz(std::int64_t v) { return static_cast<std::size_t>(v); }

// Reflect-padded source pixel for each of the 9 taps at each output pixel.
// With `bands` > 1 the rows split into equal horizontal bands, each padded on
// its own so nothing leaks across band seams.
std::vector<int> conv_taps(std::int64_t h, std::int64_t w, int stride, int bands) {
  const std::int64_t ho = h / stride, wo = w / stride, band = h / bands;
  std::vector<int> idx(sz(9 * ho * wo));
  auto reflect = [](std::int64_t i, std::int64_t n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  for (int ky = 0; ky < 3; ++ky) {
    for (int kx = 0; kx < 3; ++kx) {
      const int k = ky * 3 + kx;
      for (std::int64_t oy = 0; oy < ho; ++oy) {
        for (std::int64_t ox = 0; ox < wo; ++ox) {
          const std::int64_t row = oy * stride, top = row / band * band;
          const auto iy = top + reflect(row - top + ky - 1, band);
          const auto ix = reflect(ox * stride + kx - 1, w);
          idx[sz(k * ho * wo + oy * wo + ox)] = static_cast<int>(iy * w + ix);
        }
      }
    }
  }
  return idx;
}

void softmax_rows(Real* data, std::int64_t rows, std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    Real* row = data + r * cols;
    const Real mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    const Real inv = static_cast<Real>(1.0 / total);
    for (std::int64_t c = 0; c < cols; ++c) row[c] *= inv;
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  auto pa = node_of("add", a), pb = node_of("add", b);
  std::vector<Real> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->value[i] + pb->value[i];
  return make("add", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  auto pa = node_of("sub", a), pb = node_of("sub", b);
  std::vector<Real> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->value[i] - pb->value[i];
  return make("sub", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  auto pa = node_of("mul", a), pb = node_of("mul", b);
  std::vector<Real> out(pa->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa->value[i] * pb->value[i];
  return make("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& x, Real factor) {
  auto px = node_of("scale", x);
  std::vector<Real> out(px->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px->value[i] * factor;
  return make("scale", x.shape(), std::move(out), {px}, [px, factor](Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor silu(const Tensor& x) {
  auto px = node_of("silu", x);
  std::vector<Real> out(px->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real v = px->value[i];
    out[i] = v / (Real(1) + std::exp(-v));
  }
  return make("silu", x.shape(), std::move(out), {px}, [px](Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = px->value[i];
      const Real s = Real(1) / (Real(1) + std::exp(-v));
      g[i] += self.grad[i] * s * (Real(1) + v * (Real(1) - s));
    }
  });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  auto px = node_of("clamp", x);
  std::vector<Real> out(px->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(px->value[i], lo, hi);
  return make("clamp", x.shape(), std::move(out), {px}, [px, lo, hi](Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = px->value[i];
      if (v >= lo && v <= hi) g[i] += self.grad[i];
    }
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const auto& xs = x.shape();
  const auto& bs = bias.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    shape_fail("add_bias", "bias " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
  }
  auto px = node_of("add_bias", x), pb = node_of("add_bias", bias);
  const std::size_t inner = pb->value.size();
  std::vector<Real> out(px->value);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb->value[i % inner];
  return make("add_bias", xs, std::move(out), {px, pb}, [px, pb, inner](Node& self) {
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % inner] += self.grad[i];
    }
  });
}

Tensor add_channel(const Tensor& x, const Tensor& v) {
  if (x.rank() != 4 || v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1)) {
    shape_fail("add_channel", "expected x [N,C,H,W] and v [N,C], got " +
                                  shape_str(x.shape()) + " and " + shape_str(v.shape()));
  }
  auto px = node_of("add_channel", x), pv = node_of("add_channel", v);
  const std::size_t plane = sz(x.dim(2) * x.dim(3));
  std::vector<Real> out(px->value);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pv->value[i / plane];
  return make("add_channel", x.shape(), std::move(out), {px, pv}, [px, pv, plane](Node& self) {
    if (px->requires_grad) {
      auto& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      auto& g = pv->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i / plane] += self.grad[i];
    }
  });
}

Tensor modulate(const Tensor& x, const Tensor& scale_t, const Tensor& shift) {
  if (x.rank() != 3 || scale_t.shape() != Shape{x.dim(0), x.dim(2)} ||
      shift.shape() != scale_t.shape()) {
    shape_fail("modulate", "expected x [N,L,D], scale/shift [N,D], got " +
                               shape_str(x.shape()) + ", " + shape_str(scale_t.shape()) + ", " +
                               shape_str(shift.shape()));
  }
  auto px = node_of("modulate", x), ps = node_of("modulate", scale_t),
       ph = node_of("modulate", shift);
  const std::int64_t n = x.dim(0), l = x.dim(1), d = x.dim(2);
  std::vector<Real> out(px->value.size());
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t i = 0; i < l; ++i) {
      for (std::int64_t j = 0; j < d; ++j) {
        const auto o = sz((b * l + i) * d + j);
        out[o] = px->value[o] * ps->value[sz(b * d + j)] + ph->value[sz(b * d + j)];
      }
    }
  }
  return make("modulate", x.shape(), std::move(out), {px, ps, ph},
              [px, ps, ph, n, l, d](Node& self) {
                for (std::int64_t b = 0; b < n; ++b) {
                  for (std::int64_t i = 0; i < l; ++i) {
                    for (std::int64_t j = 0; j < d; ++j) {
                      const auto o = sz((b * l + i) * d + j);
                      const auto c = sz(b * d + j);
                      const Real g = self.grad[o];
                      if (px->requires_grad) px->grad_buffer()[o] += g * ps->value[c];
                      if (ps->requires_grad) ps->grad_buffer()[c] += g * px->value[o];
                      if (ph->requires_grad) ph->grad_buffer()[c] += g;
                    }
                  }
                }
              });
}

Tensor scale_per_sample(const Tensor& x, std::span<const Real> factors) {
  if (x.rank() < 1 || static_cast<std::int64_t>(factors.size()) != x.dim(0)) {
    shape_fail("scale_per_sample", std::to_string(factors.size()) + " factors for " +
                                       shape_str(x.shape()));
  }
  auto px = node_of("scale_per_sample", x);
  const std::size_t row = px->value.size() / factors.size();
  std::vector<Real> f(factors.begin(), factors.end());
  std::vector<Real> out(px->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px->value[i] * f[i / row];
  return make("scale_per_sample", x.shape(), std::move(out), {px},
              [px, f = std::move(f), row](Node& self) {
                auto& g = px->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f[i / row];
              });
}

Tensor add_scaled_per_sample(const Tensor& a, const Tensor& b, std::span<const Real> factors) {
  require_same("add_scaled_per_sample", a, b);
  if (a.rank() < 1 || static_cast<std::int64_t>(factors.size()) != a.dim(0)) {
    shape_fail("add_scaled_per_sample",
               std::to_string(factors.size()) + " factors for " + shape_str(a.shape()));
  }
  auto pa = node_of("add_scaled_per_sample", a), pb = node_of("add_scaled_per_sample", b);
  const std::size_t row = pa->value.size() / factors.size();
  std::vector<Real> f(factors.begin(), factors.end());
  std::vector<Real> out(pa->value);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Real fi = f[i / row];
    if (fi != Real(0)) out[i] += fi * pb->value[i];
  }
  return make("add_scaled_per_sample", a.shape(), std::move(out), {pa, pb},
              [pa, pb, f = std::move(f), row](Node& self) {
                if (pa->requires_grad) {
                  auto& g = pa->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                }
                if (pb->requires_grad) {
                  auto& g = pb->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += f[i / row] * self.grad[i];
                }
              });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_fail("matmul", "cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  auto pa = node_of("matmul", a), pb = node_of("matmul", b);
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<Real> out(sz(m * n));
  MapR(out.data(), m, n).noalias() = CMapR(pa->value.data(), m, k) * CMapR(pb->value.data(), k, n);
  return make("matmul", {m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](Node& self) {
    CMapR dc(self.grad.data(), m, n);
    if (pa->requires_grad) {
      MapR(pa->grad_buffer().data(), m, k).noalias() +=
          dc * CMapR(pb->value.data(), k, n).transpose();
    }
    if (pb->requires_grad) {
      MapR(pb->grad_buffer().data(), k, n).noalias() +=
          CMapR(pa->value.data(), m, k).transpose() * dc;
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int bands) {
  if (stride != 1 && stride != 2) shape_fail("conv2d", "stride must be 1 or 2");
  if (bands < 1 || x.rank() != 4 || x.dim(2) % bands != 0 || x.dim(2) / bands < 2 ||
      (stride == 2 && (x.dim(2) / bands) % 2 != 0)) {
    shape_fail("conv2d", std::to_string(bands) + " bands do not tile " + shape_str(x.shape()));
  }
  if (x.rank() != 4 || w.rank() != 4 || w.dim(2) != 3 || w.dim(3) != 3 || w.dim(1) != x.dim(1) ||
      b.shape() != Shape{w.dim(0)}) {
    shape_fail("conv2d", "x " + shape_str(x.shape()) + ", w " + shape_str(w.shape()) + ", b " +
                             shape_str(b.shape()));
  }
  const std::int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0);
  if (h < 2 || wd < 2 || (stride == 2 && (h % 2 || wd % 2))) {
    shape_fail("conv2d", "spatial extent unsupported for stride " + std::to_string(stride) +
                             ": " + shape_str(x.shape()));
  }
  auto px = node_of("conv2d", x), pw = node_of("conv2d", w), pb = node_of("conv2d", b);
  const std::int64_t ho = h / stride, wo = wd / stride, p = ho * wo, cols = n * p, kk = ci * 9;
  auto taps = std::make_shared<std::vector<int>>(conv_taps(h, wd, stride, bands));

  auto col = std::make_shared<std::vector<Real>>(sz(kk * cols));
  for (std::int64_t c = 0; c < ci; ++c) {
    for (int k = 0; k < 9; ++k) {
      Real* dst = col->data() + (c * 9 + k) * cols;
      const int* tap = taps->data() + k * p;
      for (std::int64_t s = 0; s < n; ++s) {
        const Real* src = px->value.data() + (s * ci + c) * h * wd;
        for (std::int64_t q = 0; q < p; ++q) dst[s * p + q] = src[tap[q]];
      }
    }
  }
  MatR res(co, cols);
  res.noalias() = CMapR(pw->value.data(), co, kk) * CMapR(col->data(), kk, cols);
  std::vector<Real> out(sz(n * co * p));
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t o = 0; o < co; ++o) {
      const Real bias = pb->value[sz(o)];
      const Real* src = res.data() + o * cols + s * p;
      Real* dst = out.data() + (s * co + o) * p;
      for (std::int64_t q = 0; q < p; ++q) dst[q] = src[q] + bias;
    }
  }
  const bool keep = grad_mode_enabled() &&
                    (px->requires_grad || pw->requires_grad || pb->requires_grad);
  if (!keep) col.reset();
  return make("conv2d", {n, co, ho, wo}, std::move(out), {px, pw, pb},
              [px, pw, pb, col, taps, n, ci, h, wd, co, p, cols, kk](Node& self) {
                MatR dres(co, cols);
                for (std::int64_t s = 0; s < n; ++s) {
                  for (std::int64_t o = 0; o < co; ++o) {
                    const Real* src = self.grad.data() + (s * co + o) * p;
                    std::copy(src, src + p, dres.data() + o * cols + s * p);
                  }
                }
                if (pw->requires_grad) {
                  MapR(pw->grad_buffer().data(), co, kk).noalias() +=
                      dres * CMapR(col->data(), kk, cols).transpose();
                }
                if (pb->requires_grad) {
                  auto& g = pb->grad_buffer();
                  for (std::int64_t o = 0; o < co; ++o) {
                    double acc = 0.0;
                    for (std::int64_t q = 0; q < cols; ++q) acc += dres(o, q);
                    g[sz(o)] += static_cast<Real>(acc);
                  }
                }
                if (px->requires_grad) {
                  MatR dcol(kk, cols);
                  dcol.noalias() = CMapR(pw->value.data(), co, kk).transpose() * dres;
                  auto& g = px->grad_buffer();
                  for (std::int64_t c = 0; c < ci; ++c) {
                    for (int k = 0; k < 9; ++k) {
                      const Real* src = dcol.data() + (c * 9 + k) * cols;
                      const int* tap = taps->data() + k * p;
                      for (std::int64_t s = 0; s < n; ++s) {
                        Real* dst = g.data() + (s * ci + c) * h * wd;
                        for (std::int64_t q = 0; q < p; ++q) dst[tap[q]] += src[s * p + q];
                      }
                    }
                  }
                }
              });
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) shape_fail("upsample_nearest2x", "expected NCHW, got " + shape_str(x.shape()));
  auto px = node_of("upsample_nearest2x", x);
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<Real> out(sz(planes * 4 * h * w));
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    for (std::int64_t y = 0; y < 2 * h; ++y) {
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
        out[sz((pl * 2 * h + y) * 2 * w + xx)] = px->value[sz((pl * h + y / 2) * w + xx / 2)];
      }
    }
  }
  return make("upsample_nearest2x", {x.dim(0), x.dim(1), 2 * h, 2 * w}, std::move(out), {px},
              [px, planes, h, w](Node& self) {
                auto& g = px->grad_buffer();
                for (std::int64_t pl = 0; pl < planes; ++pl) {
                  for (std::int64_t y = 0; y < 2 * h; ++y) {
                    for (std::int64_t xx = 0; xx < 2 * w; ++xx) {
                      g[sz((pl * h + y / 2) * w + xx / 2)] +=
                          self.grad[sz((pl * 2 * h + y) * 2 * w + xx)];
                    }
                  }
                }
              });
}

Tensor sum(const Tensor& x) {
  auto px = node_of("sum", x);
  double acc = 0.0;
  for (Real v : px->value) acc += v;
  return make("sum", {}, {static_cast<Real>(acc)}, {px}, [px](Node& self) {
    auto& g = px->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  auto px = node_of("mean", x);
  const double count = static_cast<double>(px->value.size());
  double acc = 0.0;
  for (Real v : px->value) acc += v;
  return make("mean", {}, {static_cast<Real>(acc / count)}, {px}, [px, count](Node& self) {
    auto& g = px->grad_buffer();
    const Real d = static_cast<Real>(self.grad[0] / count);
    for (auto& v : g) v += d;
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same("mse", a, b);
  auto pa = node_of("mse", a), pb = node_of("mse", b);
  const double count = static_cast<double>(pa->value.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pa->value.size(); ++i) {
    const double d = static_cast<double>(pa->value[i]) - pb->value[i];
    acc += d * d;
  }
  return make("mse", {}, {static_cast<Real>(acc / count)}, {pa, pb}, [pa, pb, count](Node& self) {
    const double k = 2.0 * self.grad[0] / count;
    for (std::size_t i = 0; i < pa->value.size(); ++i) {
      const Real d = static_cast<Real>(k * (static_cast<double>(pa->value[i]) - pb->value[i]));
      if (pa->requires_grad) pa->grad_buffer()[i] += d;
      if (pb->requires_grad) pb->grad_buffer()[i] -= d;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (x.rank() < 1) shape_fail("layer_norm", "rank-0 input");
  const std::int64_t d = x.dim(-1);
  if (gamma.defined() != beta.defined()) shape_fail("layer_norm", "gamma/beta must pair");
  if (gamma.defined() && (gamma.shape() != Shape{d} || beta.shape() != Shape{d})) {
    shape_fail("layer_norm", "affine " + shape_str(gamma.shape()) + " for input " +
                                 shape_str(x.shape()));
  }
  auto px = node_of("layer_norm", x);
  const std::int64_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<Real>>(px->value.size());
  auto inv_std = std::make_shared<std::vector<Real>>(sz(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const Real* src = px->value.data() + r * d;
    double mu = 0.0, var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += src[j];
    mu /= static_cast<double>(d);
    for (std::int64_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[sz(r)] = static_cast<Real>(is);
    for (std::int64_t j = 0; j < d; ++j) (*xhat)[sz(r * d + j)] = static_cast<Real>((src[j] - mu) * is);
  }
  std::vector<Real> out(*xhat);
  std::vector<NodePtr> parents{px};
  NodePtr pg, pbeta;
  if (gamma.defined()) {
    pg = gamma.node();
    pbeta = beta.node();
    parents.push_back(pg);
    parents.push_back(pbeta);
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = out[i] * pg->value[i % sz(d)] + pbeta->value[i % sz(d)];
    }
  }
  return make("layer_norm", x.shape(), std::move(out), std::move(parents),
              [px, pg, pbeta, xhat, inv_std, rows, d](Node& self) {
                std::vector<double> dxhat(sz(d));
                for (std::int64_t r = 0; r < rows; ++r) {
                  const Real* gy = self.grad.data() + r * d;
                  const Real* xh = xhat->data() + r * d;
                  double m1 = 0.0, m2 = 0.0;
                  for (std::int64_t j = 0; j < d; ++j) {
                    const double gj = pg ? double(gy[j]) * pg->value[sz(j)] : gy[j];
                    dxhat[sz(j)] = gj;
                    m1 += gj;
                    m2 += gj * xh[j];
                  }
                  m1 /= static_cast<double>(d);
                  m2 /= static_cast<double>(d);
                  if (px->requires_grad) {
                    Real* gx = px->grad_buffer().data() + r * d;
                    const double is = (*inv_std)[sz(r)];
                    for (std::int64_t j = 0; j < d; ++j) {
                      gx[j] += static_cast<Real>(is * (dxhat[sz(j)] - m1 - xh[j] * m2));
                    }
                  }
                  if (pg && pg->requires_grad) {
                    auto& g = pg->grad_buffer();
                    for (std::int64_t j = 0; j < d; ++j) g[sz(j)] += gy[j] * xh[j];
                  }
                  if (pbeta && pbeta->requires_grad) {
                    auto& g = pbeta->grad_buffer();
                    for (std::int64_t j = 0; j < d; ++j) g[sz(j)] += gy[j];
                  }
                }
              });
}

Tensor softmax(const Tensor& x) {
  if (x.rank() < 1) shape_fail("softmax", "rank-0 input");
  auto px = node_of("softmax", x);
  const std::int64_t d = x.dim(-1), rows = x.numel() / d;
  std::vector<Real> out(px->value);
  softmax_rows(out.data(), rows, d);
  auto y = std::make_shared<std::vector<Real>>(out);
  return make("softmax", x.shape(), std::move(out), {px}, [px, y, rows, d](Node& self) {
    auto& g = px->grad_buffer();
    for (std::int64_t r = 0; r < rows; ++r) {
      const Real* yr = y->data() + r * d;
      const Real* gy = self.grad.data() + r * d;
      double dot = 0.0;
      for (std::int64_t j = 0; j < d; ++j) dot += double(gy[j]) * yr[j];
      for (std::int64_t j = 0; j < d; ++j) {
        g[sz(r * d + j)] += static_cast<Real>(yr[j] * (gy[j] - dot));
      }
    }
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2) || heads < 1 || q.dim(2) % heads != 0) {
    shape_fail("attention", "q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                                ", v " + shape_str(v.shape()) + ", heads " +
                                std::to_string(heads));
  }
  auto pq = node_of("attention", q), pk = node_of("attention", k), pv = node_of("attention", v);
  const std::int64_t n = q.dim(0), lq = q.dim(1), lk = k.dim(1), e = q.dim(2), dh = e / heads;
  const Real scale_f = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh)));
  auto probs = std::make_shared<std::vector<Real>>(sz(n * heads * lq * lk));
  std::vector<Real> out(sz(n * lq * e));
  for (std::int64_t b = 0; b < n; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      CStridedR qh(pq->value.data() + b * lq * e + h * dh, lq, dh, Eigen::OuterStride<>(e));
      CStridedR kh(pk->value.data() + b * lk * e + h * dh, lk, dh, Eigen::OuterStride<>(e));
      CStridedR vh(pv->value.data() + b * lk * e + h * dh, lk, dh, Eigen::OuterStride<>(e));
      Real* pr = probs->data() + (b * heads + h) * lq * lk;
      MapR pm(pr, lq, lk);
      pm.noalias() = scale_f * (qh * kh.transpose());
      softmax_rows(pr, lq, lk);
      StridedR oh(out.data() + b * lq * e + h * dh, lq, dh, Eigen::OuterStride<>(e));
      oh.noalias() = pm * vh;
    }
  }
  return make("attention", {n, lq, e}, std::move(out), {pq, pk, pv},
              [pq, pk, pv, probs, n, lq, lk, e, dh, heads, scale_f](Node& self) {
                MatR dp(lq, lk);
                for (std::int64_t b = 0; b < n; ++b) {
                  for (std::int64_t h = 0; h < heads; ++h) {
                    const auto off_q = b * lq * e + h * dh;
                    const auto off_k = b * lk * e + h * dh;
                    const Eigen::OuterStride<> st(e);
                    CStridedR go(self.grad.data() + off_q, lq, dh, st);
                    CStridedR qh(pq->value.data() + off_q, lq, dh, st);
                    CStridedR kh(pk->value.data() + off_k, lk, dh, st);
                    CStridedR vh(pv->value.data() + off_k, lk, dh, st);
                    CMapR pm(probs->data() + (b * heads + h) * lq * lk, lq, lk);
                    if (pv->requires_grad) {
                      StridedR gv(pv->grad_buffer().data() + off_k, lk, dh, st);
                      gv.noalias() += pm.transpose() * go;
                    }
                    if (!pq->requires_grad && !pk->requires_grad) continue;
                    dp.noalias() = go * vh.transpose();
                    for (std::int64_t i = 0; i < lq; ++i) {
                      double dot = 0.0;
                      for (std::int64_t j = 0; j < lk; ++j) dot += double(dp(i, j)) * pm(i, j);
                      for (std::int64_t j = 0; j < lk; ++j) {
                        dp(i, j) = static_cast<Real>(pm(i, j) * (dp(i, j) - dot)) * scale_f;
                      }
                    }
                    if (pq->requires_grad) {
                      StridedR gq(pq->grad_buffer().data() + off_q, lq, dh, st);
                      gq.noalias() += dp * kh;
                    }
                    if (pk->requires_grad) {
                      StridedR gk(pk->grad_buffer().data() + off_k, lk, dh, st);
                      gk.noalias() += dp.transpose() * qh;
                    }
                  }
                }
              });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto px = node_of("reshape", x);
  return make("reshape", shape, px->value, {px}, [px](Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) shape_fail("concat", "no operands");
  const Shape& ref = parts[0].shape();
  const int rank = static_cast<int>(ref.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_fail("concat", "axis out of range for " + shape_str(ref));
  std::int64_t outer = 1, inner = 1, total = 0;
  for (int i = 0; i < axis; ++i) outer *= ref[sz(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= ref[sz(i)];
  std::vector<NodePtr> nodes;
  std::vector<std::int64_t> extents;
  for (const auto& t : parts) {
    Shape s = t.shape();
    Shape r = ref;
    if (s.size() != ref.size()) shape_fail("concat", "rank mismatch " + shape_str(s) + " vs " + shape_str(ref));
    s[sz(axis)] = r[sz(axis)] = 0;
    if (s != r) {
      shape_fail("concat", "incompatible " + shape_str(t.shape()) + " vs " + shape_str(ref));
    }
    nodes.push_back(node_of("concat", t));
    extents.push_back(t.dim(axis));
    total += t.dim(axis);
  }
  Shape out_shape = ref;
  out_shape[sz(axis)] = total;
  std::vector<Real> out(sz(numel(out_shape)));
  for (std::int64_t o = 0; o < outer; ++o) {
    std::int64_t offset = 0;
    for (std::size_t p = 0; p < nodes.size(); ++p) {
      const std::int64_t block = extents[p] * inner;
      const Real* src = nodes[p]->value.data() + o * block;
      std::copy(src, src + block, out.data() + o * total * inner + offset);
      offset += block;
    }
  }
  auto parents = nodes;
  return make("concat", out_shape, std::move(out), std::move(parents),
              [nodes, extents, outer, inner, total](Node& self) {
                for (std::int64_t o = 0; o < outer; ++o) {
                  std::int64_t offset = 0;
                  for (std::size_t p = 0; p < nodes.size(); ++p) {
                    const std::int64_t block = extents[p] * inner;
                    if (nodes[p]->requires_grad) {
                      Real* dst = nodes[p]->grad_buffer().data() + o * block;
                      const Real* src = self.grad.data() + o * total * inner + offset;
                      for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                    offset += block;
                  }
                }
              });
}

std::vector<Tensor> split(const Tensor& x, int axis, std::span<const std::int64_t> sizes) {
  const Shape& xs = x.shape();
  const int rank = static_cast<int>(xs.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_fail("split", "axis out of range for " + shape_str(xs));
  const std::int64_t total = std::accumulate(sizes.begin(), sizes.end(), std::int64_t{0});
  if (total != xs[sz(axis)]) {
    shape_fail("split", "sizes sum to " + std::to_string(total) + " but axis extent is " +
                            std::to_string(xs[sz(axis)]) + " in " + shape_str(xs));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xs[sz(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= xs[sz(i)];
  auto px = node_of("split", x);
  std::vector<Tensor> pieces;
  std::int64_t offset = 0;
  for (std::int64_t extent : sizes) {
    Shape s = xs;
    s[sz(axis)] = extent;
    const std::int64_t block = extent * inner;
    std::vector<Real> out(sz(outer * block));
    for (std::int64_t o = 0; o < outer; ++o) {
      const Real* src = px->value.data() + o * total * inner + offset;
      std::copy(src, src + block, out.data() + o * block);
    }
    pieces.push_back(make("split", s, std::move(out), {px},
                          [px, outer, block, total, inner, offset](Node& self) {
                            auto& g = px->grad_buffer();
                            for (std::int64_t o = 0; o < outer; ++o) {
                              Real* dst = g.data() + o * total * inner + offset;
                              const Real* src = self.grad.data() + o * block;
                              for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                            }
                          }));
    offset += block;
  }
  return pieces;
}

Tensor nchw_to_tokens(const Tensor& x) {
  if (x.rank() != 4) shape_fail("nchw_to_tokens", "expected NCHW, got " + shape_str(x.shape()));
  auto px = node_of("nchw_to_tokens", x);
  const std::int64_t n = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  std::vector<Real> out(px->value.size());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t q = 0; q < p; ++q) out[sz((b * p + q) * c + ch)] = px->value[sz((b * c + ch) * p + q)];
  return make("nchw_to_tokens", {n, p, c}, std::move(out), {px}, [px, n, c, p](Node& self) {
    auto& g = px->grad_buffer();
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t q = 0; q < p; ++q) g[sz((b * c + ch) * p + q)] += self.grad[sz((b * p + q) * c + ch)];
  });
}

Tensor tokens_to_nchw(const Tensor& x, std::int64_t height, std::int64_t width) {
  if (x.rank() != 3 || x.dim(1) != height * width) {
    shape_fail("tokens_to_nchw", "cannot map " + shape_str(x.shape()) + " to " +
                                     std::to_string(height) + "x" + std::to_string(width));
  }
  auto px = node_of("tokens_to_nchw", x);
  const std::int64_t n = x.dim(0), c = x.dim(2), p = height * width;
  std::vector<Real> out(px->value.size());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t q = 0; q < p; ++q) out[sz((b * c + ch) * p + q)] = px->value[sz((b * p + q) * c + ch)];
  return make("tokens_to_nchw", {n, c, height, width}, std::move(out), {px},
              [px, n, c, p](Node& self) {
                auto& g = px->grad_buffer();
                for (std::int64_t b = 0; b < n; ++b)
                  for (std::int64_t ch = 0; ch < c; ++ch)
                    for (std::int64_t q = 0; q < p; ++q)
                      g[sz((b * p + q) * c + ch)] += self.grad[sz((b * c + ch) * p + q)];
              });
}

Tensor patchify(const Tensor& x, int patch) {
  if (x.rank() != 4 || patch < 1 || x.dim(2) % patch || x.dim(3) % patch) {
    shape_fail("patchify", "cannot cut " + shape_str(x.shape()) + " into " +
                               std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  }
  auto px = node_of("patchify", x);
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t gy = h / patch, gx = w / patch, l = gy * gx, f = c * patch * patch;
  // src index for each output element, shared by forward and backward.
  auto index = std::make_shared<std::vector<std::int64_t>>(sz(n * l * f));
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t py = 0; py < gy; ++py)
      for (std::int64_t pxx = 0; pxx < gx; ++pxx)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t iy = 0; iy < patch; ++iy)
            for (std::int64_t ix = 0; ix < patch; ++ix) {
              const auto o = ((b * l + py * gx + pxx) * f) + (ch * patch + iy) * patch + ix;
              (*index)[sz(o)] = ((b * c + ch) * h + py * patch + iy) * w + pxx * patch + ix;
            }
  std::vector<Real> out(index->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px->value[sz((*index)[i])];
  return make("patchify", {n, l, f}, std::move(out), {px}, [px, index](Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < index->size(); ++i) g[sz((*index)[i])] += self.grad[i];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) shape_fail("embedding", "table must be [V,R], got " + shape_str(table.shape()));
  const std::int64_t vocab = table.dim(0), r = table.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || id >= vocab) {
      shape_fail("embedding", "id " + std::to_string(id) + " outside table " + shape_str(table.shape()));
    }
  }
  auto pt = node_of("embedding", table);
  const Shape shape{static_cast<std::int64_t>(idx.size()), r};
  std::vector<Real> out(idx.size() * sz(r));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(pt->value.data() + idx[i] * r, r, out.data() + i * sz(r));
  }
  return make("embedding", shape, std::move(out), {pt},
              [pt, idx = std::move(idx), r](Node& self) {
                auto& g = pt->grad_buffer();
                for (std::size_t i = 0; i < idx.size(); ++i) {
                  for (std::int64_t j = 0; j < r; ++j) g[sz(idx[i] * r + j)] += self.grad[i * sz(r) + sz(j)];
                }
              });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0)) {
    shape_fail("linear", "input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  Tensor y = matmul(reshape(x, {x.numel() / w.dim(0), w.dim(0)}), w);
  y = reshape(y, out_shape);
  return b.defined() ? add_bias(y, b) : y;
}

}  // namespace iir::ops
