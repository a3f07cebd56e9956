#include "dsai/ops.hpp"

#include <cmath>
#include <cstring>

namespace dsai {

namespace {

using Node = std::shared_ptr<detail::TensorNode>;

// C[M,N] += A[M,K] * B[K,N]
void mm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* ci = c + i * n;
    const Real* ai = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const Real av = ai[l];
      const Real* bl = b + l * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    Real* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* bj = b + j * k;
      Real acc = 0.0;
      for (std::size_t l = 0; l < k; ++l) acc += ai[l] * bj[l];
      ci[j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
void mm_tn_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t l = 0; l < k; ++l) {
    const Real* al = a + l * m;
    const Real* bl = b + l * n;
    for (std::size_t i = 0; i < m; ++i) {
      const Real av = al[i];
      Real* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
    }
  }
}

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void mark(Tensor& out) {
  out.node()->requires_grad = true;
  out.node()->producer = Tape::active();
}

// Output grad not allocated means this op is not on the loss path.
bool no_upstream(const Node& out) { return out->grad.empty(); }

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

std::size_t leading(const std::vector<std::size_t>& shape, std::size_t upto) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < upto; ++i) n *= shape[i];
  return n;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out = Tensor::zeros({m, n});
  mm_acc(a.data(), b.data(), out.data(), m, k, n);
  if (recording({&a, &b})) {
    mark(out);
    Node an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on, m, k, n] {
      if (no_upstream(on)) return;
      if (an->requires_grad) {
        an->ensure_grad();
        mm_nt_acc(on->grad.data(), bn->data.data(), an->grad.data(), m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        mm_tn_acc(an->data.data(), on->grad.data(), bn->grad.data(), k, m, n);
      }
    });
  }
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.extent(0) != b.extent(0) ||
      a.extent(2) != b.extent(1)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t nb = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
  Tensor out = Tensor::zeros({nb, m, n});
  for (std::size_t i = 0; i < nb; ++i) {
    mm_acc(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n, m, k, n);
  }
  if (recording({&a, &b})) {
    mark(out);
    Node an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on, nb, m, k, n] {
      if (no_upstream(on)) return;
      if (an->requires_grad) an->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (std::size_t i = 0; i < nb; ++i) {
        const Real* g = on->grad.data() + i * m * n;
        if (an->requires_grad) {
          mm_nt_acc(g, bn->data.data() + i * k * n, an->grad.data() + i * m * k, m, n, k);
        }
        if (bn->requires_grad) {
          mm_tn_acc(an->data.data() + i * m * k, g, bn->grad.data() + i * k * n, k, m, n);
        }
      }
    });
  }
  return out;
}

namespace {
void copy_transposed(const Real* src, Real* dst, std::size_t batch, std::size_t r,
                     std::size_t c) {
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* s = src + b * r * c;
    Real* d = dst + b * r * c;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) d[j * r + i] = s[i * c + j];
    }
  }
}
void add_transposed(const Real* src, Real* dst, std::size_t batch, std::size_t r, std::size_t c) {
  for (std::size_t b = 0; b < batch; ++b) {
    const Real* s = src + b * r * c;
    Real* d = dst + b * r * c;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) d[j * r + i] += s[i * c + j];
    }
  }
}
}  // namespace

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank must be >= 2, got " + shape_str(x.shape()));
  auto shape = x.shape();
  const std::size_t r = shape[shape.size() - 2], c = shape[shape.size() - 1];
  const std::size_t batch = leading(shape, shape.size() - 2);
  std::swap(shape[shape.size() - 2], shape[shape.size() - 1]);
  Tensor out = Tensor::zeros(shape);
  copy_transposed(x.data(), out.data(), batch, r, c);
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, batch, r, c] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      // grad has the transposed layout, so swap r and c going back
      add_transposed(on->grad.data(), xn->grad.data(), batch, c, r);
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from_data(std::move(shape),
                                 std::vector<Real>(x.data(), x.data() + x.size()));
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name, int mode) {
  check_same_shape(a, b, name);
  const std::size_t n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  switch (mode) {
    case 0: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
    case 1: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
    default: for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
  }
  if (recording({&a, &b})) {
    mark(out);
    Node an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on, n, mode] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        Real* ga = an->grad.data();
        if (mode == 2) {
          const Real* pb2 = bn->data.data();
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Real* gb = bn->grad.data();
        if (mode == 0) {
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        } else if (mode == 1) {
          for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        } else {
          const Real* pa2 = an->data.data();
          for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "add", 0); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "sub", 1); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "mul", 2); }

Tensor add_suffix(const Tensor& x, const Tensor& b) {
  const auto& xs = x.shape();
  const auto& bs = b.shape();
  if (bs.size() > xs.size() ||
      !std::equal(bs.begin(), bs.end(), xs.end() - static_cast<long>(bs.size()))) {
    throw ShapeError("add_suffix: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
  }
  const std::size_t bn = b.size();
  const std::size_t rows = x.size() / bn;
  Tensor out = Tensor::zeros(xs);
  const Real* px = x.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < bn; ++i) po[r * bn + i] = px[r * bn + i] + pb[i];
  }
  if (recording({&x, &b})) {
    mark(out);
    Node xn = x.node(), bnode = b.node(), on = out.node();
    Tape::active()->record([xn, bnode, on, rows, bn] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        Real* gx = xn->grad.data();
        for (std::size_t i = 0; i < rows * bn; ++i) gx[i] += g[i];
      }
      if (bnode->requires_grad) {
        bnode->ensure_grad();
        Real* gb = bnode->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < bn; ++i) gb[i] += g[r * bn + i];
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.rank() != 1) {
    throw ShapeError("add_channel_bias: need x rank >= 2 and bias rank 1, got " +
                     shape_str(x.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t ch = x.extent(x.rank() - 2);
  const std::size_t len = x.extent(x.rank() - 1);
  if (b.extent(0) != ch) {
    throw ShapeError("add_channel_bias: bias " + shape_str(b.shape()) +
                     " does not match channel axis of " + shape_str(x.shape()));
  }
  const std::size_t outer = leading(x.shape(), x.rank() - 2);
  Tensor out = Tensor::zeros(x.shape());
  const Real* px = x.data();
  const Real* pb = b.data();
  Real* po = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < ch; ++c) {
      const Real bv = pb[c];
      const std::size_t base = (o * ch + c) * len;
      for (std::size_t t = 0; t < len; ++t) po[base + t] = px[base + t] + bv;
    }
  }
  if (recording({&x, &b})) {
    mark(out);
    Node xn = x.node(), bnode = b.node(), on = out.node();
    Tape::active()->record([xn, bnode, on, outer, ch, len] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        Real* gx = xn->grad.data();
        for (std::size_t i = 0; i < outer * ch * len; ++i) gx[i] += g[i];
      }
      if (bnode->requires_grad) {
        bnode->ensure_grad();
        Real* gb = bnode->grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t c = 0; c < ch; ++c) {
            const std::size_t base = (o * ch + c) * len;
            Real acc = 0.0;
            for (std::size_t t = 0; t < len; ++t) acc += g[base + t];
            gb[c] += acc;
          }
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, Real c) {
  Tensor out = Tensor::zeros(x.shape());
  const Real* px = x.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) po[i] = c * px[i];
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, c] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += c * on->grad[i];
    });
  }
  return out;
}

Tensor scale_param(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) {
    throw ShapeError("scale_param: scale must be a scalar tensor, got " + shape_str(s.shape()));
  }
  const Real sv = s.at(static_cast<std::size_t>(0));
  Tensor out = Tensor::zeros(x.shape());
  const Real* px = x.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) po[i] = sv * px[i];
  if (recording({&x, &s})) {
    mark(out);
    Node xn = x.node(), sn = s.node(), on = out.node();
    Tape::active()->record([xn, sn, on, sv] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      if (xn->requires_grad) {
        xn->ensure_grad();
        Real* gx = xn->grad.data();
        for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += sv * g[i];
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        Real acc = 0.0;
        const Real* px2 = xn->data.data();
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc += g[i] * px2[i];
        sn->grad[0] += acc;
      }
    });
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (a.rank() != b.rank() || axis >= a.rank()) {
    throw ShapeError("concat: rank/axis mismatch for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " on axis " + std::to_string(axis));
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.extent(i) != b.extent(i)) {
      throw ShapeError("concat: non-axis extents differ, " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  auto shape = a.shape();
  const std::size_t ca = a.extent(axis), cb = b.extent(axis);
  shape[axis] = ca + cb;
  const std::size_t outer = leading(a.shape(), axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.extent(i);
  Tensor out = Tensor::zeros(shape);
  Real* po = out.data();
  const Real* pa = a.data();
  const Real* pb = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::memcpy(po + o * (ca + cb) * inner, pa + o * ca * inner, ca * inner * sizeof(Real));
    std::memcpy(po + (o * (ca + cb) + ca) * inner, pb + o * cb * inner, cb * inner * sizeof(Real));
  }
  if (recording({&a, &b})) {
    mark(out);
    Node an = a.node(), bn = b.node(), on = out.node();
    Tape::active()->record([an, bn, on, outer, ca, cb, inner] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        Real* ga = an->grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
          const Real* src = g + o * (ca + cb) * inner;
          Real* dst = ga + o * ca * inner;
          for (std::size_t i = 0; i < ca * inner; ++i) dst[i] += src[i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Real* gb = bn->grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
          const Real* src = g + (o * (ca + cb) + ca) * inner;
          Real* dst = gb + o * cb * inner;
          for (std::size_t i = 0; i < cb * inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

namespace {
constexpr Real kInvSqrt2 = 0.7071067811865475244;
constexpr Real kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const Real* px = x.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * kInvSqrt2));
  }
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      const Real* g = on->grad.data();
      const Real* px2 = xn->data.data();
      Real* gx = xn->grad.data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) {
        const Real v = px2[i];
        const Real cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const Real pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(x.shape()));
  }
  const std::size_t n = x.extent(axis);
  const std::size_t outer = leading(x.shape(), axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
  Tensor out = Tensor::zeros(x.shape());
  const Real* px = x.data();
  Real* po = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      Real mx = px[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, px[base + i * inner]);
      Real z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const Real e = std::exp(px[base + i * inner] - mx);
        po[base + i * inner] = e;
        z += e;
      }
      const Real izv = 1.0 / z;
      for (std::size_t i = 0; i < n; ++i) po[base + i * inner] *= izv;
    }
  }
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, outer, n, inner] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      const Real* g = on->grad.data();
      const Real* y = on->data.data();
      Real* gx = xn->grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          Real dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t at = base + i * inner;
            gx[at] += y[at] * (g[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.extent(x.rank() - 1);
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(d) + " elements");
  }
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv(rows);
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  Real* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = px + r * d;
    Real mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<Real>(d);
    Real var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const Real c = row[i] - mean;
      var += c * c;
    }
    var /= static_cast<Real>(d);
    const Real iv = 1.0 / std::sqrt(var + eps);
    inv[r] = iv;
    for (std::size_t i = 0; i < d; ++i) {
      const Real h = (row[i] - mean) * iv;
      xhat[r * d + i] = h;
      po[r * d + i] = pg[i] * h + pb[i];
    }
  }
  if (recording({&x, &gamma, &beta})) {
    mark(out);
    Node xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    Tape::active()->record([xn, gn, bn, on, rows, d, xhat = std::move(xhat),
                            inv = std::move(inv)] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      if (gn->requires_grad) {
        gn->ensure_grad();
        Real* gg = gn->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < d; ++i) gg[i] += g[r * d + i] * xhat[r * d + i];
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        Real* gb = bn->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t i = 0; i < d; ++i) gb[i] += g[r * d + i];
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        Real* gx = xn->grad.data();
        const Real* pg2 = gn->data.data();
        for (std::size_t r = 0; r < rows; ++r) {
          Real m1 = 0.0, m2 = 0.0;
          for (std::size_t i = 0; i < d; ++i) {
            const Real dh = g[r * d + i] * pg2[i];
            m1 += dh;
            m2 += dh * xhat[r * d + i];
          }
          m1 /= static_cast<Real>(d);
          m2 /= static_cast<Real>(d);
          for (std::size_t i = 0; i < d; ++i) {
            const Real dh = g[r * d + i] * pg2[i];
            gx[r * d + i] += inv[r] * (dh - m1 - xhat[r * d + i] * m2);
          }
        }
      }
    });
  }
  return out;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool train, Real eps, Real momentum) {
  if (x.rank() != 3) {
    throw ShapeError("batch_norm: expected [batch, ch, len], got " + shape_str(x.shape()));
  }
  if (eps <= 0.0) throw ConfigError("batch_norm: eps must be positive");
  const std::size_t nb = x.extent(0), ch = x.extent(1), len = x.extent(2);
  if (gamma.size() != ch || beta.size() != ch || running_mean.size() != ch ||
      running_var.size() != ch) {
    throw ShapeError("batch_norm: parameter size must match " + std::to_string(ch) + " channels");
  }
  Tensor out = Tensor::zeros(x.shape());
  std::vector<Real> xhat(x.size());
  std::vector<Real> inv(ch);
  const Real* px = x.data();
  const Real* pg = gamma.data();
  const Real* pb = beta.data();
  Real* po = out.data();
  const Real count = static_cast<Real>(nb * len);
  for (std::size_t c = 0; c < ch; ++c) {
    Real mean, var;
    if (train) {
      Real s = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const Real* row = px + (b * ch + c) * len;
        for (std::size_t t = 0; t < len; ++t) s += row[t];
      }
      mean = s / count;
      Real v = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const Real* row = px + (b * ch + c) * len;
        for (std::size_t t = 0; t < len; ++t) {
          const Real d2 = row[t] - mean;
          v += d2 * d2;
        }
      }
      var = v / count;
      running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * mean;
      running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * var;
    } else {
      mean = running_mean.data()[c];
      var = running_var.data()[c];
    }
    const Real iv = 1.0 / std::sqrt(var + eps);
    inv[c] = iv;
    for (std::size_t b = 0; b < nb; ++b) {
      const Real* row = px + (b * ch + c) * len;
      Real* orow = po + (b * ch + c) * len;
      Real* hrow = xhat.data() + (b * ch + c) * len;
      for (std::size_t t = 0; t < len; ++t) {
        const Real h = (row[t] - mean) * iv;
        hrow[t] = h;
        orow[t] = pg[c] * h + pb[c];
      }
    }
  }
  if (recording({&x, &gamma, &beta})) {
    mark(out);
    Node xn = x.node(), gn = gamma.node(), bnode = beta.node(), on = out.node();
    Tape::active()->record([xn, gn, bnode, on, nb, ch, len, train, count,
                            xhat = std::move(xhat), inv = std::move(inv)] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      if (gn->requires_grad) {
        gn->ensure_grad();
        Real* gg = gn->grad.data();
        for (std::size_t c = 0; c < ch; ++c) {
          Real acc = 0.0;
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t base = (b * ch + c) * len;
            for (std::size_t t = 0; t < len; ++t) acc += g[base + t] * xhat[base + t];
          }
          gg[c] += acc;
        }
      }
      if (bnode->requires_grad) {
        bnode->ensure_grad();
        Real* gb = bnode->grad.data();
        for (std::size_t c = 0; c < ch; ++c) {
          Real acc = 0.0;
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t base = (b * ch + c) * len;
            for (std::size_t t = 0; t < len; ++t) acc += g[base + t];
          }
          gb[c] += acc;
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        Real* gx = xn->grad.data();
        const Real* pg2 = gn->data.data();
        for (std::size_t c = 0; c < ch; ++c) {
          if (train) {
            Real m1 = 0.0, m2 = 0.0;
            for (std::size_t b = 0; b < nb; ++b) {
              const std::size_t base = (b * ch + c) * len;
              for (std::size_t t = 0; t < len; ++t) {
                const Real dh = g[base + t] * pg2[c];
                m1 += dh;
                m2 += dh * xhat[base + t];
              }
            }
            m1 /= count;
            m2 /= count;
            for (std::size_t b = 0; b < nb; ++b) {
              const std::size_t base = (b * ch + c) * len;
              for (std::size_t t = 0; t < len; ++t) {
                const Real dh = g[base + t] * pg2[c];
                gx[base + t] += inv[c] * (dh - m1 - xhat[base + t] * m2);
              }
            }
          } else {
            const Real k = pg2[c] * inv[c];
            for (std::size_t b = 0; b < nb; ++b) {
              const std::size_t base = (b * ch + c) * len;
              for (std::size_t t = 0; t < len; ++t) gx[base + t] += k * g[base + t];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(const Tensor& x, Real rate, bool train, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  }
  if (!train || rate == 0.0) return x;
  if (!rng) throw ContractError("dropout: training mode requires an RNG");
  const Real keep = 1.0 - rate;
  const Real scale_v = 1.0 / keep;
  std::vector<Real> mask(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask[i] = rng->bernoulli(keep) ? scale_v : 0.0;
  }
  Tensor out = Tensor::zeros(x.shape());
  const Real* px = x.data();
  Real* po = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) po[i] = px[i] * mask[i];
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, mask = std::move(mask)] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      Real* gx = xn->grad.data();
      const Real* g = on->grad.data();
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

Tensor avg_pool1d(const Tensor& x, std::size_t window) {
  if (x.rank() < 2) throw ShapeError("avg_pool1d: rank must be >= 2");
  if (window < 1) throw ConfigError("avg_pool1d: window must be >= 1");
  const std::size_t len = x.extent(x.rank() - 1);
  if (window > len) {
    throw ShapeError("avg_pool1d: window " + std::to_string(window) + " exceeds length " +
                     std::to_string(len) + "; output would be empty");
  }
  const std::size_t lo = len / window;
  const std::size_t rows = x.size() / len;
  auto shape = x.shape();
  shape[shape.size() - 1] = lo;
  Tensor out = Tensor::zeros(shape);
  const Real invw = 1.0 / static_cast<Real>(window);
  const Real* px = x.data();
  Real* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = px + r * len;
    Real* orow = po + r * lo;
    for (std::size_t t = 0; t < lo; ++t) {
      Real acc = 0.0;
      for (std::size_t j = 0; j < window; ++j) acc += row[t * window + j];
      orow[t] = acc * invw;
    }
  }
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, rows, len, lo, window, invw] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      Real* gx = xn->grad.data();
      const Real* g = on->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* grow = g + r * lo;
        Real* gxrow = gx + r * len;
        for (std::size_t t = 0; t < lo; ++t) {
          const Real gv = grow[t] * invw;
          for (std::size_t j = 0; j < window; ++j) gxrow[t * window + j] += gv;
        }
      }
    });
  }
  return out;
}

namespace {
struct PadSpec {
  std::size_t left, right;
};
PadSpec same_pad(std::size_t k) {
  // Symmetric zero padding; even kernels take the extra zero on the right.
  const std::size_t left = (k - 1) / 2;
  return {left, (k - 1) - left};
}
}  // namespace

Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, long pad) {
  if ((x.rank() != 2 && x.rank() != 3) || kernel.rank() != 2) {
    throw ShapeError("conv1d_depthwise: expected x[ch,len] or x[B,ch,len] with kernel[ch,k], got " +
                     shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
  }
  const bool batched = x.rank() == 3;
  const std::size_t nb = batched ? x.extent(0) : 1;
  const std::size_t ch = x.extent(batched ? 1 : 0);
  const std::size_t len = x.extent(batched ? 2 : 1);
  const std::size_t kw = kernel.extent(1);
  if (kernel.extent(0) != ch) {
    throw ShapeError("conv1d_depthwise: kernel channels " + shape_str(kernel.shape()) +
                     " do not match input " + shape_str(x.shape()));
  }
  PadSpec ps = pad < 0 ? same_pad(kw)
                       : PadSpec{static_cast<std::size_t>(pad), static_cast<std::size_t>(pad)};
  const std::size_t padded = len + ps.left + ps.right;
  if (kw > padded) {
    throw ShapeError("conv1d_depthwise: kernel too large, k=" + std::to_string(kw) +
                     " exceeds padded length " + std::to_string(padded));
  }
  const std::size_t lo = padded - kw + 1;
  auto shape = x.shape();
  shape[shape.size() - 1] = lo;
  Tensor out = Tensor::zeros(shape);
  const Real* px = x.data();
  const Real* pk = kernel.data();
  Real* po = out.data();
  std::vector<Real> xp(padded);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t c = 0; c < ch; ++c) {
      std::fill(xp.begin(), xp.end(), 0.0);
      std::memcpy(xp.data() + ps.left, px + (b * ch + c) * len, len * sizeof(Real));
      Real* orow = po + (b * ch + c) * lo;
      const Real* krow = pk + c * kw;
      for (std::size_t j = 0; j < kw; ++j) {
        const Real kv = krow[j];
        const Real* xs = xp.data() + j;
        for (std::size_t t = 0; t < lo; ++t) orow[t] += kv * xs[t];
      }
    }
  }
  if (recording({&x, &kernel})) {
    mark(out);
    Node xn = x.node(), kn = kernel.node(), on = out.node();
    Tape::active()->record([xn, kn, on, nb, ch, len, kw, lo, ps] {
      if (no_upstream(on)) return;
      const Real* g = on->grad.data();
      const std::size_t padded2 = len + ps.left + ps.right;
      std::vector<Real> xp(padded2);
      std::vector<Real> gp(padded2);
      if (xn->requires_grad) xn->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t c = 0; c < ch; ++c) {
          const Real* grow = g + (b * ch + c) * lo;
          const Real* krow = kn->data.data() + c * kw;
          if (kn->requires_grad) {
            std::fill(xp.begin(), xp.end(), 0.0);
            std::memcpy(xp.data() + ps.left, xn->data.data() + (b * ch + c) * len,
                        len * sizeof(Real));
            Real* gk = kn->grad.data() + c * kw;
            for (std::size_t j = 0; j < kw; ++j) {
              const Real* xs = xp.data() + j;
              Real acc = 0.0;
              for (std::size_t t = 0; t < lo; ++t) acc += grow[t] * xs[t];
              gk[j] += acc;
            }
          }
          if (xn->requires_grad) {
            std::fill(gp.begin(), gp.end(), 0.0);
            for (std::size_t j = 0; j < kw; ++j) {
              const Real kv = krow[j];
              Real* gs = gp.data() + j;
              for (std::size_t t = 0; t < lo; ++t) gs[t] += kv * grow[t];
            }
            Real* gxrow = xn->grad.data() + (b * ch + c) * len;
            for (std::size_t t = 0; t < len; ++t) gxrow[t] += gp[ps.left + t];
          }
        }
      }
    });
  }
  return out;
}

Tensor pointwise_grouped(const Tensor& x, const Tensor& w, std::size_t groups) {
  if ((x.rank() != 2 && x.rank() != 3) || w.rank() != 2) {
    throw ShapeError("pointwise_grouped: expected x[ch,len] or x[B,ch,len] with w[co,ci/g], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const bool batched = x.rank() == 3;
  const std::size_t nb = batched ? x.extent(0) : 1;
  const std::size_t ci = x.extent(batched ? 1 : 0);
  const std::size_t len = x.extent(batched ? 2 : 1);
  const std::size_t co = w.extent(0);
  if (groups == 0 || ci % groups != 0 || co % groups != 0) {
    throw ConfigError("pointwise_grouped: groups=" + std::to_string(groups) +
                      " must divide ch_in=" + std::to_string(ci) +
                      " and ch_out=" + std::to_string(co));
  }
  const std::size_t cig = ci / groups;
  const std::size_t cog = co / groups;
  if (w.extent(1) != cig) {
    throw ShapeError("pointwise_grouped: weight " + shape_str(w.shape()) + " expects " +
                     std::to_string(cig) + " inputs per group");
  }
  auto shape = x.shape();
  shape[shape.size() - 2] = co;
  Tensor out = Tensor::zeros(shape);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      mm_acc(w.data() + gi * cog * cig, x.data() + (b * ci + gi * cig) * len,
             out.data() + (b * co + gi * cog) * len, cog, cig, len);
    }
  }
  if (recording({&x, &w})) {
    mark(out);
    Node xn = x.node(), wn = w.node(), on = out.node();
    Tape::active()->record([xn, wn, on, nb, ci, co, len, groups, cig, cog] {
      if (no_upstream(on)) return;
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const Real* gout = on->grad.data() + (b * co + gi * cog) * len;
          if (wn->requires_grad) {
            mm_nt_acc(gout, xn->data.data() + (b * ci + gi * cig) * len,
                      wn->grad.data() + gi * cog * cig, cog, len, cig);
          }
          if (xn->requires_grad) {
            mm_tn_acc(wn->data.data() + gi * cog * cig, gout,
                      xn->grad.data() + (b * ci + gi * cig) * len, cig, cog, len);
          }
        }
      }
    });
  }
  return out;
}

Tensor conv_temporal_expand(const Tensor& x, const Tensor& w) {
  if (x.rank() != 3 || w.rank() != 2) {
    throw ShapeError("conv_temporal_expand: expected x[B,C,T] and w[F,k], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const std::size_t nb = x.extent(0), nc = x.extent(1), nt = x.extent(2);
  const std::size_t nf = w.extent(0), kw = w.extent(1);
  const PadSpec ps = same_pad(kw);
  const std::size_t padded = nt + ps.left + ps.right;
  Tensor out = Tensor::zeros({nb, nf, nc, nt});
  const Real* px = x.data();
  const Real* pw = w.data();
  Real* po = out.data();
  std::vector<Real> xp(padded);
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t c = 0; c < nc; ++c) {
      std::fill(xp.begin(), xp.end(), 0.0);
      std::memcpy(xp.data() + ps.left, px + (b * nc + c) * nt, nt * sizeof(Real));
      for (std::size_t f = 0; f < nf; ++f) {
        Real* orow = po + ((b * nf + f) * nc + c) * nt;
        const Real* wrow = pw + f * kw;
        for (std::size_t j = 0; j < kw; ++j) {
          const Real wv = wrow[j];
          const Real* xs = xp.data() + j;
          for (std::size_t t = 0; t < nt; ++t) orow[t] += wv * xs[t];
        }
      }
    }
  }
  if (recording({&x, &w})) {
    mark(out);
    Node xn = x.node(), wn = w.node(), on = out.node();
    Tape::active()->record([xn, wn, on, nb, nc, nt, nf, kw, ps] {
      if (no_upstream(on)) return;
      const std::size_t padded2 = nt + ps.left + ps.right;
      std::vector<Real> xp(padded2);
      std::vector<Real> gp(padded2);
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      const Real* g = on->grad.data();
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t c = 0; c < nc; ++c) {
          std::fill(xp.begin(), xp.end(), 0.0);
          std::memcpy(xp.data() + ps.left, xn->data.data() + (b * nc + c) * nt,
                      nt * sizeof(Real));
          if (xn->requires_grad) std::fill(gp.begin(), gp.end(), 0.0);
          for (std::size_t f = 0; f < nf; ++f) {
            const Real* grow = g + ((b * nf + f) * nc + c) * nt;
            const Real* wrow = wn->data.data() + f * kw;
            if (wn->requires_grad) {
              Real* gw = wn->grad.data() + f * kw;
              for (std::size_t j = 0; j < kw; ++j) {
                const Real* xs = xp.data() + j;
                Real acc = 0.0;
                for (std::size_t t = 0; t < nt; ++t) acc += grow[t] * xs[t];
                gw[j] += acc;
              }
            }
            if (xn->requires_grad) {
              for (std::size_t j = 0; j < kw; ++j) {
                const Real wv = wrow[j];
                Real* gs = gp.data() + j;
                for (std::size_t t = 0; t < nt; ++t) gs[t] += wv * grow[t];
              }
            }
          }
          if (xn->requires_grad) {
            Real* gxrow = xn->grad.data() + (b * nc + c) * nt;
            for (std::size_t t = 0; t < nt; ++t) gxrow[t] += gp[ps.left + t];
          }
        }
      }
    });
  }
  return out;
}

Tensor conv_spatial_depthwise(const Tensor& x, const Tensor& w) {
  if (x.rank() != 4 || w.rank() != 3) {
    throw ShapeError("conv_spatial_depthwise: expected x[B,F,C,T] and w[F,D,C], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const std::size_t nb = x.extent(0), nf = x.extent(1), nc = x.extent(2), nt = x.extent(3);
  const std::size_t dm = w.extent(1);
  if (w.extent(0) != nf || w.extent(2) != nc) {
    throw ShapeError("conv_spatial_depthwise: weight " + shape_str(w.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  const std::size_t co = nf * dm;
  Tensor out = Tensor::zeros({nb, co, nt});
  const Real* px = x.data();
  const Real* pw = w.data();
  Real* po = out.data();
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t f = 0; f < nf; ++f) {
      for (std::size_t d = 0; d < dm; ++d) {
        Real* orow = po + (b * co + f * dm + d) * nt;
        const Real* wrow = pw + (f * dm + d) * nc;
        for (std::size_t c = 0; c < nc; ++c) {
          const Real wv = wrow[c];
          const Real* xrow = px + ((b * nf + f) * nc + c) * nt;
          for (std::size_t t = 0; t < nt; ++t) orow[t] += wv * xrow[t];
        }
      }
    }
  }
  if (recording({&x, &w})) {
    mark(out);
    Node xn = x.node(), wn = w.node(), on = out.node();
    Tape::active()->record([xn, wn, on, nb, nf, nc, nt, dm, co] {
      if (no_upstream(on)) return;
      if (xn->requires_grad) xn->ensure_grad();
      if (wn->requires_grad) wn->ensure_grad();
      const Real* g = on->grad.data();
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t f = 0; f < nf; ++f) {
          for (std::size_t d = 0; d < dm; ++d) {
            const Real* grow = g + (b * co + f * dm + d) * nt;
            const Real* wrow = wn->data.data() + (f * dm + d) * nc;
            for (std::size_t c = 0; c < nc; ++c) {
              const Real* xrow = xn->data.data() + ((b * nf + f) * nc + c) * nt;
              if (wn->requires_grad) {
                Real acc = 0.0;
                for (std::size_t t = 0; t < nt; ++t) acc += grow[t] * xrow[t];
                wn->grad[(f * dm + d) * nc + c] += acc;
              }
              if (xn->requires_grad) {
                const Real wv = wrow[c];
                Real* gxrow = xn->grad.data() + ((b * nf + f) * nc + c) * nt;
                for (std::size_t t = 0; t < nt; ++t) gxrow[t] += wv * grow[t];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

namespace {
// dir=0: [B,N,d] -> [B*H,N,hd]; dir=1: inverse
void head_permute(const Real* src, Real* dst, std::size_t nb, std::size_t n, std::size_t heads,
                  std::size_t hd, int dir, bool accumulate) {
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t merged = (b * n + i) * heads * hd + h * hd;
        const std::size_t split = ((b * heads + h) * n + i) * hd;
        const std::size_t from = dir == 0 ? merged : split;
        const std::size_t to = dir == 0 ? split : merged;
        if (accumulate) {
          for (std::size_t j = 0; j < hd; ++j) dst[to + j] += src[from + j];
        } else {
          for (std::size_t j = 0; j < hd; ++j) dst[to + j] = src[from + j];
        }
      }
    }
  }
}
}  // namespace

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.extent(2) % heads != 0) {
    throw ShapeError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t nb = x.extent(0), n = x.extent(1), hd = x.extent(2) / heads;
  Tensor out = Tensor::zeros({nb * heads, n, hd});
  head_permute(x.data(), out.data(), nb, n, heads, hd, 0, false);
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, nb, n, heads, hd] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      head_permute(on->grad.data(), xn->grad.data(), nb, n, heads, hd, 1, true);
    });
  }
  return out;
}

Tensor merge_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3 || heads == 0 || x.extent(0) % heads != 0) {
    throw ShapeError("merge_heads: cannot merge " + shape_str(x.shape()) + " from " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t nb = x.extent(0) / heads, n = x.extent(1), hd = x.extent(2);
  Tensor out = Tensor::zeros({nb, n, heads * hd});
  head_permute(x.data(), out.data(), nb, n, heads, hd, 1, false);
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on, nb, n, heads, hd] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      head_permute(on->grad.data(), xn->grad.data(), nb, n, heads, hd, 0, true);
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  Real acc = 0.0;
  const Real* px = x.data();
  for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc);
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    Tape::active()->record([xn, on] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      const Real g = on->grad[0];
      for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
    });
  }
  return out;
}

Tensor pick(const Tensor& x, const std::vector<int>& labels) {
  if (x.rank() != 2 || labels.size() != x.extent(0)) {
    throw ShapeError("pick: expected x[B,K] with one label per row, got " + shape_str(x.shape()) +
                     " and " + std::to_string(labels.size()) + " labels");
  }
  const std::size_t nb = x.extent(0), k = x.extent(1);
  Tensor out = Tensor::zeros({nb});
  for (std::size_t b = 0; b < nb; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= k) {
      throw DataError("pick: label " + std::to_string(labels[b]) + " out of range [0," +
                      std::to_string(k) + ") for trial " + std::to_string(b));
    }
    out.data()[b] = x.data()[b * k + static_cast<std::size_t>(labels[b])];
  }
  if (recording({&x})) {
    mark(out);
    Node xn = x.node(), on = out.node();
    auto labs = labels;
    Tape::active()->record([xn, on, nb, k, labs = std::move(labs)] {
      if (no_upstream(on) || !xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t b = 0; b < nb; ++b) {
        xn->grad[b * k + static_cast<std::size_t>(labs[b])] += on->grad[b];
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || labels.size() != logits.extent(0)) {
    throw ShapeError("softmax_cross_entropy: expected logits[B,K] with one label per row, got " +
                     shape_str(logits.shape()) + " and " + std::to_string(labels.size()) +
                     " labels");
  }
  const std::size_t nb = logits.extent(0), k = logits.extent(1);
  const Real* pl = logits.data();
  Real total = 0.0;
  for (std::size_t b = 0; b < nb; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= k) {
      throw DataError("softmax_cross_entropy: label " + std::to_string(labels[b]) +
                      " out of range [0," + std::to_string(k) + ") for trial " +
                      std::to_string(b));
    }
    const Real* row = pl + b * k;
    Real mx = row[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    Real z = 0.0;
    for (std::size_t i = 0; i < k; ++i) z += std::exp(row[i] - mx);
    total += mx + std::log(z) - row[static_cast<std::size_t>(labels[b])];
  }
  Tensor out = Tensor::scalar(total / static_cast<Real>(nb));
  if (recording({&logits})) {
    mark(out);
    Node ln = logits.node(), on = out.node();
    auto labs = labels;
    Tape::active()->record([ln, on, nb, k, labs = std::move(labs)] {
      if (no_upstream(on) || !ln->requires_grad) return;
      ln->ensure_grad();
      const Real g = on->grad[0] / static_cast<Real>(nb);
      for (std::size_t b = 0; b < nb; ++b) {
        const Real* row = ln->data.data() + b * k;
        Real mx = row[0];
        for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
        Real z = 0.0;
        for (std::size_t i = 0; i < k; ++i) z += std::exp(row[i] - mx);
        Real* grow = ln->grad.data() + b * k;
        for (std::size_t i = 0; i < k; ++i) {
          const Real p = std::exp(row[i] - mx) / z;
          grow[i] += g * (p - (static_cast<std::size_t>(labs[b]) == i ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w) {
  if (x.rank() < 1 || w.rank() != 2 || x.extent(x.rank() - 1) != w.extent(0)) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const std::size_t k = w.extent(0), n = w.extent(1);
  const std::size_t m = x.size() / k;
  auto shape = x.shape();
  shape[shape.size() - 1] = n;
  Tensor out = Tensor::zeros(shape);
  mm_acc(x.data(), w.data(), out.data(), m, k, n);
  if (recording({&x, &w})) {
    mark(out);
    Node xn = x.node(), wn = w.node(), on = out.node();
    Tape::active()->record([xn, wn, on, m, k, n] {
      if (no_upstream(on)) return;
      if (xn->requires_grad) {
        xn->ensure_grad();
        mm_nt_acc(on->grad.data(), wn->data.data(), xn->grad.data(), m, n, k);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        mm_tn_acc(xn->data.data(), on->grad.data(), wn->grad.data(), k, m, n);
      }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_suffix(linear(x, w), b);
}

}  // namespace dsai
