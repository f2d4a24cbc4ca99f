#include "moby/ops.hpp"

#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace moby {
namespace {

template <typename S>
using Array = typename Tensor<S>::Array;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;
template <typename S>
using RowVecMap = Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>;

template <typename S>
Tape<S>* recording(std::initializer_list<const Tensor<S>*> inputs) {
  auto* tape = Tape<S>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

template <typename S>
bool wants_grad(const Tensor<S>& t) {
  return t.defined() && t.requires_grad();
}

// dst += src, or dst = src when dst is a gradient buffer that was just created.
// `fresh` is taken by reference so that it is read after the argument that
// fetched the buffer has been evaluated.
template <typename Dst, typename Src>
void accumulate(Dst&& dst, const Src& src, const bool& fresh) {
  if (fresh) {
    dst = src;
  } else {
    dst += src;
  }
}

// Matrix-product variant of `accumulate`.
template <typename Dst, typename Lhs, typename Rhs>
void accumulate_product(Dst&& dst, const Lhs& lhs, const Rhs& rhs, const bool& fresh) {
  if (fresh) {
    dst.noalias() = lhs * rhs;
  } else {
    dst.noalias() += lhs * rhs;
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

// Size of the leading block before `axis`, the axis extent, and the block after it.
struct AxisSplit {
  Index outer;
  Index extent;
  Index inner;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Number of leading rows when `b` broadcasts over `a`, or throws.
Index broadcast_rows(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return 1;
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    return numel(a) / numel(b);
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
}

template <typename S>
void check_finite(const Tensor<S>& x, const char* op) {
  if (x.data().hasNaN()) throw NumericError(std::string(op) + ": NaN in input");
}

template <typename S>
void permute_copy(const S* src, const Shape& in_shape, const std::vector<int>& axes, S* dst) {
  const std::size_t rank = in_shape.size();
  std::vector<Index> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
  std::vector<Index> out_shape(rank), stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
    stride[i] = in_stride[static_cast<std::size_t>(axes[i])];
  }
  // Innermost output axis handled as a strided run.
  const Index run = out_shape[rank - 1];
  const Index run_stride = stride[rank - 1];
  const Index total = numel(in_shape);
  std::vector<Index> counter(rank, 0);
  Index offset = 0;
  for (Index o = 0; o < total; o += run) {
    const S* s = src + offset;
    for (Index j = 0; j < run; ++j) dst[o + j] = s[j * run_stride];
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      offset += stride[ax];
      if (++counter[ax] < out_shape[ax]) break;
      offset -= stride[ax] * out_shape[ax];
      counter[ax] = 0;
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index rows = broadcast_rows(a.shape(), b.shape(), "add");
  const Index cols = b.size();
  Tensor<Scalar> out(a.shape(), a.data());
  MatMap<Scalar>(out.data().data(), rows, cols).rowwise() += RowVecMap<Scalar>(b.data().data(), cols);
  if (auto* tape = recording<Scalar>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("add", out, [a, b, rows, cols](const Array<Scalar>& g) mutable {
      bool fresh = false;
      if (wants_grad(a)) accumulate(a.grad_buffer(fresh), g, fresh);
      if (wants_grad(b)) {
        b.grad_buffer() += ConstMatMap<Scalar>(g.data(), rows, cols).colwise().sum().transpose().array();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, scale(b, Scalar(-1)));
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index rows = broadcast_rows(a.shape(), b.shape(), "mul");
  const Index cols = b.size();
  Tensor<Scalar> out(a.shape(), a.data());
  MatMap<Scalar>(out.data().data(), rows, cols).array().rowwise() *=
      RowVecMap<Scalar>(b.data().data(), cols).array();
  if (auto* tape = recording<Scalar>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("mul", out, [a, b, rows, cols](const Array<Scalar>& g) mutable {
      ConstMatMap<Scalar> gm(g.data(), rows, cols);
      if (wants_grad(a)) {
        bool fresh = false;
        accumulate(MatMap<Scalar>(a.grad_buffer(fresh).data(), rows, cols).array(),
                   gm.array().rowwise() * RowVecMap<Scalar>(b.data().data(), cols).array(), fresh);
      }
      if (wants_grad(b)) {
        ConstMatMap<Scalar> am(a.data().data(), rows, cols);
        b.grad_buffer() += (gm.array() * am.array()).colwise().sum().transpose();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), a.data() * factor);
  if (auto* tape = recording<Scalar>({&a})) {
    out.set_requires_grad(true);
    tape->record("scale", out, [a, factor](const Array<Scalar>& g) mutable {
      bool fresh = false;
      accumulate(a.grad_buffer(fresh), g * factor, fresh);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale_samples(const Tensor<Scalar>& x, std::span<const Scalar> factors) {
  const Index n = x.dim(0);
  if (static_cast<Index>(factors.size()) != n) {
    throw ShapeError("scale_samples: " + std::to_string(factors.size()) + " factors for leading extent " +
                     std::to_string(n));
  }
  const Index per = x.size() / n;
  Tensor<Scalar> out(x.shape(), x.data());
  for (Index i = 0; i < n; ++i) out.data().segment(i * per, per) *= factors[static_cast<std::size_t>(i)];
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    std::vector<Scalar> f(factors.begin(), factors.end());
    tape->record("scale_samples", out, [x, f = std::move(f), per](const Array<Scalar>& g) mutable {
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < f.size(); ++i) {
        const Index off = static_cast<Index>(i) * per;
        gx.segment(off, per) += g.segment(off, per) * f[i];
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized({m, n});
  out.matrix().noalias() = a.matrix() * b.matrix();
  if (auto* tape = recording<Scalar>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("matmul", out, [a, b, m, k, n](const Array<Scalar>& g) mutable {
      ConstMatMap<Scalar> gm(g.data(), m, n);
      bool fresh = false;
      if (wants_grad(a)) accumulate_product(MatMap<Scalar>(a.grad_buffer(fresh).data(), m, k), gm, b.matrix().transpose(), fresh);
      if (wants_grad(b)) accumulate_product(MatMap<Scalar>(b.grad_buffer(fresh).data(), k, n), a.matrix().transpose(), gm, fresh);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> batched_matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool transpose_b) {
  const bool ok = a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) &&
                  a.dim(2) == (transpose_b ? b.dim(2) : b.dim(1));
  if (!ok) {
    throw ShapeError("batched_matmul: incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const Index groups = a.dim(0), m = a.dim(1), k = a.dim(2);
  const Index n = transpose_b ? b.dim(1) : b.dim(2);
  const Index br = b.dim(1), bc = b.dim(2);
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized({groups, m, n});
  for (Index gi = 0; gi < groups; ++gi) {
    ConstMatMap<Scalar> am(a.data().data() + gi * m * k, m, k);
    ConstMatMap<Scalar> bm(b.data().data() + gi * br * bc, br, bc);
    MatMap<Scalar> om(out.data().data() + gi * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * bm.transpose();
    } else {
      om.noalias() = am * bm;
    }
  }
  if (auto* tape = recording<Scalar>({&a, &b})) {
    out.set_requires_grad(true);
    tape->record("batched_matmul", out,
                 [a, b, transpose_b, groups, m, k, n, br, bc](const Array<Scalar>& g) mutable {
                   bool fresh_a = false, fresh_b = false;
                   Scalar* ga = wants_grad(a) ? a.grad_buffer(fresh_a).data() : nullptr;
                   Scalar* gb = wants_grad(b) ? b.grad_buffer(fresh_b).data() : nullptr;
                   for (Index gi = 0; gi < groups; ++gi) {
                     ConstMatMap<Scalar> gm(g.data() + gi * m * n, m, n);
                     ConstMatMap<Scalar> am(a.data().data() + gi * m * k, m, k);
                     ConstMatMap<Scalar> bm(b.data().data() + gi * br * bc, br, bc);
                     if (ga) {
                       MatMap<Scalar> gam(ga + gi * m * k, m, k);
                       if (transpose_b) {
                         accumulate_product(gam, gm, bm, fresh_a);
                       } else {
                         accumulate_product(gam, gm, bm.transpose(), fresh_a);
                       }
                     }
                     if (gb) {
                       MatMap<Scalar> gbm(gb + gi * br * bc, br, bc);
                       if (transpose_b) {
                         accumulate_product(gbm, gm.transpose(), am, fresh_b);
                       } else {
                         accumulate_product(gbm, am.transpose(), gm, fresh_b);
                       }
                     }
                   }
                 });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(0)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " does not match weight " +
                     to_string(weight.shape()));
  }
  const Index in = weight.dim(0), outc = weight.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outc)) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " does not match weight " +
                     to_string(weight.shape()));
  }
  const Index rows = x.size() / in;
  Shape shape = x.shape();
  shape.back() = outc;
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(shape);
  MatMap<Scalar> om(out.data().data(), rows, outc);
  om.noalias() = ConstMatMap<Scalar>(x.data().data(), rows, in) * weight.matrix();
  if (bias.defined()) om.rowwise() += RowVecMap<Scalar>(bias.data().data(), outc);
  if (auto* tape = recording<Scalar>({&x, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record("linear", out, [x, weight, bias, rows, in, outc](const Array<Scalar>& g) mutable {
      ConstMatMap<Scalar> gm(g.data(), rows, outc);
      bool fresh = false;
      if (wants_grad(x)) {
        accumulate_product(MatMap<Scalar>(x.grad_buffer(fresh).data(), rows, in), gm, weight.matrix().transpose(), fresh);
      }
      if (wants_grad(weight)) {
        accumulate_product(MatMap<Scalar>(weight.grad_buffer(fresh).data(), in, outc),
                           ConstMatMap<Scalar>(x.data().data(), rows, in).transpose(), gm, fresh);
      }
      if (wants_grad(bias)) bias.grad_buffer() += gm.colwise().sum().transpose().array();
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  const Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  Tensor<Scalar> out(x.shape(), Scalar(0.5) * x.data() * (Scalar(1) + (x.data() * inv_sqrt2).erf()));
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("gelu", out, [x, inv_sqrt2](const Array<Scalar>& g) mutable {
      const Scalar inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<Scalar>;
      const auto& v = x.data();
      const Array<Scalar> cdf = Scalar(0.5) * (Scalar(1) + (v * inv_sqrt2).erf());
      bool fresh = false;
      accumulate(x.grad_buffer(fresh), g * (cdf + v * inv_sqrt_2pi * (Scalar(-0.5) * v.square()).exp()), fresh);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> out(x.shape(), x.data().max(Scalar(0)));
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("relu", out, [x](const Array<Scalar>& g) mutable {
      bool fresh = false;
      accumulate(x.grad_buffer(fresh), (x.data() > Scalar(0)).select(g, Scalar(0)), fresh);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
  check_finite(x, "softmax");
  axis = normalize_axis(axis, x.rank(), "softmax");
  const auto [outer, n, inner] = split_at(x.shape(), axis);
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(x.shape());
  const Scalar* src = x.data().data();
  Scalar* dst = out.data().data();
  if (inner == 1) {
    ConstMatMap<Scalar> xm(src, outer, n);
    MatMap<Scalar> ym(dst, outer, n);
    ym.array() = (xm.colwise() - xm.rowwise().maxCoeff()).array().exp();
    ym.array().colwise() /= ym.rowwise().sum().array();
  }
  for (Index o = 0; inner > 1 && o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      Scalar mx = src[base];
      for (Index j = 1; j < n; ++j) mx = std::max(mx, src[base + j * inner]);
      Scalar total = 0;
      for (Index j = 0; j < n; ++j) {
        const Scalar e = std::exp(src[base + j * inner] - mx);
        dst[base + j * inner] = e;
        total += e;
      }
      const Scalar inv = Scalar(1) / total;
      for (Index j = 0; j < n; ++j) dst[base + j * inner] *= inv;
    }
  }
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("softmax", out, [x, y = out.detach(), outer, n, inner](const Array<Scalar>& g) mutable {
      bool fresh = false;
      Scalar* gx = x.grad_buffer(fresh).data();
      const Scalar* yv = y.data().data();
      if (inner == 1) {
        ConstMatMap<Scalar> gm(g.data(), outer, n);
        ConstMatMap<Scalar> ym(yv, outer, n);
        const Eigen::Array<Scalar, Eigen::Dynamic, 1> dot = (gm.array() * ym.array()).rowwise().sum();
        accumulate(MatMap<Scalar>(gx, outer, n).array(), ym.array() * (gm.array().colwise() - dot), fresh);
        return;
      }
      if (fresh) std::fill(gx, gx + g.size(), Scalar(0));
      for (Index o = 0; o < outer; ++o) {
        for (Index i = 0; i < inner; ++i) {
          const Index base = o * n * inner + i;
          Scalar dot = 0;
          for (Index j = 0; j < n; ++j) dot += g[base + j * inner] * yv[base + j * inner];
          for (Index j = 0; j < n; ++j) {
            const Index at = base + j * inner;
            gx[at] += yv[at] * (g[at] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> cross_entropy_from_logits(const Tensor<Scalar>& logits, std::span<const Index> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [b, c], got " + to_string(logits.shape()));
  const Index b = logits.dim(0), c = logits.dim(1);
  if (static_cast<Index>(labels.size()) != b) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) + " rows");
  }
  for (Index l : labels) {
    if (l < 0 || l >= c) {
      throw IndexError("cross_entropy: label " + std::to_string(l) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  check_finite(logits, "cross_entropy");
  ConstMatMap<Scalar> lm(logits.data().data(), b, c);
  RowMatrix<Scalar> probs(b, c);
  Scalar total = 0;
  for (Index r = 0; r < b; ++r) {
    const Scalar mx = lm.row(r).maxCoeff();
    probs.row(r) = (lm.row(r).array() - mx).exp().matrix();
    const Scalar z = probs.row(r).sum();
    probs.row(r) /= z;
    total += mx + std::log(z) - lm(r, labels[static_cast<std::size_t>(r)]);
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(total / Scalar(b));
  if (auto* tape = recording<Scalar>({&logits})) {
    out.set_requires_grad(true);
    std::vector<Index> lab(labels.begin(), labels.end());
    tape->record("cross_entropy", out,
                 [logits, probs = std::move(probs), lab = std::move(lab), b, c](const Array<Scalar>& g) mutable {
                   RowMatrix<Scalar> d = probs;
                   for (Index r = 0; r < b; ++r) d(r, lab[static_cast<std::size_t>(r)]) -= Scalar(1);
                   bool fresh = false;
                   accumulate(MatMap<Scalar>(logits.grad_buffer(fresh).data(), b, c), d * (g[0] / Scalar(b)), fresh);
                 });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps) {
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const Index c = x.dim(-1);
  if (gamma.size() != c || beta.size() != c) {
    throw ShapeError("layer_norm: affine parameters do not match " + to_string(x.shape()));
  }
  const Index rows = x.size() / c;
  ConstMatMap<Scalar> xm(x.data().data(), rows, c);
  auto xhat = std::make_shared<RowMatrix<Scalar>>(rows, c);
  auto rstd = std::make_shared<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = xm.row(r).mean();
    const Scalar var = (xm.row(r).array() - mu).square().mean();
    (*rstd)[r] = Scalar(1) / std::sqrt(var + eps);
    xhat->row(r) = (xm.row(r).array() - mu) * (*rstd)[r];
  }
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(x.shape());
  MatMap<Scalar> om(out.data().data(), rows, c);
  om.array() = (xhat->array().rowwise() * RowVecMap<Scalar>(gamma.data().data(), c).array()).rowwise() +
               RowVecMap<Scalar>(beta.data().data(), c).array();
  if (auto* tape = recording<Scalar>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape->record("layer_norm", out, [x, gamma, beta, xhat, rstd, rows, c](const Array<Scalar>& g) mutable {
      ConstMatMap<Scalar> gm(g.data(), rows, c);
      if (wants_grad(gamma)) gamma.grad_buffer() += (gm.array() * xhat->array()).colwise().sum().transpose();
      if (wants_grad(beta)) beta.grad_buffer() += gm.colwise().sum().transpose().array();
      if (wants_grad(x)) {
        bool fresh = false;
        MatMap<Scalar> gx(x.grad_buffer(fresh).data(), rows, c);
        const auto gam = RowVecMap<Scalar>(gamma.data().data(), c).array();
        for (Index r = 0; r < rows; ++r) {
          const Eigen::Array<Scalar, 1, Eigen::Dynamic> dxhat = gm.row(r).array() * gam;
          const Scalar m1 = dxhat.mean();
          const Scalar m2 = (dxhat * xhat->row(r).array()).mean();
          accumulate(gx.row(r).array(), (*rstd)[r] * (dxhat - m1 - xhat->row(r).array() * m2), fresh);
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          BatchNormStats<Scalar>& stats, bool training, Scalar eps) {
  if (!(eps > 0)) throw ConfigError("batch_norm: eps must be positive");
  const Index c = x.dim(-1);
  if (gamma.size() != c || beta.size() != c || stats.mean.size() != c) {
    throw ShapeError("batch_norm: parameters do not match " + to_string(x.shape()));
  }
  const Index rows = x.size() / c;
  if (training && rows < 2) throw ContractError("batch_norm: training mode needs more than one sample per channel");
  ConstMatMap<Scalar> xm(x.data().data(), rows, c);
  Eigen::Array<Scalar, 1, Eigen::Dynamic> mu(c), var(c);
  if (training) {
    mu = xm.colwise().mean().array();
    var = (xm.array().rowwise() - mu).square().colwise().mean();
    const Scalar m = stats.momentum;
    stats.mean.data() = (Scalar(1) - m) * stats.mean.data() + m * mu.transpose();
    stats.var.data() =
        (Scalar(1) - m) * stats.var.data() + m * var.transpose() * (Scalar(rows) / Scalar(rows - 1));
  } else {
    mu = stats.mean.data().transpose();
    var = stats.var.data().transpose();
  }
  const Eigen::Array<Scalar, 1, Eigen::Dynamic> rstd = (var + eps).rsqrt();
  auto xhat = std::make_shared<RowMatrix<Scalar>>(rows, c);
  xhat->array() = (xm.array().rowwise() - mu).rowwise() * rstd;
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(x.shape());
  MatMap<Scalar>(out.data().data(), rows, c).array() =
      (xhat->array().rowwise() * RowVecMap<Scalar>(gamma.data().data(), c).array()).rowwise() +
      RowVecMap<Scalar>(beta.data().data(), c).array();
  if (auto* tape = recording<Scalar>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    tape->record("batch_norm", out, [x, gamma, beta, xhat, rstd, training, rows, c](const Array<Scalar>& g) mutable {
      ConstMatMap<Scalar> gm(g.data(), rows, c);
      if (wants_grad(gamma)) gamma.grad_buffer() += (gm.array() * xhat->array()).colwise().sum().transpose();
      if (wants_grad(beta)) beta.grad_buffer() += gm.colwise().sum().transpose().array();
      if (wants_grad(x)) {
        bool fresh = false;
        MatMap<Scalar> gx(x.grad_buffer(fresh).data(), rows, c);
        const auto gam = RowVecMap<Scalar>(gamma.data().data(), c).array();
        const RowMatrix<Scalar> dxhat = (gm.array().rowwise() * gam).matrix();
        if (training) {
          const Eigen::Array<Scalar, 1, Eigen::Dynamic> m1 = dxhat.colwise().mean().array();
          const Eigen::Array<Scalar, 1, Eigen::Dynamic> m2 =
              (dxhat.array() * xhat->array()).colwise().mean();
          accumulate(gx.array(), ((dxhat.array().rowwise() - m1) - xhat->array().rowwise() * m2).rowwise() * rstd, fresh);
        } else {
          accumulate(gx.array(), dxhat.array().rowwise() * rstd, fresh);
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x, Scalar eps) {
  const Index c = x.dim(-1);
  const Index rows = x.size() / c;
  ConstMatMap<Scalar> xm(x.data().data(), rows, c);
  auto norms = std::make_shared<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(xm.rowwise().norm().array().max(eps));
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(x.shape());
  MatMap<Scalar>(out.data().data(), rows, c) = xm.array().colwise() / *norms;
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("l2_normalize", out, [x, y = out.detach(), norms, rows, c, eps](const Array<Scalar>& g) mutable {
      ConstMatMap<Scalar> gm(g.data(), rows, c);
      ConstMatMap<Scalar> ym(y.data().data(), rows, c);
      bool fresh = false;
      MatMap<Scalar> gx(x.grad_buffer(fresh).data(), rows, c);
      for (Index r = 0; r < rows; ++r) {
        const Scalar n = (*norms)[r];
        if (n > eps) {
          accumulate(gx.row(r), (gm.row(r) - ym.row(r) * ym.row(r).dot(gm.row(r))) / n, fresh);
        } else {
          accumulate(gx.row(r), gm.row(r) / n, fresh);
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.alias(std::move(shape));
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("reshape", out, [x](const Array<Scalar>& g) mutable {
      bool fresh = false;
      accumulate(x.grad_buffer(fresh), g, fresh);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& axes) {
  const int rank = x.rank();
  std::vector<int> seen(static_cast<std::size_t>(rank), 0);
  bool valid = static_cast<int>(axes.size()) == rank;
  for (int a : axes) {
    if (!valid || a < 0 || a >= rank || seen[static_cast<std::size_t>(a)]++) valid = false;
  }
  if (!valid) throw ShapeError("permute: invalid axis order for shape " + to_string(x.shape()));
  Shape out_shape(static_cast<std::size_t>(rank));
  std::vector<int> inverse(static_cast<std::size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.dim(axes[static_cast<std::size_t>(i)]);
    inverse[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])] = i;
  }
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(out_shape);
  permute_copy(x.data().data(), x.shape(), axes, out.data().data());
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("permute", out, [x, out_shape, inverse](const Array<Scalar>& g) mutable {
      bool fresh = false;
      Array<Scalar>& gx = x.grad_buffer(fresh);
      if (fresh) {
        permute_copy(g.data(), out_shape, inverse, gx.data());
        return;
      }
      Array<Scalar> back(g.size());
      permute_copy(g.data(), out_shape, inverse, back.data());
      gx += back;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(x.shape()));
  return permute(x, {1, 0});
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.data().sum());
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("sum", out, [x](const Array<Scalar>& g) mutable { x.grad_buffer() += g[0]; });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / Scalar(x.size()));
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis) {
  axis = normalize_axis(axis, x.rank(), "sum");
  const auto [outer, n, inner] = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + axis);
  if (shape.empty()) shape = {1};
  Tensor<Scalar> out(shape);
  for (Index o = 0; o < outer; ++o) {
    auto acc = out.data().segment(o * inner, inner);
    for (Index j = 0; j < n; ++j) acc += x.data().segment((o * n + j) * inner, inner);
  }
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("sum_axis", out, [x, outer, n, inner](const Array<Scalar>& g) mutable {
      auto& gx = x.grad_buffer();
      for (Index o = 0; o < outer; ++o) {
        for (Index j = 0; j < n; ++j) gx.segment((o * n + j) * inner, inner) += g.segment(o * inner, inner);
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis) {
  const int a = normalize_axis(axis, x.rank(), "mean");
  return scale(sum(x, a), Scalar(1) / Scalar(x.dim(a)));
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis(axis, parts.front().rank(), "concat");
  Shape shape = parts.front().shape();
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw ShapeError("concat: rank mismatch " + to_string(s) + " vs " + to_string(shape));
    total += s[static_cast<std::size_t>(axis)];
    s[static_cast<std::size_t>(axis)] = shape[static_cast<std::size_t>(axis)];
    if (s != shape) throw ShapeError("concat: shape mismatch " + to_string(p.shape()) + " vs " + to_string(shape));
  }
  shape[static_cast<std::size_t>(axis)] = total;
  const auto split = split_at(shape, axis);
  const Index outer = split.outer, inner = split.inner;
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(shape);
  Index offset = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    const Index n = p.dim(axis);
    offsets.push_back(offset);
    for (Index o = 0; o < outer; ++o) {
      out.data().segment((o * total + offset) * inner, n * inner) = p.data().segment(o * n * inner, n * inner);
    }
    offset += n;
  }
  bool any = false;
  for (const auto& p : parts) any = any || wants_grad(p);
  if (any && Tape<Scalar>::active()) {
    out.set_requires_grad(true);
    Tape<Scalar>::active()->record(
        "concat", out, [parts, offsets, outer, inner, total, axis](const Array<Scalar>& g) mutable {
          for (std::size_t i = 0; i < parts.size(); ++i) {
            if (!wants_grad(parts[i])) continue;
            const Index n = parts[i].dim(axis);
            auto& gp = parts[i].grad_buffer();
            for (Index o = 0; o < outer; ++o) {
              gp.segment(o * n * inner, n * inner) += g.segment((o * total + offsets[i]) * inner, n * inner);
            }
          }
        });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, int axis, Index begin, Index end) {
  axis = normalize_axis(axis, x.rank(), "slice");
  const auto [outer, n, inner] = split_at(x.shape(), axis);
  if (begin < 0 || end > n || begin >= end) {
    throw IndexError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for extent " +
                     std::to_string(n));
  }
  const Index len = end - begin;
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] = len;
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(shape);
  for (Index o = 0; o < outer; ++o) {
    out.data().segment(o * len * inner, len * inner) = x.data().segment((o * n + begin) * inner, len * inner);
  }
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    tape->record("slice", out, [x, outer, n, inner, begin, len](const Array<Scalar>& g) mutable {
      auto& gx = x.grad_buffer();
      for (Index o = 0; o < outer; ++o) {
        gx.segment((o * n + begin) * inner, len * inner) += g.segment(o * len * inner, len * inner);
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::span<const Index> indices) {
  const Index n = x.dim(0);
  const Index width = x.size() / n;
  for (Index i : indices) {
    if (i < 0 || i >= n) {
      throw IndexError("gather_rows: index " + std::to_string(i) + " outside [0, " + std::to_string(n) + ")");
    }
  }
  Shape shape = x.shape();
  shape[0] = static_cast<Index>(indices.size());
  Tensor<Scalar> out = Tensor<Scalar>::uninitialized(shape);
  const Scalar* src = x.data().data();
  Scalar* dst = out.data().data();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(src + indices[r] * width, width, dst + static_cast<Index>(r) * width);
  }
  if (auto* tape = recording<Scalar>({&x})) {
    out.set_requires_grad(true);
    std::vector<Index> idx(indices.begin(), indices.end());
    tape->record("gather_rows", out, [x, idx = std::move(idx), width](const Array<Scalar>& g) mutable {
      Scalar* gx = x.grad_buffer().data();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        const Scalar* gr = g.data() + static_cast<Index>(r) * width;
        Scalar* dst = gx + idx[r] * width;
        for (Index j = 0; j < width; ++j) dst[j] += gr[j];
      }
    });
  }
  return out;
}

#define MOBY_INSTANTIATE_OPS(S)                                                                             \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                               \
  template Tensor<S> scale(const Tensor<S>&, S);                                                            \
  template Tensor<S> scale_samples(const Tensor<S>&, std::span<const S>);                                   \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                            \
  template Tensor<S> batched_matmul(const Tensor<S>&, const Tensor<S>&, bool);                              \
  template Tensor<S> linear(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                          \
  template Tensor<S> gelu(const Tensor<S>&);                                                                \
  template Tensor<S> relu(const Tensor<S>&);                                                                \
  template Tensor<S> softmax(const Tensor<S>&, int);                                                        \
  template Tensor<S> cross_entropy_from_logits(const Tensor<S>&, std::span<const Index>);                   \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);                   \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, BatchNormStats<S>&,   \
                                bool, S);                                                                   \
  template Tensor<S> l2_normalize(const Tensor<S>&, S);                                                     \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                                      \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<int>&);                                    \
  template Tensor<S> transpose(const Tensor<S>&);                                                           \
  template Tensor<S> sum(const Tensor<S>&);                                                                 \
  template Tensor<S> mean(const Tensor<S>&);                                                                \
  template Tensor<S> sum(const Tensor<S>&, int);                                                            \
  template Tensor<S> mean(const Tensor<S>&, int);                                                           \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, int);                                            \
  template Tensor<S> slice(const Tensor<S>&, int, Index, Index);                                            \
  template Tensor<S> gather_rows(const Tensor<S>&, std::span<const Index>);

MOBY_INSTANTIATE_OPS(float)
MOBY_INSTANTIATE_OPS(double)

}  // namespace moby
