#include "anet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace anet {

namespace {

template <typename Scalar>
using Vec = typename Tensor<Scalar>::Vector;
template <typename Scalar>
using RowMatrix = typename Tensor<Scalar>::RowMatrix;

template <typename Scalar>
void same_graph(Var<Scalar> a, Var<Scalar> b, const char* op) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
}

template <typename Scalar>
void require_rank(Var<Scalar> x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                " input, got shape " + shape_str(x.shape()));
  }
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar v) {
  if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
  const Scalar e = std::exp(v);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar stable_softplus(Scalar v) {
  return std::max(v, Scalar(0)) + std::log1p(std::exp(-std::abs(v)));
}

// Column buffer for one sample: rows (ci, ky, kx), columns (oy, ox).
template <typename Scalar>
void im2col(const Scalar* x, Index channels, Index height, Index width, Index k, int stride,
            int pad, Index out_h, Index out_w, RowMatrix<Scalar>& cols) {
  cols.resize(channels * k * k, out_h * out_w);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* plane = x + c * height * width;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = cols.data() + ((c * k + ky) * k + kx) * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            row[oy * out_w + ox] =
                (iy >= 0 && iy < height && ix >= 0 && ix < width) ? plane[iy * width + ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& cols, Index channels, Index height, Index width, Index k,
                int stride, int pad, Index out_h, Index out_w, Scalar* dx) {
  for (Index c = 0; c < channels; ++c) {
    Scalar* plane = dx + c * height * width;
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = cols.data() + ((c * k + ky) * k + kx) * out_h * out_w;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= width) continue;
            plane[iy * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

struct AxisSplit {
  Index outer = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename Scalar>
Var<Scalar> detach(Var<Scalar> x) {
  return x.graph().constant(x.value());
}

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  same_graph(a, b, "add");
  require_shape(b.shape(), a.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.value().vec() + b.value().vec());
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph<Scalar>& g, int self) {
    if (g.requires_grad(ia)) g.grad_buffer(ia).vec() += g.grad(self).vec();
    if (g.requires_grad(ib)) g.grad_buffer(ib).vec() += g.grad(self).vec();
  });
}

template <typename Scalar>
Var<Scalar> sum_n(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw std::invalid_argument("sum_n: no inputs");
  std::vector<int> ids;
  for (const auto& p : parts) {
    same_graph(parts.front(), p, "sum_n");
    require_shape(p.shape(), parts.front().shape(), "sum_n");
    ids.push_back(p.id());
  }
  Tensor<Scalar> out(parts.front().shape());
  std::vector<Scalar> terms(parts.size());
  for (Index e = 0; e < out.size(); ++e) {
    for (std::size_t i = 0; i < parts.size(); ++i) terms[i] = parts[i].value().data()[e];
    std::sort(terms.begin(), terms.end());
    Scalar acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc += terms[i];
    out.data()[e] = acc;
  }
  return parts.front().graph().record(std::move(out), ids, [ids](Graph<Scalar>& g, int self) {
    for (int id : ids)
      if (g.requires_grad(id)) g.grad_buffer(id).vec() += g.grad(self).vec();
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  same_graph(a, b, "sub");
  require_shape(b.shape(), a.shape(), "sub");
  Tensor<Scalar> out(a.shape(), a.value().vec() - b.value().vec());
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph<Scalar>& g, int self) {
    if (g.requires_grad(ia)) g.grad_buffer(ia).vec() += g.grad(self).vec();
    if (g.requires_grad(ib)) g.grad_buffer(ib).vec() -= g.grad(self).vec();
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  same_graph(a, b, "mul");
  require_shape(b.shape(), a.shape(), "mul");
  Tensor<Scalar> out(a.shape(), a.value().vec().cwiseProduct(b.value().vec()));
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib](Graph<Scalar>& g, int self) {
    const auto& gy = g.grad(self).vec();
    if (g.requires_grad(ia)) g.grad_buffer(ia).vec() += gy.cwiseProduct(g.value(ib).vec());
    if (g.requires_grad(ib)) g.grad_buffer(ib).vec() += gy.cwiseProduct(g.value(ia).vec());
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> x, Scalar factor) {
  Tensor<Scalar> out(x.shape(), x.value().vec() * factor);
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, factor](Graph<Scalar>& g, int self) {
    g.grad_buffer(ix).vec() += g.grad(self).vec() * factor;
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> x, Scalar offset) {
  Tensor<Scalar> out(x.shape(), x.value().vec().array() + offset);
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    g.grad_buffer(ix).vec() += g.grad(self).vec();
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> x) {
  Tensor<Scalar> out(x.shape(), x.value().vec().cwiseMax(Scalar(0)));
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    const auto& xv = g.value(ix).vec();
    g.grad_buffer(ix).vec().array() +=
        (xv.array() > Scalar(0)).select(g.grad(self).vec().array(), Scalar(0));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> x) {
  Tensor<Scalar> out(x.shape(), x.value().vec().unaryExpr([](Scalar v) { return stable_sigmoid(v); }));
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    const auto& y = g.value(self).vec().array();
    g.grad_buffer(ix).vec().array() += g.grad(self).vec().array() * y * (Scalar(1) - y);
  });
}

template <typename Scalar>
Var<Scalar> softplus(Var<Scalar> x) {
  Tensor<Scalar> out(x.shape(), x.value().vec().unaryExpr([](Scalar v) { return stable_softplus(v); }));
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    const auto& xv = g.value(ix).vec();
    g.grad_buffer(ix).vec().array() +=
        g.grad(self).vec().array() * xv.unaryExpr([](Scalar v) { return stable_sigmoid(v); }).array();
  });
}

template <typename Scalar>
Var<Scalar> softmax(Var<Scalar> x) {
  require_rank(x, 2, "softmax");
  Tensor<Scalar> out(x.shape());
  auto in = x.value().matrix();
  auto y = out.matrix();
  for (Index r = 0; r < in.rows(); ++r) {
    const Scalar mx = in.row(r).maxCoeff();
    y.row(r) = (in.row(r).array() - mx).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    auto yv = g.value(self).matrix();
    auto gy = g.grad(self).matrix();
    auto dx = g.grad_buffer(ix).matrix();
    for (Index r = 0; r < yv.rows(); ++r) {
      const Scalar dot = yv.row(r).dot(gy.row(r));
      dx.row(r).array() += yv.row(r).array() * (gy.row(r).array() - dot);
    }
  });
}

template <typename Scalar>
Var<Scalar> sqrt_floor(Var<Scalar> x, Scalar floor) {
  Tensor<Scalar> out(x.shape(), x.value().vec().unaryExpr([floor](Scalar v) {
    return std::sqrt(std::max(v, floor));
  }));
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, floor](Graph<Scalar>& g, int self) {
    const auto& xv = g.value(ix).vec();
    const auto& y = g.value(self).vec();
    const auto& gy = g.grad(self).vec();
    auto& dx = g.grad_buffer(ix).vec();
    for (Index i = 0; i < xv.size(); ++i) {
      if (xv[i] > floor) dx[i] += gy[i] * Scalar(0.5) / y[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias, int stride, int padding) {
  same_graph(x, weight, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 ||
      stride < 1 || padding < 0) {
    throw std::invalid_argument("conv2d: input shape " + shape_str(xs) +
                                " incompatible with weight shape " + shape_str(ws));
  }
  const Index n = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const Index cout = ws[0], k = ws[2];
  const Index out_h = (h + 2 * padding - k) / stride + 1;
  const Index out_w = (w + 2 * padding - k) / stride + 1;
  if (out_h < 1 || out_w < 1) {
    throw std::invalid_argument("conv2d: input shape " + shape_str(xs) + " too small for weight shape " +
                                shape_str(ws));
  }
  if (bias.valid()) require_shape(bias.shape(), Shape{cout}, "conv2d bias");

  Tensor<Scalar> out({n, cout, out_h, out_w});
  const auto wm = weight.value().matrix(cout, cin * k * k);
  RowMatrix<Scalar> cols;
  const Index plane_in = cin * h * w;
  const Index plane_out = cout * out_h * out_w;
  for (Index s = 0; s < n; ++s) {
    im2col(x.value().data() + s * plane_in, cin, h, w, k, stride, padding, out_h, out_w, cols);
    Eigen::Map<RowMatrix<Scalar>> ys(out.data() + s * plane_out, cout, out_h * out_w);
    ys.noalias() = wm * cols;
    if (bias.valid()) ys.colwise() += bias.value().vec();
  }

  const int ix = x.id(), iw = weight.id(), ib = bias.valid() ? bias.id() : -1;
  std::vector<int> inputs{ix, iw};
  if (ib >= 0) inputs.push_back(ib);
  return x.graph().record(
      std::move(out), inputs,
      [=](Graph<Scalar>& g, int self) {
        const auto& xv = g.value(ix);
        const auto wmat = g.value(iw).matrix(cout, cin * k * k);
        const auto& gy = g.grad(self);
        const bool need_x = g.requires_grad(ix);
        const bool need_w = g.requires_grad(iw);
        RowMatrix<Scalar> cols_b;
        RowMatrix<Scalar> dcols;
        for (Index s = 0; s < n; ++s) {
          Eigen::Map<const RowMatrix<Scalar>> gys(gy.data() + s * plane_out, cout, out_h * out_w);
          if (need_w) {
            im2col(xv.data() + s * plane_in, cin, h, w, k, stride, padding, out_h, out_w, cols_b);
            g.grad_buffer(iw).matrix(cout, cin * k * k).noalias() += gys * cols_b.transpose();
          }
          if (need_x) {
            dcols.noalias() = wmat.transpose() * gys;
            col2im_add(dcols, cin, h, w, k, stride, padding, out_h, out_w,
                       g.grad_buffer(ix).data() + s * plane_in);
          }
          if (ib >= 0 && g.requires_grad(ib)) g.grad_buffer(ib).vec() += gys.rowwise().sum();
        }
      });
}

template <typename Scalar>
Var<Scalar> batch_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta,
                       std::type_identity_t<RunningStats<Scalar>>* stats, const NormOptions& options) {
  require_rank(x, 4, "batch_norm");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require_shape(gamma.shape(), Shape{c}, "batch_norm gamma");
  require_shape(beta.shape(), Shape{c}, "batch_norm beta");
  if (!options.train && stats == nullptr) {
    throw std::invalid_argument("batch_norm: inference mode requires running statistics");
  }
  if (stats != nullptr) {
    require_shape(stats->mean.shape(), Shape{c}, "batch_norm running mean");
  }
  const Scalar eps = static_cast<Scalar>(options.eps);
  const Index count = n * hw;
  Vec<Scalar> mu(c), inv_std(c);
  const auto& xv = x.value();
  if (options.train) {
    Vec<Scalar> var(c);
    for (Index ch = 0; ch < c; ++ch) {
      Scalar s = 0;
      for (Index b = 0; b < n; ++b) s += Eigen::Map<const Vec<Scalar>>(xv.data() + (b * c + ch) * hw, hw).sum();
      mu[ch] = s / static_cast<Scalar>(count);
      Scalar q = 0;
      for (Index b = 0; b < n; ++b) {
        q += (Eigen::Map<const Vec<Scalar>>(xv.data() + (b * c + ch) * hw, hw).array() - mu[ch])
                 .square()
                 .sum();
      }
      var[ch] = q / static_cast<Scalar>(count);
      inv_std[ch] = Scalar(1) / std::sqrt(var[ch] + eps);
    }
    if (stats != nullptr && options.update_stats) {
      const Scalar m = static_cast<Scalar>(options.momentum);
      const Scalar unbias = count > 1 ? static_cast<Scalar>(count) / static_cast<Scalar>(count - 1) : Scalar(1);
      stats->mean.vec() = m * stats->mean.vec() + (Scalar(1) - m) * mu;
      stats->var.vec() = m * stats->var.vec() + (Scalar(1) - m) * unbias * var;
    }
  } else {
    mu = stats->mean.vec();
    inv_std = (stats->var.vec().array() + eps).rsqrt().matrix();
  }

  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * hw;
      Eigen::Map<const Vec<Scalar>> xi(xv.data() + off, hw);
      Eigen::Map<Vec<Scalar>> xh(xhat.data() + off, hw);
      xh = (xi.array() - mu[ch]) * inv_std[ch];
      Eigen::Map<Vec<Scalar>>(out.data() + off, hw) =
          (xh.array() * gamma.value()[ch] + beta.value()[ch]).matrix();
    }
  }

  const int ix = x.id(), ig = gamma.id(), ibeta = beta.id();
  const bool train = options.train;
  return x.graph().record(
      std::move(out), {ix, ig, ibeta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<Scalar>& g, int self) {
        const auto& gy = g.grad(self);
        const auto& gam = g.value(ig).vec();
        Vec<Scalar> sum_g = Vec<Scalar>::Zero(c), sum_gx = Vec<Scalar>::Zero(c);
        for (Index b = 0; b < n; ++b) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (b * c + ch) * hw;
            Eigen::Map<const Vec<Scalar>> gi(gy.data() + off, hw);
            Eigen::Map<const Vec<Scalar>> xh(xhat.data() + off, hw);
            sum_g[ch] += gi.sum();
            sum_gx[ch] += gi.dot(xh);
          }
        }
        if (g.requires_grad(ig)) g.grad_buffer(ig).vec() += sum_gx;
        if (g.requires_grad(ibeta)) g.grad_buffer(ibeta).vec() += sum_g;
        if (!g.requires_grad(ix)) return;
        auto& dx = g.grad_buffer(ix);
        const Scalar inv_count = Scalar(1) / static_cast<Scalar>(count);
        for (Index b = 0; b < n; ++b) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (b * c + ch) * hw;
            Eigen::Map<const Vec<Scalar>> gi(gy.data() + off, hw);
            Eigen::Map<const Vec<Scalar>> xh(xhat.data() + off, hw);
            Eigen::Map<Vec<Scalar>> d(dx.data() + off, hw);
            const Scalar a = gam[ch] * inv_std[ch];
            if (train) {
              d.array() += a * (gi.array() - sum_g[ch] * inv_count - xh.array() * (sum_gx[ch] * inv_count));
            } else {
              d.array() += a * gi.array();
            }
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> instance_norm(Var<Scalar> x, Var<Scalar> gamma, Var<Scalar> beta, double eps_d) {
  require_rank(x, 4, "instance_norm");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require_shape(gamma.shape(), Shape{c}, "instance_norm gamma");
  require_shape(beta.shape(), Shape{c}, "instance_norm beta");
  const Scalar eps = static_cast<Scalar>(eps_d);
  const auto& xv = x.value();
  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  Vec<Scalar> inv_std(n * c);
  for (Index b = 0; b < n; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * hw;
      Eigen::Map<const Vec<Scalar>> xi(xv.data() + off, hw);
      const Scalar mu = xi.mean();
      const Scalar var = (xi.array() - mu).square().mean();
      inv_std[b * c + ch] = Scalar(1) / std::sqrt(var + eps);
      Eigen::Map<Vec<Scalar>> xh(xhat.data() + off, hw);
      xh = (xi.array() - mu) * inv_std[b * c + ch];
      Eigen::Map<Vec<Scalar>>(out.data() + off, hw) =
          (xh.array() * gamma.value()[ch] + beta.value()[ch]).matrix();
    }
  }
  const int ix = x.id(), ig = gamma.id(), ibeta = beta.id();
  return x.graph().record(
      std::move(out), {ix, ig, ibeta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<Scalar>& g, int self) {
        const auto& gy = g.grad(self);
        const auto& gam = g.value(ig).vec();
        const bool need_x = g.requires_grad(ix);
        const Scalar inv_hw = Scalar(1) / static_cast<Scalar>(hw);
        for (Index b = 0; b < n; ++b) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (b * c + ch) * hw;
            Eigen::Map<const Vec<Scalar>> gi(gy.data() + off, hw);
            Eigen::Map<const Vec<Scalar>> xh(xhat.data() + off, hw);
            const Scalar sg = gi.sum();
            const Scalar sgx = gi.dot(xh);
            if (g.requires_grad(ig)) g.grad_buffer(ig)[ch] += sgx;
            if (g.requires_grad(ibeta)) g.grad_buffer(ibeta)[ch] += sg;
            if (need_x) {
              Eigen::Map<Vec<Scalar>> d(g.grad_buffer(ix).data() + off, hw);
              d.array() += gam[ch] * inv_std[b * c + ch] *
                           (gi.array() - sg * inv_hw - xh.array() * (sgx * inv_hw));
            }
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> normalize(Var<Scalar> x, NormMode mode, Var<Scalar> gamma, Var<Scalar> beta,
                      std::type_identity_t<RunningStats<Scalar>>* stats, const NormOptions& options) {
  switch (mode) {
    case NormMode::kBatch:
      return batch_norm(x, gamma, beta, stats, options);
    case NormMode::kInstance:
      return instance_norm(x, gamma, beta, options.eps);
    case NormMode::kIbnSplit: {
      require_rank(x, 4, "normalize(ibn)");
      const Index c = x.dim(1);
      if (c % 2 != 0) {
        throw std::invalid_argument("normalize(ibn): channel count must be even, got shape " +
                                    shape_str(x.shape()));
      }
      const Index half = c / 2;
      Var<Scalar> in_part = instance_norm(slice(x, 1, 0, half), slice(gamma, 0, 0, half),
                                          slice(beta, 0, 0, half), options.eps);
      Var<Scalar> bn_part = batch_norm(slice(x, 1, half, half), slice(gamma, 0, half, half),
                                       slice(beta, 0, half, half), stats, options);
      return concat<Scalar>({in_part, bn_part}, 1);
    }
  }
  throw std::invalid_argument("normalize: unknown mode");
}

template <typename Scalar>
Var<Scalar> gap(Var<Scalar> x) {
  require_rank(x, 4, "gap");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out({n, c});
  out.vec() = x.value().matrix(n * c, hw).rowwise().mean();
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [=](Graph<Scalar>& g, int self) {
    const Scalar inv = Scalar(1) / static_cast<Scalar>(hw);
    g.grad_buffer(ix).matrix(n * c, hw).colwise() += g.grad(self).vec() * inv;
  });
}

template <typename Scalar>
Var<Scalar> global_max_pool(Var<Scalar> x) {
  require_rank(x, 4, "global_max_pool");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out({n, c});
  std::vector<Index> arg(static_cast<std::size_t>(n * c));
  const auto m = x.value().matrix(n * c, hw);
  for (Index r = 0; r < n * c; ++r) {
    Index j = 0;
    out[r] = m.row(r).maxCoeff(&j);
    arg[static_cast<std::size_t>(r)] = j;
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [=, arg = std::move(arg)](Graph<Scalar>& g, int self) {
    auto& dx = g.grad_buffer(ix);
    const auto& gy = g.grad(self);
    for (Index r = 0; r < n * c; ++r) dx[r * hw + arg[static_cast<std::size_t>(r)]] += gy[r];
  });
}

template <typename Scalar>
Var<Scalar> channel_pool(Var<Scalar> x) {
  require_rank(x, 4, "channel_pool");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<Scalar> out({n, 2, x.dim(2), x.dim(3)});
  std::vector<Index> arg(static_cast<std::size_t>(n * hw));
  const auto& xv = x.value();
  for (Index b = 0; b < n; ++b) {
    for (Index p = 0; p < hw; ++p) {
      Scalar s = 0;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      Index am = 0;
      for (Index ch = 0; ch < c; ++ch) {
        const Scalar v = xv[(b * c + ch) * hw + p];
        s += v;
        if (v > mx) {
          mx = v;
          am = ch;
        }
      }
      out[(b * 2) * hw + p] = s / static_cast<Scalar>(c);
      out[(b * 2 + 1) * hw + p] = mx;
      arg[static_cast<std::size_t>(b * hw + p)] = am;
    }
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [=, arg = std::move(arg)](Graph<Scalar>& g, int self) {
    auto& dx = g.grad_buffer(ix);
    const auto& gy = g.grad(self);
    const Scalar inv_c = Scalar(1) / static_cast<Scalar>(c);
    for (Index b = 0; b < n; ++b) {
      for (Index p = 0; p < hw; ++p) {
        const Scalar gm = gy[(b * 2) * hw + p] * inv_c;
        for (Index ch = 0; ch < c; ++ch) dx[(b * c + ch) * hw + p] += gm;
        dx[(b * c + arg[static_cast<std::size_t>(b * hw + p)]) * hw + p] += gy[(b * 2 + 1) * hw + p];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weight, Var<Scalar> bias) {
  same_graph(x, weight, "linear");
  require_rank(x, 2, "linear");
  if (weight.value().rank() != 2 || weight.dim(1) != x.dim(1)) {
    throw std::invalid_argument("linear: input shape " + shape_str(x.shape()) +
                                " incompatible with weight shape " + shape_str(weight.shape()));
  }
  const Index n = x.dim(0), out_dim = weight.dim(0);
  Tensor<Scalar> out({n, out_dim});
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  if (bias.valid()) {
    require_shape(bias.shape(), Shape{out_dim}, "linear bias");
    out.matrix().rowwise() += bias.value().vec().transpose();
  }
  const int ix = x.id(), iw = weight.id(), ib = bias.valid() ? bias.id() : -1;
  std::vector<int> inputs{ix, iw};
  if (ib >= 0) inputs.push_back(ib);
  return x.graph().record(std::move(out), inputs, [=](Graph<Scalar>& g, int self) {
    const auto gy = g.grad(self).matrix();
    if (g.requires_grad(ix)) g.grad_buffer(ix).matrix().noalias() += gy * g.value(iw).matrix();
    if (g.requires_grad(iw)) g.grad_buffer(iw).matrix().noalias() += gy.transpose() * g.value(ix).matrix();
    if (ib >= 0 && g.requires_grad(ib)) g.grad_buffer(ib).vec() += gy.colwise().sum().transpose();
  });
}

template <typename Scalar>
Var<Scalar> channel_gate(Var<Scalar> x, Var<Scalar> gate) {
  same_graph(x, gate, "channel_gate");
  require_rank(x, 4, "channel_gate");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require_shape(gate.shape(), Shape{n, c}, "channel_gate gate");
  Tensor<Scalar> out(x.shape());
  out.matrix(n * c, hw) = x.value().matrix(n * c, hw).array().colwise() * gate.value().vec().array();
  const int ix = x.id(), ig = gate.id();
  return x.graph().record(std::move(out), {ix, ig}, [=](Graph<Scalar>& g, int self) {
    const auto gy = g.grad(self).matrix(n * c, hw);
    if (g.requires_grad(ix)) {
      g.grad_buffer(ix).matrix(n * c, hw).array() += gy.array().colwise() * g.value(ig).vec().array();
    }
    if (g.requires_grad(ig)) {
      g.grad_buffer(ig).vec() += gy.cwiseProduct(g.value(ix).matrix(n * c, hw)).rowwise().sum();
    }
  });
}

template <typename Scalar>
Var<Scalar> spatial_gate(Var<Scalar> x, Var<Scalar> gate) {
  same_graph(x, gate, "spatial_gate");
  require_rank(x, 4, "spatial_gate");
  const Index n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  require_shape(gate.shape(), Shape{n, 1, x.dim(2), x.dim(3)}, "spatial_gate gate");
  Tensor<Scalar> out(x.shape());
  for (Index b = 0; b < n; ++b) {
    Eigen::Map<const Vec<Scalar>> s(gate.value().data() + b * hw, hw);
    out.matrix(n * c, hw).middleRows(b * c, c) =
        x.value().matrix(n * c, hw).middleRows(b * c, c).array().rowwise() * s.transpose().array();
  }
  const int ix = x.id(), ig = gate.id();
  return x.graph().record(std::move(out), {ix, ig}, [=](Graph<Scalar>& g, int self) {
    const auto gy = g.grad(self).matrix(n * c, hw);
    for (Index b = 0; b < n; ++b) {
      if (g.requires_grad(ix)) {
        Eigen::Map<const Vec<Scalar>> s(g.value(ig).data() + b * hw, hw);
        g.grad_buffer(ix).matrix(n * c, hw).middleRows(b * c, c).array() +=
            gy.middleRows(b * c, c).array().rowwise() * s.transpose().array();
      }
      if (g.requires_grad(ig)) {
        Eigen::Map<Vec<Scalar>> ds(g.grad_buffer(ig).data() + b * hw, hw);
        ds += gy.middleRows(b * c, c)
                  .cwiseProduct(g.value(ix).matrix(n * c, hw).middleRows(b * c, c))
                  .colwise()
                  .sum()
                  .transpose();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis < 0 || axis >= static_cast<int>(first.size())) throw std::invalid_argument("concat: bad axis");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  std::vector<Index> widths;
  for (const auto& p : parts) {
    Shape s = p.shape();
    Shape probe = first;
    if (s.size() != first.size()) {
      throw std::invalid_argument("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    }
    probe[static_cast<std::size_t>(axis)] = s[static_cast<std::size_t>(axis)];
    if (probe != s) {
      throw std::invalid_argument("concat: shape " + shape_str(s) + " incompatible with " + shape_str(first));
    }
    widths.push_back(s[static_cast<std::size_t>(axis)]);
    out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  const AxisSplit split = split_at(first, axis);
  const Index total = out_shape[static_cast<std::size_t>(axis)];
  Tensor<Scalar> out(out_shape);
  Index offset = 0;
  std::vector<int> ids;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Index block = widths[i] * split.inner;
    for (Index o = 0; o < split.outer; ++o) {
      std::copy_n(parts[i].value().data() + o * block, block,
                  out.data() + o * total * split.inner + offset * split.inner);
    }
    offset += widths[i];
    ids.push_back(parts[i].id());
  }
  return parts.front().graph().record(std::move(out), ids, [=](Graph<Scalar>& g, int self) {
    Index off = 0;
    const auto& gy = g.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Index block = widths[i] * split.inner;
      if (g.requires_grad(ids[i])) {
        auto& dx = g.grad_buffer(ids[i]);
        for (Index o = 0; o < split.outer; ++o) {
          Eigen::Map<Vec<Scalar>>(dx.data() + o * block, block) +=
              Eigen::Map<const Vec<Scalar>>(gy.data() + o * total * split.inner + off * split.inner, block);
        }
      }
      off += widths[i];
    }
  });
}

template <typename Scalar>
Var<Scalar> slice(Var<Scalar> x, int axis, Index begin, Index count) {
  const Shape& xs = x.shape();
  if (axis < 0 || axis >= static_cast<int>(xs.size()) || begin < 0 || count < 0 ||
      begin + count > xs[static_cast<std::size_t>(axis)]) {
    throw std::invalid_argument("slice: range out of bounds for shape " + shape_str(xs));
  }
  const AxisSplit split = split_at(xs, axis);
  const Index width = xs[static_cast<std::size_t>(axis)];
  Shape out_shape = xs;
  out_shape[static_cast<std::size_t>(axis)] = count;
  Tensor<Scalar> out(out_shape);
  const Index block = count * split.inner;
  for (Index o = 0; o < split.outer; ++o) {
    std::copy_n(x.value().data() + (o * width + begin) * split.inner, block, out.data() + o * block);
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [=](Graph<Scalar>& g, int self) {
    auto& dx = g.grad_buffer(ix);
    const auto& gy = g.grad(self);
    for (Index o = 0; o < split.outer; ++o) {
      Eigen::Map<Vec<Scalar>>(dx.data() + (o * width + begin) * split.inner, block) +=
          Eigen::Map<const Vec<Scalar>>(gy.data() + o * block, block);
    }
  });
}

template <typename Scalar>
Var<Scalar> l2norm(Var<Scalar> x) {
  require_rank(x, 2, "l2norm");
  const auto in = x.value().matrix();
  Tensor<Scalar> out(x.shape());
  Vec<Scalar> norms = in.rowwise().norm();
  norms = norms.cwiseMax(std::numeric_limits<Scalar>::min());
  out.matrix() = norms.cwiseInverse().asDiagonal() * in;
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [=](Graph<Scalar>& g, int self) {
    const auto y = g.value(self).matrix();
    const auto gy = g.grad(self).matrix();
    auto dx = g.grad_buffer(ix).matrix();
    for (Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = y.row(r).dot(gy.row(r));
      dx.row(r) += (gy.row(r) - dot * y.row(r)) / norms[r];
    }
  });
}

template <typename Scalar>
Var<Scalar> pairwise_sq_dist(Var<Scalar> x) {
  require_rank(x, 2, "pairwise_sq_dist");
  const auto in = x.value().matrix();
  const Index n = in.rows();
  const Vec<Scalar> sq = in.rowwise().squaredNorm();
  Tensor<Scalar> out({n, n});
  auto d = out.matrix();
  d.noalias() = Scalar(-2) * in * in.transpose();
  d.colwise() += sq;
  d.rowwise() += sq.transpose();
  d = d.cwiseMax(Scalar(0));
  d.diagonal().setZero();
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [=](Graph<Scalar>& g, int self) {
    const auto dv = g.value(self).matrix();
    RowMatrix<Scalar> s = g.grad(self).matrix();
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        if (i == j || dv(i, j) <= Scalar(0)) s(i, j) = 0;
      }
    }
    RowMatrix<Scalar> sym = s + s.transpose();
    const auto xv = g.value(ix).matrix();
    g.grad_buffer(ix).matrix().noalias() +=
        Scalar(2) * (sym.rowwise().sum().asDiagonal() * xv - sym * xv);
  });
}

template <typename Scalar>
Var<Scalar> gather(Var<Scalar> x, const std::vector<std::pair<Index, Index>>& cells) {
  require_rank(x, 2, "gather");
  const Index cols = x.dim(1);
  Tensor<Scalar> out({static_cast<Index>(cells.size())});
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto [r, c] = cells[i];
    if (r < 0 || r >= x.dim(0) || c < 0 || c >= cols) {
      throw std::invalid_argument("gather: cell out of bounds for shape " + shape_str(x.shape()));
    }
    out[static_cast<Index>(i)] = x.value().at(r, c);
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [=](Graph<Scalar>& g, int self) {
    auto& dx = g.grad_buffer(ix);
    const auto& gy = g.grad(self);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      dx[cells[i].first * cols + cells[i].second] += gy[static_cast<Index>(i)];
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x) {
  const int ix = x.id();
  return x.graph().record(Tensor<Scalar>::scalar(x.value().vec().sum()), {ix},
                          [ix](Graph<Scalar>& g, int self) {
                            g.grad_buffer(ix).vec().array() += g.grad(self)[0];
                          });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> x) {
  if (x.value().size() == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

template <typename Scalar>
Var<Scalar> masked_mean(Var<Scalar> x, const std::vector<bool>& mask) {
  if (static_cast<Index>(mask.size()) != x.value().size()) {
    throw std::invalid_argument("masked_mean: mask length does not match shape " + shape_str(x.shape()));
  }
  const auto count = std::count(mask.begin(), mask.end(), true);
  if (count == 0) return x.graph().constant(Tensor<Scalar>::scalar(0));
  Scalar s = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) s += x.value()[static_cast<Index>(i)];
  }
  const Scalar inv = Scalar(1) / static_cast<Scalar>(count);
  const int ix = x.id();
  return x.graph().record(Tensor<Scalar>::scalar(s * inv), {ix}, [=](Graph<Scalar>& g, int self) {
    auto& dx = g.grad_buffer(ix);
    const Scalar gy = g.grad(self)[0] * inv;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) dx[static_cast<Index>(i)] += gy;
    }
  });
}

template <typename Scalar>
Var<Scalar> cross_entropy(Var<Scalar> logits, const std::vector<int>& targets, Scalar epsilon) {
  require_rank(logits, 2, "cross_entropy");
  const Index n = logits.dim(0), m = logits.dim(1);
  if (static_cast<Index>(targets.size()) != n) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for logits of shape " + shape_str(logits.shape()));
  }
  for (int t : targets) {
    if (t < -1 || t >= m) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " out of range for " +
                                  std::to_string(m) + " classes");
    }
  }
  const Scalar q_other = epsilon / static_cast<Scalar>(m);
  const Scalar q_target = Scalar(1) - epsilon + q_other;
  const auto z = logits.value().matrix();
  RowMatrix<Scalar> probs(n, m);
  Tensor<Scalar> out({n});
  for (Index r = 0; r < n; ++r) {
    const Scalar mx = z.row(r).maxCoeff();
    const Scalar lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    probs.row(r) = (z.row(r).array() - lse).exp().matrix();
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0) continue;
    Scalar loss = 0;
    for (Index k = 0; k < m; ++k) loss -= (k == t ? q_target : q_other) * (z(r, k) - lse);
    out[r] = loss;
  }
  const int ix = logits.id();
  return logits.graph().record(
      std::move(out), {ix}, [=, probs = std::move(probs)](Graph<Scalar>& g, int self) {
        auto dx = g.grad_buffer(ix).matrix();
        const auto& gy = g.grad(self);
        for (Index r = 0; r < n; ++r) {
          const int t = targets[static_cast<std::size_t>(r)];
          if (t < 0) continue;
          for (Index k = 0; k < m; ++k) {
            dx(r, k) += gy[r] * (probs(r, k) - (k == t ? q_target : q_other));
          }
        }
      });
}

#define ANET_INSTANTIATE_OPS(S)                                                                 \
  template Var<S> detach(Var<S>);                                                               \
  template Var<S> add(Var<S>, Var<S>);                                                          \
  template Var<S> sub(Var<S>, Var<S>);                                                          \
  template Var<S> mul(Var<S>, Var<S>);                                                          \
  template Var<S> scale(Var<S>, S);                                                             \
  template Var<S> add_scalar(Var<S>, S);                                                        \
  template Var<S> sum_n(const std::vector<Var<S>>&);                                           \
  template Var<S> relu(Var<S>);                                                                 \
  template Var<S> sigmoid(Var<S>);                                                              \
  template Var<S> softplus(Var<S>);                                                             \
  template Var<S> softmax(Var<S>);                                                              \
  template Var<S> sqrt_floor(Var<S>, S);                                                        \
  template Var<S> conv2d(Var<S>, Var<S>, Var<S>, int, int);                                     \
  template Var<S> batch_norm(Var<S>, Var<S>, Var<S>, RunningStats<S>*, const NormOptions&);     \
  template Var<S> instance_norm(Var<S>, Var<S>, Var<S>, double);                                \
  template Var<S> normalize(Var<S>, NormMode, Var<S>, Var<S>, RunningStats<S>*, const NormOptions&); \
  template Var<S> gap(Var<S>);                                                                  \
  template Var<S> global_max_pool(Var<S>);                                                      \
  template Var<S> channel_pool(Var<S>);                                                         \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                               \
  template Var<S> channel_gate(Var<S>, Var<S>);                                                 \
  template Var<S> spatial_gate(Var<S>, Var<S>);                                                 \
  template Var<S> concat(const std::vector<Var<S>>&, int);                                      \
  template Var<S> slice(Var<S>, int, Index, Index);                                             \
  template Var<S> l2norm(Var<S>);                                                               \
  template Var<S> pairwise_sq_dist(Var<S>);                                                     \
  template Var<S> gather(Var<S>, const std::vector<std::pair<Index, Index>>&);                  \
  template Var<S> sum(Var<S>);                                                                  \
  template Var<S> mean(Var<S>);                                                                 \
  template Var<S> masked_mean(Var<S>, const std::vector<bool>&);                                \
  template Var<S> cross_entropy(Var<S>, const std::vector<int>&, S);

ANET_INSTANTIATE_OPS(float)
ANET_INSTANTIATE_OPS(double)

#undef ANET_INSTANTIATE_OPS

}  // namespace anet
