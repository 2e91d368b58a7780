#pragma once

// Differentiable primitives for the Conv-4 backbone and the few-shot losses.
// Every op records itself on the tape of its first argument and only computes
// input gradients for inputs that require them.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "prototransfer/errors.hpp"
#include "prototransfer/tape.hpp"
#include "prototransfer/tensor.hpp"

namespace prototransfer {

enum class Mode { Train, Eval };

/// Running mean/variance of one batchnorm layer.
template <class T>
struct BatchNormStats {
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}

  template <class U>
  BatchNormStats<U> cast() const {
    BatchNormStats<U> s;
    s.running_mean = running_mean.template cast<U>();
    s.running_var = running_var.template cast<U>();
    return s;
  }
};

struct BatchNormOptions {
  double eps = 1e-5;
  double momentum = 0.1;
  bool update_running_stats = true;
};

namespace ops {

namespace detail {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
void expect_rank(const Var<T>& v, std::size_t rank, const char* op, const char* what) {
  if (v.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got " + shape_string(v.shape()));
  }
}

template <class T>
void expect_axis(const char* op, const char* what, std::size_t axis, std::size_t got,
                 std::size_t want) {
  if (got != want) {
    throw ShapeError(std::string(op) + ": " + what + " axis " + std::to_string(axis) +
                     " is " + std::to_string(got) + ", expected " + std::to_string(want));
  }
}

template <class T>
void add_into(BasicTensor<T>& dst, const BasicTensor<T>& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

// col[(c*9 + ky*3 + kx), y*W + x] = in[c, y+ky-1, x+kx-1], zero outside.
template <class T>
void im2col3x3(const T* in, std::size_t C, std::size_t H, std::size_t W, T* col) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    const T* plane = in + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          T* dst = row + y * W;
          if (sy < 0 || sy >= static_cast<long>(H)) {
            std::fill(dst, dst + W, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * W;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            dst[x] = (sx < 0 || sx >= static_cast<long>(W)) ? T{0} : src[sx];
          }
        }
      }
    }
  }
}

template <class T>
void col2im3x3_add(const T* col, std::size_t C, std::size_t H, std::size_t W, T* out) {
  const std::size_t HW = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    T* plane = out + c * HW;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col + (c * 9 + static_cast<std::size_t>(ky * 3 + kx)) * HW;
        for (std::size_t y = 0; y < H; ++y) {
          const long sy = static_cast<long>(y) + ky - 1;
          if (sy < 0 || sy >= static_cast<long>(H)) continue;
          T* dst = plane + static_cast<std::size_t>(sy) * W;
          const T* src = row + y * W;
          for (std::size_t x = 0; x < W; ++x) {
            const long sx = static_cast<long>(x) + kx - 1;
            if (sx >= 0 && sx < static_cast<long>(W)) dst[sx] += src[x];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 3x3 cross-correlation, stride 1, zero padding 1, plus per-filter bias.
template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias) {
  detail::expect_rank(input, 4, "conv2d", "input");
  detail::expect_rank(kernel, 4, "conv2d", "kernel");
  detail::expect_rank(bias, 1, "conv2d", "bias");
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  const std::size_t B = is[0], C = is[1], H = is[2], W = is[3], F = ks[0];
  detail::expect_axis<T>("conv2d", "kernel", 1, ks[1], C);
  detail::expect_axis<T>("conv2d", "kernel", 2, ks[2], 3);
  detail::expect_axis<T>("conv2d", "kernel", 3, ks[3], 3);
  detail::expect_axis<T>("conv2d", "bias", 0, bias.shape()[0], F);

  using Mat = detail::MatRM<T>;
  const std::size_t HW = H * W, K = C * 9;
  BasicTensor<T> out(Shape{B, F, H, W});
  AlignedVector<T> col(K * HW);
  const auto& x = input.value();
  Eigen::Map<const Mat> wmat(kernel.value().raw(), F, K);
  const T* bptr = bias.value().raw();
  for (std::size_t b = 0; b < B; ++b) {
    detail::im2col3x3(x.raw() + b * C * HW, C, H, W, col.data());
    Eigen::Map<Mat> o(out.raw() + b * F * HW, F, HW);
    o.noalias() = wmat * Eigen::Map<const Mat>(col.data(), K, HW);
    for (std::size_t f = 0; f < F; ++f) o.row(f).array() += bptr[f];
  }

  Tape<T>& tape = *input.tape;
  const bool rg = input.requires_grad() || kernel.requires_grad() || bias.requires_grad();
  const std::size_t xi = input.id, ki = kernel.id, bi = bias.id;
  return tape.record(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    const auto& gout = t.grad(self);
    const auto& xv = t.value(xi);
    Eigen::Map<const Mat> wm(t.value(ki).raw(), F, K);
    AlignedVector<T> colbuf(K * HW), dcol;
    T* dx = t.requires_grad(xi) ? t.grad(xi).raw() : nullptr;
    T* dw = t.requires_grad(ki) ? t.grad(ki).raw() : nullptr;
    T* db = t.requires_grad(bi) ? t.grad(bi).raw() : nullptr;
    if (dx) dcol.resize(K * HW);
    for (std::size_t b = 0; b < B; ++b) {
      Eigen::Map<const Mat> g(gout.raw() + b * F * HW, F, HW);
      if (dw) {
        detail::im2col3x3(xv.raw() + b * C * HW, C, H, W, colbuf.data());
        Eigen::Map<Mat>(dw, F, K).noalias() +=
            g * Eigen::Map<const Mat>(colbuf.data(), K, HW).transpose();
      }
      if (db) {
        for (std::size_t f = 0; f < F; ++f) db[f] += g.row(f).sum();
      }
      if (dx) {
        Eigen::Map<Mat>(dcol.data(), K, HW).noalias() = wm.transpose() * g;
        detail::col2im3x3_add(dcol.data(), C, H, W, dx + b * C * HW);
      }
    }
  });
}

/// Per-channel batch normalization over (batch, height, width).
///
/// Train mode normalizes with the batch's population variance and, unless
/// disabled, blends the batch mean and unbiased variance into `stats`.
/// Eval mode normalizes with `stats` and leaves them untouched.
template <class T>
Var<T> batchnorm2d(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats,
                   Mode mode, BatchNormOptions opt = {}) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  detail::expect_rank(input, 4, "batchnorm2d", "input");
  const Shape& is = input.shape();
  const std::size_t B = is[0], C = is[1], HW = is[2] * is[3];
  detail::expect_axis<T>("batchnorm2d", "gamma", 0, gamma.shape().at(0), C);
  detail::expect_axis<T>("batchnorm2d", "beta", 0, beta.shape().at(0), C);
  detail::expect_axis<T>("batchnorm2d", "running_mean", 0, stats.running_mean.numel(), C);
  const std::size_t count = B * HW;
  if (mode == Mode::Train && count < 2) {
    throw DegenerateVarianceError(
        "batchnorm2d: train mode needs at least 2 values per channel, got batch " +
        std::to_string(B) + " x spatial " + std::to_string(HW));
  }

  const auto& x = input.value();
  const T* g = gamma.value().raw();
  const T* be = beta.value().raw();
  auto plane = [&](const BasicTensor<T>& t, std::size_t b, std::size_t c) {
    return Eigen::Map<const Arr>(t.raw() + (b * C + c) * HW, static_cast<Eigen::Index>(HW));
  };
  BasicTensor<T> out(is);
  std::vector<T> means(C), invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0, var = 0;
    if (mode == Mode::Train) {
      for (std::size_t b = 0; b < B; ++b) mean += static_cast<double>(plane(x, b, c).sum());
      mean /= static_cast<double>(count);
      const T mt = static_cast<T>(mean);
      for (std::size_t b = 0; b < B; ++b) {
        var += static_cast<double>((plane(x, b, c) - mt).square().sum());
      }
      const double unbiased = var / static_cast<double>(count - 1);
      var /= static_cast<double>(count);
      if (opt.update_running_stats) {
        const double m = opt.momentum;
        stats.running_mean[c] = static_cast<T>((1 - m) * stats.running_mean[c] + m * mean);
        stats.running_var[c] = static_cast<T>((1 - m) * stats.running_var[c] + m * unbiased);
      }
    } else {
      mean = stats.running_mean[c];
      var = stats.running_var[c];
    }
    means[c] = static_cast<T>(mean);
    invstd[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
    const T a = g[c] * invstd[c];
    for (std::size_t b = 0; b < B; ++b) {
      Eigen::Map<Arr>(out.raw() + (b * C + c) * HW, static_cast<Eigen::Index>(HW)) =
          (plane(x, b, c) - means[c]) * a + be[c];
    }
  }

  Tape<T>& tape = *input.tape;
  const bool rg = input.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  const std::size_t xi = input.id, gi = gamma.id, bi = beta.id;
  const bool train = mode == Mode::Train;
  return tape.record(std::move(out), rg, [=, means = std::move(means),
                                          invstd = std::move(invstd)](Tape<T>& t, std::size_t self) {
    const auto& gy = t.grad(self);
    const auto& xv = t.value(xi);
    const T* gam = t.value(gi).raw();
    T* dx = t.requires_grad(xi) ? t.grad(xi).raw() : nullptr;
    T* dg = t.requires_grad(gi) ? t.grad(gi).raw() : nullptr;
    T* db = t.requires_grad(bi) ? t.grad(bi).raw() : nullptr;
    const auto n = static_cast<Eigen::Index>(HW);
    for (std::size_t c = 0; c < C; ++c) {
      double sum_dy = 0, sum_dy_xh = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * C + c) * HW;
        Eigen::Map<const Arr> gp(gy.raw() + off, n);
        Eigen::Map<const Arr> xp(xv.raw() + off, n);
        sum_dy += static_cast<double>(gp.sum());
        sum_dy_xh += static_cast<double>((gp * (xp - means[c])).sum()) * invstd[c];
      }
      if (dg) dg[c] += static_cast<T>(sum_dy_xh);
      if (db) db[c] += static_cast<T>(sum_dy);
      if (!dx) continue;
      const T scale = gam[c] * invstd[c];
      const T mdy = static_cast<T>(sum_dy / static_cast<double>(count));
      const T mdyxh = static_cast<T>(sum_dy_xh / static_cast<double>(count));
      for (std::size_t b = 0; b < B; ++b) {
        const std::size_t off = (b * C + c) * HW;
        Eigen::Map<const Arr> gp(gy.raw() + off, n);
        Eigen::Map<Arr> dp(dx + off, n);
        if (train) {
          Eigen::Map<const Arr> xp(xv.raw() + off, n);
          dp += scale * (gp - mdy - (xp - means[c]) * (invstd[c] * mdyxh));
        } else {
          dp += scale * gp;
        }
      }
    }
  });
}

template <class T>
Var<T> relu(Var<T> input) {
  BasicTensor<T> out = input.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi](Tape<T>& t, std::size_t self) {
                              const auto& y = t.value(self);
                              const auto& gy = t.grad(self);
                              auto& dx = t.grad(xi);
                              for (std::size_t i = 0; i < y.numel(); ++i) {
                                if (y[i] > T{0}) dx[i] += gy[i];
                              }
                            });
}

/// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
template <class T>
Var<T> maxpool2x2(Var<T> input) {
  detail::expect_rank(input, 4, "maxpool2x2", "input");
  const Shape& is = input.shape();
  const std::size_t B = is[0], C = is[1], H = is[2], W = is[3];
  const std::size_t OH = H / 2, OW = W / 2;
  if (OH == 0 || OW == 0) {
    throw ShapeError("maxpool2x2: spatial extent " + std::to_string(H) + "x" +
                     std::to_string(W) + " floors to empty output along axis " +
                     (OH == 0 ? "2" : "3"));
  }
  const auto& x = input.value();
  BasicTensor<T> out(Shape{B, C, OH, OW});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t p = 0; p < B * C; ++p) {
    const T* plane = x.raw() + p * H * W;
    for (std::size_t oy = 0; oy < OH; ++oy) {
      for (std::size_t ox = 0; ox < OW; ++ox) {
        std::size_t best = (2 * oy) * W + 2 * ox;
        const std::size_t cand[3] = {best + 1, best + W, best + W + 1};
        for (std::size_t c : cand) {
          if (plane[c] > plane[best]) best = c;
        }
        const std::size_t o = p * OH * OW + oy * OW + ox;
        out[o] = plane[best];
        argmax[o] = p * H * W + best;
      }
    }
  }
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                              const auto& gy = t.grad(self);
                              auto& dx = t.grad(xi);
                              for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += gy[i];
                            });
}

/// [B, ...] -> [B, prod(...)].
template <class T>
Var<T> flatten(Var<T> input) {
  const Shape& is = input.shape();
  if (is.empty()) throw ShapeError("flatten: scalar input");
  const std::size_t B = is[0];
  BasicTensor<T> out = input.value().reshaped(Shape{B, input.value().numel() / B});
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi](Tape<T>& t, std::size_t self) {
                              detail::add_into(t.grad(xi), t.grad(self));
                            });
}

/// Same values under a new shape with equal element count.
template <class T>
Var<T> reshape(Var<T> input, Shape shape) {
  if (shape_numel(shape) != input.value().numel()) {
    throw ShapeError("reshape: cannot view " + shape_string(input.shape()) + " as " +
                     shape_string(shape));
  }
  BasicTensor<T> out = input.value().reshaped(std::move(shape));
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi](Tape<T>& t, std::size_t self) {
                              detail::add_into(t.grad(xi), t.grad(self));
                            });
}

/// input[M,K] * weight[N,K]^T + bias[N].
template <class T>
Var<T> linear(Var<T> input, Var<T> weight, Var<T> bias) {
  detail::expect_rank(input, 2, "linear", "input");
  detail::expect_rank(weight, 2, "linear", "weight");
  detail::expect_rank(bias, 1, "linear", "bias");
  const std::size_t M = input.shape()[0], K = input.shape()[1], N = weight.shape()[0];
  detail::expect_axis<T>("linear", "weight", 1, weight.shape()[1], K);
  detail::expect_axis<T>("linear", "bias", 0, bias.shape()[0], N);
  using Mat = detail::MatRM<T>;
  BasicTensor<T> out(Shape{M, N});
  Eigen::Map<Mat> o(out.raw(), M, N);
  o.noalias() = Eigen::Map<const Mat>(input.value().raw(), M, K) *
                Eigen::Map<const Mat>(weight.value().raw(), N, K).transpose();
  const T* b = bias.value().raw();
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) o(i, j) += b[j];
  }
  const bool rg = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
  const std::size_t xi = input.id, wi = weight.id, bi = bias.id;
  return input.tape->record(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    Eigen::Map<const Mat> g(t.grad(self).raw(), M, N);
    if (t.requires_grad(xi)) {
      Eigen::Map<Mat>(t.grad(xi).raw(), M, K).noalias() +=
          g * Eigen::Map<const Mat>(t.value(wi).raw(), N, K);
    }
    if (t.requires_grad(wi)) {
      Eigen::Map<Mat>(t.grad(wi).raw(), N, K).noalias() +=
          g.transpose() * Eigen::Map<const Mat>(t.value(xi).raw(), M, K);
    }
    if (t.requires_grad(bi)) {
      T* db = t.grad(bi).raw();
      for (std::size_t j = 0; j < N; ++j) db[j] += g.col(j).sum();
    }
  });
}

template <class T>
Var<T> sum(Var<T> input) {
  double s = 0;
  for (T v : input.value().data()) s += v;
  const std::size_t xi = input.id;
  return input.tape->record(BasicTensor<T>::scalar(static_cast<T>(s)), input.requires_grad(),
                            [xi](Tape<T>& t, std::size_t self) {
                              const T g = t.grad(self)[0];
                              for (auto& d : t.grad(xi).data()) d += g;
                            });
}

template <class T>
Var<T> mean(Var<T> input) {
  const double n = static_cast<double>(input.value().numel());
  double s = 0;
  for (T v : input.value().data()) s += v;
  const std::size_t xi = input.id;
  return input.tape->record(BasicTensor<T>::scalar(static_cast<T>(s / n)), input.requires_grad(),
                            [xi, n](Tape<T>& t, std::size_t self) {
                              const T g = static_cast<T>(t.grad(self)[0] / n);
                              for (auto& d : t.grad(xi).data()) d += g;
                            });
}

template <class T>
Var<T> square(Var<T> input) {
  BasicTensor<T> out = input.value();
  for (auto& v : out.data()) v *= v;
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi](Tape<T>& t, std::size_t self) {
                              const auto& x = t.value(xi);
                              const auto& gy = t.grad(self);
                              auto& dx = t.grad(xi);
                              for (std::size_t i = 0; i < x.numel(); ++i) dx[i] += 2 * x[i] * gy[i];
                            });
}

template <class T>
Var<T> scale(Var<T> input, T factor) {
  BasicTensor<T> out = input.value();
  for (auto& v : out.data()) v *= factor;
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi, factor](Tape<T>& t, std::size_t self) {
                              const auto& gy = t.grad(self);
                              auto& dx = t.grad(xi);
                              for (std::size_t i = 0; i < gy.numel(); ++i) dx[i] += factor * gy[i];
                            });
}

template <class T>
Var<T> add_scalar(Var<T> input, T offset) {
  BasicTensor<T> out = input.value();
  for (auto& v : out.data()) v += offset;
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi](Tape<T>& t, std::size_t self) {
                              detail::add_into(t.grad(xi), t.grad(self));
                            });
}

/// Rows [begin, begin+count) along axis 0.
template <class T>
Var<T> slice_rows(Var<T> input, std::size_t begin, std::size_t count) {
  const Shape& is = input.shape();
  if (is.empty() || begin + count > is[0] || count == 0) {
    throw ShapeError("slice_rows: rows [" + std::to_string(begin) + "," +
                     std::to_string(begin + count) + ") out of range for axis 0 of " +
                     shape_string(is));
  }
  const std::size_t row = input.value().numel() / is[0];
  Shape os = is;
  os[0] = count;
  const auto src = input.value().data().subspan(begin * row, count * row);
  BasicTensor<T> out(os, std::vector<T>(src.begin(), src.end()));
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi, begin, row](Tape<T>& t, std::size_t self) {
                              const auto& gy = t.grad(self);
                              T* dx = t.grad(xi).raw() + begin * row;
                              for (std::size_t i = 0; i < gy.numel(); ++i) dx[i] += gy[i];
                            });
}

/// out[i,j] = sum_d (a[i,d] - b[j,d])^2.
template <class T>
Var<T> pairwise_sq_dist(Var<T> a, Var<T> b) {
  detail::expect_rank(a, 2, "pairwise_sq_dist", "A");
  detail::expect_rank(b, 2, "pairwise_sq_dist", "B");
  const std::size_t M = a.shape()[0], N = b.shape()[0], D = a.shape()[1];
  detail::expect_axis<T>("pairwise_sq_dist", "B", 1, b.shape()[1], D);
  const T* av = a.value().raw();
  const T* bv = b.value().raw();
  BasicTensor<T> out(Shape{M, N});
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) {
      T s{0};
      for (std::size_t d = 0; d < D; ++d) {
        const T diff = av[i * D + d] - bv[j * D + d];
        s += diff * diff;
      }
      out[i * N + j] = s;
    }
  }
  const bool rg = a.requires_grad() || b.requires_grad();
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record(std::move(out), rg, [=](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const T* A = t.value(ai).raw();
    const T* Bm = t.value(bi).raw();
    T* da = t.requires_grad(ai) ? t.grad(ai).raw() : nullptr;
    T* db = t.requires_grad(bi) ? t.grad(bi).raw() : nullptr;
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) {
        const T gij = 2 * g[i * N + j];
        if (gij == T{0}) continue;
        for (std::size_t d = 0; d < D; ++d) {
          const T diff = gij * (A[i * D + d] - Bm[j * D + d]);
          if (da) da[i * D + d] += diff;
          if (db) db[j * D + d] -= diff;
        }
      }
    }
  });
}

/// Row-wise log-softmax computed as x - max - log(sum(exp(x - max))).
template <class T>
Var<T> log_softmax_rows(Var<T> input) {
  detail::expect_rank(input, 2, "log_softmax_rows", "input");
  const std::size_t M = input.shape()[0], N = input.shape()[1];
  BasicTensor<T> out = input.value();
  for (std::size_t i = 0; i < M; ++i) {
    T* r = out.raw() + i * N;
    const T mx = *std::max_element(r, r + N);
    double s = 0;
    for (std::size_t j = 0; j < N; ++j) s += std::exp(static_cast<double>(r[j] - mx));
    const T lse = static_cast<T>(std::log(s));
    for (std::size_t j = 0; j < N; ++j) r[j] = r[j] - mx - lse;
  }
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi, M, N](Tape<T>& t, std::size_t self) {
                              const auto& y = t.value(self);
                              const auto& gy = t.grad(self);
                              auto& dx = t.grad(xi);
                              for (std::size_t i = 0; i < M; ++i) {
                                double gs = 0;
                                for (std::size_t j = 0; j < N; ++j) gs += gy[i * N + j];
                                for (std::size_t j = 0; j < N; ++j) {
                                  const std::size_t k = i * N + j;
                                  dx[k] += static_cast<T>(gy[k] - std::exp(static_cast<double>(y[k])) * gs);
                                }
                              }
                            });
}

/// out[i] = -logp[i, targets[i]].
template <class T>
Var<T> nll_rows(Var<T> logp, std::vector<std::size_t> targets) {
  detail::expect_rank(logp, 2, "nll_rows", "logp");
  const std::size_t M = logp.shape()[0], N = logp.shape()[1];
  detail::expect_axis<T>("nll_rows", "targets", 0, targets.size(), M);
  BasicTensor<T> out(Shape{M});
  for (std::size_t i = 0; i < M; ++i) {
    if (targets[i] >= N) {
      throw ContractError("nll_rows: target " + std::to_string(targets[i]) +
                          " out of range for " + std::to_string(N) + " classes");
    }
    out[i] = -logp.value()[i * N + targets[i]];
  }
  const std::size_t xi = logp.id;
  return logp.tape->record(std::move(out), logp.requires_grad(),
                           [xi, N, targets = std::move(targets)](Tape<T>& t, std::size_t self) {
                             const auto& gy = t.grad(self);
                             auto& dx = t.grad(xi);
                             for (std::size_t i = 0; i < targets.size(); ++i) {
                               dx[i * N + targets[i]] -= gy[i];
                             }
                           });
}

/// Per-class mean of rows: out[n] = mean{ x[i] : labels[i] == n }.
template <class T>
Var<T> class_means(Var<T> input, const std::vector<std::size_t>& labels, std::size_t n_classes) {
  detail::expect_rank(input, 2, "class_means", "input");
  const std::size_t M = input.shape()[0], D = input.shape()[1];
  detail::expect_axis<T>("class_means", "labels", 0, labels.size(), M);
  std::vector<std::size_t> counts(n_classes, 0);
  for (std::size_t l : labels) {
    if (l >= n_classes) throw ContractError("class_means: label out of range");
    ++counts[l];
  }
  for (std::size_t n = 0; n < n_classes; ++n) {
    if (counts[n] == 0) throw ContractError("class_means: class " + std::to_string(n) + " is empty");
  }
  BasicTensor<T> out(Shape{n_classes, D});
  const T* x = input.value().raw();
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t d = 0; d < D; ++d) out[labels[i] * D + d] += x[i * D + d];
  }
  for (std::size_t n = 0; n < n_classes; ++n) {
    for (std::size_t d = 0; d < D; ++d) out[n * D + d] /= static_cast<T>(counts[n]);
  }
  const std::size_t xi = input.id;
  return input.tape->record(std::move(out), input.requires_grad(),
                            [xi, D, labels, counts](Tape<T>& t, std::size_t self) {
                              const auto& gy = t.grad(self);
                              auto& dx = t.grad(xi);
                              for (std::size_t i = 0; i < labels.size(); ++i) {
                                const T inv = T{1} / static_cast<T>(counts[labels[i]]);
                                for (std::size_t d = 0; d < D; ++d) {
                                  dx[i * D + d] += gy[labels[i] * D + d] * inv;
                                }
                              }
                            });
}

/// Softmax cross-entropy of row logits against integer targets.
template <class T>
struct CrossEntropy {
  Var<T> loss;      // scalar mean
  Var<T> per_row;   // [M]
};

template <class T>
CrossEntropy<T> cross_entropy(Var<T> logits, std::vector<std::size_t> targets) {
  auto per_row = nll_rows(log_softmax_rows(logits), std::move(targets));
  return {mean(per_row), per_row};
}

}  // namespace ops
}  // namespace prototransfer
