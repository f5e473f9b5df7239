#include "dsem/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "dsem/parallel.hpp"

namespace dsem {

namespace {

template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMapT = Eigen::Map<const MatT<T>>;

template <typename T>
using NodeT = detail::Node<T>;

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b,
                        const char* op) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

template <typename T>
void accumulate(NodeT<T>& parent, const std::vector<double>& g) {
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += static_cast<T>(g[i]);
}

}  // namespace

int conv_out_size(int in, int kernel, int stride, int padding, int dilation) {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int padding,
                      int dilation) {
  const Shape xs = input.shape();
  const Shape ws = weight.shape();
  if (stride < 1 || dilation < 1 || padding < 0) {
    throw std::invalid_argument(
        "conv2d: stride and dilation must be >= 1 and padding >= 0 (got "
        "stride " + std::to_string(stride) + ", dilation " +
        std::to_string(dilation) + ", padding " + std::to_string(padding) +
        ")");
  }
  if (ws.h != ws.w || ws.c != xs.c) {
    throw ShapeError("conv2d: input " + xs.str() + " incompatible with weight " +
                     ws.str());
  }
  if (bias.defined() && !(bias.shape() == Shape{1, ws.n, 1, 1})) {
    throw ShapeError("conv2d: bias " + bias.shape().str() +
                     " does not match weight " + ws.str());
  }
  const int k = ws.h;
  const int n_img = xs.n, cin = xs.c, h = xs.h, w = xs.w, cout = ws.n;
  const int ho = conv_out_size(h, k, stride, padding, dilation);
  const int wo = conv_out_size(w, k, stride, padding, dilation);
  if (ho < 1 || wo < 1) {
    throw ShapeError("conv2d: input " + xs.str() + " too small for weight " +
                     ws.str());
  }
  const std::size_t kdim = static_cast<std::size_t>(cin) * k * k;
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  const std::size_t cols = plane * n_img;

  auto col = std::make_shared<std::vector<T>>(kdim * cols, T(0));
  const T* xd = input.data().data();
  parallel_for(n_img, [&](int n) {
    for (int ci = 0; ci < cin; ++ci) {
      const T* xplane = xd + (static_cast<std::size_t>(n) * cin + ci) * h * w;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const std::size_t row = (static_cast<std::size_t>(ci) * k + ky) * k + kx;
          T* dst = col->data() + row * cols + n * plane;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - padding + ky * dilation;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - padding + kx * dilation;
              if (ix >= 0 && ix < w) dst[oy * wo + ox] = xplane[iy * w + ix];
            }
          }
        }
      }
    }
  });

  auto wmat = std::make_shared<std::vector<T>>(weight.data().begin(), weight.data().end());
  MatT<T> out(cout, cols);
  out.noalias() = CMapT<T>(wmat->data(), cout, kdim) * CMapT<T>(col->data(), kdim, cols);

  std::vector<T> result(static_cast<std::size_t>(n_img) * cout * plane);
  const T* bd = bias.defined() ? bias.data().data() : nullptr;
  for (int n = 0; n < n_img; ++n) {
    for (int co = 0; co < cout; ++co) {
      const double b = bd ? static_cast<double>(bd[co]) : 0.0;
      T* dst = result.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
      const T* src = out.data() + co * cols + n * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = static_cast<T>(src[p] + b);
    }
  }

  std::vector<std::shared_ptr<NodeT<T>>> parents{input.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  const bool has_bias = bias.defined();

  return make_result<T>(
      Shape{n_img, cout, ho, wo}, std::move(result), std::move(parents),
      [=](NodeT<T>& self) {
        MatT<T> g(cout, cols);
        for (int n = 0; n < n_img; ++n) {
          for (int co = 0; co < cout; ++co) {
            const T* src =
                self.grad.data() + (static_cast<std::size_t>(n) * cout + co) * plane;
            T* dst = g.data() + co * cols + n * plane;
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p];
          }
        }
        NodeT<T>& xin = *self.parents[0];
        NodeT<T>& wn = *self.parents[1];
        if (wn.requires_grad) {
          MatT<T> dw(cout, kdim);
          dw.noalias() = g * CMapT<T>(col->data(), kdim, cols).transpose();
          auto& wg = wn.ensure_grad();
          for (std::size_t i = 0; i < wg.size(); ++i)
            wg[i] += dw.data()[i];
        }
        if (has_bias && self.parents[2]->requires_grad) {
          auto& bg = self.parents[2]->ensure_grad();
          for (int co = 0; co < cout; ++co) {
            double s = 0.0;
            const T* row = g.data() + co * cols;
            for (std::size_t j = 0; j < cols; ++j) s += row[j];
            bg[co] += static_cast<T>(s);
          }
        }
        if (xin.requires_grad) {
          MatT<T> dcol(kdim, cols);
          dcol.noalias() = CMapT<T>(wmat->data(), cout, kdim).transpose() * g;
          std::vector<double> dx(static_cast<std::size_t>(n_img) * cin * h * w,
                                 0.0);
          parallel_for(n_img, [&](int n) {
            for (int ci = 0; ci < cin; ++ci) {
              double* xplane = dx.data() + (static_cast<std::size_t>(n) * cin + ci) * h * w;
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  const std::size_t row =
                      (static_cast<std::size_t>(ci) * k + ky) * k + kx;
                  const T* src = dcol.data() + row * cols + n * plane;
                  for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - padding + ky * dilation;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                      const int ix = ox * stride - padding + kx * dilation;
                      if (ix >= 0 && ix < w) xplane[iy * w + ix] += src[oy * wo + ox];
                    }
                  }
                }
              }
            }
          });
          accumulate(xin, dx);
        }
      });
}

// ---------------------------------------------------------------------------
// gradient reversal

template <typename T>
BasicTensor<T> grl(const BasicTensor<T>& input, double coeff) {
  if (!(coeff >= 0.0)) {
    throw std::invalid_argument("grl: coefficient must be >= 0, got " +
                                std::to_string(coeff));
  }
  const T factor = static_cast<T>(-coeff);
  std::vector<T> out(input.data().begin(), input.data().end());
  return make_result<T>(input.shape(), std::move(out), {input.node()},
                        [factor](NodeT<T>& self) {
                          auto& pg = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < pg.size(); ++i)
                            pg[i] += factor * self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// pooling / resampling

template <typename T>
BasicTensor<T> adaptive_avg_pool(const BasicTensor<T>& input, int bins) {
  const Shape s = input.shape();
  if (bins < 1 || bins > std::min(s.h, s.w)) {
    throw std::invalid_argument("adaptive_avg_pool: " + std::to_string(bins) +
                                " bins do not fit spatial size " +
                                std::to_string(s.h) + "x" + std::to_string(s.w));
  }
  // Partition edges: start = floor(i*H/bins), end = floor((i+1)*H/bins).
  auto edges = [bins](int extent) {
    std::vector<int> e(bins + 1);
    for (int i = 0; i <= bins; ++i) e[i] = (i * extent) / bins;
    return e;
  };
  const std::vector<int> ey = edges(s.h), ex = edges(s.w);
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  std::vector<T> out(planes * bins * bins);
  const T* xd = input.data().data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = xd + pl * s.h * s.w;
    for (int by = 0; by < bins; ++by) {
      for (int bx = 0; bx < bins; ++bx) {
        double acc = 0.0;
        for (int y = ey[by]; y < ey[by + 1]; ++y)
          for (int x = ex[bx]; x < ex[bx + 1]; ++x) acc += src[y * s.w + x];
        const double count =
            static_cast<double>(ey[by + 1] - ey[by]) * (ex[bx + 1] - ex[bx]);
        out[(pl * bins + by) * bins + bx] = static_cast<T>(acc / count);
      }
    }
  }
  return make_result<T>(
      Shape{s.n, s.c, bins, bins}, std::move(out), {input.node()},
      [=](NodeT<T>& self) {
        auto& pg = self.parents[0]->ensure_grad();
        for (std::size_t pl = 0; pl < planes; ++pl) {
          for (int by = 0; by < bins; ++by) {
            for (int bx = 0; bx < bins; ++bx) {
              const double count =
                  static_cast<double>(ey[by + 1] - ey[by]) * (ex[bx + 1] - ex[bx]);
              const T g = static_cast<T>(
                  static_cast<double>(self.grad[(pl * bins + by) * bins + bx]) /
                  count);
              for (int y = ey[by]; y < ey[by + 1]; ++y)
                for (int x = ex[bx]; x < ex[bx + 1]; ++x)
                  pg[pl * s.h * s.w + y * s.w + x] += g;
            }
          }
        }
      });
}

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& input, int out_h,
                                int out_w) {
  const Shape s = input.shape();
  if (out_h < s.h || out_w < s.w) {
    throw std::invalid_argument("upsample_nearest: target " +
                                std::to_string(out_h) + "x" +
                                std::to_string(out_w) + " smaller than input " +
                                s.str());
  }
  std::vector<int> sy(out_h), sx(out_w);
  for (int y = 0; y < out_h; ++y) sy[y] = (y * s.h) / out_h;
  for (int x = 0; x < out_w; ++x) sx[x] = (x * s.w) / out_w;
  const std::size_t planes = static_cast<std::size_t>(s.n) * s.c;
  std::vector<T> out(planes * out_h * out_w);
  const T* xd = input.data().data();
  for (std::size_t pl = 0; pl < planes; ++pl)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        out[(pl * out_h + y) * out_w + x] = xd[pl * s.h * s.w + sy[y] * s.w + sx[x]];
  return make_result<T>(
      Shape{s.n, s.c, out_h, out_w}, std::move(out), {input.node()},
      [=](NodeT<T>& self) {
        std::vector<double> acc(planes * s.h * s.w, 0.0);
        for (std::size_t pl = 0; pl < planes; ++pl)
          for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x)
              acc[pl * s.h * s.w + sy[y] * s.w + sx[x]] +=
                  self.grad[(pl * out_h + y) * out_w + x];
        accumulate(*self.parents[0], acc);
      });
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
BasicTensor<T> elementwise_mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "elementwise_mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                        [](NodeT<T>& self) {
                          NodeT<T>& pa = *self.parents[0];
                          NodeT<T>& pb = *self.parents[1];
                          if (pa.requires_grad) {
                            auto& ga = pa.ensure_grad();
                            for (std::size_t i = 0; i < ga.size(); ++i)
                              ga[i] += self.grad[i] * pb.data[i];
                          }
                          if (pb.requires_grad) {
                            auto& gb = pb.ensure_grad();
                            for (std::size_t i = 0; i < gb.size(); ++i)
                              gb[i] += self.grad[i] * pa.data[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.shape(), std::move(out), {a.node(), b.node()},
                        [](NodeT<T>& self) {
                          for (int k = 0; k < 2; ++k) {
                            NodeT<T>& p = *self.parents[k];
                            if (!p.requires_grad) continue;
                            auto& g = p.ensure_grad();
                            for (std::size_t i = 0; i < g.size(); ++i)
                              g[i] += self.grad[i];
                          }
                        });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * f;
  return make_result<T>(x.shape(), std::move(out), {x.node()},
                        [f](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += self.grad[i] * f;
                        });
}

// ---------------------------------------------------------------------------
// layout

namespace {

// axis 1 (channels) or 2 (rows).
template <typename T>
BasicTensor<T> concat_axis(std::span<const BasicTensor<T>> inputs, int axis,
                           const char* op) {
  if (inputs.empty()) throw std::invalid_argument(std::string(op) + ": no inputs");
  const Shape first = inputs[0].shape();
  int total = 0;
  for (const auto& t : inputs) {
    const Shape s = t.shape();
    const bool ok = axis == 1 ? (s.n == first.n && s.h == first.h && s.w == first.w)
                              : (s.n == first.n && s.c == first.c && s.w == first.w);
    if (!ok) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + first.str() +
                       " and " + s.str());
    }
    total += axis == 1 ? s.c : s.h;
  }
  Shape out_shape = first;
  (axis == 1 ? out_shape.c : out_shape.h) = total;
  // Each input contributes a contiguous block of `chunk` values per outer index.
  const std::size_t outer = axis == 1 ? first.n : static_cast<std::size_t>(first.n) * first.c;
  std::vector<std::size_t> chunk(inputs.size()), offset(inputs.size());
  std::size_t row = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Shape s = inputs[i].shape();
    chunk[i] = axis == 1 ? static_cast<std::size_t>(s.c) * s.h * s.w
                         : static_cast<std::size_t>(s.h) * s.w;
    offset[i] = row;
    row += chunk[i];
  }
  std::vector<T> out(out_shape.numel());
  std::vector<std::shared_ptr<NodeT<T>>> parents;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const T* src = inputs[i].data().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(src + o * chunk[i], chunk[i], out.data() + o * row + offset[i]);
    parents.push_back(inputs[i].node());
  }
  return make_result<T>(out_shape, std::move(out), std::move(parents),
                        [=](NodeT<T>& self) {
                          for (std::size_t i = 0; i < self.parents.size(); ++i) {
                            NodeT<T>& p = *self.parents[i];
                            if (!p.requires_grad) continue;
                            auto& g = p.ensure_grad();
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t j = 0; j < chunk[i]; ++j)
                                g[o * chunk[i] + j] +=
                                    self.grad[o * row + offset[i] + j];
                          }
                        });
}

}  // namespace

template <typename T>
BasicTensor<T> concat_channels(std::span<const BasicTensor<T>> inputs) {
  return concat_axis(inputs, 1, "concat_channels");
}

template <typename T>
BasicTensor<T> concat_rows(std::span<const BasicTensor<T>> inputs) {
  return concat_axis(inputs, 2, "concat_rows");
}

template <typename T>
BasicTensor<T> anchor_major(const BasicTensor<T>& head, int anchors_per_cell) {
  const Shape s = head.shape();
  if (anchors_per_cell < 1 || s.c % anchors_per_cell != 0) {
    throw ShapeError("anchor_major: " + std::to_string(s.c) +
                     " channels not divisible by " +
                     std::to_string(anchors_per_cell) + " anchors");
  }
  const int a_count = anchors_per_cell;
  const int d = s.c / a_count;
  const int cells = s.h * s.w;
  const int rows = cells * a_count;
  // out index (n, dd, r) <- in index (n, a*d + dd, cell) with r = cell*A + a.
  std::vector<std::size_t> src_of(static_cast<std::size_t>(s.n) * d * rows);
  for (int n = 0; n < s.n; ++n)
    for (int dd = 0; dd < d; ++dd)
      for (int cell = 0; cell < cells; ++cell)
        for (int a = 0; a < a_count; ++a)
          src_of[(static_cast<std::size_t>(n) * d + dd) * rows + cell * a_count + a] =
              (static_cast<std::size_t>(n) * s.c + a * d + dd) * cells + cell;
  std::vector<T> out(src_of.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = head.data()[src_of[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(std::move(src_of));
  return make_result<T>(Shape{s.n, d, rows, 1}, std::move(out), {head.node()},
                        [map](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < map->size(); ++i)
                            g[(*map)[i]] += self.grad[i];
                        });
}

// ---------------------------------------------------------------------------
// activations

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  return make_result<T>(x.shape(), std::move(out), {x.node()},
                        [](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i)
                            if (self.data[i] > T(0)) g[i] += self.grad[i];
                        });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  // Kept strictly inside (0, 1) even where T saturates.
  const T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon() / T(2);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = 1.0 / (1.0 + std::exp(-static_cast<double>(x.data()[i])));
    out[i] = std::clamp(static_cast<T>(v), lo, hi);
  }
  return make_result<T>(x.shape(), std::move(out), {x.node()},
                        [](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T s = self.data[i];
                            g[i] += self.grad[i] * s * (T(1) - s);
                          }
                        });
}

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& x) {
  const Shape s = x.shape();
  const std::size_t sp = s.spatial();
  std::vector<T> out(x.numel());
  std::vector<double> e(s.c);
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * sp;
    for (std::size_t p = 0; p < sp; ++p) {
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) m = std::max(m, double(x.data()[base + c * sp + p]));
      double z = 0.0;
      for (int c = 0; c < s.c; ++c) {
        e[c] = std::exp(double(x.data()[base + c * sp + p]) - m);
        z += e[c];
      }
      for (int c = 0; c < s.c; ++c) out[base + c * sp + p] = static_cast<T>(e[c] / z);
    }
  }
  return make_result<T>(s, std::move(out), {x.node()}, [s, sp](NodeT<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (int n = 0; n < s.n; ++n) {
      const std::size_t base = static_cast<std::size_t>(n) * s.c * sp;
      for (std::size_t p = 0; p < sp; ++p) {
        double dot = 0.0;
        for (int c = 0; c < s.c; ++c)
          dot += double(self.grad[base + c * sp + p]) * self.data[base + c * sp + p];
        for (int c = 0; c < s.c; ++c) {
          const std::size_t i = base + c * sp + p;
          g[i] += static_cast<T>(double(self.data[i]) * (double(self.grad[i]) - dot));
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// reductions and losses

template <typename T>
BasicTensor<T> sum_all(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return make_result<T>(Shape{1, 1, 1, 1}, {static_cast<T>(acc)}, {x.node()},
                        [](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (auto& v : g) v += self.grad[0];
                        });
}

template <typename T>
BasicTensor<T> mean_all(const BasicTensor<T>& x) {
  if (x.numel() == 0) throw ShapeError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits,
                                     std::span<const int> targets,
                                     std::span<const T> weights,
                                     double normalizer) {
  const Shape s = logits.shape();
  const std::size_t sp = s.spatial();
  const std::size_t locs = static_cast<std::size_t>(s.n) * sp;
  if (targets.size() != locs || (!weights.empty() && weights.size() != locs)) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                     " targets for logits " + s.str());
  }
  if (!(normalizer > 0.0)) {
    throw std::invalid_argument("softmax_cross_entropy: normalizer must be > 0");
  }
  auto dlogits = std::make_shared<std::vector<double>>(logits.numel(), 0.0);
  std::vector<double> e(s.c);
  double loss = 0.0;
  for (std::size_t l = 0; l < locs; ++l) {
    const int t = targets[l];
    if (t < 0 || t >= s.c) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(t) +
                              " outside [0, " + std::to_string(s.c) + ")");
    }
    const double wgt = weights.empty() ? 1.0 : static_cast<double>(weights[l]);
    if (wgt == 0.0) continue;
    const std::size_t n = l / sp, p = l % sp;
    const std::size_t base = n * s.c * sp + p;
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < s.c; ++c) m = std::max(m, double(logits.data()[base + c * sp]));
    double z = 0.0;
    for (int c = 0; c < s.c; ++c) {
      e[c] = std::exp(double(logits.data()[base + c * sp]) - m);
      z += e[c];
    }
    const double pt = e[t] / z;
    const double clamped = std::clamp(pt, kLogEpsilon, 1.0 - kLogEpsilon);
    loss += wgt * -std::log(clamped);
    if (pt > kLogEpsilon && pt < 1.0 - kLogEpsilon) {
      for (int c = 0; c < s.c; ++c)
        (*dlogits)[base + c * sp] =
            wgt * (e[c] / z - (c == t ? 1.0 : 0.0)) / normalizer;
    }
  }
  return make_result<T>(Shape{1, 1, 1, 1}, {static_cast<T>(loss / normalizer)},
                        {logits.node()}, [dlogits](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          const double up = self.grad[0];
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += static_cast<T>(up * (*dlogits)[i]);
                        });
}

template <typename T>
BasicTensor<T> binary_cross_entropy_with_logits(const BasicTensor<T>& logits, double label) {
  if (label < 0.0 || label > 1.0) {
    throw std::out_of_range("binary_cross_entropy_with_logits: label " + std::to_string(label) +
                            " outside [0, 1]");
  }
  const std::size_t m = logits.numel();
  if (m == 0) throw ShapeError("binary_cross_entropy_with_logits: empty input");
  auto dz = std::make_shared<std::vector<double>>(m);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double z = logits.data()[i];
    const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    loss += softplus - label * z;
    const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    (*dz)[i] = (p - label) / double(m);
  }
  return make_result<T>(Shape{1, 1, 1, 1}, {static_cast<T>(loss / double(m))},
                        {logits.node()}, [dz](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          const double up = self.grad[0];
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += static_cast<T>(up * (*dz)[i]);
                        });
}

template <typename T>
BasicTensor<T> binary_cross_entropy(const BasicTensor<T>& prob, double label) {
  if (label < 0.0 || label > 1.0) {
    throw std::out_of_range("binary_cross_entropy: label " + std::to_string(label) +
                            " outside [0, 1]");
  }
  const std::size_t m = prob.numel();
  if (m == 0) throw ShapeError("binary_cross_entropy: empty input");
  auto dprob = std::make_shared<std::vector<double>>(m, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double p = prob.data()[i];
    const double pc = std::clamp(p, kLogEpsilon, 1.0 - kLogEpsilon);
    loss += -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
    if (p > kLogEpsilon && p < 1.0 - kLogEpsilon)
      (*dprob)[i] = -(label / pc - (1.0 - label) / (1.0 - pc)) / double(m);
  }
  return make_result<T>(Shape{1, 1, 1, 1}, {static_cast<T>(loss / double(m))},
                        {prob.node()}, [dprob](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          const double up = self.grad[0];
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += static_cast<T>(up * (*dprob)[i]);
                        });
}

template <typename T>
BasicTensor<T> smooth_l1(const BasicTensor<T>& pred, std::span<const T> target,
                         std::span<const unsigned char> mask,
                         double normalizer) {
  const Shape s = pred.shape();
  const std::size_t sp = s.spatial();
  if (target.size() != pred.numel() ||
      mask.size() != static_cast<std::size_t>(s.n) * sp) {
    throw ShapeError("smooth_l1: target/mask sizes do not match " + s.str());
  }
  if (!(normalizer > 0.0)) {
    throw std::invalid_argument("smooth_l1: normalizer must be > 0");
  }
  auto dpred = std::make_shared<std::vector<double>>(pred.numel(), 0.0);
  double loss = 0.0;
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t p = 0; p < sp; ++p) {
      if (!mask[n * sp + p]) continue;
      for (int c = 0; c < s.c; ++c) {
        const std::size_t i = (static_cast<std::size_t>(n) * s.c + c) * sp + p;
        const double x = double(pred.data()[i]) - double(target[i]);
        const double ax = std::abs(x);
        loss += ax < 1.0 ? 0.5 * x * x : ax - 0.5;
        (*dpred)[i] = (ax < 1.0 ? x : (x > 0 ? 1.0 : -1.0)) / normalizer;
      }
    }
  }
  return make_result<T>(Shape{1, 1, 1, 1}, {static_cast<T>(loss / normalizer)},
                        {pred.node()}, [dpred](NodeT<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          const double up = self.grad[0];
                          for (std::size_t i = 0; i < g.size(); ++i)
                            g[i] += static_cast<T>(up * (*dpred)[i]);
                        });
}

#define DSEM_INSTANTIATE_OPS(T)                                                \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, \
                                 const BasicTensor<T>&, int, int, int);        \
  template BasicTensor<T> grl(const BasicTensor<T>&, double);                  \
  template BasicTensor<T> adaptive_avg_pool(const BasicTensor<T>&, int);       \
  template BasicTensor<T> upsample_nearest(const BasicTensor<T>&, int, int);   \
  template BasicTensor<T> elementwise_mul(const BasicTensor<T>&,               \
                                          const BasicTensor<T>&);              \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                \
  template BasicTensor<T> concat_channels(std::span<const BasicTensor<T>>);    \
  template BasicTensor<T> concat_rows(std::span<const BasicTensor<T>>);        \
  template BasicTensor<T> anchor_major(const BasicTensor<T>&, int);            \
  template BasicTensor<T> relu(const BasicTensor<T>&);                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                      \
  template BasicTensor<T> softmax_channels(const BasicTensor<T>&);             \
  template BasicTensor<T> sum_all(const BasicTensor<T>&);                      \
  template BasicTensor<T> mean_all(const BasicTensor<T>&);                     \
  template BasicTensor<T> softmax_cross_entropy(                               \
      const BasicTensor<T>&, std::span<const int>, std::span<const T>, double); \
  template BasicTensor<T> binary_cross_entropy(const BasicTensor<T>&, double); \
  template BasicTensor<T> binary_cross_entropy_with_logits(const BasicTensor<T>&, double); \
  template BasicTensor<T> smooth_l1(const BasicTensor<T>&, std::span<const T>, \
                                    std::span<const unsigned char>, double);

DSEM_INSTANTIATE_OPS(float)
DSEM_INSTANTIATE_OPS(double)
#undef DSEM_INSTANTIATE_OPS

}  // namespace dsem
