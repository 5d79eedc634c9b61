#include "mcd/grad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <type_traits>

#include "mcd/error.hpp"
#include "mcd/grad/kernels.hpp"

namespace mcd::grad {

namespace {

template <typename Real>
void require_same_graph(const DiffTensor<Real>& a, const DiffTensor<Real>& b, const char* op) {
  if (!a.valid() || !b.valid()) throw GraphError(std::string(op) + ": invalid tensor handle");
  if (&a.graph() != &b.graph()) {
    throw GraphError(std::string(op) + ": operands belong to different graphs");
  }
}

template <typename Real>
void check_divisor(Real d) {
  if constexpr (std::is_same_v<Real, double>) {
    if (d == 0.0) throw NumericError("div: division by exact zero");
  }
}

template <typename Real>
Real apply_binary(Binary op, Real x, Real y) {
  switch (op) {
    case Binary::Add: return x + y;
    case Binary::Sub: return x - y;
    case Binary::Mul: return x * y;
    case Binary::Div: return x / y;
  }
  return Real(0);
}

OpKind binary_kind(Binary op) {
  switch (op) {
    case Binary::Add: return OpKind::Add;
    case Binary::Sub: return OpKind::Sub;
    case Binary::Mul: return OpKind::Mul;
    case Binary::Div: return OpKind::Div;
  }
  return OpKind::Add;
}

OpKind unary_kind(Unary op) {
  switch (op) {
    case Unary::Neg: return OpKind::Neg;
    case Unary::Abs: return OpKind::Abs;
    case Unary::Charbonnier: return OpKind::Charbonnier;
    case Unary::Exp: return OpKind::Exp;
    case Unary::Log: return OpKind::Log;
    case Unary::Relu: return OpKind::Relu;
    case Unary::Clamp01: return OpKind::Clamp01;
  }
  return OpKind::Neg;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

enum class StencilKind { D1X, D1Y, D2X, D2Y, Avg4 };

template <typename Real>
Real stencil_at(StencilKind kind, std::span<const Real> plane, long h, long w, long y, long x) {
  using kernel::clamp_index;
  auto at = [&](long yy, long xx) {
    return plane[static_cast<std::size_t>(clamp_index(yy, h) * w + clamp_index(xx, w))];
  };
  switch (kind) {
    case StencilKind::D1X: return kernel::central_diff(at(y, x + 1), at(y, x - 1));
    case StencilKind::D1Y: return kernel::central_diff(at(y + 1, x), at(y - 1, x));
    case StencilKind::D2X: return kernel::second_diff(at(y, x + 1), at(y, x), at(y, x - 1));
    case StencilKind::D2Y: return kernel::second_diff(at(y + 1, x), at(y, x), at(y - 1, x));
    case StencilKind::Avg4:
      return kernel::avg4(at(y, x - 1), at(y, x + 1), at(y - 1, x), at(y + 1, x));
  }
  return Real(0);
}

template <typename Real>
DiffTensor<Real> stencil(const DiffTensor<Real>& a, StencilKind kind) {
  const Shape& shape = a.shape();
  if (shape.size() < 2) throw PreconditionError("stencil: tensor needs >= 2 dims");
  const long h = static_cast<long>(shape[shape.size() - 2]);
  const long w = static_cast<long>(shape[shape.size() - 1]);
  if (kind != StencilKind::Avg4 && (h < 3 || w < 3)) {
    throw PreconditionError("spatial_derivative: spatial dims must be >= 3, got " +
                            shape_string(shape));
  }
  if (h < 1 || w < 1) throw PreconditionError("neighbor_average: empty spatial dims");
  const std::size_t planes = numel(shape) / static_cast<std::size_t>(h * w);
  const NodeId in = a.id();
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto v = g.value(in);
    for (std::size_t p = 0; p < planes; ++p) {
      auto plane = v.subspan(p * h * w, h * w);
      Real* o = out.data() + p * h * w;
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) o[y * w + x] = stencil_at<Real>(kind, plane, h, w, y, x);
    }
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    using kernel::clamp_index;
    auto gin = g.adjoint(in);
    for (std::size_t p = 0; p < planes; ++p) {
      Real* gi = gin.data() + p * h * w;
      const Real* go = gout.data() + p * h * w;
      auto add = [&](long yy, long xx, Real v) {
        gi[clamp_index(yy, h) * w + clamp_index(xx, w)] += v;
      };
      for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
          const Real d = go[y * w + x];
          switch (kind) {
            case StencilKind::D1X:
              add(y, x + 1, d * Real(0.5));
              add(y, x - 1, -d * Real(0.5));
              break;
            case StencilKind::D1Y:
              add(y + 1, x, d * Real(0.5));
              add(y - 1, x, -d * Real(0.5));
              break;
            case StencilKind::D2X:
              add(y, x + 1, d);
              add(y, x - 1, d);
              add(y, x, Real(-2) * d);
              break;
            case StencilKind::D2Y:
              add(y + 1, x, d);
              add(y - 1, x, d);
              add(y, x, Real(-2) * d);
              break;
            case StencilKind::Avg4: {
              const Real q = d * Real(0.25);
              add(y, x - 1, q);
              add(y, x + 1, q);
              add(y - 1, x, q);
              add(y + 1, x, q);
              break;
            }
          }
        }
      }
    }
  };
  return a.graph().record(OpKind::Stencil, {in}, shape, forward, backward);
}

// out[i] = in[map[i]] style gathers shared by permute, slice and concat.
template <typename Real>
DiffTensor<Real> gather(const DiffTensor<Real>& a, OpKind kind, Shape out_shape,
                        std::vector<std::size_t> source) {
  const NodeId in = a.id();
  auto src = std::make_shared<const std::vector<std::size_t>>(std::move(source));
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto v = g.value(in);
    const auto& s = *src;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[s[i]];
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto gin = g.adjoint(in);
    const auto& s = *src;
    for (std::size_t i = 0; i < gout.size(); ++i) gin[s[i]] += gout[i];
  };
  return a.graph().record(kind, {in}, std::move(out_shape), forward, backward);
}

}  // namespace

template <typename Real>
DiffTensor<Real> elementwise(Binary op, const DiffTensor<Real>& a, const DiffTensor<Real>& b) {
  require_same_graph(a, b, "elementwise");
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  Shape out_shape;
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
  } else if (nb == 1) {
    out_shape = a.shape();
  } else if (na == 1) {
    out_shape = b.shape();
  } else {
    throw PreconditionError("elementwise: shape mismatch " + shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
  }
  const std::size_t n = numel(out_shape);
  const std::size_t sa = na == 1 && n != 1 ? 0 : 1;
  const std::size_t sb = nb == 1 && n != 1 ? 0 : 1;
  const NodeId ia = a.id();
  const NodeId ib = b.id();
  if (op == Binary::Div) {
    for (auto d : b.value()) check_divisor(d);
  }
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto va = g.value(ia);
    auto vb = g.value(ib);
    for (std::size_t i = 0; i < n; ++i) out[i] = apply_binary(op, va[i * sa], vb[i * sb]);
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto va = g.value(ia);
    auto vb = g.value(ib);
    if (g.requires_grad(ia)) {
      auto ga = g.adjoint(ia);
      for (std::size_t i = 0; i < n; ++i) {
        Real d = gout[i];
        switch (op) {
          case Binary::Add:
          case Binary::Sub: break;
          case Binary::Mul: d = d * vb[i * sb]; break;
          case Binary::Div: d = d / vb[i * sb]; break;
        }
        ga[i * sa] += d;
      }
    }
    if (g.requires_grad(ib)) {
      auto gb = g.adjoint(ib);
      for (std::size_t i = 0; i < n; ++i) {
        Real d = gout[i];
        switch (op) {
          case Binary::Add: break;
          case Binary::Sub: d = -d; break;
          case Binary::Mul: d = d * va[i * sa]; break;
          case Binary::Div: {
            const Real y = vb[i * sb];
            d = -d * va[i * sa] / (y * y);
            break;
          }
        }
        gb[i * sb] += d;
      }
    }
  };
  return a.graph().record(binary_kind(op), {ia, ib}, out_shape, forward, backward);
}

template <typename Real>
DiffTensor<Real> elementwise(Binary op, const DiffTensor<Real>& a, Real b) {
  if (!a.valid()) throw GraphError("elementwise: invalid tensor handle");
  if (op == Binary::Div) check_divisor(b);
  const NodeId ia = a.id();
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto va = g.value(ia);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_binary(op, va[i], b);
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto ga = g.adjoint(ia);
    for (std::size_t i = 0; i < gout.size(); ++i) {
      switch (op) {
        case Binary::Add:
        case Binary::Sub: ga[i] += gout[i]; break;
        case Binary::Mul: ga[i] += gout[i] * b; break;
        case Binary::Div: ga[i] += gout[i] / b; break;
      }
    }
  };
  return a.graph().record(binary_kind(op), {ia}, a.shape(), forward, backward);
}

template <typename Real>
DiffTensor<Real> elementwise(Unary op, const DiffTensor<Real>& a, Real kappa) {
  if (!a.valid()) throw GraphError("elementwise: invalid tensor handle");
  if (op == Unary::Charbonnier && !(kappa > Real(0))) {
    throw PreconditionError("charbonnier-abs: kappa must be > 0");
  }
  const NodeId ia = a.id();
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto va = g.value(ia);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const Real x = va[i];
      switch (op) {
        case Unary::Neg: out[i] = -x; break;
        case Unary::Abs: out[i] = std::abs(x); break;
        case Unary::Charbonnier: {
          // Algebraically sqrt(x^2 + k^2) - k; this form is exactly 0 at 0
          // and never negative.
          const Real sq = x * x;
          out[i] = sq / (std::sqrt(sq + kappa * kappa) + kappa);
          break;
        }
        case Unary::Exp: out[i] = std::exp(x); break;
        case Unary::Log: out[i] = std::log(x); break;
        case Unary::Relu: out[i] = x > Real(0) ? x : Real(0); break;
        case Unary::Clamp01: out[i] = std::clamp(x, Real(0), Real(1)); break;
      }
    }
  };
  const NodeId out_id = a.graph().size();  // id the output node will receive
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto va = g.value(ia);
    auto vo = g.value(out_id);
    auto ga = g.adjoint(ia);
    for (std::size_t i = 0; i < gout.size(); ++i) {
      const Real x = va[i];
      Real d = Real(0);
      switch (op) {
        case Unary::Neg: d = -gout[i]; break;
        case Unary::Abs: d = x > Real(0) ? gout[i] : (x < Real(0) ? -gout[i] : Real(0)); break;
        case Unary::Charbonnier: d = gout[i] * x / (vo[i] + kappa); break;
        case Unary::Exp: d = gout[i] * vo[i]; break;
        case Unary::Log: d = gout[i] / x; break;
        case Unary::Relu: d = x > Real(0) ? gout[i] : Real(0); break;
        case Unary::Clamp01: d = (x >= Real(0) && x <= Real(1)) ? gout[i] : Real(0); break;
      }
      ga[i] += d;
    }
  };
  return a.graph().record(unary_kind(op), {ia}, a.shape(), forward, backward);
}

template <typename Real>
DiffTensor<Real> reduce(Reduce op, const DiffTensor<Real>& a, std::vector<std::size_t> axes) {
  if (!a.valid()) throw GraphError("reduce: invalid tensor handle");
  const Shape& shape = a.shape();
  if (axes.empty()) {
    axes.resize(shape.size());
    std::iota(axes.begin(), axes.end(), 0);
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(shape.size(), false);
  std::size_t count = 1;
  for (auto ax : axes) {
    if (ax >= shape.size()) {
      throw PreconditionError("reduce: axis " + std::to_string(ax) + " out of range for " +
                              shape_string(shape));
    }
    if (shape[ax] == 0) throw PreconditionError("reduce: empty reduction axis");
    reduced[ax] = true;
    count *= shape[ax];
  }
  if (numel(shape) == 0) throw PreconditionError("reduce: empty tensor");
  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (!reduced[i]) out_shape.push_back(shape[i]);

  // Output index of every input element.
  const auto out_strides_full = [&] {
    std::vector<std::size_t> s(shape.size(), 0);
    std::size_t stride = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
      if (reduced[i]) continue;
      s[i] = stride;
      stride *= shape[i];
    }
    return s;
  }();
  // Odometer walk over the input keeps the output offset incrementally.
  auto map = std::make_shared<std::vector<std::size_t>>(numel(shape));
  {
    std::vector<std::size_t> idx(shape.size(), 0);
    std::size_t o = 0;
    for (std::size_t flat = 0; flat < map->size(); ++flat) {
      (*map)[flat] = o;
      for (std::size_t d = shape.size(); d-- > 0;) {
        if (++idx[d] < shape[d]) {
          o += out_strides_full[d];
          break;
        }
        o -= (shape[d] - 1) * out_strides_full[d];
        idx[d] = 0;
      }
    }
  }
  const Real scale = op == Reduce::Mean ? Real(1) / static_cast<Real>(count) : Real(1);
  const NodeId ia = a.id();
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto va = g.value(ia);
    std::fill(out.begin(), out.end(), Real(0));
    const auto& m = *map;
    for (std::size_t i = 0; i < va.size(); ++i) out[m[i]] += va[i];
    if (op == Reduce::Mean)
      for (auto& o : out) o = o / static_cast<Real>(count);
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto ga = g.adjoint(ia);
    const auto& m = *map;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gout[m[i]] * scale;
  };
  return a.graph().record(op == Reduce::Sum ? OpKind::Sum : OpKind::Mean, {ia}, out_shape,
                          forward, backward);
}

template <typename Real>
DiffTensor<Real> conv2d(const DiffTensor<Real>& input, const DiffTensor<Real>& kernel,
                        const std::optional<DiffTensor<Real>>& bias, Conv2dParams params) {
  require_same_graph(input, kernel, "conv2d");
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  if (is.size() != 3 && is.size() != 4) {
    throw PreconditionError("conv2d: input must be [Cin,H,W] or [N,Cin,H,W], got " +
                            shape_string(is));
  }
  if (ks.size() != 4) throw PreconditionError("conv2d: kernel must be [Cout,Cin,kh,kw]");
  const bool batched = is.size() == 4;
  const std::size_t n = batched ? is[0] : 1;
  const std::size_t cin = is[batched ? 1 : 0];
  const long h = static_cast<long>(is[batched ? 2 : 1]);
  const long w = static_cast<long>(is[batched ? 3 : 2]);
  const std::size_t cout = ks[0];
  const long kh = static_cast<long>(ks[2]);
  const long kw = static_cast<long>(ks[3]);
  const long stride = static_cast<long>(params.stride);
  const long pad = static_cast<long>(params.padding);
  if (ks[1] != cin) throw PreconditionError("conv2d: kernel Cin does not match input");
  if (kh % 2 == 0 || kw % 2 == 0) throw PreconditionError("conv2d: kernel dims must be odd");
  if (stride < 1) throw PreconditionError("conv2d: stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw PreconditionError("conv2d: kernel larger than padded input");
  }
  if (bias) {
    require_same_graph(input, *bias, "conv2d");
    if (bias->shape() != Shape{cout}) throw PreconditionError("conv2d: bias must be [Cout]");
  }
  const long oh = (h + 2 * pad - kh) / stride + 1;
  const long ow = (w + 2 * pad - kw) / stride + 1;
  Shape out_shape = batched ? Shape{n, cout, static_cast<std::size_t>(oh),
                                    static_cast<std::size_t>(ow)}
                            : Shape{cout, static_cast<std::size_t>(oh),
                                    static_cast<std::size_t>(ow)};
  const NodeId ii = input.id();
  const NodeId ik = kernel.id();
  const bool has_bias = bias.has_value();
  const NodeId ib = has_bias ? bias->id() : 0;
  std::vector<NodeId> inputs{ii, ik};
  if (has_bias) inputs.push_back(ib);

  // Column buffer [cin*kh*kw][oh*ow] of one batch item; taps that fall in
  // the zero padding hold 0.
  const std::size_t taps = cin * static_cast<std::size_t>(kh * kw);
  const std::size_t pix = static_cast<std::size_t>(oh * ow);
  auto im2col = [=](const Real* src, Real* col) {
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (long ky = 0; ky < kh; ++ky)
        for (long kx = 0; kx < kw; ++kx) {
          Real* dst = col + ((ci * kh + ky) * kw + kx) * pix;
          for (long oy = 0; oy < oh; ++oy) {
            const long iy = oy * stride + ky - pad;
            for (long ox = 0; ox < ow; ++ox) {
              const long ix = ox * stride + kx - pad;
              dst[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                      ? src[(ci * h + iy) * w + ix]
                                      : Real(0);
            }
          }
        }
  };

  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto vi = g.value(ii);
    auto vk = g.value(ik);
    std::vector<Real> col(taps * pix);
    for (std::size_t b = 0; b < n; ++b) {
      im2col(vi.data() + b * cin * h * w, col.data());
      for (std::size_t co = 0; co < cout; ++co) {
        Real* o = out.data() + (b * cout + co) * pix;
        const Real b0 = has_bias ? g.value(ib)[co] : Real(0);
        std::fill(o, o + pix, b0);
        for (std::size_t k = 0; k < taps; ++k) {
          const Real wt = vk[co * taps + k];
          const Real* c = col.data() + k * pix;
          for (std::size_t i = 0; i < pix; ++i) o[i] += wt * c[i];
        }
      }
    }
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto vi = g.value(ii);
    auto vk = g.value(ik);
    const bool gi_on = g.requires_grad(ii);
    const bool gk_on = g.requires_grad(ik);
    std::span<Real> gi = gi_on ? g.adjoint(ii) : std::span<Real>{};
    std::span<Real> gk = gk_on ? g.adjoint(ik) : std::span<Real>{};
    if (has_bias && g.requires_grad(ib)) {
      auto gb = g.adjoint(ib);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
          const Real* go = gout.data() + (b * cout + co) * pix;
          Real acc = 0;
          for (std::size_t i = 0; i < pix; ++i) acc += go[i];
          gb[co] += acc;
        }
    }
    std::vector<Real> col(gk_on ? taps * pix : 0);
    std::vector<Real> gcol(gi_on ? taps * pix : 0);
    for (std::size_t b = 0; b < n; ++b) {
      if (gk_on) {
        im2col(vi.data() + b * cin * h * w, col.data());
        for (std::size_t co = 0; co < cout; ++co) {
          const Real* go = gout.data() + (b * cout + co) * pix;
          for (std::size_t k = 0; k < taps; ++k) {
            const Real* c = col.data() + k * pix;
            // Eight interleaved partial sums break the serial add chain.
            Real acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            std::size_t i = 0;
            for (; i + 8 <= pix; i += 8)
              for (std::size_t j = 0; j < 8; ++j) acc[j] += go[i + j] * c[i + j];
            for (; i < pix; ++i) acc[0] += go[i] * c[i];
            gk[co * taps + k] += ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
                                 ((acc[4] + acc[5]) + (acc[6] + acc[7]));
          }
        }
      }
      if (gi_on) {
        std::fill(gcol.begin(), gcol.end(), Real(0));
        for (std::size_t co = 0; co < cout; ++co) {
          const Real* go = gout.data() + (b * cout + co) * pix;
          for (std::size_t k = 0; k < taps; ++k) {
            const Real wt = vk[co * taps + k];
            Real* gc = gcol.data() + k * pix;
            for (std::size_t i = 0; i < pix; ++i) gc[i] += wt * go[i];
          }
        }
        Real* gsrc = gi.data() + b * cin * h * w;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (long ky = 0; ky < kh; ++ky)
            for (long kx = 0; kx < kw; ++kx) {
              const Real* gc = gcol.data() + ((ci * kh + ky) * kw + kx) * pix;
              for (long oy = 0; oy < oh; ++oy) {
                const long iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                for (long ox = 0; ox < ow; ++ox) {
                  const long ix = ox * stride + kx - pad;
                  if (ix >= 0 && ix < w) gsrc[(ci * h + iy) * w + ix] += gc[oy * ow + ox];
                }
              }
            }
      }
    }
  };
  return input.graph().record(OpKind::Conv2d, std::move(inputs), out_shape, forward, backward);
}

template <typename Real>
DiffTensor<Real> bilinear_sample(const DiffTensor<Real>& image, const DiffTensor<Real>& coords) {
  require_same_graph(image, coords, "bilinear_sample");
  const Shape& is = image.shape();
  const Shape& cs = coords.shape();
  const bool batched = is.size() == 4;
  if (!((is.size() == 3 && cs.size() == 3) || (is.size() == 4 && cs.size() == 4)) ||
      cs.back() != 2 || (batched && is[0] != cs[0])) {
    throw PreconditionError("bilinear_sample: expected image [B?,C,H,W] and coords [B?,Ho,Wo,2], got " +
                            shape_string(is) + " and " + shape_string(cs));
  }
  const std::size_t nb = batched ? is[0] : 1;
  const std::size_t c = is[batched ? 1 : 0];
  const long h = static_cast<long>(is[batched ? 2 : 1]);
  const long w = static_cast<long>(is[batched ? 3 : 2]);
  const std::size_t oh = cs[batched ? 1 : 0];
  const std::size_t ow = cs[batched ? 2 : 1];
  if (h < 1 || w < 1) throw PreconditionError("bilinear_sample: empty image");
  Shape out_shape = batched ? Shape{nb, c, oh, ow} : Shape{c, oh, ow};
  const NodeId ii = image.id();
  const NodeId ic = coords.id();

  struct Tap {
    long x0, x1, y0, y1;
    Real ax, ay;
    bool x_free, y_free;  // coordinate not clamped: derivative passes through
  };
  auto tap = [h, w](Real x, Real y) {
    Tap t{};
    const Real xmax = static_cast<Real>(w - 1);
    const Real ymax = static_cast<Real>(h - 1);
    t.x_free = x >= Real(0) && x <= xmax;
    t.y_free = y >= Real(0) && y <= ymax;
    const Real xc = std::clamp(x, Real(0), xmax);
    const Real yc = std::clamp(y, Real(0), ymax);
    t.x0 = std::min(static_cast<long>(std::floor(xc)), std::max(w - 2, 0L));
    t.y0 = std::min(static_cast<long>(std::floor(yc)), std::max(h - 2, 0L));
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.ax = xc - static_cast<Real>(t.x0);
    t.ay = yc - static_cast<Real>(t.y0);
    return t;
  };

  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto vi = g.value(ii);
    auto vc = g.value(ic);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t p = 0; p < oh * ow; ++p) {
        const Real* cp = vc.data() + (b * oh * ow + p) * 2;
        const Tap t = tap(cp[0], cp[1]);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const Real* img = vi.data() + (b * c + ch) * h * w;
          const Real v00 = img[t.y0 * w + t.x0];
          const Real v01 = img[t.y0 * w + t.x1];
          const Real v10 = img[t.y1 * w + t.x0];
          const Real v11 = img[t.y1 * w + t.x1];
          const Real top = (Real(1) - t.ax) * v00 + t.ax * v01;
          const Real bot = (Real(1) - t.ax) * v10 + t.ax * v11;
          out[(b * c + ch) * oh * ow + p] = (Real(1) - t.ay) * top + t.ay * bot;
        }
      }
    }
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto vi = g.value(ii);
    auto vc = g.value(ic);
    const bool gi_on = g.requires_grad(ii);
    const bool gc_on = g.requires_grad(ic);
    std::span<Real> gi = gi_on ? g.adjoint(ii) : std::span<Real>{};
    std::span<Real> gc = gc_on ? g.adjoint(ic) : std::span<Real>{};
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t p = 0; p < oh * ow; ++p) {
        const Real* cp = vc.data() + (b * oh * ow + p) * 2;
        const Tap t = tap(cp[0], cp[1]);
        Real dx = 0, dy = 0;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const Real d = gout[(b * c + ch) * oh * ow + p];
          if (d == Real(0)) continue;
          if (gi_on) {
            Real* gimg = gi.data() + (b * c + ch) * h * w;
            gimg[t.y0 * w + t.x0] += d * (Real(1) - t.ax) * (Real(1) - t.ay);
            gimg[t.y0 * w + t.x1] += d * t.ax * (Real(1) - t.ay);
            gimg[t.y1 * w + t.x0] += d * (Real(1) - t.ax) * t.ay;
            gimg[t.y1 * w + t.x1] += d * t.ax * t.ay;
          }
          if (gc_on) {
            const Real* img = vi.data() + (b * c + ch) * h * w;
            const Real v00 = img[t.y0 * w + t.x0];
            const Real v01 = img[t.y0 * w + t.x1];
            const Real v10 = img[t.y1 * w + t.x0];
            const Real v11 = img[t.y1 * w + t.x1];
            dx += d * ((Real(1) - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
            dy += d * ((Real(1) - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
          }
        }
        if (gc_on) {
          Real* gcp = gc.data() + (b * oh * ow + p) * 2;
          if (t.x_free) gcp[0] += dx;
          if (t.y_free) gcp[1] += dy;
        }
      }
    }
  };
  return image.graph().record(OpKind::BilinearSample, {ii, ic}, out_shape, forward, backward);
}

template <typename Real>
DiffTensor<Real> spatial_derivative(const DiffTensor<Real>& a, int order, Axis axis) {
  if (order != 1 && order != 2) throw PreconditionError("spatial_derivative: order must be 1 or 2");
  StencilKind kind;
  if (order == 1) {
    kind = axis == Axis::X ? StencilKind::D1X : StencilKind::D1Y;
  } else {
    kind = axis == Axis::X ? StencilKind::D2X : StencilKind::D2Y;
  }
  return stencil(a, kind);
}

template <typename Real>
DiffTensor<Real> neighbor_average(const DiffTensor<Real>& a) {
  return stencil(a, StencilKind::Avg4);
}

template <typename Real>
DiffTensor<Real> reshape(const DiffTensor<Real>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw PreconditionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  const NodeId ia = a.id();
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto v = g.value(ia);
    std::copy(v.begin(), v.end(), out.begin());
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto ga = g.adjoint(ia);
    for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
  };
  return a.graph().record(OpKind::Reshape, {ia}, std::move(shape), forward, backward);
}

template <typename Real>
DiffTensor<Real> permute(const DiffTensor<Real>& a, const std::vector<std::size_t>& order) {
  const Shape& shape = a.shape();
  if (order.size() != shape.size()) throw PreconditionError("permute: rank mismatch");
  std::vector<bool> seen(order.size(), false);
  for (auto o : order) {
    if (o >= order.size() || seen[o]) throw PreconditionError("permute: invalid axis order");
    seen[o] = true;
  }
  Shape out_shape(shape.size());
  for (std::size_t i = 0; i < order.size(); ++i) out_shape[i] = shape[order[i]];
  const auto in_strides = strides_of(shape);
  const auto out_strides = strides_of(out_shape);
  std::vector<std::size_t> source(numel(shape));
  for (std::size_t j = 0; j < source.size(); ++j) {
    std::size_t rem = j;
    std::size_t src = 0;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      const std::size_t idx = rem / out_strides[d];
      rem %= out_strides[d];
      src += idx * in_strides[order[d]];
    }
    source[j] = src;
  }
  return gather(a, OpKind::Permute, std::move(out_shape), std::move(source));
}

template <typename Real>
DiffTensor<Real> slice(const DiffTensor<Real>& a, std::size_t axis, std::size_t begin,
                       std::size_t end) {
  const Shape& shape = a.shape();
  if (axis >= shape.size() || begin > end || end > shape[axis]) {
    throw PreconditionError("slice: invalid range on " + shape_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  Shape out_shape = shape;
  out_shape[axis] = end - begin;
  std::vector<std::size_t> source;
  source.reserve(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = begin; k < end; ++k)
      for (std::size_t i = 0; i < inner; ++i) source.push_back((o * shape[axis] + k) * inner + i);
  return gather(a, OpKind::Slice, std::move(out_shape), std::move(source));
}

template <typename Real>
DiffTensor<Real> concat(std::span<const DiffTensor<Real>> parts, std::size_t axis) {
  if (parts.empty()) throw PreconditionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw PreconditionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<NodeId> ids;
  for (const auto& p : parts) {
    require_same_graph(parts[0], p, "concat");
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw PreconditionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) throw PreconditionError("concat: shape mismatch");
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::vector<std::size_t> extents;
  for (const auto& p : parts) extents.push_back(p.shape()[axis]);
  const std::size_t total = out_shape[axis];
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto v = g.value(ids[k]);
      const std::size_t e = extents[k];
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(v.data() + o * e * inner, e * inner,
                    out.data() + (o * total + offset) * inner);
      offset += e;
    }
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t e = extents[k];
      if (g.requires_grad(ids[k])) {
        auto ga = g.adjoint(ids[k]);
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < e * inner; ++i)
            ga[o * e * inner + i] += gout[(o * total + offset) * inner + i];
      }
      offset += e;
    }
  };
  return parts[0].graph().record(OpKind::Concat, ids, out_shape, forward, backward);
}

template <typename Real>
DiffTensor<Real> expand_trailing(const DiffTensor<Real>& a, const Shape& trailing) {
  const std::size_t inner = numel(trailing);
  if (inner == 0) throw PreconditionError("expand_trailing: empty trailing dims");
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.end(), trailing.begin(), trailing.end());
  const NodeId ia = a.id();
  auto forward = [=](const Graph<Real>& g, std::span<Real> out) {
    auto v = g.value(ia);
    for (std::size_t i = 0; i < v.size(); ++i) std::fill_n(out.data() + i * inner, inner, v[i]);
  };
  auto backward = [=](Graph<Real>& g, std::span<const Real> gout) {
    auto ga = g.adjoint(ia);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      Real acc = 0;
      for (std::size_t j = 0; j < inner; ++j) acc += gout[i * inner + j];
      ga[i] += acc;
    }
  };
  return a.graph().record(OpKind::Expand, {ia}, std::move(out_shape), forward, backward);
}

#define MCD_INSTANTIATE_OPS(Real)                                                              \
  template DiffTensor<Real> elementwise(Binary, const DiffTensor<Real>&,                       \
                                        const DiffTensor<Real>&);                              \
  template DiffTensor<Real> elementwise(Binary, const DiffTensor<Real>&, Real);                \
  template DiffTensor<Real> elementwise(Unary, const DiffTensor<Real>&, Real);                 \
  template DiffTensor<Real> reduce(Reduce, const DiffTensor<Real>&, std::vector<std::size_t>); \
  template DiffTensor<Real> conv2d(const DiffTensor<Real>&, const DiffTensor<Real>&,           \
                                   const std::optional<DiffTensor<Real>>&, Conv2dParams);      \
  template DiffTensor<Real> bilinear_sample(const DiffTensor<Real>&, const DiffTensor<Real>&); \
  template DiffTensor<Real> spatial_derivative(const DiffTensor<Real>&, int, Axis);            \
  template DiffTensor<Real> neighbor_average(const DiffTensor<Real>&);                         \
  template DiffTensor<Real> reshape(const DiffTensor<Real>&, Shape);                           \
  template DiffTensor<Real> permute(const DiffTensor<Real>&, const std::vector<std::size_t>&); \
  template DiffTensor<Real> slice(const DiffTensor<Real>&, std::size_t, std::size_t,           \
                                  std::size_t);                                                \
  template DiffTensor<Real> concat(std::span<const DiffTensor<Real>>, std::size_t);            \
  template DiffTensor<Real> expand_trailing(const DiffTensor<Real>&, const Shape&);

MCD_INSTANTIATE_OPS(float)
MCD_INSTANTIATE_OPS(double)

}  // namespace mcd::grad
