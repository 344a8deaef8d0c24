#include "mode/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mode/error.hpp"

namespace mode {

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0.0);
  }
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Node n;
  n.external_value = &p.value;
  if (record_ && p.trainable) {
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor(p.value.shape());
    n.external_grad = &p.grad;
    n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external_value ? *n.external_value : n.value;
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.external_grad) return *n.external_grad;
  if (n.grad.shape() != value(id).shape()) n.grad = Tensor(value(id).shape());
  return n.grad;
}

Var Tape::push(Tensor value, std::span<const Var> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const Var& p : parents) {
      if (p.tape != this) throw ValidationError("Tape::push: parent belongs to another tape");
      n.needs_grad = n.needs_grad || nodes_[p.id].needs_grad;
    }
    if (n.needs_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (!record_) throw ValidationError("Tape::backward: tape is not recording");
  if (value(loss.id).size() != 1) {
    throw DimensionError("Tape::backward: loss must be a scalar, got " + shape_string(value(loss.id).shape()));
  }
  grad(loss.id)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward) continue;
    if (n.grad.empty() && !n.external_grad) continue;  // never reached
    n.backward(*this, i);
  }
}

namespace ad {
namespace {

void same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void check_group(const char* op, const Tensor& x, const Tensor& g, std::size_t group) {
  if (group == 0 || g.rows() * group != x.rows() || g.cols() != x.cols()) {
    throw DimensionError(std::string(op) + ": " + shape_string(x.shape()) + " is not " + shape_string(g.shape()) +
                         " broadcast over groups of " + std::to_string(group));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  return t.push(mode::matmul(a.value(), b.value()), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a)) matmul_nt_accumulate(g, t.value(b), t.grad(a));
    if (t.needs_grad(b)) matmul_tn_accumulate(t.value(a), g, t.grad(b));
  });
}

Var add(Var a, Var b) {
  same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  axpy(1.0, b.value(), out);
  return a.tape->push(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a)) axpy(1.0, g, t.grad(a));
    if (t.needs_grad(b)) axpy(1.0, g, t.grad(b));
  });
}

Var sub(Var a, Var b) {
  same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  axpy(-1.0, b.value(), out);
  return a.tape->push(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a)) axpy(1.0, g, t.grad(a));
    if (t.needs_grad(b)) axpy(-1.0, g, t.grad(b));
  });
}

Var mul(Var a, Var b) {
  same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->push(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a)) {
      Tensor& ga = t.grad(a);
      const Tensor& bv = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      const Tensor& av = t.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.flat()) v *= s;
  return a.tape->push(std::move(out), {a}, [a = a.id, s](Tape& t, std::size_t self) {
    axpy(s, t.grad(self), t.grad(a));
  });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape->push(std::move(out), {a}, [a = a.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + shape_string(bv.shape()) + " vs input " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return x.tape->push(std::move(out), {x, bias}, [x = x.id, b = bias.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(x)) axpy(1.0, g, t.grad(x));
    if (t.needs_grad(b)) {
      Tensor& gb = t.grad(b);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        auto row = g.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) gb[c] += row[c];
      }
    }
  });
}

Var add_tiled(Var x, Var pattern) {
  const Tensor& xv = x.value();
  const Tensor& pv = pattern.value();
  if (pv.cols() != xv.cols() || pv.rows() == 0 || xv.rows() % pv.rows() != 0) {
    throw DimensionError("add_tiled: pattern " + shape_string(pv.shape()) + " does not tile " +
                         shape_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t period = pv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pv[i % period];
  return x.tape->push(std::move(out), {x, pattern}, [x = x.id, p = pattern.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(x)) axpy(1.0, g, t.grad(x));
    if (t.needs_grad(p)) {
      Tensor& gp = t.grad(p);
      const std::size_t period = gp.size();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i % period] += g[i];
    }
  });
}

Var add_group(Var x, Var g, std::size_t group) {
  const Tensor& xv = x.value();
  const Tensor& gv = g.value();
  check_group("add_group", xv, gv, group);
  Tensor out = xv;
  const std::size_t d = xv.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double* src = gv.data() + (r / group) * d;
    double* dst = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
  return x.tape->push(std::move(out), {x, g}, [x = x.id, gid = g.id, group](Tape& t, std::size_t self) {
    const Tensor& gr = t.grad(self);
    if (t.needs_grad(x)) axpy(1.0, gr, t.grad(x));
    if (t.needs_grad(gid)) {
      Tensor& gg = t.grad(gid);
      const std::size_t d = gr.cols();
      for (std::size_t r = 0; r < gr.rows(); ++r) {
        double* dst = gg.data() + (r / group) * d;
        const double* src = gr.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
      }
    }
  });
}

Var mul_group(Var x, Var g, std::size_t group) {
  const Tensor& xv = x.value();
  const Tensor& gv = g.value();
  check_group("mul_group", xv, gv, group);
  Tensor out = xv;
  const std::size_t d = xv.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    const double* src = gv.data() + (r / group) * d;
    double* dst = out.data() + r * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] *= src[c];
  }
  return x.tape->push(std::move(out), {x, g}, [x = x.id, gid = g.id, group](Tape& t, std::size_t self) {
    const Tensor& gr = t.grad(self);
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gid);
    const std::size_t d = gr.cols();
    if (t.needs_grad(x)) {
      Tensor& gx = t.grad(x);
      for (std::size_t r = 0; r < gr.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += gr[r * d + c] * gv[(r / group) * d + c];
    }
    if (t.needs_grad(gid)) {
      Tensor& gg = t.grad(gid);
      for (std::size_t r = 0; r < gr.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gg[(r / group) * d + c] += gr[r * d + c] * xv[r * d + c];
    }
  });
}

Var scale_rows(Var x, std::vector<double> w) {
  const Tensor& xv = x.value();
  if (w.size() != xv.rows()) {
    throw DimensionError("scale_rows: " + std::to_string(w.size()) + " weights for " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= w[r];
  return x.tape->push(std::move(out), {x}, [x = x.id, w = std::move(w)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    const std::size_t d = g.cols();
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * w[r];
  });
}

Var scale_rows(Var x, Var w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.size() != xv.rows()) {
    throw DimensionError("scale_rows: weights " + shape_string(wv.shape()) + " for " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (double& v : out.row(r)) v *= wv[r];
  return x.tape->push(std::move(out), {x, w}, [x = x.id, w = w.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const std::size_t d = g.cols();
    if (t.needs_grad(x)) {
      Tensor& gx = t.grad(x);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r * d + c] * wv[r];
    }
    if (t.needs_grad(w)) {
      Tensor& gw = t.grad(w);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) acc += g[r * d + c] * xv[r * d + c];
        gw[r] += acc;
      }
    }
  });
}

Var silu(Var x) {
  const Tensor& xv = x.value();
  Tensor s = mode::sigmoid(xv);
  Tensor y = s;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= xv[i];
  if (!x.tape->recording()) return x.tape->push(std::move(y), {x}, nullptr);
  return x.tape->push(std::move(y), {x}, [x = x.id, s = std::move(s)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (1.0 + xv[i] * (1.0 - s[i]));
  });
}

Var softmax_rows(Var x) {
  const std::size_t axis = x.value().rank() == 0 ? 0 : x.value().rank() - 1;
  return x.tape->push(mode::softmax(x.value(), axis), {x}, [x = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& gx = t.grad(x);
    const std::size_t d = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += g[r * d + c] * y[r * d + c];
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += y[r * d + c] * (g[r * d + c] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw DimensionError("layer_norm: affine parameters do not match " + shape_string(xv.shape()));
  }
  // Keep the normalized activations and inverse std for the backward pass.
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* in = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += in[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) xhat[r * d + c] = (in[c] - mean) * inv_std[r];
  }
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xhat[r * d + c] * gv[c] + bv[c];

  return x.tape->push(std::move(out), {x, gain, bias},
                      [x = x.id, gn = gain.id, bs = bias.id, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                        const Tensor& g = t.grad(self);
                        const Tensor& gv = t.value(gn);
                        const std::size_t d = g.cols();
                        if (t.needs_grad(gn) || t.needs_grad(bs)) {
                          Tensor* gg = t.needs_grad(gn) ? &t.grad(gn) : nullptr;
                          Tensor* gb = t.needs_grad(bs) ? &t.grad(bs) : nullptr;
                          for (std::size_t r = 0; r < g.rows(); ++r)
                            for (std::size_t c = 0; c < d; ++c) {
                              if (gg) (*gg)[c] += g[r * d + c] * xhat[r * d + c];
                              if (gb) (*gb)[c] += g[r * d + c];
                            }
                        }
                        if (!t.needs_grad(x)) return;
                        Tensor& gx = t.grad(x);
                        const double inv_d = 1.0 / static_cast<double>(d);
                        for (std::size_t r = 0; r < g.rows(); ++r) {
                          double sum_dy = 0.0, sum_dy_xhat = 0.0;
                          for (std::size_t c = 0; c < d; ++c) {
                            const double dy = g[r * d + c] * gv[c];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[r * d + c];
                          }
                          for (std::size_t c = 0; c < d; ++c) {
                            const double dy = g[r * d + c] * gv[c];
                            gx[r * d + c] +=
                                inv_std[r] * (dy - inv_d * sum_dy - xhat[r * d + c] * inv_d * sum_dy_xhat);
                          }
                        }
                      });
}

Var dropout(Var x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: rate must be < 1");
  const Tensor& xv = x.value();
  std::vector<double> keep(xv.size());
  const double s = 1.0 / (1.0 - p);
  for (double& k : keep) k = rng.uniform() < p ? 0.0 : s;
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
  return x.tape->push(std::move(out), {x}, [x = x.id, keep = std::move(keep)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * keep[i];
  });
}

Var attention(Var q, Var k, Var v, std::size_t group, std::size_t heads, const Tensor& mask, double dropout_p,
              Rng* rng) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  same_shape("attention", qv, kv);
  same_shape("attention", qv, vv);
  const std::size_t d = qv.cols();
  if (group == 0 || qv.rows() % group != 0) {
    throw DimensionError("attention: " + std::to_string(qv.rows()) + " rows are not groups of " +
                         std::to_string(group));
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (!mask.empty() && mask.size() != group * group) {
    throw DimensionError("attention: mask " + shape_string(mask.shape()) + " does not match group " +
                         std::to_string(group));
  }
  const std::size_t n_groups = qv.rows() / group;
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool use_dropout = dropout_p > 0.0 && rng != nullptr;
  const double keep_scale = use_dropout ? 1.0 / (1.0 - dropout_p) : 1.0;
  auto allowed = [&mask, group](std::size_t i, std::size_t j) {
    return mask.empty() ? j <= i : mask[i * group + j] != 0.0;
  };

  // probs[(b, h)] is group x group; dropped holds the post-dropout weights.
  const std::size_t block = group * group;
  std::vector<double> probs(n_groups * heads * block, 0.0);
  std::vector<double> dropped;
  if (use_dropout) dropped.resize(probs.size());
  Tensor out(qv.shape());
  std::vector<double> scores(group);
  for (std::size_t b = 0; b < n_groups; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + (b * heads + h) * block;
      for (std::size_t i = 0; i < group; ++i) {
        const double* qi = qv.data() + (b * group + i) * d + h * dh;
        double m = -INFINITY;
        bool visible = false;
        for (std::size_t j = 0; j < group; ++j) {
          if (!allowed(i, j)) {
            scores[j] = -INFINITY;
            continue;
          }
          visible = true;
          const double* kj = kv.data() + (b * group + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          scores[j] = s * inv_sqrt;
          m = std::max(m, scores[j]);
        }
        if (!visible) throw ValidationError("attention: a query row has no visible keys");
        double z = 0.0;
        for (std::size_t j = 0; j < group; ++j) {
          const double e = scores[j] == -INFINITY ? 0.0 : std::exp(scores[j] - m);
          p[i * group + j] = e;
          z += e;
        }
        for (std::size_t j = 0; j < group; ++j) p[i * group + j] /= z;
        const double* w = p + i * group;
        if (use_dropout) {
          double* pd = dropped.data() + (b * heads + h) * block + i * group;
          for (std::size_t j = 0; j < group; ++j) pd[j] = rng->uniform() < dropout_p ? 0.0 : p[i * group + j] * keep_scale;
          w = pd;
        }
        double* oi = out.data() + (b * group + i) * d + h * dh;
        for (std::size_t j = 0; j < group; ++j) {
          if (w[j] == 0.0) continue;
          const double* vj = vv.data() + (b * group + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w[j] * vj[c];
        }
      }
    }
  }

  return q.tape->push(
      std::move(out), {q, k, v},
      [q = q.id, k = k.id, v = v.id, group, heads, n_groups, dh, inv_sqrt, keep_scale, use_dropout,
       probs = std::move(probs), dropped = std::move(dropped)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        const std::size_t d = g.cols();
        Tensor* gq = t.needs_grad(q) ? &t.grad(q) : nullptr;
        Tensor* gk = t.needs_grad(k) ? &t.grad(k) : nullptr;
        Tensor* gv = t.needs_grad(v) ? &t.grad(v) : nullptr;
        const std::size_t block = group * group;
        std::vector<double> dw(group), dp(group);
        for (std::size_t b = 0; b < n_groups; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* p = probs.data() + (b * heads + h) * block;
            const double* pd = use_dropout ? dropped.data() + (b * heads + h) * block : p;
            for (std::size_t i = 0; i < group; ++i) {
              const double* gi = g.data() + (b * group + i) * d + h * dh;
              // dw[j] = dO_i . v_j ; dv_j += w_ij dO_i
              for (std::size_t j = 0; j < group; ++j) {
                const double* vj = vv.data() + (b * group + j) * d + h * dh;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += gi[c] * vj[c];
                dw[j] = s;
                const double w = pd[i * group + j];
                if (gv && w != 0.0) {
                  double* gvj = gv->data() + (b * group + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += w * gi[c];
                }
              }
              double dot = 0.0;
              for (std::size_t j = 0; j < group; ++j) {
                double gpj = dw[j];
                if (use_dropout) gpj = pd[i * group + j] == 0.0 ? 0.0 : gpj * keep_scale;
                dp[j] = gpj;
                dot += gpj * p[i * group + j];
              }
              const double* qi = qv.data() + (b * group + i) * d + h * dh;
              double* gqi = gq ? gq->data() + (b * group + i) * d + h * dh : nullptr;
              for (std::size_t j = 0; j < group; ++j) {
                const double pij = p[i * group + j];
                if (pij == 0.0) continue;
                const double ds = pij * (dp[j] - dot) * inv_sqrt;
                const double* kj = kv.data() + (b * group + j) * d + h * dh;
                if (gqi)
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                if (gk) {
                  double* gkj = gk->data() + (b * group + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Var gather_rows(Var x, std::vector<std::size_t> index) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  Tensor out({index.size(), d});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(xv.data() + index[i] * d, d, out.data() + i * d);
  }
  return x.tape->push(std::move(out), {x}, [x = x.id, index = std::move(index)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < index.size(); ++i) {
      const double* src = g.data() + i * d;
      double* dst = gx.data() + index[i] * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var scatter_rows(Var x, std::vector<std::size_t> index, std::size_t n_rows) {
  const Tensor& xv = x.value();
  if (index.size() != xv.rows()) throw DimensionError("scatter_rows: index count does not match rows");
  const std::size_t d = xv.cols();
  Tensor out({n_rows, d});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n_rows) throw DimensionError("scatter_rows: index out of range");
    const double* src = xv.data() + i * d;
    double* dst = out.data() + index[i] * d;
    for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
  }
  return x.tape->push(std::move(out), {x}, [x = x.id, index = std::move(index)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    const std::size_t d = g.cols();
    for (std::size_t i = 0; i < index.size(); ++i) {
      const double* src = g.data() + index[i] * d;
      double* dst = gx.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var interleave_groups(const std::vector<Var>& segments, const std::vector<std::size_t>& rows_per_group,
                      std::size_t n_groups) {
  if (segments.empty() || segments.size() != rows_per_group.size()) {
    throw DimensionError("interleave_groups: segment/row-count mismatch");
  }
  const std::size_t d = segments.front().value().cols();
  std::size_t group = 0;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Tensor& sv = segments[s].value();
    if (sv.cols() != d || sv.rows() != rows_per_group[s] * n_groups) {
      throw DimensionError("interleave_groups: segment " + std::to_string(s) + " has shape " +
                           shape_string(sv.shape()) + ", expected " + std::to_string(rows_per_group[s] * n_groups) +
                           "x" + std::to_string(d));
    }
    group += rows_per_group[s];
  }
  Tensor out({n_groups * group, d});
  std::vector<std::size_t> offsets(segments.size());
  std::exclusive_scan(rows_per_group.begin(), rows_per_group.end(), offsets.begin(), std::size_t{0});
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Tensor& sv = segments[s].value();
    const std::size_t r = rows_per_group[s];
    for (std::size_t b = 0; b < n_groups; ++b)
      std::copy_n(sv.data() + b * r * d, r * d, out.data() + (b * group + offsets[s]) * d);
  }
  std::vector<std::size_t> ids;
  for (const Var& s : segments) ids.push_back(s.id);
  Tape& tape = *segments.front().tape;
  return tape.push(std::move(out), std::span<const Var>(segments),
                   [ids = std::move(ids), rows = rows_per_group, offsets = std::move(offsets), group, n_groups](
                       Tape& t, std::size_t self) {
                     const Tensor& g = t.grad(self);
                     const std::size_t d = g.cols();
                     for (std::size_t s = 0; s < ids.size(); ++s) {
                       if (!t.needs_grad(ids[s])) continue;
                       Tensor& gs = t.grad(ids[s]);
                       const std::size_t r = rows[s];
                       for (std::size_t b = 0; b < n_groups; ++b) {
                         const double* src = g.data() + (b * group + offsets[s]) * d;
                         double* dst = gs.data() + b * r * d;
                         for (std::size_t i = 0; i < r * d; ++i) dst[i] += src[i];
                       }
                     }
                   });
}

Var gather_column(Var w, std::size_t col, std::vector<std::size_t> row_map) {
  const Tensor& wv = w.value();
  if (col >= wv.cols()) throw DimensionError("gather_column: column out of range");
  Tensor out({row_map.size(), 1});
  for (std::size_t i = 0; i < row_map.size(); ++i) {
    if (row_map[i] >= wv.rows()) throw DimensionError("gather_column: row out of range");
    out[i] = wv.at(row_map[i], col);
  }
  return w.tape->push(std::move(out), {w}, [w = w.id, col, row_map = std::move(row_map)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gw = t.grad(w);
    const std::size_t n = gw.cols();
    for (std::size_t i = 0; i < row_map.size(); ++i) gw[row_map[i] * n + col] += g[i];
  });
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  const std::size_t n = xv.rows();
  if (n == 0) throw DimensionError("mean_rows: no rows");
  Tensor out({1, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += xv[r * d + c];
  for (double& v : out.flat()) v /= static_cast<double>(n);
  return x.tape->push(std::move(out), {x}, [x = x.id](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    Tensor& gx = t.grad(x);
    const std::size_t d = gx.cols();
    const double inv = 1.0 / static_cast<double>(gx.rows());
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[c] * inv;
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  const double s = std::accumulate(xv.flat().begin(), xv.flat().end(), 0.0);
  return x.tape->push(Tensor::scalar(s), {x}, [x = x.id](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    for (double& v : t.grad(x).flat()) v += g;
  });
}

Var dot_const(Var x, Tensor c) {
  const Tensor& xv = x.value();
  if (xv.size() != c.size()) throw DimensionError("dot_const: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) s += xv[i] * c[i];
  return x.tape->push(Tensor::scalar(s), {x}, [x = x.id, c = std::move(c)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    Tensor& gx = t.grad(x);
    for (std::size_t i = 0; i < c.size(); ++i) gx[i] += g * c[i];
  });
}

Var renormalize_selected(Var probs, Tensor mask, bool renormalize) {
  const Tensor& pv = probs.value();
  same_shape("renormalize_selected", pv, mask);
  const std::size_t n = pv.cols();
  Tensor out(pv.shape());
  std::vector<double> denom(pv.rows(), 1.0);
  for (std::size_t r = 0; r < pv.rows(); ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < n; ++c) z += pv[r * n + c] * mask[r * n + c];
    if (renormalize) {
      if (!(z > 0.0)) throw NumericError("renormalize_selected: selected probability mass is zero");
      denom[r] = z;
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = pv[r * n + c] * mask[r * n + c] / denom[r];
  }
  return probs.tape->push(
      std::move(out), {probs},
      [p = probs.id, mask = std::move(mask), denom = std::move(denom), renormalize](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& w = t.value(self);
        Tensor& gp = t.grad(p);
        const std::size_t n = g.cols();
        for (std::size_t r = 0; r < g.rows(); ++r) {
          double dot = 0.0;
          if (renormalize)
            for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * w[r * n + c];
          for (std::size_t c = 0; c < n; ++c)
            gp[r * n + c] += mask[r * n + c] * (g[r * n + c] - dot) / denom[r];
        }
      });
}

Var weighted_sq_error(Var pred, Tensor target, std::vector<double> row_weight, std::size_t group) {
  const Tensor& pv = pred.value();
  if (pv.size() != target.size()) {
    throw DimensionError("weighted_sq_error: prediction " + shape_string(pv.shape()) + " vs target " +
                         shape_string(target.shape()));
  }
  if (group == 0 || row_weight.size() * group != pv.rows()) {
    throw DimensionError("weighted_sq_error: row weights do not cover prediction rows");
  }
  const std::size_t d = pv.cols();
  const double inv_n = 1.0 / static_cast<double>(pv.size());
  double s = 0.0;
  for (std::size_t r = 0; r < pv.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double e = pv[r * d + c] - target[r * d + c];
      s += row_weight[r / group] * e * e;
    }
  return pred.tape->push(
      Tensor::scalar(s * inv_n), {pred},
      [p = pred.id, target = std::move(target), w = std::move(row_weight), group, inv_n](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        const Tensor& pv = t.value(p);
        Tensor& gp = t.grad(p);
        const std::size_t d = pv.cols();
        for (std::size_t r = 0; r < pv.rows(); ++r)
          for (std::size_t c = 0; c < d; ++c)
            gp[r * d + c] += g * 2.0 * w[r / group] * (pv[r * d + c] - target[r * d + c]) * inv_n;
      });
}

}  // namespace ad
}  // namespace mode
