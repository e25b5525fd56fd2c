#include "awm/autodiff.hpp"

#include <memory>
#include <stdexcept>

namespace awm {

const Tensor& Var::value() const { return graph_->node(id_).value; }

Tensor Var::grad() const {
  const auto& n = graph_->node(id_);
  return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
}

bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }

const Graph::Node& Graph::node(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) throw std::out_of_range("Var does not belong to graph");
  return nodes_[static_cast<std::size_t>(id)];
}

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) { return push(Node{std::move(value), {}, false, nullptr, {}}); }

Var Graph::variable(Tensor value) { return push(Node{std::move(value), {}, true, nullptr, {}}); }

Var Graph::parameter(Parameter& parameter, bool trainable) {
  if (!trainable) return constant(parameter.value);
  return push(Node{parameter.value, {}, true, &parameter, {}});
}

Var Graph::record(Tensor value, std::span<const Var> parents, Backprop backprop) {
  bool needs = false;
  for (const Var& p : parents) {
    if (p.graph_ != this) throw std::invalid_argument("operation mixes Vars from different graphs");
    needs = needs || p.requires_grad();
  }
  if (backward_done_) throw std::logic_error("cannot record operations after backward()");
  return push(Node{std::move(value), {}, needs, nullptr, needs ? std::move(backprop) : Backprop{}});
}

Tensor* Graph::grad_target(Var v) {
  auto& n = nodes_[static_cast<std::size_t>(v.id_)];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return &n.grad;
}

void Graph::backward(Var root) {
  if (backward_done_) throw std::logic_error("backward() already ran on this graph; run a new forward pass first");
  if (root.graph_ != this) throw std::invalid_argument("backward root belongs to another graph");
  auto& r = nodes_[static_cast<std::size_t>(root.id_)];
  if (r.value.size() != 1) throw ShapeError("backward root must be a scalar, got " + to_string(r.value.shape()));
  backward_done_ = true;
  if (!r.requires_grad) return;
  r.grad = Tensor(r.value.shape(), 1.0);
  for (int id = root.id_; id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) continue;
    if (n.backprop) {
      n.backprop(*this, n.value, n.grad);
      // Intermediate values are no longer needed once their gradient has been propagated.
      n.backprop = nullptr;
    }
    if (n.parameter) n.parameter->grad.flat() += n.grad.flat();
  }
}

namespace {

std::vector<Var> list(std::initializer_list<Var> vars) { return std::vector<Var>(vars); }

}  // namespace

Var conv2d(Var input, Var kernel, Index stride, Index padding) {
  Graph& g = input.graph();
  Tensor out = conv2d(input.value(), kernel.value(), stride, padding);
  return g.record(std::move(out), list({input, kernel}), [input, kernel, stride, padding](Graph& g, const Tensor&, const Tensor& dy) {
    conv2d_backward(input.value(), kernel.value(), dy, stride, padding, g.grad_target(input), g.grad_target(kernel));
  });
}

Var global_avg_pool(Var input) {
  Graph& g = input.graph();
  return g.record(global_avg_pool(input.value()), list({input}), [input](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* dx = g.grad_target(input)) global_avg_pool_backward(dy, *dx);
  });
}

Var avg_pool2x2(Var input) {
  Graph& g = input.graph();
  return g.record(avg_pool2x2(input.value()), list({input}), [input](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* dx = g.grad_target(input)) avg_pool2x2_backward(dy, *dx);
  });
}

Var fully_connected(Var input, Var weight, Var bias) {
  Graph& g = input.graph();
  Tensor out = fully_connected(input.value(), weight.value(), bias.value());
  return g.record(std::move(out), list({input, weight, bias}), [input, weight, bias](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* dx = g.grad_target(input)) dx->matrix().noalias() += dy.matrix() * weight.value().matrix();
    if (Tensor* dw = g.grad_target(weight)) dw->matrix().noalias() += dy.matrix().transpose() * input.value().matrix();
    if (Tensor* db = g.grad_target(bias)) db->flat() += dy.matrix().colwise().sum().transpose();
  });
}

Var activation(Var input, Activation kind) {
  Graph& g = input.graph();
  return g.record(activation(input.value(), kind), list({input}), [input, kind](Graph& g, const Tensor& y, const Tensor& dy) {
    if (Tensor* dx = g.grad_target(input)) activation_backward(y, dy, *dx, kind);
  });
}

Var batch_norm(Var input, Var gamma, Var beta, BatchNormStats<double>& stats, BatchNormMode mode) {
  Graph& g = input.graph();
  auto cache = std::make_shared<BatchNormCache<double>>();
  Tensor out = batch_norm(input.value(), gamma.value(), beta.value(), stats, mode, cache.get());
  return g.record(std::move(out), list({input, gamma, beta}), [input, gamma, beta, cache, mode](Graph& g, const Tensor&, const Tensor& dy) {
    batch_norm_backward(*cache, gamma.value(), dy, mode, g.grad_target(input), g.grad_target(gamma),
                        g.grad_target(beta));
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Graph& g = logits.graph();
  auto result = softmax_cross_entropy(logits.value(), labels);
  auto grad = std::make_shared<Tensor>(std::move(result.grad_logits));
  return g.record(Tensor({1}, std::vector<double>{result.loss}), list({logits}), [logits, grad](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* dx = g.grad_target(logits)) dx->flat() += dy[0] * grad->flat();
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.flat() += b.value().flat();
  return a.graph().record(std::move(out), list({a, b}), [a, b](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* da = g.grad_target(a)) da->flat() += dy.flat();
    if (Tensor* db = g.grad_target(b)) db->flat() += dy.flat();
  });
}

Var multiply(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "multiply");
  Tensor out = a.value();
  out.flat().array() *= b.value().flat().array();
  return a.graph().record(std::move(out), list({a, b}), [a, b](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* da = g.grad_target(a)) da->flat().array() += dy.flat().array() * b.value().flat().array();
    if (Tensor* db = g.grad_target(b)) db->flat().array() += dy.flat().array() * a.value().flat().array();
  });
}

Var scale(Var input, double factor) {
  Tensor out = input.value();
  out.flat() *= factor;
  return input.graph().record(std::move(out), list({input}), [input, factor](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* dx = g.grad_target(input)) dx->flat() += factor * dy.flat();
  });
}

Var sum(Var input) {
  Tensor out({1}, std::vector<double>{input.value().flat().sum()});
  return input.graph().record(std::move(out), list({input}), [input](Graph& g, const Tensor&, const Tensor& dy) {
    if (Tensor* dx = g.grad_target(input)) dx->flat().array() += dy[0];
  });
}

namespace {

// Channel (axis 1) concatenation of the values behind parts; all other axes must agree.
Tensor concat_values(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor& first = parts[0].value();
  if (first.rank() < 2) throw ShapeError("concat: inputs need rank >= 2");
  const Index batch = first.dim(0);
  Index inner = 1;
  for (int a = 2; a < first.rank(); ++a) inner *= first.dim(a);
  Index channels = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    bool ok = t.rank() == first.rank() && t.dim(0) == batch;
    for (int a = 2; ok && a < t.rank(); ++a) ok = t.dim(a) == first.dim(a);
    if (!ok) throw ShapeError("concat: " + to_string(t.shape()) + " incompatible with " + to_string(first.shape()));
    channels += t.dim(1);
  }
  Shape shape = first.shape();
  shape[1] = channels;
  Tensor out(shape);
  Index offset = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    const Index block = t.dim(1) * inner;
    for (Index b = 0; b < batch; ++b) {
      std::copy_n(t.data() + b * block, block, out.data() + (b * channels + offset) * inner);
    }
    offset += t.dim(1);
  }
  return out;
}

}  // namespace

Var concat(std::span<const Var> parts) {
  Tensor out = concat_values(parts);
  const Index batch = out.dim(0), channels = out.dim(1), inner = out.size() / (batch * channels);
  std::vector<Var> parents(parts.begin(), parts.end());
  return parts[0].graph().record(std::move(out), parents, [parents, channels, inner, batch](Graph& g, const Tensor&, const Tensor& dy) {
    Index offset = 0;
    for (const Var& p : parents) {
      const Index c = p.value().dim(1);
      if (Tensor* dx = g.grad_target(p)) {
        for (Index b = 0; b < batch; ++b) {
          const double* src = dy.data() + (b * channels + offset) * inner;
          double* dst = dx->data() + b * c * inner;
          for (Index i = 0; i < c * inner; ++i) dst[i] += src[i];
        }
      }
      offset += c;
    }
  });
}

Var normalize_rows(Var input) {
  require_rank(input.value(), 2, "normalize_rows");
  Tensor out = input.value();
  auto m = out.matrix();
  Eigen::VectorXd sums = m.rowwise().sum();
  for (Index b = 0; b < m.rows(); ++b) {
    if (!(sums(b) > 0.0)) throw NumericalError("normalize_rows: row sum must be positive");
    m.row(b) /= sums(b);
  }
  auto row_sums = std::make_shared<Eigen::VectorXd>(std::move(sums));
  // d(s_i / S)/d s_j = (delta_ij - y_i) / S
  return input.graph().record(std::move(out), list({input}), [input, row_sums](Graph& g, const Tensor& out, const Tensor& dy) {
    Tensor* dx = g.grad_target(input);
    if (!dx) return;
    const auto y = out.matrix();
    const auto d = dy.matrix();
    for (Index b = 0; b < y.rows(); ++b) {
      const double dot = d.row(b).dot(y.row(b));
      dx->matrix().row(b).array() += (d.row(b).array() - dot) / (*row_sums)(b);
    }
  });
}

Var weighted_merge_sum(Var f, Var x, Var lambda) {
  require_same_shape(f.value(), x.value(), "weighted_merge_sum");
  const Tensor& lam = lambda.value();
  require_rank(lam, 2, "weighted_merge_sum lambda");
  const Index B = f.value().dim(0);
  if (lam.dim(0) != B || lam.dim(1) != 2) {
    throw ShapeError("weighted_merge_sum: lambda must be " + std::to_string(B) + "x2, got " + to_string(lam.shape()));
  }
  const Index per = f.value().size() / B;
  Tensor out(f.value().shape());
  for (Index b = 0; b < B; ++b) {
    const double l0 = lam(b, 0), l1 = lam(b, 1);
    const double* fp = f.value().data() + b * per;
    const double* xp = x.value().data() + b * per;
    double* op = out.data() + b * per;
    for (Index i = 0; i < per; ++i) op[i] = l0 * fp[i] + l1 * xp[i];
  }
  return f.graph().record(std::move(out), list({f, x, lambda}), [f, x, lambda, B, per](Graph& g, const Tensor&, const Tensor& dy) {
    const Tensor& lam = lambda.value();
    Tensor* df = g.grad_target(f);
    Tensor* dx = g.grad_target(x);
    Tensor* dl = g.grad_target(lambda);
    for (Index b = 0; b < B; ++b) {
      const double* d = dy.data() + b * per;
      if (df) {
        double* p = df->data() + b * per;
        for (Index i = 0; i < per; ++i) p[i] += lam(b, 0) * d[i];
      }
      if (dx) {
        double* p = dx->data() + b * per;
        for (Index i = 0; i < per; ++i) p[i] += lam(b, 1) * d[i];
      }
      if (dl) {
        const double* fp = f.value().data() + b * per;
        const double* xp = x.value().data() + b * per;
        double s0 = 0.0, s1 = 0.0;
        for (Index i = 0; i < per; ++i) {
          s0 += d[i] * fp[i];
          s1 += d[i] * xp[i];
        }
        (*dl)(b, 0) += s0;
        (*dl)(b, 1) += s1;
      }
    }
  });
}

Var weighted_merge_concat(std::span<const Var> paths, Var lambda) {
  if (paths.empty()) throw ShapeError("weighted_merge_concat: no paths");
  const Tensor& lam = lambda.value();
  require_rank(lam, 2, "weighted_merge_concat lambda");
  const Index n = static_cast<Index>(paths.size());
  const Index B = paths[0].value().dim(0);
  if (lam.dim(0) != B || lam.dim(1) != n) {
    throw ShapeError("weighted_merge_concat: lambda must be " + std::to_string(B) + "x" + std::to_string(n) +
                     ", got " + to_string(lam.shape()));
  }
  Graph& g = paths[0].graph();
  Tensor out = concat_values(paths);
  const Index channels = out.dim(1);
  const Index inner = out.size() / (B * channels);
  std::vector<Index> offsets;
  Index offset = 0;
  for (const Var& p : paths) {
    offsets.push_back(offset);
    offset += p.value().dim(1);
  }
  for (Index b = 0; b < B; ++b) {
    for (Index i = 0; i < n; ++i) {
      const Index c = paths[static_cast<std::size_t>(i)].value().dim(1);
      double* seg = out.data() + (b * channels + offsets[static_cast<std::size_t>(i)]) * inner;
      for (Index k = 0; k < c * inner; ++k) seg[k] *= lam(b, i);
    }
  }
  std::vector<Var> parents(paths.begin(), paths.end());
  parents.push_back(lambda);
  return g.record(std::move(out), parents, [parents, offsets, B, n, channels, inner](Graph& g, const Tensor&, const Tensor& dy) {
    const Var lambda = parents.back();
    const Tensor& lam = lambda.value();
    Tensor* dl = g.grad_target(lambda);
    for (Index i = 0; i < n; ++i) {
      const Var& p = parents[static_cast<std::size_t>(i)];
      const Index c = p.value().dim(1);
      Tensor* dp = g.grad_target(p);
      for (Index b = 0; b < B; ++b) {
        const double* d = dy.data() + (b * channels + offsets[static_cast<std::size_t>(i)]) * inner;
        const double* src = p.value().data() + b * c * inner;
        if (dp) {
          double* dst = dp->data() + b * c * inner;
          for (Index k = 0; k < c * inner; ++k) dst[k] += lam(b, i) * d[k];
        }
        if (dl) {
          double s = 0.0;
          for (Index k = 0; k < c * inner; ++k) s += d[k] * src[k];
          (*dl)(b, i) += s;
        }
      }
    }
  });
}

Var pad_shortcut(Var input, Index out_channels, Index stride) {
  const Tensor& x = input.value();
  require_rank(x, 4, "pad_shortcut");
  const Index B = x.dim(0), C = x.dim(1);
  if (out_channels < C || stride < 1) throw ShapeError("pad_shortcut: cannot shrink channels");
  const Index oh = (x.dim(2) - 1) / stride + 1, ow = (x.dim(3) - 1) / stride + 1;
  const Index front = (out_channels - C) / 2;
  Tensor out({B, out_channels, oh, ow});
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i < oh; ++i)
        for (Index j = 0; j < ow; ++j) out(b, c + front, i, j) = x(b, c, i * stride, j * stride);
  return input.graph().record(std::move(out), list({input}), [input, front, stride](Graph& g, const Tensor&, const Tensor& dy) {
    Tensor* dx = g.grad_target(input);
    if (!dx) return;
    const Shape& s = input.value().shape();
    for (Index b = 0; b < s[0]; ++b)
      for (Index c = 0; c < s[1]; ++c)
        for (Index i = 0; i < dy.dim(2); ++i)
          for (Index j = 0; j < dy.dim(3); ++j) (*dx)(b, c, i * stride, j * stride) += dy(b, c + front, i, j);
  });
}

}  // namespace awm
