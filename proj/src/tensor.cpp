#include "asr/tensor.hpp"

#include <unordered_map>

namespace asr {

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<TensorImpl>()) {
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  for (Index d : shape) {
    if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  impl_->data.assign(numel_of(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>()) {
  if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
  if (numel_of(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.impl_->data) v = rng.uniform(lo, hi);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw UsageError("item() requires a single-element tensor, got " + shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(const Shape& index) const {
  if (index.size() != rank()) throw UsageError("index rank mismatch");
  Index off = 0;
  for (Index d = 0; d < index.size(); ++d) {
    if (index[d] >= impl_->shape[d]) throw UsageError("index out of range");
    off = off * impl_->shape[d] + index[d];
  }
  return impl_->data[off];
}

Tensor& Tensor::set_requires_grad(bool rg) {
  if (impl_->from_op) throw UsageError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = rg;
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  if (!impl_->grad) throw UsageError("tensor has no gradient; run backward first");
  return *impl_->grad;
}

std::vector<double>& Tensor::grad_mut() {
  if (!impl_->grad) impl_->grad = std::make_unique<std::vector<double>>(numel(), 0.0);
  return *impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::clone() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  return t;
}

namespace {
thread_local Graph* g_active_graph = nullptr;
}

Graph* active_graph() { return g_active_graph; }

GraphScope::GraphScope(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
GraphScope::~GraphScope() { g_active_graph = prev_; }

std::vector<double>& Graph::Adjoints::slot(const std::shared_ptr<TensorImpl>& t) {
  auto& v = adj_[t.get()];
  if (v.empty()) v.assign(t->numel(), 0.0);
  return v;
}

void Graph::Adjoints::accumulate(const std::shared_ptr<TensorImpl>& t,
                                 const std::vector<double>& v) {
  if (t->from_op) {
    auto& a = slot(t);
    for (Index i = 0; i < v.size(); ++i) a[i] += v[i];
    return;
  }
  if (!t->requires_grad) return;
  if (!t->grad) t->grad = std::make_unique<std::vector<double>>(t->numel(), 0.0);
  auto& g = *t->grad;
  for (Index i = 0; i < v.size(); ++i) g[i] += v[i];
}

void Graph::Adjoints::accumulate_at(const std::shared_ptr<TensorImpl>& t, Index offset,
                                    double v) {
  if (t->from_op) {
    slot(t)[offset] += v;
    return;
  }
  if (!t->requires_grad) return;
  if (!t->grad) t->grad = std::make_unique<std::vector<double>>(t->numel(), 0.0);
  (*t->grad)[offset] += v;
}

const std::vector<double>* Graph::Adjoints::find(const TensorImpl* t) const {
  auto it = adj_.find(t);
  return it == adj_.end() ? nullptr : &it->second;
}

void Graph::record(std::shared_ptr<TensorImpl> output, BackwardFn fn) {
  output->from_op = true;
  nodes_.push_back(NodeRec{std::move(output), std::move(fn)});
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.impl()->from_op) {
    throw UsageError("backward requires a loss produced on the graph");
  }
  Adjoints adj;
  adj.slot(loss.impl())[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const std::vector<double>* out_adj = adj.find(it->output.get());
    if (out_adj == nullptr) continue;
    it->fn(*out_adj, adj);
  }
}

}  // namespace asr
