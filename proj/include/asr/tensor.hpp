#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "asr/common.hpp"
#include "asr/rng.hpp"

namespace asr {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;  // leaf gradient target
  bool from_op = false;        // produced by an op recorded on a graph
  std::unique_ptr<std::vector<double>> grad;  // lazily allocated for leaves

  Index numel() const { return data.size(); }
};

/// Dense row-major tensor of 64-bit floats. Copying a Tensor copies a handle
/// to shared storage; clone() makes an independent leaf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }
  static Tensor uniform(Shape shape, double lo, double hi, RngStream& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Index rank() const { return impl_->shape.size(); }
  Index numel() const { return impl_->numel(); }
  const std::vector<double>& data() const { return impl_->data; }
  std::vector<double>& mutable_data() { return impl_->data; }

  /// Value of a single-element tensor.
  double item() const;
  double at(const Shape& index) const;

  Tensor& set_requires_grad(bool rg);
  bool requires_grad() const { return impl_->requires_grad; }
  /// True when this tensor participates in autodiff (leaf with requires_grad
  /// or output of a recorded op).
  bool tracked() const { return impl_->requires_grad || impl_->from_op; }

  bool has_grad() const { return impl_->grad != nullptr; }
  const std::vector<double>& grad() const;
  std::vector<double>& grad_mut();
  void zero_grad();

  Tensor clone() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Reverse-mode tape. Ops executed while a Graph is active (see GraphScope)
/// record one node each, in execution order. backward() seeds d(loss)=1 and
/// visits the nodes exactly once in reverse, accumulating adjoints; leaves
/// with requires_grad accumulate into their persistent grad buffers, which
/// survive across backward calls until zero_grad().
class Graph {
 public:
  /// Scratch adjoint storage for one backward pass. Intermediate adjoints
  /// live here; leaf contributions are routed into persistent grads.
  class Adjoints {
   public:
    void accumulate(const std::shared_ptr<TensorImpl>& t, const std::vector<double>& v);
    void accumulate_at(const std::shared_ptr<TensorImpl>& t, Index offset, double v);
    const std::vector<double>* find(const TensorImpl* t) const;

   private:
    friend class Graph;
    std::vector<double>& slot(const std::shared_ptr<TensorImpl>& t);
    std::unordered_map<const TensorImpl*, std::vector<double>> adj_;
  };

  using BackwardFn = std::function<void(const std::vector<double>& out_adj, Adjoints&)>;

  void record(std::shared_ptr<TensorImpl> output, BackwardFn fn);
  void backward(const Tensor& loss);
  Index size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct NodeRec {
    std::shared_ptr<TensorImpl> output;
    BackwardFn fn;
  };
  std::vector<NodeRec> nodes_;
};

/// The graph ops record onto, or nullptr outside any GraphScope (pure
/// forward evaluation; nothing is recorded).
Graph* active_graph();

/// RAII activation of a graph for the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& g);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* prev_;
};

}  // namespace asr
