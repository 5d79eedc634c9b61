#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mcd::grad {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// 32-bit graphs run the experiments, 64-bit graphs run gradient verification.
// A graph is typed by its scalar, so the two modes can never mix inside one
// graph.
enum class NumericMode { Float32, Float64 };

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Abs,
  Charbonnier,
  Exp,
  Log,
  Relu,
  Clamp01,
  Sum,
  Mean,
  Conv2d,
  BilinearSample,
  Stencil,
  Reshape,
  Permute,
  Slice,
  Concat,
  Expand,
};

const char* op_name(OpKind kind);

template <typename Real>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid as long as the graph
// it came from is alive.
template <typename Real>
class DiffTensor {
 public:
  DiffTensor() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph<Real>& graph() const { return *graph_; }
  NodeId id() const { return id_; }

  const Shape& shape() const;
  std::size_t numel() const;
  bool requires_grad() const;

  std::span<const Real> value() const;
  // All-zero until a backward pass reaches this node.
  std::span<const Real> grad() const;
  // Value of a single-element tensor.
  Real item() const;

 private:
  friend class Graph<Real>;
  DiffTensor(Graph<Real>* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph<Real>* graph_ = nullptr;
  NodeId id_ = 0;
};

// Flat append-only tape. Every node is produced either as a leaf or by one
// record whose inputs precede it, so record order is a topological order.
template <typename Real>
class Graph {
 public:
  using ForwardFn = std::function<void(const Graph&, std::span<Real>)>;
  using BackwardFn = std::function<void(Graph&, std::span<const Real>)>;

  static constexpr NumericMode mode =
      sizeof(Real) == sizeof(double) ? NumericMode::Float64 : NumericMode::Float32;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  DiffTensor<Real> leaf(Shape shape, std::vector<Real> values, bool requires_grad = true);
  DiffTensor<Real> constant(Shape shape, std::vector<Real> values) {
    return leaf(std::move(shape), std::move(values), false);
  }
  // Copies the value of `t` into a fresh constant node (stops gradients).
  DiffTensor<Real> detach(const DiffTensor<Real>& t);

  // Seeds d(root)/d(root) = 1 and propagates adjoints in reverse record
  // order. A graph can be differentiated once; call reset() to run again.
  void backward(const DiffTensor<Real>& root);
  // Drops all adjoints and re-arms backward().
  void reset();
  bool consumed() const { return consumed_; }

  // Recomputes every recorded op from its inputs and counts the nodes whose
  // recomputed value is not bit-identical to the stored one.
  std::size_t replay_mismatches() const;

  // True when every record's inputs precede its output.
  bool topologically_ordered() const {
    for (const auto& r : records_)
      for (auto id : r.inputs)
        if (id >= r.output) return false;
    return true;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t record_count() const { return records_.size(); }

  // --- op-implementation interface ---
  DiffTensor<Real> record(OpKind kind, std::vector<NodeId> inputs, Shape shape,
                          ForwardFn forward, BackwardFn backward);
  const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
  std::span<const Real> value(NodeId id) const { return nodes_.at(id).value; }
  std::span<const Real> adjoint_view(NodeId id) const;
  // Lazily allocates a zeroed adjoint buffer.
  std::span<Real> adjoint(NodeId id);
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }
  DiffTensor<Real> handle(NodeId id) { return DiffTensor<Real>(this, id); }

 private:
  struct Node {
    Shape shape;
    std::vector<Real> value;
    mutable std::vector<Real> adjoint;
    bool requires_grad = false;
  };
  struct Record {
    OpKind kind;
    std::vector<NodeId> inputs;
    NodeId output;
    ForwardFn forward;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<Record> records_;
  bool consumed_ = false;
};

using Graph32 = Graph<float>;
using Graph64 = Graph<double>;

extern template class Graph<float>;
extern template class Graph<double>;
extern template class DiffTensor<float>;
extern template class DiffTensor<double>;

}  // namespace mcd::grad
