#include "mcd/grad/graph.hpp"

#include <cstring>
#include <sstream>

#include "mcd/error.hpp"

namespace mcd::grad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Abs: return "abs";
    case OpKind::Charbonnier: return "charbonnier-abs";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Relu: return "relu";
    case OpKind::Clamp01: return "clamp01";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BilinearSample: return "bilinear-sample";
    case OpKind::Stencil: return "stencil";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::Slice: return "slice";
    case OpKind::Concat: return "concat";
    case OpKind::Expand: return "expand";
  }
  return "?";
}

template <typename Real>
const Shape& DiffTensor<Real>::shape() const {
  return graph_->shape(id_);
}

template <typename Real>
std::size_t DiffTensor<Real>::numel() const {
  return grad::numel(shape());
}

template <typename Real>
bool DiffTensor<Real>::requires_grad() const {
  return graph_->requires_grad(id_);
}

template <typename Real>
std::span<const Real> DiffTensor<Real>::value() const {
  return graph_->value(id_);
}

template <typename Real>
std::span<const Real> DiffTensor<Real>::grad() const {
  return graph_->adjoint_view(id_);
}

template <typename Real>
Real DiffTensor<Real>::item() const {
  auto v = value();
  if (v.size() != 1) {
    throw PreconditionError("item() on tensor of shape " + shape_string(shape()));
  }
  return v[0];
}

template <typename Real>
DiffTensor<Real> Graph<Real>::leaf(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw PreconditionError("leaf: " + std::to_string(values.size()) +
                            " values for shape " + shape_string(shape));
  }
  Node node;
  node.shape = std::move(shape);
  node.value = std::move(values);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return DiffTensor<Real>(this, nodes_.size() - 1);
}

template <typename Real>
DiffTensor<Real> Graph<Real>::detach(const DiffTensor<Real>& t) {
  if (&t.graph() != this) throw GraphError("detach: tensor belongs to another graph");
  auto v = t.value();
  return constant(t.shape(), std::vector<Real>(v.begin(), v.end()));
}

template <typename Real>
DiffTensor<Real> Graph<Real>::record(OpKind kind, std::vector<NodeId> inputs, Shape shape,
                                     ForwardFn forward, BackwardFn backward) {
  bool needs_grad = false;
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw GraphError("record: unknown input node");
    needs_grad = needs_grad || nodes_[id].requires_grad;
  }
  Node node;
  node.shape = std::move(shape);
  node.value.assign(numel(node.shape), Real(0));
  node.requires_grad = needs_grad;
  nodes_.push_back(std::move(node));
  const NodeId out = nodes_.size() - 1;
  forward(*this, std::span<Real>(nodes_[out].value));
  records_.push_back(Record{kind, std::move(inputs), out, std::move(forward),
                            needs_grad ? std::move(backward) : BackwardFn{}});
  return DiffTensor<Real>(this, out);
}

template <typename Real>
std::span<const Real> Graph<Real>::adjoint_view(NodeId id) const {
  const Node& node = nodes_.at(id);
  if (node.adjoint.empty()) node.adjoint.assign(node.value.size(), Real(0));
  return node.adjoint;
}

template <typename Real>
std::span<Real> Graph<Real>::adjoint(NodeId id) {
  Node& node = nodes_.at(id);
  if (node.adjoint.empty()) node.adjoint.assign(node.value.size(), Real(0));
  return node.adjoint;
}

template <typename Real>
void Graph<Real>::backward(const DiffTensor<Real>& root) {
  if (&root.graph() != this) throw GraphError("backward: root belongs to another graph");
  if (consumed_) throw GraphError("backward: graph already consumed; reset() first");
  if (root.numel() != 1) {
    throw PreconditionError("backward: root must be scalar, got shape " +
                            shape_string(root.shape()));
  }
  consumed_ = true;
  adjoint(root.id())[0] = Real(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->backward) continue;
    const Node& out = nodes_[it->output];
    if (out.adjoint.empty()) continue;  // nothing flowed into this node
    it->backward(*this, std::span<const Real>(out.adjoint));
  }
}

template <typename Real>
void Graph<Real>::reset() {
  for (auto& node : nodes_) {
    node.adjoint.clear();
    node.adjoint.shrink_to_fit();
  }
  consumed_ = false;
}

template <typename Real>
std::size_t Graph<Real>::replay_mismatches() const {
  std::size_t mismatches = 0;
  std::vector<Real> scratch;
  for (const auto& rec : records_) {
    const auto& stored = nodes_[rec.output].value;
    scratch.assign(stored.size(), Real(0));
    rec.forward(*this, std::span<Real>(scratch));
    if (std::memcmp(scratch.data(), stored.data(), stored.size() * sizeof(Real)) != 0) {
      ++mismatches;
    }
  }
  return mismatches;
}

template class Graph<float>;
template class Graph<double>;
template class DiffTensor<float>;
template class DiffTensor<double>;

}  // namespace mcd::grad
