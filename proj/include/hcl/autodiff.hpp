#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hcl/tensor.hpp"

namespace hcl::ad {

/// A trainable leaf. Owned by layers; graphs refer to it by address.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Handle to a node of a Graph.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

class Graph;

/// Maps the gradient of a node's output to gradients of its inputs. An empty
/// tensor in the result means "no contribution" for that input.
using BackwardFn = std::function<std::vector<Tensor>(const Graph&, std::size_t self, const Tensor& grad_out)>;

struct Node {
  std::string op;
  std::vector<std::size_t> inputs;
  Tensor value;
  BackwardFn backward;
  Parameter* param = nullptr;
  bool requires_grad = false;
};

class Gradients {
public:
  const Tensor* find(const Parameter& p) const;
  const Tensor& operator[](const Parameter& p) const;
  /// Gradient of a leaf created with Graph::input.
  const Tensor& of(Var leaf) const;
  const std::vector<std::pair<Parameter*, Tensor>>& params() const noexcept { return params_; }

private:
  friend class Graph;
  std::vector<std::pair<Parameter*, Tensor>> params_;
  std::vector<std::pair<std::size_t, Tensor>> leaves_;
};

/// Tape of operations in creation order. Creation order is always a valid
/// topological order because a node can only reference existing nodes.
class Graph {
public:
  Var constant(Tensor value);
  Var input(Tensor value);
  /// Registers a trainable leaf; repeated calls with the same parameter return
  /// the same node so its gradient is accumulated once.
  Var parameter(Parameter& p);

  Var record(std::string op, std::vector<Var> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(Var v) const { return node(v.id).value; }
  const Node& node(std::size_t id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool requires_grad(std::size_t id) const { return node(id).requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Reverse-mode sweep in reverse creation order.
  Gradients backprop(Var loss) const;
  /// Reverse-mode sweep over a caller-supplied order, which must list every
  /// node reachable from `loss` after all of its consumers. Contributions to a
  /// node are summed in ascending consumer id, so any valid order yields
  /// bitwise-identical gradients.
  Gradients backprop(Var loss, std::span<const std::size_t> order) const;

  /// A second valid sweep order obtained from a depth-first post-order walk.
  std::vector<std::size_t> depth_first_order(Var loss) const;

private:
  std::vector<Node> nodes_;
  std::vector<std::pair<const Parameter*, std::size_t>> param_nodes_;
};

}  // namespace hcl::ad
