#include "hcl/autodiff.hpp"

#include <algorithm>
#include <stdexcept>

namespace hcl::ad {

const Tensor* Gradients::find(const Parameter& p) const {
  for (const auto& [param, grad] : params_)
    if (param == &p) return &grad;
  return nullptr;
}

const Tensor& Gradients::operator[](const Parameter& p) const {
  if (const auto* g = find(p)) return *g;
  throw std::out_of_range("no gradient recorded for parameter '" + p.name + "'");
}

const Tensor& Gradients::of(Var leaf) const {
  for (const auto& [id, grad] : leaves_)
    if (id == leaf.id) return grad;
  throw std::out_of_range("no gradient recorded for node " + std::to_string(leaf.id));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = "constant";
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::input(Tensor value) {
  Node n;
  n.op = "input";
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
  for (const auto& [param, id] : param_nodes_)
    if (param == &p) return Var{id};
  if (!p.value.all_finite()) throw NumericalError("parameter '" + p.name + "' holds non-finite values");
  Node n;
  n.op = "parameter";
  n.value = p.value;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  param_nodes_.emplace_back(&p, nodes_.size() - 1);
  return Var{nodes_.size() - 1};
}

Var Graph::record(std::string op, std::vector<Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) throw NumericalError("non-finite output from " + op);
  Node n;
  n.op = std::move(op);
  n.value = std::move(value);
  for (const auto& v : inputs) {
    const auto& in = node(v.id);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || in.requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Node& Graph::node(std::size_t id) const {
  if (id >= nodes_.size()) throw std::out_of_range("graph node " + std::to_string(id) + " does not exist");
  return nodes_[id];
}

Gradients Graph::backprop(Var loss) const {
  std::vector<std::size_t> order;
  order.reserve(loss.id + 1);
  for (std::size_t i = loss.id + 1; i-- > 0;) order.push_back(i);
  return backprop(loss, order);
}

Gradients Graph::backprop(Var loss, std::span<const std::size_t> order) const {
  const Node& root = node(loss.id);
  if (root.value.size() != 1)
    throw ShapeError("backprop needs a scalar loss, got shape " + shape_str(root.value.shape()));

  // Which nodes lie on a gradient path from the loss, and how many consumers
  // each still waits on.
  std::vector<char> reachable(loss.id + 1, 0);
  std::vector<std::size_t> waiting(loss.id + 1, 0);
  reachable[loss.id] = root.requires_grad;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    if (!reachable[i]) continue;
    for (auto in : nodes_[i].inputs) {
      if (!nodes_[in].requires_grad) continue;
      reachable[in] = 1;
      ++waiting[in];
    }
  }

  std::vector<std::vector<std::pair<std::size_t, Tensor>>> pending(loss.id + 1);
  std::vector<char> visited(loss.id + 1, 0);
  Gradients out;

  for (auto id : order) {
    if (id > loss.id || !reachable[id]) continue;
    if (visited[id]) throw std::invalid_argument("backprop order visits node " + std::to_string(id) + " twice");
    if (waiting[id] != 0)
      throw std::invalid_argument("backprop order visits node " + std::to_string(id) + " before its consumers");
    visited[id] = 1;
    const Node& n = nodes_[id];

    Tensor grad;
    if (id == loss.id) {
      grad = Tensor(n.value.shape(), 1.0);
    } else {
      auto& contrib = pending[id];
      std::stable_sort(contrib.begin(), contrib.end(),
                       [](const auto& a, const auto& b) { return a.first < b.first; });
      grad = std::move(contrib.front().second);
      for (std::size_t k = 1; k < contrib.size(); ++k) grad += contrib[k].second;
      contrib.clear();
      contrib.shrink_to_fit();
    }
    if (!grad.all_finite()) throw NumericalError("non-finite gradient at node " + std::to_string(id) + " (" + n.op + ")");

    if (n.param) {
      out.params_.emplace_back(n.param, std::move(grad));
      continue;
    }
    if (n.op == "input") {
      out.leaves_.emplace_back(id, std::move(grad));
      continue;
    }
    if (!n.backward) continue;

    auto grads = n.backward(*this, id, grad);
    if (grads.size() != n.inputs.size())
      throw std::logic_error("backward of " + n.op + " returned wrong number of gradients");
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const auto in = n.inputs[k];
      if (!nodes_[in].requires_grad) continue;
      if (grads[k].empty()) {
        // Input is on a gradient path but this op contributes nothing; still
        // count the edge as consumed.
        grads[k] = Tensor(nodes_[in].value.shape());
      }
      require_shape(grads[k], nodes_[in].value.shape(), n.op.c_str());
      pending[in].emplace_back(id, std::move(grads[k]));
      --waiting[in];
    }
  }

  for (std::size_t i = 0; i <= loss.id; ++i)
    if (reachable[i] && !visited[i])
      throw std::invalid_argument("backprop order omits node " + std::to_string(i));
  return out;
}

std::vector<std::size_t> Graph::depth_first_order(Var loss) const {
  node(loss.id);
  std::vector<char> state(loss.id + 1, 0);
  std::vector<std::size_t> post;
  std::vector<std::pair<std::size_t, std::size_t>> stack{{loss.id, 0}};
  state[loss.id] = 1;
  while (!stack.empty()) {
    auto& [id, next] = stack.back();
    const auto& ins = nodes_[id].inputs;
    if (next < ins.size()) {
      // Visit inputs last-to-first so the result differs from creation order.
      const auto in = ins[ins.size() - 1 - next];
      ++next;
      if (!state[in]) {
        state[in] = 1;
        stack.emplace_back(in, 0);
      }
    } else {
      post.push_back(id);
      stack.pop_back();
    }
  }
  std::reverse(post.begin(), post.end());
  return post;
}

}  // namespace hcl::ad
