// SPDX-License-Identifier: Apache-2.0
#include "sml/graph.hpp"

#include <stdexcept>

namespace sml {

namespace {
thread_local Graph* t_active = nullptr;
}

Graph* active_graph() { return t_active; }

GraphScope::GraphScope(Graph& graph) : previous_(t_active) { t_active = &graph; }
GraphScope::~GraphScope() { t_active = previous_; }

NoGradScope::NoGradScope() : previous_(t_active) { t_active = nullptr; }
NoGradScope::~NoGradScope() { t_active = previous_; }

void Graph::record(Node node) {
  node.output.mark_non_leaf();
  nodes_.push_back(std::move(node));
}

bool Graph::contains(const Tensor& t) const {
  for (const auto& n : nodes_) {
    if (n.output.id() == t.id()) return true;
  }
  return false;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar tensor");
  }
  std::size_t end = nodes_.size();
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].output.id() == loss.id()) {
      end = i + 1;
      break;
    }
  }
  if (end == nodes_.size() && (nodes_.empty() || nodes_.back().output.id() != loss.id())) {
    throw std::invalid_argument("backward: loss was not produced on this graph");
  }

  for (auto& n : nodes_) {
    if (n.output.has_grad()) n.output.zero_grad();
  }
  Tensor seed = loss;
  seed.grad_mut()[0] = Real{1};

  visit_order_.clear();
  visit_order_.reserve(end);
  for (std::size_t i = end; i-- > 0;) {
    auto& n = nodes_[i];
    visit_order_.push_back(i);
    if (!n.output.has_grad()) continue;
    n.backward();
  }
}

void Graph::clear() {
  nodes_.clear();
  visit_order_.clear();
}

void backward(Graph& graph, const Tensor& loss) { graph.backward(loss); }

}  // namespace sml
