// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sml/tensor.hpp"

namespace sml {

/// Reverse-mode tape. Operations append nodes in construction order while a
/// GraphScope is active on the current thread; backward() walks them in exact
/// reverse order. First-order only: backward rules never record new nodes.
class Graph {
 public:
  struct Node {
    std::string kind;
    std::vector<Tensor> inputs;
    Tensor output;
    // Reads output.grad() and accumulates into inputs that require grad.
    std::function<void()> backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void record(Node node);
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  bool contains(const Tensor& t) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates. Intermediate gradients are reset
  /// on every call; leaf gradients accumulate until zeroed.
  void backward(const Tensor& loss);

  // Order in which the last backward() visited nodes (indices into the tape).
  const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

  void clear();

 private:
  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
};

/// Makes a graph the active recording target for this thread; nests.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

/// Suspends recording for this thread; nests.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

void backward(Graph& graph, const Tensor& loss);

}  // namespace sml
