#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph records every op applied to its Vars together with a backward
// closure. Parameters enter the graph by reference and receive gradients
// directly in Parameter::grad, so several graphs (or several uses inside one
// graph) accumulate into the same buffer until the optimizer clears it.

#include <deque>
#include <functional>
#include <string>
#include <utility>

#include "icmlm/tensor.hpp"

namespace icmlm {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    } else {
      grad.fill(T(0));
    }
  }
};

namespace ag {

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const noexcept { return graph != nullptr && id >= 0; }
  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
};

template <class T>
class Graph {
 public:
  // out_value, out_grad of the node being differentiated.
  using Backward = std::function<void(Graph&, const Tensor<T>&, const Tensor<T>&)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(Tensor<T> value) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  // The referenced tensor must outlive the graph.
  Var<T> constant_ref(const Tensor<T>& value) {
    Node& n = nodes_.emplace_back();
    n.external = &value;
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> param(Parameter<T>& p) {
    Node& n = nodes_.emplace_back();
    n.external = &p.value;
    if (record_ && p.trainable) {
      n.requires_grad = true;
      n.grad_sink = &p.grad;
    }
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  template <class... Vs>
  Var<T> emit(Tensor<T> value, Backward backward, Vs... inputs) {
    const bool req = record_ && (requires_grad(inputs) || ...);
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = req;
    if (req) n.backward = std::move(backward);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  Var<T> emit_many(Tensor<T> value, Backward backward, bool any_input_requires_grad) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = record_ && any_input_requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& value(Var<T> v) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    return n.external != nullptr ? *n.external : n.owned;
  }

  bool requires_grad(Var<T> v) const { return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad; }

  // Gradient buffer for v, zero-initialized on first access.
  Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_.at(static_cast<std::size_t>(v.id));
    Tensor<T>& g = n.grad_sink != nullptr ? *n.grad_sink : n.grad_owned;
    const Tensor<T>& val = n.external != nullptr ? *n.external : n.owned;
    if (g.shape() != val.shape()) g = Tensor<T>(val.shape());
    n.touched = true;
    return g;
  }

  void backward(Var<T> root) {
    ICMLM_REQUIRE(record_, "backward on a non-recording graph");
    ICMLM_REQUIRE(value(root).size() == 1, "backward root must be a scalar");
    grad(root)[0] += T(1);
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward || !n.touched) continue;
      const Tensor<T>& out_value = n.external != nullptr ? *n.external : n.owned;
      n.backward(*this, out_value, n.grad_owned);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad_owned;
    Tensor<T>* grad_sink = nullptr;
    bool requires_grad = false;
    bool touched = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
  bool record_;
};

}  // namespace ag
}  // namespace icmlm
