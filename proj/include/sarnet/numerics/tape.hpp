#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sarnet/errors.hpp"
#include "sarnet/numerics/tensor.hpp"

namespace sarnet {

/// A named tensor owned by a ParameterStore. Non-trainable entries (batch-norm
/// running statistics) are checkpointed but never receive optimizer updates.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

/// Ordered registry of named parameters. Addresses are stable for the store's lifetime.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& add(std::string name, Tensor init, bool trainable = true) {
    require(!index_.contains(name), "duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    params_.push_back(std::make_unique<Parameter>(Parameter{std::move(name), std::move(init), trainable}));
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter '" + name + "'");
    return *params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter '" + name + "'");
    return *params_[it->second];
  }

  std::size_t index_of(const Parameter& p) const { return index_.at(p.name); }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  /// Total number of scalar values across trainable parameters.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p->trainable) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using TensorRefs = std::span<const Tensor* const>;
using ForwardFn = std::function<Tensor(TensorRefs inputs)>;
/// Accumulates into input_grads[i] (nullptr when input i needs no gradient).
using BackwardFn = std::function<void(TensorRefs inputs, const Tensor& output, const Tensor& grad_output,
                                      std::span<Tensor* const> input_grads)>;

/// Computation record: the ordered list of primitive ops applied during one
/// forward pass. Node order is a topological order by construction.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    Node node;
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf bound to a parameter's live value; repeated calls return the same node.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
    Node node;
    node.external = &p.value;
    node.param = &p;
    node.needs_grad = p.trainable;
    nodes_.push_back(std::move(node));
    param_nodes_.emplace(&p, nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
  }

  Var record(const std::vector<Var>& inputs, ForwardFn forward, BackwardFn backward) {
    Node node;
    node.inputs.reserve(inputs.size());
    for (const Var& v : inputs) {
      require(v.tape() == this, "op input belongs to a different tape");
      node.inputs.push_back(v.id());
      node.needs_grad = node.needs_grad || nodes_[v.id()].needs_grad;
    }
    std::vector<const Tensor*> refs = input_refs(node);
    node.value = forward(refs);
    node.forward = std::move(forward);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Re-executes every recorded op against current leaf values (parameters are
  /// read live), overwriting stored outputs.
  void replay() {
    for (Node& node : nodes_) {
      if (!node.forward) continue;
      std::vector<const Tensor*> refs = input_refs(node);
      node.value = node.forward(refs);
    }
  }

 private:
  friend class GradientPass;

  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    std::vector<std::size_t> inputs;
    ForwardFn forward;
    BackwardFn backward;
    bool needs_grad = false;
  };

  std::vector<const Tensor*> input_refs(const Node& node) const {
    std::vector<const Tensor*> refs;
    refs.reserve(node.inputs.size());
    for (std::size_t id : node.inputs) refs.push_back(&value(id));
    return refs;
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

inline const Tensor& Var::value() const {
  require(tape_ != nullptr, "value() on an unbound Var");
  return tape_->value(id_);
}

/// Gradients keyed by parameter, aligned with ParameterStore order.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(const ParameterStore& store) {
    grads_.reserve(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
      grads_.emplace_back(store[i].value.shape());
      names_.push_back(store[i].name);
    }
  }

  std::size_t size() const { return grads_.size(); }
  Tensor& operator[](std::size_t i) { return grads_[i]; }
  const Tensor& operator[](std::size_t i) const { return grads_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }

  const Tensor& of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return grads_[i];
    throw ContractViolation("no gradient for parameter '" + name + "'");
  }

  /// Node ids in the order the backward traversal visited them.
  std::vector<std::size_t> visit_order;

 private:
  std::vector<Tensor> grads_;
  std::vector<std::string> names_;
};

class GradientPass {
 public:
  static Gradients run(const Tape& tape, Var loss, const ParameterStore& store) {
    require(loss.tape() == &tape, "loss node belongs to a different tape");
    const Tensor& loss_value = tape.value(loss.id());
    require(loss_value.size() == 1, "gradient requested for non-scalar loss of shape " +
                                        shape_string(loss_value.shape()));

    Gradients out(store);
    const auto& nodes = tape.nodes_;
    std::vector<Tensor> grads(loss.id() + 1);
    std::vector<bool> has_grad(loss.id() + 1, false);
    grads[loss.id()] = Tensor(loss_value.shape(), 1.0);
    has_grad[loss.id()] = true;

    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      if (!has_grad[id]) continue;
      const auto& node = nodes[id];
      out.visit_order.push_back(id);
      if (node.param != nullptr) {
        out[store.index_of(*node.param)] += grads[id];
        continue;
      }
      if (!node.backward) continue;
      std::vector<Tensor*> input_grads(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t in = node.inputs[k];
        if (!nodes[in].needs_grad) continue;
        if (!has_grad[in]) {
          grads[in] = Tensor(tape.value(in).shape());
          has_grad[in] = true;
        }
        input_grads[k] = &grads[in];
      }
      bool any = false;
      for (Tensor* g : input_grads) any = any || g != nullptr;
      if (!any) continue;
      std::vector<const Tensor*> refs = tape.input_refs(node);
      node.backward(refs, tape.value(id), grads[id], input_grads);
    }
    return out;
  }
};

/// Gradient of a scalar loss with respect to every parameter in the store.
/// Parameters that do not reach the loss get a zero tensor.
inline Gradients evaluate_with_gradients(const Tape& tape, Var loss, const ParameterStore& store) {
  return GradientPass::run(tape, loss, store);
}

}  // namespace sarnet
