#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace nasp::ad {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // lazily allocated by backward
  bool requires_grad = false;
  std::uint64_t seq = 0;  // creation order; a valid topological order
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad();
};

// Reverse-mode autodiff tensor: a shared handle to a graph node. Values are
// dense row-major doubles. Graphs are built eagerly by the op functions in
// ops.hpp; Tensor::backward() runs the reverse sweep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  // Leaf constructors.
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  std::int64_t numel() const { return shape_numel(n_->shape); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  double* data() { return n_->value.data(); }
  const double* data() const { return n_->value.data(); }
  std::vector<double>& values() { return n_->value; }
  const std::vector<double>& values() const { return n_->value; }
  double item() const;

  std::vector<double>& grad() { return n_->grad; }
  const std::vector<double>& grad() const { return n_->grad; }
  void zero_grad();

  // Reverse sweep from a scalar node.
  void backward();

  // Same values, no graph history.
  Tensor detach() const;

  std::shared_ptr<Node> node() const { return n_; }
  Node* raw() const { return n_.get(); }

 private:
  std::shared_ptr<Node> n_;
};

// RAII guard disabling graph construction (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Op construction helper: allocates the output node and wires parents +
// backward only when grad mode is on and some input requires it.
Tensor make_node(Shape shape, const std::vector<Tensor>& inputs,
                 std::function<void(Node&)> backward_fn);

}  // namespace nasp::ad
