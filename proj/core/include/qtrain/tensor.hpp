#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

// Minimal reverse-mode autodiff over dense double tensors.
//
// A Tensor is a shared handle to a graph Node. Ops build new nodes whose
// backward closures add into their parents' gradient buffers, so fan-out
// accumulates naturally and repeated backward calls keep accumulating until
// zero_grad(), which is what gradient accumulation over micro batches needs.
// Ownership runs child -> parent only; the graph is acyclic by construction.

namespace qtrain {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  std::vector<double> value;
  Shape shape;
  std::vector<double> grad;  // empty until first touched; then value-sized
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad, adds into parents' grads. Set only by ops.
  std::function<void()> backward;

  // Gradient buffer, allocated zero-filled on first use.
  std::vector<double>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;

  // Zero-initialized leaf.
  static Tensor leaf(Shape shape, bool requires_grad);
  // Leaf wrapping existing values. Size must match the shape.
  static Tensor from(std::vector<double> values, Shape shape,
                     bool requires_grad = false);

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int i) const;
  int64_t numel() const;
  bool requires_grad() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;

  // Gradient buffer, allocating it if absent. Valid on any node.
  std::vector<double>& grad();
  // Gradient buffer if one was ever produced, else nullptr.
  const std::vector<double>* grad_if() const;
  void zero_grad();

  // Value of a single-element tensor.
  double item() const;

  std::shared_ptr<Node> node() const { return n_; }
  static Tensor wrap(std::shared_ptr<Node> n);

 private:
  std::shared_ptr<Node> n_;
};

// Runs reverse-mode accumulation from `root`, seeding every element of the
// root gradient with `seed` (roots are normally scalar losses). Gradients
// add into whatever is already in each leaf's buffer.
void backward(const Tensor& root, double seed = 1.0);

}  // namespace qtrain
