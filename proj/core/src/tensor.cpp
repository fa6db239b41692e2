#include "qtrain/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "qtrain/errors.hpp"

namespace qtrain {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::leaf(Shape shape, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw StateError("tensor dims must be positive, got " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(shape_numel(n->shape), 0.0);
  n->requires_grad = requires_grad;
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

Tensor Tensor::from(std::vector<double> values, Shape shape, bool requires_grad) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw StateError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  Tensor t = leaf(std::move(shape), requires_grad);
  t.n_->value = std::move(values);
  return t;
}

Tensor Tensor::wrap(std::shared_ptr<Node> n) {
  Tensor t;
  t.n_ = std::move(n);
  return t;
}

static const Node& deref(const std::shared_ptr<Node>& n) {
  if (!n) throw StateError("use of undefined tensor");
  return *n;
}

const Shape& Tensor::shape() const { return deref(n_).shape; }
int Tensor::rank() const { return static_cast<int>(deref(n_).shape.size()); }

int64_t Tensor::dim(int i) const {
  const Shape& s = deref(n_).shape;
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size())) {
    throw StateError("dim index out of range for " + shape_str(s));
  }
  return s[i];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(deref(n_).value.size()); }
bool Tensor::requires_grad() const { return deref(n_).requires_grad; }

std::vector<double>& Tensor::data() {
  deref(n_);
  return n_->value;
}
const std::vector<double>& Tensor::data() const { return deref(n_).value; }

std::vector<double>& Tensor::grad() {
  deref(n_);
  return n_->ensure_grad();
}

const std::vector<double>* Tensor::grad_if() const {
  return deref(n_).grad.empty() ? nullptr : &n_->grad;
}

void Tensor::zero_grad() {
  deref(n_);
  if (!n_->grad.empty()) n_->grad.assign(n_->grad.size(), 0.0);
}

double Tensor::item() const {
  const Node& n = deref(n_);
  if (n.value.size() != 1) {
    throw StateError("item() on tensor of shape " + shape_str(n.shape));
  }
  return n.value[0];
}

// Iterative post-order DFS over parent edges. In the resulting list every
// parent precedes all of its consumers, so walking it in reverse runs each
// node's backward only after the node's full gradient has arrived.
static std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  struct Frame {
    Node* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (done.count(f.n)) {
      stack.pop_back();
      continue;
    }
    if (f.next_parent < f.n->parents.size()) {
      Node* p = f.n->parents[f.next_parent++].get();
      if (!done.count(p)) stack.push_back({p, 0});
    } else {
      done.insert(f.n);
      order.push_back(f.n);
      stack.pop_back();
    }
  }
  return order;
}

void backward(const Tensor& root, double seed) {
  std::shared_ptr<Node> rn = root.node();
  if (!rn) throw StateError("backward on undefined tensor");
  if (!rn->requires_grad) {
    throw StateError("backward on a tensor that does not require grad");
  }
  {
    std::vector<double>& g = rn->ensure_grad();
    for (double& v : g) v += seed;
  }
  std::vector<Node*> order = topo_order(rn.get());
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->requires_grad && !n->grad.empty()) {
      n->backward();
      // Interior gradients are consumed once propagated. Leaves keep theirs,
      // which is what makes repeated backward calls accumulate instead of
      // re-counting stale interior state.
      if (!n->parents.empty()) n->grad.clear();
    }
  }
}

}  // namespace qtrain
