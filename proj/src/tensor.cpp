// Copyright 2026 The dschat Authors
// SPDX-License-Identifier: Apache-2.0

#include "dsc/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_set>

#include "dsc/error.hpp"

namespace dsc {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> data) {
  if (numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<float>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const auto n = dsc::numel(shape);
  return from(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
  Tensor t(new_node(std::move(shape), std::move(data)));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(int i) const {
  const auto& s = shape();
  const int r = static_cast<int>(s.size());
  const int k = i < 0 ? r + i : i;
  if (k < 0 || k >= r) throw DimensionError("dimension index out of range for " + shape_str(s));
  return s[static_cast<std::size_t>(k)];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<float> Tensor::data() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->data;
}

std::span<const float> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->data;
}

float Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::vector<float> Tensor::grad() const {
  if (!node_) throw ContractError("use of undefined tensor");
  if (node_->grad.empty()) return std::vector<float>(node_->data.size(), 0.0f);
  return node_->grad;
}

std::span<float> Tensor::grad_buffer() {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

const std::string& Tensor::name() const {
  static const std::string empty;
  return node_ ? node_->name : empty;
}

void Tensor::set_name(std::string name) {
  if (!node_) throw ContractError("use of undefined tensor");
  node_->name = std::move(name);
}

std::optional<std::uint64_t> Tensor::node_id() const {
  if (!node_ || (!node_->requires_grad && node_->parents.empty())) return std::nullopt;
  return node_->id;
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  Tensor t = from(node_->shape, node_->data);
  t.node_->name = node_->name;
  return t;
}

Tensor make_result(Shape shape, std::vector<float> data, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward_fn) {
  Tensor out(new_node(std::move(shape), std::move(data)));
  if (!t_grad_enabled) return out;
  const bool any = std::any_of(parents.begin(), parents.end(),
                               [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_ptr());
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  auto* root = loss.node();
  if (!root->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  for (auto* n : order) {
    if (n->backward_fn) n->grad.assign(n->data.size(), 0.0f);
  }
  root->ensure_grad()[0] += 1.0f;
  for (auto* n : order) {
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace dsc
