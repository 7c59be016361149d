#include "pibnas/tensor.hpp"

#include <atomic>
#include <stdexcept>

#include <fmt/format.h>

namespace pibnas {

namespace {
std::atomic<Precision> g_precision{Precision::f32};
thread_local Tape* t_active_tape = nullptr;
}  // namespace

Precision precision() { return g_precision.load(std::memory_order_relaxed); }
void set_precision(Precision p) { g_precision.store(p, std::memory_order_relaxed); }

void quantize(std::span<Real> values) {
  if (precision() == Precision::f64) return;
  for (Real& v : values) v = static_cast<Real>(static_cast<float>(v));
}

Shape::Shape(std::initializer_list<std::int64_t> dims) : Shape(std::span(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const std::int64_t> dims) {
  if (dims.size() > 4) throw std::invalid_argument("Shape: rank > 4 is not supported");
  rank_ = static_cast<int>(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] < 0) throw std::invalid_argument("Shape: negative dimension");
    dims_[i] = dims[i];
  }
}

std::int64_t Shape::numel() const {
  std::int64_t n = 1;
  for (int i = 0; i < rank_; ++i) n *= dims_[static_cast<std::size_t>(i)];
  return n;
}

std::string Shape::to_string() const {
  std::string out = "(";
  for (int i = 0; i < rank_; ++i) {
    if (i) out += ", ";
    out += std::to_string(dims_[static_cast<std::size_t>(i)]);
  }
  return out + ")";
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, Real value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  Real v = value;
  quantize(std::span(&v, 1));
  impl->data.assign(static_cast<std::size_t>(shape.numel()), v);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(const Shape& shape, std::vector<Real> values, bool requires_grad) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw std::invalid_argument(fmt::format("Tensor::from: {} values for shape {}",
                                            values.size(), shape.to_string()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(values);
  quantize(impl->data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return full(Shape{1}, value, requires_grad); }

Real Tensor::item() const {
  if (numel() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape().to_string());
  return impl_->data[0];
}

Real Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  const Shape& s = impl_->shape;
  return impl_->data[static_cast<std::size_t>(((n * s.c() + c) * s.h() + h) * s.w() + w)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<Real> Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

void Tensor::copy_from(std::span<const Real> values) {
  if (values.size() != impl_->data.size()) {
    throw std::invalid_argument("Tensor::copy_from: size mismatch");
  }
  std::copy(values.begin(), values.end(), impl_->data.begin());
  quantize(impl_->data);
}

std::int64_t total_numel(const NamedTensors& tensors) {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

Tape* Tape::active() { return t_active_tape; }

Tape::Scope::Scope(Tape& tape) : saved_(t_active_tape) { t_active_tape = &tape; }
Tape::Scope::~Scope() { t_active_tape = saved_; }

void Tape::record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn) {
  std::erase_if(inputs, [](const Tensor& t) { return !t.defined(); });
  records_.push_back({std::move(inputs), std::move(output), std::move(fn)});
}

void Tape::backward(Tensor loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("Tape::backward: loss is not on the tape");
  }
  for (auto& r : records_) {
    for (auto& in : r.inputs) {
      if (in.requires_grad()) in.ensure_grad();
    }
  }
  loss.ensure_grad()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->fn();
    for (auto& in : it->inputs) {
      if (in.has_grad()) quantize(in.grad());
    }
  }
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace pibnas
