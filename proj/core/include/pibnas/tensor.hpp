#pragma once

// Dense 4-D tensors with a reverse-mode gradient tape.
//
// Values are held as double internally. Storage precision is a process-wide
// setting: in f32 mode every primitive rounds its outputs (and accumulated
// gradients) to the nearest float, so results match a 32-bit storage model;
// f64 mode is used by the gradient-check suites.

#include <array>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pibnas {

using Real = double;

enum class Precision { f32, f64 };

Precision precision();
void set_precision(Precision p);

/// Restores the previous precision on scope exit.
class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p) : saved_(precision()) { set_precision(p); }
  ~PrecisionScope() { set_precision(saved_); }
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

/// Rounds values to storage precision (no-op in f64 mode).
void quantize(std::span<Real> values);

/// Up to rank 4. Missing trailing dimensions read as 1, so a rank-2 [N, D]
/// shape is addressed as (N, D, 1, 1).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims);
  explicit Shape(std::span<const std::int64_t> dims);

  int rank() const { return rank_; }
  std::int64_t operator[](int i) const { return dims_[static_cast<std::size_t>(i)]; }
  std::int64_t n() const { return dims_[0]; }
  std::int64_t c() const { return dims_[1]; }
  std::int64_t h() const { return dims_[2]; }
  std::int64_t w() const { return dims_[3]; }
  std::int64_t numel() const;
  std::span<const std::int64_t> dims() const { return {dims_.data(), static_cast<std::size_t>(rank_)}; }

  std::string to_string() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    return a.rank_ == b.rank_ && a.dims_ == b.dims_;
  }

 private:
  std::array<std::int64_t, 4> dims_{1, 1, 1, 1};
  int rank_ = 0;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
};

/// Shared handle; copies alias the same buffer.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Real value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  Real item() const;
  Real at(std::int64_t n, std::int64_t c, std::int64_t h = 0, std::int64_t w = 0) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Allocates a zero gradient buffer if none exists.
  std::span<Real> ensure_grad();
  std::span<Real> grad() { return impl_->grad; }
  std::span<const Real> grad() const { return impl_->grad; }
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  /// Deep copy of the data, detached from any tape.
  Tensor clone() const;
  void copy_from(std::span<const Real> values);

  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::int64_t total_numel(const NamedTensors& tensors);

/// Ordered record of executed primitives. Records are appended in execution
/// order, so the list is already topologically sorted for reverse traversal.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// The tape that primitives record onto, or nullptr (no-grad mode).
  static Tape* active();

  /// Makes a tape active for the lifetime of the scope.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* saved_;
  };

  void record(std::vector<Tensor> inputs, Tensor output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs the records in reverse. Every
  /// grad-requiring input on the tape ends with an allocated gradient (zero
  /// when unreachable). Gradients accumulate into existing buffers.
  void backward(Tensor loss);

  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }

 private:
  struct Record {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
};

/// Whether an op over these inputs must be recorded.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

}  // namespace pibnas
