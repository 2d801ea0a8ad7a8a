#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>

#include "tst/common.hpp"

namespace tst {

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until backward touches this node
  bool requires_grad = false;
};

// Value-semantic handle onto a shared dense buffer in row-major layout.
// Image tensors use NCHW order. Copying a Tensor aliases the buffer; use
// clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : d_(std::make_shared<TensorData<T>>()) {
    validate_shape(shape);
    d_->shape = std::move(shape);
    d_->values.assign(size_t(tst::numel(d_->shape)), fill);
  }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    validate_shape(shape);
    TST_REQUIRE(int64_t(values.size()) == tst::numel(shape), usage,
                "tensor data size " + std::to_string(values.size()) +
                    " does not fill shape " + shape_str(shape));
    t.d_->shape = std::move(shape);
    t.d_->values = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), T mean = T(0)) {
    Tensor t(std::move(shape));
    for (T& v : t.d_->values) v = mean + stddev * T(rng.normal());
    return t;
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, T lo = T(0), T hi = T(1)) {
    Tensor t(std::move(shape));
    for (T& v : t.d_->values) v = T(rng.uniform(double(lo), double(hi)));
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int rank() const { return int(d_->shape.size()); }
  int64_t dim(int i) const { return d_->shape[size_t(i)]; }
  int64_t numel() const { return int64_t(d_->values.size()); }

  std::span<const T> values() const { return d_->values; }
  std::span<T> values() { return d_->values; }
  const T* data() const { return d_->values.data(); }
  T* data() { return d_->values.data(); }

  T item() const {
    TST_REQUIRE(numel() == 1, usage,
                "item() needs a single-element tensor, got " +
                    shape_str(d_->shape));
    return d_->values[0];
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    d_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return d_ && !d_->grad.empty(); }
  std::span<const T> grad() const {
    TST_REQUIRE(has_grad(), usage, "tensor has no gradient buffer");
    return d_->grad;
  }
  // Allocates (zeroed) on first use.
  // Handles have pointer semantics: a const handle may still touch the
  // shared buffers, so accumulation works from value-captured closures.
  std::vector<T>& grad_buffer() const {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
    return d_->grad;
  }
  void zero_grad() {
    if (d_) d_->grad.clear();
  }

  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    return t;
  }

  // Same values, detached from gradient tracking.
  Tensor detach() const { return clone(); }

  std::shared_ptr<TensorData<T>> node() const { return d_; }
  bool same_buffer(const Tensor& o) const { return d_ == o.d_; }

 private:
  static void validate_shape(const Shape& s) {
    TST_REQUIRE(!s.empty() && s.size() <= 8, usage,
                "tensor rank must be 1..8, got " + shape_str(s));
    for (int64_t d : s)
      TST_REQUIRE(d >= 1, usage, "tensor dims must be positive, got " +
                                     shape_str(s));
  }

  std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (T v : t.values())
    if (!std::isfinite(double(v))) return false;
  return true;
}

// Ordered record of differentiable operations. Records are appended in
// execution order, so replaying them in reverse visits every node after all
// of its consumers. One tape is active per thread; ops record only while a
// TapeScope is alive and some input requires a gradient.
template <typename T>
class Tape {
 public:
  struct Record {
    const char* name;
    std::vector<std::shared_ptr<TensorData<T>>> inputs;
    std::shared_ptr<TensorData<T>> output;
    std::function<void()> backward;
  };

  static Tape*& current() {
    static thread_local Tape* cur = nullptr;
    return cur;
  }

  void record(Record rec) { records_.push_back(std::move(rec)); }
  size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays backward rules in reverse order.
  // Gradients accumulate into every requires_grad node on the path. The tape
  // is consumed.
  void run_backward(Tensor<T>& loss) {
    TST_REQUIRE(loss.numel() == 1, usage,
                "backward expects a scalar loss, got " +
                    shape_str(loss.shape()));
    TST_REQUIRE(loss.requires_grad(), usage,
                "backward: loss is not connected to the active tape");
    loss.grad_buffer()[0] = T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not on the loss path
      it->backward();
    }
    records_.clear();
  }

 private:
  std::vector<Record> records_;
};

template <typename T>
class TapeScope {
 public:
  TapeScope() : prev_(Tape<T>::current()) { Tape<T>::current() = &tape_; }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* prev_;
};

template <typename T>
void backward(Tensor<T> loss) {
  Tape<T>* tape = Tape<T>::current();
  TST_REQUIRE(tape != nullptr, usage, "backward called with no active tape");
  tape->run_backward(loss);
}

namespace detail {

// Registers a backward rule if recording is active and any input needs a
// gradient. The rule must add into input grad buffers using raw kernels,
// never taped ops.
template <typename T, typename F>
void record_op(const char* name, std::initializer_list<Tensor<T>> inputs,
               Tensor<T>& out, F&& backward_fn) {
  Tape<T>* tape = Tape<T>::current();
  if (!tape) return;
  bool needs = false;
  for (const Tensor<T>& in : inputs) needs = needs || in.requires_grad();
  if (!needs) return;
  out.set_requires_grad(true);
  typename Tape<T>::Record rec;
  rec.name = name;
  rec.inputs.reserve(inputs.size());
  for (const Tensor<T>& in : inputs) rec.inputs.push_back(in.node());
  rec.output = out.node();
  rec.backward = std::forward<F>(backward_fn);
  tape->record(std::move(rec));
}

template <typename T>
void axpy(std::vector<T>& dst, std::span<const T> src, T alpha = T(1)) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += alpha * src[i];
}

}  // namespace detail

}  // namespace tst
