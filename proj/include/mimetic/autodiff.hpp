#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mimetic/errors.hpp"

namespace mimetic::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense 64-bit float tensor in row-major order. Value-semantic handle: copies
// share storage, clone() deep-copies. A rank-0 shape {} is a scalar.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t numel() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  // Direct write access to the values. Intended for leaf tensors only
  // (optimizer updates, test setup); recorded ops never mutate inputs.
  std::span<double> mutable_data();

  bool has_grad() const;
  std::span<const double> grad() const;
  // Grad buffer, zero-allocated on first use.
  std::span<double> grad_buffer() const;
  void zero_grad();

  double item() const;
  double at(std::initializer_list<int> idx) const;

  // Deep copy of the values; grad is not copied.
  Tensor clone(bool requires_grad = false) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Tape;
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // tape that produced this tensor; 0 for leaves
  };
  std::shared_ptr<Impl> impl_;
  static Tensor wrap(std::shared_ptr<Impl> impl);
};

// Records one forward pass; backward() replays the recorded ops in reverse
// and is valid exactly once. Build a fresh tape per step. A tape constructed
// with grad_enabled=false records nothing (evaluation mode).
class Tape {
 public:
  explicit Tape(bool grad_enabled = true);
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor gelu(const Tensor& x);
  Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   double eps);
  Tensor softmax(const Tensor& x);
  Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernels);
  Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
  Tensor reshape(const Tensor& x, Shape shape);
  Tensor transpose(const Tensor& x, int axis_a = -2, int axis_b = -1);
  Tensor mean_pool_tokens(const Tensor& x);  // [B,T,n] -> [B,n]
  Tensor sum(const Tensor& x);               // -> scalar
  Tensor patchify(const Tensor& images, int patch);  // [B,C,H,W] -> [B,T,C*p*p]

  // Seeds d(loss)/d(loss) = 1 and accumulates grads into every
  // requires_grad tensor reachable from loss. Consumes the tape.
  void backward(const Tensor& loss);

  std::size_t recorded_ops() const { return records_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  Tensor make_output(Shape shape, std::initializer_list<Tensor> inputs);
  void record(std::function<void()> fn);

  std::uint64_t id_;
  bool grad_enabled_;
  bool consumed_ = false;
  std::vector<std::function<void()>> records_;
};

}  // namespace mimetic::ad
