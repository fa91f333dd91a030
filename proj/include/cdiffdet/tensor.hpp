#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// Broadcasting: binary elementwise ops follow right-aligned (numpy-style)
// rules. Dimensions are compared from the last axis backwards; each pair must
// be equal or one of them must be 1. A lower-rank operand is treated as having
// leading size-1 dimensions. No other implicit reshaping happens. matmul
// broadcasts only its leading batch dimensions, and a rank-2 right operand is
// shared across every batch entry.
//
// Tensors are immutable once constructed. A tensor produced by an op whose
// inputs live on a GradTape is itself recorded on that tape; tensors with no
// taped input are plain values. Every forward op checks its output for
// NaN/Inf and throws NumericError.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cdiffdet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class GradTape;

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return data_->size(); }

  std::span<const double> data() const { return *data_; }
  const std::vector<double>& values() const { return *data_; }
  double operator[](std::size_t flat) const { return (*data_)[flat]; }
  double item() const;

  bool requires_grad() const { return node_ >= 0; }
  std::optional<std::size_t> node_id() const;
  GradTape* tape() const { return tape_; }

  // Same values, no tape link.
  Tensor detach() const;

 private:
  friend class GradTape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  GradTape* tape_ = nullptr;
  std::ptrdiff_t node_ = -1;
};

// Backward closure of a recorded op. grad_in[i] points at the accumulation
// buffer of input i, or is nullptr when that input is not on the tape.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<double* const> grad_in)>;

class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Registers a leaf that requires a gradient.
  Tensor watch(const Tensor& value);

  // Reverse-topological accumulation from a scalar loss. May be called once.
  void backward(const Tensor& loss);

  // Gradient of a taped tensor; zeros when it was unreachable from the loss.
  Tensor grad(const Tensor& t) const;

  std::size_t size() const { return nodes_.size(); }

  Tensor record(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                BackwardFn fn);

 private:
  struct Node {
    std::size_t numel = 0;
    Shape shape;
    std::vector<std::ptrdiff_t> parents;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool done_ = false;
};

// Builds the result of an op: validates finiteness, and records it on the tape
// shared by the inputs (if any input is taped).
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, BackwardFn fn);
Tensor make_result(std::string_view op, Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                   BackwardFn fn);

// Branch signature used by the finite-difference oracle to notice when a
// perturbation moves a piecewise op (relu, clamp, min/max, abs) across a kink.
class BranchRecorder {
 public:
  BranchRecorder();
  ~BranchRecorder();
  BranchRecorder(const BranchRecorder&) = delete;
  BranchRecorder& operator=(const BranchRecorder&) = delete;
  std::uint64_t signature() const;
};
void note_branch(std::uint64_t tag, bool taken);
bool branch_recording();

// ---- elementwise -----------------------------------------------------------
Shape broadcast_shapes(const Shape& a, const Shape& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor square(const Tensor& a);
Tensor dropout(const Tensor& a, double rate, std::mt19937_64* rng);

// ---- shape -----------------------------------------------------------------
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor transpose_last2(const Tensor& a);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length);
Tensor index_select(const Tensor& a, int axis, const std::vector<std::size_t>& index);

// ---- reductions ------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- linear algebra / nn ---------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., in] * w[in, out] + b[out]; bias may be empty.
Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b);
Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b, std::size_t stride,
              std::size_t padding);
// Average over in-bounds taps only (padding excluded from the divisor).
Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding);
Tensor global_avg_pool(const Tensor& x);
Tensor upsample_nearest2x(const Tensor& x);

// Dense GEMM used by the ops above: C (m×n) (+)= op(A) (m×k) * op(B) (k×n).
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate);

}  // namespace cdiffdet
