#include "cdiffdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
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

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : shape_{0}, data_(std::make_shared<const std::vector<double>>()) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (values.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(shape_.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(a)];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return (*data_)[0];
}

std::optional<std::size_t> Tensor::node_id() const {
  if (node_ < 0) return std::nullopt;
  return static_cast<std::size_t>(node_);
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

// ---------------------------------------------------------------------------
// GradTape

Tensor GradTape::watch(const Tensor& value) {
  if (done_) throw ContractError("tape already consumed by backward()");
  Node node;
  node.numel = value.numel();
  node.shape = value.shape();
  nodes_.push_back(std::move(node));
  Tensor t = value;
  t.tape_ = this;
  t.node_ = static_cast<std::ptrdiff_t>(nodes_.size() - 1);
  return t;
}

Tensor GradTape::record(Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                        BackwardFn fn) {
  if (done_) throw ContractError("tape already consumed by backward()");
  Node node;
  node.numel = values.size();
  node.shape = shape;
  node.parents.reserve(inputs.size());
  for (const auto& in : inputs) node.parents.push_back(in.tape_ == this ? in.node_ : -1);
  node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  Tensor t(std::move(shape), std::move(values));
  t.tape_ = this;
  t.node_ = static_cast<std::ptrdiff_t>(nodes_.size() - 1);
  return t;
}

void GradTape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (loss.tape_ != this || loss.node_ < 0) throw ContractError("backward() loss is not recorded on this tape");
  if (done_) throw ContractError("backward() called twice on one tape");
  done_ = true;
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<std::size_t>(loss.node_)] = {1.0};
  std::vector<double*> ptrs;
  for (std::size_t i = static_cast<std::size_t>(loss.node_) + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (grads_[i].empty() || !node.backward) continue;
    ptrs.assign(node.parents.size(), nullptr);
    for (std::size_t p = 0; p < node.parents.size(); ++p) {
      const auto pid = node.parents[p];
      if (pid < 0) continue;
      auto& g = grads_[static_cast<std::size_t>(pid)];
      if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(pid)].numel, 0.0);
      ptrs[p] = g.data();
    }
    node.backward(grads_[i], ptrs);
    // Intermediate closures hold activations; release them as we go.
    node.backward = nullptr;
  }
}

Tensor GradTape::grad(const Tensor& t) const {
  if (t.tape_ != this || t.node_ < 0) throw ContractError("grad() of a tensor not recorded on this tape");
  const auto id = static_cast<std::size_t>(t.node_);
  if (id < grads_.size() && !grads_[id].empty()) return Tensor(t.shape(), grads_[id]);
  return Tensor::zeros(t.shape());
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values, std::span<const Tensor> inputs,
                   BackwardFn fn) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + " produced a non-finite value");
  }
  GradTape* tape = nullptr;
  for (const auto& in : inputs) {
    if (!in.requires_grad()) continue;
    if (tape && tape != in.tape()) throw ContractError(std::string(op) + ": inputs recorded on different tapes");
    tape = in.tape();
  }
  if (!tape) return Tensor(std::move(shape), std::move(values));
  return tape->record(std::move(shape), std::move(values), inputs, std::move(fn));
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> values,
                   std::initializer_list<Tensor> inputs, BackwardFn fn) {
  return make_result(op, std::move(shape), std::move(values), std::span<const Tensor>(inputs.begin(), inputs.size()),
                     std::move(fn));
}

// ---------------------------------------------------------------------------
// Branch recorder

namespace {
struct BranchState {
  int depth = 0;
  std::uint64_t hash = 1469598103934665603ULL;
};
thread_local BranchState g_branch;
}  // namespace

BranchRecorder::BranchRecorder() {
  if (g_branch.depth++ == 0) g_branch.hash = 1469598103934665603ULL;
}
BranchRecorder::~BranchRecorder() { --g_branch.depth; }
std::uint64_t BranchRecorder::signature() const { return g_branch.hash; }

bool branch_recording() { return g_branch.depth > 0; }

void note_branch(std::uint64_t tag, bool taken) {
  if (g_branch.depth == 0) return;
  g_branch.hash ^= (tag << 1) | static_cast<std::uint64_t>(taken);
  g_branch.hash *= 1099511628211ULL;
}

// ---------------------------------------------------------------------------
// GEMM

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
          const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  std::vector<double> bt;
  if (trans_b) {
    // b is n×k; materialize k×n so the inner loop runs contiguously over n.
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
    b = bt.data();
  }
  // Element (i, j) always accumulates its products in increasing p, skipping
  // zero a-entries, so results do not depend on the row blocking below.
  const std::size_t as_i = trans_a ? 1 : k, as_p = trans_a ? m : 1;
  auto at = [&](std::size_t i, std::size_t p) { return a[i * as_i + p * as_p]; };
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = at(i, p), a1 = at(i + 1, p), a2 = at(i + 2, p), a3 = at(i + 3, p);
      const double* bp = b + p * n;
      if (a0 != 0.0 && a1 != 0.0 && a2 != 0.0 && a3 != 0.0) {
        for (std::size_t j = 0; j < n; ++j) {
          const double bv = bp[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
        continue;
      }
      if (a0 != 0.0) for (std::size_t j = 0; j < n; ++j) c0[j] += a0 * bp[j];
      if (a1 != 0.0) for (std::size_t j = 0; j < n; ++j) c1[j] += a1 * bp[j];
      if (a2 != 0.0) for (std::size_t j = 0; j < n; ++j) c2[j] += a2 * bp[j];
      if (a3 != 0.0) for (std::size_t j = 0; j < n; ++j) c3[j] += a3 * bp[j];
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = at(i, p);
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

// Flat index into `src` for every flat index of `out`, under broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> idx(n);
  if (src == out) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  const std::size_t r = out.size();
  const std::size_t off = r - src.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = src.size(); i-- > 0;) {
    stride[i + off] = src[i] == 1 ? 0 : s;
    s *= src[i];
  }
  std::vector<std::size_t> ctr(r, 0);
  std::size_t cur = 0;
  for (std::size_t f = 0; f < n; ++f) {
    idx[f] = cur;
    for (std::size_t d = r; d-- > 0;) {
      if (++ctr[d] < out[d]) {
        cur += stride[d];
        break;
      }
      cur -= stride[d] * (ctr[d] - 1);
      ctr[d] = 0;
    }
  }
  return idx;
}

template <class Fwd, class DA, class DB>
Tensor binary_op(std::string_view name, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  Shape out = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = shape_numel(out);
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), out));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b.shape(), out));
  std::vector<double> v(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i) v[i] = fwd(av[(*ia)[i]], bv[(*ib)[i]]);
  return make_result(name, std::move(out), std::move(v), {a, b},
                     [a, b, ia, ib, da, db](std::span<const double> g, std::span<double* const> gi) {
                       const auto& av = a.values();
                       const auto& bv = b.values();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double x = av[(*ia)[i]];
                         const double y = bv[(*ib)[i]];
                         if (gi[0]) gi[0][(*ia)[i]] += g[i] * da(x, y);
                         if (gi[1]) gi[1][(*ib)[i]] += g[i] * db(x, y);
                       }
                     });
}

template <class Fwd, class Deriv>
Tensor unary_op(std::string_view name, const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto& av = a.values();
  std::vector<double> v(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) v[i] = fwd(av[i]);
  auto out = std::make_shared<std::vector<double>>(v);
  return make_result(name, a.shape(), std::move(v), {a},
                     [a, out, deriv](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       const auto& av = a.values();
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * deriv(av[i], (*out)[i]);
                     });
}

std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(ax);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary_op(
      "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  if (branch_recording()) {
    for (double x : a.data()) note_branch(1, x > 0.0);
  }
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor dropout(const Tensor& a, double rate, std::mt19937_64* rng) {
  if (rate <= 0.0 || rng == nullptr) return a;
  if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(a.numel());
  for (auto& m : *mask) m = keep(*rng) ? 1.0 / (1.0 - rate) : 0.0;
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * (*mask)[i];
  return make_result("dropout", a.shape(), std::move(v), {a},
                     [mask](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * (*mask)[i];
                     });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_result("reshape", std::move(shape), a.values(), {a},
                     [](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) throw ShapeError("permute rank mismatch for " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) out[i] = a.shape()[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * a.shape()[i];
  // Source index for each output position.
  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> ctr(r, 0);
  std::size_t cur = 0;
  for (std::size_t f = 0; f < n; ++f) {
    (*src)[f] = cur;
    for (std::size_t d = r; d-- > 0;) {
      const std::size_t st = in_stride[perm[d]];
      if (++ctr[d] < out[d]) {
        cur += st;
        break;
      }
      cur -= st * (ctr[d] - 1);
      ctr[d] = 0;
    }
  }
  std::vector<double> v(n);
  for (std::size_t f = 0; f < n; ++f) v[f] = a[(*src)[f]];
  return make_result("permute", std::move(out), std::move(v), {a},
                     [src](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t f = 0; f < g.size(); ++f) gi[0][(*src)[f]] += g[f];
                     });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shapes(a.shape(), shape) != shape) {
    throw ShapeError("broadcast_to " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  auto idx = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), shape));
  std::vector<double> v(idx->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[(*idx)[i]];
  return make_result("broadcast_to", shape, std::move(v), {a},
                     [idx](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][(*idx)[i]] += g[i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const std::size_t ax = norm_axis(axis, parts[0].rank());
  Shape out = parts[0].shape();
  out[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < out.size(); ++d) {
      if (d != ax && p.shape()[d] != out[d]) {
        throw ShapeError("concat shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
      }
    }
    out[ax] += p.shape()[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= out[d];
  for (std::size_t d = ax + 1; d < out.size(); ++d) inner *= out[d];
  std::vector<double> v(shape_numel(out));
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[ax] * inner);
  const std::size_t row = out[ax] * inner;
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                  v.begin() + static_cast<std::ptrdiff_t>(o * row + off));
    off += widths[k];
  }
  return make_result("concat", std::move(out), std::move(v), parts,
                      [widths, outer, row](std::span<const double> g, std::span<double* const> gi) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          if (gi[k]) {
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t i = 0; i < widths[k]; ++i)
                                gi[k][o * widths[k] + i] += g[o * row + off + i];
                          }
                          off += widths[k];
                        }
                      });
}

Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, a.rank());
  if (start + length > a.shape()[ax]) throw IndexError("slice out of range on " + shape_str(a.shape()));
  std::vector<std::size_t> index(length);
  std::iota(index.begin(), index.end(), start);
  return index_select(a, axis, index);
}

Tensor index_select(const Tensor& a, int axis, const std::vector<std::size_t>& index) {
  const std::size_t ax = norm_axis(axis, a.rank());
  const std::size_t len = a.shape()[ax];
  for (auto i : index) {
    if (i >= len) throw IndexError("index_select index " + std::to_string(i) + " >= " + std::to_string(len));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= a.shape()[d];
  for (std::size_t d = ax + 1; d < a.rank(); ++d) inner *= a.shape()[d];
  Shape out = a.shape();
  out[ax] = index.size();
  std::vector<double> v(shape_numel(out));
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < index.size(); ++k)
      for (std::size_t i = 0; i < inner; ++i)
        v[(o * index.size() + k) * inner + i] = av[(o * len + index[k]) * inner + i];
  return make_result("index_select", std::move(out), std::move(v), {a},
                     [index, outer, inner, len](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t k = 0; k < index.size(); ++k)
                           for (std::size_t i = 0; i < inner; ++i)
                             gi[0][(o * len + index[k]) * inner + i] += g[(o * index.size() + k) * inner + i];
                     });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  const std::size_t n = a.numel();
  return make_result("sum", Shape{}, {s}, {a}, [n](std::span<const double> g, std::span<double* const> gi) {
    if (!gi[0]) return;
    for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) throw ShapeError("matmul inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(a_batch, b_batch);
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch dims not broadcastable: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out = batch;
  out.push_back(m);
  out.push_back(n);
  std::vector<double> v(shape_numel(out));
  const std::size_t nb = shape_numel(batch);

  if (b.rank() == 2 && a_batch == batch) {
    // Shared weight: fold the batch into the row dimension.
    gemm(false, false, nb * m, n, k, a.values().data(), b.values().data(), v.data(), false);
    return make_result("matmul", std::move(out), std::move(v), {a, b},
                       [a, b, nb, m, n, k](std::span<const double> g, std::span<double* const> gi) {
                         if (gi[0]) gemm(false, true, nb * m, k, n, g.data(), b.values().data(), gi[0], true);
                         if (gi[1]) gemm(true, false, k, n, nb * m, a.values().data(), g.data(), gi[1], true);
                       });
  }

  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a_batch, batch));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b_batch, batch));
  for (std::size_t i = 0; i < nb; ++i) {
    gemm(false, false, m, n, k, a.values().data() + (*ia)[i] * m * k, b.values().data() + (*ib)[i] * k * n,
         v.data() + i * m * n, false);
  }
  return make_result("matmul", std::move(out), std::move(v), {a, b},
                     [a, b, ia, ib, nb, m, n, k](std::span<const double> g, std::span<double* const> gi) {
                       for (std::size_t i = 0; i < nb; ++i) {
                         const double* gp = g.data() + i * m * n;
                         if (gi[0])
                           gemm(false, true, m, k, n, gp, b.values().data() + (*ib)[i] * k * n,
                                gi[0] + (*ia)[i] * m * k, true);
                         if (gi[1])
                           gemm(true, false, k, n, m, a.values().data() + (*ia)[i] * m * k, gp,
                                gi[1] + (*ib)[i] * k * n, true);
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b) {
  if (w.rank() != 2) throw ShapeError("linear weight must be rank 2, got " + shape_str(w.shape()));
  Tensor y = matmul(x, w);
  if (b) y = add(y, *b);
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank());
  std::size_t outer = 1, inner = 1;
  const std::size_t len = x.shape()[ax];
  for (std::size_t d = 0; d < ax; ++d) outer *= x.shape()[d];
  for (std::size_t d = ax + 1; d < x.rank(); ++d) inner *= x.shape()[d];
  auto y = std::make_shared<std::vector<double>>(x.numel());
  const auto& xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, xv[base + l * inner]);
      double s = 0.0;
      for (std::size_t l = 0; l < len; ++l) {
        const double e = std::exp(xv[base + l * inner] - mx);
        (*y)[base + l * inner] = e;
        s += e;
      }
      for (std::size_t l = 0; l < len; ++l) (*y)[base + l * inner] /= s;
    }
  }
  return make_result("softmax", x.shape(), *y, {x},
                     [y, outer, inner, len](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t i = 0; i < inner; ++i) {
                           const std::size_t base = o * len * inner + i;
                           double dot = 0.0;
                           for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * (*y)[base + l * inner];
                           for (std::size_t l = 0; l < len; ++l) {
                             const std::size_t f = base + l * inner;
                             gi[0][f] += (*y)[f] * (g[f] - dot);
                           }
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1 || x.dim(-1) < 1) throw ShapeError("layer_norm needs a non-empty last axis");
  const std::size_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm affine params must have length " + std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  std::vector<double> v(x.numel());
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = is;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (xr[i] - mu) * is;
      (*xhat)[r * d + i] = h;
      v[r * d + i] = h * gv[i] + bv[i];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(v), {x, gamma, beta},
                     [xhat, inv, gamma, rows, d](std::span<const double> g, std::span<double* const> gi) {
                       const auto& gv = gamma.values();
                       std::vector<double> dx(d);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* gr = g.data() + r * d;
                         const double* hr = xhat->data() + r * d;
                         if (gi[1])
                           for (std::size_t i = 0; i < d; ++i) gi[1][i] += gr[i] * hr[i];
                         if (gi[2])
                           for (std::size_t i = 0; i < d; ++i) gi[2][i] += gr[i];
                         if (!gi[0]) continue;
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t i = 0; i < d; ++i) {
                           dx[i] = gr[i] * gv[i];
                           m1 += dx[i];
                           m2 += dx[i] * hr[i];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         for (std::size_t i = 0; i < d; ++i) gi[0][r * d + i] += (*inv)[r] * (dx[i] - m1 - hr[i] * m2);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b, std::size_t stride,
              std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d expects x[B,C,H,W] and w[Co,Ci,kh,kw], got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  }
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Ci) throw ShapeError("conv2d channel mismatch: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (stride == 0 || H + 2 * padding < kh || W + 2 * padding < kw) {
    throw ShapeError("conv2d geometry invalid for input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
  }
  if (b && b->numel() != Co) throw ShapeError("conv2d bias length mismatch");
  const std::size_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kw) / stride + 1;
  const std::size_t K = Ci * kh * kw, HW = Ho * Wo;

  // im2col: col[b][K][HW]
  auto cols = std::make_shared<std::vector<double>>(B * K * HW, 0.0);
  const auto& xv = x.values();
  for (std::size_t bi = 0; bi < B; ++bi) {
    double* col = cols->data() + bi * K * HW;
    for (std::size_t c = 0; c < Ci; ++c)
      for (std::size_t i = 0; i < kh; ++i)
        for (std::size_t j = 0; j < kw; ++j) {
          double* row = col + ((c * kh + i) * kw + j) * HW;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
            const double* xr = xv.data() + ((bi * Ci + c) * H + static_cast<std::size_t>(iy)) * W;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
              row[oy * Wo + ox] = xr[ix];
            }
          }
        }
  }
  std::vector<double> v(B * Co * HW);
  for (std::size_t bi = 0; bi < B; ++bi) {
    double* out = v.data() + bi * Co * HW;
    gemm(false, false, Co, HW, K, w.values().data(), cols->data() + bi * K * HW, out, false);
    if (b)
      for (std::size_t o = 0; o < Co; ++o)
        for (std::size_t p = 0; p < HW; ++p) out[o * HW + p] += (*b)[o];
  }
  std::initializer_list<Tensor> ins = {x, w, b ? *b : Tensor()};
  auto fn = [cols, w, B, Ci, H, W, Co, kh, kw, Ho, Wo, K, HW, stride, padding, has_b = b.has_value()](
                std::span<const double> g, std::span<double* const> gi) {
    std::vector<double> dcol(gi[0] ? K * HW : 0);
    for (std::size_t bi = 0; bi < B; ++bi) {
      const double* gp = g.data() + bi * Co * HW;
      if (gi[1]) gemm(false, true, Co, K, HW, gp, cols->data() + bi * K * HW, gi[1], true);
      if (has_b && gi[2])
        for (std::size_t o = 0; o < Co; ++o)
          for (std::size_t p = 0; p < HW; ++p) gi[2][o] += gp[o * HW + p];
      if (!gi[0]) continue;
      gemm(true, false, K, HW, Co, w.values().data(), gp, dcol.data(), false);
      for (std::size_t c = 0; c < Ci; ++c)
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const double* row = dcol.data() + ((c * kh + i) * kw + j) * HW;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              double* xr = gi[0] + ((bi * Ci + c) * H + static_cast<std::size_t>(iy)) * W;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(padding);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                xr[ix] += row[oy * Wo + ox];
              }
            }
          }
    }
  };
  return make_result("conv2d", Shape{B, Co, Ho, Wo}, std::move(v), ins, fn);
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (stride == 0 || kernel == 0 || H + 2 * padding < kernel || W + 2 * padding < kernel) {
    throw ShapeError("avg_pool2d geometry invalid for " + shape_str(x.shape()));
  }
  const std::size_t Ho = (H + 2 * padding - kernel) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - kernel) / stride + 1;
  auto window = [=](std::size_t o, std::size_t n) {
    const std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(o * stride) - static_cast<std::ptrdiff_t>(padding);
    const std::ptrdiff_t hi = lo + static_cast<std::ptrdiff_t>(kernel);
    return std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo, 0)),
                                               static_cast<std::size_t>(std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(n)))};
  };
  std::vector<double> v(B * C * Ho * Wo);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < B * C; ++p)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const auto [y0, y1] = window(oy, H);
        const auto [x0, x1] = window(ox, W);
        double s = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) s += xv[(p * H + y) * W + xx];
        v[(p * Ho + oy) * Wo + ox] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  return make_result("avg_pool2d", Shape{B, C, Ho, Wo}, std::move(v), {x},
                     [=](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t p = 0; p < B * C; ++p)
                         for (std::size_t oy = 0; oy < Ho; ++oy)
                           for (std::size_t ox = 0; ox < Wo; ++ox) {
                             const auto [y0, y1] = window(oy, H);
                             const auto [x0, x1] = window(ox, W);
                             const double share =
                                 g[(p * Ho + oy) * Wo + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
                             for (std::size_t y = y0; y < y1; ++y)
                               for (std::size_t xx = x0; xx < x1; ++xx) gi[0][(p * H + y) * W + xx] += share;
                           }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW == 0) throw ShapeError("global_avg_pool on empty spatial extent");
  std::vector<double> v(B * C);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < B * C; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < HW; ++i) s += xv[p * HW + i];
    v[p] = s / static_cast<double>(HW);
  }
  return make_result("global_avg_pool", Shape{B, C}, std::move(v), {x},
                     [B, C, HW](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t p = 0; p < B * C; ++p) {
                         const double share = g[p] / static_cast<double>(HW);
                         for (std::size_t i = 0; i < HW; ++i) gi[0][p * HW + i] += share;
                       }
                     });
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest2x expects [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> v(P * 4 * H * W);
  const auto& xv = x.values();
  for (std::size_t p = 0; p < P; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) v[(p * 2 * H + y) * 2 * W + xx] = xv[(p * H + y / 2) * W + xx / 2];
  return make_result("upsample_nearest2x", Shape{x.dim(0), x.dim(1), 2 * H, 2 * W}, std::move(v), {x},
                     [P, H, W](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       for (std::size_t p = 0; p < P; ++p)
                         for (std::size_t y = 0; y < 2 * H; ++y)
                           for (std::size_t xx = 0; xx < 2 * W; ++xx)
                             gi[0][(p * H + y / 2) * W + xx / 2] += g[(p * 2 * H + y) * 2 * W + xx];
                     });
}

}  // namespace cdiffdet
