// SPDX-License-Identifier: Apache-2.0

#include "ssmb/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace ssmb {

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

namespace detail {

std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
NodePtr<T> make_node(Shape shape, std::vector<T> data, const char* op) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->seq = detail::next_seq();
  return node;
}

// Links `out` to its inputs when any of them participates in differentiation.
template <typename T>
bool attach(const NodePtr<T>& out, std::initializer_list<NodePtr<T>> inputs) {
  if (!g_grad_enabled) return false;
  bool any = false;
  for (const auto& in : inputs) any = any || in->requires_grad;
  if (!any) return false;
  out->requires_grad = true;
  out->parents.assign(inputs.begin(), inputs.end());
  return true;
}

template <typename T>
bool attach(const NodePtr<T>& out, const std::vector<NodePtr<T>>& inputs) {
  if (!g_grad_enabled) return false;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n->requires_grad; });
  if (!any) return false;
  out->requires_grad = true;
  out->parents = inputs;
  return true;
}

std::vector<std::size_t> contiguous_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

// Strides of `in` aligned to `out`'s rank, zero along broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const auto own = contiguous_strides(in);
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[offset + i] = in[i] == 1 ? 0 : own[i];
  }
  return strides;
}

// Visits every output element in row-major order with the matching operand offsets.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, Fn&& fn) {
  const std::size_t total = shape_numel(out);
  if (total == 0) return;
  if (out.empty()) {
    fn(0, 0, 0);
    return;
  }
  const std::size_t rank = out.size();
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> counter(rank, 0);
  std::size_t base_a = 0, base_b = 0;
  for (std::size_t i = 0; i < total; i += inner) {
    for (std::size_t k = 0; k < inner; ++k) fn(i + k, base_a + k * ia_step, base_b + k * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++counter[d];
      base_a += sa[d];
      base_b += sb[d];
      if (counter[d] < out[d]) break;
      base_a -= sa[d] * out[d];
      base_b -= sb[d] * out[d];
      counter[d] = 0;
    }
  }
}

std::vector<std::size_t> normalize_axes(std::vector<std::size_t> axes, std::size_t rank) {
  if (axes.empty()) {
    axes.resize(rank);
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return axes;
  }
  for (auto a : axes) {
    if (a >= rank) throw AxisError("axis " + std::to_string(a) + " out of range for rank " + std::to_string(rank));
  }
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) throw AxisError("duplicate reduction axis");
  return axes;
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor() : node_(make_node<T>(Shape{}, std::vector<T>{T(0)}, "leaf")) {}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  return Tensor(make_node<T>(shape, std::vector<T>(shape_numel(shape), T(0)), "leaf"));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  return Tensor(make_node<T>(shape, std::vector<T>(shape_numel(shape), value), "leaf"));
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, std::vector<T> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) + " values");
  }
  return Tensor(make_node<T>(shape, std::move(values), "leaf"));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(make_node<T>(Shape{}, std::vector<T>{value}, "leaf"));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return from(Shape{values.size()}, std::vector<T>(values));
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw AxisError("axis " + std::to_string(axis) + " out of range");
  return node_->shape[axis];
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf()) throw Error("cannot mutate a recorded operation output");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (auto i : index) {
    if (i >= node_->shape[d]) throw ShapeError("index out of range");
    flat = flat * node_->shape[d] + i;
    ++d;
  }
  return node_->data[flat];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw Error("requires_grad can only be set on leaves");
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (!has_grad()) return zeros(shape());
  return from(shape(), node_->grad);
}

template <typename T>
void Tensor<T>::zero_grad() {
  node_->grad.clear();
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(make_node<T>(node_->shape, node_->data, "leaf"));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto copy = make_node<T>(node_->shape, node_->data, "leaf");
  copy->requires_grad = node_->requires_grad;
  return Tensor(copy);
}

template <typename T>
template <typename U>
Tensor<U> Tensor<T>::cast() const {
  std::vector<U> values(node_->data.size());
  std::transform(node_->data.begin(), node_->data.end(), values.begin(), [](T v) { return static_cast<U>(v); });
  auto out = Tensor<U>::from(node_->shape, std::move(values));
  out.set_requires_grad(node_->requires_grad);
  return out;
}

// ---- Tape ----------------------------------------------------------------

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& loss) {
  Tape tape;
  std::unordered_set<const detail::Node<T>*> seen;
  std::vector<std::shared_ptr<detail::Node<T>>> stack{loss.node()};
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    if (!node->requires_grad || !seen.insert(node.get()).second) continue;
    if (!node->is_leaf()) tape.entries_.push_back(node);
    for (const auto& p : node->parents) stack.push_back(p);
  }
  std::sort(tape.entries_.begin(), tape.entries_.end(),
            [](const auto& a, const auto& b) { return a->seq < b->seq; });
  return tape;
}

template <typename T>
std::vector<std::string> Tape<T>::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.emplace_back(e->op);
  return names;
}

template <typename T>
void Tape<T>::replay_backward(const Tensor<T>& loss) const {
  for (const auto& e : entries_) e->grad.clear();
  auto& seed = loss.node()->grad_buffer();
  seed[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1 || loss.rank() != 0) {
    throw ShapeError("backward requires a rank-0 loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw Error("loss does not participate in differentiation");
  Tape<T>::record(loss).replay_backward(loss);
}

// ---- elementwise ---------------------------------------------------------

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

namespace {

const char* binary_name(BinaryOp op) {
  switch (op) {
    case BinaryOp::kAdd: return "add";
    case BinaryOp::kSub: return "sub";
    case BinaryOp::kMul: return "mul";
    case BinaryOp::kDiv: return "div";
    case BinaryOp::kMax: return "max-with";
  }
  return "?";
}

const char* unary_name(UnaryOp op) {
  switch (op) {
    case UnaryOp::kRelu: return "relu";
    case UnaryOp::kSqrt: return "sqrt";
    case UnaryOp::kExp: return "exp";
    case UnaryOp::kLog: return "log";
    case UnaryOp::kNeg: return "negate";
  }
  return "?";
}

}  // namespace

template <typename T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const auto av = a.data();
  const auto bv = b.data();
  if (op == BinaryOp::kDiv && std::any_of(bv.begin(), bv.end(), [](T v) { return v == T(0); })) {
    throw DomainError("division by exact zero");
  }
  std::vector<T> out(shape_numel(out_shape));
  switch (op) {
    case BinaryOp::kAdd:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] + bv[ib]; });
      break;
    case BinaryOp::kSub:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] - bv[ib]; });
      break;
    case BinaryOp::kMul:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] * bv[ib]; });
      break;
    case BinaryOp::kDiv:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = av[ia] / bv[ib]; });
      break;
    case BinaryOp::kMax:
      for_each_broadcast(out_shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        out[i] = av[ia] >= bv[ib] ? av[ia] : bv[ib];
      });
      break;
  }
  auto node = make_node<T>(out_shape, std::move(out), binary_name(op));
  if (attach(node, {a.node(), b.node()})) {
    node->backward = [op, an = a.node(), bn = b.node(), sa, sb](detail::Node<T>& self) {
      const auto& g = self.grad;
      const auto& av = an->data;
      const auto& bv = bn->data;
      T* ga = an->requires_grad ? an->grad_buffer().data() : nullptr;
      T* gb = bn->requires_grad ? bn->grad_buffer().data() : nullptr;
      for_each_broadcast(self.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        const T gi = g[i];
        switch (op) {
          case BinaryOp::kAdd:
            if (ga) ga[ia] += gi;
            if (gb) gb[ib] += gi;
            break;
          case BinaryOp::kSub:
            if (ga) ga[ia] += gi;
            if (gb) gb[ib] -= gi;
            break;
          case BinaryOp::kMul:
            if (ga) ga[ia] += gi * bv[ib];
            if (gb) gb[ib] += gi * av[ia];
            break;
          case BinaryOp::kDiv:
            if (ga) ga[ia] += gi / bv[ib];
            if (gb) gb[ib] -= gi * av[ia] / (bv[ib] * bv[ib]);
            break;
          case BinaryOp::kMax:
            if (av[ia] >= bv[ib]) {
              if (ga) ga[ia] += gi;
            } else if (gb) {
              gb[ib] += gi;
            }
            break;
        }
      });
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> elementwise(UnaryOp op, const Tensor<T>& a) {
  const auto av = a.data();
  std::vector<T> out(av.size());
  switch (op) {
    case UnaryOp::kRelu:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
      break;
    case UnaryOp::kSqrt:
      for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] < T(0)) throw DomainError("sqrt of negative value");
        out[i] = std::sqrt(av[i]);
      }
      break;
    case UnaryOp::kExp:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
      break;
    case UnaryOp::kLog:
      for (std::size_t i = 0; i < av.size(); ++i) {
        if (!(av[i] > T(0))) throw DomainError("log of non-positive value");
        out[i] = std::log(av[i]);
      }
      break;
    case UnaryOp::kNeg:
      for (std::size_t i = 0; i < av.size(); ++i) out[i] = -av[i];
      break;
  }
  auto node = make_node<T>(a.shape(), std::move(out), unary_name(op));
  if (attach(node, {a.node()})) {
    node->backward = [op, an = a.node()](detail::Node<T>& self) {
      auto& ga = an->grad_buffer();
      const auto& x = an->data;
      const auto& y = self.data;
      const auto& g = self.grad;
      for (std::size_t i = 0; i < g.size(); ++i) {
        switch (op) {
          case UnaryOp::kRelu: ga[i] += x[i] > T(0) ? g[i] : T(0); break;
          case UnaryOp::kSqrt: ga[i] += g[i] / (T(2) * y[i]); break;
          case UnaryOp::kExp: ga[i] += g[i] * y[i]; break;
          case UnaryOp::kLog: ga[i] += g[i] / x[i]; break;
          case UnaryOp::kNeg: ga[i] -= g[i]; break;
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---- matmul ----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = av[i * k + p];
      const T* brow = bv.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
    }
  }
  auto node = make_node<T>(Shape{m, n}, std::move(out), "matmul");
  if (attach(node, {a.node(), b.node()})) {
    node->backward = [an = a.node(), bn = b.node(), m, k, n](detail::Node<T>& self) {
      const auto& g = self.grad;
      if (an->requires_grad) {
        auto& ga = an->grad_buffer();
        const auto& bv = bn->data;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[p * n + j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        const auto& av = an->data;
        for (std::size_t p = 0; p < k; ++p) {
          T* grow = gb.data() + p * n;
          for (std::size_t i = 0; i < m; ++i) {
            const T aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) grow[j] += aip * g[i * n + j];
          }
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---- conv2d ----------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, Conv2dParams params) {
  if (x.rank() != 4 || weight.rank() != 4) throw ShapeError("conv2d expects rank-4 input and kernel");
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d kernel channels " + std::to_string(weight.dim(1)) + " != input channels " + std::to_string(cin));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d kernel extents must be odd");
  if (bias.shape() != Shape{cout}) throw ShapeError("conv2d bias shape " + shape_str(bias.shape()));
  const std::size_t stride = params.stride, pad = params.padding;
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  if (h + 2 * pad < kh || w + 2 * pad < kw) throw ShapeError("conv2d kernel larger than padded input");
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;

  // Output range [lo, hi) whose input coordinate o*stride - pad + k lies inside [0, extent).
  auto valid_range = [stride, pad](std::size_t k, std::size_t extent, std::size_t out_extent) {
    std::size_t lo = 0;
    while (lo < out_extent && lo * stride + k < pad) ++lo;
    std::size_t hi = lo;
    while (hi < out_extent && hi * stride + k - pad < extent) ++hi;
    return std::pair{lo, hi};
  };

  const auto xv = x.data();
  const auto wv = weight.data();
  const auto bv = bias.data();
  std::vector<std::pair<std::size_t, std::size_t>> rows(kh), cols(kw);
  for (std::size_t i = 0; i < kh; ++i) rows[i] = valid_range(i, h, ho);
  for (std::size_t j = 0; j < kw; ++j) cols[j] = valid_range(j, w, wo);
  std::vector<T> out(batch * cout * ho * wo);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < cout; ++o) {
      T* plane = out.data() + (n * cout + o) * ho * wo;
      std::fill(plane, plane + ho * wo, bv[o]);
      for (std::size_t c = 0; c < cin; ++c) {
        const T* in = xv.data() + (n * cin + c) * h * w;
        for (std::size_t i = 0; i < kh; ++i) {
          const auto [oh_lo, oh_hi] = rows[i];
          for (std::size_t j = 0; j < kw; ++j) {
            const T wgt = wv[((o * cin + c) * kh + i) * kw + j];
            const auto [ow_lo, ow_hi] = cols[j];
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              const T* irow = in + (oh * stride + i - pad) * w;
              T* orow = plane + oh * wo;
              if (stride == 1) {
                // Contiguous rows: lets the compiler vectorize.
                const T* src = irow + ow_lo + j - pad;
                T* dst = orow + ow_lo;
                const std::size_t len = ow_hi - ow_lo;
                for (std::size_t k = 0; k < len; ++k) dst[k] += wgt * src[k];
              } else {
                for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wgt * irow[ow * stride + j - pad];
              }
            }
          }
        }
      }
    }
  }

  auto node = make_node<T>(Shape{batch, cout, ho, wo}, std::move(out), "conv2d");
  if (attach(node, {x.node(), weight.node(), bias.node()})) {
    node->backward = [xn = x.node(), wn = weight.node(), bn = bias.node(), batch, cin, h, w, cout, kh, kw, ho, wo,
                      valid_range, stride, pad](detail::Node<T>& self) {
      const auto& g = self.grad;
      T* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
      T* gw = wn->requires_grad ? wn->grad_buffer().data() : nullptr;
      const auto& xv = xn->data;
      const auto& wv = wn->data;
      if (bn->requires_grad) {
        auto& gb = bn->grad_buffer();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t o = 0; o < cout; ++o) {
            const T* gp = g.data() + (n * cout + o) * ho * wo;
            T acc = T(0);
            for (std::size_t q = 0; q < ho * wo; ++q) acc += gp[q];
            gb[o] += acc;
          }
        }
      }
      if (!gx && !gw) return;
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t o = 0; o < cout; ++o) {
          const T* gp = g.data() + (n * cout + o) * ho * wo;
          for (std::size_t c = 0; c < cin; ++c) {
            const std::size_t in_off = (n * cin + c) * h * w;
            for (std::size_t i = 0; i < kh; ++i) {
              const auto [oh_lo, oh_hi] = valid_range(i, h, ho);
              for (std::size_t j = 0; j < kw; ++j) {
                const std::size_t widx = ((o * cin + c) * kh + i) * kw + j;
                const T wgt = wv[widx];
                const auto [ow_lo, ow_hi] = valid_range(j, w, wo);
                T wacc = T(0);
                for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::size_t irow = in_off + (oh * stride + i - pad) * w;
                  const T* grow = gp + oh * wo;
                  if (gx) {
                    T* gxrow = gx + irow;
                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) gxrow[ow * stride + j - pad] += grow[ow] * wgt;
                  }
                  if (gw) {
                    const T* xrow = xv.data() + irow;
                    for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) wacc += grow[ow] * xrow[ow * stride + j - pad];
                  }
                }
                if (gw) gw[widx] += wacc;
              }
            }
          }
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t window) {
  if (x.rank() != 4) throw ShapeError("max_pool2d expects rank-4 input");
  if (window == 0 || x.dim(2) % window != 0 || x.dim(3) % window != 0) {
    throw ShapeError("max_pool2d window " + std::to_string(window) + " does not tile " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / window, wo = w / window;
  const auto xv = x.data();
  std::vector<T> out(planes * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oh = 0; oh < ho; ++oh) {
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::size_t best = p * h * w + oh * window * w + ow * window;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = p * h * w + (oh * window + i) * w + ow * window + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (p * ho + oh) * wo + ow;
        out[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  auto node = make_node<T>(Shape{x.dim(0), x.dim(1), ho, wo}, std::move(out), "max_pool2d");
  if (attach(node, {x.node()})) {
    node->backward = [xn = x.node(), argmax = std::move(argmax)](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += self.grad[o];
    };
  }
  return Tensor<T>(node);
}

// ---- reductions ----------------------------------------------------------

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& x, std::vector<std::size_t> axes, bool keepdims) {
  const Shape& in_shape = x.shape();
  axes = normalize_axes(std::move(axes), in_shape.size());
  std::vector<bool> reduced(in_shape.size(), false);
  for (auto a : axes) reduced[a] = true;

  Shape kept_shape(in_shape.size());
  Shape out_shape;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    kept_shape[d] = reduced[d] ? 1 : in_shape[d];
    if (!reduced[d] || keepdims) out_shape.push_back(kept_shape[d]);
  }
  // Input offset -> output offset through zero strides on reduced axes.
  const auto out_strides = broadcast_strides(kept_shape, in_shape);
  const std::vector<std::size_t> unit(in_shape.size(), 0);
  const std::size_t out_count = shape_numel(kept_shape);
  const std::size_t group = out_count == 0 ? 0 : x.numel() / out_count;
  if (group == 0) throw ShapeError("reduction over empty extent");

  const auto xv = x.data();
  std::vector<T> out(out_count, T(0));
  std::vector<std::size_t> argmax;
  if (op == ReduceOp::kMax) {
    argmax.assign(out_count, std::numeric_limits<std::size_t>::max());
    for_each_broadcast(in_shape, out_strides, unit, [&](std::size_t i, std::size_t o, std::size_t) {
      if (argmax[o] == std::numeric_limits<std::size_t>::max() || xv[i] > out[o]) {
        out[o] = xv[i];
        argmax[o] = i;
      }
    });
  } else {
    for_each_broadcast(in_shape, out_strides, unit, [&](std::size_t i, std::size_t o, std::size_t) { out[o] += xv[i]; });
    if (op == ReduceOp::kMean) {
      for (auto& v : out) v /= static_cast<T>(group);
    }
  }
  const char* name = op == ReduceOp::kSum ? "sum" : op == ReduceOp::kMean ? "mean" : "max";
  auto node = make_node<T>(out_shape, std::move(out), name);
  if (attach(node, {x.node()})) {
    node->backward = [op, xn = x.node(), out_strides, unit, group, argmax = std::move(argmax)](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      const auto& g = self.grad;
      if (op == ReduceOp::kMax) {
        for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[o];
        return;
      }
      const T scale = op == ReduceOp::kMean ? T(1) / static_cast<T>(group) : T(1);
      for_each_broadcast(xn->shape, out_strides, unit, [&](std::size_t i, std::size_t o, std::size_t) { gx[i] += g[o] * scale; });
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw AxisError("softmax axis out of range");
  const auto xv = x.data();
  if (std::any_of(xv.begin(), xv.end(), [](T v) { return std::isnan(v); })) throw DomainError("softmax of NaN input");
  const Shape& s = x.shape();
  const std::size_t n = s[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  std::vector<T> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      T total = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  auto node = make_node<T>(s, std::move(out), "softmax");
  if (attach(node, {x.node()})) {
    node->backward = [xn = x.node(), outer, inner, n](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      const auto& y = self.data;
      const auto& g = self.grad;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = T(0);
          for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = base + k * inner;
            gx[i] += y[i] * (g[i] - dot);
          }
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw ShapeError("cross_entropy expects B×K logits with B labels");
  }
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  const auto xv = logits.data();
  std::vector<T> probs(xv.size());
  T loss = T(0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) throw ShapeError("cross_entropy label out of range");
    const T* row = xv.data() + b * classes;
    const T mx = *std::max_element(row, row + classes);
    T total = T(0);
    for (std::size_t k = 0; k < classes; ++k) {
      probs[b * classes + k] = std::exp(row[k] - mx);
      total += probs[b * classes + k];
    }
    for (std::size_t k = 0; k < classes; ++k) probs[b * classes + k] /= total;
    loss += -(row[labels[b]] - mx - std::log(total));
  }
  loss /= static_cast<T>(batch);
  auto node = make_node<T>(Shape{}, std::vector<T>{loss}, "cross_entropy");
  if (attach(node, {logits.node()})) {
    std::vector<std::size_t> owned(labels.begin(), labels.end());
    node->backward = [xn = logits.node(), probs = std::move(probs), owned = std::move(owned), batch,
                      classes](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      const T scale = self.grad[0] / static_cast<T>(batch);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t k = 0; k < classes; ++k) {
          const T target = k == owned[b] ? T(1) : T(0);
          gx[b * classes + k] += (probs[b * classes + k] - target) * scale;
        }
      }
    };
  }
  return Tensor<T>(node);
}

// ---- shape manipulation --------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  auto node = make_node<T>(shape, std::vector<T>(x.data().begin(), x.data().end()), "reshape");
  if (attach(node, {x.node()})) {
    node->backward = [xn = x.node()](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw AxisError("concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.shape()[d] != first[d]) throw ShapeError("concat extent mismatch on axis " + std::to_string(d));
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[axis] * inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * out_row + offset);
    }
    offset += chunk;
  }
  auto node = make_node<T>(out_shape, std::move(out), "concat");
  std::vector<NodePtr<T>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  if (attach(node, inputs)) {
    node->backward = [inputs, offsets, outer, inner, axis, out_row](detail::Node<T>& self) {
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (!inputs[k]->requires_grad) continue;
        auto& gp = inputs[k]->grad_buffer();
        const std::size_t chunk = inputs[k]->shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = self.grad.data() + o * out_row + offsets[k];
          for (std::size_t q = 0; q < chunk; ++q) gp[o * chunk + q] += src[q];
        }
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) throw AxisError("slice axis out of range");
  if (begin >= end || end > x.dim(axis)) throw ShapeError("slice range out of bounds");
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t in_row = s[axis] * inner;
  const std::size_t chunk = (end - begin) * inner;
  const auto xv = x.data();
  std::vector<T> out(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + o * in_row + begin * inner, chunk, out.data() + o * chunk);
  }
  auto node = make_node<T>(out_shape, std::move(out), "slice");
  if (attach(node, {x.node()})) {
    node->backward = [xn = x.node(), outer, in_row, chunk, start = begin * inner](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t q = 0; q < chunk; ++q) gx[o * in_row + start + q] += self.grad[o * chunk + q];
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> rows) {
  if (x.rank() == 0) throw ShapeError("index_select on a scalar");
  if (rows.empty()) throw ShapeError("index_select with no rows");
  const std::size_t row = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  const auto xv = x.data();
  std::vector<T> out(rows.size() * row);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) throw ShapeError("index_select row out of range");
    std::copy_n(xv.data() + rows[r] * row, row, out.data() + r * row);
  }
  auto node = make_node<T>(out_shape, std::move(out), "index_select");
  if (attach(node, {x.node()})) {
    std::vector<std::size_t> owned(rows.begin(), rows.end());
    node->backward = [xn = x.node(), owned = std::move(owned), row](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      for (std::size_t r = 0; r < owned.size(); ++r) {
        for (std::size_t q = 0; q < row; ++q) gx[owned[r] * row + q] += self.grad[r * row + q];
      }
    };
  }
  return Tensor<T>(node);
}

template <typename T>
Tensor<T> take_per_row(const Tensor<T>& x, std::span<const std::size_t> cols) {
  if (x.rank() != 2 || x.dim(0) != cols.size()) throw ShapeError("take_per_row expects B×K input and B indices");
  const std::size_t k = x.dim(1);
  const auto xv = x.data();
  std::vector<T> out(cols.size());
  for (std::size_t b = 0; b < cols.size(); ++b) {
    if (cols[b] >= k) throw ShapeError("take_per_row column out of range");
    out[b] = xv[b * k + cols[b]];
  }
  auto node = make_node<T>(Shape{cols.size(), 1}, std::move(out), "take_per_row");
  if (attach(node, {x.node()})) {
    std::vector<std::size_t> owned(cols.begin(), cols.end());
    node->backward = [xn = x.node(), owned = std::move(owned), k](detail::Node<T>& self) {
      auto& gx = xn->grad_buffer();
      for (std::size_t b = 0; b < owned.size(); ++b) gx[b * k + owned[b]] += self.grad[b];
    };
  }
  return Tensor<T>(node);
}

// ---- instantiations ----------------------------------------------------------

#define SSMB_INSTANTIATE_TENSOR(T)                                                                  \
  template class Tensor<T>;                                                                         \
  template class Tape<T>;                                                                           \
  template void backward<T>(const Tensor<T>&);                                                      \
  template Tensor<T> elementwise<T>(BinaryOp, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> elementwise<T>(UnaryOp, const Tensor<T>&);                                     \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv2dParams); \
  template Tensor<T> max_pool2d<T>(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> reduce<T>(ReduceOp, const Tensor<T>&, std::vector<std::size_t>, bool);         \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> cross_entropy<T>(const Tensor<T>&, std::span<const std::size_t>);              \
  template Tensor<T> reshape<T>(const Tensor<T>&, const Shape&);                                    \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                         \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);             \
  template Tensor<T> index_select<T>(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> take_per_row<T>(const Tensor<T>&, std::span<const std::size_t>);

SSMB_INSTANTIATE_TENSOR(float)
SSMB_INSTANTIATE_TENSOR(double)

template Tensor<double> Tensor<float>::cast<double>() const;
template Tensor<float> Tensor<double>::cast<float>() const;
template Tensor<float> Tensor<float>::cast<float>() const;
template Tensor<double> Tensor<double>::cast<double>() const;

}  // namespace ssmb
