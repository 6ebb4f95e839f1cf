#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wholeheart/common.hpp"
#include "wholeheart/tensor.hpp"

namespace wholeheart {

namespace kern {

// C(m x n) = A(m x k) * B(k x n), i-k-j so the inner loop streams rows of B.
template <typename T>
void matmul_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
               bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (!accumulate) {
      for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
    }
    const T* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C(m x n) = A(p x m)^T * B(p x n). Same streaming access pattern as nn.
template <typename T>
void matmul_tn(const T* a, const T* b, T* c, int64_t p_dim, int64_t m,
               int64_t n, bool accumulate) {
  if (!accumulate) {
    for (int64_t i = 0; i < m * n; ++i) c[i] = T(0);
  }
  for (int64_t p = 0; p < p_dim; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (int64_t i = 0; i < m; ++i) {
      const T aip = ap[i];
      T* ci = c + i * n;
      for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <typename T>
void transpose(const T* a, T* at, int64_t m, int64_t n) {
  constexpr int64_t kBlock = 32;
  for (int64_t ib = 0; ib < m; ib += kBlock) {
    int64_t ie = std::min(m, ib + kBlock);
    for (int64_t jb = 0; jb < n; jb += kBlock) {
      int64_t je = std::min(n, jb + kBlock);
      for (int64_t i = ib; i < ie; ++i) {
        for (int64_t j = jb; j < je; ++j) at[j * m + i] = a[i * n + j];
      }
    }
  }
}

// C(m x n) = A(m x k) * B(n x k)^T, via an explicit transpose of B so the
// inner product turns back into the vectorizable nn form.
template <typename T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n,
               bool accumulate) {
  std::vector<T> bt(size_t(k * n));
  transpose(b, bt.data(), n, k);
  matmul_nn(a, bt.data(), c, m, k, n, accumulate);
}

}  // namespace kern

enum class Op : uint8_t {
  kLeaf,
  kMatmul,
  kAdd,
  kScale,
  kLayerNorm,
  kSoftmax,
  kGelu,
  kGatherRows,
  kScatterRows,
  kRepeatRows,
  kMeanRows,
  kConcat,
  kSlice,
  kColsToRows,
  kNeighborhood3x3,
  kMse,
  kCrossEntropy,
  kSoftDice,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kScale: return "scale";
    case Op::kLayerNorm: return "layer_norm";
    case Op::kSoftmax: return "softmax";
    case Op::kGelu: return "gelu";
    case Op::kGatherRows: return "gather_rows";
    case Op::kScatterRows: return "scatter_rows";
    case Op::kRepeatRows: return "repeat_rows";
    case Op::kMeanRows: return "mean_rows";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kColsToRows: return "cols_to_rows";
    case Op::kNeighborhood3x3: return "neighborhood3x3";
    case Op::kMse: return "mse";
    case Op::kCrossEntropy: return "cross_entropy";
    case Op::kSoftDice: return "soft_dice";
  }
  return "?";
}

// Tape-based reverse-mode autodiff over 2-D tensors. Nodes are appended in
// topological order during the forward pass; backward() walks the tape in
// reverse, accumulating into input gradients and releasing intermediate
// buffers as soon as the sweep has passed them.
template <typename T>
class GraphT {
 public:
  using NodeId = int32_t;

  struct Node {
    Op op = Op::kLeaf;
    bool requires_grad = false;
    std::vector<NodeId> inputs;
    TensorT<T> value;
    TensorT<T> grad;
    TensorT<T> saved;            // layer_norm keeps x-hat here
    std::vector<double> stats;   // per-row/per-class scalars an op saves
    std::vector<int32_t> idx;    // row indices or class targets
    std::vector<uint8_t> bytes;  // include flags / class-availability bitmasks
    double alpha = 0.0;          // scale factor or epsilon
    int64_t p0 = 0, p1 = 0, p2 = 0;
    bool flag = false;  // matmul trans_b
    int32_t ctx = -1;
  };

  explicit GraphT(bool check_finite = false) : check_finite_(check_finite) {
    nodes_.reserve(1024);
    contexts_.push_back("");
  }

  // Label subsequent nodes for error messages ("encoder block 2", ...).
  void set_context(std::string name) {
    contexts_.push_back(std::move(name));
  }

  size_t size() const { return nodes_.size(); }

  const TensorT<T>& value(NodeId id) const {
    const Node& n = node(id);
    if (n.value.data.empty()) {
      throw ConfigError("value of node " + std::to_string(id) +
                        " was released by backward()");
    }
    return n.value;
  }

  const TensorT<T>& grad(NodeId id) const {
    const Node& n = node(id);
    if (n.grad.data.empty()) {
      throw ConfigError(std::string("node ") + std::to_string(id) +
                        " has no gradient");
    }
    return n.grad;
  }

  // Gradient of a bound parameter, or nullptr if it never entered the graph.
  const TensorT<T>* grad_of(const TensorT<T>* p) const {
    auto it = params_.find(p);
    if (it == params_.end()) return nullptr;
    const Node& n = node(it->second);
    return n.grad.data.empty() ? nullptr : &n.grad;
  }

  NodeId input(TensorT<T> v) {
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = false;
    n.value = std::move(v);
    return push(std::move(n));
  }

  // Differentiable leaf bound to external storage; repeated binds of the same
  // tensor return the same node so gradients accumulate in one place.
  NodeId param(TensorT<T>* p) {
    auto it = params_.find(p);
    if (it != params_.end()) return it->second;
    Node n;
    n.op = Op::kLeaf;
    n.requires_grad = true;
    n.value = *p;
    NodeId id = push(std::move(n));
    params_.emplace(p, id);
    return id;
  }

  NodeId matmul(NodeId a, NodeId b, bool trans_b = false) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    require_matrix("matmul", av);
    require_matrix("matmul", bv);
    int64_t m = av.rows(), k = av.cols();
    int64_t bk = trans_b ? bv.cols() : bv.rows();
    int64_t n = trans_b ? bv.rows() : bv.cols();
    if (k != bk) {
      fail_shape("matmul", "inner dimensions disagree: " + shape_str(av.shape) +
                               (trans_b ? " x T" : " x ") + shape_str(bv.shape));
    }
    Node nd = make(Op::kMatmul, {a, b});
    nd.flag = trans_b;
    nd.value = TensorT<T>::zeros({m, n});
    if (trans_b) {
      kern::matmul_nt(av.data.data(), bv.data.data(), nd.value.data.data(), m, k, n, false);
    } else {
      kern::matmul_nn(av.data.data(), bv.data.data(), nd.value.data.data(), m, k, n, false);
    }
    return push(std::move(nd));
  }

  // Same-shape addition, or broadcast of a single-row bias across rows.
  NodeId add(NodeId a, NodeId b) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    require_matrix("add", av);
    require_matrix("add", bv);
    bool bias = bv.rows() == 1 && av.rows() != 1;
    if (av.cols() != bv.cols() || (!bias && av.rows() != bv.rows())) {
      fail_shape("add", shape_str(av.shape) + " + " + shape_str(bv.shape));
    }
    Node nd = make(Op::kAdd, {a, b});
    nd.value = av;
    if (bias) {
      for (int64_t r = 0; r < av.rows(); ++r) {
        T* out = nd.value.row_ptr(r);
        const T* brow = bv.row_ptr(0);
        for (int64_t c = 0; c < av.cols(); ++c) out[c] += brow[c];
      }
    } else {
      for (size_t i = 0; i < bv.data.size(); ++i) nd.value.data[i] += bv.data[i];
    }
    return push(std::move(nd));
  }

  NodeId scale(NodeId a, double factor) {
    const TensorT<T>& av = value(a);
    require_matrix("scale", av);
    Node nd = make(Op::kScale, {a});
    nd.alpha = factor;
    nd.value = av;
    for (T& x : nd.value.data) x = T(double(x) * factor);
    return push(std::move(nd));
  }

  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, double eps = 1e-5) {
    const TensorT<T>& xv = value(x);
    const TensorT<T>& gv = value(gamma);
    const TensorT<T>& bv = value(beta);
    require_matrix("layer_norm", xv);
    int64_t d = xv.cols();
    if (gv.rows() != 1 || gv.cols() != d || bv.rows() != 1 || bv.cols() != d) {
      fail_shape("layer_norm", "gamma/beta must be [1, " + std::to_string(d) + "]");
    }
    Node nd = make(Op::kLayerNorm, {x, gamma, beta});
    nd.alpha = eps;
    nd.value = TensorT<T>::zeros(xv.shape);
    nd.saved = TensorT<T>::zeros(xv.shape);
    nd.stats.resize(size_t(xv.rows()));
    for (int64_t r = 0; r < xv.rows(); ++r) {
      const T* in = xv.row_ptr(r);
      double mean = 0;
      for (int64_t c = 0; c < d; ++c) mean += in[c];
      mean /= double(d);
      double var = 0;
      for (int64_t c = 0; c < d; ++c) {
        double dv = in[c] - mean;
        var += dv * dv;
      }
      var /= double(d);
      double istd = 1.0 / std::sqrt(var + eps);
      nd.stats[size_t(r)] = istd;
      T* xs = nd.saved.row_ptr(r);
      T* out = nd.value.row_ptr(r);
      for (int64_t c = 0; c < d; ++c) {
        double xh = (in[c] - mean) * istd;
        xs[c] = T(xh);
        out[c] = T(xh * double(gv.data[size_t(c)]) + double(bv.data[size_t(c)]));
      }
    }
    return push(std::move(nd));
  }

  NodeId softmax(NodeId x) {
    const TensorT<T>& xv = value(x);
    require_matrix("softmax", xv);
    Node nd = make(Op::kSoftmax, {x});
    nd.value = TensorT<T>::zeros(xv.shape);
    int64_t d = xv.cols();
    for (int64_t r = 0; r < xv.rows(); ++r) {
      const T* in = xv.row_ptr(r);
      T* out = nd.value.row_ptr(r);
      double mx = in[0];
      for (int64_t c = 1; c < d; ++c) mx = std::max(mx, double(in[c]));
      double sum = 0;
      for (int64_t c = 0; c < d; ++c) {
        double e = std::exp(double(in[c]) - mx);
        out[c] = T(e);
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int64_t c = 0; c < d; ++c) out[c] = T(double(out[c]) * inv);
    }
    return push(std::move(nd));
  }

  // Exact GELU, x * Phi(x) with the erf form.
  NodeId gelu(NodeId x) {
    const TensorT<T>& xv = value(x);
    require_matrix("gelu", xv);
    Node nd = make(Op::kGelu, {x});
    nd.value = TensorT<T>::zeros(xv.shape);
    for (size_t i = 0; i < xv.data.size(); ++i) {
      double v = xv.data[i];
      nd.value.data[i] = T(0.5 * v * (1.0 + std::erf(v * 0.7071067811865476)));
    }
    return push(std::move(nd));
  }

  // out[r] = x[idx[r]]. Indices may repeat (that is how nearest-neighbour
  // upsampling is expressed); backward scatter-adds.
  NodeId gather_rows(NodeId x, std::vector<int32_t> idx) {
    const TensorT<T>& xv = value(x);
    require_matrix("gather_rows", xv);
    for (int32_t i : idx) {
      if (i < 0 || i >= xv.rows()) fail_shape("gather_rows", "index out of range");
    }
    if (idx.empty()) fail_shape("gather_rows", "empty index list");
    Node nd = make(Op::kGatherRows, {x});
    nd.value = TensorT<T>::zeros({int64_t(idx.size()), xv.cols()});
    for (size_t r = 0; r < idx.size(); ++r) {
      const T* src = xv.row_ptr(idx[r]);
      std::copy(src, src + xv.cols(), nd.value.row_ptr(int64_t(r)));
    }
    nd.idx = std::move(idx);
    return push(std::move(nd));
  }

  // out[idx[r]] = x[r], remaining rows zero. Indices must be unique.
  NodeId scatter_rows(NodeId x, std::vector<int32_t> idx, int64_t out_rows) {
    const TensorT<T>& xv = value(x);
    require_matrix("scatter_rows", xv);
    if (int64_t(idx.size()) != xv.rows()) {
      fail_shape("scatter_rows", "index count must equal input rows");
    }
    std::vector<uint8_t> seen(size_t(out_rows), 0);
    for (int32_t i : idx) {
      if (i < 0 || i >= out_rows) fail_shape("scatter_rows", "index out of range");
      if (seen[size_t(i)]) fail_shape("scatter_rows", "duplicate index " + std::to_string(i));
      seen[size_t(i)] = 1;
    }
    Node nd = make(Op::kScatterRows, {x});
    nd.p0 = out_rows;
    nd.value = TensorT<T>::zeros({out_rows, xv.cols()});
    for (size_t r = 0; r < idx.size(); ++r) {
      const T* src = xv.row_ptr(int64_t(r));
      std::copy(src, src + xv.cols(), nd.value.row_ptr(idx[r]));
    }
    nd.idx = std::move(idx);
    return push(std::move(nd));
  }

  NodeId repeat_rows(NodeId row, int64_t n) {
    const TensorT<T>& rv = value(row);
    require_matrix("repeat_rows", rv);
    if (rv.rows() != 1) fail_shape("repeat_rows", "input must have one row");
    if (n <= 0) fail_shape("repeat_rows", "row count must be positive");
    Node nd = make(Op::kRepeatRows, {row});
    nd.value = TensorT<T>::zeros({n, rv.cols()});
    for (int64_t r = 0; r < n; ++r) {
      std::copy(rv.data.begin(), rv.data.end(), nd.value.row_ptr(r));
    }
    return push(std::move(nd));
  }

  NodeId mean_rows(NodeId x) {
    const TensorT<T>& xv = value(x);
    require_matrix("mean_rows", xv);
    Node nd = make(Op::kMeanRows, {x});
    nd.value = TensorT<T>::zeros({1, xv.cols()});
    for (int64_t c = 0; c < xv.cols(); ++c) {
      double acc = 0;
      for (int64_t r = 0; r < xv.rows(); ++r) acc += xv.at(r, c);
      nd.value.data[size_t(c)] = T(acc / double(xv.rows()));
    }
    return push(std::move(nd));
  }

  NodeId concat(NodeId a, NodeId b, int axis) {
    const TensorT<T>& av = value(a);
    const TensorT<T>& bv = value(b);
    require_matrix("concat", av);
    require_matrix("concat", bv);
    if (axis != 0 && axis != 1) fail_shape("concat", "axis must be 0 or 1");
    Node nd = make(Op::kConcat, {a, b});
    nd.p0 = axis;
    if (axis == 0) {
      if (av.cols() != bv.cols()) {
        fail_shape("concat", shape_str(av.shape) + " | " + shape_str(bv.shape));
      }
      nd.value = TensorT<T>::zeros({av.rows() + bv.rows(), av.cols()});
      std::copy(av.data.begin(), av.data.end(), nd.value.data.begin());
      std::copy(bv.data.begin(), bv.data.end(),
                nd.value.data.begin() + av.data.size());
    } else {
      if (av.rows() != bv.rows()) {
        fail_shape("concat", shape_str(av.shape) + " | " + shape_str(bv.shape));
      }
      nd.value = TensorT<T>::zeros({av.rows(), av.cols() + bv.cols()});
      for (int64_t r = 0; r < av.rows(); ++r) {
        T* out = nd.value.row_ptr(r);
        std::copy(av.row_ptr(r), av.row_ptr(r) + av.cols(), out);
        std::copy(bv.row_ptr(r), bv.row_ptr(r) + bv.cols(), out + av.cols());
      }
    }
    return push(std::move(nd));
  }

  NodeId slice(NodeId x, int axis, int64_t start, int64_t len) {
    const TensorT<T>& xv = value(x);
    require_matrix("slice", xv);
    if (axis != 0 && axis != 1) fail_shape("slice", "axis must be 0 or 1");
    int64_t extent = axis == 0 ? xv.rows() : xv.cols();
    if (start < 0 || len <= 0 || start + len > extent) {
      fail_shape("slice", "range [" + std::to_string(start) + ", " +
                              std::to_string(start + len) + ") exceeds " +
                              shape_str(xv.shape));
    }
    Node nd = make(Op::kSlice, {x});
    nd.p0 = axis;
    nd.p1 = start;
    nd.p2 = len;
    if (axis == 0) {
      nd.value = TensorT<T>::zeros({len, xv.cols()});
      std::copy(xv.row_ptr(start), xv.row_ptr(start) + len * xv.cols(),
                nd.value.data.begin());
    } else {
      nd.value = TensorT<T>::zeros({xv.rows(), len});
      for (int64_t r = 0; r < xv.rows(); ++r) {
        const T* src = xv.row_ptr(r) + start;
        std::copy(src, src + len, nd.value.row_ptr(r));
      }
    }
    return push(std::move(nd));
  }

  // [R, F*C] -> [F*R, C]: block f of every row becomes row f*R + r. Pure
  // permutation; used to expand per-patch temporal channels into frames.
  NodeId cols_to_rows(NodeId x, int64_t blocks) {
    const TensorT<T>& xv = value(x);
    require_matrix("cols_to_rows", xv);
    if (blocks <= 0 || xv.cols() % blocks != 0) {
      fail_shape("cols_to_rows", std::to_string(blocks) + " blocks over " +
                                     shape_str(xv.shape));
    }
    int64_t rows = xv.rows(), c = xv.cols() / blocks;
    Node nd = make(Op::kColsToRows, {x});
    nd.p0 = blocks;
    nd.value = TensorT<T>::zeros({blocks * rows, c});
    for (int64_t r = 0; r < rows; ++r) {
      const T* src = xv.row_ptr(r);
      for (int64_t f = 0; f < blocks; ++f) {
        std::copy(src + f * c, src + (f + 1) * c, nd.value.row_ptr(f * rows + r));
      }
    }
    return push(std::move(nd));
  }

  // im2col over a (groups, gh, gw) grid of rows with zero padding: output row
  // r keeps its position and stacks the 9 in-group spatial neighbours of r.
  NodeId neighborhood3x3(NodeId x, int64_t groups, int64_t gh, int64_t gw) {
    const TensorT<T>& xv = value(x);
    require_matrix("neighborhood3x3", xv);
    if (groups * gh * gw != xv.rows()) {
      fail_shape("neighborhood3x3", "grid " + std::to_string(groups) + "x" +
                                        std::to_string(gh) + "x" + std::to_string(gw) +
                                        " does not cover " + shape_str(xv.shape));
    }
    int64_t c = xv.cols();
    Node nd = make(Op::kNeighborhood3x3, {x});
    nd.p0 = groups;
    nd.p1 = gh;
    nd.p2 = gw;
    nd.value = TensorT<T>::zeros({xv.rows(), 9 * c});
    for (int64_t g = 0; g < groups; ++g) {
      for (int64_t y = 0; y < gh; ++y) {
        for (int64_t xpos = 0; xpos < gw; ++xpos) {
          T* out = nd.value.row_ptr((g * gh + y) * gw + xpos);
          int64_t tap = 0;
          for (int64_t dy = -1; dy <= 1; ++dy) {
            for (int64_t dx = -1; dx <= 1; ++dx, ++tap) {
              int64_t sy = y + dy, sx = xpos + dx;
              if (sy < 0 || sy >= gh || sx < 0 || sx >= gw) continue;
              const T* src = xv.row_ptr((g * gh + sy) * gw + sx);
              std::copy(src, src + c, out + tap * c);
            }
          }
        }
      }
    }
    return push(std::move(nd));
  }

  // Mean of squared differences over all elements.
  NodeId mse(NodeId pred, NodeId target) {
    const TensorT<T>& pv = value(pred);
    const TensorT<T>& tv = value(target);
    if (!pv.same_shape(tv)) {
      fail_shape("mse", shape_str(pv.shape) + " vs " + shape_str(tv.shape));
    }
    Node nd = make(Op::kMse, {pred, target});
    double acc = 0;
    for (size_t i = 0; i < pv.data.size(); ++i) {
      double d = double(pv.data[i]) - double(tv.data[i]);
      acc += d * d;
    }
    nd.value = TensorT<T>::scalar(T(acc / double(pv.numel())));
    return push(std::move(nd));
  }

  // Mean cross-entropy from logits over rows with include[r] != 0. Rows with
  // include == 0 contribute nothing, matching planes whose labels are absent.
  NodeId cross_entropy(NodeId logits, std::vector<int32_t> targets,
                       std::vector<uint8_t> include) {
    const TensorT<T>& lv = value(logits);
    require_matrix("cross_entropy", lv);
    int64_t rows = lv.rows(), c = lv.cols();
    if (int64_t(targets.size()) != rows || int64_t(include.size()) != rows) {
      fail_shape("cross_entropy", "targets/include must have one entry per row");
    }
    Node nd = make(Op::kCrossEntropy, {logits});
    double acc = 0;
    int64_t n_inc = 0;
    for (int64_t r = 0; r < rows; ++r) {
      if (!include[size_t(r)]) continue;
      int32_t t = targets[size_t(r)];
      if (t < 0 || t >= c) fail_shape("cross_entropy", "target class out of range");
      const T* in = lv.row_ptr(r);
      double mx = in[0];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, double(in[j]));
      double sum = 0;
      for (int64_t j = 0; j < c; ++j) sum += std::exp(double(in[j]) - mx);
      acc += std::log(sum) + mx - double(in[t]);
      ++n_inc;
    }
    nd.p0 = n_inc;
    nd.value = TensorT<T>::scalar(n_inc ? T(acc / double(n_inc)) : T(0));
    nd.idx = std::move(targets);
    nd.bytes = std::move(include);
    return push(std::move(nd));
  }

  // Soft Dice loss from probabilities: mean over available classes of
  // 1 - (2*intersection + eps) / (union + eps). avail[r] is a bitmask of the
  // classes annotated for row r's plane; rows do not vote outside their mask.
  NodeId soft_dice(NodeId probs, std::vector<int32_t> targets,
                   std::vector<uint8_t> avail, double eps = 1.0) {
    const TensorT<T>& pv = value(probs);
    require_matrix("soft_dice", pv);
    int64_t rows = pv.rows(), c = pv.cols();
    if (c > 8) fail_shape("soft_dice", "at most 8 classes supported");
    if (int64_t(targets.size()) != rows || int64_t(avail.size()) != rows) {
      fail_shape("soft_dice", "targets/avail must have one entry per row");
    }
    Node nd = make(Op::kSoftDice, {probs});
    nd.alpha = eps;
    // stats layout: A[0..c), B[0..c), then the class count K.
    nd.stats.assign(size_t(2 * c + 1), 0.0);
    for (int64_t r = 0; r < rows; ++r) {
      int32_t t = targets[size_t(r)];
      uint8_t mask = avail[size_t(r)];
      const T* p = pv.row_ptr(r);
      for (int64_t j = 0; j < c; ++j) {
        if (!(mask >> j & 1)) continue;
        double y = (t == j) ? 1.0 : 0.0;
        nd.stats[size_t(j)] += double(p[j]) * y;
        nd.stats[size_t(c + j)] += double(p[j]) + y;
      }
    }
    uint8_t any = 0;
    for (uint8_t m : avail) any |= m;
    int64_t k = 0;
    double loss = 0;
    for (int64_t j = 0; j < c; ++j) {
      if (!(any >> j & 1)) continue;
      ++k;
      double dice = (2.0 * nd.stats[size_t(j)] + eps) / (nd.stats[size_t(c + j)] + eps);
      loss += 1.0 - dice;
    }
    nd.stats[size_t(2 * c)] = double(k);
    nd.value = TensorT<T>::scalar(k ? T(loss / double(k)) : T(0));
    nd.idx = std::move(targets);
    nd.bytes = std::move(avail);
    return push(std::move(nd));
  }

  // Reverse sweep from a scalar loss. With release_memory the values and
  // gradients of interior nodes are freed as soon as the sweep passes them;
  // leaf values and parameter gradients survive.
  void backward(NodeId loss, bool release_memory = true) {
    Node& ln = node(loss);
    if (ln.value.numel() != 1) {
      throw ConfigError("backward() needs a scalar loss, got " + shape_str(ln.value.shape));
    }
    if (!ln.requires_grad) {
      throw ConfigError("loss does not depend on any parameter");
    }
    ln.grad = TensorT<T>::full(ln.value.shape, T(1));
    for (int32_t i = loss; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.requires_grad && !n.grad.data.empty() && n.op != Op::kLeaf) {
        backward_node(n);
      }
      if (release_memory && n.op != Op::kLeaf) {
        n.value = TensorT<T>();
        n.saved = TensorT<T>();
        n.grad = TensorT<T>();
        n.stats.clear();
        n.stats.shrink_to_fit();
      }
    }
  }

 private:
  Node& node(NodeId id) {
    if (id < 0 || size_t(id) >= nodes_.size()) {
      throw ConfigError("node id out of range");
    }
    return nodes_[size_t(id)];
  }
  const Node& node(NodeId id) const {
    return const_cast<GraphT*>(this)->node(id);
  }

  Node make(Op op, std::vector<NodeId> inputs) {
    Node n;
    n.op = op;
    n.inputs = std::move(inputs);
    for (NodeId i : n.inputs) n.requires_grad |= node(i).requires_grad;
    n.ctx = int32_t(contexts_.size()) - 1;
    return n;
  }

  NodeId push(Node n) {
    if (check_finite_ && !n.value.all_finite()) {
      throw NumericError(std::string("non-finite values after ") + op_name(n.op) +
                         where(n.ctx));
    }
    nodes_.push_back(std::move(n));
    return NodeId(nodes_.size()) - 1;
  }

  std::string where(int32_t ctx) const {
    if (ctx <= 0 || contexts_[size_t(ctx)].empty()) return "";
    return " in " + contexts_[size_t(ctx)];
  }

  void require_matrix(const char* op, const TensorT<T>& t) const {
    if (!t.is_matrix()) {
      throw ConfigError(std::string(op) + ": expected a 2-D tensor, got " +
                        shape_str(t.shape));
    }
  }

  [[noreturn]] void fail_shape(const char* op, const std::string& detail) const {
    throw ConfigError(std::string(op) + ": " + detail +
                      where(int32_t(contexts_.size()) - 1));
  }

  // Lazily allocate the gradient buffer of an input node.
  TensorT<T>* grad_sink(NodeId id) {
    Node& n = node(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.data.empty()) n.grad = TensorT<T>::zeros(n.value.shape);
    return &n.grad;
  }

  void backward_node(Node& n) {
    const TensorT<T>& g = n.grad;
    switch (n.op) {
      case Op::kMatmul: {
        const TensorT<T>& av = node(n.inputs[0]).value;
        const TensorT<T>& bv = node(n.inputs[1]).value;
        int64_t m = av.rows(), k = av.cols(), out_n = g.cols();
        if (TensorT<T>* da = grad_sink(n.inputs[0])) {
          if (n.flag) {
            // dA = dC * B
            kern::matmul_nn(g.data.data(), bv.data.data(), da->data.data(), m, out_n, k, true);
          } else {
            // dA = dC * B^T
            kern::matmul_nt(g.data.data(), bv.data.data(), da->data.data(), m, out_n, k, true);
          }
        }
        if (TensorT<T>* db = grad_sink(n.inputs[1])) {
          if (n.flag) {
            // dB = dC^T * A
            kern::matmul_tn(g.data.data(), av.data.data(), db->data.data(), m, out_n, k, true);
          } else {
            // dB = A^T * dC
            kern::matmul_tn(av.data.data(), g.data.data(), db->data.data(), m, k, out_n, true);
          }
        }
        break;
      }
      case Op::kAdd: {
        if (TensorT<T>* da = grad_sink(n.inputs[0])) {
          for (size_t i = 0; i < g.data.size(); ++i) da->data[i] += g.data[i];
        }
        if (TensorT<T>* db = grad_sink(n.inputs[1])) {
          if (db->rows() == g.rows()) {
            for (size_t i = 0; i < g.data.size(); ++i) db->data[i] += g.data[i];
          } else {
            for (int64_t c = 0; c < g.cols(); ++c) {
              double acc = 0;
              for (int64_t r = 0; r < g.rows(); ++r) acc += g.at(r, c);
              db->data[size_t(c)] += T(acc);
            }
          }
        }
        break;
      }
      case Op::kScale: {
        if (TensorT<T>* da = grad_sink(n.inputs[0])) {
          for (size_t i = 0; i < g.data.size(); ++i) {
            da->data[i] += T(double(g.data[i]) * n.alpha);
          }
        }
        break;
      }
      case Op::kLayerNorm: {
        const TensorT<T>& gv = node(n.inputs[1]).value;
        int64_t rows = g.rows(), d = g.cols();
        TensorT<T>* dx = grad_sink(n.inputs[0]);
        TensorT<T>* dgamma = grad_sink(n.inputs[1]);
        TensorT<T>* dbeta = grad_sink(n.inputs[2]);
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = g.row_ptr(r);
          const T* xh = n.saved.row_ptr(r);
          if (dgamma) {
            T* dg = dgamma->row_ptr(0);
            for (int64_t c = 0; c < d; ++c) dg[c] += T(double(gr[c]) * double(xh[c]));
          }
          if (dbeta) {
            T* dbp = dbeta->row_ptr(0);
            for (int64_t c = 0; c < d; ++c) dbp[c] += gr[c];
          }
          if (dx) {
            double m1 = 0, m2 = 0;
            for (int64_t c = 0; c < d; ++c) {
              double hv = double(gr[c]) * double(gv.data[size_t(c)]);
              m1 += hv;
              m2 += hv * double(xh[c]);
            }
            m1 /= double(d);
            m2 /= double(d);
            double istd = n.stats[size_t(r)];
            T* dxr = dx->row_ptr(r);
            for (int64_t c = 0; c < d; ++c) {
              double hv = double(gr[c]) * double(gv.data[size_t(c)]);
              dxr[c] += T(istd * (hv - m1 - double(xh[c]) * m2));
            }
          }
        }
        break;
      }
      case Op::kSoftmax: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          int64_t rows = g.rows(), d = g.cols();
          for (int64_t r = 0; r < rows; ++r) {
            const T* y = n.value.row_ptr(r);
            const T* gr = g.row_ptr(r);
            double dot = 0;
            for (int64_t c = 0; c < d; ++c) dot += double(y[c]) * double(gr[c]);
            T* dxr = dx->row_ptr(r);
            for (int64_t c = 0; c < d; ++c) {
              dxr[c] += T(double(y[c]) * (double(gr[c]) - dot));
            }
          }
        }
        break;
      }
      case Op::kGelu: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          const TensorT<T>& xv = node(n.inputs[0]).value;
          for (size_t i = 0; i < g.data.size(); ++i) {
            double v = xv.data[i];
            double phi = std::exp(-0.5 * v * v) * 0.3989422804014327;
            double cdf = 0.5 * (1.0 + std::erf(v * 0.7071067811865476));
            dx->data[i] += T(double(g.data[i]) * (cdf + v * phi));
          }
        }
        break;
      }
      case Op::kGatherRows: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          int64_t c = g.cols();
          for (size_t r = 0; r < n.idx.size(); ++r) {
            const T* gr = g.row_ptr(int64_t(r));
            T* dst = dx->row_ptr(n.idx[r]);
            for (int64_t j = 0; j < c; ++j) dst[j] += gr[j];
          }
        }
        break;
      }
      case Op::kScatterRows: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          int64_t c = g.cols();
          for (size_t r = 0; r < n.idx.size(); ++r) {
            const T* gr = g.row_ptr(n.idx[r]);
            T* dst = dx->row_ptr(int64_t(r));
            for (int64_t j = 0; j < c; ++j) dst[j] += gr[j];
          }
        }
        break;
      }
      case Op::kRepeatRows: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          for (int64_t c = 0; c < g.cols(); ++c) {
            double acc = 0;
            for (int64_t r = 0; r < g.rows(); ++r) acc += g.at(r, c);
            dx->data[size_t(c)] += T(acc);
          }
        }
        break;
      }
      case Op::kMeanRows: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          double inv = 1.0 / double(dx->rows());
          for (int64_t r = 0; r < dx->rows(); ++r) {
            T* dst = dx->row_ptr(r);
            for (int64_t c = 0; c < g.cols(); ++c) {
              dst[c] += T(double(g.data[size_t(c)]) * inv);
            }
          }
        }
        break;
      }
      case Op::kConcat: {
        const TensorT<T>& av = node(n.inputs[0]).value;
        if (n.p0 == 0) {
          if (TensorT<T>* da = grad_sink(n.inputs[0])) {
            for (size_t i = 0; i < da->data.size(); ++i) da->data[i] += g.data[i];
          }
          if (TensorT<T>* db = grad_sink(n.inputs[1])) {
            size_t off = av.data.size();
            for (size_t i = 0; i < db->data.size(); ++i) db->data[i] += g.data[off + i];
          }
        } else {
          int64_t ca = av.cols();
          if (TensorT<T>* da = grad_sink(n.inputs[0])) {
            for (int64_t r = 0; r < g.rows(); ++r) {
              const T* gr = g.row_ptr(r);
              T* dst = da->row_ptr(r);
              for (int64_t c = 0; c < ca; ++c) dst[c] += gr[c];
            }
          }
          if (TensorT<T>* db = grad_sink(n.inputs[1])) {
            for (int64_t r = 0; r < g.rows(); ++r) {
              const T* gr = g.row_ptr(r) + ca;
              T* dst = db->row_ptr(r);
              for (int64_t c = 0; c < db->cols(); ++c) dst[c] += gr[c];
            }
          }
        }
        break;
      }
      case Op::kSlice: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          if (n.p0 == 0) {
            for (int64_t r = 0; r < g.rows(); ++r) {
              const T* gr = g.row_ptr(r);
              T* dst = dx->row_ptr(n.p1 + r);
              for (int64_t c = 0; c < g.cols(); ++c) dst[c] += gr[c];
            }
          } else {
            for (int64_t r = 0; r < g.rows(); ++r) {
              const T* gr = g.row_ptr(r);
              T* dst = dx->row_ptr(r) + n.p1;
              for (int64_t c = 0; c < g.cols(); ++c) dst[c] += gr[c];
            }
          }
        }
        break;
      }
      case Op::kColsToRows: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          int64_t rows = dx->rows(), c = g.cols();
          for (int64_t r = 0; r < rows; ++r) {
            T* dst = dx->row_ptr(r);
            for (int64_t f = 0; f < n.p0; ++f) {
              const T* gr = g.row_ptr(f * rows + r);
              for (int64_t j = 0; j < c; ++j) dst[f * c + j] += gr[j];
            }
          }
        }
        break;
      }
      case Op::kNeighborhood3x3: {
        if (TensorT<T>* dx = grad_sink(n.inputs[0])) {
          int64_t gh = n.p1, gw = n.p2, c = dx->cols();
          for (int64_t grp = 0; grp < n.p0; ++grp) {
            for (int64_t y = 0; y < gh; ++y) {
              for (int64_t x = 0; x < gw; ++x) {
                const T* gr = g.row_ptr((grp * gh + y) * gw + x);
                int64_t tap = 0;
                for (int64_t dy = -1; dy <= 1; ++dy) {
                  for (int64_t dxo = -1; dxo <= 1; ++dxo, ++tap) {
                    int64_t sy = y + dy, sx = x + dxo;
                    if (sy < 0 || sy >= gh || sx < 0 || sx >= gw) continue;
                    T* dst = dx->row_ptr((grp * gh + sy) * gw + sx);
                    const T* src = gr + tap * c;
                    for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case Op::kMse: {
        const TensorT<T>& pv = node(n.inputs[0]).value;
        const TensorT<T>& tv = node(n.inputs[1]).value;
        double go = double(g.data[0]) * 2.0 / double(pv.numel());
        if (TensorT<T>* dp = grad_sink(n.inputs[0])) {
          for (size_t i = 0; i < pv.data.size(); ++i) {
            dp->data[i] += T(go * (double(pv.data[i]) - double(tv.data[i])));
          }
        }
        if (TensorT<T>* dt = grad_sink(n.inputs[1])) {
          for (size_t i = 0; i < pv.data.size(); ++i) {
            dt->data[i] -= T(go * (double(pv.data[i]) - double(tv.data[i])));
          }
        }
        break;
      }
      case Op::kCrossEntropy: {
        TensorT<T>* dl = grad_sink(n.inputs[0]);
        if (!dl || n.p0 == 0) break;
        const TensorT<T>& lv = node(n.inputs[0]).value;
        int64_t c = lv.cols();
        double go = double(g.data[0]) / double(n.p0);
        for (int64_t r = 0; r < lv.rows(); ++r) {
          if (!n.bytes[size_t(r)]) continue;
          const T* in = lv.row_ptr(r);
          double mx = in[0];
          for (int64_t j = 1; j < c; ++j) mx = std::max(mx, double(in[j]));
          double sum = 0;
          for (int64_t j = 0; j < c; ++j) sum += std::exp(double(in[j]) - mx);
          T* dst = dl->row_ptr(r);
          int32_t t = n.idx[size_t(r)];
          for (int64_t j = 0; j < c; ++j) {
            double p = std::exp(double(in[j]) - mx) / sum;
            dst[j] += T(go * (p - (j == t ? 1.0 : 0.0)));
          }
        }
        break;
      }
      case Op::kSoftDice: {
        TensorT<T>* dp = grad_sink(n.inputs[0]);
        const TensorT<T>& pv = node(n.inputs[0]).value;
        int64_t c = pv.cols();
        double k = n.stats[size_t(2 * c)];
        if (!dp || k == 0) break;
        double go = -double(g.data[0]) / k;
        double eps = n.alpha;
        for (int64_t r = 0; r < pv.rows(); ++r) {
          uint8_t mask = n.bytes[size_t(r)];
          if (!mask) continue;
          int32_t t = n.idx[size_t(r)];
          T* dst = dp->row_ptr(r);
          for (int64_t j = 0; j < c; ++j) {
            if (!(mask >> j & 1)) continue;
            double a = n.stats[size_t(j)], b = n.stats[size_t(c + j)];
            double y = (t == j) ? 1.0 : 0.0;
            double denom = (b + eps) * (b + eps);
            dst[j] += T(go * (2.0 * y * (b + eps) - (2.0 * a + eps)) / denom);
          }
        }
        break;
      }
      case Op::kLeaf:
        break;
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const void*, NodeId> params_;
  std::vector<std::string> contexts_;
  bool check_finite_ = false;
};

using Graph = GraphT<float>;

}  // namespace wholeheart
