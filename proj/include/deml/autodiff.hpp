#ifndef DEML_AUTODIFF_HPP
#define DEML_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "deml/tensor.hpp"

namespace deml {

// Tape of primitive operations. Backward rules are emitted as new nodes built
// from the same primitive set, so grad() output is itself differentiable and
// grad(grad(f)) needs no extra machinery.
enum class Op : std::uint8_t {
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kMatMul,
  kSumAxis,   // keeps the reduced axis as size 1
  kMeanAxis,  // keeps the reduced axis as size 1
  kBroadcast,
  kReshape,
  kConcat,
  kSlice,
  kRelu,
  kHeaviside,  // relu derivative carrier; own derivative is 0 a.e.
  kExp,
  kLog,
  kSqrt,
  kSoftmax,
  kCrossEntropyWithLogits,
  kCosineSim,  // rowwise cosine similarity, 0 on zero rows
  kIm2Col,
  kCol2Im,  // adjoint of im2col
  kArgMax,  // non-differentiable
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParameter: return "parameter";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kMatMul: return "matmul";
    case Op::kSumAxis: return "sum";
    case Op::kMeanAxis: return "mean";
    case Op::kBroadcast: return "broadcast";
    case Op::kReshape: return "reshape";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kRelu: return "relu";
    case Op::kHeaviside: return "heaviside";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kSoftmax: return "softmax";
    case Op::kCrossEntropyWithLogits: return "cross-entropy-with-logits";
    case Op::kCosineSim: return "cosine-similarity";
    case Op::kIm2Col: return "im2col";
    case Op::kCol2Im: return "col2im";
    case Op::kArgMax: return "argmax";
  }
  return "?";
}

class Graph;

struct NodeRef {
  Graph* graph = nullptr;
  std::uint32_t id = 0;
  bool valid() const { return graph != nullptr; }
};

struct NodeData {
  Op op;
  std::vector<std::uint32_t> inputs;
  Shape shape;
  std::string name;  // leaves only, for diagnostics
  // op attributes
  std::size_t axis = 0;
  bool ta = false, tb = false;       // matmul transposes
  Shape target;                      // broadcast / reshape / col2im target shape
  std::size_t start = 0, len = 0;    // slice
  std::size_t kh = 0, kw = 0;        // im2col window
  Shape src_shape;                   // im2col input shape
};

class Graph {
 public:
  std::size_t size() const { return nodes_.size(); }
  const NodeData& node(std::uint32_t id) const { return nodes_.at(id); }
  const Shape& shape_of(std::uint32_t id) const { return nodes_.at(id).shape; }

  NodeRef append(NodeData nd) {
    nodes_.push_back(std::move(nd));
    bindings_.emplace_back();
    return NodeRef{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void bind(NodeRef n, Tensor value) {
    NodeData& nd = nodes_.at(n.id);
    if (nd.op != Op::kConstant && nd.op != Op::kParameter)
      throw Error("bind: node " + std::to_string(n.id) + " (" + op_name(nd.op) +
                  ") is not a leaf");
    if (value.shape() != nd.shape)
      throw ShapeError("bind: node " + std::to_string(n.id) + " expects " +
                       shape_str(nd.shape) + ", got " + shape_str(value.shape()));
    bindings_[n.id] = std::move(value);
  }

  const std::optional<Tensor>& binding(std::uint32_t id) const {
    return bindings_.at(id);
  }

  std::vector<Tensor> eval(std::span<const NodeRef> outputs) const;
  Tensor eval1(NodeRef out) const {
    NodeRef v[1] = {out};
    return std::move(eval(std::span<const NodeRef>(v, 1))[0]);
  }

 private:
  std::vector<NodeData> nodes_;
  std::vector<std::optional<Tensor>> bindings_;
};

// ---------------------------------------------------------------------------
// Builders (shape inference happens here)

inline NodeRef constant(Graph& g, Tensor value, std::string name = "") {
  NodeData nd;
  nd.op = Op::kConstant;
  nd.shape = value.shape();
  nd.name = std::move(name);
  NodeRef n = g.append(std::move(nd));
  g.bind(n, std::move(value));
  return n;
}

inline NodeRef parameter(Graph& g, Tensor value, std::string name = "") {
  NodeData nd;
  nd.op = Op::kParameter;
  nd.shape = value.shape();
  nd.name = std::move(name);
  NodeRef n = g.append(std::move(nd));
  g.bind(n, std::move(value));
  return n;
}

// Unbound parameter leaf; must be bound before eval.
inline NodeRef placeholder(Graph& g, Shape shape, std::string name = "") {
  NodeData nd;
  nd.op = Op::kParameter;
  nd.shape = std::move(shape);
  nd.name = std::move(name);
  return g.append(std::move(nd));
}

inline void check_same_graph(NodeRef a, NodeRef b, const char* op) {
  if (a.graph != b.graph)
    throw Error(std::string(op) + ": operands belong to different graphs");
}

inline NodeRef binary_same_shape(Op op, NodeRef a, NodeRef b) {
  check_same_graph(a, b, op_name(op));
  Graph& g = *a.graph;
  const Shape& sa = g.shape_of(a.id);
  const Shape& sb = g.shape_of(b.id);
  if (sa != sb)
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " +
                     shape_str(sa) + " vs " + shape_str(sb));
  NodeData nd;
  nd.op = op;
  nd.inputs = {a.id, b.id};
  nd.shape = sa;
  return g.append(std::move(nd));
}

inline NodeRef add(NodeRef a, NodeRef b) { return binary_same_shape(Op::kAdd, a, b); }
inline NodeRef sub(NodeRef a, NodeRef b) { return binary_same_shape(Op::kSub, a, b); }
inline NodeRef mul(NodeRef a, NodeRef b) { return binary_same_shape(Op::kMul, a, b); }

inline NodeRef matmul(NodeRef a, NodeRef b, bool ta = false, bool tb = false) {
  check_same_graph(a, b, "matmul");
  Graph& g = *a.graph;
  const Shape& sa = g.shape_of(a.id);
  const Shape& sb = g.shape_of(b.id);
  if (sa.size() != 2 || sb.size() != 2)
    throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(sa) +
                     " and " + shape_str(sb));
  std::size_t m = ta ? sa[1] : sa[0];
  std::size_t k = ta ? sa[0] : sa[1];
  std::size_t kb = tb ? sb[1] : sb[0];
  std::size_t n = tb ? sb[0] : sb[1];
  if (k != kb)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(sa) +
                     (ta ? "^T" : "") + " vs " + shape_str(sb) + (tb ? "^T" : ""));
  NodeData nd;
  nd.op = Op::kMatMul;
  nd.inputs = {a.id, b.id};
  nd.shape = {m, n};
  nd.ta = ta;
  nd.tb = tb;
  return g.append(std::move(nd));
}

inline NodeRef reduce_axis(Op op, NodeRef x, std::size_t axis) {
  Graph& g = *x.graph;
  const Shape& s = g.shape_of(x.id);
  if (axis >= s.size())
    throw ShapeError(std::string(op_name(op)) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(s));
  NodeData nd;
  nd.op = op;
  nd.inputs = {x.id};
  nd.shape = s;
  nd.shape[axis] = 1;
  nd.axis = axis;
  return g.append(std::move(nd));
}

inline NodeRef sum_axis(NodeRef x, std::size_t axis) {
  return reduce_axis(Op::kSumAxis, x, axis);
}
inline NodeRef mean_axis(NodeRef x, std::size_t axis) {
  return reduce_axis(Op::kMeanAxis, x, axis);
}

inline NodeRef broadcast(NodeRef x, Shape target) {
  Graph& g = *x.graph;
  const Shape& s = g.shape_of(x.id);
  bool ok = shape_numel(s) == 1;
  if (!ok && s.size() == target.size()) {
    ok = true;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] != target[i] && s[i] != 1) ok = false;
  }
  if (!ok)
    throw ShapeError("broadcast: cannot expand " + shape_str(s) + " to " +
                     shape_str(target));
  NodeData nd;
  nd.op = Op::kBroadcast;
  nd.inputs = {x.id};
  nd.shape = target;
  nd.target = std::move(target);
  return g.append(std::move(nd));
}

inline NodeRef reshape(NodeRef x, Shape target) {
  Graph& g = *x.graph;
  const Shape& s = g.shape_of(x.id);
  if (shape_numel(s) != shape_numel(target))
    throw ShapeError("reshape: element count mismatch " + shape_str(s) + " to " +
                     shape_str(target));
  NodeData nd;
  nd.op = Op::kReshape;
  nd.inputs = {x.id};
  nd.shape = target;
  nd.target = std::move(target);
  return g.append(std::move(nd));
}

inline NodeRef concat(const std::vector<NodeRef>& parts, std::size_t axis) {
  if (parts.empty()) throw Error("concat: no inputs");
  Graph& g = *parts[0].graph;
  Shape out = g.shape_of(parts[0].id);
  if (axis >= out.size())
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(out));
  for (std::size_t i = 1; i < parts.size(); ++i) {
    check_same_graph(parts[0], parts[i], "concat");
    const Shape& s = g.shape_of(parts[i].id);
    if (s.size() != out.size())
      throw ShapeError("concat: rank mismatch " + shape_str(out) + " vs " +
                       shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != axis && s[d] != out[d])
        throw ShapeError("concat: shape mismatch off axis, " + shape_str(out) +
                         " vs " + shape_str(s));
    out[axis] += s[axis];
  }
  NodeData nd;
  nd.op = Op::kConcat;
  nd.shape = std::move(out);
  nd.axis = axis;
  for (NodeRef p : parts) nd.inputs.push_back(p.id);
  return g.append(std::move(nd));
}

inline NodeRef slice(NodeRef x, std::size_t axis, std::size_t start, std::size_t len) {
  Graph& g = *x.graph;
  const Shape& s = g.shape_of(x.id);
  if (axis >= s.size() || start + len > s[axis] || len == 0)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(s));
  NodeData nd;
  nd.op = Op::kSlice;
  nd.inputs = {x.id};
  nd.shape = s;
  nd.shape[axis] = len;
  nd.axis = axis;
  nd.start = start;
  nd.len = len;
  return g.append(std::move(nd));
}

inline NodeRef unary(Op op, NodeRef x) {
  Graph& g = *x.graph;
  NodeData nd;
  nd.op = op;
  nd.inputs = {x.id};
  nd.shape = g.shape_of(x.id);
  return g.append(std::move(nd));
}

inline NodeRef relu(NodeRef x) { return unary(Op::kRelu, x); }
inline NodeRef heaviside(NodeRef x) { return unary(Op::kHeaviside, x); }
inline NodeRef exp(NodeRef x) { return unary(Op::kExp, x); }
inline NodeRef log(NodeRef x) { return unary(Op::kLog, x); }
inline NodeRef sqrt(NodeRef x) { return unary(Op::kSqrt, x); }

inline NodeRef softmax(NodeRef x, std::size_t axis) {
  Graph& g = *x.graph;
  const Shape& s = g.shape_of(x.id);
  if (axis >= s.size())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  NodeData nd;
  nd.op = Op::kSoftmax;
  nd.inputs = {x.id};
  nd.shape = s;
  nd.axis = axis;
  return g.append(std::move(nd));
}

// logits [m,n] (or [n]), labels same shape (one-hot or soft); per-row loss [m]
// (or [1]). Log-softmax is fused with a row-max shift for stability.
inline NodeRef cross_entropy_with_logits(NodeRef logits, NodeRef labels) {
  check_same_graph(logits, labels, "cross-entropy-with-logits");
  Graph& g = *logits.graph;
  const Shape& s = g.shape_of(logits.id);
  if (s != g.shape_of(labels.id))
    throw ShapeError("cross-entropy-with-logits: logits " + shape_str(s) +
                     " vs labels " + shape_str(g.shape_of(labels.id)));
  if (s.size() != 1 && s.size() != 2)
    throw ShapeError("cross-entropy-with-logits: expected rank 1 or 2, got " +
                     shape_str(s));
  NodeData nd;
  nd.op = Op::kCrossEntropyWithLogits;
  nd.inputs = {logits.id, labels.id};
  nd.shape = {s.size() == 2 ? s[0] : 1};
  return g.append(std::move(nd));
}

// Rowwise cosine similarity of [m,d] against [m,d] -> [m]; 0 if either row is
// the zero vector.
inline NodeRef cosine_similarity(NodeRef a, NodeRef b) {
  check_same_graph(a, b, "cosine-similarity");
  Graph& g = *a.graph;
  const Shape& sa = g.shape_of(a.id);
  if (sa.size() != 2 || sa != g.shape_of(b.id))
    throw ShapeError("cosine-similarity: expected matching rank-2 shapes, got " +
                     shape_str(sa) + " and " + shape_str(g.shape_of(b.id)));
  NodeData nd;
  nd.op = Op::kCosineSim;
  nd.inputs = {a.id, b.id};
  nd.shape = {sa[0]};
  return g.append(std::move(nd));
}

// [b,c,h,w] -> [b*oh*ow, c*kh*kw], stride 1, valid padding; rows ordered
// (batch, out-row, out-col).
inline NodeRef im2col(NodeRef x, std::size_t kh, std::size_t kw) {
  Graph& g = *x.graph;
  const Shape& s = g.shape_of(x.id);
  if (s.size() != 4)
    throw ShapeError("im2col: expected rank-4 input, got " + shape_str(s));
  if (kh == 0 || kw == 0 || kh > s[2] || kw > s[3])
    throw ShapeError("im2col: window " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " does not fit input " + shape_str(s));
  std::size_t oh = s[2] - kh + 1, ow = s[3] - kw + 1;
  NodeData nd;
  nd.op = Op::kIm2Col;
  nd.inputs = {x.id};
  nd.shape = {s[0] * oh * ow, s[1] * kh * kw};
  nd.kh = kh;
  nd.kw = kw;
  nd.src_shape = s;
  return g.append(std::move(nd));
}

// Scatter-add adjoint of im2col: columns back to an image of shape src.
inline NodeRef col2im(NodeRef cols, Shape src, std::size_t kh, std::size_t kw) {
  Graph& g = *cols.graph;
  const Shape& s = g.shape_of(cols.id);
  if (src.size() != 4)
    throw ShapeError("col2im: target must be rank 4, got " + shape_str(src));
  std::size_t oh = src[2] - kh + 1, ow = src[3] - kw + 1;
  if (s.size() != 2 || s[0] != src[0] * oh * ow || s[1] != src[1] * kh * kw)
    throw ShapeError("col2im: columns " + shape_str(s) + " inconsistent with " +
                     shape_str(src));
  NodeData nd;
  nd.op = Op::kCol2Im;
  nd.inputs = {cols.id};
  nd.shape = src;
  nd.kh = kh;
  nd.kw = kw;
  nd.src_shape = std::move(src);
  return g.append(std::move(nd));
}

// Index of the row maximum along axis (ties -> lowest index). Forward only.
inline NodeRef argmax(NodeRef x, std::size_t axis) {
  return reduce_axis(Op::kArgMax, x, axis);
}

// ---------------------------------------------------------------------------
// Composition helpers

inline NodeRef scalar_const(Graph& g, double v) {
  return constant(g, Tensor::scalar(v));
}

inline NodeRef scale(NodeRef x, double c) {
  Graph& g = *x.graph;
  return mul(x, broadcast(scalar_const(g, c), g.shape_of(x.id)));
}

inline NodeRef neg(NodeRef x) { return scale(x, -1.0); }

inline NodeRef sum_all(NodeRef x) {
  Graph& g = *x.graph;
  NodeRef r = x;
  for (std::size_t ax = 0; ax < g.shape_of(x.id).size(); ++ax) r = sum_axis(r, ax);
  return reshape(r, {1});
}

inline NodeRef mean_all(NodeRef x) {
  Graph& g = *x.graph;
  return scale(sum_all(x), 1.0 / static_cast<double>(shape_numel(g.shape_of(x.id))));
}

inline NodeRef transpose2d(NodeRef x) {
  Graph& g = *x.graph;
  const Shape& s = g.shape_of(x.id);
  if (s.size() != 2) throw ShapeError("transpose2d: expected rank 2, got " + shape_str(s));
  Tensor eye(Shape{s[0], s[0]});
  for (std::size_t i = 0; i < s[0]; ++i) eye.at(i, i) = 1.0;
  return matmul(x, constant(g, std::move(eye)), true, false);
}

// x*W + b for x [m,k], W [k,n], b [1,n].
inline NodeRef affine(NodeRef x, NodeRef w, NodeRef b) {
  NodeRef y = matmul(x, w);
  Graph& g = *x.graph;
  return add(y, broadcast(b, g.shape_of(y.id)));
}

// Cross-correlation via im2col + matmul; input [b,c,h,w], kernel [oc,c,kh,kw],
// output [b,oc,oh,ow]. Stride 1, valid padding.
inline NodeRef conv2d(NodeRef input, NodeRef kernel) {
  Graph& g = *input.graph;
  const Shape& si = g.shape_of(input.id);
  const Shape& sk = g.shape_of(kernel.id);
  if (si.size() != 4 || sk.size() != 4)
    throw ShapeError("conv2d: expected rank-4 input and kernel, got " +
                     shape_str(si) + " and " + shape_str(sk));
  if (sk[1] != si[1])
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(si) +
                     " vs kernel " + shape_str(sk));
  std::size_t batch = si[0], oc = sk[0], kh = sk[2], kw = sk[3];
  if (kh > si[2] || kw > si[3])
    throw ShapeError("conv2d: kernel " + shape_str(sk) + " larger than input " +
                     shape_str(si));
  std::size_t oh = si[2] - kh + 1, ow = si[3] - kw + 1;
  NodeRef cols = im2col(input, kh, kw);                       // [b*oh*ow, c*kh*kw]
  NodeRef kmat = reshape(kernel, {oc, sk[1] * kh * kw});      // [oc, c*kh*kw]
  NodeRef out2 = matmul(cols, kmat, false, true);             // [b*oh*ow, oc]
  if (batch == 1) return reshape(transpose2d(out2), {1, oc, oh, ow});
  std::vector<NodeRef> per_batch;
  per_batch.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    NodeRef s = slice(out2, 0, i * oh * ow, oh * ow);
    per_batch.push_back(reshape(transpose2d(s), {1, oc, oh, ow}));
  }
  return concat(per_batch, 0);
}

// ---------------------------------------------------------------------------
// Forward evaluation

namespace detail {

inline void axis_strides(const Shape& s, std::size_t axis, std::size_t& outer,
                         std::size_t& n, std::size_t& inner) {
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline Tensor forward_op(const NodeData& nd, const std::vector<const Tensor*>& in) {
  switch (nd.op) {
    case Op::kConstant:
    case Op::kParameter:
      throw Error("forward: leaf reached without binding");
    case Op::kAdd: {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] += (*in[1])[i];
      return out;
    }
    case Op::kSub: {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= (*in[1])[i];
      return out;
    }
    case Op::kMul: {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= (*in[1])[i];
      return out;
    }
    case Op::kMatMul:
      return matmul_raw(*in[0], *in[1], nd.ta, nd.tb);
    case Op::kSumAxis:
    case Op::kMeanAxis: {
      std::size_t outer, n, inner;
      axis_strides(in[0]->shape(), nd.axis, outer, n, inner);
      Tensor out(nd.shape);
      const double* src = in[0]->data();
      double* dst = out.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i)
            dst[o * inner + i] += src[(o * n + k) * inner + i];
      if (nd.op == Op::kMeanAxis)
        for (std::size_t i = 0; i < out.numel(); ++i)
          dst[i] /= static_cast<double>(n);
      return out;
    }
    case Op::kBroadcast: {
      const Tensor& x = *in[0];
      Tensor out(nd.shape);
      if (x.numel() == 1) {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[0];
        return out;
      }
      const Shape& ss = x.shape();
      const Shape& ds = nd.shape;
      std::size_t rank = ds.size();
      std::vector<std::size_t> idx(rank, 0);
      for (std::size_t i = 0; i < out.numel(); ++i) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < rank; ++d)
          src = src * ss[d] + (ss[d] == 1 ? 0 : idx[d]);
        out[i] = x[src];
        for (std::size_t d = rank; d-- > 0;) {
          if (++idx[d] < ds[d]) break;
          idx[d] = 0;
        }
      }
      return out;
    }
    case Op::kReshape:
      return Tensor(nd.shape, in[0]->values());
    case Op::kConcat: {
      std::size_t outer, n, inner;
      axis_strides(nd.shape, nd.axis, outer, n, inner);
      Tensor out(nd.shape);
      std::size_t off = 0;
      for (const Tensor* part : in) {
        std::size_t pn = part->shape()[nd.axis];
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < pn; ++k)
            for (std::size_t i = 0; i < inner; ++i)
              out[(o * n + off + k) * inner + i] = (*part)[(o * pn + k) * inner + i];
        off += pn;
      }
      return out;
    }
    case Op::kSlice: {
      std::size_t outer, n, inner;
      axis_strides(in[0]->shape(), nd.axis, outer, n, inner);
      Tensor out(nd.shape);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < nd.len; ++k)
          for (std::size_t i = 0; i < inner; ++i)
            out[(o * nd.len + k) * inner + i] =
                (*in[0])[(o * n + nd.start + k) * inner + i];
      return out;
    }
    case Op::kRelu: {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i)
        if (out[i] < 0.0) out[i] = 0.0;
      return out;
    }
    case Op::kHeaviside: {
      // subgradient convention: 0 at 0
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? 1.0 : 0.0;
      return out;
    }
    case Op::kExp: {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
      return out;
    }
    case Op::kLog: {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) {
        if (out[i] <= 0.0)
          throw DomainError("log: non-positive input " + std::to_string(out[i]));
        out[i] = std::log(out[i]);
      }
      return out;
    }
    case Op::kSqrt: {
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.numel(); ++i) {
        if (out[i] <= 0.0)
          throw DomainError("sqrt: non-positive input " + std::to_string(out[i]));
        out[i] = std::sqrt(out[i]);
      }
      return out;
    }
    case Op::kSoftmax: {
      std::size_t outer, n, inner;
      axis_strides(in[0]->shape(), nd.axis, outer, n, inner);
      Tensor out = *in[0];
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          double mx = out[(o * n) * inner + i];
          for (std::size_t k = 1; k < n; ++k)
            mx = std::max(mx, out[(o * n + k) * inner + i]);
          double z = 0.0;
          for (std::size_t k = 0; k < n; ++k) {
            double& v = out[(o * n + k) * inner + i];
            v = std::exp(v - mx);
            z += v;
          }
          for (std::size_t k = 0; k < n; ++k) out[(o * n + k) * inner + i] /= z;
        }
      return out;
    }
    case Op::kCrossEntropyWithLogits: {
      const Tensor& logits = *in[0];
      const Tensor& labels = *in[1];
      std::size_t m = logits.rank() == 2 ? logits.dim(0) : 1;
      std::size_t n = logits.rank() == 2 ? logits.dim(1) : logits.dim(0);
      Tensor out(Shape{m});
      for (std::size_t r = 0; r < m; ++r) {
        const double* x = logits.data() + r * n;
        const double* y = labels.data() + r * n;
        double mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        double z = 0.0, dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          z += std::exp(x[j] - mx);
          dot += y[j] * (x[j] - mx);
        }
        out[r] = std::log(z) - dot;
      }
      return out;
    }
    case Op::kCosineSim: {
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      std::size_t m = a.dim(0), d = a.dim(1);
      Tensor out(Shape{m});
      for (std::size_t r = 0; r < m; ++r) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          double av = a.at(r, j), bv = b.at(r, j);
          dot += av * bv;
          na += av * av;
          nb += bv * bv;
        }
        out[r] = (na == 0.0 || nb == 0.0) ? 0.0 : dot / std::sqrt(na * nb);
      }
      return out;
    }
    case Op::kIm2Col: {
      const Tensor& x = *in[0];
      const Shape& s = x.shape();
      std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
      std::size_t oh = h - nd.kh + 1, ow = w - nd.kw + 1;
      Tensor out(nd.shape);
      std::size_t row = 0;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox, ++row) {
            std::size_t col = 0;
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t ky = 0; ky < nd.kh; ++ky)
                for (std::size_t kx = 0; kx < nd.kw; ++kx, ++col)
                  out[row * nd.shape[1] + col] =
                      x[((bi * c + ci) * h + oy + ky) * w + ox + kx];
          }
      return out;
    }
    case Op::kCol2Im: {
      const Tensor& cols = *in[0];
      const Shape& s = nd.src_shape;
      std::size_t b = s[0], c = s[1], h = s[2], w = s[3];
      std::size_t oh = h - nd.kh + 1, ow = w - nd.kw + 1;
      Tensor out(nd.shape);
      std::size_t row = 0;
      for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox, ++row) {
            std::size_t col = 0;
            for (std::size_t ci = 0; ci < c; ++ci)
              for (std::size_t ky = 0; ky < nd.kh; ++ky)
                for (std::size_t kx = 0; kx < nd.kw; ++kx, ++col)
                  out[((bi * c + ci) * h + oy + ky) * w + ox + kx] +=
                      cols[row * cols.dim(1) + col];
          }
      return out;
    }
    case Op::kArgMax: {
      std::size_t outer, n, inner;
      axis_strides(in[0]->shape(), nd.axis, outer, n, inner);
      Tensor out(nd.shape);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          std::size_t best = 0;
          double bv = (*in[0])[(o * n) * inner + i];
          for (std::size_t k = 1; k < n; ++k) {
            double v = (*in[0])[(o * n + k) * inner + i];
            if (v > bv) {
              bv = v;
              best = k;
            }
          }
          out[o * inner + i] = static_cast<double>(best);
        }
      return out;
    }
  }
  throw Error("forward: unknown op");
}

}  // namespace detail

inline std::vector<Tensor> Graph::eval(std::span<const NodeRef> outputs) const {
  std::vector<char> needed(nodes_.size(), 0);
  std::vector<std::uint32_t> stack;
  for (NodeRef out : outputs) {
    if (out.graph != this) throw Error("eval: output from a different graph");
    stack.push_back(out.id);
  }
  while (!stack.empty()) {
    std::uint32_t id = stack.back();
    stack.pop_back();
    if (needed[id]) continue;
    needed[id] = 1;
    for (std::uint32_t in : nodes_[id].inputs) stack.push_back(in);
  }
  std::vector<Tensor> values(nodes_.size());
  for (std::uint32_t id = 0; id < nodes_.size(); ++id) {
    if (!needed[id]) continue;
    const NodeData& nd = nodes_[id];
    if (nd.op == Op::kConstant || nd.op == Op::kParameter) {
      if (!bindings_[id])
        throw Error("eval: unbound leaf node " + std::to_string(id) +
                    (nd.name.empty() ? "" : " (" + nd.name + ")"));
      values[id] = *bindings_[id];
      continue;
    }
    std::vector<const Tensor*> ins;
    ins.reserve(nd.inputs.size());
    for (std::uint32_t in : nd.inputs) ins.push_back(&values[in]);
    values[id] = detail::forward_op(nd, ins);
  }
  std::vector<Tensor> result;
  result.reserve(outputs.size());
  for (NodeRef out : outputs) result.push_back(values[out.id]);
  return result;
}

// ---------------------------------------------------------------------------
// Reverse mode. Adjoints are emitted as graph nodes, so the result of grad()
// can be differentiated again.

inline std::vector<NodeRef> grad(NodeRef loss, std::span<const NodeRef> wrt) {
  Graph& g = *loss.graph;
  if (shape_numel(g.shape_of(loss.id)) != 1)
    throw Error("grad: loss must be scalar-shaped, got " +
                shape_str(g.shape_of(loss.id)));

  std::vector<char> reachable(loss.id + 1, 0);
  std::vector<std::uint32_t> stack{loss.id};
  while (!stack.empty()) {
    std::uint32_t id = stack.back();
    stack.pop_back();
    if (reachable[id]) continue;
    reachable[id] = 1;
    for (std::uint32_t in : g.node(id).inputs) stack.push_back(in);
  }

  std::unordered_map<std::uint32_t, NodeRef> adjoint;
  adjoint[loss.id] = constant(g, Tensor(g.shape_of(loss.id), 1.0));

  auto accumulate = [&](std::uint32_t id, NodeRef contrib) {
    auto it = adjoint.find(id);
    if (it == adjoint.end())
      adjoint.emplace(id, contrib);
    else
      it->second = add(it->second, contrib);
  };

  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    if (!reachable[id]) continue;
    auto it = adjoint.find(id);
    if (it == adjoint.end()) continue;
    NodeRef gy = it->second;
    const NodeData nd = g.node(id);  // copy: graph vector may reallocate below
    NodeRef self{&g, id};
    switch (nd.op) {
      case Op::kConstant:
      case Op::kParameter:
      case Op::kHeaviside:
      case Op::kArgMax:
        break;
      case Op::kAdd:
        accumulate(nd.inputs[0], gy);
        accumulate(nd.inputs[1], gy);
        break;
      case Op::kSub:
        accumulate(nd.inputs[0], gy);
        accumulate(nd.inputs[1], neg(gy));
        break;
      case Op::kMul:
        accumulate(nd.inputs[0], mul(gy, NodeRef{&g, nd.inputs[1]}));
        accumulate(nd.inputs[1], mul(gy, NodeRef{&g, nd.inputs[0]}));
        break;
      case Op::kMatMul: {
        NodeRef a{&g, nd.inputs[0]}, b{&g, nd.inputs[1]};
        NodeRef da, db;
        if (!nd.ta && !nd.tb) {
          da = matmul(gy, b, false, true);
          db = matmul(a, gy, true, false);
        } else if (nd.ta && !nd.tb) {
          da = matmul(b, gy, false, true);
          db = matmul(a, gy, false, false);
        } else if (!nd.ta && nd.tb) {
          da = matmul(gy, b, false, false);
          db = matmul(gy, a, true, false);
        } else {
          da = matmul(b, gy, true, true);
          db = matmul(gy, a, true, true);
        }
        accumulate(nd.inputs[0], da);
        accumulate(nd.inputs[1], db);
        break;
      }
      case Op::kSumAxis:
        accumulate(nd.inputs[0], broadcast(gy, g.shape_of(nd.inputs[0])));
        break;
      case Op::kMeanAxis: {
        const Shape& src = g.shape_of(nd.inputs[0]);
        accumulate(nd.inputs[0],
                   scale(broadcast(gy, src), 1.0 / static_cast<double>(src[nd.axis])));
        break;
      }
      case Op::kBroadcast: {
        const Shape& src = g.shape_of(nd.inputs[0]);
        NodeRef r = gy;
        if (shape_numel(src) == 1 && src.size() != nd.shape.size()) {
          r = reshape(sum_all(r), src);
        } else {
          for (std::size_t d = 0; d < src.size(); ++d)
            if (src[d] == 1 && nd.shape[d] != 1) r = sum_axis(r, d);
          r = reshape(r, src);
        }
        accumulate(nd.inputs[0], r);
        break;
      }
      case Op::kReshape:
        accumulate(nd.inputs[0], reshape(gy, g.shape_of(nd.inputs[0])));
        break;
      case Op::kConcat: {
        std::size_t off = 0;
        for (std::uint32_t in : nd.inputs) {
          std::size_t len = g.shape_of(in)[nd.axis];
          accumulate(in, slice(gy, nd.axis, off, len));
          off += len;
        }
        break;
      }
      case Op::kSlice: {
        // pad back with zeros on the sliced axis
        const Shape& src = g.shape_of(nd.inputs[0]);
        std::vector<NodeRef> parts;
        if (nd.start > 0) {
          Shape zs = src;
          zs[nd.axis] = nd.start;
          parts.push_back(constant(g, Tensor(zs)));
        }
        parts.push_back(gy);
        std::size_t after = src[nd.axis] - nd.start - nd.len;
        if (after > 0) {
          Shape zs = src;
          zs[nd.axis] = after;
          parts.push_back(constant(g, Tensor(zs)));
        }
        accumulate(nd.inputs[0], parts.size() == 1 ? gy : concat(parts, nd.axis));
        break;
      }
      case Op::kRelu:
        accumulate(nd.inputs[0], mul(gy, heaviside(NodeRef{&g, nd.inputs[0]})));
        break;
      case Op::kExp:
        accumulate(nd.inputs[0], mul(gy, self));
        break;
      case Op::kLog:
        // 1/x = exp(-log x), reusing the forward node
        accumulate(nd.inputs[0], mul(gy, exp(neg(self))));
        break;
      case Op::kSqrt:
        // 1/(2 sqrt x) = 0.5 * exp(-log sqrt x)
        accumulate(nd.inputs[0], scale(mul(gy, exp(neg(log(self)))), 0.5));
        break;
      case Op::kSoftmax: {
        NodeRef t = mul(gy, self);
        NodeRef s = broadcast(sum_axis(t, nd.axis), nd.shape);
        accumulate(nd.inputs[0], mul(self, sub(gy, s)));
        break;
      }
      case Op::kCrossEntropyWithLogits: {
        NodeRef logits{&g, nd.inputs[0]}, labels{&g, nd.inputs[1]};
        const Shape& ls = g.shape_of(nd.inputs[0]);
        std::size_t ax = ls.size() == 2 ? 1 : 0;
        NodeRef diff = sub(softmax(logits, ax), labels);
        NodeRef grow = ls.size() == 2 ? broadcast(reshape(gy, {ls[0], 1}), ls)
                                      : broadcast(gy, ls);
        accumulate(nd.inputs[0], mul(grow, diff));
        break;
      }
      case Op::kCosineSim: {
        NodeRef a{&g, nd.inputs[0]}, b{&g, nd.inputs[1]};
        const Shape& s = g.shape_of(nd.inputs[0]);
        std::size_t m = s[0];
        NodeRef na2 = sum_axis(mul(a, a), 1);  // [m,1]
        NodeRef nb2 = sum_axis(mul(b, b), 1);
        NodeRef inv_ab = exp(neg(scale(add(log(na2), log(nb2)), 0.5)));
        NodeRef cosm = reshape(self, {m, 1});
        NodeRef gm = broadcast(reshape(gy, {m, 1}), s);
        NodeRef da = mul(gm, sub(mul(broadcast(inv_ab, s), b),
                                 mul(broadcast(mul(cosm, exp(neg(log(na2)))), s), a)));
        NodeRef db = mul(gm, sub(mul(broadcast(inv_ab, s), a),
                                 mul(broadcast(mul(cosm, exp(neg(log(nb2)))), s), b)));
        accumulate(nd.inputs[0], da);
        accumulate(nd.inputs[1], db);
        break;
      }
      case Op::kIm2Col:
        accumulate(nd.inputs[0], col2im(gy, g.shape_of(nd.inputs[0]), nd.kh, nd.kw));
        break;
      case Op::kCol2Im:
        accumulate(nd.inputs[0], im2col(gy, nd.kh, nd.kw));
        break;
    }
  }

  std::vector<NodeRef> result;
  result.reserve(wrt.size());
  for (NodeRef w : wrt) {
    auto it = adjoint.find(w.id);
    if (it != adjoint.end() && w.id <= loss.id)
      result.push_back(it->second);
    else
      result.push_back(constant(g, Tensor(g.shape_of(w.id), 0.0)));
  }
  return result;
}

inline NodeRef grad1(NodeRef loss, NodeRef wrt) {
  NodeRef v[1] = {wrt};
  return grad(loss, std::span<const NodeRef>(v, 1))[0];
}

// Central-difference derivative of a scalar loss w.r.t. a bound leaf; the test
// oracle for every gradient in the project.
inline Tensor finite_diff(Graph& g, NodeRef loss, NodeRef wrt, double h = 1e-5) {
  if (h <= 0.0) throw Error("finite_diff: h must be positive");
  if (shape_numel(g.shape_of(loss.id)) != 1)
    throw Error("finite_diff: loss must be scalar-shaped");
  const auto& bound = g.binding(wrt.id);
  if (!bound) throw Error("finite_diff: wrt node is not a bound leaf");
  Tensor base = *bound;
  Tensor out(base.shape());
  for (std::size_t i = 0; i < base.numel(); ++i) {
    Tensor plus = base, minus = base;
    plus[i] += h;
    minus[i] -= h;
    g.bind(wrt, plus);
    double fp = g.eval1(loss)[0];
    g.bind(wrt, minus);
    double fm = g.eval1(loss)[0];
    out[i] = (fp - fm) / (2.0 * h);
  }
  g.bind(wrt, base);
  return out;
}

}  // namespace deml

#endif  // DEML_AUTODIFF_HPP
