#ifndef DEML_MODELS_HPP
#define DEML_MODELS_HPP

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deml/autodiff.hpp"
#include "deml/rng.hpp"
#include "deml/tensor.hpp"

namespace deml {

// Named, ordered collection of parameter tensors. Iteration order is insertion
// order and is part of the contract: flatten/unflatten and the checkpoint
// format depend on it.
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(std::uint64_t seed) : rng_seed_(seed) {}

  void add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw Error("ParamStore: duplicate name " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(t));
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: no entry named " + name);
    return entries_[it->second].second;
  }

  void set(const std::string& name, Tensor t) {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamStore: no entry named " + name);
    if (t.shape() != entries_[it->second].second.shape())
      throw ShapeError("ParamStore: shape change for " + name);
    entries_[it->second].second = std::move(t);
  }

  std::size_t size() const { return entries_.size(); }
  const std::pair<std::string, Tensor>& entry(std::size_t i) const {
    return entries_[i];
  }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::uint64_t rng_seed() const { return rng_seed_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(numel());
    for (const auto& [name, t] : entries_)
      out.insert(out.end(), t.values().begin(), t.values().end());
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    if (flat.size() != numel())
      throw ShapeError("ParamStore: unflatten size " + std::to_string(flat.size()) +
                       " vs " + std::to_string(numel()));
    std::size_t off = 0;
    for (auto& [name, t] : entries_) {
      std::copy(flat.begin() + off, flat.begin() + off + t.numel(),
                t.values().begin());
      off += t.numel();
    }
  }

  // Same names and shapes, all values zero.
  ParamStore zeros_like() const {
    ParamStore z(rng_seed_);
    for (const auto& [name, t] : entries_) z.add(name, Tensor(t.shape()));
    return z;
  }

  ParamStore constant_like(double v) const {
    ParamStore c(rng_seed_);
    for (const auto& [name, t] : entries_) c.add(name, Tensor(t.shape(), v));
    return c;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t rng_seed_ = 0;
};

// Graph-side view of a store: name -> node.
using NodeMap = std::map<std::string, NodeRef>;

// Inserts each tensor as a leaf. Trainable stores go in as parameters;
// evaluation-only snapshots as constants.
inline NodeMap params_to_graph(Graph& g, const ParamStore& store,
                               bool trainable = true) {
  NodeMap m;
  for (const auto& [name, t] : store)
    m[name] = trainable ? parameter(g, t, name) : constant(g, t, name);
  return m;
}

inline NodeRef node_for(const NodeMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw Error("missing parameter node " + name);
  return it->second;
}

// ---------------------------------------------------------------------------

enum class GeneratorKind { kMlp, kSmallConv };

struct GeneratorConfig {
  GeneratorKind kind = GeneratorKind::kMlp;
  // mlp
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden = {64};
  // small-conv
  std::size_t input_c = 1, input_h = 8, input_w = 8;
  std::vector<std::size_t> channels = {4, 4};
  std::size_t conv_kernel = 3;

  std::size_t feature_dim = 32;

  void validate() const {
    if (feature_dim == 0) throw Error("generator: feature_dim must be positive");
    if (kind == GeneratorKind::kMlp && input_dim == 0)
      throw Error("generator: input_dim must be positive");
    if (kind == GeneratorKind::kSmallConv && channels.empty())
      throw Error("generator: at least one conv layer required");
  }

  // spatial size after the valid-padding conv stack
  std::pair<std::size_t, std::size_t> conv_out_hw() const {
    std::size_t h = input_h, w = input_w;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (conv_kernel > h || conv_kernel > w)
        throw ShapeError("generator: conv stack shrinks input below kernel size");
      h -= conv_kernel - 1;
      w -= conv_kernel - 1;
    }
    return {h, w};
  }
};

struct LearnerConfig {
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 5;
  bool output_relu = false;  // Matching Nets g: nonlinearity on the embedding

  void validate() const {
    if (output_dim == 0) throw Error("learner: output_dim must be positive");
  }
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = std_dev * rng.normal();
  return t;
}

// Dense stack: w0/b0, w1/b1, ... sized in_dim -> dims[0] -> ... -> dims.back().
inline void init_dense_stack(ParamStore& store, std::size_t in_dim,
                             const std::vector<std::size_t>& dims, Rng& rng) {
  std::size_t prev = in_dim;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    store.add("w" + std::to_string(i),
              he_normal(Shape{prev, dims[i]}, prev, rng));
    store.add("b" + std::to_string(i), Tensor(Shape{1, dims[i]}));
    prev = dims[i];
  }
}

inline NodeRef dense_stack_forward(const NodeMap& params, NodeRef x,
                                   std::size_t layers, bool relu_between,
                                   bool relu_last) {
  NodeRef h = x;
  for (std::size_t i = 0; i < layers; ++i) {
    h = affine(h, node_for(params, "w" + std::to_string(i)),
               node_for(params, "b" + std::to_string(i)));
    bool last = (i + 1 == layers);
    if ((last && relu_last) || (!last && relu_between)) h = relu(h);
  }
  return h;
}

}  // namespace detail

// He-normal weights, zero biases, fully determined by the seed.
inline ParamStore init_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store(seed);
  Rng rng(seed);
  if (cfg.kind == GeneratorKind::kMlp) {
    std::vector<std::size_t> dims = cfg.hidden;
    dims.push_back(cfg.feature_dim);
    detail::init_dense_stack(store, cfg.input_dim, dims, rng);
  } else {
    std::size_t prev_c = cfg.input_c;
    for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
      std::size_t fan_in = prev_c * cfg.conv_kernel * cfg.conv_kernel;
      store.add("k" + std::to_string(i),
                detail::he_normal(
                    Shape{cfg.channels[i], prev_c, cfg.conv_kernel, cfg.conv_kernel},
                    fan_in, rng));
      store.add("kb" + std::to_string(i), Tensor(Shape{1, cfg.channels[i], 1, 1}));
      prev_c = cfg.channels[i];
    }
    auto [oh, ow] = cfg.conv_out_hw();
    std::size_t flat = prev_c * oh * ow;
    store.add("w", detail::he_normal(Shape{flat, cfg.feature_dim}, flat, rng));
    store.add("b", Tensor(Shape{1, cfg.feature_dim}));
  }
  return store;
}

inline ParamStore init_discriminator(std::size_t feature_dim,
                                     std::size_t num_classes, std::uint64_t seed) {
  ParamStore store(seed);
  Rng rng(seed);
  store.add("w", detail::he_normal(Shape{feature_dim, num_classes}, feature_dim, rng));
  store.add("b", Tensor(Shape{1, num_classes}));
  return store;
}

inline ParamStore init_learner(const LearnerConfig& cfg, std::size_t in_dim,
                               std::uint64_t seed) {
  cfg.validate();
  ParamStore store(seed);
  Rng rng(seed);
  std::vector<std::size_t> dims = cfg.hidden;
  dims.push_back(cfg.output_dim);
  detail::init_dense_stack(store, in_dim, dims, rng);
  return store;
}

// batch -> concept features [batch, feature_dim]
inline NodeRef generator_forward(const GeneratorConfig& cfg, const NodeMap& params,
                                 NodeRef batch) {
  Graph& g = *batch.graph;
  if (cfg.kind == GeneratorKind::kMlp) {
    const Shape& s = g.shape_of(batch.id);
    if (s.size() != 2 || s[1] != cfg.input_dim)
      throw ShapeError("generator: expected [batch," + std::to_string(cfg.input_dim) +
                       "], got " + shape_str(s));
    return detail::dense_stack_forward(params, batch, cfg.hidden.size() + 1,
                                       /*relu_between=*/true, /*relu_last=*/false);
  }
  const Shape& s = g.shape_of(batch.id);
  if (s.size() != 4 || s[1] != cfg.input_c || s[2] != cfg.input_h || s[3] != cfg.input_w)
    throw ShapeError("generator: conv input shape " + shape_str(s) + " invalid");
  NodeRef h = batch;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    h = conv2d(h, node_for(params, "k" + std::to_string(i)));
    NodeRef bias = node_for(params, "kb" + std::to_string(i));
    h = add(h, broadcast(bias, g.shape_of(h.id)));
    h = relu(h);
  }
  const Shape& hs = g.shape_of(h.id);
  NodeRef flat = reshape(h, {hs[0], hs[1] * hs[2] * hs[3]});
  return affine(flat, node_for(params, "w"), node_for(params, "b"));
}

// features [batch, feature_dim] -> logits [batch, num_classes]
inline NodeRef discriminator_forward(const NodeMap& params, NodeRef features) {
  return affine(features, node_for(params, "w"), node_for(params, "b"));
}

// features -> logits (MAML / Meta-SGD) or embedding (Matching Nets g)
inline NodeRef learner_forward(const LearnerConfig& cfg, const NodeMap& params,
                               NodeRef features) {
  return detail::dense_stack_forward(params, features, cfg.hidden.size() + 1,
                                     /*relu_between=*/true,
                                     /*relu_last=*/cfg.output_relu);
}

}  // namespace deml

#endif  // DEML_MODELS_HPP
