#ifndef DEML_EPISODES_HPP
#define DEML_EPISODES_HPP

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "deml/rng.hpp"
#include "deml/tensor.hpp"

namespace deml {

// Immutable labeled dataset: a [num, ...] example tensor plus integer class
// ids and a class -> example-index lookup.
struct LabeledDataset {
  Tensor examples;                   // [num, ...example dims]
  std::vector<std::uint32_t> labels; // original class ids
  std::map<std::uint32_t, std::vector<std::size_t>> class_index;

  std::size_t num_examples() const { return labels.size(); }

  Shape example_shape() const {
    Shape s(examples.shape().begin() + 1, examples.shape().end());
    return s;
  }

  std::size_t example_numel() const { return shape_numel(example_shape()); }

  void rebuild_index() {
    class_index.clear();
    for (std::size_t i = 0; i < labels.size(); ++i)
      class_index[labels[i]].push_back(i);
  }

  std::vector<std::uint32_t> class_ids() const {
    std::vector<std::uint32_t> ids;
    ids.reserve(class_index.size());
    for (const auto& [c, idx] : class_index) ids.push_back(c);
    return ids;
  }

  // Gathers the given rows into a fresh [n, ...] tensor.
  Tensor gather(const std::vector<std::size_t>& rows) const {
    std::size_t d = example_numel();
    Shape out_shape = examples.shape();
    out_shape[0] = rows.size();
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(examples.data() + rows[r] * d, examples.data() + (rows[r] + 1) * d,
                out.data() + r * d);
    return out;
  }
};

struct MetaSplit {
  std::vector<std::uint32_t> train_classes, val_classes, test_classes;

  void validate(const LabeledDataset* ds = nullptr) const {
    std::set<std::uint32_t> seen;
    auto check = [&](const std::vector<std::uint32_t>& v, const char* role) {
      for (std::uint32_t c : v) {
        if (!seen.insert(c).second)
          throw Error(std::string("meta-split: class ") + std::to_string(c) +
                      " appears in more than one role (" + role + ")");
        if (ds && !ds->class_index.count(c))
          throw Error(std::string("meta-split: class ") + std::to_string(c) +
                      " (" + role + ") not present in dataset");
      }
    };
    check(train_classes, "train");
    check(val_classes, "val");
    check(test_classes, "test");
  }
};

// One N-way task: support = train(T), query = test(T).
struct Episode {
  Tensor support_x;  // [N*K, ...]
  Tensor query_x;    // [N*Q, ...]
  std::vector<std::uint32_t> support_way, query_way;     // way labels in [0,N)
  std::vector<std::size_t> support_idx, query_idx;       // original example rows
  std::vector<std::uint32_t> way_map;                    // way -> original class id

  std::size_t ways() const { return way_map.size(); }
};

struct TaskDistribution {
  const LabeledDataset* dataset = nullptr;
  std::vector<std::uint32_t> classes;  // split role to draw from
  std::size_t n_way = 5, k_shot = 1, q_query = 15;
  Rng rng{0};

  void validate() const {
    if (!dataset) throw Error("task distribution: no dataset");
    if (n_way < 1 || k_shot < 1 || q_query < 1)
      throw Error("task distribution: N, K, Q must be >= 1");
    if (n_way > classes.size())
      throw Error("task distribution: N=" + std::to_string(n_way) +
                  " exceeds the " + std::to_string(classes.size()) +
                  " classes in the split");
  }
};

namespace detail {

// First k elements of a uniform permutation of [0, n).
inline std::vector<std::size_t> draw_without_replacement(std::size_t n,
                                                         std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < k; ++i)
    std::swap(idx[i], idx[i + rng.uniform_int(n - i)]);
  idx.resize(k);
  return idx;
}

}  // namespace detail

// N classes uniformly without replacement, then K+Q examples per class without
// replacement (first K to support). Way labels follow sorted original class id.
inline Episode sample_episode(TaskDistribution& dist) {
  dist.validate();
  const LabeledDataset& ds = *dist.dataset;
  auto picks = detail::draw_without_replacement(dist.classes.size(), dist.n_way,
                                                dist.rng);
  std::vector<std::uint32_t> chosen;
  chosen.reserve(dist.n_way);
  for (std::size_t p : picks) chosen.push_back(dist.classes[p]);
  std::sort(chosen.begin(), chosen.end());

  Episode ep;
  ep.way_map = chosen;
  for (std::uint32_t way = 0; way < chosen.size(); ++way) {
    std::uint32_t cls = chosen[way];
    auto it = ds.class_index.find(cls);
    if (it == ds.class_index.end())
      throw Error("sample_episode: class " + std::to_string(cls) +
                  " missing from dataset");
    const std::vector<std::size_t>& pool = it->second;
    std::size_t need = dist.k_shot + dist.q_query;
    if (pool.size() < need)
      throw Error("sample_episode: class " + std::to_string(cls) + " has only " +
                  std::to_string(pool.size()) + " examples, need " +
                  std::to_string(need));
    auto draws = detail::draw_without_replacement(pool.size(), need, dist.rng);
    for (std::size_t i = 0; i < dist.k_shot; ++i) {
      ep.support_idx.push_back(pool[draws[i]]);
      ep.support_way.push_back(way);
    }
    for (std::size_t i = dist.k_shot; i < need; ++i) {
      ep.query_idx.push_back(pool[draws[i]]);
      ep.query_way.push_back(way);
    }
  }
  ep.support_x = ds.gather(ep.support_idx);
  ep.query_x = ds.gather(ep.query_idx);
  return ep;
}

// m uniform draws with replacement across the whole dataset.
inline std::pair<Tensor, std::vector<std::uint32_t>> sample_instance_batch(
    const LabeledDataset& ds, std::size_t m, Rng& rng) {
  if (ds.num_examples() == 0) throw Error("sample_instance_batch: empty dataset");
  if (m < 1) throw Error("sample_instance_batch: m must be >= 1");
  std::vector<std::size_t> rows(m);
  std::vector<std::uint32_t> labels(m);
  for (std::size_t i = 0; i < m; ++i) {
    rows[i] = rng.uniform_int(ds.num_examples());
    labels[i] = ds.labels[rows[i]];
  }
  return {ds.gather(rows), std::move(labels)};
}

// ---------------------------------------------------------------------------
// Synthetic concept benchmark. Each class has a prototype in concept space;
// examples are a fixed linear rendering of the (noised) prototype with pure
// nuisance coordinates appended. The rendering map is keyed by world_seed so
// several datasets can share one "visual world".

struct SyntheticConfig {
  std::size_t num_classes = 20;
  std::size_t per_class = 20;
  std::size_t input_dim = 32;
  std::size_t concept_dim = 8;
  std::size_t nuisance_dim = 16;
  double sigma = 0.1;
  std::uint64_t world_seed = 1;       // keys the rendering map A
  std::uint32_t class_id_offset = 0;  // first class id

  void validate() const {
    if (num_classes == 0 || per_class == 0)
      throw Error("synthetic: num_classes and per_class must be positive");
    if (concept_dim == 0) throw Error("synthetic: concept_dim must be positive");
    if (nuisance_dim >= input_dim)
      throw Error("synthetic: nuisance_dim must be smaller than input_dim");
    if (sigma < 0.0) throw Error("synthetic: sigma must be nonnegative");
  }
};

// The rendering map alone, for oracle checks.
inline Tensor synthetic_rendering_map(const SyntheticConfig& cfg) {
  std::size_t signal_dim = cfg.input_dim - cfg.nuisance_dim;
  Rng world(cfg.world_seed);
  Tensor a(Shape{signal_dim, cfg.concept_dim});
  double s = 1.0 / std::sqrt(static_cast<double>(cfg.concept_dim));
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = s * world.normal();
  return a;
}

inline LabeledDataset gen_synthetic(const SyntheticConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::size_t signal_dim = cfg.input_dim - cfg.nuisance_dim;
  Tensor a = synthetic_rendering_map(cfg);

  Rng root(seed);
  Rng proto_rng = root.split();
  Rng example_rng = root.split();

  std::vector<std::vector<double>> protos(cfg.num_classes,
                                          std::vector<double>(cfg.concept_dim));
  for (auto& p : protos)
    for (double& v : p) v = proto_rng.normal();

  LabeledDataset ds;
  std::size_t num = cfg.num_classes * cfg.per_class;
  ds.examples = Tensor(Shape{num, cfg.input_dim});
  ds.labels.resize(num);
  std::vector<double> concept(cfg.concept_dim);
  std::size_t row = 0;
  for (std::uint32_t c = 0; c < cfg.num_classes; ++c) {
    for (std::size_t e = 0; e < cfg.per_class; ++e, ++row) {
      for (std::size_t j = 0; j < cfg.concept_dim; ++j)
        concept[j] = protos[c][j] + cfg.sigma * example_rng.normal();
      double* x = ds.examples.data() + row * cfg.input_dim;
      for (std::size_t i = 0; i < signal_dim; ++i) {
        double v = 0.0;
        for (std::size_t j = 0; j < cfg.concept_dim; ++j)
          v += a.at(i, j) * concept[j];
        x[i] = v;
      }
      for (std::size_t i = 0; i < cfg.nuisance_dim; ++i)
        x[signal_dim + i] = example_rng.normal();
      ds.labels[row] = cfg.class_id_offset + c;
    }
  }
  ds.rebuild_index();
  return ds;
}

// Concept-discrimination dataset sharing the meta dataset's rendering map but
// with fresh prototype classes whose ids are disjoint by construction.
inline LabeledDataset make_disjoint_concept_dataset(const SyntheticConfig& meta_cfg,
                                                    std::size_t num_classes,
                                                    std::size_t per_class,
                                                    std::uint64_t seed) {
  SyntheticConfig cfg = meta_cfg;
  cfg.num_classes = num_classes;
  cfg.per_class = per_class;
  cfg.class_id_offset = meta_cfg.class_id_offset +
                        static_cast<std::uint32_t>(meta_cfg.num_classes);
  return gen_synthetic(cfg, seed);
}

// Deterministic split by index: the first `fraction` of each class's examples.
inline std::pair<LabeledDataset, LabeledDataset> split_dataset(
    const LabeledDataset& ds, double train_fraction) {
  std::vector<std::size_t> train_rows, held_rows;
  for (const auto& [cls, rows] : ds.class_index) {
    std::size_t cut = static_cast<std::size_t>(
        static_cast<double>(rows.size()) * train_fraction);
    for (std::size_t i = 0; i < rows.size(); ++i)
      (i < cut ? train_rows : held_rows).push_back(rows[i]);
  }
  auto build = [&](const std::vector<std::size_t>& rows) {
    LabeledDataset out;
    out.examples = ds.gather(rows);
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) out.labels.push_back(ds.labels[r]);
    out.rebuild_index();
    return out;
  };
  return {build(train_rows), build(held_rows)};
}

// ---------------------------------------------------------------------------
// DMLD binary dataset format (little-endian):
//   "DMLD" | version u16 | num_examples u32 | rank u8 | dims u32 x rank |
//   dtype u8 (0 = f64) | payload row-major | labels u32 x num_examples

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_le<std::uint64_t>(os, bits);
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char buf[sizeof(T)];
  is.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (!is) throw Error("binary read: truncated file");
  std::uint64_t v = 0;
  for (std::size_t i = sizeof(T); i-- > 0;) v = (v << 8) | buf[i];
  return static_cast<T>(v);
}

inline double read_f64(std::istream& is) {
  std::uint64_t bits = read_le<std::uint64_t>(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace detail

inline void save_dataset(const LabeledDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("save_dataset: cannot open " + path);
  os.write("DMLD", 4);
  detail::write_le<std::uint16_t>(os, 1);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.num_examples()));
  Shape es = ds.example_shape();
  detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(es.size()));
  for (std::size_t d : es) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  detail::write_le<std::uint8_t>(os, 0);  // dtype f64
  for (double v : ds.examples.values()) detail::write_f64(os, v);
  for (std::uint32_t l : ds.labels) detail::write_le<std::uint32_t>(os, l);
  if (!os) throw Error("save_dataset: write failed for " + path);
}

inline LabeledDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("load_dataset: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "DMLD")
    throw Error("load_dataset: bad magic in " + path);
  std::uint16_t version = detail::read_le<std::uint16_t>(is);
  if (version != 1)
    throw Error("load_dataset: unsupported version " + std::to_string(version));
  std::uint32_t num = detail::read_le<std::uint32_t>(is);
  std::uint8_t rank = detail::read_le<std::uint8_t>(is);
  Shape shape{num};
  for (std::size_t i = 0; i < rank; ++i)
    shape.push_back(detail::read_le<std::uint32_t>(is));
  std::uint8_t dtype = detail::read_le<std::uint8_t>(is);
  if (dtype != 0) throw Error("load_dataset: unsupported dtype");
  LabeledDataset ds;
  ds.examples = Tensor(shape);
  for (std::size_t i = 0; i < ds.examples.numel(); ++i)
    ds.examples[i] = detail::read_f64(is);
  ds.labels.resize(num);
  for (std::uint32_t& l : ds.labels) l = detail::read_le<std::uint32_t>(is);
  ds.rebuild_index();
  return ds;
}

// Plain-text split manifest: `train:`, `val:`, `test:` lines with
// comma-separated class ids.
inline void save_split(const MetaSplit& split, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("save_split: cannot open " + path);
  auto line = [&](const char* role, const std::vector<std::uint32_t>& v) {
    os << role << ":";
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : " ") << v[i];
    os << "\n";
  };
  line("train", split.train_classes);
  line("val", split.val_classes);
  line("test", split.test_classes);
}

inline MetaSplit load_split(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("load_split: cannot open " + path);
  MetaSplit split;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto colon = line.find(':');
    if (colon == std::string::npos)
      throw Error("load_split: malformed line '" + line + "'");
    std::string role = line.substr(0, colon);
    std::vector<std::uint32_t>* target = nullptr;
    if (role == "train") target = &split.train_classes;
    else if (role == "val") target = &split.val_classes;
    else if (role == "test") target = &split.test_classes;
    else throw Error("load_split: unknown role '" + role + "'");
    std::stringstream rest(line.substr(colon + 1));
    std::string tok;
    while (std::getline(rest, tok, ',')) {
      if (tok.find_first_not_of(" \t") == std::string::npos) continue;
      target->push_back(static_cast<std::uint32_t>(std::stoul(tok)));
    }
  }
  split.validate();
  return split;
}

// First / middle / last chunks of the sorted class list.
inline MetaSplit make_split(const LabeledDataset& ds, std::size_t n_train,
                            std::size_t n_val, std::size_t n_test) {
  std::vector<std::uint32_t> ids = ds.class_ids();
  if (n_train + n_val + n_test > ids.size())
    throw Error("make_split: requested " +
                std::to_string(n_train + n_val + n_test) + " classes, dataset has " +
                std::to_string(ids.size()));
  MetaSplit split;
  split.train_classes.assign(ids.begin(), ids.begin() + n_train);
  split.val_classes.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  split.test_classes.assign(ids.begin() + n_train + n_val,
                            ids.begin() + n_train + n_val + n_test);
  return split;
}

}  // namespace deml

#endif  // DEML_EPISODES_HPP
