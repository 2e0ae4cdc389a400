#ifndef DEML_TENSOR_HPP
#define DEML_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deml {

using Shape = std::vector<std::size_t>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

// Dense row-major n-d array of doubles.
class Tensor {
 public:
  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " values");
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, {v}); }

  static Tensor vec(std::initializer_list<double> vals) {
    return Tensor(Shape{vals.size()}, std::vector<double>(vals));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-d accessor, row-major.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool operator==(const Tensor& o) const {
    return shape_ == o.shape_ && data_ == o.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

// C = op(A) * op(B) with optional transposes; plain triple loop is fast enough
// at the matrix sizes this project sees.
inline Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::size_t m = ta ? a.dim(1) : a.dim(0);
  std::size_t k = ta ? a.dim(0) : a.dim(1);
  std::size_t kb = tb ? b.dim(1) : b.dim(0);
  std::size_t n = tb ? b.dim(0) : b.dim(1);
  if (k != kb)
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                     (ta ? "^T" : "") + " vs " + shape_str(b.shape()) +
                     (tb ? "^T" : ""));
  Tensor c(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double av = ta ? a.at(p, i) : a.at(i, p);
      if (av == 0.0) continue;
      const std::size_t brow = tb ? 0 : p;
      for (std::size_t j = 0; j < n; ++j) {
        double bv = tb ? b.at(j, p) : b.at(brow, j);
        c.at(i, j) += av * bv;
      }
    }
  }
  return c;
}

}  // namespace deml

#endif  // DEML_TENSOR_HPP
