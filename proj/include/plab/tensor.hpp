#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace plab {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

namespace detail {
inline void format_parts(std::ostringstream&) {}
template <class T, class... Rest>
void format_parts(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  format_parts(os, rest...);
}
}  // namespace detail

template <class... Parts>
std::string msg(const Parts&... parts) {
  std::ostringstream os;
  detail::format_parts(os, parts...);
  return os.str();
}

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    require(d >= 0, msg("negative dimension in shape ", shape_str(s)));
    n *= d;
  }
  return n;
}

// Dense row-major double tensor. Gradient storage is allocated lazily and,
// once present, always matches values in length. Parameters (is_param) keep
// their gradients across backward calls until explicitly zeroed; everything
// else is scratch owned by a Tape.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;
  bool is_param = false;
  std::string name;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    values.assign(std::size_t(numel(shape)), 0.0);
  }

  std::int64_t size() const { return std::int64_t(values.size()); }
  int dim(int i) const { return shape[std::size_t(i)]; }
  int ndim() const { return int(shape.size()); }

  double* data() { return values.data(); }
  const double* data() const { return values.data(); }

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }
  bool has_grad() const { return grad.size() == values.size(); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr make_tensor(Shape s) {
  return std::make_shared<Tensor>(std::move(s));
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace plab
