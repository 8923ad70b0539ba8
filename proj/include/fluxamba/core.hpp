#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace flux {

// Exit-code contract: usage/config 1, data 2, numeric 3.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

enum class DType { f32, f64 };

using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension " + std::to_string(d));
    n *= static_cast<size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* ctx) {
  if (a != b)
    throw ShapeError(std::string(ctx) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
}

// Row-major strides, last axis fastest.
inline std::vector<size_t> strides_of(const Shape& s) {
  std::vector<size_t> st(s.size());
  size_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= static_cast<size_t>(s[i]);
  }
  return st;
}

// Analytic FLOP accounting (2x multiply-accumulates). Ops add their counts
// when a counter is active; elementwise ops are not counted.
class FlopCounter {
 public:
  static FlopCounter*& current() {
    thread_local FlopCounter* c = nullptr;
    return c;
  }
  void add(uint64_t f) { flops_ += f; }
  uint64_t flops() const { return flops_; }

 private:
  uint64_t flops_ = 0;
};

class FlopScope {
 public:
  explicit FlopScope(FlopCounter& c) : prev_(FlopCounter::current()) {
    FlopCounter::current() = &c;
  }
  ~FlopScope() { FlopCounter::current() = prev_; }
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  FlopCounter* prev_;
};

inline void count_flops_add(uint64_t f) {
  if (auto* c = FlopCounter::current()) c->add(f);
}

}  // namespace flux
