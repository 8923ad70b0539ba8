#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>

#include "fluxamba/core.hpp"

namespace flux {

// Dense n-d array. Buffers are shared so copies are cheap; ops return fresh
// tensors, so from the caller's side a Tensor is an immutable value. Storage
// is double; f32 tensors quantize on every store, which keeps one code path
// while preserving per-dtype determinism.
class Tensor {
 public:
  Shape shape;
  DType dtype = DType::f32;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, DType dt) : shape(std::move(s)), dtype(dt) {
    data_ = std::make_shared<std::vector<double>>(numel(shape), 0.0);
    id_ = next_id();
  }

  static Tensor zeros(Shape s, DType dt = DType::f32) { return Tensor(std::move(s), dt); }

  static Tensor full(Shape s, double v, DType dt = DType::f32) {
    Tensor t(std::move(s), dt);
    for (auto& x : *t.data_) x = t.quantize(v);
    return t;
  }

  static Tensor from(Shape s, const std::vector<double>& vals, DType dt = DType::f32) {
    Tensor t(std::move(s), dt);
    if (vals.size() != t.size())
      throw ShapeError("Tensor::from: " + std::to_string(vals.size()) +
                       " values for shape " + shape_str(t.shape));
    for (size_t i = 0; i < vals.size(); ++i) (*t.data_)[i] = t.quantize(vals[i]);
    return t;
  }

  static Tensor scalar(double v, DType dt = DType::f32) { return full({1}, v, dt); }

  size_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return static_cast<bool>(data_); }
  uint64_t id() const { return id_; }

  double at(size_t i) const { return (*data_)[i]; }
  const std::vector<double>& data() const { return *data_; }
  std::vector<double>& mutable_data() { return *data_; }

  double quantize(double v) const {
    return dtype == DType::f32 ? static_cast<double>(static_cast<float>(v)) : v;
  }
  void store(size_t i, double v) { (*data_)[i] = quantize(v); }

  Tensor& set_requires_grad(bool rg = true) {
    requires_grad = rg;
    if (rg && !grad_) grad_ = std::make_shared<std::vector<double>>(size(), 0.0);
    return *this;
  }

  bool has_grad() const { return static_cast<bool>(grad_); }
  const std::vector<double>& grad() const {
    if (!grad_) throw NumericError("Tensor::grad: no gradient buffer");
    return *grad_;
  }
  std::vector<double>& mutable_grad() {
    if (!grad_) grad_ = std::make_shared<std::vector<double>>(size(), 0.0);
    return *grad_;
  }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }

  // Fresh tensor, same shape/dtype, zero-filled.
  Tensor like() const { return Tensor(shape, dtype); }

  void check_finite(const char* ctx) const {
    for (double v : *data_)
      if (!std::isfinite(v)) throw NumericError(std::string(ctx) + ": non-finite value");
  }

 private:
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  uint64_t id_ = 0;

  static uint64_t next_id() {
    static std::atomic<uint64_t> c{1};
    return c.fetch_add(1);
  }
};

inline DType promote(const Tensor& a, const Tensor& b) {
  return (a.dtype == DType::f64 || b.dtype == DType::f64) ? DType::f64 : DType::f32;
}

// Reverse-mode tape. Ops executed inside a TapeScope record a backward
// closure; backward() replays them once in reverse order. One tape per
// thread of execution.
class Tape {
 public:
  static Tape*& current() {
    thread_local Tape* t = nullptr;
    return t;
  }

  bool tracked(const Tensor& t) const {
    return t.requires_grad || live_.count(t.id()) > 0;
  }

  void mark_output(const Tensor& t) { live_.insert(t.id()); }

  void register_leaf(const Tensor& t) {
    if (t.requires_grad && !leaves_.count(t.id()))
      leaves_.emplace(t.id(),
                      LeafSink(const_cast<Tensor&>(t).mutable_grad(), t.size()));
  }

  bool has_grad(uint64_t id) const { return grads_.count(id) > 0; }

  std::vector<double>& grad_buffer(const Tensor& t) {
    auto it = grads_.find(t.id());
    if (it == grads_.end())
      it = grads_.emplace(t.id(), std::vector<double>(t.size(), 0.0)).first;
    return it->second;
  }

  void push(uint64_t out_id, std::function<void()> bw) {
    records_.push_back({out_id, std::move(bw)});
  }

  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw NumericError("backward: loss must be scalar");
    if (consumed_) throw NumericError("backward: tape already consumed");
    if (!tracked(loss)) throw NumericError("backward: loss detached from tape");
    consumed_ = true;
    grad_buffer(loss)[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it)
      if (grads_.count(it->out_id)) it->backward();
    for (auto& [id, sink] : leaves_) {
      auto git = grads_.find(id);
      if (git == grads_.end()) continue;
      for (size_t i = 0; i < sink.n; ++i) sink.buf->at(i) += git->second[i];
    }
  }

  void reset() {
    records_.clear();
    grads_.clear();
    live_.clear();
    leaves_.clear();
    consumed_ = false;
  }

  size_t num_ops() const { return records_.size(); }

 private:
  struct Record {
    uint64_t out_id;
    std::function<void()> backward;
  };
  struct LeafSink {
    LeafSink(std::vector<double>& b, size_t count) : buf(&b), n(count) {}
    std::vector<double>* buf;
    size_t n;
  };
  std::vector<Record> records_;
  std::unordered_map<uint64_t, std::vector<double>> grads_;
  std::unordered_set<uint64_t> live_;
  std::unordered_map<uint64_t, LeafSink> leaves_;
  bool consumed_ = false;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& t) : prev_(Tape::current()) { Tape::current() = &t; }
  ~TapeScope() { Tape::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// True when an op with these inputs must record; also registers leaves.
inline bool grad_enabled(std::initializer_list<const Tensor*> inputs) {
  Tape* tp = Tape::current();
  if (!tp) return false;
  bool any = false;
  for (const Tensor* t : inputs)
    if (t && t->defined() && tp->tracked(*t)) {
      any = true;
      tp->register_leaf(*t);
    }
  return any;
}

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// Central finite differences, elementwise. f must be deterministic; x should
// be f64 or the quotient is noise.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5) {
  Tensor g = x.like();
  Tensor probe = x.like();
  for (size_t i = 0; i < x.size(); ++i) probe.store(i, x.at(i));
  for (size_t i = 0; i < x.size(); ++i) {
    double v = probe.at(i);
    probe.store(i, v + h);
    double fp = f(probe);
    probe.store(i, v - h);
    double fm = f(probe);
    probe.store(i, v);
    g.store(i, (fp - fm) / (2.0 * h));
  }
  return g;
}

}  // namespace flux
