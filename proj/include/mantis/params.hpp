#pragma once

#include "mantis/autodiff.hpp"
#include "mantis/core.hpp"

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>

namespace mantis {

struct Param {
  std::string name;
  Matrix value;
  Matrix grad;  // same shape as value for trainable tensors, empty otherwise
  bool trainable = false;
};

/// Named tensors with a trainable flag and a gradient accumulator per
/// trainable tensor. Insertion order is preserved and references stay valid.
class ParamStore {
 public:
  Param& add(const std::string& name, Matrix value, bool trainable) {
    if (index_.count(name)) throw InternalError("duplicate parameter '" + name + "'");
    if (!value.allFinite()) throw NumericError("parameter '" + name + "' initialized with non-finite values");
    index_.emplace(name, params_.size());
    params_.push_back(Param{name, std::move(value), Matrix(), false});
    set_trainable(params_.back(), trainable);
    return params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Param& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InternalError("unknown parameter '" + name + "'");
    return params_[it->second];
  }
  const Param& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InternalError("unknown parameter '" + name + "'");
    return params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Param& operator[](std::size_t i) { return params_[i]; }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  static void set_trainable(Param& p, bool trainable) {
    p.trainable = trainable;
    if (trainable)
      p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    else
      p.grad.resize(0, 0);
  }

  void set_trainable(const std::string& name, bool trainable) { set_trainable(at(name), trainable); }

  void freeze_all() {
    for (auto& p : params_) set_trainable(p, false);
  }

  void zero_grad() {
    for (auto& p : params_)
      if (p.trainable) p.grad.setZero();
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  std::size_t count_with_prefix(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.name.rfind(prefix, 0) == 0) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  std::deque<Param> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Puts store tensors on a tape (borrowed, no copy): trainable tensors become
/// gradient-carrying leaves when the tape records, everything else constants.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, ParamStore& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Param& p = store_.at(name);
    Var v = (p.trainable && tape_.recording()) ? tape_.variable_ref(p.value) : tape_.constant_ref(p.value);
    bound_.emplace(name, v);
    return v;
  }

  std::optional<Var> optional(const std::string& name) {
    if (!store_.contains(name)) return std::nullopt;
    return (*this)(name);
  }

  Tape& tape() { return tape_; }
  ParamStore& store() { return store_; }

  // Adds tape gradients of bound trainable tensors into the store accumulators.
  void accumulate_grads() {
    for (auto& [name, v] : bound_) {
      Param& p = store_.at(name);
      if (p.trainable && tape_.has_grad(v.id)) p.grad += tape_.grad(v);
    }
  }

  // Copies tape gradients into a name -> gradient map.
  std::map<std::string, Matrix> gradients() {
    std::map<std::string, Matrix> out;
    for (auto& [name, v] : bound_) {
      Param& p = store_.at(name);
      if (!p.trainable) continue;
      out[name] = tape_.has_grad(v.id) ? tape_.grad(v) : Matrix::Zero(p.value.rows(), p.value.cols());
    }
    return out;
  }

 private:
  Tape& tape_;
  ParamStore& store_;
  std::map<std::string, Var> bound_;
};

}  // namespace mantis
