#pragma once

// Named parameter storage and the small building blocks shared by layers.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tmoe/error.hpp"
#include "tmoe/ops.hpp"
#include "tmoe/rng.hpp"
#include "tmoe/tensor.hpp"

namespace tmoe {

struct Init {
  enum class Kind { kZeros, kOnes, kNormal };
  Kind kind = Kind::kZeros;
  double stddev = 0.0;

  static Init zeros() { return {Kind::kZeros, 0.0}; }
  static Init ones() { return {Kind::kOnes, 0.0}; }
  static Init normal(double stddev) { return {Kind::kNormal, stddev}; }
};

// Ordered name -> tensor map. Each tensor's initial values depend only on
// (seed, name), so adding or removing a module never shifts the values of
// the others, and float/double instantiations start from the same numbers.
template <class T>
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : seed_(seed) {}

  BasicTensor<T> add(const std::string& name, Shape shape, Init init) {
    require(!index_.count(name), ErrorCategory::kContract, "duplicate parameter name " + name);
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    Storage<T> values(n, T(0));
    if (init.kind == Init::Kind::kOnes) {
      std::fill(values.begin(), values.end(), T(1));
    } else if (init.kind == Init::Kind::kNormal) {
      Rng rng(hash_combine(seed_, hash_string(name)));
      for (auto& v : values) v = static_cast<T>(rng.normal() * init.stddev);
    }
    auto t = BasicTensor<T>::from_data(std::move(shape), std::move(values), true);
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
  }

  const std::vector<std::pair<std::string, BasicTensor<T>>>& items() const { return items_; }

  std::vector<BasicTensor<T>> tensors() const {
    std::vector<BasicTensor<T>> out;
    out.reserve(items_.size());
    for (const auto& [name, t] : items_) out.push_back(t);
    return out;
  }

  const BasicTensor<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }

  std::int64_t count() const {
    std::int64_t total = 0;
    for (const auto& [name, t] : items_) total += t.numel();
    return total;
  }

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, BasicTensor<T>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T>
struct LayerNormParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  static LayerNormParams make(ParameterSet<T>& ps, const std::string& prefix, std::int64_t d) {
    return {ps.add(prefix + ".g", {d}, Init::ones()), ps.add(prefix + ".b", {d}, Init::zeros())};
  }
  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

// Two-layer ReLU feed-forward block; also the expert type of MoE layers.
template <class T>
struct FeedForward {
  BasicTensor<T> w_in, b_in, w_out, b_out;

  static FeedForward make(ParameterSet<T>& ps, const std::string& prefix, std::int64_t d_model,
                          std::int64_t d_ff) {
    FeedForward f;
    f.w_in = ps.add(prefix + ".w_in", {d_model, d_ff}, Init::normal(1.0 / std::sqrt(double(d_model))));
    f.b_in = ps.add(prefix + ".b_in", {d_ff}, Init::zeros());
    f.w_out = ps.add(prefix + ".w_out", {d_ff, d_model}, Init::normal(1.0 / std::sqrt(double(d_ff))));
    f.b_out = ps.add(prefix + ".b_out", {d_model}, Init::zeros());
    return f;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const {
    return linear(relu(linear(x, w_in, b_in)), w_out, b_out);
  }
};

// Per-row bookkeeping for a packed [batch * len, d] activation: which
// sentence each row belongs to (-1 for padding) and each sentence's task.
struct TokenLayout {
  std::vector<std::int64_t> sentence_of_row;
  std::vector<std::int64_t> task_of_sentence;
  std::int64_t n_sentences = 0;

  std::int64_t rows() const { return static_cast<std::int64_t>(sentence_of_row.size()); }

  std::vector<std::int64_t> active_rows() const {
    std::vector<std::int64_t> out;
    for (std::size_t r = 0; r < sentence_of_row.size(); ++r) {
      if (sentence_of_row[r] >= 0) out.push_back(static_cast<std::int64_t>(r));
    }
    return out;
  }

  std::int64_t task_of_row(std::int64_t r) const {
    return task_of_sentence[static_cast<std::size_t>(sentence_of_row[static_cast<std::size_t>(r)])];
  }

  // Every row its own token of a single sentence with the given task.
  static TokenLayout single_sentence(std::int64_t rows, std::int64_t task = 0) {
    TokenLayout l;
    l.sentence_of_row.assign(static_cast<std::size_t>(rows), 0);
    l.task_of_sentence = {task};
    l.n_sentences = 1;
    return l;
  }
};

// Applies f to the active rows of x; inactive rows of the result are zero.
template <class T, class F>
BasicTensor<T> apply_to_active_rows(const BasicTensor<T>& x, const TokenLayout* layout, F&& f) {
  if (!layout) return f(x);
  const auto active = layout->active_rows();
  if (static_cast<std::int64_t>(active.size()) == x.dim(0)) return f(x);
  require(!active.empty(), ErrorCategory::kContract, "no active rows");
  auto part = f(gather_rows(x, std::span<const std::int64_t>(active)));
  return combine_rows<T>(x.dim(0), part.dim(1), {part}, {active});
}

}  // namespace tmoe
