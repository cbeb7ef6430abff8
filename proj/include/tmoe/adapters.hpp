#pragma once

// Task-conditioned residual adapters placed after each FFN / MoE layer.
// Static banks hold one adapter per task; dynamic banks hold L shared
// adapters chosen per token by a gate over concat(x, task embedding).

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "tmoe/error.hpp"
#include "tmoe/module.hpp"
#include "tmoe/moe.hpp"
#include "tmoe/ops.hpp"
#include "tmoe/tensor.hpp"

namespace tmoe {

enum class AdapterMode { kStatic, kDynamic, kSharedDynamic };

inline const char* adapter_mode_name(AdapterMode m) {
  switch (m) {
    case AdapterMode::kStatic: return "static";
    case AdapterMode::kDynamic: return "dynamic";
    case AdapterMode::kSharedDynamic: return "shared_dynamic";
  }
  return "?";
}

inline AdapterMode parse_adapter_mode(const std::string& s) {
  if (s == "static") return AdapterMode::kStatic;
  if (s == "dynamic") return AdapterMode::kDynamic;
  if (s == "shared_dynamic" || s == "shared-dynamic") return AdapterMode::kSharedDynamic;
  fail(ErrorCategory::kConfig, "unknown adapter mode '" + s + "'");
}

// static: one per task; dynamic modes: ceil(log2 M) clamped at 1.
inline std::int64_t adapter_count(std::int64_t n_tasks, AdapterMode mode) {
  require(n_tasks >= 1, ErrorCategory::kConfig, "adapter_count: need at least one task");
  if (mode == AdapterMode::kStatic) return n_tasks;
  std::int64_t l = 0;
  while ((std::int64_t{1} << l) < n_tasks) ++l;
  return std::max<std::int64_t>(1, l);
}

template <class T>
struct Adapter {
  BasicTensor<T> w_down, b_down, w_up, b_up;

  // The up projection starts at zero, so a fresh adapter is the identity.
  static Adapter make(ParameterSet<T>& ps, const std::string& prefix, std::int64_t d_model,
                      std::int64_t d_adapter) {
    Adapter a;
    a.w_down = ps.add(prefix + ".w_down", {d_model, d_adapter}, Init::normal(1.0 / std::sqrt(double(d_model))));
    a.b_down = ps.add(prefix + ".b_down", {d_adapter}, Init::zeros());
    a.w_up = ps.add(prefix + ".w_up", {d_adapter, d_model}, Init::zeros());
    a.b_up = ps.add(prefix + ".b_up", {d_model}, Init::zeros());
    return a;
  }

  // Bottleneck branch only, without the residual.
  BasicTensor<T> delta(const BasicTensor<T>& x) const {
    return linear(relu(linear(x, w_down, b_down)), w_up, b_up);
  }
};

template <class T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& x, const Adapter<T>& adapter) {
  return add(x, adapter.delta(x));
}

template <class T>
struct TaskEmbeddingTable {
  BasicTensor<T> table;  // [M, d_task]

  std::int64_t n_tasks() const { return table.dim(0); }
  std::int64_t dim() const { return table.dim(1); }
};

template <class T>
struct TaskGate {
  BasicTensor<T> w_t;  // [d_model + d_task, L]
  std::int64_t k_t = 1;
};

template <class T>
struct BankOutput {
  BasicTensor<T> y;
  RoutingDecision decision;        // per active token, over adapters
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> task_of_unit;
  DispatchStats<T> stats;
};

template <class T>
class TaskAdapterBank {
 public:
  TaskAdapterBank() = default;

  // `embedding` is required in dynamic modes; in shared-dynamic mode the
  // same object also feeds the MoE gates.
  TaskAdapterBank(ParameterSet<T>& ps, const std::string& prefix, AdapterMode mode, std::int64_t n_tasks,
                  std::int64_t d_model, std::int64_t d_adapter,
                  std::shared_ptr<TaskEmbeddingTable<T>> embedding, std::int64_t k_t = 1,
                  std::int64_t n_adapters_override = 0, bool detach_normalizer = true)
      : mode_(mode), n_tasks_(n_tasks), d_model_(d_model), embedding_(std::move(embedding)),
        detach_normalizer_(detach_normalizer) {
    const auto l = n_adapters_override > 0 ? n_adapters_override : adapter_count(n_tasks, mode);
    if (mode == AdapterMode::kStatic) {
      require(l == n_tasks, ErrorCategory::kConfig, "static adapter bank needs one adapter per task");
    } else {
      require(embedding_ != nullptr, ErrorCategory::kConfig, "dynamic adapter bank needs a task embedding table");
      require(embedding_->n_tasks() == n_tasks, ErrorCategory::kConfig,
              "task embedding table rows do not match task count");
      if (n_tasks >= 2 && n_adapters_override == 0) {
        require(l < n_tasks, ErrorCategory::kConfig, "dynamic bank needs fewer adapters than tasks");
      }
      require(k_t >= 1 && k_t <= l, ErrorCategory::kConfig, "task gate k exceeds adapter count");
      gate_.k_t = k_t;
      gate_.w_t = ps.add(prefix + ".task_gate.w_t", {d_model + embedding_->dim(), l}, Init::normal(0.02));
    }
    for (std::int64_t a = 0; a < l; ++a) {
      adapters_.push_back(Adapter<T>::make(ps, prefix + ".adapters." + std::to_string(a), d_model, d_adapter));
    }
  }

  AdapterMode mode() const { return mode_; }
  std::int64_t n_adapters() const { return static_cast<std::int64_t>(adapters_.size()); }
  std::int64_t n_tasks() const { return n_tasks_; }
  const std::vector<Adapter<T>>& adapters() const { return adapters_; }
  const TaskGate<T>& gate() const { return gate_; }
  const std::shared_ptr<TaskEmbeddingTable<T>>& embedding() const { return embedding_; }

  std::int64_t static_route(std::int64_t task) const {
    require(task >= 0 && task < n_tasks_, ErrorCategory::kUnknownTask,
            "task index " + std::to_string(task) + " is not registered (" + std::to_string(n_tasks_) + " tasks)");
    return task;
  }

  // Gate distribution over adapters for rows x with per-row task indices.
  BasicTensor<T> gate_distribution(const BasicTensor<T>& x, std::span<const std::int64_t> tasks) const {
    require(mode_ != AdapterMode::kStatic, ErrorCategory::kContract, "static banks have no task gate");
    for (auto t : tasks) static_route(t);
    auto t_rows = embedding_lookup(embedding_->table, tasks);
    return softmax(linear(concat<T>({x, t_rows}, 1), gate_.w_t));
  }

  RoutingDecision dynamic_route(const BasicTensor<T>& x, std::int64_t task) const {
    std::vector<std::int64_t> tasks(static_cast<std::size_t>(x.dim(0)), task);
    return top_k_select(gate_distribution(x, tasks), gate_.k_t);
  }

  BankOutput<T> forward(const BasicTensor<T>& x, const TokenLayout& layout, RoutingTape<T>* tape = nullptr) const {
    require(x.rank() == 2 && x.dim(1) == d_model_ && layout.rows() == x.dim(0), ErrorCategory::kDimension,
            "bank_forward: input " + shape_str(x.shape()) + " does not match the layout or width " +
                std::to_string(d_model_));
    BankOutput<T> out;
    out.rows = layout.active_rows();
    require(!out.rows.empty(), ErrorCategory::kContract, "bank_forward: no active tokens");
    for (auto r : out.rows) out.task_of_unit.push_back(static_route(layout.task_of_row(r)));
    const auto l = n_adapters();
    const bool all_active = static_cast<std::int64_t>(out.rows.size()) == x.dim(0);
    auto expert = [&](std::int64_t a, const BasicTensor<T>& xa) {
      return adapters_[static_cast<std::size_t>(a)].delta(xa);
    };

    std::vector<std::vector<std::int64_t>> selection;
    BasicTensor<T> delta, probs;
    out.decision.n_experts = l;
    if (mode_ == AdapterMode::kStatic) {
      out.decision.k = 1;
      Storage<T> onehot(out.rows.size() * static_cast<std::size_t>(l), T(0));
      for (std::size_t i = 0; i < out.rows.size(); ++i) {
        selection.push_back({out.task_of_unit[i]});
        out.decision.weights.push_back({1.0});
        onehot[i * static_cast<std::size_t>(l) + static_cast<std::size_t>(out.task_of_unit[i])] = T(1);
      }
      probs = BasicTensor<T>::from_data({static_cast<std::int64_t>(out.rows.size()), l}, std::move(onehot));
      delta = mix_experts<T>(x, l, out.rows, selection, nullptr, expert);
    } else {
      out.decision.k = gate_.k_t;
      const auto xa = all_active ? x : gather_rows(x, std::span<const std::int64_t>(out.rows));
      probs = gate_distribution(xa, out.task_of_unit);
      const bool replay = tape && tape->mode() == RoutingTape<T>::Mode::kReplay;
      Storage<T> denominators;
      if (replay) {
        const auto& entry = tape->next();
        require(entry.selection.size() == out.rows.size(), ErrorCategory::kContract,
                "routing tape entry does not match the token count");
        selection = entry.selection;
        denominators = entry.denominators;
      } else {
        selection = top_k_select(probs, gate_.k_t).experts;
        const auto pd = probs.data();
        denominators.assign(selection.size(), T(0));
        for (std::size_t t = 0; t < selection.size(); ++t) {
          for (auto a : selection[t]) denominators[t] += pd[t * static_cast<std::size_t>(l) + static_cast<std::size_t>(a)];
        }
        if (tape) tape->record({selection, denominators});
      }
      const auto weights = renormalize_selected(probs, selection, detach_normalizer_,
                                                (replay && detach_normalizer_) ? &denominators : nullptr);
      delta = mix_experts<T>(x, l, out.rows, selection, &weights, expert);
      const auto wd = weights.data();
      std::size_t flat = 0;
      for (const auto& sel : selection) {
        std::vector<double> w;
        for (std::size_t i = 0; i < sel.size(); ++i) w.push_back(wd[flat++]);
        out.decision.weights.push_back(std::move(w));
      }
    }
    const auto pd = probs.data();
    for (std::size_t t = 0; t < selection.size(); ++t) {
      out.decision.distribution.emplace_back(pd.begin() + static_cast<std::ptrdiff_t>(t * static_cast<std::size_t>(l)),
                                             pd.begin() + static_cast<std::ptrdiff_t>((t + 1) * static_cast<std::size_t>(l)));
    }
    out.stats = dispatch_stats(probs, selection);
    out.decision.experts = std::move(selection);
    out.y = add(x, delta);
    return out;
  }

 private:
  AdapterMode mode_ = AdapterMode::kStatic;
  std::int64_t n_tasks_ = 0;
  std::int64_t d_model_ = 0;
  std::vector<Adapter<T>> adapters_;
  TaskGate<T> gate_;
  std::shared_ptr<TaskEmbeddingTable<T>> embedding_;
  bool detach_normalizer_ = true;
};

}  // namespace tmoe
