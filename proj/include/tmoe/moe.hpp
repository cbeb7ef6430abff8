#pragma once

// Sparse mixture-of-experts feed-forward layer: softmax gate, top-k
// selection with renormalised weights, optional expert capacity, and the
// load-balancing auxiliary loss N * sum_e f_e * P_e.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tmoe/error.hpp"
#include "tmoe/module.hpp"
#include "tmoe/ops.hpp"
#include "tmoe/tensor.hpp"

namespace tmoe {

enum class Granularity { kToken, kSentence };

// Per routing unit: selected experts in rank order, their renormalised
// weights, and the full gate distribution the selection was taken from.
struct RoutingDecision {
  std::int64_t n_experts = 0;
  std::int64_t k = 0;
  std::vector<std::vector<std::int64_t>> experts;
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> distribution;

  std::size_t units() const { return experts.size(); }
};

inline std::vector<std::int64_t> top_k_indices(std::span<const double> probs, std::int64_t k) {
  std::vector<std::int64_t> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::int64_t a, std::int64_t b) {
    const auto pa = probs[static_cast<std::size_t>(a)], pb = probs[static_cast<std::size_t>(b)];
    return pa > pb || (pa == pb && a < b);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

inline void renormalize_in_place(RoutingDecision& d, std::size_t unit) {
  double s = 0.0;
  for (auto e : d.experts[unit]) s += d.distribution[unit][static_cast<std::size_t>(e)];
  auto& w = d.weights[unit];
  w.clear();
  for (auto e : d.experts[unit]) w.push_back(d.distribution[unit][static_cast<std::size_t>(e)] / s);
}

// The k most probable experts per row of dist[units, N]; ties go to the
// lowest expert index.
template <class T>
RoutingDecision top_k_select(const BasicTensor<T>& dist, std::int64_t k) {
  require(dist.rank() == 2, ErrorCategory::kDimension,
          "top_k_select: expected [units, experts], got " + shape_str(dist.shape()));
  const auto units = dist.dim(0), n = dist.dim(1);
  require(k >= 1 && k <= n, ErrorCategory::kConfig,
          "top_k_select: k = " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  RoutingDecision d;
  d.n_experts = n;
  d.k = k;
  d.experts.resize(static_cast<std::size_t>(units));
  d.weights.resize(static_cast<std::size_t>(units));
  d.distribution.resize(static_cast<std::size_t>(units));
  const auto data = dist.data();
  for (std::int64_t u = 0; u < units; ++u) {
    auto& row = d.distribution[static_cast<std::size_t>(u)];
    row.assign(data.begin() + u * n, data.begin() + (u + 1) * n);
    d.experts[static_cast<std::size_t>(u)] = top_k_indices(row, k);
    renormalize_in_place(d, static_cast<std::size_t>(u));
  }
  return d;
}

struct CapacityOutcome {
  RoutingDecision decision;
  std::int64_t capacity = 0;  // per expert
  std::int64_t accepted = 0;
  std::int64_t dropped_assignments = 0;
  std::int64_t dropped_tokens = 0;  // tokens left with no expert at all
};

// Each expert takes at most ceil(factor * units / N) assignments, first come
// first served in unit order. A refused assignment is removed; the token's
// remaining selections are renormalised, and a token left with none passes
// through the residual path untouched.
inline CapacityOutcome apply_capacity(const RoutingDecision& decision, double capacity_factor) {
  require(capacity_factor > 0.0, ErrorCategory::kConfig, "capacity factor must be positive");
  CapacityOutcome out;
  out.decision = decision;
  const auto units = static_cast<double>(decision.units());
  out.capacity = static_cast<std::int64_t>(
      std::ceil(capacity_factor * units / static_cast<double>(decision.n_experts)));
  std::vector<std::int64_t> load(static_cast<std::size_t>(decision.n_experts), 0);
  for (std::size_t u = 0; u < decision.units(); ++u) {
    std::vector<std::int64_t> kept;
    for (auto e : decision.experts[u]) {
      if (load[static_cast<std::size_t>(e)] < out.capacity) {
        ++load[static_cast<std::size_t>(e)];
        kept.push_back(e);
        ++out.accepted;
      } else {
        ++out.dropped_assignments;
      }
    }
    if (kept.empty()) ++out.dropped_tokens;
    out.decision.experts[u] = std::move(kept);
    if (out.decision.experts[u].empty()) {
      out.decision.weights[u].clear();
    } else {
      renormalize_in_place(out.decision, u);
    }
  }
  return out;
}

template <class T>
struct DispatchStats {
  std::int64_t n_experts = 0;
  std::int64_t n_tokens = 0;
  std::vector<double> token_fraction;       // f_e: share of tokens whose first accepted expert is e
  std::vector<double> mean_gate_prob;       // P_e values
  BasicTensor<T> mean_gate_prob_tensor;     // differentiable P_e, shape [N]
  std::vector<std::int64_t> token_counts;   // accepted assignments per expert
  std::int64_t dropped_assignments = 0;
  std::int64_t dropped_tokens = 0;
};

// token_probs[tokens, N] are the per-token gate distributions; selection the
// accepted experts per token.
template <class T>
DispatchStats<T> dispatch_stats(const BasicTensor<T>& token_probs,
                                const std::vector<std::vector<std::int64_t>>& selection) {
  DispatchStats<T> s;
  s.n_experts = token_probs.dim(1);
  s.n_tokens = token_probs.dim(0);
  s.token_fraction.assign(static_cast<std::size_t>(s.n_experts), 0.0);
  s.token_counts.assign(static_cast<std::size_t>(s.n_experts), 0);
  for (const auto& sel : selection) {
    if (!sel.empty()) s.token_fraction[static_cast<std::size_t>(sel[0])] += 1.0;
    for (auto e : sel) ++s.token_counts[static_cast<std::size_t>(e)];
  }
  for (auto& f : s.token_fraction) f /= static_cast<double>(s.n_tokens);
  s.mean_gate_prob_tensor = mean_pool(token_probs, 0);
  const auto pd = s.mean_gate_prob_tensor.data();
  s.mean_gate_prob.assign(pd.begin(), pd.end());
  return s;
}

// N * sum_e f_e * P_e; differentiable through P_e only.
template <class T>
BasicTensor<T> aux_load_balance_loss(const DispatchStats<T>& stats) {
  require(stats.n_tokens >= 1, ErrorCategory::kContract, "aux loss needs at least one token");
  Storage<T> f(stats.token_fraction.begin(), stats.token_fraction.end());
  auto fractions = BasicTensor<T>::from_data({stats.n_experts}, std::move(f));
  return scale(sum(mul(stats.mean_gate_prob_tensor, fractions)), static_cast<T>(stats.n_experts));
}

// Routing decisions captured on one pass and replayed on later passes, so
// finite differences see a smooth function (selection and, when the
// normaliser is detached, the normaliser are held fixed).
template <class T>
class RoutingTape {
 public:
  enum class Mode { kRecord, kReplay };

  struct Entry {
    std::vector<std::vector<std::int64_t>> selection;
    Storage<T> denominators;
  };

  explicit RoutingTape(Mode mode = Mode::kRecord) : mode_(mode) {}

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }
  void begin_pass() {
    cursor_ = 0;
    if (mode_ == Mode::kRecord) entries_.clear();
  }
  void record(Entry e) { entries_.push_back(std::move(e)); }
  const Entry& next() {
    require(cursor_ < entries_.size(), ErrorCategory::kContract,
            "routing tape exhausted: replayed pass routes more often than the recorded one");
    return entries_[cursor_++];
  }
  std::size_t size() const { return entries_.size(); }

 private:
  Mode mode_;
  std::vector<Entry> entries_;
  std::size_t cursor_ = 0;
};

struct MoeConfig {
  std::int64_t n_experts = 8;
  std::int64_t k = 1;
  Granularity granularity = Granularity::kToken;
  double aux_coef = 0.01;
  std::optional<double> capacity_factor;
  // Backward treats the top-k renormaliser as a constant. Without this a
  // top-1 gate sees weight p/p == 1 and never receives a task-loss gradient.
  bool detach_normalizer = true;
};

template <class T>
struct MoeContext {
  const TokenLayout* layout = nullptr;           // required for sentence routing / task gates
  const BasicTensor<T>* sentence_repr = nullptr; // [n_sentences, d] routing input override
  const BasicTensor<T>* task_table = nullptr;    // task embeddings for task-conditioned gates
  RoutingTape<T>* tape = nullptr;
};

template <class T>
struct MoeOutput {
  BasicTensor<T> y;
  DispatchStats<T> stats;
  RoutingDecision decision;       // per active token
  std::vector<std::int64_t> rows; // row of x for each decision unit
  std::int64_t gate_evaluations = 0;
};

// Weighted expert mixture over the rows of x, given per-token selections and
// the matching flat weight tensor (selection order).
template <class T, class ExpertFn>
BasicTensor<T> mix_experts(const BasicTensor<T>& x, std::int64_t n_experts,
                           const std::vector<std::int64_t>& rows,
                           const std::vector<std::vector<std::int64_t>>& selection,
                           const BasicTensor<T>* weights, ExpertFn&& expert) {
  std::vector<std::vector<std::int64_t>> rows_of(static_cast<std::size_t>(n_experts));
  std::vector<std::vector<std::int64_t>> wpos_of(static_cast<std::size_t>(n_experts));
  std::int64_t flat = 0;
  for (std::size_t t = 0; t < selection.size(); ++t) {
    for (auto e : selection[t]) {
      rows_of[static_cast<std::size_t>(e)].push_back(rows[t]);
      wpos_of[static_cast<std::size_t>(e)].push_back(flat++);
    }
  }
  std::vector<BasicTensor<T>> parts;
  std::vector<std::vector<std::int64_t>> targets;
  for (std::int64_t e = 0; e < n_experts; ++e) {
    const auto& r = rows_of[static_cast<std::size_t>(e)];
    if (r.empty()) continue;
    auto xe = gather_rows(x, std::span<const std::int64_t>(r));
    auto oe = expert(e, xe);
    if (weights) {
      oe = scale_rows(oe, take(*weights, std::span<const std::int64_t>(wpos_of[static_cast<std::size_t>(e)])));
    }
    parts.push_back(std::move(oe));
    targets.push_back(r);
  }
  return combine_rows<T>(x.dim(0), x.dim(1), parts, targets);
}

template <class T>
class MoELayer {
 public:
  MoELayer() = default;

  // d_task > 0 makes the gate consume concat(x, task embedding).
  MoELayer(ParameterSet<T>& ps, const std::string& prefix, std::int64_t d_model, std::int64_t d_ff,
           MoeConfig cfg, std::int64_t d_task = 0)
      : cfg_(cfg), d_model_(d_model), d_task_(d_task) {
    require(cfg.n_experts >= 1, ErrorCategory::kConfig, "MoE layer needs at least one expert");
    require(cfg.k >= 1 && cfg.k <= cfg.n_experts, ErrorCategory::kConfig,
            "MoE top-k = " + std::to_string(cfg.k) + " exceeds " + std::to_string(cfg.n_experts) +
                " experts");
    w_g_ = ps.add(prefix + ".gate.w_g", {d_model + d_task, cfg.n_experts}, Init::normal(0.02));
    for (std::int64_t e = 0; e < cfg.n_experts; ++e) {
      experts_.push_back(FeedForward<T>::make(ps, prefix + ".expert" + std::to_string(e), d_model, d_ff));
    }
  }

  const MoeConfig& config() const { return cfg_; }
  const std::vector<FeedForward<T>>& experts() const { return experts_; }
  const BasicTensor<T>& gate_weight() const { return w_g_; }
  bool task_conditioned() const { return d_task_ > 0; }

  // Softmax gate distribution for routing inputs g[units, d_model (+ d_task)].
  BasicTensor<T> gate_forward(const BasicTensor<T>& g) const { return softmax(linear(g, w_g_)); }

  MoeOutput<T> forward(const BasicTensor<T>& x, Granularity granularity,
                       const MoeContext<T>& ctx = {}) const {
    require(x.rank() == 2 && x.dim(1) == d_model_, ErrorCategory::kDimension,
            "moe_forward: input " + shape_str(x.shape()) + " for width " + std::to_string(d_model_));
    const auto n_rows = x.dim(0);
    if (granularity == Granularity::kSentence) {
      require(ctx.layout != nullptr, ErrorCategory::kContract,
              "moe_forward: sentence granularity requires sentence ids");
    }
    if (task_conditioned()) {
      require(ctx.layout != nullptr && ctx.task_table != nullptr, ErrorCategory::kContract,
              "moe_forward: task-conditioned gate requires task ids and the task embedding table");
    }
    if (ctx.layout) {
      require(ctx.layout->rows() == n_rows, ErrorCategory::kDimension,
              "moe_forward: layout covers " + std::to_string(ctx.layout->rows()) + " rows, input has " +
                  std::to_string(n_rows));
    }

    MoeOutput<T> out;
    std::vector<std::int64_t> active;
    if (ctx.layout) {
      active = ctx.layout->active_rows();
    } else {
      active.resize(static_cast<std::size_t>(n_rows));
      std::iota(active.begin(), active.end(), 0);
    }
    require(!active.empty(), ErrorCategory::kContract, "moe_forward: no active tokens");
    const bool all_active = static_cast<std::int64_t>(active.size()) == n_rows;

    // Routing units: active tokens, or sentences.
    BasicTensor<T> unit_in;
    std::vector<std::int64_t> unit_task;
    std::vector<std::int64_t> unit_of_token;
    if (granularity == Granularity::kToken) {
      unit_in = all_active ? x : gather_rows(x, std::span<const std::int64_t>(active));
      unit_of_token.resize(active.size());
      std::iota(unit_of_token.begin(), unit_of_token.end(), 0);
      if (task_conditioned()) {
        for (auto r : active) unit_task.push_back(ctx.layout->task_of_row(r));
      }
    } else {
      const auto& lay = *ctx.layout;
      unit_in = ctx.sentence_repr ? *ctx.sentence_repr
                                  : segment_mean(x, std::span<const std::int64_t>(lay.sentence_of_row),
                                                 lay.n_sentences);
      require(unit_in.dim(0) == lay.n_sentences, ErrorCategory::kDimension,
              "moe_forward: sentence representation rows do not match sentence count");
      for (auto r : active) unit_of_token.push_back(lay.sentence_of_row[static_cast<std::size_t>(r)]);
      if (task_conditioned()) unit_task = lay.task_of_sentence;
    }
    if (task_conditioned()) {
      unit_in = concat<T>({unit_in, embedding_lookup(*ctx.task_table, std::span<const std::int64_t>(unit_task))}, 1);
    }
    const auto probs = gate_forward(unit_in);
    out.gate_evaluations = probs.dim(0);
    const auto token_probs =
        granularity == Granularity::kToken ? probs : gather_rows(probs, std::span<const std::int64_t>(unit_of_token));

    const bool replay = ctx.tape && ctx.tape->mode() == RoutingTape<T>::Mode::kReplay;
    std::vector<std::vector<std::int64_t>> selection;
    Storage<T> denominators;
    std::int64_t dropped_assignments = 0, dropped_tokens = 0;
    if (replay) {
      const auto& entry = ctx.tape->next();
      require(entry.selection.size() == active.size(), ErrorCategory::kContract,
              "routing tape entry does not match the token count");
      selection = entry.selection;
      denominators = entry.denominators;
    } else {
      const auto unit_decision = top_k_select(probs, cfg_.k);
      selection.reserve(active.size());
      for (auto u : unit_of_token) selection.push_back(unit_decision.experts[static_cast<std::size_t>(u)]);
      if (cfg_.capacity_factor) {
        RoutingDecision tok;
        tok.n_experts = cfg_.n_experts;
        tok.k = cfg_.k;
        tok.experts = selection;
        for (auto u : unit_of_token) {
          tok.weights.push_back(unit_decision.weights[static_cast<std::size_t>(u)]);
          tok.distribution.push_back(unit_decision.distribution[static_cast<std::size_t>(u)]);
        }
        auto capped = apply_capacity(tok, *cfg_.capacity_factor);
        selection = std::move(capped.decision.experts);
        dropped_assignments = capped.dropped_assignments;
        dropped_tokens = capped.dropped_tokens;
      }
      const auto pd = token_probs.data();
      denominators.assign(selection.size(), T(0));
      for (std::size_t t = 0; t < selection.size(); ++t) {
        for (auto e : selection[t]) denominators[t] += pd[t * static_cast<std::size_t>(cfg_.n_experts) + static_cast<std::size_t>(e)];
      }
      if (ctx.tape) ctx.tape->record({selection, denominators});
    }

    bool any_selected = false;
    for (const auto& s : selection) any_selected = any_selected || !s.empty();
    if (any_selected) {
      const auto weights = renormalize_selected(token_probs, selection, cfg_.detach_normalizer,
                                                (replay && cfg_.detach_normalizer) ? &denominators : nullptr);
      out.y = mix_experts(x, cfg_.n_experts, active, selection, &weights,
                          [&](std::int64_t e, const BasicTensor<T>& xe) { return experts_[static_cast<std::size_t>(e)](xe); });
      const auto wd = weights.data();
      std::size_t flat = 0;
      out.decision.weights.resize(selection.size());
      for (std::size_t t = 0; t < selection.size(); ++t) {
        for (std::size_t i = 0; i < selection[t].size(); ++i) out.decision.weights[t].push_back(wd[flat++]);
      }
    } else {
      out.y = BasicTensor<T>::zeros({n_rows, d_model_});
      out.decision.weights.resize(selection.size());
    }

    out.decision.n_experts = cfg_.n_experts;
    out.decision.k = cfg_.k;
    const auto pd = token_probs.data();
    const auto n = static_cast<std::size_t>(cfg_.n_experts);
    for (std::size_t t = 0; t < selection.size(); ++t) {
      out.decision.distribution.emplace_back(pd.begin() + static_cast<std::ptrdiff_t>(t * n),
                                             pd.begin() + static_cast<std::ptrdiff_t>((t + 1) * n));
    }
    out.stats = dispatch_stats(token_probs, selection);
    out.stats.dropped_assignments = dropped_assignments;
    out.stats.dropped_tokens = dropped_tokens;
    out.decision.experts = std::move(selection);
    out.rows = std::move(active);
    return out;
  }

 private:
  MoeConfig cfg_;
  std::int64_t d_model_ = 0;
  std::int64_t d_task_ = 0;
  BasicTensor<T> w_g_;
  std::vector<FeedForward<T>> experts_;
};

template <class T>
MoeOutput<T> moe_forward(const BasicTensor<T>& x, const MoELayer<T>& layer, Granularity granularity,
                         const MoeContext<T>& ctx = {}) {
  return layer.forward(x, granularity, ctx);
}

}  // namespace tmoe
