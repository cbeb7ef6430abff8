#pragma once

// Routing inspection: per-token expert/adapter assignments, per-task adapter
// histograms, and the within/between-group overlap summary.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tmoe/data.hpp"
#include "tmoe/model.hpp"

namespace tmoe {

struct RoutingRow {
  std::string layer;
  std::int64_t token_id = 0;
  std::int64_t sentence_id = 0;  // index into the inspected pair list
  std::int64_t task_id = 0;
  std::vector<std::int64_t> experts;
  std::vector<double> weights;
};

// Teacher-forced eval-mode passes over `pairs`, recording every routed row of
// every MoE and adapter layer.
template <class T>
std::vector<RoutingRow> collect_routing(const Seq2SeqModel<T>& model, const std::vector<SentencePair>& pairs,
                                        const Vocab& vocab, std::int64_t batch_size = 64) {
  NoGradGuard no_grad;
  std::vector<RoutingRow> out;
  ForwardOptions opt;
  opt.record_routing = true;
  for (std::size_t start = 0; start < pairs.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (auto i = start; i < std::min(pairs.size(), start + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    const auto res = model.forward(batch_from_pairs(pairs, idx, vocab), opt);
    for (const auto& lr : res.routing) {
      for (std::size_t u = 0; u < lr.rows.size(); ++u) {
        RoutingRow r;
        r.layer = lr.layer;
        r.token_id = lr.tokens[u];
        r.sentence_id = static_cast<std::int64_t>(start) + lr.sentences[u];
        r.task_id = lr.tasks[u];
        r.experts = lr.decision.experts[u];
        r.weights = lr.decision.weights[u];
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

inline std::string join_ids(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "|" : "") + std::to_string(v[i]);
  return s;
}

inline std::string join_weights(const std::vector<double>& v) {
  std::string s;
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f", v[i]);
    s += (i ? "|" : "") + std::string(buf);
  }
  return s;
}

// Task prefix rows carry token id vocab_size + task.
inline void write_routing_csv(const std::string& path, const std::vector<RoutingRow>& rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot write " + path);
  f << "layer,token_id,sentence_id,task_id,expert_ids,weights\n";
  for (const auto& r : rows) {
    f << r.layer << ',' << r.token_id << ',' << r.sentence_id << ',' << r.task_id << ',' << join_ids(r.experts) << ','
      << join_weights(r.weights) << '\n';
  }
  require(static_cast<bool>(f), ErrorCategory::kIo, "write failed for " + path);
}

inline bool is_adapter_layer(const std::string& layer) {
  const std::string suffix = ".adapters";
  return layer.size() >= suffix.size() && layer.compare(layer.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// counts[layer][task][adapter]: how many routed tokens of each task each
// adapter received (every selected adapter counts once).
struct AdapterHistogram {
  std::vector<std::string> layers;
  std::int64_t n_tasks = 0;
  std::int64_t n_adapters = 0;
  std::vector<std::vector<std::vector<std::int64_t>>> counts;

  std::vector<double> normalized(std::size_t layer, std::int64_t task) const {
    const auto& c = counts[layer][static_cast<std::size_t>(task)];
    double total = 0.0;
    for (auto v : c) total += static_cast<double>(v);
    std::vector<double> h(c.size(), 0.0);
    if (total > 0) {
      for (std::size_t a = 0; a < c.size(); ++a) h[a] = static_cast<double>(c[a]) / total;
    }
    return h;
  }

  std::int64_t majority(std::size_t layer, std::int64_t task) const {
    const auto& c = counts[layer][static_cast<std::size_t>(task)];
    return static_cast<std::int64_t>(std::max_element(c.begin(), c.end()) - c.begin());
  }
};

inline AdapterHistogram adapter_histogram(const std::vector<RoutingRow>& rows, std::int64_t n_tasks,
                                          std::int64_t n_adapters) {
  AdapterHistogram h;
  h.n_tasks = n_tasks;
  h.n_adapters = n_adapters;
  std::map<std::string, std::size_t> index;
  for (const auto& r : rows) {
    if (!is_adapter_layer(r.layer)) continue;
    auto it = index.find(r.layer);
    if (it == index.end()) {
      it = index.emplace(r.layer, h.layers.size()).first;
      h.layers.push_back(r.layer);
      h.counts.emplace_back(static_cast<std::size_t>(n_tasks), std::vector<std::int64_t>(static_cast<std::size_t>(n_adapters), 0));
    }
    for (auto a : r.experts) {
      require(a >= 0 && a < n_adapters && r.task_id >= 0 && r.task_id < n_tasks, ErrorCategory::kIndex,
              "routing row outside the histogram range");
      ++h.counts[it->second][static_cast<std::size_t>(r.task_id)][static_cast<std::size_t>(a)];
    }
  }
  return h;
}

inline void write_histogram_csv(const std::string& path, const AdapterHistogram& h,
                                const std::vector<std::string>& task_names) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot write " + path);
  f << "layer,task_id,task,adapter_id,count\n";
  for (std::size_t l = 0; l < h.layers.size(); ++l) {
    for (std::int64_t t = 0; t < h.n_tasks; ++t) {
      for (std::int64_t a = 0; a < h.n_adapters; ++a) {
        f << h.layers[l] << ',' << t << ',' << task_names[static_cast<std::size_t>(t)] << ',' << a << ','
          << h.counts[l][static_cast<std::size_t>(t)][static_cast<std::size_t>(a)] << '\n';
      }
    }
  }
  require(static_cast<bool>(f), ErrorCategory::kIo, "write failed for " + path);
}

// Histogram intersection sum_a min(h_t(a), h_u(a)) averaged over adapter
// layers: 1 when two tasks use adapters in identical proportions, 0 when
// they never share one.
inline double assignment_overlap(const AdapterHistogram& h, std::int64_t t, std::int64_t u) {
  require(!h.layers.empty(), ErrorCategory::kContract, "assignment_overlap: no adapter layers");
  double total = 0.0;
  for (std::size_t l = 0; l < h.layers.size(); ++l) {
    const auto a = h.normalized(l, t), b = h.normalized(l, u);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::min(a[i], b[i]);
    total += s;
  }
  return total / static_cast<double>(h.layers.size());
}

// Fraction of adapter layers in which the two tasks' majority adapter agrees.
inline double majority_agreement(const AdapterHistogram& h, std::int64_t t, std::int64_t u) {
  require(!h.layers.empty(), ErrorCategory::kContract, "majority_agreement: no adapter layers");
  double same = 0.0;
  for (std::size_t l = 0; l < h.layers.size(); ++l) same += h.majority(l, t) == h.majority(l, u);
  return same / static_cast<double>(h.layers.size());
}

struct ClusteringSummary {
  double within_overlap = 0.0;
  double between_overlap = 0.0;
  double within_majority = 0.0;
  double between_majority = 0.0;
  std::int64_t within_pairs = 0;
  std::int64_t between_pairs = 0;

  bool clustered() const { return within_overlap > between_overlap; }
};

inline ClusteringSummary clustering_summary(const AdapterHistogram& h, const std::vector<std::string>& groups) {
  require(static_cast<std::int64_t>(groups.size()) == h.n_tasks, ErrorCategory::kDimension,
          "clustering_summary: one group label per task expected");
  ClusteringSummary s;
  for (std::int64_t t = 0; t < h.n_tasks; ++t) {
    for (std::int64_t u = t + 1; u < h.n_tasks; ++u) {
      const double o = assignment_overlap(h, t, u);
      const double m = majority_agreement(h, t, u);
      if (groups[static_cast<std::size_t>(t)] == groups[static_cast<std::size_t>(u)]) {
        s.within_overlap += o;
        s.within_majority += m;
        ++s.within_pairs;
      } else {
        s.between_overlap += o;
        s.between_majority += m;
        ++s.between_pairs;
      }
    }
  }
  require(s.within_pairs > 0 && s.between_pairs > 0, ErrorCategory::kContract,
          "clustering_summary: need at least two groups with two tasks");
  s.within_overlap /= static_cast<double>(s.within_pairs);
  s.within_majority /= static_cast<double>(s.within_pairs);
  s.between_overlap /= static_cast<double>(s.between_pairs);
  s.between_majority /= static_cast<double>(s.between_pairs);
  return s;
}

}  // namespace tmoe
