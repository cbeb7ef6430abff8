#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// harness: one serializable config per run, the corpora a checkpoint was
// trained on, and the per-task BLEU table.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tmoe/data.hpp"
#include "tmoe/model.hpp"
#include "tmoe/train.hpp"

namespace tmoe {

inline const char* transform_name(TransformKind k) {
  switch (k) {
    case TransformKind::kCopy: return "copy";
    case TransformKind::kReverse: return "reverse";
    case TransformKind::kCaesar: return "caesar";
    case TransformKind::kDuplicateOdd: return "duplicate-odd";
    case TransformKind::kSwapPairs: return "swap-pairs";
    case TransformKind::kSortChars: return "sort-chars";
  }
  return "copy";
}

inline TransformKind parse_transform(const std::string& s) {
  for (auto k : {TransformKind::kCopy, TransformKind::kReverse, TransformKind::kCaesar, TransformKind::kDuplicateOdd,
                 TransformKind::kSwapPairs, TransformKind::kSortChars}) {
    if (s == transform_name(k)) return k;
  }
  fail(ErrorCategory::kConfig, "unknown transformation '" + s + "'");
}

inline nlohmann::json to_json(const CorpusSizes& s) {
  return {{"train", s.train}, {"valid", s.valid}, {"test", s.test}, {"low_resource_divisor", s.low_resource_divisor}};
}

inline CorpusSizes corpus_sizes_from_json(const nlohmann::json& j, CorpusSizes s = {}) {
  if (j.contains("train")) s.train = j["train"].get<std::int64_t>();
  if (j.contains("valid")) s.valid = j["valid"].get<std::int64_t>();
  if (j.contains("test")) s.test = j["test"].get<std::int64_t>();
  if (j.contains("low_resource_divisor")) s.low_resource_divisor = j["low_resource_divisor"].get<std::int64_t>();
  require(s.train >= 1 && s.valid >= 1 && s.test >= 1 && s.low_resource_divisor >= 1, ErrorCategory::kConfig,
          "corpus sizes must be positive");
  return s;
}

inline nlohmann::json to_json(const TaskSpec& t) {
  return {{"name", t.name},
          {"group", t.group},
          {"transform", transform_name(t.transform.kind)},
          {"shift", t.transform.shift},
          {"direction", t.direction == Direction::kForward ? "forward" : "inverse"},
          {"tier", t.tier == ResourceTier::kHigh ? "high" : "low"},
          {"sizes", to_json(t.sizes)},
          {"min_len", t.min_len},
          {"max_len", t.max_len}};
}

inline TaskSpec task_spec_from_json(const nlohmann::json& j, const CorpusSizes& default_sizes = {}) {
  try {
    TaskSpec t;
    t.name = j.at("name").get<std::string>();
    require(!t.name.empty(), ErrorCategory::kConfig, "task name must not be empty");
    t.group = j.value("group", std::string{});
    t.transform.kind = parse_transform(j.value("transform", std::string("copy")));
    t.transform.shift = j.value("shift", 0);
    const auto dir = j.value("direction", std::string("forward"));
    require(dir == "forward" || dir == "inverse", ErrorCategory::kConfig, "direction must be forward or inverse");
    t.direction = dir == "forward" ? Direction::kForward : Direction::kInverse;
    const auto tier = j.value("tier", std::string("high"));
    require(tier == "high" || tier == "low", ErrorCategory::kConfig, "tier must be high or low");
    t.tier = tier == "high" ? ResourceTier::kHigh : ResourceTier::kLow;
    t.sizes = j.contains("sizes") ? corpus_sizes_from_json(j["sizes"], default_sizes) : default_sizes;
    t.min_len = j.value("min_len", t.min_len);
    t.max_len = j.value("max_len", t.max_len);
    return t;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::kConfig, std::string("task spec: ") + e.what());
  }
}

// A task's corpus is fully determined by its spec and generation seed.
struct CorpusSource {
  TaskSpec spec;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const std::vector<CorpusSource>& sources) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& s : sources) a.push_back({{"spec", to_json(s.spec)}, {"seed", s.seed}});
  return a;
}

inline std::vector<CorpusSource> corpus_sources_from_json(const nlohmann::json& j) {
  require(j.is_array(), ErrorCategory::kFormat, "corpus list must be an array");
  std::vector<CorpusSource> out;
  for (const auto& e : j) out.push_back({task_spec_from_json(e.at("spec")), e.at("seed").get<std::uint64_t>()});
  return out;
}

// Task indices follow list order, matching a model's task registry.
inline std::vector<TaskCorpus> build_corpora(const std::vector<CorpusSource>& sources) {
  std::vector<TaskCorpus> out;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    out.push_back(generate_task(sources[i].spec, static_cast<std::int64_t>(i), sources[i].seed));
  }
  return out;
}

inline std::vector<std::string> task_groups(const std::vector<TaskCorpus>& suite) {
  std::vector<std::string> g;
  for (const auto& t : suite) g.push_back(t.spec.group);
  return g;
}

struct ExperimentConfig {
  std::string preset = "desk";
  std::string variant = "dense";
  nlohmann::json model = nlohmann::json::object();  // overrides on top of preset + variant
  TrainConfig train;
  std::string suite = "default";
  std::vector<TaskSpec> tasks;  // inline tasks replace the named suite when non-empty
  CorpusSizes sizes;
  std::uint64_t seed = 1;       // model init, dropout and batch order
  std::uint64_t data_seed = 1234;
  std::string out;

  ModelConfig model_config() const {
    auto c = model_config_from_json(model, apply_variant(tmoe::preset(preset), variant));
    c.seed = seed;
    c.validate();
    return c;
  }

  TrainConfig train_config() const {
    auto t = train;
    t.seed = seed;
    t.validate();
    return t;
  }

  std::vector<TaskSpec> task_specs() const {
    if (!tasks.empty()) return tasks;
    return suite_specs(suite, sizes);
  }

  std::vector<CorpusSource> corpus_sources() const {
    std::vector<CorpusSource> s;
    for (const auto& t : task_specs()) s.push_back({t, data_seed});
    return s;
  }
};

inline nlohmann::json to_json(const ExperimentConfig& e) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : e.tasks) tasks.push_back(to_json(t));
  auto train = to_json(e.train_config());
  train.erase("seed");
  return {{"preset", e.preset},
          {"variant", e.variant},
          {"model", e.model},
          {"train", train},
          {"suite", e.suite},
          {"tasks", tasks},
          {"sizes", to_json(e.sizes)},
          {"seed", e.seed},
          {"data_seed", e.data_seed},
          {"out", e.out},
          {"resolved_model", to_json(e.model_config())}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j, ExperimentConfig e = {}) {
  require(j.is_object(), ErrorCategory::kConfig, "experiment config must be an object");
  try {
    e.preset = j.value("preset", e.preset);
    e.variant = j.value("variant", e.variant);
    if (j.contains("model")) {
      require(j["model"].is_object(), ErrorCategory::kConfig, "'model' must be an object");
      e.model = j["model"];
    }
    if (j.contains("train")) e.train = train_config_from_json(j["train"], e.train);
    if (j.contains("suite")) {
      e.suite = j["suite"].get<std::string>();
      e.tasks.clear();
    }
    if (j.contains("sizes")) e.sizes = corpus_sizes_from_json(j["sizes"], e.sizes);
    if (j.contains("tasks")) {
      e.tasks.clear();
      for (const auto& t : j["tasks"]) e.tasks.push_back(task_spec_from_json(t, e.sizes));
    }
    e.seed = j.value("seed", e.seed);
    e.data_seed = j.value("data_seed", e.data_seed);
    e.out = j.value("out", e.out);
    // train.seed is the run seed; a config file may set either.
    if (j.contains("train") && j["train"].contains("seed") && !j.contains("seed")) e.seed = e.train.seed;
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorCategory::kConfig, std::string("experiment config: ") + ex.what());
  }
  return e;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot read " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::kFormat, path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot write " + path);
  f << text;
  require(static_cast<bool>(f), ErrorCategory::kIo, "write failed for " + path);
}

// One row per model, one column per task plus the unweighted average.
struct BleuTableRow {
  std::string label;
  std::vector<TaskEval> evals;
};

inline std::string bleu_table_text(const std::vector<BleuTableRow>& rows) {
  require(!rows.empty(), ErrorCategory::kContract, "bleu table: no rows");
  std::size_t label_w = 5;
  for (const auto& r : rows) label_w = std::max(label_w, r.label.size());
  std::vector<std::size_t> col_w;
  for (const auto& e : rows[0].evals) col_w.push_back(std::max<std::size_t>(6, e.task.size()));
  std::string out;
  char buf[64];
  auto pad = [](const std::string& s, std::size_t w, bool left) {
    const std::string fill(w > s.size() ? w - s.size() : 0, ' ');
    return left ? s + fill : fill + s;
  };
  out += pad("Model", label_w, true);
  for (std::size_t i = 0; i < col_w.size(); ++i) out += "  " + pad(rows[0].evals[i].task, col_w[i], false);
  out += "  Average\n";
  for (const auto& r : rows) {
    require(r.evals.size() == col_w.size(), ErrorCategory::kDimension, "bleu table: rows cover different tasks");
    out += pad(r.label, label_w, true);
    for (std::size_t i = 0; i < col_w.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.2f", r.evals[i].bleu);
      out += "  " + pad(buf, col_w[i], false);
    }
    std::snprintf(buf, sizeof buf, "%.2f", mean_bleu(r.evals));
    out += "  " + pad(buf, 7, false) + "\n";
  }
  return out;
}

inline std::string bleu_table_csv(const std::vector<BleuTableRow>& rows) {
  require(!rows.empty(), ErrorCategory::kContract, "bleu table: no rows");
  std::string out = "model";
  for (const auto& e : rows[0].evals) out += "," + e.task;
  out += ",Average\n";
  char buf[64];
  for (const auto& r : rows) {
    out += r.label;
    for (const auto& e : r.evals) {
      std::snprintf(buf, sizeof buf, ",%.6f", e.bleu);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, ",%.6f\n", mean_bleu(r.evals));
    out += buf;
  }
  return out;
}

inline void write_recovery_csv(const std::string& path, const std::vector<RecoveryPoint>& curve) {
  std::string out = "step,task,bleu\n";
  char buf[64];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof buf, ",%.6f\n", p.bleu);
    out += std::to_string(p.step) + "," + p.task + buf;
  }
  write_text_file(path, out);
}

}  // namespace tmoe
