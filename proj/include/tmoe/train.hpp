#pragma once

// Multitask training with validation-BLEU early stopping, evaluation, and
// the metrics CSV stream.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tmoe/bleu.hpp"
#include "tmoe/checkpoint.hpp"
#include "tmoe/data.hpp"
#include "tmoe/model.hpp"
#include "tmoe/optim.hpp"

namespace tmoe {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::int64_t batch_size = 32;
  std::int64_t max_epochs = 30;
  std::int64_t patience = 2;
  std::optional<double> aux_coef;  // overrides the model's coefficient when set
  std::uint64_t seed = 1;
  std::int64_t eval_every = 0;     // extra validation every N steps; 0 = per epoch only
  double clip_norm = 1.0;
  std::string checkpoint_dir;      // best checkpoint written here when non-empty
  std::int64_t eval_batch_size = 64;

  void validate() const {
    require(patience >= 1, ErrorCategory::kConfig, "patience must be at least 1");
    require(batch_size >= 1 && eval_batch_size >= 1, ErrorCategory::kConfig, "batch sizes must be positive");
    require(max_epochs >= 0, ErrorCategory::kConfig, "max_epochs must be nonnegative");
    require(lr >= 0.0, ErrorCategory::kConfig, "learning rate must be nonnegative");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size}, {"max_epochs", c.max_epochs}, {"patience", c.patience},
          {"aux_coef", c.aux_coef ? nlohmann::json(*c.aux_coef) : nlohmann::json()}, {"seed", c.seed},
          {"eval_every", c.eval_every}, {"clip_norm", c.clip_norm}, {"eval_batch_size", c.eval_batch_size}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key) && !j[key].is_null()) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    get("lr", c.lr);
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("batch_size", c.batch_size);
    get("max_epochs", c.max_epochs);
    get("patience", c.patience);
    get("seed", c.seed);
    get("eval_every", c.eval_every);
    get("clip_norm", c.clip_norm);
    get("eval_batch_size", c.eval_batch_size);
    if (j.contains("aux_coef")) {
      if (j["aux_coef"].is_null()) {
        c.aux_coef.reset();
      } else {
        c.aux_coef = j["aux_coef"].get<double>();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::kConfig, std::string("train config: ") + e.what());
  }
  return c;
}

// Stops once the score has failed to strictly beat the best so far for
// `patience` consecutive epochs.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::int64_t patience) : patience_(patience) {
    require(patience >= 1, ErrorCategory::kConfig, "patience must be at least 1");
  }

  // Returns true when training should stop after this epoch.
  bool update(std::int64_t epoch, double score) {
    if (score > best_) {
      best_ = score;
      best_epoch_ = epoch;
      since_ = 0;
      improved_ = true;
    } else {
      ++since_;
      improved_ = false;
    }
    return since_ >= patience_;
  }

  double best() const { return best_; }
  std::int64_t best_epoch() const { return best_epoch_; }
  std::int64_t epochs_since_improvement() const { return since_; }
  bool improved() const { return improved_; }

 private:
  std::int64_t patience_;
  double best_ = -std::numeric_limits<double>::infinity();
  std::int64_t best_epoch_ = 0;
  std::int64_t since_ = 0;
  bool improved_ = false;
};

struct MetricRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  std::string task;
  std::string split;
  double bleu = std::numeric_limits<double>::quiet_NaN();
  double loss = std::numeric_limits<double>::quiet_NaN();
  double aux_loss = std::numeric_limits<double>::quiet_NaN();
  double tokens_per_expert_entropy = std::numeric_limits<double>::quiet_NaN();
};

inline std::string metrics_csv_header() {
  return "step,epoch,task,split,bleu,loss,aux_loss,tokens_per_expert_entropy";
}

inline std::string format_metric(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string metrics_csv_row(const MetricRow& r) {
  std::ostringstream o;
  o << r.step << ',' << r.epoch << ',' << r.task << ',' << r.split << ',' << format_metric(r.bleu) << ','
    << format_metric(r.loss) << ',' << format_metric(r.aux_loss) << ',' << format_metric(r.tokens_per_expert_entropy);
  return o.str();
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot write " + path);
  f << metrics_csv_header() << '\n';
  for (const auto& r : rows) f << metrics_csv_row(r) << '\n';
  require(static_cast<bool>(f), ErrorCategory::kIo, "write failed for " + path);
}

// Shannon entropy (nats) of the token distribution over experts, averaged
// over MoE layers.
template <class T>
double expert_entropy(const std::vector<std::vector<std::int64_t>>& counts_per_layer) {
  if (counts_per_layer.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total_h = 0.0;
  for (const auto& counts : counts_per_layer) {
    double n = 0.0;
    for (auto c : counts) n += static_cast<double>(c);
    double h = 0.0;
    for (auto c : counts) {
      if (c > 0) {
        const double p = static_cast<double>(c) / n;
        h -= p * std::log(p);
      }
    }
    total_h += h;
  }
  return total_h / static_cast<double>(counts_per_layer.size());
}

struct TaskEval {
  std::string task;
  double bleu = 0.0;
  double loss = 0.0;
  BleuScore detail;
  std::vector<std::string> hypotheses;
};

// Greedy-decodes every source of the corpus and scores it against the
// references; the loss is teacher-forced cross-entropy in eval mode.
template <class T>
TaskEval evaluate_corpus(const Seq2SeqModel<T>& model, const Corpus& corpus, const std::string& task_name,
                         const Vocab& vocab, std::int64_t batch_size = 64) {
  require(!corpus.pairs.empty(), ErrorCategory::kContract, "evaluate: empty corpus for task " + task_name);
  NoGradGuard no_grad;
  TaskEval ev;
  ev.task = task_name;
  std::vector<std::string> refs;
  double loss_sum = 0.0;
  std::int64_t loss_tokens = 0;
  for (std::size_t start = 0; start < corpus.pairs.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(corpus.pairs.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx;
    std::vector<std::vector<std::int64_t>> src;
    std::vector<std::int64_t> tasks;
    std::int64_t longest = 0;
    for (auto i = start; i < end; ++i) {
      idx.push_back(i);
      src.push_back(vocab.encode(corpus.pairs[i].source));
      tasks.push_back(corpus.pairs[i].task);
      longest = std::max<std::int64_t>(longest, static_cast<std::int64_t>(corpus.pairs[i].source.size()));
      refs.push_back(corpus.pairs[i].target);
    }
    const auto decoded = model.greedy_decode(src, tasks, 2 * longest + 2);
    for (const auto& d : decoded) ev.hypotheses.push_back(vocab.detokenize(d));
    const auto batch = batch_from_pairs(corpus.pairs, idx, vocab);
    std::int64_t n_tok = 0;
    for (auto t : batch.tgt_out) n_tok += t != kPadId;
    const auto l = model.loss(batch).ce.item();
    loss_sum += static_cast<double>(l) * static_cast<double>(n_tok);
    loss_tokens += n_tok;
  }
  ev.detail = corpus_bleu_strings(ev.hypotheses, refs);
  ev.bleu = ev.detail.score;
  ev.loss = loss_sum / static_cast<double>(loss_tokens);
  return ev;
}

template <class T>
std::vector<TaskEval> evaluate_suite(const Seq2SeqModel<T>& model, const std::vector<TaskCorpus>& suite,
                                     const std::string& split, const Vocab& vocab, std::int64_t batch_size = 64) {
  std::vector<TaskEval> out;
  for (const auto& t : suite) out.push_back(evaluate_corpus(model, t.split(split), t.spec.name, vocab, batch_size));
  return out;
}

inline double mean_bleu(const std::vector<TaskEval>& evs) {
  double s = 0.0;
  for (const auto& e : evs) s += e.bleu;
  return evs.empty() ? 0.0 : s / static_cast<double>(evs.size());
}

struct StepStats {
  double loss = 0.0;
  double ce = 0.0;
  double aux = 0.0;
  double grad_norm = 0.0;
  std::vector<std::vector<std::int64_t>> expert_counts;
};

// Holds optimizer state across steps for one model.
template <class T>
class Trainer {
 public:
  Trainer(Seq2SeqModel<T>& model, TrainConfig cfg) : model_(model), cfg_(std::move(cfg)) {
    cfg_.validate();
    params_ = model_.parameter_tensors();
    adam_.lr = cfg_.lr;
    adam_.beta1 = cfg_.beta1;
    adam_.beta2 = cfg_.beta2;
    adam_.eps = cfg_.adam_eps;
  }

  std::int64_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }

  StepStats train_step(const Batch& batch) {
    ForwardOptions opt;
    opt.training = true;
    opt.step = static_cast<std::uint64_t>(step_);
    auto fwd = model_.forward(batch, opt);
    auto ce = cross_entropy(fwd.logits_rows, std::span<const std::int64_t>(batch.tgt_out), kPadId);
    const double coef = cfg_.aux_coef ? *cfg_.aux_coef : (model_.config().moe ? model_.config().moe->aux_coef : 0.0);
    auto total = (model_.config().moe && coef > 0.0) ? add(ce, scale(fwd.aux_loss, static_cast<T>(coef))) : ce;
    StepStats s;
    s.ce = static_cast<double>(ce.item());
    s.aux = static_cast<double>(fwd.aux_loss.item());
    s.loss = static_cast<double>(total.item());
    if (!std::isfinite(s.loss)) {
      fail(ErrorCategory::kDivergence, "loss became non-finite (" + std::to_string(s.loss) + ") at step " +
                                           std::to_string(step_));
    }
    zero_grads(params_);
    total.backward();
    s.grad_norm = clip_grad_norm(params_, cfg_.clip_norm);
    require(std::isfinite(s.grad_norm), ErrorCategory::kDivergence,
            "gradient norm became non-finite at step " + std::to_string(step_));
    adam_step(params_, state_, adam_);
    zero_grads(params_);
    for (const auto& st : fwd.moe_stats) s.expert_counts.push_back(st.token_counts);
    ++step_;
    return s;
  }

 private:
  Seq2SeqModel<T>& model_;
  TrainConfig cfg_;
  std::vector<BasicTensor<T>> params_;
  AdamConfig adam_;
  AdamState state_;
  std::int64_t step_ = 0;
};

struct TrainResult {
  std::vector<MetricRow> history;
  std::int64_t epochs_run = 0;
  std::int64_t best_epoch = 0;
  double best_valid_bleu = 0.0;
  std::int64_t steps = 0;
  bool stopped_early = false;
  std::string checkpoint_path;
};

using ProgressFn = std::function<void(const std::string&)>;

template <class T>
std::vector<std::vector<float>> snapshot(const Seq2SeqModel<T>& m) {
  std::vector<std::vector<float>> s;
  for (const auto& [name, t] : m.parameters().items()) s.emplace_back(t.data().begin(), t.data().end());
  return s;
}

template <class T>
void restore(Seq2SeqModel<T>& m, const std::vector<std::vector<float>>& s) {
  std::size_t i = 0;
  for (const auto& [name, t] : m.parameters().items()) {
    auto h = t;
    auto d = h.mutable_data();
    std::copy(s[i].begin(), s[i].end(), d.begin());
    ++i;
  }
}

inline void accumulate_counts(std::vector<std::vector<std::int64_t>>& acc, const std::vector<std::vector<std::int64_t>>& add) {
  if (acc.empty()) acc.assign(add.size(), {});
  for (std::size_t l = 0; l < add.size(); ++l) {
    if (acc[l].empty()) acc[l].assign(add[l].size(), 0);
    for (std::size_t e = 0; e < add[l].size(); ++e) acc[l][e] += add[l][e];
  }
}

// Runs epochs until the early-stop rule fires or max_epochs; the model ends
// holding the best-validation weights.
template <class T>
TrainResult train(Seq2SeqModel<T>& model, const std::vector<TaskCorpus>& suite, const TrainConfig& cfg,
                  const ProgressFn& progress = nullptr) {
  const Vocab vocab;
  Trainer<T> trainer(model, cfg);
  const auto pool = pooled(suite, "train");
  require(!pool.empty(), ErrorCategory::kContract, "train: no training pairs");
  EarlyStopper stopper(cfg.patience);
  TrainResult result;
  auto best = snapshot(model);
  std::vector<std::vector<std::int64_t>> epoch_counts;

  auto validate = [&](std::int64_t epoch, double train_aux, double entropy) {
    const auto evs = evaluate_suite(model, suite, "valid", vocab, cfg.eval_batch_size);
    for (const auto& e : evs) {
      MetricRow r;
      r.step = trainer.step();
      r.epoch = epoch;
      r.task = e.task;
      r.split = "valid";
      r.bleu = e.bleu;
      r.loss = e.loss;
      result.history.push_back(r);
    }
    MetricRow m;
    m.step = trainer.step();
    m.epoch = epoch;
    m.task = "mean";
    m.split = "valid";
    m.bleu = mean_bleu(evs);
    double l = 0.0;
    for (const auto& e : evs) l += e.loss;
    m.loss = l / static_cast<double>(evs.size());
    m.aux_loss = train_aux;
    m.tokens_per_expert_entropy = entropy;
    result.history.push_back(m);
    return m.bleu;
  };

  for (std::int64_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    epoch_counts.clear();
    double ce_sum = 0.0, aux_sum = 0.0;
    std::int64_t n_steps = 0;
    for (const auto& idx : multitask_batches(pool.size(), cfg.batch_size, cfg.seed, epoch)) {
      const auto s = trainer.train_step(batch_from_pairs(pool, idx, vocab));
      ce_sum += s.ce;
      aux_sum += s.aux;
      accumulate_counts(epoch_counts, s.expert_counts);
      ++n_steps;
      if (cfg.eval_every > 0 && trainer.step() % cfg.eval_every == 0) validate(epoch, s.aux, expert_entropy<T>(epoch_counts));
    }
    const double entropy = model.config().moe ? expert_entropy<T>(epoch_counts) : std::numeric_limits<double>::quiet_NaN();
    const double train_aux = model.config().moe ? aux_sum / static_cast<double>(n_steps) : std::numeric_limits<double>::quiet_NaN();
    MetricRow tr;
    tr.step = trainer.step();
    tr.epoch = epoch;
    tr.task = "all";
    tr.split = "train";
    tr.loss = ce_sum / static_cast<double>(n_steps);
    tr.aux_loss = train_aux;
    tr.tokens_per_expert_entropy = entropy;
    result.history.push_back(tr);
    const double score = validate(epoch, train_aux, entropy);
    const bool stop = stopper.update(epoch, score);
    if (stopper.improved()) best = snapshot(model);
    result.epochs_run = epoch;
    if (progress) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %lld step %lld train_loss %.4f valid_bleu %.2f best %.2f@%lld",
                    static_cast<long long>(epoch), static_cast<long long>(trainer.step()), tr.loss, score,
                    stopper.best(), static_cast<long long>(stopper.best_epoch()));
      progress(buf);
    }
    if (stop) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model, best);
  result.best_epoch = stopper.best_epoch();
  result.best_valid_bleu = result.epochs_run > 0 ? stopper.best() : 0.0;
  result.steps = trainer.step();
  if (!cfg.checkpoint_dir.empty()) {
    std::filesystem::create_directories(cfg.checkpoint_dir);
    result.checkpoint_path = (std::filesystem::path(cfg.checkpoint_dir) / "best.ckpt").string();
    save_model(model, result.checkpoint_path,
               {{"best_epoch", result.best_epoch}, {"best_valid_bleu", result.best_valid_bleu},
                {"steps", result.steps}, {"train_config", to_json(cfg)}});
  }
  return result;
}

struct RecoveryPoint {
  std::int64_t step = 0;
  std::string task;
  double bleu = 0.0;
};

// Ordinary training steps on the union of the suites with per-task test BLEU
// recorded every `every` steps (and at step 0) for the recovery curve.
template <class T>
std::vector<RecoveryPoint> post_merge_finetune(Seq2SeqModel<T>& model, const std::vector<TaskCorpus>& suite,
                                               std::int64_t steps, const TrainConfig& cfg, std::int64_t every = 50,
                                               const std::string& eval_split = "test",
                                               const ProgressFn& progress = nullptr) {
  const Vocab vocab;
  Trainer<T> trainer(model, cfg);
  const auto pool = pooled(suite, "train");
  std::vector<RecoveryPoint> curve;
  auto record = [&]() {
    for (const auto& e : evaluate_suite(model, suite, eval_split, vocab, cfg.eval_batch_size)) {
      curve.push_back({trainer.step(), e.task, e.bleu});
    }
    if (progress) progress("finetune step " + std::to_string(trainer.step()));
  };
  record();
  std::int64_t epoch = 1;
  while (trainer.step() < steps) {
    for (const auto& idx : multitask_batches(pool.size(), cfg.batch_size, cfg.seed, epoch)) {
      trainer.train_step(batch_from_pairs(pool, idx, vocab));
      if (trainer.step() % every == 0 || trainer.step() == steps) record();
      if (trainer.step() >= steps) break;
    }
    ++epoch;
  }
  return curve;
}

}  // namespace tmoe
