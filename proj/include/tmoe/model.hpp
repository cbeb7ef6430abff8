#pragma once

// Pre-LN encoder-decoder transformer whose feed-forward sublayers are dense
// FFNs or MoE layers, optionally followed by task adapter banks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tmoe/adapters.hpp"
#include "tmoe/error.hpp"
#include "tmoe/module.hpp"
#include "tmoe/moe.hpp"
#include "tmoe/ops.hpp"
#include "tmoe/tensor.hpp"

namespace tmoe {

inline constexpr std::int64_t kPadId = 0;
inline constexpr std::int64_t kBosId = 1;
inline constexpr std::int64_t kEosId = 2;
inline constexpr std::int64_t kUnkId = 3;

struct AdapterSettings {
  AdapterMode mode = AdapterMode::kStatic;
  std::int64_t d_task = 16;
  std::int64_t d_adapter = 64;
  std::int64_t k_t = 1;
};

struct ModelConfig {
  std::int64_t n_layers_enc = 2;
  std::int64_t n_layers_dec = 2;
  std::int64_t d_model = 64;
  std::int64_t d_ff = 256;
  std::int64_t n_heads = 4;
  double dropout = 0.1;
  std::int64_t vocab_size = 40;
  std::optional<MoeConfig> moe;
  std::optional<AdapterSettings> adapters;
  std::int64_t max_len = 64;
  std::uint64_t seed = 1;
  // Every variant sees the task through one learned prefix position on the
  // source side, like a target-language tag in multilingual translation.
  bool task_prefix = true;

  void validate() const {
    auto positive = [](std::int64_t v, const char* what) {
      require(v >= 1, ErrorCategory::kConfig, std::string(what) + " must be positive");
    };
    positive(n_layers_enc, "n_layers_enc");
    positive(n_layers_dec, "n_layers_dec");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(n_heads, "n_heads");
    positive(vocab_size, "vocab_size");
    positive(max_len, "max_len");
    require(d_model % n_heads == 0, ErrorCategory::kConfig,
            "d_model " + std::to_string(d_model) + " is not divisible by " + std::to_string(n_heads) + " heads");
    require(dropout >= 0.0 && dropout < 1.0, ErrorCategory::kConfig, "dropout must lie in [0, 1)");
    require(vocab_size > kUnkId, ErrorCategory::kConfig, "vocabulary too small for the reserved symbols");
    if (moe) {
      require(moe->n_experts >= 1, ErrorCategory::kConfig, "moe.n_experts must be positive");
      require(moe->k >= 1 && moe->k <= moe->n_experts, ErrorCategory::kConfig,
              "moe.k = " + std::to_string(moe->k) + " must lie in [1, n_experts]");
      require(moe->aux_coef >= 0.0, ErrorCategory::kConfig, "moe.aux_coef must be nonnegative");
      require(!moe->capacity_factor || *moe->capacity_factor > 0.0, ErrorCategory::kConfig,
              "moe.capacity_factor must be positive");
    }
    if (adapters) {
      positive(adapters->d_adapter, "adapters.d_adapter");
      positive(adapters->k_t, "adapters.k_t");
      if (adapters->mode != AdapterMode::kStatic) positive(adapters->d_task, "adapters.d_task");
      require(adapters->mode != AdapterMode::kSharedDynamic || moe.has_value(), ErrorCategory::kConfig,
              "shared_dynamic adapters require MoE layers");
    }
  }
};

inline const char* granularity_name(Granularity g) { return g == Granularity::kToken ? "token" : "sentence"; }

inline Granularity parse_granularity(const std::string& s) {
  if (s == "token") return Granularity::kToken;
  if (s == "sentence") return Granularity::kSentence;
  fail(ErrorCategory::kConfig, "unknown routing granularity '" + s + "'");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j{{"n_layers_enc", c.n_layers_enc}, {"n_layers_dec", c.n_layers_dec}, {"d_model", c.d_model},
                   {"d_ff", c.d_ff}, {"n_heads", c.n_heads}, {"dropout", c.dropout},
                   {"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"seed", c.seed},
                   {"task_prefix", c.task_prefix}};
  if (c.moe) {
    nlohmann::json m{{"n_experts", c.moe->n_experts}, {"k", c.moe->k},
                     {"granularity", granularity_name(c.moe->granularity)}, {"aux_coef", c.moe->aux_coef},
                     {"detach_normalizer", c.moe->detach_normalizer}};
    m["capacity_factor"] = c.moe->capacity_factor ? nlohmann::json(*c.moe->capacity_factor) : nlohmann::json();
    j["moe"] = m;
  } else {
    j["moe"] = nullptr;
  }
  if (c.adapters) {
    j["adapters"] = {{"mode", adapter_mode_name(c.adapters->mode)}, {"d_task", c.adapters->d_task},
                     {"d_adapter", c.adapters->d_adapter}, {"k_t", c.adapters->k_t}};
  } else {
    j["adapters"] = nullptr;
  }
  return j;
}

// Keys absent from `j` keep the values already in `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key) && !j[key].is_null()) field = j[key].get<std::decay_t<decltype(field)>>();
    };
    get("n_layers_enc", base.n_layers_enc);
    get("n_layers_dec", base.n_layers_dec);
    get("d_model", base.d_model);
    get("d_ff", base.d_ff);
    get("n_heads", base.n_heads);
    get("dropout", base.dropout);
    get("vocab_size", base.vocab_size);
    get("max_len", base.max_len);
    get("seed", base.seed);
    get("task_prefix", base.task_prefix);
    if (j.contains("moe")) {
      if (j["moe"].is_null()) {
        base.moe.reset();
      } else {
        const auto& m = j["moe"];
        MoeConfig mc = base.moe.value_or(MoeConfig{});
        if (m.contains("n_experts")) mc.n_experts = m["n_experts"].get<std::int64_t>();
        if (m.contains("k")) mc.k = m["k"].get<std::int64_t>();
        if (m.contains("granularity")) mc.granularity = parse_granularity(m["granularity"].get<std::string>());
        if (m.contains("aux_coef")) mc.aux_coef = m["aux_coef"].get<double>();
        if (m.contains("detach_normalizer")) mc.detach_normalizer = m["detach_normalizer"].get<bool>();
        if (m.contains("capacity_factor")) {
          if (m["capacity_factor"].is_null()) {
            mc.capacity_factor.reset();
          } else {
            mc.capacity_factor = m["capacity_factor"].get<double>();
          }
        }
        base.moe = mc;
      }
    }
    if (j.contains("adapters")) {
      if (j["adapters"].is_null()) {
        base.adapters.reset();
      } else {
        const auto& a = j["adapters"];
        AdapterSettings as = base.adapters.value_or(AdapterSettings{});
        if (a.contains("mode")) as.mode = parse_adapter_mode(a["mode"].get<std::string>());
        if (a.contains("d_task")) as.d_task = a["d_task"].get<std::int64_t>();
        if (a.contains("d_adapter")) as.d_adapter = a["d_adapter"].get<std::int64_t>();
        if (a.contains("k_t")) as.k_t = a["k_t"].get<std::int64_t>();
        base.adapters = as;
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::kConfig, std::string("model config: ") + e.what());
  }
  return base;
}

// Preset dimensions. "desk" trains on one CPU core in minutes; "paper"
// keeps the full-size dimensions for shape checks.
struct Preset {
  ModelConfig dims;
  MoeConfig moe;
  AdapterSettings adapters;
};

inline Preset preset(const std::string& name) {
  Preset p;
  if (name == "desk") {
    return p;
  }
  if (name == "paper") {
    p.dims.n_layers_enc = 12;
    p.dims.n_layers_dec = 12;
    p.dims.d_model = 1024;
    p.dims.d_ff = 4096;
    p.dims.n_heads = 16;
    p.dims.dropout = 0.3;
    p.dims.max_len = 256;
    p.adapters.d_task = 64;
    p.adapters.d_adapter = 256;
    return p;
  }
  fail(ErrorCategory::kConfig, "unknown preset '" + name + "' (expected desk or paper)");
}

inline const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{
      "dense", "moe-token", "moe-sentence", "moe-task-static", "moe-task-dynamic",
      "moe-task-shared-dynamic", "dense-task-static", "dense-task-dynamic"};
  return names;
}

inline ModelConfig apply_variant(const Preset& p, const std::string& variant) {
  ModelConfig c = p.dims;
  c.moe.reset();
  c.adapters.reset();
  auto with_adapters = [&](AdapterMode mode) {
    AdapterSettings a = p.adapters;
    a.mode = mode;
    c.adapters = a;
  };
  auto with_moe = [&](Granularity g) {
    MoeConfig m = p.moe;
    m.granularity = g;
    c.moe = m;
  };
  if (variant == "dense") {
  } else if (variant == "moe-token") {
    with_moe(Granularity::kToken);
  } else if (variant == "moe-sentence") {
    with_moe(Granularity::kSentence);
  } else if (variant == "moe-task-static") {
    with_moe(Granularity::kToken);
    with_adapters(AdapterMode::kStatic);
  } else if (variant == "moe-task-dynamic") {
    with_moe(Granularity::kToken);
    with_adapters(AdapterMode::kDynamic);
  } else if (variant == "moe-task-shared-dynamic") {
    with_moe(Granularity::kToken);
    with_adapters(AdapterMode::kSharedDynamic);
  } else if (variant == "dense-task-static") {
    with_adapters(AdapterMode::kStatic);
  } else if (variant == "dense-task-dynamic") {
    with_adapters(AdapterMode::kDynamic);
  } else {
    fail(ErrorCategory::kConfig, "unknown variant '" + variant + "'");
  }
  return c;
}

// Teacher-forcing batch in packed row layout: example b occupies rows
// [b * len, (b + 1) * len) of each sequence tensor.
struct Batch {
  std::int64_t batch = 0;
  std::int64_t src_len = 0;
  std::int64_t tgt_len = 0;
  std::vector<std::int64_t> src;      // ends with eos, pad-filled
  std::vector<std::int64_t> tgt_in;   // bos + target
  std::vector<std::int64_t> tgt_out;  // target + eos
  std::vector<std::int64_t> task;     // per example
};

// `sources` are token ids without bos/eos; `targets` likewise (may be empty
// when only the encoder side is needed).
inline Batch make_batch(const std::vector<std::vector<std::int64_t>>& sources,
                        const std::vector<std::vector<std::int64_t>>& targets,
                        const std::vector<std::int64_t>& tasks) {
  require(!sources.empty() && sources.size() == tasks.size() &&
              (targets.empty() || targets.size() == sources.size()),
          ErrorCategory::kDimension, "make_batch: sources, targets and tasks differ in count");
  Batch b;
  b.batch = static_cast<std::int64_t>(sources.size());
  for (const auto& s : sources) b.src_len = std::max<std::int64_t>(b.src_len, static_cast<std::int64_t>(s.size()) + 1);
  b.tgt_len = 1;
  for (const auto& t : targets) b.tgt_len = std::max<std::int64_t>(b.tgt_len, static_cast<std::int64_t>(t.size()) + 1);
  b.src.assign(static_cast<std::size_t>(b.batch * b.src_len), kPadId);
  b.tgt_in.assign(static_cast<std::size_t>(b.batch * b.tgt_len), kPadId);
  b.tgt_out.assign(static_cast<std::size_t>(b.batch * b.tgt_len), kPadId);
  b.task = tasks;
  for (std::int64_t i = 0; i < b.batch; ++i) {
    const auto& s = sources[static_cast<std::size_t>(i)];
    auto* row = b.src.data() + i * b.src_len;
    std::copy(s.begin(), s.end(), row);
    row[s.size()] = kEosId;
    auto* in = b.tgt_in.data() + i * b.tgt_len;
    auto* out = b.tgt_out.data() + i * b.tgt_len;
    in[0] = kBosId;
    if (!targets.empty()) {
      const auto& t = targets[static_cast<std::size_t>(i)];
      std::copy(t.begin(), t.end(), in + 1);
      std::copy(t.begin(), t.end(), out);
      out[t.size()] = kEosId;
    } else {
      out[0] = kEosId;
    }
  }
  return b;
}

inline TokenLayout layout_for(const std::vector<std::int64_t>& tokens, std::int64_t batch, std::int64_t len,
                              const std::vector<std::int64_t>& tasks) {
  TokenLayout l;
  l.sentence_of_row.resize(tokens.size());
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t t = 0; t < len; ++t) {
      const auto r = static_cast<std::size_t>(b * len + t);
      l.sentence_of_row[r] = tokens[r] == kPadId ? -1 : b;
    }
  }
  l.task_of_sentence = tasks;
  l.n_sentences = batch;
  return l;
}

inline std::vector<std::uint8_t> valid_mask(const std::vector<std::int64_t>& tokens) {
  std::vector<std::uint8_t> m(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) m[i] = tokens[i] != kPadId;
  return m;
}

struct LayerRouting {
  std::string layer;  // e.g. "enc.0.moe", "dec.1.adapters"
  RoutingDecision decision;
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> tokens;     // token id at each routed row
  std::vector<std::int64_t> sentences;  // example index of each routed row
  std::vector<std::int64_t> tasks;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t step = 0;
  bool record_routing = false;
};

template <class T>
struct ForwardResult {
  BasicTensor<T> logits;  // [batch, tgt_len, vocab]
  BasicTensor<T> logits_rows;  // [batch * tgt_len, vocab]
  BasicTensor<T> aux_loss;     // summed over MoE layers; scalar zero without MoE
  std::vector<DispatchStats<T>> moe_stats;
  std::vector<LayerRouting> routing;
};

template <class T>
struct AttentionParams {
  BasicTensor<T> wq, bq, wk, bk, wv, bv, wo, bo;

  static AttentionParams make(ParameterSet<T>& ps, const std::string& prefix, std::int64_t d) {
    const auto s = Init::normal(1.0 / std::sqrt(double(d)));
    AttentionParams a;
    a.wq = ps.add(prefix + ".q.w", {d, d}, s);
    a.bq = ps.add(prefix + ".q.b", {d}, Init::zeros());
    a.wk = ps.add(prefix + ".k.w", {d, d}, s);
    a.bk = ps.add(prefix + ".k.b", {d}, Init::zeros());
    a.wv = ps.add(prefix + ".v.w", {d, d}, s);
    a.bv = ps.add(prefix + ".v.b", {d}, Init::zeros());
    a.wo = ps.add(prefix + ".o.w", {d, d}, s);
    a.bo = ps.add(prefix + ".o.b", {d}, Init::zeros());
    return a;
  }

  BasicTensor<T> operator()(const BasicTensor<T>& xq, const BasicTensor<T>& xkv, std::int64_t heads,
                            const AttentionMask& mask) const {
    auto q = linear(xq, wq, bq);
    auto k = linear(xkv, wk, bk);
    auto v = linear(xkv, wv, bv);
    return linear(attention(q, k, v, heads, mask), wo, bo);
  }
};

template <class T>
struct FeedForwardSlot {
  std::optional<FeedForward<T>> ffn;
  std::optional<MoELayer<T>> moe;
  std::optional<TaskAdapterBank<T>> bank;
};

template <class T>
struct EncoderBlock {
  LayerNormParams<T> ln1, ln2;
  AttentionParams<T> attn;
  FeedForwardSlot<T> ff;
};

template <class T>
struct DecoderBlock {
  LayerNormParams<T> ln1, ln2, ln3;
  AttentionParams<T> self_attn, cross_attn;
  FeedForwardSlot<T> ff;
};

template <class T>
class Seq2SeqModel {
 public:
  // `n_adapters` overrides the adapter count implied by the mode (merged models).
  Seq2SeqModel(ModelConfig cfg, std::vector<std::string> tasks, std::int64_t n_adapters = 0)
      : cfg_(std::move(cfg)), tasks_(std::move(tasks)), params_(cfg_.seed) {
    cfg_.validate();
    require(!tasks_.empty(), ErrorCategory::kConfig, "model needs at least one registered task");
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      require(!task_index_.count(tasks_[i]), ErrorCategory::kConfig, "duplicate task name " + tasks_[i]);
      task_index_[tasks_[i]] = static_cast<std::int64_t>(i);
    }
    const auto d = cfg_.d_model;
    embed_ = params_.add("embed.tokens", {cfg_.vocab_size, d}, Init::normal(1.0 / std::sqrt(double(d))));
    if (cfg_.task_prefix) {
      task_prefix_ = params_.add("embed.task_prefix", {n_tasks(), d}, Init::normal(1.0 / std::sqrt(double(d))));
    }
    if (cfg_.adapters && cfg_.adapters->mode != AdapterMode::kStatic) {
      task_table_ = std::make_shared<TaskEmbeddingTable<T>>();
      task_table_->table = params_.add("task_embedding", {n_tasks(), cfg_.adapters->d_task}, Init::normal(1.0));
    }
    for (std::int64_t i = 0; i < cfg_.n_layers_enc; ++i) {
      const auto p = "enc." + std::to_string(i);
      EncoderBlock<T> b;
      b.ln1 = LayerNormParams<T>::make(params_, p + ".ln1", d);
      b.attn = AttentionParams<T>::make(params_, p + ".attn", d);
      b.ln2 = LayerNormParams<T>::make(params_, p + ".ln2", d);
      b.ff = make_slot(p, n_adapters);
      enc_.push_back(std::move(b));
    }
    enc_ln_ = LayerNormParams<T>::make(params_, "enc.ln_f", d);
    for (std::int64_t i = 0; i < cfg_.n_layers_dec; ++i) {
      const auto p = "dec." + std::to_string(i);
      DecoderBlock<T> b;
      b.ln1 = LayerNormParams<T>::make(params_, p + ".ln1", d);
      b.self_attn = AttentionParams<T>::make(params_, p + ".self_attn", d);
      b.ln2 = LayerNormParams<T>::make(params_, p + ".ln2", d);
      b.cross_attn = AttentionParams<T>::make(params_, p + ".cross_attn", d);
      b.ln3 = LayerNormParams<T>::make(params_, p + ".ln3", d);
      b.ff = make_slot(p, n_adapters);
      dec_.push_back(std::move(b));
    }
    dec_ln_ = LayerNormParams<T>::make(params_, "dec.ln_f", d);
    out_w_ = params_.add("out.w", {d, cfg_.vocab_size}, Init::normal(1.0 / std::sqrt(double(d))));
    out_b_ = params_.add("out.b", {cfg_.vocab_size}, Init::zeros());
    build_positional();
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::string>& tasks() const { return tasks_; }
  std::int64_t n_tasks() const { return static_cast<std::int64_t>(tasks_.size()); }
  std::int64_t n_adapters() const {
    for (const auto& b : enc_) {
      if (b.ff.bank) return b.ff.bank->n_adapters();
    }
    return 0;
  }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }
  std::vector<BasicTensor<T>> parameter_tensors() const { return params_.tensors(); }
  std::int64_t parameter_count() const { return params_.count(); }
  const std::shared_ptr<TaskEmbeddingTable<T>>& task_table() const { return task_table_; }
  const std::vector<EncoderBlock<T>>& encoder_blocks() const { return enc_; }
  const std::vector<DecoderBlock<T>>& decoder_blocks() const { return dec_; }

  std::int64_t task_id(const std::string& name) const {
    auto it = task_index_.find(name);
    require(it != task_index_.end(), ErrorCategory::kUnknownTask, "unknown task '" + name + "'");
    return it->second;
  }

  // Copies values for every parameter name present in `src`.
  template <class U>
  void copy_parameters_from(const Seq2SeqModel<U>& src) {
    for (auto& [name, t] : params_.items()) {
      const auto* s = src.parameters().find(name);
      require(s != nullptr, ErrorCategory::kContract, "copy_parameters_from: missing " + name);
      require(s->shape() == t.shape(), ErrorCategory::kDimension, "copy_parameters_from: shape mismatch for " + name);
      auto handle = t;
      auto dst = handle.mutable_data();
      const auto sd = s->data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(sd[i]);
    }
  }

  ForwardResult<T> forward(const Batch& batch, const ForwardOptions& opt = {}, RoutingTape<T>* tape = nullptr) const {
    check_batch(batch);
    if (tape) tape->begin_pass();
    ForwardResult<T> res;
    Accumulator acc{&res, opt.record_routing, {}};
    const auto source = source_of(batch);
    const auto src_layout = layout_for(source.tokens, batch.batch, source.len, batch.task);
    const auto memory = encode_impl(batch, source, src_layout, opt, tape, acc);
    const auto tgt_layout = layout_for(batch.tgt_in, batch.batch, batch.tgt_len, batch.task);
    const auto sentence_repr = needs_sentence_repr() ? std::optional(segment_mean(memory, std::span<const std::int64_t>(src_layout.sentence_of_row), batch.batch)) : std::nullopt;
    auto h = decode_impl(batch.tgt_in, batch.batch, batch.tgt_len, tgt_layout, memory, source, sentence_repr, opt,
                         tape, acc);
    res.logits_rows = linear(dec_ln_(h), out_w_, out_b_);
    res.logits = reshape(res.logits_rows, {batch.batch, batch.tgt_len, cfg_.vocab_size});
    res.aux_loss = acc.aux.defined() ? acc.aux : BasicTensor<T>::scalar(T(0));
    return res;
  }

  // Cross-entropy over non-pad target positions plus aux_coef * aux loss.
  struct Loss {
    BasicTensor<T> total;
    BasicTensor<T> ce;
    BasicTensor<T> aux;
    ForwardResult<T> forward;
  };

  Loss loss(const Batch& batch, const ForwardOptions& opt = {}, RoutingTape<T>* tape = nullptr) const {
    Loss l;
    l.forward = forward(batch, opt, tape);
    l.ce = cross_entropy(l.forward.logits_rows, std::span<const std::int64_t>(batch.tgt_out), kPadId);
    l.aux = l.forward.aux_loss;
    const double coef = cfg_.moe ? cfg_.moe->aux_coef : 0.0;
    l.total = (cfg_.moe && coef > 0.0) ? add(l.ce, scale(l.aux, static_cast<T>(coef))) : l.ce;
    return l;
  }

  // Argmax decoding (ties to the lowest id) until eos or max_len tokens.
  // Returned sequences exclude bos and eos.
  std::vector<std::vector<std::int64_t>> greedy_decode(const std::vector<std::vector<std::int64_t>>& sources,
                                                       const std::vector<std::int64_t>& tasks,
                                                       std::int64_t max_len) const {
    std::vector<std::vector<std::int64_t>> out(sources.size());
    if (max_len <= 0 || sources.empty()) return out;
    NoGradGuard no_grad;
    const auto batch = make_batch(sources, {}, tasks);
    check_batch(batch);
    const ForwardOptions opt;
    ForwardResult<T> scratch;
    Accumulator acc{&scratch, false, {}};
    const auto source = source_of(batch);
    const auto src_layout = layout_for(source.tokens, batch.batch, source.len, batch.task);
    const auto memory = encode_impl(batch, source, src_layout, opt, nullptr, acc);
    const auto sentence_repr = needs_sentence_repr() ? std::optional(segment_mean(memory, std::span<const std::int64_t>(src_layout.sentence_of_row), batch.batch)) : std::nullopt;
    max_len = std::min(max_len, cfg_.max_len - 1);
    const auto bsz = batch.batch;
    std::vector<std::vector<std::int64_t>> prefix(static_cast<std::size_t>(bsz), std::vector<std::int64_t>{kBosId});
    std::vector<bool> done(static_cast<std::size_t>(bsz), false);
    std::size_t remaining = static_cast<std::size_t>(bsz);
    for (std::int64_t step = 0; step < max_len && remaining > 0; ++step) {
      const auto len = step + 1;
      std::vector<std::int64_t> tokens;
      tokens.reserve(static_cast<std::size_t>(bsz * len));
      for (const auto& p : prefix) tokens.insert(tokens.end(), p.begin(), p.end());
      const auto layout = layout_for(tokens, bsz, len, batch.task);
      auto h = decode_impl(tokens, bsz, len, layout, memory, source, sentence_repr, opt, nullptr, acc);
      std::vector<std::int64_t> last(static_cast<std::size_t>(bsz));
      for (std::int64_t b = 0; b < bsz; ++b) last[static_cast<std::size_t>(b)] = b * len + len - 1;
      const auto logits = linear(dec_ln_(gather_rows(h, std::span<const std::int64_t>(last))), out_w_, out_b_);
      const auto ld = logits.data();
      for (std::int64_t b = 0; b < bsz; ++b) {
        auto& p = prefix[static_cast<std::size_t>(b)];
        if (done[static_cast<std::size_t>(b)]) {
          p.push_back(kPadId);
          continue;
        }
        const auto* row = ld.data() + b * cfg_.vocab_size;
        const auto best = std::max_element(row, row + cfg_.vocab_size) - row;
        p.push_back(best);
        if (best == kEosId) {
          done[static_cast<std::size_t>(b)] = true;
          --remaining;
        } else {
          out[static_cast<std::size_t>(b)].push_back(best);
        }
      }
    }
    return out;
  }

 private:
  struct Accumulator {
    ForwardResult<T>* res;
    bool record;
    BasicTensor<T> aux;

    void add_aux(const BasicTensor<T>& a) { aux = aux.defined() ? add(aux, a) : a; }
  };

  FeedForwardSlot<T> make_slot(const std::string& prefix, std::int64_t n_adapters) {
    FeedForwardSlot<T> s;
    const auto d = cfg_.d_model;
    if (cfg_.moe) {
      const bool shared = cfg_.adapters && cfg_.adapters->mode == AdapterMode::kSharedDynamic;
      s.moe.emplace(params_, prefix + ".moe", d, cfg_.d_ff, *cfg_.moe, shared ? cfg_.adapters->d_task : 0);
    } else {
      s.ffn = FeedForward<T>::make(params_, prefix + ".ffn", d, cfg_.d_ff);
    }
    if (cfg_.adapters) {
      const bool detach = cfg_.moe ? cfg_.moe->detach_normalizer : true;
      s.bank.emplace(params_, prefix, cfg_.adapters->mode, n_tasks(), d, cfg_.adapters->d_adapter, task_table_,
                     cfg_.adapters->k_t, n_adapters, detach);
    }
    return s;
  }

  bool needs_sentence_repr() const { return cfg_.moe && cfg_.moe->granularity == Granularity::kSentence; }

  void check_batch(const Batch& b) const {
    require(b.batch >= 1 && static_cast<std::int64_t>(b.task.size()) == b.batch, ErrorCategory::kDimension,
            "batch task ids do not match batch size");
    for (auto t : b.task) {
      require(t >= 0 && t < n_tasks(), ErrorCategory::kUnknownTask,
              "task index " + std::to_string(t) + " is not registered (" + std::to_string(n_tasks()) + " tasks)");
    }
    require(b.src_len + (cfg_.task_prefix ? 1 : 0) <= cfg_.max_len && b.tgt_len <= cfg_.max_len, ErrorCategory::kContract,
            "sequence length exceeds max_len " + std::to_string(cfg_.max_len));
    for (auto tok : b.src) {
      require(tok >= 0 && tok < cfg_.vocab_size, ErrorCategory::kIndex, "source token id out of vocabulary");
    }
    for (auto tok : b.tgt_in) {
      require(tok >= 0 && tok < cfg_.vocab_size, ErrorCategory::kIndex, "target token id out of vocabulary");
    }
  }

  void build_positional() {
    const auto d = cfg_.d_model;
    positional_.assign(static_cast<std::size_t>(cfg_.max_len * d), T(0));
    for (std::int64_t p = 0; p < cfg_.max_len; ++p) {
      for (std::int64_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        positional_[static_cast<std::size_t>(p * d + i)] = static_cast<T>(std::sin(p * freq));
        if (i + 1 < d) positional_[static_cast<std::size_t>(p * d + i + 1)] = static_cast<T>(std::cos(p * freq));
      }
    }
  }

  BasicTensor<T> embed(const std::vector<std::int64_t>& tokens, std::int64_t batch, std::int64_t len,
                       const ForwardOptions& opt, std::uint64_t site) const {
    const auto d = cfg_.d_model;
    const auto table = cfg_.task_prefix ? concat<T>({embed_, task_prefix_}, 0) : embed_;
    auto e = scale(embedding_lookup(table, std::span<const std::int64_t>(tokens)), static_cast<T>(std::sqrt(double(d))));
    Storage<T> pe(static_cast<std::size_t>(batch * len * d));
    for (std::int64_t b = 0; b < batch; ++b) {
      std::copy(positional_.begin(), positional_.begin() + len * d, pe.begin() + b * len * d);
    }
    return drop(add(e, BasicTensor<T>::from_data({batch * len, d}, std::move(pe))), opt, site);
  }

  BasicTensor<T> drop(const BasicTensor<T>& x, const ForwardOptions& opt, std::uint64_t site) const {
    return dropout(x, cfg_.dropout, DropoutKey{cfg_.seed, site, opt.step}, opt.training);
  }

  void record(Accumulator& acc, const std::string& layer, const RoutingDecision& d, const std::vector<std::int64_t>& rows,
              const std::vector<std::int64_t>& tokens, const TokenLayout& layout) const {
    if (!acc.record) return;
    LayerRouting lr;
    lr.layer = layer;
    lr.decision = d;
    lr.rows = rows;
    for (auto r : rows) {
      lr.tokens.push_back(tokens[static_cast<std::size_t>(r)]);
      lr.sentences.push_back(layout.sentence_of_row[static_cast<std::size_t>(r)]);
      lr.tasks.push_back(layout.task_of_row(r));
    }
    acc.res->routing.push_back(std::move(lr));
  }

  // FFN or MoE on LN(x), residual add, then the adapter bank.
  BasicTensor<T> feed_forward(const FeedForwardSlot<T>& s, const std::string& name, const BasicTensor<T>& h,
                              const LayerNormParams<T>& ln, const TokenLayout& layout,
                              const std::vector<std::int64_t>& tokens, const BasicTensor<T>* sentence_repr,
                              const ForwardOptions& opt, std::uint64_t site, RoutingTape<T>* tape,
                              Accumulator& acc) const {
    const auto xn = ln(h);
    BasicTensor<T> f;
    if (s.moe) {
      MoeContext<T> ctx;
      ctx.layout = &layout;
      ctx.sentence_repr = sentence_repr;
      ctx.task_table = s.moe->task_conditioned() ? &task_table_->table : nullptr;
      ctx.tape = tape;
      auto mo = s.moe->forward(xn, cfg_.moe->granularity, ctx);
      f = mo.y;
      acc.add_aux(aux_load_balance_loss(mo.stats));
      record(acc, name + ".moe", mo.decision, mo.rows, tokens, layout);
      acc.res->moe_stats.push_back(std::move(mo.stats));
    } else {
      f = apply_to_active_rows(xn, &layout, [&](const BasicTensor<T>& x) { return (*s.ffn)(x); });
    }
    auto y = add(h, drop(f, opt, site));
    if (s.bank) {
      auto bo = s.bank->forward(y, layout, tape);
      record(acc, name + ".adapters", bo.decision, bo.rows, tokens, layout);
      y = bo.y;
    }
    return y;
  }

  // Encoder input rows; with the task prefix, row 0 of each example holds id
  // vocab_size + task, which indexes the prefix table.
  struct Source {
    std::vector<std::int64_t> tokens;
    std::int64_t len = 0;
  };

  Source source_of(const Batch& batch) const {
    if (!cfg_.task_prefix) return {batch.src, batch.src_len};
    Source s;
    s.len = batch.src_len + 1;
    s.tokens.assign(static_cast<std::size_t>(batch.batch * s.len), kPadId);
    for (std::int64_t b = 0; b < batch.batch; ++b) {
      auto* row = s.tokens.data() + b * s.len;
      row[0] = cfg_.vocab_size + batch.task[static_cast<std::size_t>(b)];
      std::copy(batch.src.begin() + b * batch.src_len, batch.src.begin() + (b + 1) * batch.src_len, row + 1);
    }
    return s;
  }

  BasicTensor<T> encode_impl(const Batch& batch, const Source& source, const TokenLayout& layout,
                             const ForwardOptions& opt, RoutingTape<T>* tape, Accumulator& acc) const {
    AttentionMask mask{batch.batch, source.len, source.len, false, valid_mask(source.tokens)};
    auto h = embed(source.tokens, batch.batch, source.len, opt, 1);
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      const auto& b = enc_[i];
      const std::uint64_t site = 100 + 10 * i;
      const auto xn = b.ln1(h);
      h = add(h, drop(b.attn(xn, xn, cfg_.n_heads, mask), opt, site));
      h = feed_forward(b.ff, "enc." + std::to_string(i), h, b.ln2, layout, source.tokens, nullptr, opt, site + 1, tape,
                       acc);
    }
    return enc_ln_(h);
  }

  BasicTensor<T> decode_impl(const std::vector<std::int64_t>& tokens, std::int64_t bsz, std::int64_t len,
                             const TokenLayout& layout, const BasicTensor<T>& memory, const Source& src,
                             const std::optional<BasicTensor<T>>& sentence_repr, const ForwardOptions& opt,
                             RoutingTape<T>* tape, Accumulator& acc) const {
    AttentionMask self_mask{bsz, len, len, true, valid_mask(tokens)};
    AttentionMask cross_mask{bsz, len, src.len, false, valid_mask(src.tokens)};
    auto h = embed(tokens, bsz, len, opt, 2);
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      const auto& b = dec_[i];
      const std::uint64_t site = 1000 + 10 * i;
      const auto x1 = b.ln1(h);
      h = add(h, drop(b.self_attn(x1, x1, cfg_.n_heads, self_mask), opt, site));
      h = add(h, drop(b.cross_attn(b.ln2(h), memory, cfg_.n_heads, cross_mask), opt, site + 1));
      h = feed_forward(b.ff, "dec." + std::to_string(i), h, b.ln3, layout, tokens,
                       sentence_repr ? &*sentence_repr : nullptr, opt, site + 2, tape, acc);
    }
    return h;
  }

  ModelConfig cfg_;
  std::vector<std::string> tasks_;
  std::unordered_map<std::string, std::int64_t> task_index_;
  ParameterSet<T> params_;
  BasicTensor<T> embed_;
  BasicTensor<T> task_prefix_;
  std::shared_ptr<TaskEmbeddingTable<T>> task_table_;
  std::vector<EncoderBlock<T>> enc_;
  LayerNormParams<T> enc_ln_;
  std::vector<DecoderBlock<T>> dec_;
  LayerNormParams<T> dec_ln_;
  BasicTensor<T> out_w_, out_b_;
  Storage<T> positional_;
};

using Model = Seq2SeqModel<float>;

}  // namespace tmoe
