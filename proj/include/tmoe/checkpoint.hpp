#pragma once

// Named-tensor checkpoints and two-model merging.
//
// File layout (all integers little-endian uint64):
//   "TMOE-CHECKPOINT\n"
//   manifest_len, manifest JSON bytes
//   tensor_count, then per tensor: name_len, name bytes, rank, extents...,
//   numel float32 values (little-endian)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tmoe/error.hpp"
#include "tmoe/model.hpp"

namespace tmoe {

inline constexpr const char* kCheckpointMagic = "TMOE-CHECKPOINT\n";
inline constexpr std::int64_t kCheckpointFormatVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
  ModelConfig config() const { return model_config_from_json(manifest.at("config")); }
  std::vector<std::string> tasks() const { return manifest.at("tasks").get<std::vector<std::string>>(); }
  std::int64_t adapter_count() const { return manifest.at("adapter_count").get<std::int64_t>(); }
};

template <class T>
Checkpoint checkpoint_from_model(const Seq2SeqModel<T>& model, nlohmann::json metadata = nlohmann::json::object()) {
  Checkpoint c;
  c.manifest = {{"format_version", kCheckpointFormatVersion},
                {"config", to_json(model.config())},
                {"tasks", model.tasks()},
                {"adapter_count", model.n_adapters()},
                {"metadata", std::move(metadata)}};
  for (const auto& [name, t] : model.parameters().items()) {
    NamedTensor nt;
    nt.name = name;
    nt.shape = t.shape();
    for (auto v : t.data()) nt.data.push_back(static_cast<float>(v));
    c.tensors.push_back(std::move(nt));
  }
  return c;
}

// Builds a model and fills every parameter from the checkpoint; any missing,
// extra, or misshapen tensor is an error and no model is returned.
template <class T = float>
std::unique_ptr<Seq2SeqModel<T>> model_from_checkpoint(const Checkpoint& c) {
  ModelConfig cfg;
  std::vector<std::string> tasks;
  std::int64_t adapters = 0;
  try {
    require(c.manifest.at("format_version").get<std::int64_t>() == kCheckpointFormatVersion, ErrorCategory::kFormat,
            "checkpoint format version " + c.manifest.at("format_version").dump() + " is not supported (expected " +
                std::to_string(kCheckpointFormatVersion) + ")");
    cfg = c.config();
    tasks = c.tasks();
    adapters = c.adapter_count();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCategory::kFormat, std::string("checkpoint manifest: ") + e.what());
  }
  auto model = std::make_unique<Seq2SeqModel<T>>(cfg, tasks, adapters);
  require(model->n_adapters() == adapters, ErrorCategory::kFormat, "checkpoint adapter count does not match its config");
  std::unordered_map<std::string, const NamedTensor*> by_name;
  for (const auto& t : c.tensors) {
    require(by_name.emplace(t.name, &t).second, ErrorCategory::kFormat, "duplicate tensor " + t.name);
  }
  for (const auto& [name, p] : model->parameters().items()) {
    auto it = by_name.find(name);
    require(it != by_name.end(), ErrorCategory::kFormat, "checkpoint is missing tensor " + name);
    require(it->second->shape == p.shape(), ErrorCategory::kFormat,
            "tensor " + name + " has shape " + shape_str(it->second->shape) + ", model expects " + shape_str(p.shape()));
    auto handle = p;
    auto dst = handle.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second->data[i]);
    by_name.erase(it);
  }
  require(by_name.empty(), ErrorCategory::kFormat,
          "checkpoint has tensor " + (by_name.empty() ? std::string() : by_name.begin()->first) + " the model lacks");
  return model;
}

namespace detail {

inline void put_u64(std::ostream& o, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  o.write(reinterpret_cast<const char*>(b), 8);
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  void need(std::size_t n) const {
    require(pos_ + n <= bytes_.size(), ErrorCategory::kFormat,
            path_ + ": truncated checkpoint (needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ")");
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32() {
    need(4);
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(u);
  }
  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void write_checkpoint(const Checkpoint& c, const std::string& path) {
  const auto tmp = path + ".tmp";
  {
    std::ofstream o(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(o), ErrorCategory::kIo, "cannot write " + path);
    o << kCheckpointMagic;
    const auto manifest = c.manifest.dump(2);
    detail::put_u64(o, manifest.size());
    o << manifest;
    detail::put_u64(o, c.tensors.size());
    for (const auto& t : c.tensors) {
      detail::put_u64(o, t.name.size());
      o << t.name;
      detail::put_u64(o, t.shape.size());
      for (auto e : t.shape) detail::put_u64(o, static_cast<std::uint64_t>(e));
      for (float v : t.data) {
        const auto u = std::bit_cast<std::uint32_t>(v);
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
        o.write(reinterpret_cast<const char*>(b), 4);
      }
    }
    require(static_cast<bool>(o), ErrorCategory::kIo, "write failed for " + path);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, ErrorCategory::kIo, "cannot move checkpoint into " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorCategory::kIo, "cannot open checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::Reader r(std::move(bytes), path);
  const std::string magic = kCheckpointMagic;
  require(r.remaining() >= magic.size() && r.str(magic.size()) == magic, ErrorCategory::kFormat,
          path + ": not a checkpoint file");
  Checkpoint c;
  const auto mlen = r.u64();
  try {
    c.manifest = nlohmann::json::parse(r.str(static_cast<std::size_t>(mlen)));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCategory::kFormat, path + ": manifest is not valid JSON: " + e.what());
  }
  require(c.manifest.is_object() && c.manifest.contains("format_version"), ErrorCategory::kFormat,
          path + ": manifest lacks format_version");
  require(c.manifest["format_version"] == kCheckpointFormatVersion, ErrorCategory::kFormat,
          path + ": format version " + c.manifest["format_version"].dump() + " is not supported");
  const auto count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto nlen = r.u64();
    t.name = r.str(static_cast<std::size_t>(nlen));
    const auto rank = r.u64();
    require(rank >= 1 && rank <= 8, ErrorCategory::kFormat, path + ": tensor " + t.name + " has invalid rank");
    std::uint64_t numel = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      const auto e = r.u64();
      require(e >= 1 && e < (1ULL << 40), ErrorCategory::kFormat, path + ": tensor " + t.name + " has invalid extent");
      t.shape.push_back(static_cast<std::int64_t>(e));
      numel *= e;
    }
    r.need(static_cast<std::size_t>(numel * 4));
    t.data.resize(static_cast<std::size_t>(numel));
    for (auto& v : t.data) v = r.f32();
    c.tensors.push_back(std::move(t));
  }
  require(r.at_end(), ErrorCategory::kFormat, path + ": trailing bytes after the last tensor");
  return c;
}

template <class T>
void save_model(const Seq2SeqModel<T>& model, const std::string& path,
                nlohmann::json metadata = nlohmann::json::object()) {
  write_checkpoint(checkpoint_from_model(model, std::move(metadata)), path);
}

inline std::unique_ptr<Model> load_model(const std::string& path) {
  return model_from_checkpoint<float>(read_checkpoint(path));
}

// ---------------------------------------------------------------------------
// Merging

enum class CrossInit { kCopy, kZero };

struct MergeOptions {
  // Columns of the merged task gate that score the other model's adapters:
  // copied from that model's gate, or zero.
  CrossInit cross_init = CrossInit::kCopy;
};

struct MergeEntry {
  std::string name;
  std::string action;  // averaged | concatenated | extended | copied
  std::string source;  // a, b, or a+b
};

struct MergeReport {
  std::vector<MergeEntry> entries;
  std::vector<std::string> tasks;
  std::int64_t adapters_a = 0, adapters_b = 0, adapters_merged = 0;
  std::int64_t params_a = 0, params_b = 0, params_merged = 0;

  std::int64_t count(const std::string& action) const {
    std::int64_t n = 0;
    for (const auto& e : entries) n += e.action == action;
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& e : entries) layers.push_back({{"name", e.name}, {"action", e.action}, {"source", e.source}});
    return {{"tasks", tasks},
            {"adapters", {{"a", adapters_a}, {"b", adapters_b}, {"merged", adapters_merged}}},
            {"parameters", {{"a", params_a}, {"b", params_b}, {"merged", params_merged},
                            {"delta_vs_a", params_merged - params_a}, {"delta_vs_b", params_merged - params_b}}},
            {"actions", {{"averaged", count("averaged")}, {"concatenated", count("concatenated")},
                         {"extended", count("extended")}, {"copied", count("copied")}}},
            {"layers", layers}};
  }
};

namespace detail {

inline std::int64_t checkpoint_params(const Checkpoint& c) {
  std::int64_t n = 0;
  for (const auto& t : c.tensors) n += static_cast<std::int64_t>(t.data.size());
  return n;
}

// "enc.0.adapters.3.w_up" -> ("enc.0", 3, "w_up")
inline std::optional<std::tuple<std::string, std::int64_t, std::string>> split_adapter_name(const std::string& name) {
  const std::string key = ".adapters.";
  const auto p = name.find(key);
  if (p == std::string::npos) return std::nullopt;
  const auto rest = name.substr(p + key.size());
  const auto dot = rest.find('.');
  return std::tuple{name.substr(0, p), std::stoll(rest.substr(0, dot)), rest.substr(dot + 1)};
}

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

// Adapter banks are concatenated (a's adapters first), per-task tables
// (task embeddings, source prefixes) stacked in registry order, task gates widened to L_a + L_b outputs, and
// every other tensor averaged elementwise.
inline std::pair<Checkpoint, MergeReport> merge_checkpoints(const Checkpoint& a, const Checkpoint& b,
                                                            const MergeOptions& opt = {}) {
  auto strip = [](nlohmann::json cfg) {
    cfg.erase("seed");
    return cfg;
  };
  require(strip(a.manifest.at("config")) == strip(b.manifest.at("config")), ErrorCategory::kMerge,
          "cannot merge checkpoints with different model configurations");
  const auto tasks_a = a.tasks(), tasks_b = b.tasks();
  std::unordered_set<std::string> seen(tasks_a.begin(), tasks_a.end());
  for (const auto& t : tasks_b) {
    require(!seen.count(t), ErrorCategory::kMerge, "task '" + t + "' is registered in both checkpoints");
  }
  const auto cfg = a.config();
  const auto la = a.adapter_count(), lb = b.adapter_count();

  MergeReport report;
  report.tasks = tasks_a;
  report.tasks.insert(report.tasks.end(), tasks_b.begin(), tasks_b.end());
  report.adapters_a = la;
  report.adapters_b = lb;
  report.adapters_merged = la + lb;
  report.params_a = detail::checkpoint_params(a);
  report.params_b = detail::checkpoint_params(b);

  auto need = [](const Checkpoint& c, const std::string& name, const char* which) -> const NamedTensor& {
    const auto* t = c.find(name);
    require(t != nullptr, ErrorCategory::kMerge, std::string("checkpoint ") + which + " lacks tensor " + name);
    return *t;
  };

  // The merged layout comes from a skeleton model with the combined registry.
  ModelConfig skeleton_cfg = cfg;
  NoGradGuard no_grad;
  Seq2SeqModel<float> skeleton(skeleton_cfg, report.tasks, cfg.adapters ? la + lb : 0);

  Checkpoint out;
  for (const auto& [name, p] : skeleton.parameters().items()) {
    NamedTensor nt;
    nt.name = name;
    nt.shape = p.shape();
    if (auto parts = detail::split_adapter_name(name)) {
      const auto& [prefix, idx, rest] = *parts;
      const bool from_a = idx < la;
      const auto src_name = prefix + ".adapters." + std::to_string(from_a ? idx : idx - la) + "." + rest;
      const auto& src = need(from_a ? a : b, src_name, from_a ? "a" : "b");
      require(src.shape == nt.shape, ErrorCategory::kMerge, "adapter tensor " + src_name + " has an unexpected shape");
      nt.data = src.data;
      report.entries.push_back({name, "copied", from_a ? "a" : "b"});
    } else if (name == "task_embedding" || name == "embed.task_prefix") {
      const auto& ta = need(a, name, "a");
      const auto& tb = need(b, name, "b");
      require(ta.shape[1] == tb.shape[1], ErrorCategory::kMerge, name + " widths differ");
      nt.data = ta.data;
      nt.data.insert(nt.data.end(), tb.data.begin(), tb.data.end());
      report.entries.push_back({name, "concatenated", "a+b"});
    } else if (detail::ends_with(name, ".task_gate.w_t")) {
      const auto& ga = need(a, name, "a");
      const auto& gb = need(b, name, "b");
      require(ga.shape[0] == gb.shape[0] && ga.shape[1] == la && gb.shape[1] == lb, ErrorCategory::kMerge,
              "task gate " + name + " shapes are inconsistent with the adapter counts");
      const auto rows = ga.shape[0];
      nt.data.assign(static_cast<std::size_t>(rows * (la + lb)), 0.f);
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < la; ++j) nt.data[static_cast<std::size_t>(r * (la + lb) + j)] = ga.data[static_cast<std::size_t>(r * la + j)];
        if (opt.cross_init == CrossInit::kCopy) {
          for (std::int64_t j = 0; j < lb; ++j) nt.data[static_cast<std::size_t>(r * (la + lb) + la + j)] = gb.data[static_cast<std::size_t>(r * lb + j)];
        }
      }
      report.entries.push_back({name, "extended", "a+b"});
    } else {
      const auto& ta = need(a, name, "a");
      const auto& tb = need(b, name, "b");
      require(ta.shape == tb.shape && ta.shape == nt.shape, ErrorCategory::kMerge, "shared tensor " + name + " shapes differ");
      nt.data.resize(ta.data.size());
      for (std::size_t i = 0; i < nt.data.size(); ++i) nt.data[i] = (ta.data[i] + tb.data[i]) * 0.5f;
      report.entries.push_back({name, "averaged", "a+b"});
    }
    out.tensors.push_back(std::move(nt));
  }
  out.manifest = {{"format_version", kCheckpointFormatVersion},
                  {"config", to_json(cfg)},
                  {"tasks", report.tasks},
                  {"adapter_count", cfg.adapters ? la + lb : 0},
                  {"metadata", {{"merged", true}, {"cross_init", opt.cross_init == CrossInit::kCopy ? "copy" : "zero"}}}};
  report.params_merged = detail::checkpoint_params(out);
  return {std::move(out), std::move(report)};
}

}  // namespace tmoe
