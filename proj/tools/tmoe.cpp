// tmoe: generate corpora, train, evaluate, merge and inspect task-based MoE
// sequence-to-sequence models.

#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tmoe/checkpoint.hpp"
#include "tmoe/experiment.hpp"
#include "tmoe/routing_report.hpp"
#include "tmoe/train.hpp"

extern char** environ;

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tmoe;

namespace {

struct ExperimentFlags {
  std::string config;
  std::string preset;
  std::string variant;
  std::string suite;
  std::string out;
  std::uint64_t seed = 0;
  std::uint64_t data_seed = 0;
  std::int64_t epochs = 0;
  double lr = 0.0;
  CLI::App* app = nullptr;

  void add_to(CLI::App* a, bool with_model) {
    app = a;
    a->add_option("--config", config, "JSON experiment config; flags override its keys")->check(CLI::ExistingFile);
    if (with_model) {
      a->add_option("--preset", preset, "model preset: desk or paper");
      a->add_option("--variant", variant, "model variant")->check(CLI::IsMember(variant_names()));
      a->add_option("--epochs", epochs, "maximum training epochs")->check(CLI::NonNegativeNumber);
      a->add_option("--lr", lr, "learning rate")->check(CLI::NonNegativeNumber);
    }
    a->add_option("--suite", suite, "task suite: default, merge-a, merge-b");
    a->add_option("--seed", seed, "run seed");
    a->add_option("--data-seed", data_seed, "corpus generation seed");
  }

  bool given(const std::string& flag) const {
    const auto* o = app->get_option_no_throw(flag);
    return o && o->count() > 0;
  }

  // Layers: base, then the config file, then explicit flags.
  ExperimentConfig resolve(ExperimentConfig e = {}) const {
    if (!config.empty()) e = experiment_from_json(read_json_file(config), e);
    if (given("--preset")) e.preset = preset;
    if (given("--variant")) e.variant = variant;
    if (given("--suite")) {
      e.suite = suite;
      e.tasks.clear();
    }
    if (given("--seed")) e.seed = seed;
    if (given("--data-seed")) e.data_seed = data_seed;
    if (given("--epochs")) e.train.max_epochs = epochs;
    if (given("--lr")) e.train.lr = lr;
    if (given("--out")) e.out = out;
    return e;
  }
};

void say(const std::string& s) {
  std::cout << s << '\n' << std::flush;
}

std::string out_dir_or_fail(const std::string& out) {
  require(!out.empty(), ErrorCategory::kConfig, "an output directory is required (--out)");
  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec, ErrorCategory::kIo, "cannot create " + out + ": " + ec.message());
  return out;
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

// Corpora for a checkpoint, ordered by its task registry.
std::vector<TaskCorpus> corpora_for(const Model& model, const std::vector<CorpusSource>& sources) {
  std::map<std::string, CorpusSource> by_name;
  for (const auto& s : sources) by_name[s.spec.name] = s;
  std::vector<CorpusSource> ordered;
  for (const auto& t : model.tasks()) {
    const auto it = by_name.find(t);
    require(it != by_name.end(), ErrorCategory::kUnknownTask, "no corpus for task '" + t + "'");
    ordered.push_back(it->second);
  }
  return build_corpora(ordered);
}

std::vector<CorpusSource> stored_sources(const Checkpoint& c) {
  const auto& meta = c.manifest.at("metadata");
  require(meta.contains("corpora"), ErrorCategory::kFormat,
          "checkpoint carries no corpus description; pass --config or --suite");
  return corpus_sources_from_json(meta["corpora"]);
}

// Corpora for eval/inspect: explicit flags first, then the checkpoint's own.
std::vector<TaskCorpus> eval_corpora(const Model& model, const Checkpoint& c, const ExperimentFlags& f,
                                     const std::string& data_dir, const std::string& split) {
  if (!data_dir.empty()) {
    std::vector<TaskCorpus> suite;
    for (std::int64_t i = 0; i < model.n_tasks(); ++i) {
      TaskCorpus tc;
      tc.spec.name = model.tasks()[static_cast<std::size_t>(i)];
      tc.task_index = i;
      Corpus& corpus = split == "train" ? tc.train : split == "valid" ? tc.valid : tc.test;
      corpus.split = split;
      corpus.pairs = read_tsv(path_in(data_dir, tc.spec.name + "." + split + ".tsv"), model.tasks());
      suite.push_back(std::move(tc));
    }
    return suite;
  }
  if (!f.config.empty() || f.given("--suite") || f.given("--data-seed")) {
    ExperimentConfig base;
    const auto& meta = c.manifest.at("metadata");
    if (meta.contains("experiment")) base = experiment_from_json(meta["experiment"]);
    return corpora_for(model, f.resolve(base).corpus_sources());
  }
  return corpora_for(model, stored_sources(c));
}

// --jobs fan-out: one child process per seed, each with its own output dir.
int fan_out(const std::vector<std::string>& base_args, const std::vector<std::uint64_t>& seeds, std::int64_t jobs,
            const std::string& out) {
  std::vector<pid_t> running;
  int failures = 0;
  auto reap_one = [&]() {
    int status = 0;
    const pid_t pid = ::wait(&status);
    if (pid <= 0) return;
    running.erase(std::remove(running.begin(), running.end(), pid), running.end());
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) ++failures;
  };
  for (auto seed : seeds) {
    while (static_cast<std::int64_t>(running.size()) >= jobs) reap_one();
    std::vector<std::string> args = base_args;
    args.push_back("--seed");
    args.push_back(std::to_string(seed));
    args.push_back("--out");
    args.push_back(path_in(out, "seed-" + std::to_string(seed)));
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    require(::posix_spawn(&pid, "/proc/self/exe", nullptr, nullptr, argv.data(), environ) == 0, ErrorCategory::kIo,
            "cannot start a worker process");
    running.push_back(pid);
  }
  while (!running.empty()) reap_one();
  require(failures == 0, ErrorCategory::kContract, std::to_string(failures) + " seed run(s) failed");
  return 0;
}

int cmd_gen(const ExperimentFlags& f) {
  const auto e = f.resolve();
  const auto dir = out_dir_or_fail(e.out);
  const auto sources = e.corpus_sources();
  const auto suite = build_corpora(sources);
  const auto names = task_names(suite);
  for (const auto& t : suite) {
    for (const char* split : {"train", "valid", "test"}) {
      write_tsv(path_in(dir, t.spec.name + "." + split + ".tsv"), t.split(split).pairs, names);
    }
    say(t.spec.name + ": " + std::to_string(t.train.pairs.size()) + " train, " + std::to_string(t.valid.pairs.size()) +
        " valid, " + std::to_string(t.test.pairs.size()) + " test");
  }
  write_text_file(path_in(dir, "config.json"), to_json(e).dump(2) + "\n");
  write_text_file(path_in(dir, "corpora.json"), to_json(sources).dump(2) + "\n");
  return 0;
}

int cmd_train(const ExperimentFlags& f, bool quiet) {
  const auto e = f.resolve();
  const auto dir = out_dir_or_fail(e.out);
  const auto sources = e.corpus_sources();
  const auto suite = build_corpora(sources);
  Model model(e.model_config(), task_names(suite));
  write_text_file(path_in(dir, "config.json"), to_json(e).dump(2) + "\n");

  auto tc = e.train_config();
  tc.checkpoint_dir.clear();
  const auto result = train(model, suite, tc, quiet ? ProgressFn{} : ProgressFn{say});
  write_metrics_csv(path_in(dir, "metrics.csv"), result.history);
  save_model(model, path_in(dir, "best.ckpt"),
             {{"experiment", to_json(e)},
              {"corpora", to_json(sources)},
              {"best_epoch", result.best_epoch},
              {"best_valid_bleu", result.best_valid_bleu},
              {"epochs_run", result.epochs_run},
              {"steps", result.steps},
              {"stopped_early", result.stopped_early}});

  const std::vector<BleuTableRow> table{{e.variant, evaluate_suite(model, suite, "test", Vocab{}, tc.eval_batch_size)}};
  write_text_file(path_in(dir, "eval_test.csv"), bleu_table_csv(table));
  std::cout << bleu_table_text(table) << std::flush;
  return 0;
}

int cmd_eval(const ExperimentFlags& f, const std::string& ckpt_path, const std::string& data_dir,
             const std::string& split, std::string label, const std::string& csv) {
  const auto ckpt = read_checkpoint(ckpt_path);
  const auto model = model_from_checkpoint<float>(ckpt);
  const auto suite = eval_corpora(*model, ckpt, f, data_dir, split);
  if (label.empty()) {
    const auto& meta = ckpt.manifest.at("metadata");
    label = meta.contains("experiment") ? meta["experiment"].value("variant", std::string("model"))
                                        : fs::path(ckpt_path).stem().string();
  }
  const std::vector<BleuTableRow> table{{label, evaluate_suite(*model, suite, split, Vocab{})}};
  std::cout << bleu_table_text(table) << std::flush;
  if (!csv.empty()) write_text_file(csv, bleu_table_csv(table));
  if (!f.out.empty()) write_text_file(path_in(out_dir_or_fail(f.out), "eval_" + split + ".csv"), bleu_table_csv(table));
  return 0;
}

int cmd_merge(const ExperimentFlags& f, const std::string& a_path, const std::string& b_path,
              const std::string& cross_init, std::int64_t finetune_steps, std::int64_t every) {
  const auto dir = out_dir_or_fail(f.out);
  const auto a = read_checkpoint(a_path);
  const auto b = read_checkpoint(b_path);
  MergeOptions opt;
  opt.cross_init = cross_init == "zero" ? CrossInit::kZero : CrossInit::kCopy;
  auto [merged, report] = merge_checkpoints(a, b, opt);

  const bool have_corpora = a.manifest.at("metadata").contains("corpora") && b.manifest.at("metadata").contains("corpora");
  std::vector<CorpusSource> sources;
  if (have_corpora) {
    sources = stored_sources(a);
    for (const auto& s : stored_sources(b)) sources.push_back(s);
    merged.manifest["metadata"]["corpora"] = to_json(sources);
  }
  merged.manifest["metadata"]["sources"] = {a_path, b_path};
  write_checkpoint(merged, path_in(dir, "merged.ckpt"));
  const auto rj = report.to_json();
  write_text_file(path_in(dir, "merge_report.json"), rj.dump(2) + "\n");
  std::cout << rj.dump(2) << '\n' << std::flush;

  if (finetune_steps > 0) {
    require(have_corpora, ErrorCategory::kFormat, "fine-tuning needs corpus descriptions in both checkpoints");
    auto model = model_from_checkpoint<float>(merged);
    const auto suite = corpora_for(*model, sources);
    ExperimentConfig e = f.resolve();
    auto tc = e.train_config();
    const auto curve = post_merge_finetune(*model, suite, finetune_steps, tc, every, "test", ProgressFn{say});
    write_recovery_csv(path_in(dir, "recovery.csv"), curve);
    json meta = merged.manifest["metadata"];
    meta["finetune_steps"] = finetune_steps;
    save_model(*model, path_in(dir, "finetuned.ckpt"), meta);
  }
  return 0;
}

int cmd_inspect(const ExperimentFlags& f, const std::string& ckpt_path, const std::string& data_dir,
                const std::string& split) {
  const auto dir = out_dir_or_fail(f.out);
  const auto ckpt = read_checkpoint(ckpt_path);
  const auto model = model_from_checkpoint<float>(ckpt);
  const auto suite = eval_corpora(*model, ckpt, f, data_dir, split);
  const auto pairs = pooled(suite, split);
  const auto rows = collect_routing(*model, pairs, Vocab{});
  write_routing_csv(path_in(dir, "routing.csv"), rows);
  json summary{{"rows", rows.size()}, {"split", split}, {"tasks", model->tasks()}};
  if (model->config().adapters) {
    const auto h = adapter_histogram(rows, model->n_tasks(), model->n_adapters());
    write_histogram_csv(path_in(dir, "adapter_histogram.csv"), h, model->tasks());
    const auto groups = task_groups(suite);
    std::map<std::string, int> per_group;
    for (const auto& g : groups) ++per_group[g];
    int multi = 0;
    for (const auto& [g, n] : per_group) multi += n >= 2;
    if (!h.layers.empty() && per_group.size() >= 2 && multi >= 1) {
      const auto s = clustering_summary(h, groups);
      summary["clustering"] = {{"within_overlap", s.within_overlap},   {"between_overlap", s.between_overlap},
                               {"within_majority", s.within_majority}, {"between_majority", s.between_majority},
                               {"within_pairs", s.within_pairs},       {"between_pairs", s.between_pairs},
                               {"clustered", s.clustered()}};
    }
  }
  write_text_file(path_in(dir, "routing_summary.json"), summary.dump(2) + "\n");
  std::cout << summary.dump(2) << '\n' << std::flush;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-based mixture-of-experts sequence-to-sequence toolkit"};
  app.require_subcommand(1);

  ExperimentFlags gen_f, train_f, eval_f, merge_f, inspect_f;

  auto* gen = app.add_subcommand("gen", "write the synthetic task corpora as TSV files");
  gen_f.add_to(gen, false);
  gen->add_option("--out", gen_f.out, "output directory");

  auto* trn = app.add_subcommand("train", "train one model (or one per seed with --seeds)");
  train_f.add_to(trn, true);
  trn->add_option("--out", train_f.out, "output directory");
  std::vector<std::uint64_t> seeds;
  std::int64_t jobs = 1;
  bool quiet = false;
  trn->add_option("--seeds", seeds, "run one training per seed, outputs under OUT/seed-N")->delimiter(',');
  trn->add_option("--jobs", jobs, "parallel worker processes for --seeds")->check(CLI::PositiveNumber);
  trn->add_flag("--quiet", quiet, "no per-epoch progress lines");

  std::string ckpt, data_dir, split = "test", label, csv;
  auto* evl = app.add_subcommand("eval", "per-task BLEU table for a checkpoint");
  eval_f.add_to(evl, false);
  evl->add_option("--checkpoint", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  evl->add_option("--data", data_dir, "directory of TSV corpora written by gen")->check(CLI::ExistingDirectory);
  evl->add_option("--split", split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  evl->add_option("--label", label, "row label in the table");
  evl->add_option("--csv", csv, "also write the table as CSV");
  evl->add_option("--out", eval_f.out, "write eval_<split>.csv into this directory");

  std::string ckpt_a, ckpt_b, cross_init = "copy";
  std::int64_t finetune_steps = 0, every = 50;
  auto* mrg = app.add_subcommand("merge", "merge two checkpoints, optionally fine-tune the result");
  merge_f.add_to(mrg, true);
  mrg->add_option("--a", ckpt_a, "first checkpoint")->required()->check(CLI::ExistingFile);
  mrg->add_option("--b", ckpt_b, "second checkpoint")->required()->check(CLI::ExistingFile);
  mrg->add_option("--out", merge_f.out, "output directory")->required();
  mrg->add_option("--cross-init", cross_init, "task-gate columns for the other model's adapters")
      ->check(CLI::IsMember({"copy", "zero"}));
  mrg->add_option("--finetune-steps", finetune_steps, "fine-tuning steps after merging")->check(CLI::NonNegativeNumber);
  mrg->add_option("--record-every", every, "recovery-curve cadence in steps")->check(CLI::PositiveNumber);

  std::string inspect_ckpt, inspect_data, inspect_split = "valid";
  auto* ins = app.add_subcommand("inspect", "export routing decisions and adapter histograms");
  inspect_f.add_to(ins, false);
  ins->add_option("--checkpoint", inspect_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ins->add_option("--data", inspect_data, "directory of TSV corpora written by gen")->check(CLI::ExistingDirectory);
  ins->add_option("--split", inspect_split, "train, valid or test")->check(CLI::IsMember({"train", "valid", "test"}));
  ins->add_option("--out", inspect_f.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: usage: " << msg << '\n';
    return 2;
  }

  try {
    if (*gen) return cmd_gen(gen_f);
    if (*trn) {
      if (!seeds.empty()) {
        require(!train_f.given("--seed"), ErrorCategory::kConfig, "--seed and --seeds are exclusive");
        std::vector<std::string> base{"tmoe", "train", "--quiet"};
        if (!train_f.config.empty()) base.insert(base.end(), {"--config", train_f.config});
        if (train_f.given("--preset")) base.insert(base.end(), {"--preset", train_f.preset});
        if (train_f.given("--variant")) base.insert(base.end(), {"--variant", train_f.variant});
        if (train_f.given("--suite")) base.insert(base.end(), {"--suite", train_f.suite});
        if (train_f.given("--data-seed")) base.insert(base.end(), {"--data-seed", std::to_string(train_f.data_seed)});
        if (train_f.given("--epochs")) base.insert(base.end(), {"--epochs", std::to_string(train_f.epochs)});
        if (train_f.given("--lr")) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "%.17g", train_f.lr);
          base.insert(base.end(), {"--lr", buf});
        }
        return fan_out(base, seeds, jobs, out_dir_or_fail(train_f.resolve().out));
      }
      return cmd_train(train_f, quiet);
    }
    if (*evl) return cmd_eval(eval_f, ckpt, data_dir, split, label, csv);
    if (*mrg) return cmd_merge(merge_f, ckpt_a, ckpt_b, cross_init, finetune_steps, every);
    if (*ins) return cmd_inspect(inspect_f, inspect_ckpt, inspect_data, inspect_split);
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: " << category_name(e.category()) << ": " << msg << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    std::cerr << "error: internal: " << msg << '\n';
    return 1;
  }
  return 0;
}
