// SPDX-License-Identifier: Apache-2.0
// Command-line driver: synth, train, adapt, report, experiment.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sml/config.hpp"
#include "sml/data.hpp"
#include "sml/eval.hpp"
#include "sml/meta.hpp"
#include "sml/model.hpp"
#include "sml/param_store.hpp"
#include "sml/structure.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace sml;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::uint64_t seed = 1;
  std::string out;
  std::string data;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

KeyValueConfig load_config(const Common& c) {
  KeyValueConfig cfg = c.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(c.config);
  for (const auto& o : c.overrides) cfg.set_assignment(o);
  return cfg;
}

struct Profile {
  model::HyperParams hp;
  meta::MetaConfig meta;
};

Profile read_profile(const KeyValueConfig& cfg) {
  const std::string name = cfg.get_string("profile", "desk");
  Profile p;
  if (name == "desk") {
    p.hp = model::HyperParams::desk();
    p.meta = meta::MetaConfig::desk();
  } else if (name == "paper") {
    p.hp = model::HyperParams::paper();
    p.meta = meta::MetaConfig::paper();
  } else {
    throw ConfigError("field 'profile': expected desk or paper, got '" + name + "'");
  }
  p.hp = model::HyperParams::from_config(cfg, p.hp);
  p.meta = meta::MetaConfig::from_config(cfg, p.meta);
  p.meta.validate();
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data::DataError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Manifest {
 public:
  Manifest(std::string command, const Common& c) : start_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["version"] = SML_VERSION;
    doc_["seed"] = c.seed;
    doc_["config_file"] = c.config;
    doc_["overrides"] = c.overrides;
    doc_["inputs"] = json::object();
    doc_["outputs"] = json::array();
  }
  void input(const std::string& key, const std::string& path) { doc_["inputs"][key] = path; }
  void output(const fs::path& path) { doc_["outputs"].push_back(path.filename().string()); }
  void set(const std::string& key, json value) { doc_[key] = std::move(value); }
  void write(const fs::path& dir, const KeyValueConfig& cfg) {
    doc_["config"] = cfg.resolved();
    doc_["duration_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_text(dir / "manifest.json", doc_.dump(2) + "\n");
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
};

void warn_unused(const KeyValueConfig& cfg) {
  for (const auto& k : cfg.unused_keys()) std::cerr << "warning: config key '" << k << "' is not used\n";
}

fs::path ensure_out(const Common& c) {
  if (c.out.empty()) throw UsageError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

// ---------------------------------------------------------------------------
// Data directory: corpus.tsv, roles.txt, optional vocab.txt.

struct Dataset {
  data::Corpus corpus;
  data::Vocab vocab;
};

Dataset load_dataset(const Common& c, const KeyValueConfig& cfg) {
  if (c.data.empty()) throw UsageError("--data is required");
  const fs::path dir = c.data;
  const auto max_tokens = static_cast<std::size_t>(cfg.get_int("data.max_tokens", data::kDefaultMaxTokens));
  const auto split_seed = static_cast<std::uint64_t>(cfg.get_int("data.split_seed", 1));
  const auto vocab_cap = static_cast<std::size_t>(cfg.get_int("data.vocab_cap", 30000));
  auto loaded = data::load_corpus(dir / "corpus.tsv", max_tokens);
  if (loaded.report.malformed || loaded.report.truncated) {
    std::cerr << json{{"event", "ingest"},
                      {"records", loaded.report.records},
                      {"malformed", loaded.report.malformed},
                      {"truncated", loaded.report.truncated}}
                     .dump()
              << "\n";
  }
  auto [roles, partition] = data::load_roles(dir / "roles.txt");
  // Config keys override the sizes stored with the roles.
  partition.min_samples = static_cast<std::size_t>(cfg.get_int("data.min_samples", static_cast<long long>(partition.min_samples)));
  partition.val_n = static_cast<std::size_t>(cfg.get_int("data.val_n", static_cast<long long>(partition.val_n)));
  partition.test_n = static_cast<std::size_t>(cfg.get_int("data.test_n", static_cast<long long>(partition.test_n)));
  Rng rng = meta::derive_rng(split_seed, 0);
  Dataset d;
  d.corpus = data::partition_tasks(loaded.examples, partition, roles, rng);
  if (fs::exists(dir / "vocab.txt")) {
    d.vocab = data::Vocab::load(dir / "vocab.txt");
  } else {
    d.vocab = data::build_vocab(d.corpus.vocabulary_examples(), vocab_cap);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoints carry hyperparameters, regime and condition-table labels.

void save_state(const fs::path& path, const meta::ModelState& s, const std::string& regime) {
  Checkpoint ck;
  ck.params = s.params;
  s.hp.to_attributes(ck.attributes);
  ck.attributes["regime"] = regime;
  ck.attributes["tasks"] = std::to_string(s.tasks.size());
  for (std::size_t i = 0; i < s.tasks.size(); ++i) {
    ck.attributes["task." + std::to_string(i)] = s.tasks[i].label();
    ck.attributes["family." + std::to_string(i)] = s.tasks[i].family;
  }
  save_checkpoint(path, ck);
}

std::pair<meta::ModelState, std::string> load_state(const fs::path& path) {
  Checkpoint ck = load_checkpoint(path);
  meta::ModelState s;
  s.hp = model::HyperParams::from_attributes(ck.attributes);
  s.params = std::move(ck.params);
  const std::size_t n = std::stoul(ck.attributes.at("tasks"));
  for (std::size_t i = 0; i < n; ++i) {
    auto spec = data::TaskSpec::from_label(ck.attributes.at("task." + std::to_string(i)));
    spec.family = ck.attributes["family." + std::to_string(i)];
    s.tasks.push_back(spec);
  }
  return {std::move(s), ck.attributes.at("regime")};
}

std::function<void(const meta::LogRecord&)> jsonl_logger(std::ostream& out) {
  return [&out](const meta::LogRecord& r) {
    json j{{"phase", r.phase}, {"step", r.step}, {"loss", r.loss}, {"lr", r.lr}};
    if (!r.task.empty()) j["task"] = r.task;
    out << j.dump() << "\n";
  };
}

void write_heatmap(const fs::path& path, const meta::ModelState& s) {
  std::vector<std::string> labels;
  for (const auto& t : s.tasks) labels.push_back(t.query_fn + " | " + t.response_fn);
  eval::export_heatmap(path, structure::attention_matrix(s.params.at(model::kTaskTable)), labels);
}

// ---------------------------------------------------------------------------

int cmd_synth(const Common& c) {
  KeyValueConfig cfg = load_config(c);
  data::SyntheticSpec spec =
      c.config.empty() && !cfg.has("alphabet") ? data::SyntheticSpec::defaults() : data::SyntheticSpec::from_config(cfg);
  spec.validate();
  const fs::path out = ensure_out(c);
  Manifest manifest("synth", c);
  Rng rng = meta::derive_rng(c.seed, 0);
  auto syn = data::synthesize(spec, rng);
  data::write_corpus(out / "corpus.tsv", syn.examples);
  data::save_roles(out / "roles.txt", syn.roles, spec.partition);
  syn.vocab.save(out / "vocab.txt");
  for (const char* f : {"corpus.tsv", "roles.txt", "vocab.txt"}) manifest.output(out / f);

  std::map<data::TaskSpec, std::size_t> counts;
  for (const auto& ex : syn.examples) ++counts[ex.task];
  std::printf("%-8s %-16s %-10s %-6s %s\n", "query", "response", "family", "role", "examples");
  auto print = [&](const std::vector<data::TaskSpec>& specs, const char* role) {
    for (const auto& t : specs) {
      std::printf("%-8s %-16s %-10s %-6s %zu\n", t.query_fn.c_str(), t.response_fn.c_str(), t.family.c_str(), role,
                  counts[t]);
    }
  };
  print(syn.roles.train, "train");
  print(syn.roles.val, "val");
  print(syn.roles.test, "test");
  manifest.write(out, cfg);
  return 0;
}

int cmd_train(const Common& c, const std::string& regime_name) {
  KeyValueConfig cfg = load_config(c);
  std::string regime = regime_name;
  for (auto& ch : regime) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (regime != "mtl" && regime != "maml" && regime != "sml") {
    throw UsageError("unknown regime '" + regime_name + "' (expected mtl, maml or sml)");
  }
  Profile p = read_profile(cfg);
  Dataset ds = load_dataset(c, cfg);
  warn_unused(cfg);
  p.hp.vocab_size = ds.vocab.size();
  p.hp.validate();
  const fs::path out = ensure_out(c);
  Manifest manifest("train", c);
  manifest.input("data", c.data);
  manifest.set("regime", regime);

  auto corpus = meta::encode_corpus(ds.corpus, ds.vocab);
  std::ofstream log(out / "train_log.jsonl");
  meta::Callbacks cb;
  cb.log = jsonl_logger(log);
  Rng init = meta::derive_rng(c.seed, 1);
  meta::ModelState state;
  meta::TrainReport report;
  if (regime == "mtl") {
    auto tasks = corpus.train_specs;
    for (const auto& v : corpus.val) tasks.push_back(v.spec);
    state = meta::make_model(p.hp, tasks, false, init);
    Rng rng = meta::derive_rng(c.seed, 2);
    report = meta::mtl_train(state, corpus, p.meta, rng, cb);
  } else {
    const bool sml = regime == "sml";
    state = meta::make_model(p.hp, corpus.train_specs, sml, init);
    Rng rng = meta::derive_rng(c.seed, 3);
    report = meta::meta_train(state, corpus, p.meta, sml ? meta::Mode::sml : meta::Mode::maml, rng, cb);
  }
  save_state(out / "checkpoint.bin", state, regime);
  manifest.output(out / "checkpoint.bin");
  manifest.output(out / "train_log.jsonl");
  if (state.gated()) {
    write_heatmap(out / "heatmap.tsv", state);
    manifest.output(out / "heatmap.tsv");
  }
  manifest.set("best_epoch", report.best_epoch);
  manifest.set("best_val_ppl", report.best_val_ppl);
  manifest.write(out, cfg);
  std::printf("regime %s: %zu iterations, best epoch %zu, validation perplexity %.4f\n", regime.c_str(),
              report.losses.size(), report.best_epoch, static_cast<double>(report.best_val_ppl));
  return 0;
}

int cmd_adapt(const Common& c, const std::string& checkpoint, const std::string& task, std::string mode_name,
              long long steps) {
  KeyValueConfig cfg = load_config(c);
  Profile p = read_profile(cfg);
  Dataset ds = load_dataset(c, cfg);
  warn_unused(cfg);
  auto [state, regime] = load_state(checkpoint);
  if (state.hp.vocab_size != ds.vocab.size()) {
    throw data::DataError("checkpoint vocabulary size " + std::to_string(state.hp.vocab_size) +
                          " does not match the data directory's " + std::to_string(ds.vocab.size()));
  }
  if (mode_name.empty()) mode_name = state.gated() ? "sml" : "plain";
  if (mode_name != "sml" && mode_name != "plain") throw UsageError("--mode must be plain or sml");
  const meta::Mode mode = mode_name == "sml" ? meta::Mode::sml : meta::Mode::maml;
  if (mode == meta::Mode::sml && !state.gated()) {
    throw UsageError("checkpoint regime '" + regime + "' has no structure parameters; use --mode plain");
  }
  auto corpus = meta::encode_corpus(ds.corpus, ds.vocab);
  const meta::EncodedTarget* target = nullptr;
  for (const auto* group : {&corpus.test, &corpus.val})
    for (const auto& t : *group)
      if (t.spec.label() == task) target = &t;
  if (!target) throw data::DataError("task '" + task + "' is not a meta-val or meta-test task of the corpus");

  const fs::path out = ensure_out(c);
  Manifest manifest("adapt", c);
  manifest.input("checkpoint", checkpoint);
  manifest.input("data", c.data);
  manifest.set("task", task);
  manifest.set("mode", mode_name);
  const std::size_t max_steps = steps >= 0 ? static_cast<std::size_t>(steps) : p.meta.max_finetune_steps;
  std::ofstream log(out / "adapt_log.jsonl");
  meta::Callbacks cb;
  cb.log = jsonl_logger(log);
  Rng rng = meta::derive_rng(c.seed, 100);
  meta::AdaptResult r = meta::finetune(state, *target, p.meta, mode, max_steps, rng, true, cb);

  meta::Regime row_regime = regime == "mtl" ? (max_steps == 0 ? meta::Regime::mtl : meta::Regime::mtl_ft)
                            : regime == "sml" ? meta::Regime::sml
                                              : meta::Regime::maml;
  meta::ResultRow row;
  row.regime = meta::regime_name(row_regime);
  row.task_id = task;
  row.seed = c.seed;
  row.ft_step = r.report.ft_step;
  row.ppl = r.report.test_metrics.at("ppl");
  row.bleu1 = r.report.test_metrics.at("bleu1");
  row.bleu2 = r.report.test_metrics.at("bleu2");
  row.dist1 = r.report.test_metrics.at("dist1");
  row.dist2 = r.report.test_metrics.at("dist2");
  write_text(out / "results.csv", meta::results_csv(std::span<const meta::ResultRow>(&row, 1)));

  std::string curve = "step,val_ppl\n";
  for (const auto& [s, v] : r.report.curve) curve += std::to_string(s) + "," + format_double(v) + "\n";
  write_text(out / "curve.csv", curve);
  std::string gens;
  for (const auto& g : r.generations) gens += join(ds.vocab.decode(g), " ") + "\n";
  write_text(out / "generations.txt", gens);
  save_state(out / "adapted.bin", r.adapted, regime);
  for (const char* f : {"results.csv", "curve.csv", "generations.txt", "adapted.bin", "adapt_log.jsonl"})
    manifest.output(out / f);
  manifest.set("ft_step", r.report.ft_step);
  manifest.set("best_val_ppl", r.report.best_val_ppl);
  manifest.write(out, cfg);
  std::printf("%s on %s: ft_step %zu, best val ppl %.4f, test ppl %.4f, BLEU-1 %.4f\n", row.regime.c_str(),
              task.c_str(), row.ft_step, static_cast<double>(r.report.best_val_ppl), static_cast<double>(row.ppl),
              static_cast<double>(row.bleu1));
  return 0;
}

std::vector<meta::ResultRow> parse_results(const fs::path& path, std::string& header) {
  std::istringstream in(read_text(path));
  std::string line;
  std::getline(in, header);
  std::vector<meta::ResultRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      const char ch = line[i];
      if (quoted) {
        if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += line[++i];
        else if (ch == '"') quoted = false;
        else cur += ch;
      } else if (ch == '"') {
        quoted = true;
      } else if (ch == ',') {
        f.push_back(cur);
        cur.clear();
      } else {
        cur += ch;
      }
    }
    f.push_back(cur);
    if (f.size() != 9) throw data::DataError(path.string() + ":" + std::to_string(lineno) + ": expected 9 fields");
    meta::ResultRow r;
    r.regime = f[0];
    r.task_id = f[1];
    r.seed = std::stoull(f[2]);
    r.ft_step = std::stoul(f[3]);
    r.ppl = std::stod(f[4]);
    r.bleu1 = std::stod(f[5]);
    r.bleu2 = std::stod(f[6]);
    r.dist1 = std::stod(f[7]);
    r.dist2 = std::stod(f[8]);
    rows.push_back(r);
  }
  return rows;
}

int cmd_report(const Common& c, const std::vector<std::string>& runs) {
  if (runs.empty()) throw UsageError("report needs at least one run directory");
  KeyValueConfig cfg = load_config(c);
  const fs::path out = ensure_out(c);
  Manifest manifest("report", c);
  std::vector<meta::ResultRow> rows;
  std::string schema;
  for (const auto& run : runs) {
    const fs::path dir = run;
    if (!fs::exists(dir / "results.csv")) throw data::DataError("run directory " + run + " has no results.csv");
    std::string header;
    auto rs = parse_results(dir / "results.csv", header);
    if (schema.empty()) schema = header;
    if (header != schema) throw data::DataError("incompatible result schema in " + run);
    rows.insert(rows.end(), rs.begin(), rs.end());
    manifest.input(run, (dir / "results.csv").string());
    std::vector<fs::path> heatmaps;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.rfind("heatmap", 0) == 0 && e.path().extension() == ".tsv") heatmaps.push_back(e.path());
    }
    std::sort(heatmaps.begin(), heatmaps.end());
    for (const auto& h : heatmaps) {
      const fs::path dest = out / (dir.filename().string() + "_" + h.filename().string());
      fs::copy_file(h, dest, fs::copy_options::overwrite_existing);
      manifest.output(dest);
    }
    if (heatmaps.empty() && fs::exists(dir / "checkpoint.bin")) {
      auto [state, regime] = load_state(dir / "checkpoint.bin");
      if (state.gated()) {
        const fs::path dest = out / (dir.filename().string() + "_heatmap.tsv");
        write_heatmap(dest, state);
        manifest.output(dest);
      }
    }
  }
  write_text(out / "results.csv", meta::results_csv(rows));
  write_text(out / "summary.csv", meta::summary_csv(rows));
  manifest.output(out / "results.csv");
  manifest.output(out / "summary.csv");
  manifest.write(out, cfg);
  std::cout << meta::summary_csv(rows);
  return 0;
}

int cmd_experiment(const Common& c, const std::vector<std::string>& regime_names, bool parallel) {
  KeyValueConfig cfg = load_config(c);
  Profile p = read_profile(cfg);
  Dataset ds = load_dataset(c, cfg);
  auto names = regime_names;
  if (names.empty()) names = cfg.get_list("experiment.regimes", {"MTL", "MTL+FT", "MAML", "SML"});
  warn_unused(cfg);
  std::vector<meta::Regime> regimes;
  for (const auto& n : names) regimes.push_back(meta::parse_regime(n));
  p.hp.vocab_size = ds.vocab.size();
  p.hp.validate();
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < p.meta.seeds; ++i) seeds.push_back(c.seed + i);
  const fs::path out = ensure_out(c);
  Manifest manifest("experiment", c);
  manifest.input("data", c.data);
  manifest.set("regimes", names);
  manifest.set("seeds", seeds);

  auto corpus = meta::encode_corpus(ds.corpus, ds.vocab);
  auto result = meta::run_experiment(corpus, p.hp, p.meta, regimes, seeds, parallel);
  const auto rows = result.rows();
  write_text(out / "results.csv", meta::results_csv(rows));
  write_text(out / "summary.csv", meta::summary_csv(rows));
  manifest.output(out / "results.csv");
  manifest.output(out / "summary.csv");
  std::string contrast = "seed,within_family,cross_family\n";
  bool any_heatmap = false;
  for (const auto& s : result.seeds) {
    if (s.heatmap.empty()) continue;
    any_heatmap = true;
    const fs::path h = out / ("heatmap_seed" + std::to_string(s.seed) + ".tsv");
    eval::export_heatmap(h, s.heatmap, s.heatmap_labels);
    manifest.output(h);
    auto fc = eval::family_contrast(s.heatmap, s.heatmap_families);
    char buf[96];
    std::snprintf(buf, sizeof buf, "%llu,%.6f,%.6f\n", static_cast<unsigned long long>(s.seed),
                  static_cast<double>(fc.within), static_cast<double>(fc.cross));
    contrast += buf;
  }
  if (any_heatmap) {
    write_text(out / "family_contrast.csv", contrast);
    manifest.output(out / "family_contrast.csv");
  }
  manifest.write(out, cfg);
  std::cout << meta::summary_csv(rows);
  return 0;
}

void add_common(CLI::App* app, Common& c, bool needs_data) {
  app->add_option("--config", c.config, "Key-value config file");
  app->add_option("--set", c.overrides, "Override a config key (key=value); repeatable");
  app->add_option("--seed", c.seed, "Random seed");
  app->add_option("--out", c.out, "Output directory")->required();
  if (needs_data) app->add_option("--data", c.data, "Data directory (corpus.tsv, roles.txt, vocab.txt)")->required();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Structured meta-learning for conditional sequence generation"};
  app.set_version_flag("--version", std::string(SML_VERSION));
  app.require_subcommand(1);

  Common c;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic task-family corpus");
  add_common(synth, c, false);

  std::string regime;
  auto* train = app.add_subcommand("train", "Train a model under one regime");
  add_common(train, c, true);
  train->add_option("--regime", regime, "mtl, maml or sml")->required();

  std::string checkpoint, task, mode;
  long long steps = -1;
  auto* adapt = app.add_subcommand("adapt", "Adapt a trained model to a target task");
  add_common(adapt, c, true);
  adapt->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  adapt->add_option("--task", task, "Target task label, query_fn|response_fn")->required();
  adapt->add_option("--mode", mode, "plain or sml (default: sml for gated checkpoints)");
  adapt->add_option("--steps", steps, "Maximum adaptation steps (default from config)");

  std::vector<std::string> runs;
  auto* report = app.add_subcommand("report", "Aggregate result CSVs and heatmaps across runs");
  add_common(report, c, false);
  report->add_option("runs", runs, "Run directories")->required();

  std::vector<std::string> regimes;
  bool parallel = false;
  auto* experiment = app.add_subcommand("experiment", "Train and adapt every regime over several seeds");
  add_common(experiment, c, true);
  experiment->add_option("--regimes", regimes, "Subset of MTL, MTL+FT, MAML, SML");
  experiment->add_flag("--parallel", parallel, "Run seeds on parallel threads");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(c);
    if (*train) return cmd_train(c, regime);
    if (*adapt) return cmd_adapt(c, checkpoint, task, mode, steps);
    if (*report) return cmd_report(c, runs);
    if (*experiment) return cmd_experiment(c, regimes, parallel);
  } catch (const meta::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
