// SPDX-License-Identifier: Apache-2.0
// Acceptance driver: one PASS/FAIL line per criterion.
//
// Criteria 1-4 and 7 run the matching unit-test cases (linked into this
// binary) through doctest filters; 5, 6 and 8 run experiments in-process.
#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "sml/data.hpp"
#include "sml/eval.hpp"
#include "sml/meta.hpp"

using namespace sml;
using Clock = std::chrono::steady_clock;

namespace {

std::vector<int> failed;

void verdict(int id, bool pass, const std::string& what) {
  std::printf("%s %d: %s\n", pass ? "PASS" : "FAIL", id, what.c_str());
  std::fflush(stdout);
  if (!pass) failed.push_back(id);
}

void detail(const std::string& line) {
  std::printf("  %s\n", line.c_str());
  std::fflush(stdout);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct CaseRun {
  bool ok = false;
  double seconds = 0;
};

// Runs the named test cases; all must be found and pass.
CaseRun run_cases(const std::vector<std::string>& names) {
  std::string filter;
  for (auto n : names) {
    std::replace(n.begin(), n.end(), ',', '?');  // commas separate filters
    filter += (filter.empty() ? "" : ",") + n;
  }
  std::ostringstream captured;
  doctest::Context ctx;
  ctx.setOption("test-case", filter.c_str());
  ctx.setOption("no-version", true);
  ctx.setCout(&captured);
  const auto t0 = Clock::now();
  const int rc = ctx.run();
  CaseRun r;
  r.seconds = seconds_since(t0);
  const std::string text = captured.str();
  std::smatch m;
  static const std::regex summary(R"(test cases:\s*(\d+)\s*\|\s*(\d+) passed)");
  const bool found = std::regex_search(text, m, summary);
  const std::size_t passed = found ? std::stoul(m[2]) : 0;
  r.ok = rc == 0 && passed == names.size();
  if (!r.ok) std::cout << text;
  return r;
}

void unit_criterion(int id, const std::string& what, const std::vector<std::string>& cases, double time_limit = 0) {
  const CaseRun r = run_cases(cases);
  std::ostringstream d;
  d.precision(2);
  d << std::fixed << cases.size() << (cases.size() == 1 ? " test case in " : " test cases in ") << r.seconds << " s";
  detail(d.str());
  verdict(id, r.ok && (time_limit <= 0 || r.seconds < time_limit), what);
}

// ---------------------------------------------------------------------------

struct Desk {
  model::HyperParams hp;
  meta::MetaConfig cfg;
  meta::EncodedCorpus corpus;
};

// The default synthetic corpus and desk profile, as `sml synth` then
// `sml experiment` produce them with default seeds.
Desk desk_setup() {
  const auto spec = data::SyntheticSpec::defaults();
  Rng gen = meta::derive_rng(1, 0);
  auto syn = data::synthesize(spec, gen);
  Rng split = meta::derive_rng(1, 0);
  auto corpus = data::partition_tasks(syn.examples, spec.partition, syn.roles, split);
  Desk d;
  d.hp = model::HyperParams::desk();
  d.hp.vocab_size = syn.vocab.size();
  d.cfg = meta::MetaConfig::desk();
  d.corpus = meta::encode_corpus(corpus, syn.vocab);
  return d;
}

std::string fmt(double v, int digits = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void regime_criteria() {
  const auto t0 = Clock::now();
  Desk d = desk_setup();
  const meta::Regime regimes[] = {meta::Regime::mtl, meta::Regime::mtl_ft, meta::Regime::maml, meta::Regime::sml};
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < d.cfg.seeds; ++i) seeds.push_back(1 + i);
  const auto result = meta::run_experiment(d.corpus, d.hp, d.cfg, regimes, seeds);
  const double runtime = seconds_since(t0);

  std::size_t step_ok = 0;
  std::map<std::string, double> ppl_sum;
  std::map<std::string, std::size_t> ppl_n;
  for (const auto& s : result.seeds) {
    std::map<std::string, double> steps;
    std::map<std::string, std::size_t> n;
    for (const auto& r : s.rows) {
      steps[r.regime] += static_cast<double>(r.ft_step);
      ++n[r.regime];
      ppl_sum[r.regime] += r.ppl;
      ++ppl_n[r.regime];
    }
    for (auto& [k, v] : steps) v /= static_cast<double>(n[k]);
    const bool ok = steps["SML"] <= steps["MAML"] && steps["MAML"] < steps["MTL+FT"];
    step_ok += ok;
    detail("seed " + std::to_string(s.seed) + " mean FT step: SML " + fmt(steps["SML"], 1) + ", MAML " +
           fmt(steps["MAML"], 1) + ", MTL+FT " + fmt(steps["MTL+FT"], 1) + (ok ? "" : "  (order violated)"));
  }
  auto mean_ppl = [&](const std::string& r) { return ppl_sum[r] / static_cast<double>(ppl_n[r]); };
  const double sml = mean_ppl("SML"), maml = mean_ppl("MAML"), ft = mean_ppl("MTL+FT");
  detail("mean test perplexity: SML " + fmt(sml) + ", MAML " + fmt(maml) + ", MTL+FT " + fmt(ft) + ", MTL " +
         fmt(mean_ppl("MTL")));
  detail("FT step order held in " + std::to_string(step_ok) + " of " + std::to_string(seeds.size()) +
         " seeds; runtime " + fmt(runtime, 1) + " s");
  const bool ppl_ok = sml <= maml && maml <= ft;
  verdict(5, step_ok >= 4 && ppl_ok && runtime < 1800,
          "regime ordering: FT step SML <= MAML < MTL+FT in >= 4/5 seeds, perplexity SML <= MAML <= MTL+FT, < 30 min");

  std::size_t contrast_ok = 0;
  for (const auto& s : result.seeds) {
    const auto c = eval::family_contrast(s.heatmap, s.heatmap_families);
    const bool ok = c.within > c.cross;
    contrast_ok += ok;
    detail("seed " + std::to_string(s.seed) + " self-attention: within-family " + fmt(c.within, 4) +
           ", cross-family " + fmt(c.cross, 4));
  }
  verdict(6, contrast_ok >= 4, "structure: within-family attention exceeds cross-family in >= 4/5 seeds (" +
                                   std::to_string(contrast_ok) + "/" + std::to_string(seeds.size()) + ")");
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void determinism_criterion() {
  const auto dir = std::filesystem::temp_directory_path() / "sml_acceptance_determinism";
  std::filesystem::create_directories(dir);
  auto spec = data::SyntheticSpec::defaults();
  spec.train_examples = 40;
  spec.target_examples = 30;
  spec.partition = {10, 5, 10};
  std::vector<std::string> corpora, results;
  for (int run = 0; run < 2; ++run) {
    Rng gen = meta::derive_rng(7, 0);
    auto syn = data::synthesize(spec, gen);
    const auto path = dir / ("corpus" + std::to_string(run) + ".tsv");
    data::write_corpus(path, syn.examples);
    corpora.push_back(file_bytes(path));

    Rng split = meta::derive_rng(7, 0);
    auto corpus = meta::encode_corpus(data::partition_tasks(syn.examples, spec.partition, syn.roles, split), syn.vocab);
    model::HyperParams hp;
    hp.vocab_size = syn.vocab.size();
    hp.word_dim = hp.hidden = 8;
    hp.sf_dim = 4;
    meta::MetaConfig cfg;
    cfg.minibatch = 4;
    cfg.epochs = 2;
    cfg.lr_decay_start_epoch = 1;
    cfg.iters_per_epoch = 4;
    cfg.max_finetune_steps = 8;
    cfg.eval_every = 2;
    cfg.select_adapt_steps = 2;
    const meta::Regime regimes[] = {meta::Regime::mtl, meta::Regime::mtl_ft, meta::Regime::maml, meta::Regime::sml};
    const std::uint64_t seeds[] = {1, 2};
    // the second run spreads seeds over threads
    const auto r = meta::run_experiment(corpus, hp, cfg, regimes, seeds, run == 1);
    const auto rows = r.rows();
    results.push_back(meta::results_csv(rows) + meta::summary_csv(rows));
  }
  std::filesystem::remove_all(dir);
  const CaseRun cases = run_cases({"experiments are deterministic and produce one row per regime and task",
                                   "training reports, determinism and adaptation"});
  detail("corpus bytes identical: " + std::string(corpora[0] == corpora[1] ? "yes" : "no") +
         "; result CSV bytes identical: " + std::string(results[0] == results[1] ? "yes" : "no"));
  verdict(8, corpora[0] == corpora[1] && results[0] == results[1] && cases.ok,
          "determinism: reruns give byte-identical corpus and result CSVs");
}

// An exception fails every criterion the step covers.
void guarded(std::initializer_list<int> ids, void (*step)()) {
  try {
    step();
  } catch (const std::exception& e) {
    for (int id : ids) verdict(id, false, std::string("aborted: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  bool skip_experiment = false;
  std::vector<int> allowed;  // criteria whose failure does not fail the exit status
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--skip-experiment") == 0) {
      skip_experiment = true;
    } else if (std::strcmp(argv[i], "--allow-fail") == 0 && i + 1 < argc) {
      allowed.push_back(std::atoi(argv[++i]));
    } else {
      std::fprintf(stderr, "usage: %s [--skip-experiment] [--allow-fail N]...\n", argv[0]);
      return 1;
    }
  }

  unit_criterion(1, "gradient fidelity: analytic vs central differences, relative error < 1e-3, < 60 s",
                 {"every primitive matches central differences", "broadcast and layout ops match central differences",
                  "teacher-forced loss gradient matches central differences",
                  "gate gradients match central differences"},
                 60);
  unit_criterion(2, "oracle equivalence: decode_step, task_representation, parameter_gate within 1e-6, beam exact",
                 {"decode_step matches a straight-line recomputation", "task representation matches a hand recomputation",
                  "parameter gate matches a hand recomputation", "unpruned beam search equals exhaustive enumeration",
                  "model beam search with a wide beam equals enumeration over the model"});
  unit_criterion(3, "first-order meta-gradient equals the query gradient at adapted parameters (< 1e-8)",
                 {"first-order meta-gradient equals the query gradient at the adapted point",
                  "meta-gradient on the seq2seq model matches the query gradient at adapted parameters"});
  unit_criterion(4, "saturated gates: sml updates match maml within 1e-6 over 50 iterations",
                 {"saturated gates make sml updates match maml updates"});
  if (skip_experiment) {
    std::printf("SKIP 5: regime ordering (--skip-experiment)\nSKIP 6: structure diagnostic (--skip-experiment)\n");
  } else {
    guarded({5, 6}, regime_criteria);
  }
  unit_criterion(7, "metric sanity: BLEU-1 of identical pairs is 1, uniform perplexity within 5% of V, Distinct cases",
                 {"bleu", "distinct-n", "perplexity of a uniform model is the vocabulary size"});
  guarded({8}, determinism_criterion);
  int blocking = 0;
  for (int id : failed) {
    if (std::find(allowed.begin(), allowed.end(), id) != allowed.end()) {
      std::printf("note: criterion %d failed and is tolerated by --allow-fail\n", id);
    } else {
      ++blocking;
    }
  }
  return blocking == 0 ? 0 : 1;
}
