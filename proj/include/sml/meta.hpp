// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sml/config.hpp"
#include "sml/data.hpp"
#include "sml/eval.hpp"
#include "sml/model.hpp"
#include "sml/param_store.hpp"
#include "sml/structure.hpp"

/// Training regimes: multi-task pooling (MTL), first-order MAML, and MAML
/// with structure-aware initialization (SML); plus target-task adaptation.
namespace sml::meta {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MetaConfig {
  Real alpha = 1;  // inner-loop step size
  Real beta = 1;   // meta step size (also the MTL learning rate)
  std::size_t tasks_per_meta_batch = 3;
  std::size_t inner_steps = 1;
  std::size_t minibatch = 16;
  std::size_t epochs = 8;
  std::size_t lr_decay_start_epoch = 3;
  Real clip_train = 3;
  Real clip_finetune = 1;
  Real finetune_lr = 0.1;
  std::size_t eval_every = 10;
  std::size_t patience = 5;
  std::size_t seeds = 5;
  std::size_t max_finetune_steps = 300;
  std::size_t iters_per_epoch = 0;     // 0: one pass over the training examples
  std::size_t select_adapt_steps = 10;  // adaptation steps before meta-val perplexity
  std::size_t eval_batch = 64;
  // Relative drop in validation perplexity that counts as progress during
  // adaptation; FT step is the first evaluation within this margin of the best.
  Real min_improvement = 0.01;

  static MetaConfig desk();
  static MetaConfig paper();
  // Reads `meta.*` keys over the profile defaults.
  static MetaConfig from_config(const KeyValueConfig& config, const MetaConfig& base);
  void validate() const;
};

/// lr for a 1-based epoch: halves every epoch after `decay_start`.
Real scheduled_lr(Real initial, std::size_t epoch, std::size_t decay_start);

// ---------------------------------------------------------------------------
// Model-agnostic pieces

using LossFn = std::function<Tensor(const ParamStore&)>;
// Maps base parameters to a task's initialization; recorded on the graph.
using Modulate = std::function<ParamStore(const ParamStore&)>;

/// `steps` SGD updates from `start` (never mutated) with per-step clipping
/// (clip <= 0 disables). Returns a fresh store of leaves; first_loss receives
/// the loss before the first update.
ParamStore inner_adapt(const ParamStore& start, const LossFn& loss, Real alpha, std::size_t steps, Real clip,
                       Real* first_loss = nullptr);

struct TaskObjective {
  LossFn train;       // loss on D, drives the inner loop
  LossFn val;         // loss on D', evaluated after adaptation
  Modulate modulate;  // empty: the task starts from the base parameters
};

struct TaskGradient {
  Real train_loss = 0;
  Real val_loss = 0;
};

/// Adds one task's first-order meta-gradient to the gradient buffers of
/// `theta`: the D'-loss gradient taken at the adapted parameters, routed back
/// through `modulate` with the inner update held constant.
TaskGradient accumulate_meta_gradient(const ParamStore& theta, const TaskObjective& task, Real alpha,
                                      std::size_t inner_steps, Real inner_clip);

struct MetaStepResult {
  Real train_loss = 0;  // mean over tasks
  Real val_loss = 0;    // mean over tasks
  Real grad_norm = 0;   // before clipping
};

/// One meta-update: theta <- theta - beta * clip(sum of task meta-gradients).
MetaStepResult meta_step(ParamStore& theta, std::span<const TaskObjective> tasks, Real alpha, Real beta,
                         std::size_t inner_steps, Real inner_clip, Real outer_clip);

// ---------------------------------------------------------------------------
// Seq2seq training

enum class Mode { maml, sml };
enum class Regime { mtl, mtl_ft, maml, sml };

Regime parse_regime(const std::string& name);  // MTL, MTL+FT, MAML, SML (case-insensitive)
std::string regime_name(Regime regime);

/// Parameters plus the task labels of the condition-table rows.
struct ModelState {
  model::HyperParams hp;
  ParamStore params;  // model entries, sf.table, and gate.* when gated
  std::vector<data::TaskSpec> tasks;

  bool gated() const { return structure::has_gates(params); }
};

ModelState make_model(const model::HyperParams& hp, std::vector<data::TaskSpec> tasks, bool gated, Rng& rng);

/// Store the decoder reads for condition-table row k: gated in SML, the base
/// parameters otherwise.
ParamStore effective_params(const ModelState& state, const ParamStore& params, const Tensor& table, std::size_t k);

struct EncodedTarget {
  data::TaskSpec spec;
  std::vector<data::EncodedExample> train, val, test;
};

struct EncodedCorpus {
  std::vector<data::TaskSpec> train_specs;
  std::vector<std::vector<data::EncodedExample>> train;  // task index == row
  std::vector<EncodedTarget> val;
  std::vector<EncodedTarget> test;
};

EncodedCorpus encode_corpus(const data::Corpus& corpus, const data::Vocab& vocab);

struct LogRecord {
  std::string phase;
  std::size_t step = 0;
  Real loss = 0;
  Real lr = 0;
  std::string task;
};

struct Callbacks {
  std::function<void(std::size_t iteration, const ParamStore& params)> on_iteration;
  std::function<void(const LogRecord&)> log;
};

struct TrainReport {
  std::vector<Real> lr_trace;  // per iteration
  std::vector<Real> losses;    // per iteration
  std::vector<std::pair<std::size_t, Real>> selection;  // (epoch, validation perplexity)
  std::size_t best_epoch = 0;
  Real best_val_ppl = 0;
};

std::size_t iterations_per_epoch(const EncodedCorpus& corpus, const MetaConfig& cfg);

/// Algorithm: sample tasks, sample disjoint D and D' per task, adapt on D from
/// the (gated, in sml mode) initialization, meta-update with the D'-loss
/// gradient. Keeps the parameters with the best meta-validation perplexity
/// after a short adaptation on each meta-val task.
TrainReport meta_train(ModelState& state, const EncodedCorpus& corpus, const MetaConfig& cfg, Mode mode, Rng& rng,
                       const Callbacks& callbacks = {});

/// Minibatch SGD over train tasks pooled with the meta-val adaptation splits.
/// state.tasks must list the train tasks followed by the meta-val tasks.
TrainReport mtl_train(ModelState& state, const EncodedCorpus& corpus, const MetaConfig& cfg, Rng& rng,
                      const Callbacks& callbacks = {});

// ---------------------------------------------------------------------------
// Adaptation

struct AdaptReport {
  std::size_t ft_step = 0;
  Real best_val_ppl = 0;
  std::map<std::string, Real> test_metrics;
  std::vector<std::pair<std::size_t, Real>> curve;  // (step, val perplexity)
};

struct AdaptResult {
  AdaptReport report;
  ModelState adapted;  // best parameters, table extended with the new task
  std::vector<eval::Sequence> generations;
};

/// Extends the condition table with a new row, then SGD on the target's train
/// split (gated each step in sml mode); validation perplexity every
/// eval_every steps, stopping after `patience` evaluations without a relative
/// improvement of min_improvement, or at max_steps. Test metrics use the
/// checkpoint with the lowest validation perplexity.
AdaptResult finetune(const ModelState& state, const EncodedTarget& target, const MetaConfig& cfg, Mode mode,
                     std::size_t max_steps, Rng& rng, bool with_test = true, const Callbacks& callbacks = {});

// ---------------------------------------------------------------------------
// Experiments

struct ResultRow {
  std::string regime;
  std::string task_id;
  std::uint64_t seed = 0;
  std::size_t ft_step = 0;
  Real ppl = 0, bleu1 = 0, bleu2 = 0, dist1 = 0, dist2 = 0;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::vector<ResultRow> rows;
  std::vector<std::vector<Real>> heatmap;  // SML only
  std::vector<std::string> heatmap_labels;
  std::vector<std::string> heatmap_families;
};

struct ExperimentResult {
  std::vector<SeedOutcome> seeds;
  std::vector<ResultRow> rows() const;
};

/// Derived generator for (seed, stream).
Rng derive_rng(std::uint64_t seed, std::uint64_t stream);

ExperimentResult run_experiment(const EncodedCorpus& corpus, const model::HyperParams& hp, const MetaConfig& cfg,
                                std::span<const Regime> regimes, std::span<const std::uint64_t> seeds,
                                bool parallel_seeds = false);

std::string results_csv(std::span<const ResultRow> rows);
/// mean and standard deviation per (regime, task) over seeds.
std::string summary_csv(std::span<const ResultRow> rows);

}  // namespace sml::meta
