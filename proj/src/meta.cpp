// SPDX-License-Identifier: Apache-2.0
#include "sml/meta.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>

#include "sml/graph.hpp"

namespace sml::meta {

MetaConfig MetaConfig::desk() {
  MetaConfig c;
  c.iters_per_epoch = 100;
  return c;
}

MetaConfig MetaConfig::paper() {
  MetaConfig c;
  c.minibatch = 64;
  c.iters_per_epoch = 0;
  c.min_improvement = 0;
  return c;
}

MetaConfig MetaConfig::from_config(const KeyValueConfig& c, const MetaConfig& b) {
  MetaConfig m = b;
  auto sz = [&](const char* key, std::size_t v) { return static_cast<std::size_t>(c.get_int(key, static_cast<long long>(v))); };
  auto real = [&](const char* key, Real v) { return static_cast<Real>(c.get_double(key, v)); };
  m.alpha = real("meta.alpha", b.alpha);
  m.beta = real("meta.beta", b.beta);
  m.tasks_per_meta_batch = sz("meta.tasks_per_meta_batch", b.tasks_per_meta_batch);
  m.inner_steps = sz("meta.inner_steps", b.inner_steps);
  m.minibatch = sz("meta.minibatch", b.minibatch);
  m.epochs = sz("meta.epochs", b.epochs);
  m.lr_decay_start_epoch = sz("meta.lr_decay_start_epoch", b.lr_decay_start_epoch);
  m.clip_train = real("meta.clip_train", b.clip_train);
  m.clip_finetune = real("meta.clip_finetune", b.clip_finetune);
  m.finetune_lr = real("meta.finetune_lr", b.finetune_lr);
  m.eval_every = sz("meta.eval_every", b.eval_every);
  m.patience = sz("meta.patience", b.patience);
  m.seeds = sz("meta.seeds", b.seeds);
  m.max_finetune_steps = sz("meta.max_finetune_steps", b.max_finetune_steps);
  m.iters_per_epoch = sz("meta.iters_per_epoch", b.iters_per_epoch);
  m.select_adapt_steps = sz("meta.select_adapt_steps", b.select_adapt_steps);
  m.eval_batch = sz("meta.eval_batch", b.eval_batch);
  m.min_improvement = real("meta.min_improvement", b.min_improvement);
  return m;
}

void MetaConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("invalid meta config: field '" + field + "' " + why);
  };
  auto nonneg = [&](Real v, const char* f) {
    if (!std::isfinite(v) || v < 0) fail(f, "must be a finite value >= 0");
  };
  auto positive = [&](std::size_t v, const char* f) {
    if (v == 0) fail(f, "must be >= 1");
  };
  nonneg(alpha, "alpha");
  nonneg(beta, "beta");
  nonneg(min_improvement, "min_improvement");
  if (min_improvement >= 1) fail("min_improvement", "must be < 1");
  nonneg(finetune_lr, "finetune_lr");
  if (!(clip_train > 0)) fail("clip_train", "must be > 0");
  if (!(clip_finetune > 0)) fail("clip_finetune", "must be > 0");
  positive(tasks_per_meta_batch, "tasks_per_meta_batch");
  positive(inner_steps, "inner_steps");
  positive(minibatch, "minibatch");
  positive(epochs, "epochs");
  positive(eval_every, "eval_every");
  positive(patience, "patience");
  positive(seeds, "seeds");
  positive(eval_batch, "eval_batch");
  if (lr_decay_start_epoch >= epochs) fail("lr_decay_start_epoch", "must be smaller than epochs");
}

Real scheduled_lr(Real initial, std::size_t epoch, std::size_t decay_start) {
  if (epoch <= decay_start) return initial;
  return initial * static_cast<Real>(std::pow(0.5, static_cast<double>(epoch - decay_start)));
}

// ---------------------------------------------------------------------------

namespace {

void check_finite(Real v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what);
}

void clip_if(ParamStore& grads, Real clip) {
  if (clip > 0) clip_grad_norm(grads, clip);
}

// Detached deep copy.
ParamStore detached(const ParamStore& params) {
  ParamStore out;
  for (const auto& [name, t] : params) out.add(name, t.detach().clone());
  return out;
}

}  // namespace

ParamStore inner_adapt(const ParamStore& start, const LossFn& loss, Real alpha, std::size_t steps, Real clip,
                       Real* first_loss) {
  ParamStore current = detached(start);
  current.set_requires_grad(true);
  for (std::size_t s = 0; s < steps; ++s) {
    current.zero_grad();
    Graph graph;
    {
      GraphScope scope(graph);
      Tensor l = loss(current);
      check_finite(l.item(), "inner-loop loss");
      if (s == 0 && first_loss) *first_loss = l.item();
      graph.backward(l);
    }
    ParamStore grads = current.gradients();
    clip_if(grads, clip);
    sgd_step(current, grads, alpha);
  }
  current.clear_grad();
  return current;
}

TaskGradient accumulate_meta_gradient(const ParamStore& theta, const TaskObjective& task, Real alpha,
                                      std::size_t inner_steps, Real inner_clip) {
  TaskGradient out;
  ParamStore start;
  {
    NoGradScope no_grad;
    start = detached(task.modulate ? task.modulate(theta) : theta);
  }
  ParamStore adapted = inner_adapt(start, task.train, alpha, inner_steps, inner_clip, &out.train_loss);

  ParamStore at_adapted;
  {
    Graph graph;
    GraphScope scope(graph);
    Tensor l = task.val(adapted);
    out.val_loss = l.item();
    check_finite(out.val_loss, "meta validation loss");
    graph.backward(l);
    at_adapted = adapted.gradients();
  }

  // d/dtheta of sum_e <init_e(theta), G_e> routes G through the initialization.
  Graph graph;
  GraphScope scope(graph);
  ParamStore init = task.modulate ? task.modulate(theta) : theta;
  Tensor total;
  for (const auto& [name, t] : init) {
    if (!t.requires_grad()) continue;
    Tensor term = ops::sum(ops::mul(t, at_adapted.at(name)));
    total = total.defined() ? ops::add(total, term) : term;
  }
  if (total.defined() && graph.contains(total)) graph.backward(total);
  return out;
}

MetaStepResult meta_step(ParamStore& theta, std::span<const TaskObjective> tasks, Real alpha, Real beta,
                         std::size_t inner_steps, Real inner_clip, Real outer_clip) {
  if (tasks.empty()) throw std::invalid_argument("meta_step: no tasks");
  theta.zero_grad();
  MetaStepResult r;
  for (const auto& task : tasks) {
    TaskGradient g = accumulate_meta_gradient(theta, task, alpha, inner_steps, inner_clip);
    r.train_loss += g.train_loss;
    r.val_loss += g.val_loss;
  }
  r.train_loss /= static_cast<Real>(tasks.size());
  r.val_loss /= static_cast<Real>(tasks.size());
  ParamStore grads = theta.gradients();
  r.grad_norm = outer_clip > 0 ? clip_grad_norm(grads, outer_clip) : global_norm(grads);
  check_finite(r.grad_norm, "meta-gradient norm");
  sgd_step(theta, grads, beta);
  theta.zero_grad();
  return r;
}

// ---------------------------------------------------------------------------

Regime parse_regime(const std::string& name) {
  std::string n;
  for (char c : name) n += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (n == "MTL") return Regime::mtl;
  if (n == "MTL+FT" || n == "MTL_FT" || n == "MTLFT") return Regime::mtl_ft;
  if (n == "MAML") return Regime::maml;
  if (n == "SML") return Regime::sml;
  throw std::invalid_argument("unknown regime '" + name + "' (expected MTL, MTL+FT, MAML or SML)");
}

std::string regime_name(Regime r) {
  switch (r) {
    case Regime::mtl: return "MTL";
    case Regime::mtl_ft: return "MTL+FT";
    case Regime::maml: return "MAML";
    case Regime::sml: return "SML";
  }
  return "?";
}

ModelState make_model(const model::HyperParams& hp, std::vector<data::TaskSpec> tasks, bool gated, Rng& rng) {
  ModelState s;
  s.hp = hp;
  s.params = model::init_params(hp, tasks.size(), rng).store;
  if (gated) structure::init_gates(s.params, hp, rng);
  s.tasks = std::move(tasks);
  return s;
}

namespace {

ParamStore gate_for(const model::HyperParams& hp, const ParamStore& params, const Tensor& table, std::size_t k) {
  const auto names = model::decoder_parameter_names(hp);
  auto r = structure::task_representation(table, params.at(structure::kFuse), params.at(structure::kGate), k);
  const Tensor bias = params.contains(structure::kParamBias) ? params.at(structure::kParamBias) : Tensor{};
  return structure::parameter_gate(params, names, params.at(structure::kParam), r.refined, bias);
}

}  // namespace

ParamStore effective_params(const ModelState& state, const ParamStore& params, const Tensor& table, std::size_t k) {
  if (!state.gated()) return params;
  return gate_for(state.hp, params, table, k);
}

EncodedCorpus encode_corpus(const data::Corpus& corpus, const data::Vocab& vocab) {
  EncodedCorpus out;
  for (std::size_t k = 0; k < corpus.train.size(); ++k) {
    out.train_specs.push_back(corpus.train[k].spec);
    out.train.push_back(data::encode_examples(corpus.train[k].examples, vocab, static_cast<std::int32_t>(k)));
  }
  auto target = [&](const data::TargetTask& t) {
    return EncodedTarget{t.spec, data::encode_examples(t.train, vocab, 0), data::encode_examples(t.val, vocab, 0),
                         data::encode_examples(t.test, vocab, 0)};
  };
  for (const auto& t : corpus.val) out.val.push_back(target(t));
  for (const auto& t : corpus.test) out.test.push_back(target(t));
  return out;
}

std::size_t iterations_per_epoch(const EncodedCorpus& corpus, const MetaConfig& cfg) {
  if (cfg.iters_per_epoch > 0) return cfg.iters_per_epoch;
  std::size_t n = 0;
  for (const auto& t : corpus.train) n += t.size();
  const std::size_t per_iter = cfg.tasks_per_meta_batch * 2 * cfg.minibatch;
  return std::max<std::size_t>(1, (n + per_iter - 1) / per_iter);
}

namespace {

std::vector<std::size_t> sample_tasks(std::size_t K, std::size_t n, Rng& rng) {
  std::vector<std::size_t> out;
  if (K >= n) {
    std::vector<std::size_t> idx(K);
    for (std::size_t i = 0; i < K; ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, K - 1);
      std::swap(idx[i], idx[pick(rng)]);
      out.push_back(idx[i]);
    }
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, K - 1);
    for (std::size_t i = 0; i < n; ++i) out.push_back(pick(rng));
  }
  return out;
}

// Two disjoint minibatches from one task.
std::pair<data::Batch, data::Batch> sample_support_query(const std::vector<data::EncodedExample>& examples,
                                                         std::size_t m, Rng& rng) {
  const std::size_t N = examples.size();
  if (N < 2) throw data::DataError("meta-training task needs at least 2 examples");
  std::size_t a = m, b = m;
  if (N < 2 * m) {
    a = N / 2;
    b = N - a;
  }
  std::vector<std::size_t> idx(N);
  for (std::size_t i = 0; i < N; ++i) idx[i] = i;
  for (std::size_t i = 0; i < a + b; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, N - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::vector<const data::EncodedExample*> d, dq;
  for (std::size_t i = 0; i < a; ++i) d.push_back(&examples[idx[i]]);
  for (std::size_t i = a; i < a + b; ++i) dq.push_back(&examples[idx[i]]);
  return {data::make_batch(std::span<const data::EncodedExample* const>(d)),
          data::make_batch(std::span<const data::EncodedExample* const>(dq))};
}

LossFn batch_loss(const model::HyperParams& hp, const data::Batch* batch, Rng* rng) {
  return [&hp, batch, rng](const ParamStore& p) {
    Tensor sf = ops::embedding(p.at(model::kTaskTable), batch->tasks);
    return model::teacher_forced_loss(hp, p, *batch, sf, model::ForwardOptions{true, rng});
  };
}

std::vector<data::EncodedExample> with_task(std::span<const data::EncodedExample> xs, std::int32_t row) {
  std::vector<data::EncodedExample> out(xs.begin(), xs.end());
  for (auto& x : out) x.task = row;
  return out;
}

void emit(const Callbacks& cb, const char* phase, std::size_t step, Real loss, Real lr, const std::string& task = {}) {
  if (cb.log) cb.log(LogRecord{phase, step, loss, lr, task});
}

// Mean adapted validation perplexity over the meta-val tasks.
Real selection_perplexity(const ModelState& state, const EncodedCorpus& corpus, const MetaConfig& cfg, Mode mode,
                          Rng& rng) {
  double total = 0;
  for (const auto& t : corpus.val) {
    AdaptResult r = finetune(state, t, cfg, mode, cfg.select_adapt_steps, rng, false);
    total += r.report.best_val_ppl;
  }
  return static_cast<Real>(total / static_cast<double>(corpus.val.size()));
}

}  // namespace

TrainReport meta_train(ModelState& state, const EncodedCorpus& corpus, const MetaConfig& cfg, Mode mode, Rng& rng,
                       const Callbacks& cb) {
  cfg.validate();
  const std::size_t K = corpus.train.size();
  if (K == 0) throw std::invalid_argument("meta_train: no training tasks");
  if (mode == Mode::sml && !state.gated()) throw std::invalid_argument("meta_train: sml mode needs gate parameters");
  if (state.params.at(model::kTaskTable).rows() != K) {
    throw std::invalid_argument("meta_train: condition table has " +
                                std::to_string(state.params.at(model::kTaskTable).rows()) + " rows for " +
                                std::to_string(K) + " training tasks");
  }
  const auto& hp = state.hp;
  const auto names = model::decoder_parameter_names(hp);
  ParamStore& theta = state.params;
  theta.set_requires_grad(true);
  const std::size_t per_epoch = iterations_per_epoch(corpus, cfg);
  Rng select_rng(rng());

  TrainReport report;
  ParamStore best = theta.snapshot();
  report.best_val_ppl = std::numeric_limits<Real>::infinity();
  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const Real beta = scheduled_lr(cfg.beta, epoch, cfg.lr_decay_start_epoch);
    const Real alpha = scheduled_lr(cfg.alpha, epoch, cfg.lr_decay_start_epoch);
    for (std::size_t it = 0; it < per_epoch; ++it, ++iteration) {
      const auto picked = sample_tasks(K, cfg.tasks_per_meta_batch, rng);
      std::vector<std::pair<data::Batch, data::Batch>> batches;
      batches.reserve(picked.size());
      std::vector<TaskObjective> objectives;
      for (std::size_t k : picked) {
        batches.push_back(sample_support_query(corpus.train[k], cfg.minibatch, rng));
        TaskObjective obj;
        obj.train = batch_loss(hp, &batches.back().first, &rng);
        obj.val = batch_loss(hp, &batches.back().second, &rng);
        if (mode == Mode::sml) {
          obj.modulate = [&hp, k](const ParamStore& p) { return gate_for(hp, p, p.at(model::kTaskTable), k); };
        }
        objectives.push_back(std::move(obj));
      }
      MetaStepResult r = meta_step(theta, objectives, alpha, beta, cfg.inner_steps, cfg.clip_train, cfg.clip_train);
      report.lr_trace.push_back(beta);
      report.losses.push_back(r.val_loss);
      emit(cb, mode == Mode::sml ? "sml" : "maml", iteration, r.val_loss, beta);
      if (cb.on_iteration) cb.on_iteration(iteration, theta);
    }
    if (!corpus.val.empty()) {
      const Real ppl = selection_perplexity(state, corpus, cfg, mode == Mode::sml ? Mode::sml : Mode::maml, select_rng);
      report.selection.emplace_back(epoch, ppl);
      emit(cb, "select", epoch, ppl, beta);
      if (ppl < report.best_val_ppl) {
        report.best_val_ppl = ppl;
        report.best_epoch = epoch;
        best = theta.snapshot();
      }
    } else {
      report.best_epoch = epoch;
      best = theta.snapshot();
    }
  }
  theta.restore(best);
  theta.clear_grad();
  return report;
}

TrainReport mtl_train(ModelState& state, const EncodedCorpus& corpus, const MetaConfig& cfg, Rng& rng,
                      const Callbacks& cb) {
  cfg.validate();
  const std::size_t K = corpus.train.size(), V = corpus.val.size();
  if (state.params.at(model::kTaskTable).rows() != K + V) {
    throw std::invalid_argument("mtl_train: condition table needs one row per train and meta-val task");
  }
  std::vector<data::EncodedExample> pool, val_pool;
  for (const auto& t : corpus.train) pool.insert(pool.end(), t.begin(), t.end());
  for (std::size_t v = 0; v < V; ++v) {
    const auto row = static_cast<std::int32_t>(K + v);
    auto tr = with_task(corpus.val[v].train, row);
    auto va = with_task(corpus.val[v].val, row);
    pool.insert(pool.end(), tr.begin(), tr.end());
    val_pool.insert(val_pool.end(), va.begin(), va.end());
  }
  if (pool.empty()) throw std::invalid_argument("mtl_train: empty training pool");

  const auto& hp = state.hp;
  ParamStore& theta = state.params;
  theta.set_requires_grad(true);
  const std::size_t per_epoch = iterations_per_epoch(corpus, cfg);
  data::BatchStream stream(pool, cfg.minibatch * cfg.tasks_per_meta_batch, Rng(rng()));

  TrainReport report;
  ParamStore best = theta.snapshot();
  report.best_val_ppl = std::numeric_limits<Real>::infinity();
  std::size_t iteration = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const Real lr = scheduled_lr(cfg.beta, epoch, cfg.lr_decay_start_epoch);
    for (std::size_t it = 0; it < per_epoch; ++it, ++iteration) {
      data::Batch batch = stream.next();
      theta.zero_grad();
      Graph graph;
      Real loss_value = 0;
      {
        GraphScope scope(graph);
        Tensor loss = batch_loss(hp, &batch, &rng)(theta);
        loss_value = loss.item();
        check_finite(loss_value, "training loss");
        graph.backward(loss);
      }
      ParamStore grads = theta.gradients();
      clip_if(grads, cfg.clip_train);
      sgd_step(theta, grads, lr);
      report.lr_trace.push_back(lr);
      report.losses.push_back(loss_value);
      emit(cb, "mtl", iteration, loss_value, lr);
      if (cb.on_iteration) cb.on_iteration(iteration, theta);
    }
    if (!val_pool.empty()) {
      const Real ppl = eval::perplexity(hp, theta, theta.at(model::kTaskTable), val_pool, cfg.eval_batch);
      report.selection.emplace_back(epoch, ppl);
      emit(cb, "select", epoch, ppl, lr);
      if (ppl < report.best_val_ppl) {
        report.best_val_ppl = ppl;
        report.best_epoch = epoch;
        best = theta.snapshot();
      }
    } else {
      report.best_epoch = epoch;
      best = theta.snapshot();
    }
  }
  theta.restore(best);
  theta.zero_grad();
  theta.clear_grad();
  return report;
}

// ---------------------------------------------------------------------------

AdaptResult finetune(const ModelState& state, const EncodedTarget& target, const MetaConfig& cfg, Mode mode,
                     std::size_t max_steps, Rng& rng, bool with_test, const Callbacks& cb) {
  if (target.train.empty()) throw data::DataError("empty adaptation split for task " + target.spec.label());
  if (target.val.empty()) throw data::DataError("empty validation split for task " + target.spec.label());
  if (with_test && target.test.empty()) throw data::DataError("empty test split for task " + target.spec.label());
  const bool gated = mode == Mode::sml;
  if (gated && !state.gated()) throw std::invalid_argument("finetune: sml mode needs gate parameters");
  const auto& hp = state.hp;

  AdaptResult result;
  ModelState& work = result.adapted;
  work.hp = hp;
  work.params = state.params.snapshot();
  work.tasks = state.tasks;
  work.tasks.push_back(target.spec);
  work.params.set_requires_grad(true);
  work.params.at(model::kTaskTable).set_requires_grad(false);
  if (!gated && work.gated()) {
    for (const auto& n : {structure::kFuse, structure::kGate, structure::kParam, structure::kParamBias})
      if (work.params.contains(n)) work.params.at(n).set_requires_grad(false);
  }

  structure::TaskEmbeddingTable table = structure::extend_for_adaptation(work.params.at(model::kTaskTable), rng);
  const std::size_t row = table.rows() - 1;
  const auto train = with_task(target.train, static_cast<std::int32_t>(row));
  const auto val = with_task(target.val, static_cast<std::int32_t>(row));

  ParamStore trainable;
  for (const auto& [name, t] : work.params)
    if (t.requires_grad()) trainable.add(name, t);
  trainable.add("sf.new", table.trainable);

  auto effective = [&](const Tensor& S) { return gated ? gate_for(hp, work.params, S, row) : work.params; };
  auto validate = [&] {
    NoGradScope no_grad;
    Tensor S = table.matrix();
    return eval::perplexity(hp, effective(S), S, val, cfg.eval_batch);
  };

  AdaptReport& rep = result.report;
  rep.best_val_ppl = validate();
  rep.curve.emplace_back(0, rep.best_val_ppl);
  ParamStore best = trainable.snapshot();
  Real reference = rep.best_val_ppl;  // last evaluation that counted as progress
  std::size_t stale = 0;
  if (max_steps > 0) {
    data::BatchStream stream(train, cfg.minibatch, Rng(rng()));
    for (std::size_t step = 1; step <= max_steps; ++step) {
      data::Batch batch = stream.next();
      trainable.zero_grad();
      Graph graph;
      Real loss_value = 0;
      {
        GraphScope scope(graph);
        Tensor S = table.matrix();
        Tensor sf = ops::embedding(S, batch.tasks);
        Tensor loss = model::teacher_forced_loss(hp, effective(S), batch, sf, model::ForwardOptions{true, &rng});
        loss_value = loss.item();
        check_finite(loss_value, "adaptation loss");
        graph.backward(loss);
      }
      ParamStore grads = trainable.gradients();
      clip_if(grads, cfg.clip_finetune);
      sgd_step(trainable, grads, cfg.finetune_lr);
      emit(cb, "adapt", step, loss_value, cfg.finetune_lr, target.spec.label());
      if (step % cfg.eval_every == 0) {
        const Real ppl = validate();
        rep.curve.emplace_back(step, ppl);
        emit(cb, "adapt_val", step, ppl, cfg.finetune_lr, target.spec.label());
        if (ppl < rep.best_val_ppl) {
          rep.best_val_ppl = ppl;
          best = trainable.snapshot();
        }
        if (ppl < reference * (1 - cfg.min_improvement)) {
          reference = ppl;
          stale = 0;
        } else if (++stale >= cfg.patience) {
          break;
        }
      }
    }
  }
  // First evaluation within the tolerance of the best perplexity.
  for (const auto& [step, ppl] : rep.curve) {
    if (ppl <= rep.best_val_ppl * (1 + cfg.min_improvement)) {
      rep.ft_step = step;
      break;
    }
  }
  trainable.restore(best);
  trainable.clear_grad();

  Tensor S = table.matrix().detach();
  if (with_test) {
    const auto test = with_task(target.test, static_cast<std::int32_t>(row));
    ParamStore eff;
    {
      NoGradScope no_grad;
      eff = effective(S);
    }
    eval::Generation g = eval::evaluate(hp, eff, S, test);
    result.generations = std::move(g.outputs);
    rep.test_metrics = {{"ppl", g.report.ppl},
                        {"bleu1", g.report.bleu1},
                        {"bleu2", g.report.bleu2},
                        {"dist1", g.report.dist1},
                        {"dist2", g.report.dist2}};
  }
  work.params.set(model::kTaskTable, S.clone());
  work.params.set_requires_grad(true);
  return result;
}

// ---------------------------------------------------------------------------

Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

std::vector<ResultRow> ExperimentResult::rows() const {
  std::vector<ResultRow> out;
  for (const auto& s : seeds) out.insert(out.end(), s.rows.begin(), s.rows.end());
  return out;
}

namespace {

enum Stream : std::uint64_t { kInit = 1, kMtl = 2, kMeta = 3, kAdapt = 100 };

ResultRow make_row(Regime r, const EncodedTarget& t, std::uint64_t seed, const AdaptResult& a) {
  ResultRow row;
  row.regime = regime_name(r);
  row.task_id = t.spec.label();
  row.seed = seed;
  row.ft_step = a.report.ft_step;
  const auto& m = a.report.test_metrics;
  row.ppl = m.at("ppl");
  row.bleu1 = m.at("bleu1");
  row.bleu2 = m.at("bleu2");
  row.dist1 = m.at("dist1");
  row.dist2 = m.at("dist2");
  return row;
}

SeedOutcome run_seed(const EncodedCorpus& corpus, const model::HyperParams& hp, const MetaConfig& cfg,
                     std::span<const Regime> regimes, std::uint64_t seed) {
  SeedOutcome out;
  out.seed = seed;
  auto wants = [&](Regime r) { return std::find(regimes.begin(), regimes.end(), r) != regimes.end(); };

  auto adapt_all = [&](const ModelState& m, Regime r, Mode mode, std::size_t steps) {
    for (std::size_t j = 0; j < corpus.test.size(); ++j) {
      Rng arng = derive_rng(seed, kAdapt + j);
      AdaptResult a = finetune(m, corpus.test[j], cfg, mode, steps, arng);
      out.rows.push_back(make_row(r, corpus.test[j], seed, a));
    }
  };

  for (Regime r : regimes) {
    if (r == Regime::mtl_ft && wants(Regime::mtl)) continue;  // trained together with MTL
    if (r == Regime::mtl || r == Regime::mtl_ft) {
      auto tasks = corpus.train_specs;
      for (const auto& v : corpus.val) tasks.push_back(v.spec);
      Rng init = derive_rng(seed, kInit);
      ModelState m = make_model(hp, tasks, false, init);
      Rng trng = derive_rng(seed, kMtl);
      mtl_train(m, corpus, cfg, trng);
      if (wants(Regime::mtl)) adapt_all(m, Regime::mtl, Mode::maml, 0);
      if (wants(Regime::mtl_ft)) adapt_all(m, Regime::mtl_ft, Mode::maml, cfg.max_finetune_steps);
    } else {
      const bool sml = r == Regime::sml;
      Rng init = derive_rng(seed, kInit);
      ModelState m = make_model(hp, corpus.train_specs, sml, init);
      Rng trng = derive_rng(seed, kMeta);
      meta_train(m, corpus, cfg, sml ? Mode::sml : Mode::maml, trng);
      adapt_all(m, r, sml ? Mode::sml : Mode::maml, cfg.max_finetune_steps);
      if (sml) {
        out.heatmap = structure::attention_matrix(m.params.at(model::kTaskTable));
        for (const auto& t : m.tasks) {
          out.heatmap_labels.push_back(t.query_fn + " | " + t.response_fn);
          out.heatmap_families.push_back(t.family);
        }
      }
    }
  }
  return out;
}

}  // namespace

ExperimentResult run_experiment(const EncodedCorpus& corpus, const model::HyperParams& hp, const MetaConfig& cfg,
                                std::span<const Regime> regimes, std::span<const std::uint64_t> seeds,
                                bool parallel_seeds) {
  if (regimes.empty()) throw std::invalid_argument("run_experiment: no regimes");
  if (seeds.empty()) throw std::invalid_argument("run_experiment: no seeds");
  if (corpus.test.empty()) throw std::invalid_argument("run_experiment: no meta-test tasks");
  cfg.validate();
  ExperimentResult result;
  result.seeds.resize(seeds.size());
  std::vector<std::exception_ptr> errors(seeds.size());
  const auto n = static_cast<std::ptrdiff_t>(seeds.size());
#pragma omp parallel for schedule(dynamic, 1) if (parallel_seeds)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      result.seeds[static_cast<std::size_t>(i)] = run_seed(corpus, hp, cfg, regimes, seeds[static_cast<std::size_t>(i)]);
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return result;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string results_csv(std::span<const ResultRow> rows) {
  std::string out = "regime,task_id,seed,ft_step,ppl,bleu1,bleu2,dist1,dist2\n";
  for (const auto& r : rows) {
    out += csv_field(r.regime) + "," + csv_field(r.task_id) + "," + std::to_string(r.seed) + "," +
           std::to_string(r.ft_step) + "," + fixed(r.ppl) + "," + fixed(r.bleu1) + "," + fixed(r.bleu2) + "," +
           fixed(r.dist1) + "," + fixed(r.dist2) + "\n";
  }
  return out;
}

std::string summary_csv(std::span<const ResultRow> rows) {
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) {
    auto key = std::make_pair(r.regime, r.task_id);
    if (!groups.count(key)) keys.push_back(key);
    groups[key].push_back(&r);
  }
  std::string out = "regime,task_id,n_seeds";
  const char* metrics[] = {"ft_step", "ppl", "bleu1", "bleu2", "dist1", "dist2"};
  for (const char* m : metrics) out += std::string(",") + m + "_mean," + m + "_std";
  out += "\n";
  for (const auto& key : keys) {
    const auto& g = groups[key];
    out += csv_field(key.first) + "," + csv_field(key.second) + "," + std::to_string(g.size());
    for (int m = 0; m < 6; ++m) {
      auto value = [m](const ResultRow* r) -> double {
        switch (m) {
          case 0: return static_cast<double>(r->ft_step);
          case 1: return r->ppl;
          case 2: return r->bleu1;
          case 3: return r->bleu2;
          case 4: return r->dist1;
          default: return r->dist2;
        }
      };
      double mean = 0;
      for (auto* r : g) mean += value(r);
      mean /= static_cast<double>(g.size());
      double var = 0;
      for (auto* r : g) var += (value(r) - mean) * (value(r) - mean);
      const double sd = g.size() > 1 ? std::sqrt(var / static_cast<double>(g.size() - 1)) : 0.0;
      out += "," + fixed(mean) + "," + fixed(sd);
    }
    out += "\n";
  }
  return out;
}

}  // namespace sml::meta
