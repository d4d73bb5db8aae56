// SPDX-License-Identifier: Apache-2.0
#include "sml/data.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <sstream>

namespace sml::data {

TaskSpec TaskSpec::from_label(const std::string& label) {
  const auto bar = label.find('|');
  if (bar == std::string::npos || bar == 0 || bar + 1 == label.size()) {
    throw DataError("task label '" + label + "' is not of the form query_fn|response_fn");
  }
  return TaskSpec{label.substr(0, bar), label.substr(bar + 1), ""};
}

// ---------------------------------------------------------------------------
// Ingestion

namespace {

Tokens tokenize(const std::string& text) {
  Tokens out;
  std::istringstream in(text);
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

}  // namespace

CorpusReader::CorpusReader(const std::filesystem::path& path, std::size_t max_tokens)
    : in_(path), max_tokens_(max_tokens) {
  if (!in_) throw DataError("cannot read corpus file " + path.string());
}

std::optional<Example> CorpusReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split(line, '\t');
    auto bad = [&](const std::string& why) {
      ++report_.malformed;
      report_.problems.push_back("line " + std::to_string(line_) + ": " + why);
    };
    if (fields.size() != 4) {
      static const char* names[] = {"query_fn", "response_fn", "query", "response"};
      bad(fields.size() < 4 ? std::string("missing field '") + names[fields.size()] + "'"
                            : "expected 4 tab-separated fields, found " + std::to_string(fields.size()));
      continue;
    }
    Example ex;
    ex.task.query_fn = trim(fields[0]);
    ex.task.response_fn = trim(fields[1]);
    ex.query = tokenize(fields[2]);
    ex.response = tokenize(fields[3]);
    if (ex.task.query_fn.empty()) { bad("empty field 'query_fn'"); continue; }
    if (ex.task.response_fn.empty()) { bad("empty field 'response_fn'"); continue; }
    if (ex.query.empty()) { bad("empty field 'query'"); continue; }
    if (ex.response.empty()) { bad("empty field 'response'"); continue; }
    bool cut = false;
    if (ex.query.size() > max_tokens_) { ex.query.resize(max_tokens_); cut = true; }
    if (ex.response.size() > max_tokens_) { ex.response.resize(max_tokens_); cut = true; }
    if (cut) ++report_.truncated;
    ++report_.records;
    return ex;
  }
  return std::nullopt;
}

LoadedCorpus load_corpus(const std::filesystem::path& path, std::size_t max_tokens) {
  CorpusReader reader(path, max_tokens);
  LoadedCorpus out;
  while (auto ex = reader.next()) out.examples.push_back(std::move(*ex));
  out.report = reader.report();
  return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file " + path.string());
  for (const auto& ex : examples) {
    out << ex.task.query_fn << '\t' << ex.task.response_fn << '\t' << join(ex.query, " ") << '\t'
        << join(ex.response, " ") << '\n';
  }
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocab::Vocab() {
  for (const char* s : {"<pad>", "<unk>", "<s>", "</s>"}) push(s);
}

void Vocab::push(const std::string& token) {
  ids_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(token);
}

Vocab Vocab::build(std::span<const Example> examples, std::size_t cap) {
  if (cap < kNumSpecials + 1) throw DataError("vocabulary cap must be at least 5");
  std::map<std::string, std::size_t> counts;
  for (const auto& ex : examples) {
    for (const auto& t : ex.query) ++counts[t];
    for (const auto& t : ex.response) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, _] : ranked) {
    if (v.size() >= cap) break;
    if (!v.contains(tok)) v.push(tok);
  }
  return v;
}

Vocab Vocab::from_tokens(const std::vector<std::string>& ranked_tokens) {
  Vocab v;
  for (const auto& t : ranked_tokens) {
    if (v.contains(t)) throw DataError("duplicate vocabulary token '" + t + "'");
    v.push(t);
  }
  return v;
}

Vocab build_vocab(std::span<const Example> examples, std::size_t cap) { return Vocab::build(examples, cap); }

std::int32_t Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(std::span<const std::string> tokens) const {
  std::vector<std::int32_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocab::decode(std::span<const std::int32_t> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(token(i));
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write vocabulary " + path.string());
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(tokens);
}

// ---------------------------------------------------------------------------
// Partitioning

const TargetTask* Corpus::find_target(const std::string& label) const {
  for (const auto* group : {&test, &val}) {
    for (const auto& t : *group) {
      if (t.spec.label() == label) return &t;
    }
  }
  return nullptr;
}

std::vector<Example> Corpus::vocabulary_examples() const {
  std::vector<Example> out;
  for (const auto& t : train) out.insert(out.end(), t.examples.begin(), t.examples.end());
  for (const auto& t : val) {
    for (const auto* split : {&t.train, &t.val, &t.test}) out.insert(out.end(), split->begin(), split->end());
  }
  return out;
}

Corpus partition_tasks(std::span<const Example> examples, const PartitionConfig& config,
                       const RoleAssignment& roles, Rng& rng) {
  std::map<TaskSpec, std::vector<Example>> grouped;
  for (const auto& ex : examples) grouped[ex.task].push_back(ex);

  auto retained = [&](const TaskSpec& spec) -> std::vector<Example>& {
    auto it = grouped.find(spec);
    if (it == grouped.end()) throw DataError("role assignment references absent task '" + spec.label() + "'");
    if (it->second.size() <= config.min_samples) {
      throw DataError("task '" + spec.label() + "' has " + std::to_string(it->second.size()) +
                      " examples, not more than min_samples=" + std::to_string(config.min_samples));
    }
    return it->second;
  };

  std::map<TaskSpec, int> seen;
  for (const auto* group : {&roles.train, &roles.val, &roles.test}) {
    for (const auto& spec : *group) {
      if (seen[spec]++) throw DataError("task '" + spec.label() + "' assigned to more than one role");
    }
  }

  // The role entry names the task; its family falls back to the examples'.
  auto identity = [](const TaskSpec& spec, const std::vector<Example>& exs) {
    TaskSpec out = spec;
    if (out.family.empty()) out.family = exs.front().task.family;
    return out;
  };
  Corpus corpus;
  for (const auto& spec : roles.train) {
    auto& exs = retained(spec);
    corpus.train.push_back(TaskData{identity(spec, exs), exs});
  }
  auto split_target = [&](const TaskSpec& spec) {
    auto exs = retained(spec);
    const TaskSpec id = identity(spec, exs);
    const std::size_t need = config.val_n + config.test_n + 1;
    if (exs.size() < need) {
      throw DataError("target task '" + spec.label() + "' has " + std::to_string(exs.size()) +
                      " examples; needs at least " + std::to_string(need));
    }
    std::shuffle(exs.begin(), exs.end(), rng);
    TargetTask t;
    t.spec = id;
    const std::size_t rest = exs.size() - config.val_n - config.test_n;
    t.train.assign(exs.begin(), exs.begin() + static_cast<std::ptrdiff_t>(rest));
    t.val.assign(exs.begin() + static_cast<std::ptrdiff_t>(rest),
                 exs.begin() + static_cast<std::ptrdiff_t>(rest + config.val_n));
    t.test.assign(exs.begin() + static_cast<std::ptrdiff_t>(rest + config.val_n), exs.end());
    return t;
  };
  for (const auto& spec : roles.val) corpus.val.push_back(split_target(spec));
  for (const auto& spec : roles.test) corpus.test.push_back(split_target(spec));
  return corpus;
}

namespace {
std::vector<TaskSpec> parse_labels(const std::vector<std::string>& labels) {
  std::vector<TaskSpec> out;
  for (const auto& l : labels) out.push_back(TaskSpec::from_label(l));
  return out;
}
std::vector<std::string> labels_of(const std::vector<TaskSpec>& specs) {
  std::vector<std::string> out;
  for (const auto& s : specs) out.push_back(s.label());
  return out;
}
}  // namespace

void save_roles(const std::filesystem::path& path, const RoleAssignment& roles, const PartitionConfig& config) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write roles file " + path.string());
  out << "train = " << join(labels_of(roles.train), ",") << '\n';
  out << "val = " << join(labels_of(roles.val), ",") << '\n';
  out << "test = " << join(labels_of(roles.test), ",") << '\n';
  out << "min_samples = " << config.min_samples << '\n';
  out << "val_n = " << config.val_n << '\n';
  out << "test_n = " << config.test_n << '\n';
  for (const auto* group : {&roles.train, &roles.val, &roles.test})
    for (const auto& spec : *group)
      if (!spec.family.empty()) out << "family." << spec.label() << " = " << spec.family << '\n';
}

std::pair<RoleAssignment, PartitionConfig> load_roles(const std::filesystem::path& path) {
  KeyValueConfig cfg;
  try {
    cfg = KeyValueConfig::load(path);
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  RoleAssignment roles;
  roles.train = parse_labels(cfg.get_list("train", {}));
  roles.val = parse_labels(cfg.get_list("val", {}));
  roles.test = parse_labels(cfg.get_list("test", {}));
  for (auto* group : {&roles.train, &roles.val, &roles.test})
    for (auto& spec : *group) spec.family = cfg.get_string("family." + spec.label(), "");
  PartitionConfig pc;
  pc.min_samples = static_cast<std::size_t>(cfg.get_int("min_samples", 700));
  pc.val_n = static_cast<std::size_t>(cfg.get_int("val_n", 100));
  pc.test_n = static_cast<std::size_t>(cfg.get_int("test_n", 500));
  if (roles.train.empty()) throw DataError("roles file " + path.string() + " lists no train tasks");
  return {roles, pc};
}

// ---------------------------------------------------------------------------
// Batching

void Batch::validate() const {
  auto fail = [](const std::string& why) { throw DataError("ragged batch: " + why); };
  if (size == 0) fail("empty");
  if (src.size() != size * src_len || tgt.size() != size * tgt_len) fail("storage does not match padded extents");
  if (src_lengths.size() != size || tgt_lengths.size() != size || tasks.size() != size) fail("missing masks");
  for (std::size_t b = 0; b < size; ++b) {
    if (src_lengths[b] == 0 || src_lengths[b] > src_len) fail("source length out of range");
    if (tgt_lengths[b] < 2 || tgt_lengths[b] > tgt_len) fail("target length out of range");
    if (tgt[b * tgt_len] != kBos || tgt[b * tgt_len + tgt_lengths[b] - 1] != kEos) fail("response not framed by BOS/EOS");
  }
}

Batch make_batch(std::span<const EncodedExample* const> examples) {
  if (examples.empty()) throw DataError("cannot build an empty batch");
  Batch b;
  b.size = examples.size();
  for (const auto* ex : examples) {
    if (ex->query.empty() || ex->response.empty()) throw DataError("example with empty sequence");
    b.src_len = std::max(b.src_len, ex->query.size());
    b.tgt_len = std::max(b.tgt_len, ex->response.size() + 2);
  }
  b.src.assign(b.size * b.src_len, kPad);
  b.tgt.assign(b.size * b.tgt_len, kPad);
  for (std::size_t i = 0; i < b.size; ++i) {
    const auto& ex = *examples[i];
    std::copy(ex.query.begin(), ex.query.end(), b.src.begin() + static_cast<std::ptrdiff_t>(i * b.src_len));
    b.src_lengths.push_back(ex.query.size());
    auto* row = b.tgt.data() + i * b.tgt_len;
    row[0] = kBos;
    std::copy(ex.response.begin(), ex.response.end(), row + 1);
    row[ex.response.size() + 1] = kEos;
    b.tgt_lengths.push_back(ex.response.size() + 2);
    b.tasks.push_back(ex.task);
  }
  return b;
}

Batch make_batch(std::span<const EncodedExample> examples) {
  std::vector<const EncodedExample*> ptrs;
  for (const auto& e : examples) ptrs.push_back(&e);
  return make_batch(std::span<const EncodedExample* const>(ptrs));
}

std::vector<Batch> make_batches(std::span<const EncodedExample> examples, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0) throw DataError("batch size must be positive");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<const EncodedExample*> chunk;
    for (std::size_t j = i; j < std::min(order.size(), i + batch_size); ++j) chunk.push_back(&examples[order[j]]);
    out.push_back(make_batch(std::span<const EncodedExample* const>(chunk)));
  }
  return out;
}

BatchStream::BatchStream(std::vector<EncodedExample> examples, std::size_t batch_size, Rng rng)
    : examples_(std::move(examples)), batch_size_(batch_size), rng_(rng) {
  if (examples_.empty()) throw DataError("batch stream over an empty example set");
  if (batch_size_ == 0) throw DataError("batch size must be positive");
  order_.resize(examples_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
}

Batch BatchStream::next() {
  if (cursor_ >= order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
    ++epoch_;
  }
  std::vector<const EncodedExample*> chunk;
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  for (std::size_t j = cursor_; j < end; ++j) chunk.push_back(&examples_[order_[j]]);
  cursor_ = end;
  return make_batch(std::span<const EncodedExample* const>(chunk));
}

std::vector<EncodedExample> encode_examples(std::span<const Example> examples, const Vocab& vocab,
                                            std::int32_t task_row) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(EncodedExample{vocab.encode(ex.query), vocab.encode(ex.response), task_row});
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic families

namespace {

Tokens t_reverse(const Tokens& q) { return Tokens(q.rbegin(), q.rend()); }
Tokens t_reverse_q(const Tokens& q) {
  auto r = t_reverse(q);
  r.push_back("mQ");
  return r;
}
Tokens t_prepend_p(const Tokens& q) {
  Tokens r{"mP"};
  r.insert(r.end(), q.begin(), q.end());
  return r;
}
Tokens t_append_e(const Tokens& q) {
  Tokens r = q;
  r.push_back("mE");
  return r;
}
Tokens t_duplicate(const Tokens& q) {
  Tokens r = q;
  r.insert(r.end(), q.begin(), q.end());
  return r;
}
Tokens t_duplicate_last(const Tokens& q) {
  Tokens r = q;
  r.push_back(q.back());
  return r;
}

const Transform kTransforms[] = {
    {"reverse", t_reverse},     {"reverse_q", t_reverse_q}, {"prepend_p", t_prepend_p},
    {"append_e", t_append_e},   {"duplicate", t_duplicate}, {"duplicate_last", t_duplicate_last},
};

}  // namespace

const Transform& find_transform(const std::string& name) {
  for (const auto& t : kTransforms) {
    if (t.name == name) return t;
  }
  throw DataError("unknown transform '" + name + "'");
}

std::vector<std::string> transform_names() {
  std::vector<std::string> out;
  for (const auto& t : kTransforms) out.push_back(t.name);
  return out;
}

std::vector<std::string> marker_tokens() { return {"mP", "mE", "mQ"}; }

SyntheticSpec SyntheticSpec::defaults() {
  SyntheticSpec s;
  s.families = {{"reverse", {"reverse", "reverse_q"}},
                {"affix", {"prepend_p", "append_e"}},
                {"echo", {"duplicate", "duplicate_last"}}};
  return s;
}

SyntheticSpec SyntheticSpec::from_config(const KeyValueConfig& config) {
  SyntheticSpec s = defaults();
  s.alphabet = static_cast<std::size_t>(config.require_int("alphabet"));
  std::vector<std::string> default_names;
  for (const auto& f : s.families) default_names.push_back(f.name);
  const auto names = config.get_list("families", default_names);
  std::vector<FamilySpec> fams;
  for (const auto& name : names) {
    std::vector<std::string> fallback;
    for (const auto& f : s.families) {
      if (f.name == name) fallback = f.members;
    }
    auto members = config.get_list("family." + name, fallback);
    if (members.empty()) throw DataError("family '" + name + "' has no members (set family." + name + ")");
    fams.push_back({name, members});
  }
  s.families = fams;
  s.query_styles = static_cast<std::size_t>(config.get_int("query_styles", static_cast<long long>(s.query_styles)));
  s.min_len = static_cast<std::size_t>(config.get_int("min_len", static_cast<long long>(s.min_len)));
  s.max_len = static_cast<std::size_t>(config.get_int("max_len", static_cast<long long>(s.max_len)));
  s.train_examples = static_cast<std::size_t>(config.get_int("train_examples", static_cast<long long>(s.train_examples)));
  s.target_examples = static_cast<std::size_t>(config.get_int("target_examples", static_cast<long long>(s.target_examples)));
  s.test_styles = static_cast<std::size_t>(config.get_int("test_styles", static_cast<long long>(s.test_styles)));
  s.partition.min_samples = static_cast<std::size_t>(config.get_int("min_samples", static_cast<long long>(s.partition.min_samples)));
  s.partition.val_n = static_cast<std::size_t>(config.get_int("val_n", static_cast<long long>(s.partition.val_n)));
  s.partition.test_n = static_cast<std::size_t>(config.get_int("test_n", static_cast<long long>(s.partition.test_n)));
  s.validate();
  return s;
}

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw DataError("invalid synthetic spec: field '" + field + "' " + why);
  };
  if (families.size() < 2) fail("families", "must name at least 2 families");
  for (const auto& f : families) {
    if (f.members.size() < 2) fail("family." + f.name, "needs at least 2 member transforms");
    for (const auto& m : f.members) find_transform(m);
  }
  if (alphabet < 8) fail("alphabet", "must be at least 8");
  if (query_styles < 2) fail("query_styles", "must be at least 2 (one meta-train and one meta-val style)");
  if (min_len < 1 || max_len < min_len) fail("min_len", "must satisfy 1 <= min_len <= max_len");
  if (max_len - min_len + 1 < query_styles) fail("query_styles", "exceeds the number of distinct query lengths");
  if (test_styles < 1 || test_styles > query_styles) fail("test_styles", "must be in [1, query_styles]");
  if (train_examples <= partition.min_samples) fail("train_examples", "must exceed min_samples");
  if (target_examples <= partition.min_samples) fail("target_examples", "must exceed min_samples");
  if (target_examples < partition.val_n + partition.test_n + 1) fail("target_examples", "must exceed val_n + test_n");
}

SyntheticCorpus synthesize(const SyntheticSpec& spec, Rng& rng) {
  spec.validate();
  SyntheticCorpus out;
  // Style s draws lengths from the s-th of query_styles consecutive bands of [min_len, max_len].
  const std::size_t span = spec.max_len - spec.min_len + 1;
  auto band = [&](std::size_t s) {
    return std::uniform_int_distribution<std::size_t>(spec.min_len + s * span / spec.query_styles,
                                                      spec.min_len + (s + 1) * span / spec.query_styles - 1);
  };
  std::uniform_int_distribution<std::size_t> tok(0, spec.alphabet - 1);

  auto style_label = [](std::size_t s) { return "q" + std::to_string(s); };
  auto emit = [&](const FamilySpec& fam, const std::string& member, std::size_t style, std::size_t count) {
    const Transform& tr = find_transform(member);
    TaskSpec task{style_label(style), member, fam.name};
    auto len_dist = band(style);
    for (std::size_t i = 0; i < count; ++i) {
      Tokens q(len_dist(rng));
      for (auto& t : q) t = "c" + std::to_string(tok(rng));
      Example ex{q, tr.apply(q), task};
      out.examples.push_back(std::move(ex));
    }
    return task;
  };

  const std::size_t val_style = spec.query_styles - 1;
  for (const auto& fam : spec.families) {
    for (std::size_t s = 0; s < val_style; ++s) out.roles.train.push_back(emit(fam, fam.members[0], s, spec.train_examples));
  }
  for (const auto& fam : spec.families) out.roles.val.push_back(emit(fam, fam.members[0], val_style, spec.target_examples));
  for (const auto& fam : spec.families) {
    for (std::size_t m = 1; m < fam.members.size(); ++m) {
      for (std::size_t s = 0; s < spec.test_styles; ++s) {
        out.roles.test.push_back(emit(fam, fam.members[m], s, spec.target_examples));
      }
    }
  }

  std::vector<std::string> inventory;
  for (std::size_t c = 0; c < spec.alphabet; ++c) inventory.push_back("c" + std::to_string(c));
  for (const auto& m : marker_tokens()) inventory.push_back(m);
  out.vocab = Vocab::from_tokens(inventory);
  return out;
}

Corpus generate_synthetic_families(const SyntheticSpec& spec, Rng& rng) {
  auto syn = synthesize(spec, rng);
  return partition_tasks(syn.examples, spec.partition, syn.roles, rng);
}

}  // namespace sml::data
