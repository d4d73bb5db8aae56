// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "sml/config.hpp"
#include "sml/ops.hpp"

namespace sml::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kUnk = 1;
inline constexpr std::int32_t kBos = 2;
inline constexpr std::int32_t kEos = 3;
inline constexpr std::size_t kNumSpecials = 4;
inline constexpr std::size_t kDefaultMaxTokens = 50;

/// A task is identified by its (query condition, response condition) pair.
struct TaskSpec {
  std::string query_fn;
  std::string response_fn;
  std::string family;  // synthetic corpora only; not part of the identity

  std::string label() const { return query_fn + "|" + response_fn; }
  static TaskSpec from_label(const std::string& label);

  friend bool operator==(const TaskSpec& a, const TaskSpec& b) {
    return a.query_fn == b.query_fn && a.response_fn == b.response_fn;
  }
  friend bool operator<(const TaskSpec& a, const TaskSpec& b) {
    return a.query_fn != b.query_fn ? a.query_fn < b.query_fn : a.response_fn < b.response_fn;
  }
};

struct Example {
  std::vector<std::string> query;
  std::vector<std::string> response;
  TaskSpec task;
};

/// Token ids plus the row of the condition-embedding table for its task.
struct EncodedExample {
  std::vector<std::int32_t> query;
  std::vector<std::int32_t> response;
  std::int32_t task = 0;
};

// ---------------------------------------------------------------------------
// Ingestion

struct LoadReport {
  std::size_t records = 0;
  std::size_t malformed = 0;
  std::size_t truncated = 0;
  std::vector<std::string> problems;  // "line N: ..."
};

/// Streams tab-separated records: query_fn, response_fn, query, response.
/// Malformed lines are skipped and reported; sequences longer than the cap
/// are truncated and counted.
class CorpusReader {
 public:
  explicit CorpusReader(const std::filesystem::path& path, std::size_t max_tokens = kDefaultMaxTokens);
  std::optional<Example> next();
  const LoadReport& report() const { return report_; }

 private:
  std::ifstream in_;
  std::size_t max_tokens_;
  std::size_t line_ = 0;
  LoadReport report_;
};

struct LoadedCorpus {
  std::vector<Example> examples;
  LoadReport report;
};

LoadedCorpus load_corpus(const std::filesystem::path& path, std::size_t max_tokens = kDefaultMaxTokens);
void write_corpus(const std::filesystem::path& path, std::span<const Example> examples);

// ---------------------------------------------------------------------------
// Vocabulary

class Vocab {
 public:
  Vocab();

  /// Most frequent tokens (ties lexicographic) fill ids after the specials
  /// until the cap (which counts the specials) is reached.
  static Vocab build(std::span<const Example> examples, std::size_t cap);
  static Vocab from_tokens(const std::vector<std::string>& ranked_tokens);

  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  std::vector<std::int32_t> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const std::int32_t> ids) const;

  // One token per line in rank order; the four specials are implied.
  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
  void push(const std::string& token);
};

Vocab build_vocab(std::span<const Example> examples, std::size_t cap);

// ---------------------------------------------------------------------------
// Task partitioning

struct TaskData {
  TaskSpec spec;
  std::vector<Example> examples;
};

/// A meta-validation or meta-test task: adaptation-train, adaptation-val and
/// held-out test splits.
struct TargetTask {
  TaskSpec spec;
  std::vector<Example> train;
  std::vector<Example> val;
  std::vector<Example> test;
};

struct Corpus {
  std::vector<TaskData> train;
  std::vector<TargetTask> val;
  std::vector<TargetTask> test;

  const TargetTask* find_target(const std::string& label) const;
  // Train-task examples plus meta-val task text: the vocabulary source.
  std::vector<Example> vocabulary_examples() const;
};

struct RoleAssignment {
  std::vector<TaskSpec> train;
  std::vector<TaskSpec> val;
  std::vector<TaskSpec> test;
};

struct PartitionConfig {
  std::size_t min_samples = 700;
  std::size_t val_n = 100;
  std::size_t test_n = 500;
};

Corpus partition_tasks(std::span<const Example> examples, const PartitionConfig& config,
                       const RoleAssignment& roles, Rng& rng);

// Roles file: keys train/val/test holding comma-separated task labels, plus
// min_samples, val_n and test_n.
void save_roles(const std::filesystem::path& path, const RoleAssignment& roles, const PartitionConfig& config);
std::pair<RoleAssignment, PartitionConfig> load_roles(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Batching

/// Padded batch. Responses are framed as BOS ... EOS.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<std::int32_t> src;  // size * src_len, PAD-filled
  std::vector<std::size_t> src_lengths;
  std::vector<std::int32_t> tgt;  // size * tgt_len, PAD-filled
  std::vector<std::size_t> tgt_lengths;
  std::vector<std::int32_t> tasks;

  std::uint8_t src_mask(std::size_t b, std::size_t t) const { return t < src_lengths[b] ? 1 : 0; }
  std::uint8_t tgt_mask(std::size_t b, std::size_t t) const { return t < tgt_lengths[b] ? 1 : 0; }
  // Checks that padded storage and recorded lengths agree.
  void validate() const;
};

Batch make_batch(std::span<const EncodedExample> examples);
Batch make_batch(std::span<const EncodedExample* const> examples);

/// One shuffled epoch of batches; the last batch may be short.
std::vector<Batch> make_batches(std::span<const EncodedExample> examples, std::size_t batch_size, Rng& rng);

/// Endless batches: reshuffles at every epoch boundary.
class BatchStream {
 public:
  BatchStream(std::vector<EncodedExample> examples, std::size_t batch_size, Rng rng);
  Batch next();
  std::size_t epoch() const { return epoch_; }

 private:
  std::vector<EncodedExample> examples_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

std::vector<EncodedExample> encode_examples(std::span<const Example> examples, const Vocab& vocab,
                                            std::int32_t task_row);

// ---------------------------------------------------------------------------
// Synthetic task families

using Tokens = std::vector<std::string>;

struct Transform {
  std::string name;
  Tokens (*apply)(const Tokens&);
};

/// Built-in response transforms by name (reverse, reverse_q, prepend_p,
/// append_e, duplicate, duplicate_last).
const Transform& find_transform(const std::string& name);
std::vector<std::string> transform_names();
std::vector<std::string> marker_tokens();

struct FamilySpec {
  std::string name;
  std::vector<std::string> members;  // transform names; member 0 is the meta-train member
};

struct SyntheticSpec {
  std::vector<FamilySpec> families;
  std::size_t alphabet = 10;         // content tokens c0..c{alphabet-1}
  std::size_t query_styles = 3;      // disjoint query-length bands, one query condition each
  std::size_t min_len = 2;
  std::size_t max_len = 7;
  std::size_t train_examples = 400;  // per meta-train task
  std::size_t target_examples = 90;  // per meta-val / meta-test task
  std::size_t test_styles = 1;       // query styles used for each held-out member
  PartitionConfig partition{20, 20, 30};

  static SyntheticSpec defaults();
  // Reads a spec; `alphabet` is required.
  static SyntheticSpec from_config(const KeyValueConfig& config);
  void validate() const;
};

struct SyntheticCorpus {
  std::vector<Example> examples;
  RoleAssignment roles;
  Vocab vocab;  // full token inventory (content alphabet + markers)
};

/// Generates examples and role assignment. Per family: member 0 on every
/// style but the last is meta-train, member 0 on the last style is meta-val,
/// and the held-out members on the first `test_styles` styles are meta-test.
SyntheticCorpus synthesize(const SyntheticSpec& spec, Rng& rng);

Corpus generate_synthetic_families(const SyntheticSpec& spec, Rng& rng);

}  // namespace sml::data
