// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "sml/data.hpp"

using namespace sml;
using namespace sml::data;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& text) {
  auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path) << text;
  return path;
}

Example ex(std::vector<std::string> q, std::vector<std::string> r, std::string qf = "q", std::string rf = "r") {
  return Example{std::move(q), std::move(r), TaskSpec{std::move(qf), std::move(rf), ""}};
}

}  // namespace

TEST_CASE("corpus ingestion") {
  SUBCASE("empty file") {
    auto path = write_temp("sml_empty.tsv", "");
    auto c = load_corpus(path);
    CHECK(c.examples.empty());
    CHECK(c.report.malformed == 0);
  }
  SUBCASE("one record round-trips") {
    auto path = write_temp("sml_one.tsv", "decl\tinterrog\thow are you\tfine thanks\n");
    auto c = load_corpus(path);
    REQUIRE(c.examples.size() == 1);
    CHECK(c.examples[0].task.label() == "decl|interrog");
    CHECK(c.examples[0].query == std::vector<std::string>{"how", "are", "you"});
    CHECK(c.examples[0].response == std::vector<std::string>{"fine", "thanks"});
    auto out = std::filesystem::temp_directory_path() / "sml_one_out.tsv";
    write_corpus(out, c.examples);
    auto again = load_corpus(out);
    CHECK(again.examples[0].query == c.examples[0].query);
    CHECK(again.examples[0].task == c.examples[0].task);
  }
  SUBCASE("one bad line among ten") {
    std::string text;
    for (int i = 0; i < 10; ++i) text += i == 6 ? "a\tb\tonly three\n" : "a\tb\tx y\tz\n";
    auto c = load_corpus(write_temp("sml_bad.tsv", text));
    CHECK(c.examples.size() == 9);
    CHECK(c.report.malformed == 1);
    REQUIRE(c.report.problems.size() == 1);
    CHECK(c.report.problems[0].find("line 7") != std::string::npos);
    CHECK(c.report.problems[0].find("response") != std::string::npos);
  }
  SUBCASE("long sequences are truncated and counted") {
    auto c = load_corpus(write_temp("sml_long.tsv", "a\tb\t1 2 3 4 5\tx\n"), 3);
    CHECK(c.examples[0].query.size() == 3);
    CHECK(c.report.truncated == 1);
  }
  CHECK_THROWS(load_corpus("/nonexistent/sml/corpus.tsv"));
}

TEST_CASE("vocabulary ranks by frequency with lexicographic ties") {
  std::vector<Example> exs{ex({"a", "b"}, {"a"}), ex({"c", "a"}, {"b"})};
  auto v = build_vocab(exs, 6);
  CHECK(v.size() == 6);
  CHECK(v.id("a") == 4);
  CHECK(v.id("b") == 5);
  CHECK(v.id("c") == kUnk);
  CHECK(build_vocab(exs, 6) == v);

  auto ties = build_vocab(std::vector<Example>{ex({"z", "y"}, {"x"})}, 10);
  CHECK(ties.id("x") == 4);
  CHECK(ties.id("z") == 6);

  const std::vector<std::string> words{"a", "b", "zzz"};
  auto ids = v.encode(words);
  CHECK(ids == std::vector<std::int32_t>{4, 5, kUnk});
  auto back = v.decode(ids);
  CHECK(back[0] == "a");
  CHECK(back[1] == "b");
  CHECK(back[2] != "zzz");

  auto path = std::filesystem::temp_directory_path() / "sml_vocab.txt";
  v.save(path);
  CHECK(Vocab::load(path) == v);
}

TEST_CASE("partition sizes and role checks") {
  std::vector<Example> exs;
  for (int t = 0; t < 3; ++t)
    for (int i = 0; i < 50; ++i) exs.push_back(ex({"w" + std::to_string(i)}, {"v"}, "q", "r" + std::to_string(t)));
  RoleAssignment roles;
  roles.train = {TaskSpec{"q", "r0", ""}};
  roles.val = {TaskSpec{"q", "r1", ""}};
  roles.test = {TaskSpec{"q", "r2", ""}};
  PartitionConfig cfg{10, 5, 10};
  Rng rng(1);
  auto c = partition_tasks(exs, cfg, roles, rng);
  REQUIRE(c.test.size() == 1);
  CHECK(c.test[0].train.size() == 35);
  CHECK(c.test[0].val.size() == 5);
  CHECK(c.test[0].test.size() == 10);
  CHECK(c.train[0].examples.size() == 50);

  // splits are disjoint and cover the task
  std::set<std::string> seen;
  for (const auto* split : {&c.test[0].train, &c.test[0].val, &c.test[0].test})
    for (const auto& e : *split) CHECK(seen.insert(e.query[0]).second);
  CHECK(seen.size() == 50);

  Rng rng2(1);
  auto again = partition_tasks(exs, cfg, roles, rng2);
  CHECK(again.test[0].test[0].query == c.test[0].test[0].query);

  auto missing = roles;
  missing.test = {TaskSpec{"q", "nope", ""}};
  CHECK_THROWS_AS(partition_tasks(exs, cfg, missing, rng), DataError);
  auto twice = roles;
  twice.val.push_back(TaskSpec{"q", "r0", ""});
  CHECK_THROWS_AS(partition_tasks(exs, cfg, twice, rng), DataError);
  CHECK_THROWS_AS(partition_tasks(exs, PartitionConfig{50, 5, 10}, roles, rng), DataError);
  CHECK_THROWS_AS(partition_tasks(exs, PartitionConfig{10, 20, 30}, roles, rng), DataError);
}

TEST_CASE("roles file round-trips") {
  RoleAssignment roles;
  roles.train = {TaskSpec{"q0", "reverse", "REVERSE"}, TaskSpec{"q1", "reverse", "REVERSE"}};
  roles.val = {TaskSpec{"q2", "reverse", "REVERSE"}};
  roles.test = {TaskSpec{"q0", "append_e", "AFFIX"}};
  auto path = std::filesystem::temp_directory_path() / "sml_roles.txt";
  save_roles(path, roles, PartitionConfig{20, 20, 30});
  auto [back, cfg] = load_roles(path);
  CHECK(back.train == roles.train);
  CHECK(back.test[0].family == "AFFIX");
  CHECK(cfg.test_n == 30);
}

TEST_CASE("batching") {
  std::vector<EncodedExample> exs;
  for (int i = 0; i < 5; ++i) exs.push_back({std::vector<std::int32_t>(static_cast<std::size_t>(i + 1), 4 + i), {5, 6}, i});
  Rng rng(3);
  auto batches = make_batches(exs, 2, rng);
  REQUIRE(batches.size() == 3);
  CHECK(batches[0].size == 2);
  CHECK(batches[2].size == 1);

  std::multiset<std::int32_t> tasks;
  for (const auto& b : batches) {
    b.validate();
    for (std::size_t i = 0; i < b.size; ++i) {
      tasks.insert(b.tasks[i]);
      std::size_t src = 0, tgt = 0;
      for (std::size_t t = 0; t < b.src_len; ++t) src += b.src_mask(i, t);
      for (std::size_t t = 0; t < b.tgt_len; ++t) tgt += b.tgt_mask(i, t);
      CHECK(src == exs[static_cast<std::size_t>(b.tasks[i])].query.size());
      CHECK(tgt == 4);
      CHECK(b.tgt[i * b.tgt_len] == kBos);
      CHECK(b.tgt[i * b.tgt_len + 3] == kEos);
      // unpadded content is the original query
      for (std::size_t t = 0; t < src; ++t) CHECK(b.src[i * b.src_len + t] == 4 + b.tasks[i]);
    }
  }
  CHECK(tasks == std::multiset<std::int32_t>{0, 1, 2, 3, 4});

  Rng a(9), b(9);
  auto x = make_batches(exs, 2, a), y = make_batches(exs, 2, b);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i].tasks == y[i].tasks);

  BatchStream stream(exs, 2, Rng(4));
  for (int i = 0; i < 4; ++i) stream.next();
  CHECK(stream.epoch() >= 1);
  CHECK_THROWS_AS(make_batches(exs, 0, rng), DataError);
}

TEST_CASE("transforms") {
  const Tokens q{"5", "6", "7"};
  CHECK(find_transform("reverse").apply(q) == Tokens{"7", "6", "5"});
  CHECK(find_transform("duplicate_last").apply(Tokens{"5", "6"}) == Tokens{"5", "6", "6"});
  CHECK(find_transform("duplicate").apply(Tokens{"5", "6"}) == Tokens{"5", "6", "5", "6"});
  CHECK(find_transform("prepend_p").apply(q).front() != "5");
  CHECK(find_transform("append_e").apply(q).size() == 4);
  auto rq = find_transform("reverse_q").apply(q);
  CHECK(rq.size() == 4);
  CHECK(rq[0] == "7");
  CHECK_THROWS(find_transform("rotate"));
}

TEST_CASE("synthetic families") {
  auto spec = SyntheticSpec::defaults();
  Rng r1(1), r2(1);
  auto a = synthesize(spec, r1);
  auto b = synthesize(spec, r2);
  REQUIRE(a.examples.size() == b.examples.size());
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    CHECK(a.examples[i].query == b.examples[i].query);
    CHECK(a.examples[i].response == b.examples[i].response);
  }
  // every response is its transform applied to the query
  for (const auto& e : a.examples) {
    CHECK(find_transform(e.task.response_fn).apply(e.query) == e.response);
    CHECK(e.query.size() >= spec.min_len);
    CHECK(e.query.size() <= spec.max_len);
  }
  // roles are disjoint; each family keeps held-out members for meta-test
  std::set<std::string> labels;
  for (const auto* group : {&a.roles.train, &a.roles.val, &a.roles.test})
    for (const auto& t : *group) CHECK(labels.insert(t.label()).second);
  std::set<std::string> test_families, train_fns, test_fns;
  for (const auto& t : a.roles.test) {
    test_families.insert(t.family);
    test_fns.insert(t.response_fn);
  }
  for (const auto& t : a.roles.train) train_fns.insert(t.response_fn);
  CHECK(test_families.size() == spec.families.size());
  for (const auto& f : test_fns) CHECK(train_fns.count(f) == 0);

  Rng r3(1);
  auto corpus = generate_synthetic_families(spec, r3);
  CHECK(corpus.train.size() == a.roles.train.size());
  CHECK(corpus.test.size() == a.roles.test.size());
  for (const auto& e : corpus.vocabulary_examples())
    for (const auto& t : e.query) CHECK(a.vocab.contains(t));

  auto bad = spec;
  bad.alphabet = 4;
  CHECK_THROWS(bad.validate());
  bad = spec;
  bad.families.resize(1);
  CHECK_THROWS(bad.validate());
}
