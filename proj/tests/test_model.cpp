// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "sml/model.hpp"
#include "support.hpp"

using namespace sml;
using model::HyperParams;

namespace {

using Vec = std::vector<double>;

// Straight-line reference implementation on plain vectors, one example at a time.
struct Ref {
  const HyperParams& hp;
  const ParamStore& p;

  Vec row(const std::string& name, std::size_t r) const {
    const Tensor& t = p.at(name);
    Vec v(t.cols());
    for (std::size_t c = 0; c < t.cols(); ++c) v[c] = t.at(r, c);
    return v;
  }
  // x W for a row vector x
  Vec vecmat(const Vec& x, const std::string& name) const {
    const Tensor& w = p.at(name);
    Vec y(w.cols(), 0.0);
    for (std::size_t i = 0; i < w.rows(); ++i)
      for (std::size_t j = 0; j < w.cols(); ++j) y[j] += x[i] * w.at(i, j);
    return y;
  }
  static Vec cat(Vec a, const Vec& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }
  static double sig(double x) { return 1 / (1 + std::exp(-x)); }

  std::pair<Vec, Vec> lstm(const Vec& x, const Vec& h, const Vec& c, const std::string& w, const std::string& b) const {
    const std::size_t H = hp.hidden;
    Vec z = vecmat(cat(x, h), w);
    Vec bias = row(b, 0);
    Vec hn(H), cn(H);
    for (std::size_t k = 0; k < H; ++k) {
      const double i = sig(z[k] + bias[k]), f = sig(z[H + k] + bias[H + k]);
      const double g = std::tanh(z[2 * H + k] + bias[2 * H + k]), o = sig(z[3 * H + k] + bias[3 * H + k]);
      cn[k] = f * c[k] + i * g;
      hn[k] = o * std::tanh(cn[k]);
    }
    return {hn, cn};
  }

  struct Enc {
    std::vector<Vec> memory;
    std::vector<Vec> h, c;
  };

  Enc encode(const std::vector<std::int32_t>& q) const {
    const std::size_t n = q.size(), H = hp.hidden;
    std::vector<Vec> in;
    for (auto id : q) in.push_back(row(model::kWordEmbeddings, static_cast<std::size_t>(id)));
    Enc e;
    for (std::size_t l = 0; l < hp.layers; ++l) {
      std::vector<Vec> f(n), b(n);
      Vec h(H, 0), c(H, 0);
      for (std::size_t t = 0; t < n; ++t) {
        std::tie(h, c) = lstm(in[t], h, c, model::encoder_weight(l, false), model::encoder_bias(l, false));
        f[t] = h;
      }
      Vec fh = h, fc = c;
      h.assign(H, 0);
      c.assign(H, 0);
      for (std::size_t t = n; t-- > 0;) {
        std::tie(h, c) = lstm(in[t], h, c, model::encoder_weight(l, true), model::encoder_bias(l, true));
        b[t] = h;
      }
      Vec hh = vecmat(cat(fh, h), "bridge.l" + std::to_string(l) + ".h");
      for (auto& v : hh) v = std::tanh(v);
      e.h.push_back(hh);
      e.c.push_back(vecmat(cat(fc, c), "bridge.l" + std::to_string(l) + ".c"));
      for (std::size_t t = 0; t < n; ++t) in[t] = cat(f[t], b[t]);
    }
    e.memory = in;
    return e;
  }

  // Returns log-probabilities and attention; updates h, c in place.
  std::pair<Vec, Vec> step(std::vector<Vec>& h, std::vector<Vec>& c, std::int32_t token, const Vec& sf,
                           const Enc& e) const {
    Vec x = cat(row(model::kWordEmbeddings, static_cast<std::size_t>(token)), sf);
    for (std::size_t l = 0; l < hp.layers; ++l) {
      std::tie(h[l], c[l]) = lstm(x, h[l], c[l], model::decoder_weight(l), model::decoder_bias(l));
      x = h[l];
    }
    const Vec& u = x;
    Vec ua = vecmat(u, model::kAttention);
    Vec scores;
    for (const auto& m : e.memory) {
      double s = 0;
      for (std::size_t k = 0; k < m.size(); ++k) s += ua[k] * m[k];
      scores.push_back(s);
    }
    double mx = *std::max_element(scores.begin(), scores.end()), z = 0;
    Vec a(scores.size());
    for (std::size_t t = 0; t < a.size(); ++t) z += a[t] = std::exp(scores[t] - mx);
    for (auto& v : a) v /= z;
    Vec ctx(e.memory[0].size(), 0);
    for (std::size_t t = 0; t < a.size(); ++t)
      for (std::size_t k = 0; k < ctx.size(); ++k) ctx[k] += a[t] * e.memory[t][k];
    Vec comb = vecmat(cat(u, ctx), model::kCombine);
    for (auto& v : comb) v = std::tanh(v);
    Vec logits = vecmat(comb, model::kOutputWeight);
    Vec bias = row(model::kOutputBias, 0);
    for (std::size_t v = 0; v < logits.size(); ++v) logits[v] += bias[v];
    mx = *std::max_element(logits.begin(), logits.end());
    z = 0;
    for (double v : logits) z += std::exp(v - mx);
    for (auto& v : logits) v = v - mx - std::log(z);
    return {logits, a};
  }
};

HyperParams tiny(std::size_t layers = 1) {
  HyperParams hp;
  hp.vocab_size = 8;
  hp.word_dim = 3;
  hp.sf_dim = 2;
  hp.hidden = 3;
  hp.layers = layers;
  hp.dropout_p = 0;
  return hp;
}

ParamStore init(const HyperParams& hp, std::uint64_t seed, Real scale = 1) {
  Rng rng(seed);
  auto mp = model::init_params(hp, 3, rng);
  // larger weights than the init range so that errors are not hidden by saturation at 0
  for (auto& [name, t] : mp.store)
    for (auto& v : t.data_mut()) v *= scale;
  return mp.store;
}

Tensor sf_row(const ParamStore& p, std::size_t k) { return ops::slice_rows(p.at(model::kTaskTable), k, k + 1); }

}  // namespace

TEST_CASE("init is uniform in range, ordered and deterministic") {
  const auto hp = tiny(2);
  auto a = init(hp, 4), b = init(hp, 4), c = init(hp, 5);
  CHECK(a.flatten() == b.flatten());
  CHECK(a.flatten() != c.flatten());
  for (Real v : a.flatten()) {
    CHECK(v >= -0.1);
    CHECK(v < 0.1);
  }
  auto names = a.names();
  CHECK(names.front() == model::kWordEmbeddings);
  CHECK(names.back() == model::kOutputBias);
  CHECK(a.at(model::encoder_weight(1, true)).shape() == Shape{9, 12});
  CHECK(a.at(model::decoder_weight(0)).shape() == Shape{8, 12});
  CHECK(a.at(model::kCombine).shape() == Shape{9, 3});
  CHECK(model::decoder_parameter_names(hp).size() == 8);
}

TEST_CASE("pretrained embeddings load and reject the wrong width") {
  const auto hp = tiny();
  const auto path = std::filesystem::temp_directory_path() / "sml_pretrained.txt";
  data::Vocab vocab = data::Vocab::from_tokens({"x", "y"});
  {
    std::ofstream out(path);
    out << "y 0.5 0.25 -1\nzz 1 1 1\n";
  }
  Rng rng(1);
  auto mp = model::init_params(hp, 1, rng, model::PretrainedWords{path, &vocab});
  CHECK(mp.store.at(model::kWordEmbeddings).at(static_cast<std::size_t>(vocab.id("y")), 2) == -1);
  {
    std::ofstream out(path);
    out << "y 0.5 0.25\n";
  }
  Rng rng2(1);
  CHECK_THROWS_AS(model::init_params(hp, 1, rng2, model::PretrainedWords{path, &vocab}), std::invalid_argument);
  std::filesystem::remove(path);
}

TEST_CASE("decode_step matches a straight-line recomputation") {
  for (std::size_t layers : {1, 2}) {
    const auto hp = tiny(layers);
    auto p = init(hp, 10 + layers, 10);
    const std::vector<std::int32_t> q{4, 6, 5, 7};
    const std::vector<std::int32_t> resp{5, 4, 6};
    Ref ref{hp, p};
    auto e = ref.encode(q);
    auto enc = model::encode(hp, p, q);
    REQUIRE(enc.memory.rows() == q.size());
    for (std::size_t t = 0; t < q.size(); ++t)
      for (std::size_t k = 0; k < 2 * hp.hidden; ++k) CHECK(std::abs(enc.memory.at(t, k) - e.memory[t][k]) < 1e-6);

    auto sf = sf_row(p, 1);
    Vec sfv{sf.at(0), sf.at(1)};
    model::DecoderState st = enc.init;
    std::vector<Vec> h = e.h, c = e.c;
    std::int32_t last = data::kBos;
    for (auto next : resp) {
      const std::int32_t tok[] = {last};
      auto so = model::decode_step(hp, p, st, tok, sf, enc);
      auto [lp, att] = ref.step(h, c, last, sfv, e);
      CHECK(test::max_abs_diff(so.log_probs.data(), lp) < 1e-6);
      CHECK(test::max_abs_diff(so.attention.data(), att) < 1e-6);
      for (std::size_t l = 0; l < layers; ++l) CHECK(test::max_abs_diff(so.state[l].h.data(), h[l]) < 1e-6);
      st = so.state;
      last = next;
    }
  }
}

TEST_CASE("output layer ties: all-zero weights give a uniform distribution") {
  const auto hp = tiny();
  auto p = init(hp, 2);
  p.at(model::kOutputWeight).assign(Tensor::zeros(p.at(model::kOutputWeight).shape()));
  p.at(model::kOutputBias).assign(Tensor::zeros(p.at(model::kOutputBias).shape()));
  std::vector<data::EncodedExample> exs{{{4, 5}, {6, 7, 4}, 0}, {{5}, {4}, 2}};
  auto batch = data::make_batch(exs);
  Tensor sf = ops::embedding(p.at(model::kTaskTable), batch.tasks);
  CHECK(model::teacher_forced_loss(hp, p, batch, sf).item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("attention is a distribution that ignores padding") {
  const auto hp = tiny();
  auto p = init(hp, 3, 5);
  std::vector<data::EncodedExample> exs{{{4, 5, 6, 7}, {4}, 0}, {{5, 6}, {4}, 1}};
  auto batch = data::make_batch(exs);
  auto enc = model::encode(hp, p, batch);
  Tensor sf = ops::embedding(p.at(model::kTaskTable), batch.tasks);
  const std::int32_t tok[] = {data::kBos, data::kBos};
  auto so = model::decode_step(hp, p, enc.init, tok, sf, enc);
  for (std::size_t b = 0; b < 2; ++b) {
    double s = 0;
    for (std::size_t t = 0; t < 4; ++t) s += so.attention.at(b, t);
    CHECK(s == doctest::Approx(1));
  }
  CHECK(so.attention.at(1, 2) == 0);
  CHECK(so.attention.at(1, 3) == 0);

  // Padding does not change the shorter example's result.
  auto alone = model::encode(hp, p, exs[1].query);
  const std::int32_t one[] = {data::kBos};
  auto so1 = model::decode_step(hp, p, alone.init, one, ops::slice_rows(sf, 1, 2), alone);
  for (std::size_t v = 0; v < hp.vocab_size; ++v) CHECK(so1.log_probs.at(0, v) == doctest::Approx(so.log_probs.at(1, v)));

  SUBCASE("zero bilinear weights attend uniformly") {
    p.at(model::kAttention).assign(Tensor::zeros(p.at(model::kAttention).shape()));
    auto z = model::decode_step(hp, p, enc.init, tok, sf, enc);
    for (std::size_t t = 0; t < 4; ++t) CHECK(z.attention.at(0, t) == doctest::Approx(0.25));
    CHECK(z.attention.at(1, 0) == doctest::Approx(0.5));
  }
}

TEST_CASE("duplicating a batch leaves the mean loss unchanged") {
  const auto hp = tiny(2);
  auto p = init(hp, 8, 3);
  std::vector<data::EncodedExample> exs{{{4, 5, 6}, {7, 4}, 0}, {{6}, {5, 5, 5}, 2}};
  auto twice = exs;
  twice.insert(twice.end(), exs.begin(), exs.end());
  auto b1 = data::make_batch(exs), b2 = data::make_batch(twice);
  Tensor sf1 = ops::embedding(p.at(model::kTaskTable), b1.tasks), sf2 = ops::embedding(p.at(model::kTaskTable), b2.tasks);
  CHECK(model::teacher_forced_loss(hp, p, b1, sf1).item() ==
        doctest::Approx(model::teacher_forced_loss(hp, p, b2, sf2).item()).epsilon(1e-12));
}

TEST_CASE("teacher-forced loss gradient matches central differences") {
  const auto hp = tiny(2);
  auto p = init(hp, 21, 4);
  std::vector<data::EncodedExample> exs{{{4, 5, 6}, {7, 4}, 0}, {{6}, {5, 5, 5}, 2}, {{7, 7}, {4}, 1}};
  auto batch = data::make_batch(exs);
  std::vector<Tensor> leaves;
  for (auto& [name, t] : p) leaves.push_back(t);
  auto f = [&] {
    Tensor sf = ops::embedding(p.at(model::kTaskTable), batch.tasks);
    return model::teacher_forced_loss(hp, p, batch, sf);
  };
  auto r = test::check_gradients(leaves, f);
  CHECK(r.rel_error < 1e-3);
}

TEST_CASE("training-mode dropout needs an rng and is reproducible") {
  auto hp = tiny(2);
  hp.dropout_p = 0.5;
  auto p = init(hp, 2);
  std::vector<data::EncodedExample> exs{{{4, 5}, {6}, 0}};
  auto batch = data::make_batch(exs);
  Tensor sf = ops::embedding(p.at(model::kTaskTable), batch.tasks);
  CHECK_THROWS_AS(model::teacher_forced_loss(hp, p, batch, sf, {true, nullptr}), std::invalid_argument);
  Rng r1(3), r2(3);
  CHECK(model::teacher_forced_loss(hp, p, batch, sf, {true, &r1}).item() ==
        model::teacher_forced_loss(hp, p, batch, sf, {true, &r2}).item());
}

TEST_CASE("invalid inputs are rejected") {
  const auto hp = tiny();
  auto p = init(hp, 2);
  auto enc = model::encode(hp, p, std::vector<std::int32_t>{4});
  const std::int32_t bad[] = {8};
  const std::int32_t ok[] = {4};
  CHECK_THROWS_AS(model::decode_step(hp, p, enc.init, bad, sf_row(p, 0), enc), std::out_of_range);
  CHECK_THROWS_AS(model::decode_step(hp, p, enc.init, ok, Tensor::row({1, 2, 3}), enc), ShapeError);
  CHECK_THROWS_AS(model::encode(hp, p, std::vector<std::int32_t>{9}), std::out_of_range);
  HyperParams broken = hp;
  broken.dropout_p = 1;
  CHECK_THROWS(broken.validate());
}

// ---------------------------------------------------------------------------
// Beam search

namespace {

// A fixed random next-token table indexed by the full prefix.
struct TableLm {
  std::size_t vocab;
  std::uint64_t seed;
  std::vector<Real> probs(const std::vector<std::int32_t>& prefix) const {
    std::uint64_t h = seed;
    for (auto t : prefix) h = h * 1000003u + static_cast<std::uint64_t>(t + 1);
    Rng rng(h);
    std::uniform_real_distribution<double> u(-2, 2);
    std::vector<double> logits(vocab);
    double z = 0;
    for (auto& l : logits) z += std::exp(l = u(rng));
    std::vector<Real> lp(vocab);
    for (std::size_t v = 0; v < vocab; ++v) lp[v] = static_cast<Real>(logits[v] - std::log(z));
    return lp;
  }
};

struct Best {
  std::vector<std::int32_t> tokens;
  double score = -1e300;
};

void enumerate(const TableLm& lm, std::vector<std::int32_t>& prefix, double lp, std::size_t max_len, std::int32_t eos,
               Best& best) {
  if (prefix.size() >= max_len) return;
  auto probs = lm.probs(prefix);
  for (std::size_t v = 0; v < lm.vocab; ++v) {
    const auto tok = static_cast<std::int32_t>(v);
    const double total = lp + probs[v];
    if (tok == eos) {
      const double s = total / static_cast<double>(prefix.size() + 1);
      if (s > best.score || (s == best.score && prefix < best.tokens)) best = {prefix, s};
    } else {
      prefix.push_back(tok);
      enumerate(lm, prefix, total, max_len, eos, best);
      prefix.pop_back();
    }
  }
}

}  // namespace

TEST_CASE("unpruned beam search equals exhaustive enumeration") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    TableLm lm{4, seed};
    const std::size_t max_len = 5;
    auto step = [&](const std::vector<std::int32_t>& prefix, std::int32_t last) {
      auto next = prefix;
      if (last >= 0) next.push_back(last);
      return std::make_pair(lm.probs(next), next);
    };
    auto r = model::beam_search_core(std::vector<std::int32_t>{}, step, -1, 0, 1024, max_len);
    Best best;
    std::vector<std::int32_t> prefix;
    enumerate(lm, prefix, 0, max_len, 0, best);
    CAPTURE(seed);
    CHECK(r.complete);
    CHECK(r.tokens == best.tokens);
    CHECK(r.score == best.score);
  }
}

TEST_CASE("model beam search with a wide beam equals enumeration over the model") {
  const auto hp = tiny();
  auto p = init(hp, 31, 20);
  const std::vector<std::int32_t> q{5, 6};
  auto sf = sf_row(p, 0);
  const std::size_t max_len = 3;
  auto r = model::beam_search(hp, p, q, sf, 4096, max_len);

  Ref ref{hp, p};
  auto e = ref.encode(q);
  Vec sfv{sf.at(0), sf.at(1)};
  Best best;
  std::function<void(std::vector<Vec>, std::vector<Vec>, std::int32_t, std::vector<std::int32_t>&, double)> walk =
      [&](std::vector<Vec> h, std::vector<Vec> c, std::int32_t last, std::vector<std::int32_t>& prefix, double lp) {
        if (prefix.size() >= max_len) return;
        auto [probs, att] = ref.step(h, c, last, sfv, e);
        for (std::int32_t v = 0; v < static_cast<std::int32_t>(hp.vocab_size); ++v) {
          if (v == data::kPad || v == data::kBos) continue;
          const double total = lp + probs[static_cast<std::size_t>(v)];
          if (v == data::kEos) {
            const double s = total / static_cast<double>(prefix.size() + 1);
            if (s > best.score) best = {prefix, s};
          } else {
            prefix.push_back(v);
            walk(h, c, v, prefix, total);
            prefix.pop_back();
          }
        }
      };
  std::vector<std::int32_t> prefix;
  walk(e.h, e.c, data::kBos, prefix, 0);
  REQUIRE(r.complete);
  CHECK(r.tokens == best.tokens);
  CHECK(r.score == doctest::Approx(best.score).epsilon(1e-9));
}

TEST_CASE("beam of one is greedy decoding") {
  const auto hp = tiny(2);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto p = init(hp, seed, 15);
    const std::vector<std::int32_t> q{4, 7, 5};
    auto b = model::beam_search(hp, p, q, sf_row(p, seed % 3), 1, 6);
    auto g = model::greedy_decode(hp, p, q, sf_row(p, seed % 3), 6);
    CAPTURE(seed);
    CHECK(b.tokens == g.tokens);
    CHECK(b.log_prob == doctest::Approx(g.log_prob));
  }
}

TEST_CASE("beam search never emits pad or bos and respects max length") {
  const auto hp = tiny();
  auto p = init(hp, 9, 15);
  for (std::size_t beam : {1, 2, 5}) {
    auto r = model::beam_search(hp, p, std::vector<std::int32_t>{4, 5}, sf_row(p, 2), beam, 4);
    CHECK(r.tokens.size() <= 4);
    for (auto t : r.tokens) {
      CHECK(t != data::kPad);
      CHECK(t != data::kBos);
      CHECK(t != data::kEos);
    }
  }
  CHECK_THROWS_AS(model::beam_search(hp, p, std::vector<std::int32_t>{4}, sf_row(p, 0), 0, 4), std::invalid_argument);
}

TEST_CASE("hyperparameters round-trip through checkpoint attributes") {
  auto hp = HyperParams::paper();
  hp.vocab_size = 123;
  std::map<std::string, std::string> attrs;
  hp.to_attributes(attrs);
  auto back = HyperParams::from_attributes(attrs);
  CHECK(back.vocab_size == 123);
  CHECK(back.hidden == 400);
  CHECK(back.word_dim == 300);
  CHECK(back.sf_dim == 20);
  CHECK(back.layers == 2);
  CHECK(back.dropout_p == doctest::Approx(0.3));
}
