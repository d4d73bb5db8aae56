// SPDX-License-Identifier: Apache-2.0
#include "sml/model.hpp"

#include <fstream>
#include <sstream>

#include "sml/graph.hpp"

namespace sml::model {

void HyperParams::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("hyperparameter ") + name + " must be >= 1");
  };
  positive(vocab_size, "vocab_size");
  positive(word_dim, "word_dim");
  positive(sf_dim, "sf_dim");
  positive(hidden, "hidden");
  positive(layers, "layers");
  positive(beam, "beam");
  positive(max_decode_len, "max_decode_len");
  if (!(dropout_p >= 0) || dropout_p >= 1) throw std::invalid_argument("hyperparameter dropout_p must be in [0, 1)");
  if (vocab_size <= data::kNumSpecials) throw std::invalid_argument("vocab_size must exceed the 4 reserved tokens");
}

HyperParams HyperParams::desk() { return HyperParams{}; }

HyperParams HyperParams::paper() {
  HyperParams hp;
  hp.vocab_size = 30000;
  hp.word_dim = 300;
  hp.sf_dim = 20;
  hp.hidden = 400;
  hp.layers = 2;
  hp.dropout_p = 0.3;
  hp.beam = 5;
  hp.max_decode_len = 50;
  hp.gate_bias = 0;
  return hp;
}

HyperParams HyperParams::from_config(const KeyValueConfig& c, const HyperParams& base) {
  HyperParams hp = base;
  auto sz = [&](const char* key, std::size_t v) { return static_cast<std::size_t>(c.get_int(key, static_cast<long long>(v))); };
  hp.vocab_size = sz("model.vocab_cap", base.vocab_size);
  hp.word_dim = sz("model.word_dim", base.word_dim);
  hp.sf_dim = sz("model.sf_dim", base.sf_dim);
  hp.hidden = sz("model.hidden", base.hidden);
  hp.layers = sz("model.layers", base.layers);
  hp.dropout_p = static_cast<Real>(c.get_double("model.dropout", base.dropout_p));
  hp.beam = sz("model.beam", base.beam);
  hp.max_decode_len = sz("model.max_decode_len", base.max_decode_len);
  hp.gate_bias = static_cast<Real>(c.get_double("structure.gate_bias", base.gate_bias));
  return hp;
}

void HyperParams::to_attributes(std::map<std::string, std::string>& a) const {
  a["model.vocab_size"] = std::to_string(vocab_size);
  a["model.word_dim"] = std::to_string(word_dim);
  a["model.sf_dim"] = std::to_string(sf_dim);
  a["model.hidden"] = std::to_string(hidden);
  a["model.layers"] = std::to_string(layers);
  a["model.dropout"] = format_double(dropout_p);
  a["model.beam"] = std::to_string(beam);
  a["model.max_decode_len"] = std::to_string(max_decode_len);
  a["structure.gate_bias"] = format_double(gate_bias);
}

HyperParams HyperParams::from_attributes(const std::map<std::string, std::string>& a) {
  auto get = [&](const char* k) {
    auto it = a.find(k);
    if (it == a.end()) throw std::runtime_error(std::string("checkpoint missing attribute ") + k);
    return it->second;
  };
  HyperParams hp;
  hp.vocab_size = std::stoul(get("model.vocab_size"));
  hp.word_dim = std::stoul(get("model.word_dim"));
  hp.sf_dim = std::stoul(get("model.sf_dim"));
  hp.hidden = std::stoul(get("model.hidden"));
  hp.layers = std::stoul(get("model.layers"));
  hp.dropout_p = std::stod(get("model.dropout"));
  hp.beam = std::stoul(get("model.beam"));
  hp.max_decode_len = std::stoul(get("model.max_decode_len"));
  if (auto it = a.find("structure.gate_bias"); it != a.end()) hp.gate_bias = std::stod(it->second);
  return hp;
}

std::string encoder_weight(std::size_t l, bool bwd) { return "enc.l" + std::to_string(l) + (bwd ? ".bwd.W" : ".fwd.W"); }
std::string encoder_bias(std::size_t l, bool bwd) { return "enc.l" + std::to_string(l) + (bwd ? ".bwd.b" : ".fwd.b"); }
std::string decoder_weight(std::size_t l) { return "dec.l" + std::to_string(l) + ".W"; }
std::string decoder_bias(std::size_t l) { return "dec.l" + std::to_string(l) + ".b"; }
static std::string bridge_h(std::size_t l) { return "bridge.l" + std::to_string(l) + ".h"; }
static std::string bridge_c(std::size_t l) { return "bridge.l" + std::to_string(l) + ".c"; }

std::vector<std::string> decoder_parameter_names(const HyperParams& hp) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < hp.layers; ++l) {
    out.push_back(decoder_weight(l));
    out.push_back(decoder_bias(l));
  }
  out.push_back(kAttention);
  out.push_back(kCombine);
  out.push_back(kOutputWeight);
  out.push_back(kOutputBias);
  return out;
}

namespace {

std::vector<std::pair<std::string, Shape>> layout(const HyperParams& hp, std::size_t n_tasks) {
  const std::size_t H = hp.hidden;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back(kWordEmbeddings, Shape{hp.vocab_size, hp.word_dim});
  out.emplace_back(kTaskTable, Shape{n_tasks, hp.sf_dim});
  for (std::size_t l = 0; l < hp.layers; ++l) {
    const std::size_t in = l == 0 ? hp.word_dim : 2 * H;
    for (bool bwd : {false, true}) {
      out.emplace_back(encoder_weight(l, bwd), Shape{in + H, 4 * H});
      out.emplace_back(encoder_bias(l, bwd), Shape{1, 4 * H});
    }
  }
  for (std::size_t l = 0; l < hp.layers; ++l) {
    out.emplace_back(bridge_h(l), Shape{2 * H, H});
    out.emplace_back(bridge_c(l), Shape{2 * H, H});
  }
  for (std::size_t l = 0; l < hp.layers; ++l) {
    const std::size_t in = l == 0 ? hp.word_dim + hp.sf_dim : H;
    out.emplace_back(decoder_weight(l), Shape{in + H, 4 * H});
    out.emplace_back(decoder_bias(l), Shape{1, 4 * H});
  }
  out.emplace_back(kAttention, Shape{H, 2 * H});
  out.emplace_back(kCombine, Shape{3 * H, H});
  out.emplace_back(kOutputWeight, Shape{H, hp.vocab_size});
  out.emplace_back(kOutputBias, Shape{1, hp.vocab_size});
  return out;
}

void load_pretrained(Tensor& table, const HyperParams& hp, const PretrainedWords& pre) {
  std::ifstream in(pre.path);
  if (!in) throw data::DataError("cannot read pretrained embeddings " + pre.path.string());
  std::string line;
  std::size_t lineno = 0;
  auto d = table.data_mut();
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string token;
    if (!(ls >> token)) continue;
    std::vector<Real> values;
    Real v;
    while (ls >> v) values.push_back(v);
    if (values.size() != hp.word_dim) {
      throw std::invalid_argument("pretrained embeddings line " + std::to_string(lineno) + ": dimension " +
                                  std::to_string(values.size()) + " does not match word_dim " +
                                  std::to_string(hp.word_dim));
    }
    std::int32_t id = data::kUnk;
    if (pre.vocab) {
      if (!pre.vocab->contains(token)) continue;
      id = pre.vocab->id(token);
    } else {
      id = static_cast<std::int32_t>(data::kNumSpecials + lineno - 1);
      if (static_cast<std::size_t>(id) >= hp.vocab_size) continue;
    }
    std::copy(values.begin(), values.end(), d.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(id) * hp.word_dim));
  }
}

Tensor column_mask(const data::Batch& batch, std::size_t t, bool& all_valid) {
  std::vector<Real> m(batch.size);
  all_valid = true;
  for (std::size_t b = 0; b < batch.size; ++b) {
    m[b] = batch.src_mask(b, t) ? Real{1} : Real{0};
    if (m[b] == 0) all_valid = false;
  }
  return Tensor({batch.size, 1}, std::move(m));
}

LayerState lstm_cell(const Tensor& x, const LayerState& prev, const Tensor& w, const Tensor& bias, std::size_t H) {
  const Tensor xin[] = {x, prev.h};
  Tensor gates = ops::add(ops::matmul(ops::concat(xin), w), bias);
  Tensor i = ops::sigmoid(ops::slice_cols(gates, 0, H));
  Tensor f = ops::sigmoid(ops::slice_cols(gates, H, 2 * H));
  Tensor g = ops::tanh(ops::slice_cols(gates, 2 * H, 3 * H));
  Tensor o = ops::sigmoid(ops::slice_cols(gates, 3 * H, 4 * H));
  Tensor c = ops::add(ops::mul(f, prev.c), ops::mul(i, g));
  Tensor h = ops::mul(o, ops::tanh(c));
  return {h, c};
}

// Keeps the previous state where mask is 0.
LayerState masked(const LayerState& next, const LayerState& prev, const Tensor& mask) {
  return {ops::add(prev.h, ops::mul(mask, ops::sub(next.h, prev.h))),
          ops::add(prev.c, ops::mul(mask, ops::sub(next.c, prev.c)))};
}

Tensor maybe_dropout(const Tensor& x, const HyperParams& hp, const ForwardOptions& opts) {
  if (!opts.training || hp.dropout_p == 0) return x;
  if (!opts.rng) throw std::invalid_argument("training forward with dropout needs an rng");
  return ops::dropout(x, hp.dropout_p, true, *opts.rng);
}

}  // namespace

ModelParams init_params(const HyperParams& hp, std::size_t n_tasks, Rng& rng,
                        const std::optional<PretrainedWords>& pretrained) {
  hp.validate();
  if (n_tasks == 0) throw std::invalid_argument("init_params: n_tasks must be >= 1");
  ModelParams mp{hp, n_tasks, {}};
  std::uniform_real_distribution<double> unif(-0.1, 0.1);
  for (auto& [name, shape] : layout(hp, n_tasks)) {
    std::vector<Real> values(shape_numel(shape));
    for (auto& v : values) v = static_cast<Real>(unif(rng));
    mp.store.add(name, Tensor(shape, std::move(values), true));
  }
  if (pretrained) load_pretrained(mp.store.at(kWordEmbeddings), hp, *pretrained);
  return mp;
}

EncodedQuery encode(const HyperParams& hp, const ParamStore& params, const data::Batch& batch,
                    const ForwardOptions& opts) {
  batch.validate();
  const std::size_t B = batch.size, n = batch.src_len, H = hp.hidden;
  for (auto id : batch.src) {
    if (id < 0 || static_cast<std::size_t>(id) >= hp.vocab_size) {
      throw std::out_of_range("encode: token id " + std::to_string(id) + " out of range");
    }
  }

  std::vector<Tensor> masks(n);
  std::vector<bool> full(n);
  for (std::size_t t = 0; t < n; ++t) {
    bool all = true;
    masks[t] = column_mask(batch, t, all);
    full[t] = all;
  }

  // Layer inputs, one [B x width] tensor per position.
  std::vector<Tensor> inputs(n);
  const Tensor& words = params.at(kWordEmbeddings);
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<std::int32_t> ids(B);
    for (std::size_t b = 0; b < B; ++b) ids[b] = batch.src[b * n + t];
    inputs[t] = ops::embedding(words, ids);
  }

  EncodedQuery enc;
  enc.batch = B;
  enc.steps = n;
  std::vector<Tensor> outputs(n);
  for (std::size_t l = 0; l < hp.layers; ++l) {
    LayerState zero{Tensor::zeros({B, H}), Tensor::zeros({B, H})};
    std::vector<Tensor> fwd(n), bwd(n);
    LayerState s = zero;
    const Tensor& wf = params.at(encoder_weight(l, false));
    const Tensor& bf = params.at(encoder_bias(l, false));
    for (std::size_t t = 0; t < n; ++t) {
      LayerState next = lstm_cell(inputs[t], s, wf, bf, H);
      s = full[t] ? next : masked(next, s, masks[t]);
      fwd[t] = s.h;
    }
    LayerState fwd_final = s;
    s = zero;
    const Tensor& wb = params.at(encoder_weight(l, true));
    const Tensor& bb = params.at(encoder_bias(l, true));
    for (std::size_t t = n; t-- > 0;) {
      LayerState next = lstm_cell(inputs[t], s, wb, bb, H);
      s = full[t] ? next : masked(next, s, masks[t]);
      bwd[t] = s.h;
    }
    LayerState bwd_final = s;

    for (std::size_t t = 0; t < n; ++t) {
      const Tensor pair[] = {fwd[t], bwd[t]};
      outputs[t] = ops::concat(pair);
    }
    const Tensor hs[] = {fwd_final.h, bwd_final.h};
    const Tensor cs[] = {fwd_final.c, bwd_final.c};
    enc.init.push_back(LayerState{ops::tanh(ops::matmul(ops::concat(hs), params.at(bridge_h(l)))),
                                  ops::matmul(ops::concat(cs), params.at(bridge_c(l)))});
    if (l + 1 < hp.layers) {
      for (std::size_t t = 0; t < n; ++t) inputs[t] = maybe_dropout(outputs[t], hp, opts);
    }
  }
  enc.memory = ops::interleave_steps(outputs);

  bool padded = false;
  std::vector<Real> bias(B * n, Real{0});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < n; ++t)
      if (!batch.src_mask(b, t)) {
        bias[b * n + t] = Real{-1e9};
        padded = true;
      }
  if (padded) enc.score_bias = Tensor({B, n}, std::move(bias));
  return enc;
}

EncodedQuery encode(const HyperParams& hp, const ParamStore& params, std::span<const std::int32_t> query) {
  if (query.empty()) throw std::invalid_argument("encode: empty query");
  data::EncodedExample ex{std::vector<std::int32_t>(query.begin(), query.end()), {data::kEos}, 0};
  return encode(hp, params, data::make_batch(std::span<const data::EncodedExample>(&ex, 1)));
}

StepOutput decode_step(const HyperParams& hp, const ParamStore& params, const DecoderState& prev,
                       std::span<const std::int32_t> prev_tokens, const Tensor& sf_embeddings,
                       const EncodedQuery& enc, const ForwardOptions& opts) {
  const std::size_t H = hp.hidden;
  if (prev.size() != hp.layers) throw ShapeError("decode_step: state has " + std::to_string(prev.size()) + " layers");
  for (const auto& s : prev) {
    if (s.h.cols() != H || s.c.cols() != H || s.h.rows() != enc.batch) {
      throw ShapeError("decode_step: state width mismatch, got " + shape_string(s.h.shape()));
    }
  }
  for (auto t : prev_tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= hp.vocab_size) {
      throw std::out_of_range("decode_step: token id " + std::to_string(t) + " out of range");
    }
  }
  if (sf_embeddings.cols() != hp.sf_dim || sf_embeddings.rows() != enc.batch) {
    throw ShapeError("decode_step: condition embeddings " + shape_string(sf_embeddings.shape()));
  }

  const Tensor in0[] = {ops::embedding(params.at(kWordEmbeddings), prev_tokens), sf_embeddings};
  Tensor x = ops::concat(in0);
  StepOutput out;
  for (std::size_t l = 0; l < hp.layers; ++l) {
    LayerState s = lstm_cell(x, prev[l], params.at(decoder_weight(l)), params.at(decoder_bias(l)), H);
    out.state.push_back(s);
    x = l + 1 < hp.layers ? maybe_dropout(s.h, hp, opts) : s.h;
  }
  const Tensor& u = out.state.back().h;
  Tensor scores = ops::block_scores(ops::matmul(u, params.at(kAttention)), enc.memory, enc.steps);
  if (enc.score_bias.defined()) scores = ops::add(scores, enc.score_bias);
  out.attention = ops::softmax(scores);
  Tensor context = ops::block_context(out.attention, enc.memory);
  const Tensor uc[] = {u, context};
  Tensor combined = ops::tanh(ops::matmul(ops::concat(uc), params.at(kCombine)));
  combined = maybe_dropout(combined, hp, opts);
  Tensor logits = ops::add(ops::matmul(combined, params.at(kOutputWeight)), params.at(kOutputBias));
  out.log_probs = ops::log_softmax(logits);
  return out;
}

Tensor teacher_forced_loss(const HyperParams& hp, const ParamStore& params, const data::Batch& batch,
                           const Tensor& sf_embeddings, const ForwardOptions& opts) {
  batch.validate();
  EncodedQuery enc = encode(hp, params, batch, opts);
  const std::size_t B = batch.size, T = batch.tgt_len;
  DecoderState state = enc.init;
  std::vector<Tensor> steps;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;
  steps.reserve(T - 1);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    std::vector<std::int32_t> in(B);
    for (std::size_t b = 0; b < B; ++b) {
      in[b] = batch.tgt[b * T + t];
      targets.push_back(batch.tgt[b * T + t + 1]);
      mask.push_back(batch.tgt_mask(b, t + 1));
    }
    StepOutput so = decode_step(hp, params, state, in, sf_embeddings, enc, opts);
    steps.push_back(so.log_probs);
    state = std::move(so.state);
  }
  return ops::cross_entropy(ops::concat_rows(steps), targets, mask);
}

namespace {
const std::int32_t kBanned[] = {data::kPad, data::kBos};
}

BeamResult beam_search(const HyperParams& hp, const ParamStore& params, std::span<const std::int32_t> query,
                       const Tensor& sf_embedding, std::size_t beam, std::size_t max_len) {
  NoGradScope no_grad;
  EncodedQuery enc = encode(hp, params, query);
  Tensor sf = ops::reshape(sf_embedding.detach(), {1, hp.sf_dim});
  auto step = [&](const DecoderState& st, std::int32_t last) {
    const std::int32_t tok[] = {last};
    StepOutput so = decode_step(hp, params, st, tok, sf, enc);
    auto lp = so.log_probs.data();
    return std::make_pair(std::vector<Real>(lp.begin(), lp.end()), std::move(so.state));
  };
  return beam_search_core(enc.init, step, data::kBos, data::kEos, beam, max_len, kBanned);
}

BeamResult greedy_decode(const HyperParams& hp, const ParamStore& params, std::span<const std::int32_t> query,
                         const Tensor& sf_embedding, std::size_t max_len) {
  NoGradScope no_grad;
  EncodedQuery enc = encode(hp, params, query);
  Tensor sf = ops::reshape(sf_embedding.detach(), {1, hp.sf_dim});
  DecoderState st = enc.init;
  std::int32_t last = data::kBos;
  BeamResult r;
  for (std::size_t t = 0; t < max_len; ++t) {
    const std::int32_t tok[] = {last};
    StepOutput so = decode_step(hp, params, st, tok, sf, enc);
    auto lp = so.log_probs.data();
    std::int32_t best = -1;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      const auto id = static_cast<std::int32_t>(v);
      if (id == data::kPad || id == data::kBos) continue;
      if (best < 0 || lp[v] > lp[static_cast<std::size_t>(best)]) best = id;
    }
    r.log_prob += lp[static_cast<std::size_t>(best)];
    st = std::move(so.state);
    if (best == data::kEos) {
      r.complete = true;
      r.score = r.log_prob / static_cast<Real>(r.tokens.size() + 1);
      return r;
    }
    r.tokens.push_back(best);
    last = best;
  }
  r.score = r.log_prob / static_cast<Real>(r.tokens.size());
  return r;
}

}  // namespace sml::model
