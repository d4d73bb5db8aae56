// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sml/config.hpp"
#include "sml/data.hpp"
#include "sml/ops.hpp"
#include "sml/param_store.hpp"

/// Condition-aware encoder-decoder: a bidirectional LSTM encoder, an LSTM
/// decoder whose layer-0 input is [word embedding; condition embedding], and
/// bilinear ("general") attention feeding a tanh combine layer and a softmax
/// over the vocabulary.
///
/// All forward functions read weights from a ParamStore by name, so the same
/// code runs on plain parameters, gated parameters, or adapted copies.
namespace sml::model {

struct HyperParams {
  std::size_t vocab_size = 0;
  std::size_t word_dim = 32;
  std::size_t sf_dim = 8;
  std::size_t hidden = 32;
  std::size_t layers = 1;
  Real dropout_p = 0.1;
  std::size_t beam = 5;
  std::size_t max_decode_len = 20;
  Real gate_bias = 3;  // initial parameter-gate bias; 0 omits the bias entry

  void validate() const;
  static HyperParams desk();
  static HyperParams paper();
  // Reads `model.*` keys over the profile defaults.
  static HyperParams from_config(const KeyValueConfig& config, const HyperParams& base);
  void to_attributes(std::map<std::string, std::string>& attrs) const;
  static HyperParams from_attributes(const std::map<std::string, std::string>& attrs);
};

// Parameter names.
inline const std::string kWordEmbeddings = "embed.words";
inline const std::string kTaskTable = "sf.table";
std::string encoder_weight(std::size_t layer, bool backward);
std::string encoder_bias(std::size_t layer, bool backward);
std::string decoder_weight(std::size_t layer);
std::string decoder_bias(std::size_t layer);
inline const std::string kAttention = "attn.W_a";
inline const std::string kCombine = "out.W_h";
inline const std::string kOutputWeight = "out.W_V";
inline const std::string kOutputBias = "out.b_V";

/// Decoder LSTM weights and biases, W_a, W_h, W_V, b_V: the entries that
/// parameter gating may modulate, in store order.
std::vector<std::string> decoder_parameter_names(const HyperParams& hp);

struct ModelParams {
  HyperParams hp;
  std::size_t n_tasks = 0;
  ParamStore store;
};

struct PretrainedWords {
  std::filesystem::path path;  // lines of "token v1 ... v_word_dim"
  const data::Vocab* vocab = nullptr;
};

/// Every tensor ~ U(-0.1, 0.1) drawn in store order; word embeddings come from
/// the pretrained file where a token is listed.
ModelParams init_params(const HyperParams& hp, std::size_t n_tasks, Rng& rng,
                        const std::optional<PretrainedWords>& pretrained = std::nullopt);

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout
};

struct LayerState {
  Tensor h;
  Tensor c;
};
using DecoderState = std::vector<LayerState>;

/// Encoder output for a batch of queries. memory stacks the contextualized
/// states in blocks: rows [b*steps, (b+1)*steps) belong to example b, each
/// row the [forward; backward] state at that position.
struct EncodedQuery {
  std::size_t batch = 0;
  std::size_t steps = 0;
  Tensor memory;      // [batch*steps x 2*hidden]
  Tensor score_bias;  // [batch x steps], large negative at padding; undefined when none
  DecoderState init;  // decoder initial state per layer
};

EncodedQuery encode(const HyperParams& hp, const ParamStore& params, const data::Batch& batch,
                    const ForwardOptions& opts = {});
EncodedQuery encode(const HyperParams& hp, const ParamStore& params, std::span<const std::int32_t> query);

struct StepOutput {
  Tensor log_probs;  // [batch x vocab]
  DecoderState state;
  Tensor attention;  // [batch x steps]
};

StepOutput decode_step(const HyperParams& hp, const ParamStore& params, const DecoderState& prev,
                       std::span<const std::int32_t> prev_tokens, const Tensor& sf_embeddings,
                       const EncodedQuery& enc, const ForwardOptions& opts = {});

/// Mean token cross-entropy over non-pad response positions (teacher forcing).
/// sf_embeddings is [batch x sf_dim].
Tensor teacher_forced_loss(const HyperParams& hp, const ParamStore& params, const data::Batch& batch,
                           const Tensor& sf_embeddings, const ForwardOptions& opts = {});

// ---------------------------------------------------------------------------
// Beam search

struct BeamResult {
  std::vector<std::int32_t> tokens;  // without the end token
  Real log_prob = 0;
  Real score = 0;  // log_prob / generated length (end token included)
  bool complete = false;
};

/// Length-normalized beam search over an abstract step function
/// step(state, last_token) -> (log-probs over the vocabulary, next state).
/// Each step keeps the `beam` best expansions by cumulative log-probability;
/// expansions ending in `eos` retire as finished. Ties break toward the
/// lexicographically smaller token sequence.
template <class State, class Step>
BeamResult beam_search_core(State init, Step&& step, std::int32_t bos, std::int32_t eos, std::size_t beam,
                            std::size_t max_len, std::span<const std::int32_t> banned = {}) {
  if (beam == 0) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (max_len == 0) throw std::invalid_argument("beam_search: max_len must be >= 1");
  struct Live {
    std::vector<std::int32_t> tokens;
    Real log_prob;
    State state;
    std::int32_t last;
  };
  struct Candidate {
    std::size_t parent;
    std::int32_t token;
    Real log_prob;
  };
  std::vector<Live> live;
  live.push_back(Live{{}, Real{0}, std::move(init), bos});
  std::vector<BeamResult> finished;
  std::vector<std::vector<std::int32_t>> parent_tokens;

  auto seq_less = [&](const std::vector<std::int32_t>& pa, std::int32_t ta, const std::vector<std::int32_t>& pb,
                      std::int32_t tb) {
    auto a = pa;
    a.push_back(ta);
    auto b = pb;
    b.push_back(tb);
    return a < b;
  };

  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    std::vector<State> next_states;
    next_states.reserve(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      auto [lp, st] = step(live[i].state, live[i].last);
      next_states.push_back(std::move(st));
      for (std::size_t v = 0; v < lp.size(); ++v) {
        const auto tok = static_cast<std::int32_t>(v);
        if (std::find(banned.begin(), banned.end(), tok) != banned.end()) continue;
        cands.push_back(Candidate{i, tok, live[i].log_prob + lp[v]});
      }
    }
    const std::size_t keep = std::min(beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        return seq_less(live[a.parent].tokens, a.token, live[b.parent].tokens, b.token);
                      });
    std::vector<Live> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const auto& c = cands[i];
      auto tokens = live[c.parent].tokens;
      if (c.token == eos) {
        const Real len = static_cast<Real>(tokens.size() + 1);
        finished.push_back(BeamResult{tokens, c.log_prob, c.log_prob / len, true});
      } else {
        tokens.push_back(c.token);
        next.push_back(Live{std::move(tokens), c.log_prob, next_states[c.parent], c.token});
      }
    }
    live = std::move(next);
  }

  auto better = [](const BeamResult& a, const BeamResult& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  };
  if (finished.empty()) {
    for (const auto& l : live) {
      const Real len = static_cast<Real>(l.tokens.size());
      finished.push_back(BeamResult{l.tokens, l.log_prob, l.log_prob / len, false});
    }
  }
  return *std::min_element(finished.begin(), finished.end(), better);
}

/// Beam search with the seq2seq model for a single query.
BeamResult beam_search(const HyperParams& hp, const ParamStore& params, std::span<const std::int32_t> query,
                       const Tensor& sf_embedding, std::size_t beam, std::size_t max_len);

/// Greedy argmax decoding; the reference behaviour for beam = 1.
BeamResult greedy_decode(const HyperParams& hp, const ParamStore& params, std::span<const std::int32_t> query,
                         const Tensor& sf_embedding, std::size_t max_len);

}  // namespace sml::model
