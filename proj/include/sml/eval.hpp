// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sml/data.hpp"
#include "sml/model.hpp"

namespace sml::eval {

struct MetricReport {
  Real ppl = 0;
  Real bleu1 = 0;
  Real bleu2 = 0;
  Real dist1 = 0;
  Real dist2 = 0;
  std::size_t n_examples = 0;
};

using Sequence = std::vector<std::int32_t>;

/// exp of the mean teacher-forced cross-entropy over every response token
/// (EOS included), in eval mode. `table` supplies the condition embedding row
/// named by each example's task index.
Real perplexity(const model::HyperParams& hp, const ParamStore& params, const Tensor& table,
                std::span<const data::EncodedExample> examples, std::size_t batch_size = 64);

/// Corpus-level BLEU with one reference per candidate and the standard brevity
/// penalty. n = 2 is the geometric mean of unigram and bigram precision, with
/// a zero bigram match count replaced by 1e-9.
Real bleu(std::span<const Sequence> candidates, std::span<const Sequence> references, int n);

/// Unique n-grams over total n-grams, pooled across candidates.
Real distinct_n(std::span<const Sequence> candidates, int n);

/// Beam-search every query and score against the responses.
struct Generation {
  std::vector<Sequence> outputs;
  MetricReport report;
};
Generation evaluate(const model::HyperParams& hp, const ParamStore& params, const Tensor& table,
                    std::span<const data::EncodedExample> examples);

/// Writes the self-attention matrix as TSV: a header of labels, then one
/// labelled row per task with weights to 6 decimals.
void export_heatmap(const std::filesystem::path& path, const std::vector<std::vector<Real>>& matrix,
                    const std::vector<std::string>& labels);

struct FamilyContrast {
  Real within = 0;  // mean weight between distinct tasks of the same family
  Real cross = 0;   // mean weight between tasks of different families
};
FamilyContrast family_contrast(const std::vector<std::vector<Real>>& matrix, const std::vector<std::string>& families);

}  // namespace sml::eval
