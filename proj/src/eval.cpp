// SPDX-License-Identifier: Apache-2.0
#include "sml/eval.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "sml/graph.hpp"

namespace sml::eval {

Real perplexity(const model::HyperParams& hp, const ParamStore& params, const Tensor& table,
                std::span<const data::EncodedExample> examples, std::size_t batch_size) {
  if (examples.empty()) throw std::invalid_argument("perplexity: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("perplexity: batch size must be >= 1");
  NoGradScope no_grad;
  double total = 0;
  std::size_t tokens = 0;
  for (std::size_t begin = 0; begin < examples.size(); begin += batch_size) {
    const auto chunk = examples.subspan(begin, std::min(batch_size, examples.size() - begin));
    data::Batch batch = data::make_batch(chunk);
    Tensor sf = ops::embedding(table, batch.tasks);
    const Real loss = model::teacher_forced_loss(hp, params, batch, sf).item();
    std::size_t count = 0;
    for (auto len : batch.tgt_lengths) count += len - 1;
    total += static_cast<double>(loss) * static_cast<double>(count);
    tokens += count;
  }
  return static_cast<Real>(std::exp(total / static_cast<double>(tokens)));
}

namespace {

using Gram = std::vector<std::int32_t>;

std::map<Gram, std::size_t> count_grams(const Sequence& s, std::size_t n) {
  std::map<Gram, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Gram(s.begin() + i, s.begin() + i + n)];
  return out;
}

}  // namespace

Real bleu(std::span<const Sequence> candidates, std::span<const Sequence> references, int n) {
  if (candidates.size() != references.size()) {
    throw std::invalid_argument("bleu: " + std::to_string(candidates.size()) + " candidates but " +
                                std::to_string(references.size()) + " references");
  }
  if (n != 1 && n != 2) throw std::invalid_argument("bleu: n must be 1 or 2");
  double cand_len = 0, ref_len = 0;
  std::vector<double> matched(static_cast<std::size_t>(n), 0), total(static_cast<std::size_t>(n), 0);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (int k = 1; k <= n; ++k) {
      auto cg = count_grams(candidates[i], static_cast<std::size_t>(k));
      auto rg = count_grams(references[i], static_cast<std::size_t>(k));
      for (const auto& [g, c] : cg) {
        auto it = rg.find(g);
        matched[k - 1] += static_cast<double>(std::min(c, it == rg.end() ? 0 : it->second));
        total[k - 1] += static_cast<double>(c);
      }
    }
  }
  if (cand_len == 0 || total[0] == 0 || matched[0] == 0) return 0;
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  double log_sum = std::log(matched[0] / total[0]);
  if (n == 2) {
    const double m2 = matched[1] == 0 ? 1e-9 : matched[1];
    const double t2 = total[1] == 0 ? 1.0 : total[1];
    log_sum = 0.5 * (log_sum + std::log(m2 / t2));
  }
  return static_cast<Real>(bp * std::exp(log_sum));
}

Real distinct_n(std::span<const Sequence> candidates, int n) {
  if (n < 1) throw std::invalid_argument("distinct_n: n must be >= 1");
  std::set<Gram> unique;
  std::size_t total = 0;
  for (const auto& c : candidates) {
    for (const auto& [g, count] : count_grams(c, static_cast<std::size_t>(n))) {
      unique.insert(g);
      total += count;
    }
  }
  if (total == 0) throw std::invalid_argument("distinct_n: every candidate is shorter than n = " + std::to_string(n));
  return static_cast<Real>(unique.size()) / static_cast<Real>(total);
}

Generation evaluate(const model::HyperParams& hp, const ParamStore& params, const Tensor& table,
                    std::span<const data::EncodedExample> examples) {
  if (examples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  Generation g;
  std::vector<Sequence> refs;
  for (const auto& ex : examples) {
    Tensor sf = ops::slice_rows(table.detach(), static_cast<std::size_t>(ex.task), static_cast<std::size_t>(ex.task) + 1);
    g.outputs.push_back(model::beam_search(hp, params, ex.query, sf, hp.beam, hp.max_decode_len).tokens);
    refs.push_back(ex.response);
  }
  g.report.n_examples = examples.size();
  g.report.ppl = perplexity(hp, params, table, examples);
  g.report.bleu1 = bleu(g.outputs, refs, 1);
  g.report.bleu2 = bleu(g.outputs, refs, 2);
  auto safe_distinct = [&](int n) {
    try {
      return distinct_n(g.outputs, n);
    } catch (const std::invalid_argument&) {
      return Real{0};
    }
  };
  g.report.dist1 = safe_distinct(1);
  g.report.dist2 = safe_distinct(2);
  return g;
}

void export_heatmap(const std::filesystem::path& path, const std::vector<std::vector<Real>>& matrix,
                    const std::vector<std::string>& labels) {
  if (labels.size() != matrix.size()) {
    throw std::invalid_argument("export_heatmap: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(matrix.size()) + " tasks");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "task";
  for (const auto& l : labels) out << '\t' << l;
  out << '\n';
  char buf[32];
  for (std::size_t k = 0; k < matrix.size(); ++k) {
    out << labels[k];
    for (Real v : matrix[k]) {
      std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(v));
      out << '\t' << buf;
    }
    out << '\n';
  }
}

FamilyContrast family_contrast(const std::vector<std::vector<Real>>& matrix, const std::vector<std::string>& families) {
  if (families.size() != matrix.size()) throw std::invalid_argument("family_contrast: family count mismatch");
  double within = 0, cross = 0;
  std::size_t nw = 0, nc = 0;
  for (std::size_t i = 0; i < matrix.size(); ++i)
    for (std::size_t j = 0; j < matrix.size(); ++j) {
      if (i == j) continue;
      if (families[i] == families[j]) {
        within += matrix[i][j];
        ++nw;
      } else {
        cross += matrix[i][j];
        ++nc;
      }
    }
  FamilyContrast c;
  if (nw) c.within = static_cast<Real>(within / static_cast<double>(nw));
  if (nc) c.cross = static_cast<Real>(cross / static_cast<double>(nc));
  return c;
}

}  // namespace sml::eval
