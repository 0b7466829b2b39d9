#pragma once

// Sentence-level multi-reference NLG metrics and the evaluation report.
// Sentences are compared as whitespace token sequences.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cbag/corpus.hpp"

namespace cbag {

using Tokens = std::vector<std::string>;

// Lowercased whitespace tokens.
Tokens metric_tokens(std::string_view text);

// n-grams joined by single spaces, with multiplicity.
std::map<std::string, std::size_t> ngram_counts(std::span<const std::string> tokens, std::size_t n);

// Unsmoothed cumulative BLEU-max_n: brevity penalty times the geometric mean
// of clipped precisions 1..max_n. An order with no candidate n-grams or no
// clipped matches gives 0. The brevity penalty uses the reference length
// closest to the candidate length (the shorter one on ties).
double bleu(std::span<const std::string> candidate, std::span<const Tokens> references, std::size_t max_n);
// Sum of cumulative BLEU-1 through BLEU-4, in [0, 4].
double bleu_summed(std::span<const std::string> candidate, std::span<const Tokens> references);

// Longest-common-subsequence F1 against the best reference.
double rouge_l(std::span<const std::string> candidate, std::span<const Tokens> references);
std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b);

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

// Exact-match alignment with the most matches and, among those, the fewest
// chunks. Searches exhaustively up to `node_limit` search nodes and keeps
// the best alignment found when the limit is hit.
MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference,
                             std::size_t node_limit = 2'000'000);
// Fmean * (1 - 0.5 (chunks/matches)^3), Fmean = P R / (0.9 P + 0.1 R); best reference.
double meteor(std::span<const std::string> candidate, std::span<const Tokens> references);

// n-gram document frequencies for n = 1..4.
class DfCorpus {
 public:
  static constexpr std::size_t kMaxN = 4;

  DfCorpus() = default;
  // Each document is a list of sentences; n-grams do not cross sentences.
  static DfCorpus build(std::span<const std::vector<Tokens>> documents);

  std::size_t documents() const { return documents_; }
  // 0 when the n-gram was never seen.
  std::size_t df(const std::string& ngram, std::size_t n) const;
  // log(documents / df), with unseen n-grams counted as df = 1.
  double idf(const std::string& ngram, std::size_t n) const;
  std::size_t entries(std::size_t n) const { return table_[n - 1].size(); }

  // Header `cbag-df \t 1`, `documents \t N`, then per order `order \t n \t
  // count` followed by `ngram \t df` lines.
  std::string serialize() const;
  static DfCorpus deserialize(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static DfCorpus load(const std::filesystem::path& path);

 private:
  std::size_t documents_ = 0;
  std::array<std::unordered_map<std::string, std::size_t>, kMaxN> table_;
};

// 10 * mean over n = 1..4 of the reference-averaged cosine similarity of
// TF-IDF n-gram vectors. Zero-norm vectors give similarity 0.
double cider(std::span<const std::string> candidate, std::span<const Tokens> references, const DfCorpus& df);
// As cider, with every n-gram that occurs in the title weighted zero.
double cider_title(std::span<const std::string> candidate, std::span<const Tokens> references,
                   std::span<const std::string> title, const DfCorpus& df);

struct SentenceScores {
  double bleu1 = 0.0, bleu_summed = 0.0, bleu4 = 0.0, meteor = 0.0, rouge_l = 0.0, cider = 0.0, cider_title = 0.0;
};

SentenceScores score_sentence(std::span<const std::string> candidate, std::span<const Tokens> references,
                              std::span<const std::string> title, const DfCorpus& df);

struct Histogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<double> mass;   // sums to 1 when any score exists
};

// Equal-width bins over [0, upper]; values at or above upper fall in the last bin.
Histogram histogram(std::span<const double> scores, double upper, std::size_t bins = 20);

struct MetricSummary {
  std::string name;
  double upper = 1.0;
  std::vector<double> scores;
  double mean = 0.0;
  Histogram hist;
};

struct GenerationRecord {
  std::string id;
  std::vector<std::string> sentences;
};

struct MetricReport {
  std::vector<MetricSummary> metrics;
  std::vector<std::string> sentence_ids;  // generation id of each scored sentence
  std::vector<std::string> unmatched_ids;
  std::size_t generations = 0;
  std::string to_json() const;
};

// Reads generation JSONL lines; uses "sentences" when present, otherwise
// splits "generated".
std::vector<GenerationRecord> load_generations(const std::filesystem::path& path);

// Scores every generated sentence against all sentences of the matching
// reference abstract. Generations whose id has no reference are listed in
// unmatched_ids and skipped.
MetricReport evaluate(std::span<const GenerationRecord> generations, std::span<const AnnotatedRecord> references,
                      const DfCorpus& df, std::size_t workers = 1);

}  // namespace cbag
