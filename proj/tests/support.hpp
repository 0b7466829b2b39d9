#pragma once

// Fixtures and brute-force oracles shared by the unit and acceptance tests.
// The oracles recompute every quantity from definitions by enumeration and
// share no code with the library.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cbag/condition_vocab.hpp"
#include "cbag/corpus.hpp"
#include "cbag/tokenizer.hpp"

namespace testsupport {

inline std::string data_path(const std::string& name) { return std::string(CBAG_TEST_DATA) + "/" + name; }

struct ToyPipeline {
  std::vector<cbag::AnnotatedRecord> records;
  cbag::Tokenizer tok;
  cbag::ConditionVocab cvocab;
  cbag::LabelVocabs labels;
};

inline std::vector<std::string> tokenizer_sentences(const std::vector<cbag::AnnotatedRecord>& records) {
  std::vector<std::string> out;
  for (const auto& r : records) {
    out.push_back(cbag::sentence_text(r.title));
    for (const auto& s : r.sentences) out.push_back(cbag::sentence_text(s));
  }
  return out;
}

// Same steps as `cbag train-tokenizer --vocab-size 256` and
// `cbag build-vocab --min-count 1` on the toy corpus.
inline ToyPipeline toy_pipeline() {
  ToyPipeline p;
  p.records = cbag::load_records(data_path("toy_corpus.jsonl")).records;
  cbag::UnigramTrainerOptions opt;
  opt.target_vocab = 256;
  p.tok = cbag::train_unigram(tokenizer_sentences(p.records), opt);
  p.cvocab = cbag::ConditionVocab::build(p.records, 1);
  p.labels = cbag::LabelVocabs::build(p.records);
  return p;
}

// ---- segmentation oracle ----------------------------------------------------

struct Segmentation {
  std::vector<std::string> pieces;
  double score = 0.0;
};

// Every split of `raw` (ASCII) into pieces of the given table.
inline std::vector<Segmentation> all_segmentations(const std::string& raw, const std::map<std::string, double>& table) {
  std::vector<Segmentation> out;
  std::vector<std::string> current;
  std::function<void(std::size_t, double)> rec = [&](std::size_t pos, double score) {
    if (pos == raw.size()) {
      out.push_back({current, score});
      return;
    }
    for (std::size_t len = 1; pos + len <= raw.size(); ++len) {
      auto it = table.find(raw.substr(pos, len));
      if (it == table.end()) continue;
      current.push_back(it->first);
      rec(pos + len, score + it->second);
      current.pop_back();
    }
  };
  rec(0, 0.0);
  return out;
}

// ---- metric oracles -------------------------------------------------------

using Toks = std::vector<std::string>;

inline std::vector<Toks> grams_of(const Toks& t, std::size_t n) {
  std::vector<Toks> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) out.emplace_back(t.begin() + i, t.begin() + i + n);
  return out;
}

inline std::size_t occurrences(const Toks& g, const Toks& t) {
  std::size_t c = 0;
  for (const auto& h : grams_of(t, g.size())) c += h == g;
  return c;
}

inline double oracle_bleu(const Toks& cand, const std::vector<Toks>& refs, std::size_t max_n) {
  if (cand.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto grams = grams_of(cand, n);
    if (grams.empty()) return 0.0;
    std::set<Toks> distinct(grams.begin(), grams.end());
    double clipped = 0.0;
    for (const auto& g : distinct) {
      std::size_t best = 0;
      for (const auto& r : refs) best = std::max(best, occurrences(g, r));
      clipped += static_cast<double>(std::min(occurrences(g, cand), best));
    }
    if (clipped == 0.0) return 0.0;
    log_sum += std::log(clipped / static_cast<double>(grams.size()));
  }
  const double c = static_cast<double>(cand.size());
  double r = -1.0;
  for (const auto& ref : refs) {
    const double len = static_cast<double>(ref.size());
    if (r < 0 || std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

// Longest common subsequence by trying every subset of the candidate.
inline std::size_t oracle_lcs(const Toks& a, const Toks& b) {
  std::size_t best = 0;
  const std::size_t n = a.size();
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    Toks sub;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1) sub.push_back(a[i]);
    }
    if (sub.size() <= best) continue;
    std::size_t j = 0;
    for (const auto& t : b) {
      if (j < sub.size() && sub[j] == t) ++j;
    }
    if (j == sub.size()) best = sub.size();
  }
  return best;
}

inline double oracle_rouge_l(const Toks& cand, const std::vector<Toks>& refs) {
  double best = 0.0;
  for (const auto& r : refs) {
    const double l = static_cast<double>(oracle_lcs(cand, r));
    if (l == 0.0 || cand.empty() || r.empty()) continue;
    const double p = l / static_cast<double>(cand.size()), rc = l / static_cast<double>(r.size());
    best = std::max(best, 2.0 * p * rc / (p + rc));
  }
  return best;
}

// Enumerates every one-to-one exact-match alignment.
inline std::pair<std::size_t, std::size_t> oracle_meteor_alignment(const Toks& cand, const Toks& ref) {
  std::size_t best_m = 0, best_c = 0;
  std::vector<int> link(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  std::function<void(std::size_t)> rec = [&](std::size_t i) {
    if (i == cand.size()) {
      std::size_t m = 0, chunks = 0;
      int prev_i = -2, prev_j = -2;
      for (std::size_t k = 0; k < cand.size(); ++k) {
        if (link[k] < 0) continue;
        ++m;
        if (!(static_cast<int>(k) == prev_i + 1 && link[k] == prev_j + 1)) ++chunks;
        prev_i = static_cast<int>(k);
        prev_j = link[k];
      }
      if (m > best_m || (m == best_m && m > 0 && chunks < best_c)) {
        best_m = m;
        best_c = chunks;
      }
      return;
    }
    rec(i + 1);
    for (std::size_t j = 0; j < ref.size(); ++j) {
      if (used[j] || ref[j] != cand[i]) continue;
      used[j] = true;
      link[i] = static_cast<int>(j);
      rec(i + 1);
      link[i] = -1;
      used[j] = false;
    }
  };
  rec(0);
  return {best_m, best_c};
}

inline double oracle_meteor(const Toks& cand, const std::vector<Toks>& refs) {
  double best = 0.0;
  for (const auto& r : refs) {
    const auto [m, ch] = oracle_meteor_alignment(cand, r);
    if (m == 0) continue;
    const double p = static_cast<double>(m) / static_cast<double>(cand.size());
    const double rc = static_cast<double>(m) / static_cast<double>(r.size());
    const double fmean = 10.0 * p * rc / (rc + 9.0 * p);
    const double frag = static_cast<double>(ch) / static_cast<double>(m);
    best = std::max(best, fmean * (1.0 - 0.5 * frag * frag * frag));
  }
  return best;
}

// Document frequencies by scanning every document for every queried n-gram.
struct OracleDf {
  std::vector<std::vector<Toks>> docs;

  double idf(const Toks& g) const {
    std::size_t df = 0;
    for (const auto& d : docs) {
      bool hit = false;
      for (const auto& s : d) hit = hit || occurrences(g, s) > 0;
      df += hit;
    }
    return std::log(static_cast<double>(docs.size()) / static_cast<double>(std::max<std::size_t>(df, 1)));
  }
};

inline double oracle_cider(const Toks& cand, const std::vector<Toks>& refs, const OracleDf& df, const Toks& title = {}) {
  if (cand.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto masked = [&](const Toks& g) { return !title.empty() && occurrences(g, title) > 0; };
    auto vec = [&](const Toks& t) {
      std::map<Toks, double> v;
      for (const auto& g : grams_of(t, n)) {
        if (!masked(g)) v[g] = static_cast<double>(occurrences(g, t)) * df.idf(g);
      }
      return v;
    };
    const auto vc = vec(cand);
    double sim_sum = 0.0;
    for (const auto& r : refs) {
      const auto vr = vec(r);
      double dot = 0.0, nc = 0.0, nr = 0.0;
      for (const auto& [g, w] : vc) {
        nc += w * w;
        auto it = vr.find(g);
        if (it != vr.end()) dot += w * it->second;
      }
      for (const auto& [g, w] : vr) nr += w * w;
      if (nc > 0.0 && nr > 0.0) sim_sum += dot / (std::sqrt(nc) * std::sqrt(nr));
    }
    total += sim_sum / static_cast<double>(refs.size());
  }
  return 10.0 * total / 4.0;
}

}  // namespace testsupport
