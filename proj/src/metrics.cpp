#include "cbag/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "cbag/error.hpp"
#include "cbag/generator.hpp"
#include "cbag/tokenizer.hpp"

namespace cbag {

Tokens metric_tokens(std::string_view text) { return split_whitespace(lowercase(text)); }

std::map<std::string, std::size_t> ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  std::map<std::string, std::size_t> out;
  if (n == 0 || tokens.size() < n) return out;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string g = tokens[i];
    for (std::size_t k = 1; k < n; ++k) {
      g += ' ';
      g += tokens[i + k];
    }
    ++out[g];
  }
  return out;
}

// ---- BLEU -----------------------------------------------------------------

double bleu(std::span<const std::string> candidate, std::span<const Tokens> references, std::size_t max_n) {
  if (candidate.empty() || references.empty() || max_n == 0) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto cand = ngram_counts(candidate, n);
    std::size_t total = 0;
    for (const auto& [g, c] : cand) total += c;
    if (total == 0) return 0.0;
    std::map<std::string, std::size_t> max_ref;
    for (const auto& ref : references) {
      for (const auto& [g, c] : ngram_counts(ref, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    std::size_t clipped = 0;
    for (const auto& [g, c] : cand) {
      auto it = max_ref.find(g);
      if (it != max_ref.end()) clipped += std::min(c, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(total));
  }
  const double c = static_cast<double>(candidate.size());
  std::size_t r = references[0].size();
  for (const auto& ref : references) {
    const auto d_new = std::abs(static_cast<double>(ref.size()) - c);
    const auto d_old = std::abs(static_cast<double>(r) - c);
    if (d_new < d_old || (d_new == d_old && ref.size() < r)) r = ref.size();
  }
  const double bp = c > static_cast<double>(r) ? 1.0 : std::exp(1.0 - static_cast<double>(r) / c);
  return bp * std::exp(log_sum / static_cast<double>(max_n));
}

double bleu_summed(std::span<const std::string> candidate, std::span<const Tokens> references) {
  double s = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) s += bleu(candidate, references, n);
  return s;
}

// ---- ROUGE-L --------------------------------------------------------------

std::size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(std::span<const std::string> candidate, std::span<const Tokens> references) {
  if (candidate.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref : references) {
    if (ref.empty()) continue;
    const double lcs = static_cast<double>(lcs_length(candidate, ref));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(ref.size());
    best = std::max(best, 2.0 * p * r / (p + r));
  }
  return best;
}

// ---- METEOR ---------------------------------------------------------------

namespace {

class MeteorSearch {
 public:
  MeteorSearch(std::span<const std::string> c, std::span<const std::string> r, std::size_t node_limit)
      : c_(c), r_(r), node_limit_(node_limit), used_(r.size(), false) {
    std::map<std::string, std::size_t> word_ids;
    auto id = [&](const std::string& w) { return word_ids.emplace(w, word_ids.size()).first->second; };
    for (const auto& w : c_) cw_.push_back(id(w));
    for (const auto& w : r_) rw_.push_back(id(w));
    const std::size_t W = word_ids.size();
    cand_left_.assign(W, 0);
    ref_left_.assign(W, 0);
    need_.assign(W, 0);
    for (auto w : cw_) ++cand_left_[w];
    for (auto w : rw_) ++ref_left_[w];
    for (std::size_t w = 0; w < W; ++w) {
      need_[w] = std::min(cand_left_[w], ref_left_[w]);
      best_.matches += need_[w];
    }
    best_.chunks = std::numeric_limits<std::size_t>::max();
    positions_.resize(W);
    for (std::size_t j = 0; j < r_.size(); ++j) positions_[rw_[j]].push_back(j);
  }

  MeteorAlignment run() {
    if (best_.matches == 0) return {0, 0};
    visit(0, kNone, 0);
    return best_;
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  // prev_ref: reference position matched to candidate i-1, or kNone.
  void visit(std::size_t i, std::size_t prev_ref, std::size_t chunks) {
    if (chunks >= best_.chunks) return;
    if (nodes_++ >= node_limit_ && best_.chunks != std::numeric_limits<std::size_t>::max()) return;
    if (i == c_.size()) {
      best_.chunks = chunks;
      return;
    }
    const auto w = cw_[i];
    --cand_left_[w];
    if (need_[w] > 0) {
      // Continuation of the current chunk first, then every other free position.
      const std::size_t next = prev_ref == kNone ? kNone : prev_ref + 1;
      if (next != kNone && next < r_.size() && rw_[next] == w && !used_[next]) take(i, next, chunks);
      for (auto j : positions_[w]) {
        if (j == next || used_[j]) continue;
        take(i, j, chunks + 1);
      }
    }
    // Leaving candidate i unmatched is allowed only if word w can still reach its match quota.
    if (cand_left_[w] >= need_[w]) visit(i + 1, kNone, chunks);
    ++cand_left_[w];
  }

  void take(std::size_t i, std::size_t j, std::size_t chunks) {
    const auto w = cw_[i];
    used_[j] = true;
    --need_[w];
    visit(i + 1, j, chunks);
    ++need_[w];
    used_[j] = false;
  }

  std::span<const std::string> c_, r_;
  std::size_t node_limit_;
  std::size_t nodes_ = 0;
  std::vector<bool> used_;
  std::vector<std::size_t> cw_, rw_, cand_left_, ref_left_, need_;
  std::vector<std::vector<std::size_t>> positions_;
  MeteorAlignment best_;
};

}  // namespace

MeteorAlignment meteor_align(std::span<const std::string> candidate, std::span<const std::string> reference,
                             std::size_t node_limit) {
  return MeteorSearch(candidate, reference, node_limit).run();
}

double meteor(std::span<const std::string> candidate, std::span<const Tokens> references) {
  if (candidate.empty()) return 0.0;
  double best = 0.0;
  for (const auto& ref : references) {
    if (ref.empty()) continue;
    const auto a = meteor_align(candidate, ref);
    if (a.matches == 0) continue;
    const double m = static_cast<double>(a.matches);
    const double p = m / static_cast<double>(candidate.size());
    const double r = m / static_cast<double>(ref.size());
    const double fmean = p * r / (0.9 * p + 0.1 * r);
    const double frag = static_cast<double>(a.chunks) / m;
    best = std::max(best, fmean * (1.0 - 0.5 * frag * frag * frag));
  }
  return best;
}

// ---- document frequencies -------------------------------------------------

DfCorpus DfCorpus::build(std::span<const std::vector<Tokens>> documents) {
  if (documents.empty()) throw UsageError("df corpus: no documents");
  DfCorpus out;
  out.documents_ = documents.size();
  for (const auto& doc : documents) {
    for (std::size_t n = 1; n <= kMaxN; ++n) {
      std::set<std::string> seen;
      for (const auto& sentence : doc)
        for (const auto& [g, c] : ngram_counts(sentence, n)) seen.insert(g);
      for (const auto& g : seen) ++out.table_[n - 1][g];
    }
  }
  return out;
}

std::size_t DfCorpus::df(const std::string& ngram, std::size_t n) const {
  if (n < 1 || n > kMaxN) throw UsageError("df corpus: order out of range");
  auto it = table_[n - 1].find(ngram);
  return it == table_[n - 1].end() ? 0 : it->second;
}

double DfCorpus::idf(const std::string& ngram, std::size_t n) const {
  const double d = static_cast<double>(std::max<std::size_t>(1, df(ngram, n)));
  return std::log(static_cast<double>(documents_) / d);
}

std::string DfCorpus::serialize() const {
  std::ostringstream os;
  os << "cbag-df\t1\n" << "documents\t" << documents_ << '\n';
  for (std::size_t n = 1; n <= kMaxN; ++n) {
    std::vector<std::pair<std::string, std::size_t>> rows(table_[n - 1].begin(), table_[n - 1].end());
    std::sort(rows.begin(), rows.end());
    os << "order\t" << n << '\t' << rows.size() << '\n';
    for (const auto& [g, c] : rows) os << g << '\t' << c << '\n';
  }
  return os.str();
}

DfCorpus DfCorpus::deserialize(std::string_view text) {
  DfCorpus out;
  std::istringstream in{std::string(text)};
  std::string line;
  auto fail = [](const std::string& what) { throw DataError("df corpus: " + what); };
  if (!std::getline(in, line) || line != "cbag-df\t1") fail("missing or unsupported header");
  if (!std::getline(in, line) || line.rfind("documents\t", 0) != 0) fail("missing document count");
  out.documents_ = std::stoull(line.substr(10));
  if (out.documents_ == 0) fail("document count must be >= 1");
  std::size_t n = 0, remaining = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) fail("malformed line '" + line + "'");
    if (remaining == 0) {
      if (line.rfind("order\t", 0) != 0) fail("expected an order header, got '" + line + "'");
      const auto mid = line.find('\t', 6);
      n = std::stoul(line.substr(6, mid - 6));
      remaining = std::stoull(line.substr(mid + 1));
      if (n < 1 || n > kMaxN) fail("order out of range");
      continue;
    }
    const std::size_t df = std::stoull(line.substr(tab + 1));
    if (df < 1) fail("document frequency must be >= 1");
    out.table_[n - 1][line.substr(0, tab)] = df;
    --remaining;
  }
  if (remaining != 0) fail("truncated order block");
  return out;
}

void DfCorpus::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write df corpus " + path.string());
  out << serialize();
}

DfCorpus DfCorpus::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read df corpus " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

// ---- CIDEr ----------------------------------------------------------------

namespace {

using Vector = std::map<std::string, double>;

Vector tfidf(std::span<const std::string> tokens, std::size_t n, const DfCorpus& df,
             const std::set<std::string>* masked) {
  Vector v;
  for (const auto& [g, c] : ngram_counts(tokens, n)) {
    if (masked && masked->count(g)) continue;
    v[g] = static_cast<double>(c) * df.idf(g, n);
  }
  return v;
}

double cosine(const Vector& a, const Vector& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [g, x] : a) {
    na += x * x;
    auto it = b.find(g);
    if (it != b.end()) dot += x * it->second;
  }
  for (const auto& [g, y] : b) nb += y * y;
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double cider_impl(std::span<const std::string> candidate, std::span<const Tokens> references, const DfCorpus& df,
                  std::span<const std::string> title) {
  if (candidate.empty() || references.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t n = 1; n <= DfCorpus::kMaxN; ++n) {
    std::set<std::string> masked;
    for (const auto& [g, c] : ngram_counts(title, n)) masked.insert(g);
    const auto cv = tfidf(candidate, n, df, &masked);
    double sim = 0.0;
    for (const auto& ref : references) sim += cosine(cv, tfidf(ref, n, df, &masked));
    total += sim / static_cast<double>(references.size());
  }
  return 10.0 * total / static_cast<double>(DfCorpus::kMaxN);
}

}  // namespace

double cider(std::span<const std::string> candidate, std::span<const Tokens> references, const DfCorpus& df) {
  return cider_impl(candidate, references, df, {});
}

double cider_title(std::span<const std::string> candidate, std::span<const Tokens> references,
                   std::span<const std::string> title, const DfCorpus& df) {
  return cider_impl(candidate, references, df, title);
}

SentenceScores score_sentence(std::span<const std::string> candidate, std::span<const Tokens> references,
                              std::span<const std::string> title, const DfCorpus& df) {
  SentenceScores s;
  s.bleu1 = bleu(candidate, references, 1);
  s.bleu_summed = bleu_summed(candidate, references);
  s.bleu4 = bleu(candidate, references, 4);
  s.meteor = meteor(candidate, references);
  s.rouge_l = rouge_l(candidate, references);
  s.cider = cider(candidate, references, df);
  s.cider_title = cider_title(candidate, references, title, df);
  return s;
}

// ---- report ---------------------------------------------------------------

Histogram histogram(std::span<const double> scores, double upper, std::size_t bins) {
  if (bins == 0 || !(upper > 0.0)) throw UsageError("histogram: needs at least one bin and a positive range");
  Histogram h;
  for (std::size_t i = 0; i <= bins; ++i) h.edges.push_back(upper * static_cast<double>(i) / static_cast<double>(bins));
  h.mass.assign(bins, 0.0);
  if (scores.empty()) return h;
  for (double v : scores) {
    const double pos = v / upper * static_cast<double>(bins);
    const auto idx = pos <= 0.0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(pos));
    h.mass[idx] += 1.0;
  }
  for (auto& m : h.mass) m /= static_cast<double>(scores.size());
  return h;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["generations"] = generations;
  j["sentences"] = sentence_ids.size();
  j["unmatched_count"] = unmatched_ids.size();
  j["unmatched_ids"] = unmatched_ids;
  j["notes"] = {
      {"bleu_summed", "sum of unsmoothed cumulative BLEU-1..BLEU-4"},
      {"bleu4", "conventional unsmoothed cumulative BLEU-4 (geometric mean of orders 1-4)"},
      {"brevity_penalty", "closest reference length, shorter reference on ties"},
      {"meteor", "exact unigram matches; alpha 0.9, gamma 0.5, theta 3; best reference"},
      {"rouge_l", "LCS F1 (beta 1); best reference"},
      {"cider", "TF-IDF cosine averaged over references, orders 1-4, x10; idf log(N/df), unseen df = 1"},
      {"cider_title", "cider with every title n-gram weighted zero"},
      {"histogram", "20 equal-width bins over [0, upper]; masses sum to 1"}};
  nlohmann::ordered_json metrics = nlohmann::ordered_json::object();
  for (const auto& m : this->metrics) {
    metrics[m.name] = {{"mean", m.mean},
                       {"upper", m.upper},
                       {"scores", m.scores},
                       {"histogram", {{"edges", m.hist.edges}, {"mass", m.hist.mass}}}};
  }
  j["metrics"] = std::move(metrics);
  j["sentence_ids"] = sentence_ids;
  return j.dump(2);
}

std::vector<GenerationRecord> load_generations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read generations file " + path.string());
  std::vector<GenerationRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GenerationRecord g;
      g.id = j.at("id").get<std::string>();
      if (j.contains("sentences")) {
        g.sentences = j["sentences"].get<std::vector<std::string>>();
      } else {
        g.sentences = split_sentences(j.at("generated").get<std::string>());
      }
      out.push_back(std::move(g));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed generation record: " + e.what());
    }
  }
  return out;
}

MetricReport evaluate(std::span<const GenerationRecord> generations, std::span<const AnnotatedRecord> references,
                      const DfCorpus& df, std::size_t workers) {
  struct Reference {
    std::vector<Tokens> sentences;
    Tokens title;
  };
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < references.size(); ++i) index.emplace(references[i].id, i);
  std::unordered_map<std::size_t, Reference> prepared;

  struct Task {
    Tokens candidate;
    const Reference* ref;
  };
  MetricReport report;
  report.generations = generations.size();
  std::vector<Task> tasks;
  for (const auto& g : generations) {
    auto it = index.find(g.id);
    if (it == index.end()) {
      report.unmatched_ids.push_back(g.id);
      continue;
    }
    auto [slot, fresh] = prepared.try_emplace(it->second);
    if (fresh) {
      const auto& r = references[it->second];
      for (const auto& s : r.sentences) slot->second.sentences.push_back(metric_tokens(sentence_text(s)));
      slot->second.title = metric_tokens(sentence_text(r.title));
    }
    for (const auto& s : g.sentences) {
      auto tokens = metric_tokens(s);
      if (tokens.empty()) continue;
      tasks.push_back({std::move(tokens), &slot->second});
      report.sentence_ids.push_back(g.id);
    }
  }

  std::vector<SentenceScores> scores(tasks.size());
  const std::size_t threads = std::max<std::size_t>(1, std::min(workers, tasks.size()));
  auto work = [&](std::size_t t) {
    for (std::size_t i = t; i < tasks.size(); i += threads) {
      scores[i] = score_sentence(tasks[i].candidate, tasks[i].ref->sentences, tasks[i].ref->title, df);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }

  const std::pair<const char*, std::pair<double SentenceScores::*, double>> columns[] = {
      {"bleu1", {&SentenceScores::bleu1, 1.0}},         {"bleu_summed", {&SentenceScores::bleu_summed, 4.0}},
      {"bleu4", {&SentenceScores::bleu4, 1.0}},         {"meteor", {&SentenceScores::meteor, 1.0}},
      {"rouge_l", {&SentenceScores::rouge_l, 1.0}},     {"cider", {&SentenceScores::cider, 10.0}},
      {"cider_title", {&SentenceScores::cider_title, 10.0}}};
  for (const auto& [name, spec] : columns) {
    MetricSummary m;
    m.name = name;
    m.upper = spec.second;
    for (const auto& s : scores) m.scores.push_back(s.*(spec.first));
    double sum = 0.0;
    for (double v : m.scores) sum += v;
    m.mean = m.scores.empty() ? 0.0 : sum / static_cast<double>(m.scores.size());
    m.hist = histogram(m.scores, m.upper);
    report.metrics.push_back(std::move(m));
  }
  return report;
}

}  // namespace cbag
