#include "cbag/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "cbag/error.hpp"

namespace cbag {

namespace {

constexpr std::string_view kFormatHeader = "cbag-unigram";
constexpr int kFormatVersion = 1;
// Unknown symbols score this far below the least likely piece.
constexpr double kUnknownPenalty = 10.0;

double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

std::vector<std::string_view> utf8_symbols(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(text[i])), text.size() - i);
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

std::string lowercase(std::string_view text) {
  std::string out(text);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

// ---- Tokenizer ------------------------------------------------------------

Tokenizer::Tokenizer(std::vector<Piece> pieces) : pieces_(std::move(pieces)) {
  min_log_prob_ = 0.0;
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    const auto& p = pieces_[i];
    if (p.text.empty()) throw DataError("tokenizer: empty piece");
    if (!std::isfinite(p.log_prob) || p.log_prob > 0.0) {
      throw DataError("tokenizer: piece '" + p.text + "' has invalid log-probability " +
                      format_double(p.log_prob));
    }
    if (!index_.emplace(p.text, static_cast<TokenId>(i + SpecialTokens::kCount)).second) {
      throw DataError("tokenizer: duplicate piece '" + p.text + "'");
    }
    max_piece_symbols_ = std::max(max_piece_symbols_, utf8_symbols(p.text).size());
    min_log_prob_ = std::min(min_log_prob_, p.log_prob);
  }
}

TokenId Tokenizer::piece_id(std::string_view text) const {
  auto it = index_.find(std::string(text));
  return it == index_.end() ? -1 : it->second;
}

std::string_view Tokenizer::piece_text(TokenId id) const {
  if (id < SpecialTokens::kCount || static_cast<std::size_t>(id) >= vocab_size()) return {};
  return pieces_[static_cast<std::size_t>(id - SpecialTokens::kCount)].text;
}

double Tokenizer::log_prob(TokenId id) const {
  if (id == SpecialTokens::kUnknown) return unknown_score();
  if (id < SpecialTokens::kCount || static_cast<std::size_t>(id) >= vocab_size()) {
    throw UsageError("tokenizer: id " + std::to_string(id) + " has no log-probability");
  }
  return pieces_[static_cast<std::size_t>(id - SpecialTokens::kCount)].log_prob;
}

double Tokenizer::unknown_score() const { return min_log_prob_ - kUnknownPenalty; }

std::vector<std::vector<Tokenizer::Edge>> Tokenizer::lattice(std::string_view raw) const {
  std::vector<std::vector<Edge>> ends(raw.size() + 1);
  const auto symbols = utf8_symbols(raw);
  std::vector<std::size_t> offsets;
  offsets.reserve(symbols.size() + 1);
  std::size_t off = 0;
  for (auto s : symbols) {
    offsets.push_back(off);
    off += s.size();
  }
  offsets.push_back(off);
  std::string key;
  for (std::size_t s = 0; s < symbols.size(); ++s) {
    bool single_found = false;
    for (std::size_t len = 1; len <= max_piece_symbols_ && s + len <= symbols.size(); ++len) {
      const std::size_t b = offsets[s], e = offsets[s + len];
      key.assign(raw.substr(b, e - b));
      auto it = index_.find(key);
      if (it != index_.end()) {
        ends[e].push_back({b, it->second, pieces_[static_cast<std::size_t>(it->second - SpecialTokens::kCount)].log_prob});
        if (len == 1) single_found = true;
      }
    }
    if (!single_found) ends[offsets[s + 1]].push_back({offsets[s], SpecialTokens::kUnknown, unknown_score()});
  }
  return ends;
}

std::vector<TokenId> Tokenizer::segment_viterbi(std::string_view raw, TokenId excluded) const {
  if (raw.empty()) return {};
  const auto ends = lattice(raw);
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> best(raw.size() + 1, ninf);
  std::vector<const Edge*> back(raw.size() + 1, nullptr);
  best[0] = 0.0;
  for (std::size_t e = 1; e <= raw.size(); ++e) {
    for (const auto& edge : ends[e]) {
      if (best[edge.begin] == ninf || edge.id == excluded) continue;
      const double s = best[edge.begin] + edge.score;
      // Ties prefer the longer (earlier-starting) piece for determinism.
      if (s > best[e] || (s == best[e] && back[e] && edge.begin < back[e]->begin)) {
        best[e] = s;
        back[e] = &edge;
      }
    }
  }
  std::vector<TokenId> out;
  for (std::size_t pos = raw.size(); pos > 0; pos = back[pos]->begin) out.push_back(back[pos]->id);
  std::reverse(out.begin(), out.end());
  return out;
}

std::vector<TokenId> Tokenizer::segment_sampled(std::string_view raw, double temperature,
                                                std::mt19937_64& rng) const {
  if (!(temperature > 0.0)) throw UsageError("tokenizer: sampling temperature must be > 0");
  if (raw.empty()) return {};
  const auto ends = lattice(raw);
  const double ninf = -std::numeric_limits<double>::infinity();
  const double inv_t = 1.0 / temperature;
  std::vector<double> alpha(raw.size() + 1, ninf);
  alpha[0] = 0.0;
  for (std::size_t e = 1; e <= raw.size(); ++e) {
    for (const auto& edge : ends[e]) {
      if (alpha[edge.begin] == ninf) continue;
      alpha[e] = log_add(alpha[e], alpha[edge.begin] + edge.score * inv_t);
    }
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<TokenId> out;
  std::vector<double> weights;
  std::size_t pos = raw.size();
  while (pos > 0) {
    const auto& candidates = ends[pos];
    weights.clear();
    double mx = ninf;
    for (const auto& edge : candidates) {
      const double w = alpha[edge.begin] == ninf ? ninf : alpha[edge.begin] + edge.score * inv_t;
      weights.push_back(w);
      mx = std::max(mx, w);
    }
    double total = 0.0;
    for (auto& w : weights) total += (w = (w == ninf ? 0.0 : std::exp(w - mx)));
    double u = unit(rng) * total;
    std::size_t chosen = 0;
    for (; chosen + 1 < weights.size(); ++chosen) {
      if (u < weights[chosen]) break;
      u -= weights[chosen];
    }
    while (weights[chosen] == 0.0 && chosen > 0) --chosen;
    out.push_back(candidates[chosen].id);
    pos = candidates[chosen].begin;
  }
  std::reverse(out.begin(), out.end());
  return out;
}

double Tokenizer::segmentation_score(std::span<const TokenId> ids) const {
  double s = 0.0;
  for (auto id : ids) s += log_prob(id);
  return s;
}

std::vector<TokenId> Tokenizer::encode_word(std::string_view word) const {
  std::string raw(kWordBoundary);
  raw += word;
  return segment_viterbi(raw);
}

std::vector<TokenId> Tokenizer::encode_word_sampled(std::string_view word, double temperature,
                                                    std::mt19937_64& rng) const {
  std::string raw(kWordBoundary);
  raw += word;
  return segment_sampled(raw, temperature, rng);
}

std::vector<TokenId> Tokenizer::encode_viterbi(std::string_view text) const {
  std::vector<TokenId> out;
  for (const auto& w : split_whitespace(lowercase(text))) {
    auto ids = encode_word(w);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::vector<TokenId> Tokenizer::encode_sampled(std::string_view text, double temperature,
                                               std::mt19937_64& rng) const {
  std::vector<TokenId> out;
  for (const auto& w : split_whitespace(lowercase(text))) {
    auto ids = encode_word_sampled(w, temperature, rng);
    out.insert(out.end(), ids.begin(), ids.end());
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string joined;
  for (auto id : ids) joined += piece_text(id);
  std::string out;
  out.reserve(joined.size());
  std::size_t i = 0;
  while (i < joined.size()) {
    if (joined.compare(i, kWordBoundary.size(), kWordBoundary) == 0) {
      if (!out.empty()) out += ' ';
      i += kWordBoundary.size();
    } else {
      out += joined[i++];
    }
  }
  return out;
}

std::string Tokenizer::serialize() const {
  std::ostringstream os;
  os << kFormatHeader << '\t' << kFormatVersion << '\n';
  os << "special\tpad\t" << SpecialTokens::kPad << '\n';
  os << "special\tunknown\t" << SpecialTokens::kUnknown << '\n';
  os << "special\tstart\t" << SpecialTokens::kStart << '\n';
  os << "special\tend\t" << SpecialTokens::kEnd << '\n';
  os << "pieces\t" << pieces_.size() << '\n';
  for (const auto& p : pieces_) os << p.text << '\t' << format_double(p.log_prob) << '\n';
  return os.str();
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write tokenizer model " + path.string());
  out << serialize();
}

Tokenizer Tokenizer::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  auto fail = [](const std::string& why) -> DataError { return DataError("tokenizer model: " + why); };
  if (!std::getline(in, line)) throw fail("empty file");
  if (line != std::string(kFormatHeader) + "\t" + std::to_string(kFormatVersion)) {
    throw fail("unsupported header '" + line + "'");
  }
  const std::pair<const char*, TokenId> expected[] = {{"pad", SpecialTokens::kPad},
                                                      {"unknown", SpecialTokens::kUnknown},
                                                      {"start", SpecialTokens::kStart},
                                                      {"end", SpecialTokens::kEnd}};
  for (const auto& [name, id] : expected) {
    if (!std::getline(in, line) || line != std::string("special\t") + name + "\t" + std::to_string(id)) {
      throw fail(std::string("bad special-token line for ") + name);
    }
  }
  if (!std::getline(in, line) || line.rfind("pieces\t", 0) != 0) throw fail("missing piece count");
  const std::size_t count = std::stoul(line.substr(7));
  std::vector<Piece> pieces;
  pieces.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    if (!std::getline(in, line)) throw fail("truncated piece table");
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos || tab == 0) throw fail("malformed piece line " + std::to_string(i));
    pieces.push_back({line.substr(0, tab), std::strtod(line.c_str() + tab + 1, nullptr)});
  }
  return Tokenizer(std::move(pieces));
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read tokenizer model " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

// ---- training -------------------------------------------------------------

namespace {

struct TrainingPiece {
  std::string text;
  double log_prob;
  bool required;  // single symbols are never pruned
};

struct WordCount {
  std::string raw;  // boundary marker + word
  double count;
};

Tokenizer build(const std::vector<TrainingPiece>& pieces) {
  std::vector<Piece> out;
  out.reserve(pieces.size());
  for (const auto& p : pieces) out.push_back({p.text, p.log_prob});
  return Tokenizer(std::move(out));
}

// One EM iteration; returns the corpus log-likelihood under the incoming model.
double em_iteration(std::vector<TrainingPiece>& pieces, const std::vector<WordCount>& words,
                    std::size_t max_symbols) {
  const Tokenizer model = build(pieces);
  std::vector<double> expected(pieces.size(), 0.0);
  const double ninf = -std::numeric_limits<double>::infinity();
  double log_likelihood = 0.0;
  for (const auto& w : words) {
    const auto& raw = w.raw;
    // Forward-backward over the segmentation lattice.
    struct E {
      std::size_t begin, end;
      TokenId id;
      double score;
    };
    std::vector<E> edges;
    {
      const auto symbols = utf8_symbols(raw);
      std::vector<std::size_t> offsets{0};
      for (auto s : symbols) offsets.push_back(offsets.back() + s.size());
      for (std::size_t s = 0; s < symbols.size(); ++s) {
        for (std::size_t e = s + 1; e <= std::min(symbols.size(), s + max_symbols); ++e) {
          const TokenId id = model.piece_id(std::string_view(raw).substr(offsets[s], offsets[e] - offsets[s]));
          if (id >= 0) edges.push_back({offsets[s], offsets[e], id, model.log_prob(id)});
        }
      }
    }
    std::vector<double> alpha(raw.size() + 1, ninf), beta(raw.size() + 1, ninf);
    alpha[0] = 0.0;
    std::sort(edges.begin(), edges.end(), [](const E& a, const E& b) { return a.end < b.end; });
    for (const auto& e : edges) alpha[e.end] = log_add(alpha[e.end], alpha[e.begin] + e.score);
    beta[raw.size()] = 0.0;
    std::vector<E> by_begin = edges;
    std::sort(by_begin.begin(), by_begin.end(), [](const E& a, const E& b) { return a.begin > b.begin; });
    for (const auto& e : by_begin) beta[e.begin] = log_add(beta[e.begin], e.score + beta[e.end]);
    const double z = alpha[raw.size()];
    if (z == ninf) throw DataError("unigram trainer: word '" + raw + "' cannot be segmented");
    log_likelihood += w.count * z;
    for (const auto& e : edges) {
      const double post = std::exp(alpha[e.begin] + e.score + beta[e.end] - z);
      expected[static_cast<std::size_t>(e.id - SpecialTokens::kCount)] += w.count * post;
    }
  }
  // Every piece keeps a pseudo-count of e^-10 occurrences, so unused pieces
  // stay finite without the floor drifting from one iteration to the next.
  const double floor_count = std::exp(-kUnknownPenalty);
  double total = 0.0;
  for (auto& c : expected) total += (c = std::max(c, floor_count));
  const double log_total = std::log(total);
  for (std::size_t i = 0; i < pieces.size(); ++i) pieces[i].log_prob = std::log(expected[i]) - log_total;
  return log_likelihood;
}

// Removes the prunable pieces whose removal costs the least likelihood.
void prune(std::vector<TrainingPiece>& pieces, const std::vector<WordCount>& words, std::size_t target,
           double fraction) {
  const Tokenizer model = build(pieces);
  std::vector<double> freq(pieces.size(), 0.0), inverted(pieces.size(), 0.0);
  double word_total = 0.0;
  for (const auto& w : words) {
    word_total += w.count;
    std::set<TokenId> seen;
    for (auto id : model.segment_viterbi(w.raw)) {
      const auto i = static_cast<std::size_t>(id - SpecialTokens::kCount);
      freq[i] += w.count;
      if (seen.insert(id).second) inverted[i] += w.count;
    }
  }
  double sum = 0.0;
  for (double f : freq) sum += f;
  const double log_sum = std::log(sum);

  std::vector<std::pair<double, std::size_t>> scored;
  std::size_t prunable = 0;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (pieces[i].required) continue;
    ++prunable;
    double loss = 0.0;
    if (freq[i] > 0.0) {
      // Alternative segmentation of the piece with the piece itself removed.
      const auto alt = model.segment_viterbi(pieces[i].text, static_cast<TokenId>(i + SpecialTokens::kCount));
      const double logprob_piece = std::log(freq[i]) - log_sum;
      const double log_sum_alt = std::log(sum + freq[i] * (static_cast<double>(alt.size()) - 1.0));
      double logprob_alt = 0.0;
      for (auto id : alt) {
        const auto j = static_cast<std::size_t>(id - SpecialTokens::kCount);
        logprob_alt += std::log(freq[j] + freq[i]) - log_sum_alt;
      }
      loss = (inverted[i] / word_total) * (logprob_piece - logprob_alt);
    }
    scored.emplace_back(loss, i);
  }
  if (prunable == 0) return;
  std::size_t remove = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(prunable)));
  remove = std::max<std::size_t>(1, std::min(remove, pieces.size() - target));
  std::stable_sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return pieces[a.second].text < pieces[b.second].text;
  });
  std::vector<bool> drop(pieces.size(), false);
  for (std::size_t r = 0; r < remove && r < scored.size(); ++r) drop[scored[r].second] = true;
  std::vector<TrainingPiece> kept;
  for (std::size_t i = 0; i < pieces.size(); ++i)
    if (!drop[i]) kept.push_back(std::move(pieces[i]));
  pieces = std::move(kept);
}

}  // namespace

Tokenizer train_unigram(std::span<const std::string> sentences, const UnigramTrainerOptions& options,
                        UnigramTrainingTrace* trace) {
  if (sentences.empty()) throw UsageError("train_unigram: empty corpus");
  std::map<std::string, double> word_counts;
  for (const auto& s : sentences) {
    for (const auto& w : split_whitespace(lowercase(s))) word_counts[std::string(kWordBoundary) + w] += 1.0;
  }
  if (word_counts.empty()) throw UsageError("train_unigram: corpus has no words");
  std::vector<WordCount> words;
  for (const auto& [raw, c] : word_counts) words.push_back({raw, c});

  // Seed: every symbol, plus substrings up to max_piece_symbols with enough occurrences.
  std::map<std::string, double> symbol_freq, substring_freq;
  for (const auto& w : words) {
    const auto symbols = utf8_symbols(w.raw);
    for (std::size_t s = 0; s < symbols.size(); ++s) {
      symbol_freq[std::string(symbols[s])] += w.count;
      std::string sub(symbols[s]);
      for (std::size_t len = 2; len <= options.max_piece_symbols && s + len <= symbols.size(); ++len) {
        sub += symbols[s + len - 1];
        substring_freq[sub] += w.count;
      }
    }
  }
  const std::size_t alphabet = symbol_freq.size();
  if (options.target_vocab < alphabet + SpecialTokens::kCount) {
    throw UsageError("train_unigram: target vocabulary " + std::to_string(options.target_vocab) +
                     " is smaller than the alphabet (" + std::to_string(alphabet) + ") plus " +
                     std::to_string(SpecialTokens::kCount) + " special tokens");
  }
  const std::size_t target_pieces = options.target_vocab - SpecialTokens::kCount;

  double total = 0.0;
  for (const auto& [_, f] : symbol_freq) total += f;
  for (const auto& [_, f] : substring_freq)
    if (f >= static_cast<double>(options.min_seed_frequency)) total += f;
  std::vector<TrainingPiece> pieces;
  for (const auto& [text, f] : symbol_freq) pieces.push_back({text, std::log(f / total), true});
  for (const auto& [text, f] : substring_freq) {
    if (f >= static_cast<double>(options.min_seed_frequency)) pieces.push_back({text, std::log(f / total), false});
  }

  UnigramTrainingTrace local;
  UnigramTrainingTrace& tr = trace ? *trace : local;
  while (pieces.size() > target_pieces) {
    for (int i = 0; i < options.em_iterations_per_round; ++i) tr.log_likelihood.push_back(em_iteration(pieces, words, options.max_piece_symbols));
    const std::size_t before = pieces.size();
    prune(pieces, words, target_pieces, options.prune_fraction);
    tr.prune_points.push_back(tr.log_likelihood.size());
    if (pieces.size() == before) break;
  }
  for (int i = 0; i < options.final_em_iterations; ++i) tr.log_likelihood.push_back(em_iteration(pieces, words, options.max_piece_symbols));

  std::stable_sort(pieces.begin(), pieces.end(), [](const TrainingPiece& a, const TrainingPiece& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.text < b.text;
  });
  return build(pieces);
}

}  // namespace cbag
