#pragma once

// Unigram subword model with Viterbi and sampled (subword regularization)
// segmentation. Text is lowercased and split on whitespace; each word is
// segmented independently with a word-boundary marker prepended, so pieces
// never span two words.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cbag {

using TokenId = std::int32_t;

// U+2581, prefixed to every word before segmentation.
inline constexpr std::string_view kWordBoundary = "\xE2\x96\x81";

struct SpecialTokens {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnknown = 1;
  static constexpr TokenId kStart = 2;  // start of abstract
  static constexpr TokenId kEnd = 3;    // end of abstract
  static constexpr TokenId kCount = 4;
};

struct Piece {
  std::string text;
  double log_prob = 0.0;
};

class Tokenizer {
 public:
  Tokenizer() = default;
  // Pieces receive ids SpecialTokens::kCount + index.
  explicit Tokenizer(std::vector<Piece> pieces);

  std::size_t vocab_size() const { return pieces_.size() + SpecialTokens::kCount; }
  std::span<const Piece> pieces() const { return pieces_; }
  // Piece id, or -1 when absent.
  TokenId piece_id(std::string_view text) const;
  std::string_view piece_text(TokenId id) const;
  double log_prob(TokenId id) const;
  bool is_special(TokenId id) const { return id >= 0 && id < SpecialTokens::kCount; }

  // Segmentation of a raw symbol string (no lowercasing, no boundary marker).
  // `excluded` removes one piece from the lattice.
  std::vector<TokenId> segment_viterbi(std::string_view raw, TokenId excluded = -1) const;
  // Draws a segmentation with probability proportional to exp(score / temperature).
  std::vector<TokenId> segment_sampled(std::string_view raw, double temperature,
                                       std::mt19937_64& rng) const;
  double segmentation_score(std::span<const TokenId> ids) const;

  // Single word (already lowercased, no whitespace).
  std::vector<TokenId> encode_word(std::string_view word) const;
  std::vector<TokenId> encode_word_sampled(std::string_view word, double temperature,
                                           std::mt19937_64& rng) const;

  std::vector<TokenId> encode_viterbi(std::string_view text) const;
  std::vector<TokenId> encode_sampled(std::string_view text, double temperature,
                                      std::mt19937_64& rng) const;
  // Special tokens and unknown decode to the empty string.
  std::string decode(std::span<const TokenId> ids) const;

  void save(const std::filesystem::path& path) const;
  std::string serialize() const;
  static Tokenizer load(const std::filesystem::path& path);
  static Tokenizer deserialize(std::string_view text);

 private:
  struct Edge {
    std::size_t begin;
    TokenId id;
    double score;
  };
  // Edges ending at each symbol boundary (index = end offset in bytes).
  std::vector<std::vector<Edge>> lattice(std::string_view raw) const;
  double unknown_score() const;

  std::vector<Piece> pieces_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_piece_symbols_ = 1;
  double min_log_prob_ = 0.0;
};

struct UnigramTrainerOptions {
  std::size_t target_vocab = 16000;  // includes the special tokens
  std::size_t max_piece_symbols = 6;
  std::size_t min_seed_frequency = 2;
  double prune_fraction = 0.2;
  int em_iterations_per_round = 2;
  int final_em_iterations = 2;
  std::uint64_t seed = 0;
};

struct UnigramTrainingTrace {
  // Corpus log-likelihood after each EM iteration, and the index into it at
  // which each pruning step happened.
  std::vector<double> log_likelihood;
  std::vector<std::size_t> prune_points;
};

Tokenizer train_unigram(std::span<const std::string> sentences, const UnigramTrainerOptions& options,
                        UnigramTrainingTrace* trace = nullptr);

std::string lowercase(std::string_view text);
std::vector<std::string> split_whitespace(std::string_view text);
// Byte length of the UTF-8 sequence starting with this lead byte (1 for invalid bytes).
std::size_t utf8_length(unsigned char lead);
std::vector<std::string_view> utf8_symbols(std::string_view text);

}  // namespace cbag
