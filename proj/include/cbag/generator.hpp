#pragma once

// Abstract generation by iterative sampling of the token head.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cbag/condition_vocab.hpp"
#include "cbag/model.hpp"
#include "cbag/tokenizer.hpp"

namespace cbag {

struct SampleResult {
  TokenId id = 0;
  double probability = 0.0;
};

// Temperature scaling, optional top-k / nucleus truncation with
// renormalization, then a multinomial draw. top_k = 0 and top_p = 1 disable
// truncation. Temperatures below 1e-6 select the argmax.
SampleResult sample_next(std::span<const float> logits, double temperature, std::size_t top_k, double top_p,
                         std::mt19937_64& rng);

// The truncated, renormalized distribution sample_next draws from.
std::vector<double> sampling_distribution(std::span<const float> logits, double temperature, std::size_t top_k,
                                          double top_p);

struct GenerationRequest {
  std::string title;
  int year = 0;
  std::vector<std::string> keywords;
  std::size_t max_tokens = 256;
  double temperature = 1.0;
  std::size_t top_k = 0;
  double top_p = 1.0;
  std::uint64_t seed = 0;
};

enum class Termination { kEndToken, kMaxTokens };
const char* termination_name(Termination t);

struct GenerationOutput {
  std::vector<TokenId> ids;  // prompt followed by generated tokens
  std::size_t prompt_length = 0;
  std::string text;           // decode(ids)
  std::string abstract_text;  // decode of the generated part only
  std::vector<std::string> sentences;
  std::vector<double> probabilities;  // chosen-token probability per step
  Termination termination = Termination::kMaxTokens;
};

// Splits after '.', '!' or '?' when followed by whitespace; drops empty pieces.
std::vector<std::string> split_sentences(std::string_view text);

GenerationOutput generate(const Model<float>& model, const Tokenizer& tok, const ConditionVocab& cvocab,
                          const GenerationRequest& request);

}  // namespace cbag
