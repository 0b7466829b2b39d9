#include "cbag/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cbag/error.hpp"

namespace cbag {

std::vector<double> sampling_distribution(std::span<const float> logits, double temperature, std::size_t top_k,
                                          double top_p) {
  if (logits.empty()) throw UsageError("sample_next: empty logits");
  if (!(temperature >= 0.0)) throw UsageError("sample_next: temperature must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw UsageError("sample_next: top_p must lie in (0, 1]");
  const std::size_t V = logits.size();
  std::vector<double> p(V, 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  std::size_t best = 0;
  for (std::size_t i = 0; i < V; ++i) {
    const double l = logits[i];
    if (std::isnan(l) || l == std::numeric_limits<double>::infinity()) {
      throw NumericalError("sample_next: non-finite logit");
    }
    if (l > mx) {
      mx = l;
      best = i;
    }
  }
  if (!std::isfinite(mx)) throw NumericalError("sample_next: every token is masked");
  if (temperature < 1e-6) {
    p[best] = 1.0;
    return p;
  }
  double z = 0.0;
  for (std::size_t i = 0; i < V; ++i) z += (p[i] = std::exp((logits[i] - mx) / temperature));
  for (auto& x : p) x /= z;

  if (top_k > 0 || top_p < 1.0) {
    std::vector<std::size_t> order(V);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::size_t keep = top_k > 0 ? std::min(top_k, V) : V;
    if (top_p < 1.0) {
      double cum = 0.0;
      std::size_t nucleus = 0;
      while (nucleus < keep) {
        cum += p[order[nucleus++]];
        if (cum >= top_p) break;
      }
      keep = nucleus;
    }
    for (std::size_t r = keep; r < V; ++r) p[order[r]] = 0.0;
    const double kept = std::accumulate(p.begin(), p.end(), 0.0);
    if (!(kept > 0.0)) throw NumericalError("sample_next: truncation removed every token");
    for (auto& x : p) x /= kept;
  }
  return p;
}

SampleResult sample_next(std::span<const float> logits, double temperature, std::size_t top_k, double top_p,
                         std::mt19937_64& rng) {
  const auto p = sampling_distribution(logits, temperature, top_k, top_p);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last = i;
    cum += p[i];
    if (u < cum) return {static_cast<TokenId>(i), p[i]};
  }
  return {static_cast<TokenId>(last), p[last]};
}

const char* termination_name(Termination t) { return t == Termination::kEndToken ? "end_token" : "max_tokens"; }

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto push = [&](std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return;
    const auto e = s.find_last_not_of(" \t\r\n");
    out.emplace_back(s.substr(b, e - b + 1));
  };
  std::size_t begin = 0;
  for (std::size_t i = 0; i + 1 < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && std::isspace(static_cast<unsigned char>(text[i + 1]))) {
      push(text.substr(begin, i + 1 - begin));
      begin = i + 1;
    }
  }
  push(text.substr(begin));
  return out;
}

GenerationOutput generate(const Model<float>& model, const Tokenizer& tok, const ConditionVocab& cvocab,
                          const GenerationRequest& request) {
  if (request.max_tokens < 1) throw UsageError("generate: max_tokens must be >= 1");
  const auto title_ids = tok.encode_viterbi(request.title);
  if (title_ids.empty()) throw UsageError("generate: title is empty");
  const std::size_t n = model.config().max_seq;
  GenerationOutput out;
  out.ids.push_back(SpecialTokens::kStart);
  out.ids.insert(out.ids.end(), title_ids.begin(), title_ids.end());
  out.prompt_length = out.ids.size();
  if (out.prompt_length > n) {
    throw UsageError("generate: prompt of " + std::to_string(out.prompt_length) +
                     " tokens exceeds the model's maximum sequence length " + std::to_string(n));
  }
  const auto cond = cvocab.lookup(request.year, request.keywords);
  std::mt19937_64 rng(request.seed);
  compute::NoGradGuard no_grad;
  while (true) {
    // Sliding window: once the sequence reaches n tokens, condition on the most recent n - 1.
    const std::size_t context = out.ids.size() < n ? out.ids.size() : n - 1;
    const std::span<const TokenId> window(out.ids.data() + out.ids.size() - context, context);
    const auto logits = model.forward(single_sequence(window, cond), Mode::kEval).token_logits;
    const std::size_t V = logits.cols();
    const auto last = logits.values().subspan((context - 1) * V, V);
    const auto pick = sample_next(last, request.temperature, request.top_k, request.top_p, rng);
    out.ids.push_back(pick.id);
    out.probabilities.push_back(pick.probability);
    if (pick.id == SpecialTokens::kEnd) {
      out.termination = Termination::kEndToken;
      break;
    }
    if (out.ids.size() - out.prompt_length >= request.max_tokens) {
      out.termination = Termination::kMaxTokens;
      break;
    }
  }
  out.text = tok.decode(out.ids);
  out.abstract_text =
      tok.decode(std::span<const TokenId>(out.ids).subspan(out.prompt_length));
  out.sentences = split_sentences(out.abstract_text);
  return out;
}

}  // namespace cbag
