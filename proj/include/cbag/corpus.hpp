#pragma once

// Annotated-record ingestion, train/test split, label alignment and
// training-window sampling.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cbag/condition_vocab.hpp"
#include "cbag/tokenizer.hpp"

namespace cbag {

using LabelId = std::int32_t;

// Word-level annotation as produced by the external annotator. Labels are
// kept as strings here and indexed through LabelVocabs.
struct AnnotatedToken {
  std::string surface;
  std::string pos;
  std::string dep;
  std::string ent;
};

using AnnotatedSentence = std::vector<AnnotatedToken>;

struct AnnotatedRecord {
  std::string id;
  AnnotatedSentence title;
  std::vector<AnnotatedSentence> sentences;
  int year = 0;
  std::vector<std::string> keywords;
};

// Label inventory for one task. Id 0 is the "no label" entry carried by
// special tokens, id 1 stands for labels never seen at build time.
class LabelVocab {
 public:
  static constexpr LabelId kNone = 0;
  static constexpr LabelId kUnknown = 1;

  LabelVocab();
  LabelId add(const std::string& label);
  LabelId id(const std::string& label) const;
  const std::string& name(LabelId id) const;
  std::size_t size() const { return names_.size(); }
  std::span<const std::string> names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, LabelId> index_;
};

struct LabelVocabs {
  LabelVocab pos;
  LabelVocab dep;
  LabelVocab ent;

  static LabelVocabs build(std::span<const AnnotatedRecord> records);
  // TSV lines `task \t label \t id`, task in {pos, dep, ent}.
  std::string serialize() const;
  static LabelVocabs deserialize(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static LabelVocabs load(const std::filesystem::path& path);
};

struct LoadResult {
  std::vector<AnnotatedRecord> records;
  std::size_t lines = 0;
  std::size_t skipped = 0;
};

using WarningSink = std::function<void(const std::string&)>;

// Reads the JSONL record schema. Malformed lines are skipped, counted and
// reported through `warn`; an unreadable file throws DataError.
LoadResult load_records(const std::filesystem::path& path, const WarningSink& warn = {});
// Parses one JSONL line; throws DataError describing the defect.
AnnotatedRecord parse_record(std::string_view line);
std::string record_to_json(const AnnotatedRecord& record);
void save_records(const std::filesystem::path& path, std::span<const AnnotatedRecord> records);

struct Split {
  std::vector<AnnotatedRecord> train;
  std::vector<AnnotatedRecord> test;
};

// Unit-interval position of a document id under a seeded hash.
double split_position(std::string_view id, std::uint64_t seed);
// Drops records without a non-title sentence, then assigns each remaining
// record to train iff split_position(id, seed) < train_fraction.
Split filter_and_split(std::vector<AnnotatedRecord> records, double train_fraction, std::uint64_t seed);

// Subword stream of one document: start token, title, sentences, end token.
struct AlignedStream {
  std::vector<TokenId> ids;
  std::vector<LabelId> pos;
  std::vector<LabelId> dep;
  std::vector<LabelId> ent;
  // Stream offsets at which each segment (title, then each sentence) begins.
  // The first entry is 0 so windows over the title include the start token.
  std::vector<std::size_t> segment_starts;
};

struct SegmentationMode {
  // Zero selects deterministic Viterbi segmentation.
  double temperature = 0.0;
  std::mt19937_64* rng = nullptr;
};

AlignedStream align_labels(const AnnotatedRecord& record, const Tokenizer& tok, const LabelVocabs& labels,
                           SegmentationMode mode = {});

struct TrainingWindow {
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
  std::vector<LabelId> target_pos;
  std::vector<LabelId> target_dep;
  std::vector<LabelId> target_ent;
  std::vector<std::int32_t> condition_ids;
  std::size_t start = 0;  // stream offset of input_ids[0]
};

// Window of up to n inputs beginning at stream offset `start`, with targets
// shifted by one position.
TrainingWindow make_window(const AlignedStream& stream, std::size_t start, std::size_t n);

TrainingWindow sample_window(const AnnotatedRecord& record, const Tokenizer& tok, const ConditionVocab& cvocab,
                             const LabelVocabs& labels, std::size_t n, std::mt19937_64& rng,
                             double segmentation_temperature = 0.0);

// Right-padded batch. Arrays are row-major (batch, seq_len) and
// (batch, condition_len).
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::size_t condition_len = 0;
  std::vector<TokenId> input_ids;
  std::vector<TokenId> target_ids;
  std::vector<LabelId> target_pos;
  std::vector<LabelId> target_dep;
  std::vector<LabelId> target_ent;
  std::vector<std::uint8_t> mask;  // 1 at real positions
  std::vector<std::size_t> lengths;
  std::vector<std::int32_t> condition_ids;
  std::vector<std::size_t> condition_lengths;
};

Batch build_batch(std::span<const TrainingWindow> windows, TokenId pad_id = SpecialTokens::kPad);

// Surface text helpers: words joined by single spaces.
std::string sentence_text(const AnnotatedSentence& sentence);
std::string abstract_text(const AnnotatedRecord& record);

}  // namespace cbag
