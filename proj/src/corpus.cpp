#include "cbag/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cbag/error.hpp"

namespace cbag {

using nlohmann::json;

// ---- label vocabularies ---------------------------------------------------

LabelVocab::LabelVocab() {
  add("<none>");
  add("<unk>");
}

LabelId LabelVocab::add(const std::string& label) {
  auto [it, inserted] = index_.emplace(label, static_cast<LabelId>(names_.size()));
  if (inserted) names_.push_back(label);
  return it->second;
}

LabelId LabelVocab::id(const std::string& label) const {
  auto it = index_.find(label);
  return it == index_.end() ? kUnknown : it->second;
}

const std::string& LabelVocab::name(LabelId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= names_.size()) {
    throw UsageError("label id " + std::to_string(id) + " out of range");
  }
  return names_[static_cast<std::size_t>(id)];
}

LabelVocabs LabelVocabs::build(std::span<const AnnotatedRecord> records) {
  // Sorted label names keep ids independent of record order.
  std::vector<std::string> pos, dep, ent;
  auto collect = [&](const AnnotatedSentence& s) {
    for (const auto& t : s) {
      pos.push_back(t.pos);
      dep.push_back(t.dep);
      ent.push_back(t.ent);
    }
  };
  for (const auto& r : records) {
    collect(r.title);
    for (const auto& s : r.sentences) collect(s);
  }
  LabelVocabs out;
  for (auto pair : {std::make_pair(&pos, &out.pos), std::make_pair(&dep, &out.dep), std::make_pair(&ent, &out.ent)}) {
    auto& names = *pair.first;
    std::sort(names.begin(), names.end());
    names.erase(std::unique(names.begin(), names.end()), names.end());
    for (const auto& n : names) pair.second->add(n);
  }
  return out;
}

std::string LabelVocabs::serialize() const {
  std::ostringstream os;
  const std::pair<const char*, const LabelVocab*> tasks[] = {{"pos", &pos}, {"dep", &dep}, {"ent", &ent}};
  for (const auto& [task, vocab] : tasks) {
    for (std::size_t i = 0; i < vocab->size(); ++i) os << task << '\t' << vocab->names()[i] << '\t' << i << '\n';
  }
  return os.str();
}

LabelVocabs LabelVocabs::deserialize(std::string_view text) {
  LabelVocabs out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.rfind('\t');
    if (t1 == std::string::npos || t1 == t2) throw DataError("label vocab: malformed line '" + line + "'");
    const std::string task = line.substr(0, t1);
    const std::string label = line.substr(t1 + 1, t2 - t1 - 1);
    const auto id = static_cast<LabelId>(std::stol(line.substr(t2 + 1)));
    LabelVocab* vocab = task == "pos" ? &out.pos : task == "dep" ? &out.dep : task == "ent" ? &out.ent : nullptr;
    if (!vocab) throw DataError("label vocab: unknown task '" + task + "'");
    if (vocab->add(label) != id) throw DataError("label vocab: non-sequential id for '" + label + "'");
  }
  return out;
}

void LabelVocabs::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write label vocab " + path.string());
  out << serialize();
}

LabelVocabs LabelVocabs::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read label vocab " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

// ---- JSONL ingestion ------------------------------------------------------

namespace {

AnnotatedSentence parse_tokens(const json& arr, const char* field) {
  if (!arr.is_array()) throw DataError(std::string(field) + " is not an array of tokens");
  AnnotatedSentence out;
  for (const auto& tok : arr) {
    if (!tok.is_array() || tok.size() != 4) {
      throw DataError(std::string(field) + ": token must be [surface, pos, dep, ent]");
    }
    for (const auto& f : tok) {
      if (!f.is_string()) throw DataError(std::string(field) + ": token fields must be strings");
    }
    AnnotatedToken t{lowercase(tok[0].get<std::string>()), tok[1].get<std::string>(), tok[2].get<std::string>(),
                     tok[3].get<std::string>()};
    if (t.surface.empty()) throw DataError(std::string(field) + ": empty token surface");
    if (split_whitespace(t.surface).size() != 1) {
      throw DataError(std::string(field) + ": token surface contains whitespace");
    }
    out.push_back(std::move(t));
  }
  return out;
}

json tokens_to_json(const AnnotatedSentence& s) {
  json arr = json::array();
  for (const auto& t : s) arr.push_back({t.surface, t.pos, t.dep, t.ent});
  return arr;
}

}  // namespace

AnnotatedRecord parse_record(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw DataError("record is not a JSON object");
  for (const char* key : {"id", "year", "keywords", "title", "sentences"}) {
    if (!j.contains(key)) throw DataError(std::string("missing field '") + key + "'");
  }
  AnnotatedRecord r;
  if (!j["id"].is_string()) throw DataError("id must be a string");
  if (!j["year"].is_number_integer()) throw DataError("year must be an integer");
  if (!j["keywords"].is_array()) throw DataError("keywords must be an array");
  r.id = j["id"].get<std::string>();
  r.year = j["year"].get<int>();
  for (const auto& k : j["keywords"]) {
    if (!k.is_string()) throw DataError("keywords must be strings");
    r.keywords.push_back(k.get<std::string>());
  }
  r.title = parse_tokens(j["title"], "title");
  if (!j["sentences"].is_array()) throw DataError("sentences must be an array");
  for (const auto& s : j["sentences"]) {
    auto sentence = parse_tokens(s, "sentences");
    if (!sentence.empty()) r.sentences.push_back(std::move(sentence));
  }
  return r;
}

std::string record_to_json(const AnnotatedRecord& record) {
  json j;
  j["id"] = record.id;
  j["year"] = record.year;
  j["keywords"] = record.keywords;
  j["title"] = tokens_to_json(record.title);
  json sentences = json::array();
  for (const auto& s : record.sentences) sentences.push_back(tokens_to_json(s));
  j["sentences"] = std::move(sentences);
  return j.dump();
}

LoadResult load_records(const std::filesystem::path& path, const WarningSink& warn) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read records file " + path.string());
  LoadResult result;
  std::string line;
  while (std::getline(in, line)) {
    ++result.lines;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      --result.lines;
      continue;
    }
    try {
      result.records.push_back(parse_record(line));
    } catch (const DataError& e) {
      ++result.skipped;
      if (warn) warn(path.string() + ":" + std::to_string(result.lines) + ": skipped malformed record: " + e.what());
    }
  }
  return result;
}

void save_records(const std::filesystem::path& path, std::span<const AnnotatedRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write records file " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
}

// ---- split ----------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

double split_position(std::string_view id, std::uint64_t seed) {
  const std::uint64_t x = splitmix64(fnv1a(id) ^ splitmix64(seed));
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

Split filter_and_split(std::vector<AnnotatedRecord> records, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw UsageError("train fraction must lie strictly between 0 and 1");
  }
  Split split;
  for (auto& r : records) {
    if (r.sentences.empty()) continue;
    (split_position(r.id, seed) < train_fraction ? split.train : split.test).push_back(std::move(r));
  }
  return split;
}

// ---- alignment and windows ------------------------------------------------

AlignedStream align_labels(const AnnotatedRecord& record, const Tokenizer& tok, const LabelVocabs& labels,
                           SegmentationMode mode) {
  AlignedStream s;
  auto push = [&](TokenId id, LabelId p, LabelId d, LabelId e) {
    s.ids.push_back(id);
    s.pos.push_back(p);
    s.dep.push_back(d);
    s.ent.push_back(e);
  };
  push(SpecialTokens::kStart, LabelVocab::kNone, LabelVocab::kNone, LabelVocab::kNone);
  auto add_segment = [&](const AnnotatedSentence& sentence) {
    for (const auto& word : sentence) {
      const std::string w = lowercase(word.surface);
      const auto pieces = mode.temperature > 0.0 && mode.rng
                              ? tok.encode_word_sampled(w, mode.temperature, *mode.rng)
                              : tok.encode_word(w);
      const LabelId p = labels.pos.id(word.pos), d = labels.dep.id(word.dep), e = labels.ent.id(word.ent);
      for (auto id : pieces) push(id, p, d, e);
    }
  };
  s.segment_starts.push_back(0);
  add_segment(record.title);
  for (const auto& sentence : record.sentences) {
    if (sentence.empty()) continue;
    s.segment_starts.push_back(s.ids.size());
    add_segment(sentence);
  }
  push(SpecialTokens::kEnd, LabelVocab::kNone, LabelVocab::kNone, LabelVocab::kNone);
  return s;
}

TrainingWindow make_window(const AlignedStream& stream, std::size_t start, std::size_t n) {
  if (n < 2) throw UsageError("window length must be at least 2");
  if (stream.ids.size() < 2 || start + 1 >= stream.ids.size()) {
    throw UsageError("window start " + std::to_string(start) + " leaves no target in a stream of " +
                     std::to_string(stream.ids.size()) + " tokens");
  }
  const std::size_t len = std::min(n, stream.ids.size() - 1 - start);
  TrainingWindow w;
  w.start = start;
  auto slice = [&](const auto& v, std::size_t from) {
    using V = std::decay_t<decltype(v)>;
    return V(v.begin() + static_cast<std::ptrdiff_t>(from), v.begin() + static_cast<std::ptrdiff_t>(from + len));
  };
  w.input_ids = slice(stream.ids, start);
  w.target_ids = slice(stream.ids, start + 1);
  w.target_pos = slice(stream.pos, start + 1);
  w.target_dep = slice(stream.dep, start + 1);
  w.target_ent = slice(stream.ent, start + 1);
  return w;
}

TrainingWindow sample_window(const AnnotatedRecord& record, const Tokenizer& tok, const ConditionVocab& cvocab,
                             const LabelVocabs& labels, std::size_t n, std::mt19937_64& rng,
                             double segmentation_temperature) {
  if (record.sentences.empty()) throw DataError("record " + record.id + " has no non-title sentence");
  const auto stream = align_labels(record, tok, labels, {segmentation_temperature, &rng});
  if (stream.ids.size() < 4) {
    throw DataError("record " + record.id + " is shorter than 2 subwords");
  }
  std::uniform_int_distribution<std::size_t> pick(0, stream.segment_starts.size() - 1);
  auto window = make_window(stream, stream.segment_starts[pick(rng)], n);
  window.condition_ids = cvocab.lookup(record.year, record.keywords);
  return window;
}

Batch build_batch(std::span<const TrainingWindow> windows, TokenId pad_id) {
  if (windows.empty()) throw UsageError("build_batch: empty batch");
  Batch b;
  b.batch_size = windows.size();
  for (const auto& w : windows) {
    if (w.input_ids.empty()) throw UsageError("build_batch: empty window");
    b.seq_len = std::max(b.seq_len, w.input_ids.size());
    b.condition_len = std::max(b.condition_len, w.condition_ids.size());
  }
  const std::size_t cells = b.batch_size * b.seq_len;
  b.input_ids.assign(cells, pad_id);
  b.target_ids.assign(cells, pad_id);
  b.target_pos.assign(cells, LabelVocab::kNone);
  b.target_dep.assign(cells, LabelVocab::kNone);
  b.target_ent.assign(cells, LabelVocab::kNone);
  b.mask.assign(cells, 0);
  b.condition_ids.assign(b.batch_size * b.condition_len, 0);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const auto& w = windows[i];
    const std::size_t off = i * b.seq_len;
    std::copy(w.input_ids.begin(), w.input_ids.end(), b.input_ids.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(w.target_ids.begin(), w.target_ids.end(), b.target_ids.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(w.target_pos.begin(), w.target_pos.end(), b.target_pos.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(w.target_dep.begin(), w.target_dep.end(), b.target_dep.begin() + static_cast<std::ptrdiff_t>(off));
    std::copy(w.target_ent.begin(), w.target_ent.end(), b.target_ent.begin() + static_cast<std::ptrdiff_t>(off));
    std::fill_n(b.mask.begin() + static_cast<std::ptrdiff_t>(off), w.input_ids.size(), std::uint8_t{1});
    b.lengths.push_back(w.input_ids.size());
    std::copy(w.condition_ids.begin(), w.condition_ids.end(),
              b.condition_ids.begin() + static_cast<std::ptrdiff_t>(i * b.condition_len));
    b.condition_lengths.push_back(w.condition_ids.size());
  }
  return b;
}

std::string sentence_text(const AnnotatedSentence& sentence) {
  std::string out;
  for (const auto& t : sentence) {
    if (!out.empty()) out += ' ';
    out += t.surface;
  }
  return out;
}

std::string abstract_text(const AnnotatedRecord& record) {
  std::string out;
  for (const auto& s : record.sentences) {
    if (!out.empty()) out += ' ';
    out += sentence_text(s);
  }
  return out;
}

}  // namespace cbag
