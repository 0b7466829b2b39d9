#include "cbag/condition_vocab.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "cbag/corpus.hpp"
#include "cbag/error.hpp"

namespace cbag {

ConditionVocab::ConditionVocab(int year_base, int year_count, std::vector<std::string> keywords)
    : year_base_(year_base), year_count_(year_count), keywords_(std::move(keywords)) {
  if (year_count_ < 1) throw UsageError("condition vocab: year range is empty");
  for (std::size_t i = 0; i < keywords_.size(); ++i) {
    const auto id = static_cast<std::int32_t>(static_cast<std::size_t>(year_count_) + i);
    if (!keyword_index_.emplace(keywords_[i], id).second) {
      throw DataError("condition vocab: duplicate keyword '" + keywords_[i] + "'");
    }
  }
}

ConditionVocab ConditionVocab::build(std::span<const AnnotatedRecord> records, std::size_t min_count,
                                     std::optional<int> max_year) {
  if (records.empty()) throw UsageError("condition vocab: no training records");
  if (min_count < 1) throw UsageError("condition vocab: min_count must be >= 1");
  int lo = records.front().year, hi = records.front().year;
  std::map<std::string, std::size_t> doc_freq;
  for (const auto& r : records) {
    lo = std::min(lo, r.year);
    hi = std::max(hi, r.year);
    std::set<std::string> seen(r.keywords.begin(), r.keywords.end());
    for (const auto& k : seen) ++doc_freq[k];
  }
  if (max_year) {
    if (*max_year < hi) {
      throw UsageError("condition vocab: max year " + std::to_string(*max_year) +
                       " is earlier than the latest training year " + std::to_string(hi));
    }
    hi = *max_year;
  }
  std::vector<std::string> kept;
  for (const auto& [k, f] : doc_freq)
    if (f >= min_count) kept.push_back(k);
  return ConditionVocab(lo, hi - lo + 1, std::move(kept));
}

std::int32_t ConditionVocab::year_id(int year) const {
  if (!has_year(year)) {
    throw UsageError("year " + std::to_string(year) + " outside the indexed range [" +
                     std::to_string(year_base_) + ", " + std::to_string(year_base_ + year_count_ - 1) + "]");
  }
  return year - year_base_;
}

std::optional<std::int32_t> ConditionVocab::keyword_id(std::string_view keyword) const {
  auto it = keyword_index_.find(keyword);
  if (it == keyword_index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::int32_t> ConditionVocab::lookup(int year, std::span<const std::string> keywords) const {
  std::vector<std::int32_t> ids{year_id(year)};
  for (const auto& k : keywords) {
    if (auto id = keyword_id(k); id && std::find(ids.begin() + 1, ids.end(), *id) == ids.end()) ids.push_back(*id);
  }
  return ids;
}

std::string ConditionVocab::serialize() const {
  std::ostringstream os;
  for (int y = 0; y < year_count_; ++y) os << "year\t" << (year_base_ + y) << '\t' << y << '\n';
  for (std::size_t i = 0; i < keywords_.size(); ++i) {
    os << "keyword\t" << keywords_[i] << '\t' << (static_cast<std::size_t>(year_count_) + i) << '\n';
  }
  return os.str();
}

ConditionVocab ConditionVocab::deserialize(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::vector<int> years;
  std::vector<std::pair<std::size_t, std::string>> keywords;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.rfind('\t');
    if (t1 == std::string::npos || t1 == t2) {
      throw DataError("condition vocab line " + std::to_string(line_no) + ": expected 3 fields");
    }
    const std::string type = line.substr(0, t1);
    const std::string key = line.substr(t1 + 1, t2 - t1 - 1);
    const std::size_t id = std::stoul(line.substr(t2 + 1));
    if (type == "year") {
      if (id != years.size()) throw DataError("condition vocab: year ids must be contiguous from 0");
      years.push_back(std::stoi(key));
    } else if (type == "keyword") {
      keywords.emplace_back(id, key);
    } else {
      throw DataError("condition vocab line " + std::to_string(line_no) + ": unknown entry type '" + type + "'");
    }
  }
  if (years.empty()) throw DataError("condition vocab: no year entries");
  for (std::size_t i = 1; i < years.size(); ++i) {
    if (years[i] != years[0] + static_cast<int>(i)) throw DataError("condition vocab: years must be consecutive");
  }
  std::vector<std::string> names;
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    if (keywords[i].first != years.size() + i) throw DataError("condition vocab: keyword ids must follow years");
    names.push_back(std::move(keywords[i].second));
  }
  return ConditionVocab(years[0], static_cast<int>(years.size()), std::move(names));
}

void ConditionVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write condition vocab " + path.string());
  out << serialize();
}

ConditionVocab ConditionVocab::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read condition vocab " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

}  // namespace cbag
