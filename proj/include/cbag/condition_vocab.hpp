#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cbag {

struct AnnotatedRecord;

// Condition index: a contiguous block of year ids starting at 0, followed by
// one id per retained keyword.
class ConditionVocab {
 public:
  ConditionVocab() = default;
  ConditionVocab(int year_base, int year_count, std::vector<std::string> keywords);

  // Keeps keywords whose document frequency is at least min_count. Years run
  // from the earliest observed year to max_year (default: latest observed).
  static ConditionVocab build(std::span<const AnnotatedRecord> records, std::size_t min_count,
                              std::optional<int> max_year = std::nullopt);

  // Year id first, then in-vocabulary keywords in input order without
  // duplicates. Throws UsageError for years outside the indexed range.
  std::vector<std::int32_t> lookup(int year, std::span<const std::string> keywords) const;

  std::optional<std::int32_t> keyword_id(std::string_view keyword) const;
  std::int32_t year_id(int year) const;
  bool has_year(int year) const { return year >= year_base_ && year < year_base_ + year_count_; }

  int year_base() const { return year_base_; }
  int year_count() const { return year_count_; }
  std::size_t keyword_count() const { return keywords_.size(); }
  std::size_t total() const { return static_cast<std::size_t>(year_count_) + keywords_.size(); }
  std::span<const std::string> keywords() const { return keywords_; }

  // TSV lines `entry_type \t key \t id`, entry_type in {year, keyword}.
  std::string serialize() const;
  static ConditionVocab deserialize(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static ConditionVocab load(const std::filesystem::path& path);

 private:
  int year_base_ = 0;
  int year_count_ = 0;
  std::vector<std::string> keywords_;
  std::map<std::string, std::int32_t, std::less<>> keyword_index_;
};

}  // namespace cbag
