#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "cbag/corpus.hpp"
#include "cbag/error.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cbag;

namespace {

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  const auto dir = std::filesystem::temp_directory_path() / "cbag_unit";
  std::filesystem::create_directories(dir);
  const auto path = dir / name;
  std::ofstream(path) << content;
  return path;
}

AnnotatedSentence words(std::initializer_list<const char*> ws, const char* ent = "O") {
  AnnotatedSentence s;
  for (const char* w : ws) s.push_back({w, "NOUN", "dep", ent});
  return s;
}

AnnotatedRecord record(std::string id, int year = 2000) {
  AnnotatedRecord r;
  r.id = std::move(id);
  r.year = year;
  r.title = words({"a", "b"});
  r.sentences = {words({"c", "d", "e"}), words({"f", "g", "h", "i", "j"})};
  return r;
}

// One single-piece entry per letter word so every word is exactly one subword.
Tokenizer letter_words() {
  std::vector<Piece> pieces;
  for (char c = 'a'; c <= 'z'; ++c) {
    pieces.push_back({std::string(kWordBoundary) + c, -2.0});
    pieces.push_back({std::string(1, c), -5.0});
  }
  pieces.push_back({std::string(kWordBoundary), -5.0});
  return Tokenizer(pieces);
}

}  // namespace

TEST_CASE("load_records counts valid lines and skips malformed ones") {
  const std::string line =
      R"({"id":"x1","year":2001,"keywords":["k"],"title":[["A","DT","det","O"]],"sentences":[[["Cells","NOUN","nsubj","CELL"],["grow","VERB","ROOT","O"]]]})";
  auto three = temp_file("three.jsonl", line + "\n" + line + "\n\n" + line + "\n");
  auto res = load_records(three);
  CHECK(res.records.size() == 3);
  CHECK(res.skipped == 0);
  CHECK(res.records[0].title[0].surface == "a");
  CHECK(res.records[0].sentences[0][0].surface == "cells");
  CHECK(res.records[0].sentences[0][0].ent == "CELL");

  std::vector<std::string> warnings;
  auto broken = load_records(testsupport::data_path("malformed.jsonl"),
                             [&](const std::string& w) { warnings.push_back(w); });
  CHECK(broken.records.size() == 2);
  CHECK(broken.skipped == 1);
  CHECK(warnings.size() == 1);

  auto empty = load_records(temp_file("empty.jsonl", ""));
  CHECK(empty.records.empty());
  CHECK(empty.skipped == 0);

  CHECK_THROWS_AS(load_records("/nonexistent/file.jsonl"), DataError);
}

TEST_CASE("parse_record rejects defects") {
  CHECK_THROWS_AS(parse_record(R"({"id":"x","year":2001,"keywords":[],"title":[["a","b","c"]],"sentences":[]})"),
                  DataError);
  CHECK_THROWS_AS(parse_record(R"({"id":"x","keywords":[],"title":[],"sentences":[]})"), DataError);
  CHECK_THROWS_AS(parse_record(R"({"id":"x","year":2001,"keywords":[],"title":[["a b","N","d","O"]],"sentences":[]})"),
                  DataError);
  CHECK_THROWS_AS(parse_record("{"), DataError);
  auto r = parse_record(R"({"id":"x","year":2001,"keywords":[],"title":[],"sentences":[[],[["Z","N","d","O"]]]})");
  CHECK(r.sentences.size() == 1);
  CHECK(parse_record(record_to_json(r)).sentences[0][0].surface == "z");
}

TEST_CASE("seeded split: frozen count, determinism, disjointness, filtering") {
  std::vector<AnnotatedRecord> recs;
  for (int i = 0; i < 1000; ++i) recs.push_back(record("doc-" + std::to_string(i)));
  auto empty = record("no-sentences");
  empty.sentences.clear();
  recs.push_back(empty);

  // frozen from tools/oracles/split_count.py
  CHECK(split_position("doc-0", 42) == doctest::Approx(0.6762423652414296).epsilon(1e-15));
  auto split = filter_and_split(recs, 0.7, 42);
  CHECK(split.train.size() == 707);
  CHECK(split.test.size() == 293);

  auto again = filter_and_split(recs, 0.7, 42);
  std::set<std::string> train_ids, test_ids;
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    CHECK(split.train[i].id == again.train[i].id);
    train_ids.insert(split.train[i].id);
  }
  for (const auto& r : split.test) test_ids.insert(r.id);
  for (const auto& id : train_ids) CHECK(test_ids.count(id) == 0);
  CHECK(train_ids.size() + test_ids.size() == 1000);
  CHECK(train_ids.count("no-sentences") == 0);
  CHECK(test_ids.count("no-sentences") == 0);

  CHECK_THROWS_AS(filter_and_split(recs, 1.0, 1), UsageError);
  CHECK_THROWS_AS(filter_and_split(recs, 0.0, 1), UsageError);
}

TEST_CASE("label alignment: subwords inherit their word's labels") {
  std::vector<Piece> pieces{{std::string(kWordBoundary) + "nano", -1.0}, {"parti", -1.0}, {"cles", -1.0},
                            {std::string(kWordBoundary) + "x", -1.0}};
  for (char c : std::string("nanopartiles")) pieces.push_back({std::string(1, c), -8.0});
  pieces.push_back({std::string(kWordBoundary), -8.0});
  std::sort(pieces.begin(), pieces.end(), [](auto& a, auto& b) { return a.text < b.text; });
  pieces.erase(std::unique(pieces.begin(), pieces.end(), [](auto& a, auto& b) { return a.text == b.text; }),
               pieces.end());
  Tokenizer tok(pieces);
  AnnotatedRecord r;
  r.id = "n";
  r.year = 2010;
  r.title = {{"x", "SYM", "ROOT", "O"}};
  r.sentences = {{{"nanoparticles", "NOUN", "nsubj", "SIMPLE_CHEMICAL"}}};
  auto labels = LabelVocabs::build(std::vector<AnnotatedRecord>{r});
  auto s = align_labels(r, tok, labels);
  REQUIRE(s.ids.size() == 6);  // start, x, nano, parti, cles, end
  CHECK(s.ids.front() == SpecialTokens::kStart);
  CHECK(s.ids.back() == SpecialTokens::kEnd);
  const auto chem = labels.ent.id("SIMPLE_CHEMICAL");
  for (std::size_t i = 2; i <= 4; ++i) {
    CHECK(s.ent[i] == chem);
    CHECK(s.pos[i] == labels.pos.id("NOUN"));
    CHECK(s.dep[i] == labels.dep.id("nsubj"));
  }
  CHECK(s.ent[1] == labels.ent.id("O"));
  CHECK(s.pos[0] == LabelVocab::kNone);
  CHECK(s.dep[0] == LabelVocab::kNone);
  CHECK(s.ent[0] == LabelVocab::kNone);
  CHECK(s.ent[5] == LabelVocab::kNone);
  CHECK(s.segment_starts == std::vector<std::size_t>{0, 2});
  CHECK(labels.ent.id("NEVER_SEEN") == LabelVocab::kUnknown);
}

TEST_CASE("window of a 10-subword document") {
  auto tok = letter_words();
  auto r = record("ten");  // 2 title words + 8 sentence words
  auto labels = LabelVocabs::build(std::vector<AnnotatedRecord>{r});
  auto s = align_labels(r, tok, labels);
  REQUIRE(s.ids.size() == 12);
  auto w = make_window(s, 0, 128);
  CHECK(w.input_ids.size() == 11);
  CHECK(w.target_ids.size() == 11);
  CHECK(w.input_ids.front() == SpecialTokens::kStart);
  CHECK(w.target_ids.back() == SpecialTokens::kEnd);
  auto short_window = make_window(s, 3, 4);
  CHECK(short_window.input_ids.size() == 4);
  CHECK_THROWS_AS(make_window(s, 0, 1), UsageError);
  CHECK_THROWS_AS(make_window(s, 11, 4), UsageError);
}

TEST_CASE("shift alignment and window legality on random documents") {
  auto tok = letter_words();
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> len(1, 7), sentences(1, 4), letter(0, 25);
  ConditionVocab cvocab(2000, 5, {"k1", "k2"});
  for (int doc = 0; doc < 60; ++doc) {
    AnnotatedRecord r;
    r.id = "r" + std::to_string(doc);
    r.year = 2000 + doc % 5;
    auto sentence = [&] {
      AnnotatedSentence s;
      for (int i = len(rng); i > 0; --i) {
        std::string w(1, static_cast<char>('a' + letter(rng)));
        s.push_back({w, "P" + w, "D" + std::to_string(i), i % 2 ? "E" : "O"});
      }
      return s;
    };
    r.title = sentence();
    for (int i = sentences(rng); i > 0; --i) r.sentences.push_back(sentence());
    auto labels = LabelVocabs::build(std::vector<AnnotatedRecord>{r});
    auto stream = align_labels(r, tok, labels);
    for (std::size_t n : {2u, 3u, 8u, 32u}) {
      for (int draw = 0; draw < 10; ++draw) {
        auto w = sample_window(r, tok, cvocab, labels, n, rng);
        REQUIRE(w.target_ids.size() == w.input_ids.size());
        CHECK(w.target_pos.size() == w.input_ids.size());
        CHECK(w.input_ids.size() <= n);
        for (std::size_t i = 0; i < w.input_ids.size(); ++i) {
          CHECK(w.input_ids[i] == stream.ids[w.start + i]);
          CHECK(w.target_ids[i] == stream.ids[w.start + i + 1]);
          CHECK(w.target_pos[i] == stream.pos[w.start + i + 1]);
          CHECK(w.target_dep[i] == stream.dep[w.start + i + 1]);
          CHECK(w.target_ent[i] == stream.ent[w.start + i + 1]);
        }
        CHECK(std::find(stream.segment_starts.begin(), stream.segment_starts.end(), w.start) !=
              stream.segment_starts.end());
        CHECK(w.condition_ids == std::vector<std::int32_t>{r.year - 2000});
      }
    }
  }
}

TEST_CASE("sampling covers several sentence starts and keeps in-vocabulary keywords") {
  auto tok = letter_words();
  auto r = record("multi", 2003);
  r.keywords = {"k2", "unknown", "k1", "k2"};
  ConditionVocab cvocab(2000, 5, {"k1", "k2"});
  auto labels = LabelVocabs::build(std::vector<AnnotatedRecord>{r});
  std::mt19937_64 rng(1);
  std::set<std::size_t> starts;
  for (int i = 0; i < 50; ++i) {
    auto w = sample_window(r, tok, cvocab, labels, 32, rng);
    starts.insert(w.start);
    CHECK(w.condition_ids == std::vector<std::int32_t>{3, 6, 5});
  }
  CHECK(starts.size() >= 2);

  auto bare = r;
  bare.sentences.clear();
  CHECK_THROWS_AS(sample_window(bare, tok, cvocab, labels, 32, rng), DataError);
}

TEST_CASE("batch padding") {
  TrainingWindow a, b;
  a.input_ids = a.target_ids = {5, 6, 7, 8, 9};
  a.target_pos = a.target_dep = a.target_ent = {1, 1, 1, 1, 1};
  a.condition_ids = {0};
  b.input_ids = b.target_ids = {5, 6, 7, 8, 9, 10, 11, 12};
  b.target_pos = b.target_dep = b.target_ent = std::vector<LabelId>(8, 2);
  b.condition_ids = {1, 4};
  std::vector<TrainingWindow> two{a, b};
  auto batch = build_batch(two);
  CHECK(batch.batch_size == 2);
  CHECK(batch.seq_len == 8);
  CHECK(batch.condition_len == 2);
  std::size_t padded = 0;
  for (auto m : batch.mask) padded += m == 0;
  CHECK(padded == 3);
  CHECK(batch.input_ids[5] == SpecialTokens::kPad);
  CHECK(batch.lengths == std::vector<std::size_t>{5, 8});
  CHECK(batch.condition_lengths == std::vector<std::size_t>{1, 2});

  std::vector<TrainingWindow> one{a};
  auto single = build_batch(one);
  CHECK(single.seq_len == 5);
  for (auto m : single.mask) CHECK(m == 1);

  std::vector<TrainingWindow> same{a, a};
  for (auto m : build_batch(same).mask) CHECK(m == 1);

  CHECK_THROWS_AS(build_batch(std::vector<TrainingWindow>{}), UsageError);
}

TEST_CASE("label vocab serialization round trip") {
  auto p = testsupport::toy_pipeline();
  const auto text = p.labels.serialize();
  auto back = LabelVocabs::deserialize(text);
  CHECK(back.serialize() == text);
  CHECK(back.ent.size() == p.labels.ent.size());
  CHECK(back.pos.id("NOUN") == p.labels.pos.id("NOUN"));
}
