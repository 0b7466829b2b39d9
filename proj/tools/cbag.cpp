// cbag: command-line front end for tokenizer training, vocabulary building,
// model training, generation and evaluation.

#include <algorithm>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cbag/checkpoint.hpp"
#include "cbag/condition_vocab.hpp"
#include "cbag/config.hpp"
#include "cbag/corpus.hpp"
#include "cbag/error.hpp"
#include "cbag/generator.hpp"
#include "cbag/metrics.hpp"
#include "cbag/tokenizer.hpp"
#include "cbag/trainer.hpp"

namespace fs = std::filesystem;
using namespace cbag;

namespace {

std::vector<AnnotatedRecord> read_records(const fs::path& path) {
  auto result = load_records(path, [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; });
  if (result.skipped) {
    std::cerr << path.string() << ": " << result.skipped << " of " << result.lines << " lines skipped\n";
  }
  return std::move(result.records);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Output stream that is stdout for "-" or an empty path.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_.open(path, std::ios::binary);
      if (!file_) throw DataError("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

std::vector<std::size_t> sample_indices(std::size_t total, std::size_t sample, std::uint64_t seed) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), 0);
  if (sample < total) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(sample);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

std::vector<std::string> split_keywords(const std::vector<std::string>& raw) {
  std::vector<std::string> out;
  for (const auto& item : raw) {
    std::stringstream ss(item);
    std::string k;
    while (std::getline(ss, k, ',')) {
      const auto b = k.find_first_not_of(' ');
      if (b == std::string::npos) continue;
      out.push_back(k.substr(b, k.find_last_not_of(' ') - b + 1));
    }
  }
  return out;
}

// ---- split ----------------------------------------------------------------

struct SplitArgs {
  std::string input, train_out, test_out;
  double fraction = 0.7;
  std::uint64_t seed = 0;
};

int run_split(const SplitArgs& a) {
  auto split = filter_and_split(read_records(a.input), a.fraction, a.seed);
  save_records(a.train_out, split.train);
  save_records(a.test_out, split.test);
  std::cout << "train " << split.train.size() << " test " << split.test.size() << '\n';
  return 0;
}

// ---- train-tokenizer ------------------------------------------------------

struct TokenizerArgs {
  std::string input, out;
  std::size_t vocab_size = 16000;
  std::size_t sample = 1000000;
  std::uint64_t seed = 0;
};

int run_train_tokenizer(const TokenizerArgs& a) {
  const auto records = read_records(a.input);
  std::vector<std::string> sentences;
  for (const auto& r : records) {
    if (!r.title.empty()) sentences.push_back(sentence_text(r.title));
    for (const auto& s : r.sentences) sentences.push_back(sentence_text(s));
  }
  if (sentences.empty()) throw DataError("train-tokenizer: no sentences in " + a.input);
  std::vector<std::string> chosen;
  for (auto i : sample_indices(sentences.size(), a.sample, a.seed)) chosen.push_back(std::move(sentences[i]));
  UnigramTrainerOptions opt;
  opt.target_vocab = a.vocab_size;
  opt.seed = a.seed;
  const auto tok = train_unigram(chosen, opt);
  tok.save(a.out);
  std::cout << "tokenizer: " << tok.vocab_size() << " ids from " << chosen.size() << " sentences -> " << a.out
            << '\n';
  return 0;
}

// ---- build-vocab ----------------------------------------------------------

struct VocabArgs {
  std::string input, out, labels_out;
  std::size_t min_count = 10;
  std::optional<int> max_year;
};

int run_build_vocab(const VocabArgs& a) {
  const auto records = read_records(a.input);
  const auto cvocab = ConditionVocab::build(records, a.min_count, a.max_year);
  cvocab.save(a.out);
  const auto labels = LabelVocabs::build(records);
  const std::string labels_out = a.labels_out.empty() ? a.out + ".labels.tsv" : a.labels_out;
  labels.save(labels_out);
  std::cout << "condition vocab: " << cvocab.year_count() << " years from " << cvocab.year_base() << ", "
            << cvocab.keyword_count() << " keywords -> " << a.out << "\nlabels: pos " << labels.pos.size()
            << " dep " << labels.dep.size() << " ent " << labels.ent.size() << " -> " << labels_out << '\n';
  return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config, data, tokenizer, vocab, labels, checkpoint_dir, resume, log;
  std::vector<std::string> overrides;
};

int run_train(const TrainArgs& a) {
  TrainingConfig config = a.config.empty() ? preset("toy") : load_config(a.config);
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    apply_config_entry(config, kv.substr(0, eq), kv.substr(eq + 1));
  }
  const auto tok = Tokenizer::load(a.tokenizer);
  const auto cvocab = ConditionVocab::load(a.vocab);
  const std::string labels_path = a.labels.empty() ? a.vocab + ".labels.tsv" : a.labels;
  const auto labels = LabelVocabs::load(labels_path);
  Trainer trainer(config, read_records(a.data), tok, cvocab, labels);
  const CheckpointBlobs blobs{read_file(a.tokenizer), read_file(a.vocab), read_file(labels_path)};
  if (!a.resume.empty()) {
    restore_trainer(trainer, read_checkpoint(a.resume));
    std::cerr << "resumed from " << a.resume << " at step " << trainer.step_count() << '\n';
  }
  std::unique_ptr<Output> log;
  if (!a.log.empty()) log = std::make_unique<Output>(a.log);
  if (!a.checkpoint_dir.empty()) fs::create_directories(a.checkpoint_dir);
  auto checkpoint = [&] {
    if (a.checkpoint_dir.empty()) return;
    const auto data = capture_checkpoint(trainer, blobs);
    write_checkpoint(fs::path(a.checkpoint_dir) / ("ckpt-" + std::to_string(trainer.step_count()) + ".bin"), data);
    write_checkpoint(fs::path(a.checkpoint_dir) / "latest.bin", data);
  };
  const std::size_t every = std::max<std::size_t>(1, trainer.config().log_every);
  trainer.run(
      trainer.config().steps,
      [&](const StepLog& s) {
        if (log) {
          nlohmann::ordered_json j{{"step", s.step}, {"lr", s.lr},   {"loss", s.total}, {"token", s.token},
                                   {"pos", s.pos},   {"dep", s.dep}, {"ent", s.ent}};
          log->stream() << j.dump() << '\n';
        }
        if (s.step % every == 0 || s.step == trainer.config().steps) {
          std::cerr << "step " << s.step << " lr " << s.lr << " loss " << s.total << " (token " << s.token
                    << " pos " << s.pos << " dep " << s.dep << " ent " << s.ent << ")\n";
        }
      },
      [&, last = trainer.epoch()](std::size_t epoch) mutable {
        const std::size_t every = trainer.config().checkpoint_every;
        if (epoch / every == last / every) return;
        last = epoch;
        checkpoint();
        std::cerr << "epoch " << epoch << " complete at step " << trainer.step_count() << '\n';
      });
  checkpoint();
  const auto eval = evaluate_loss(trainer.model(), trainer.records(), tok, cvocab, labels);
  std::cout << "final eval loss " << eval.total << " (token " << eval.token << " pos " << eval.pos << " dep "
            << eval.dep << " ent " << eval.ent << ") over " << eval.windows << " windows\n";
  return 0;
}

// ---- generate -------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, title, records, out, id = "prompt";
  int year = 0;
  std::vector<std::string> keywords;
  std::size_t n = 1;
  std::size_t max_tokens = 256;
  double temperature = 1.0;
  std::size_t top_k = 0;
  double top_p = 1.0;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

int run_generate(const GenerateArgs& a) {
  const auto ckpt = read_checkpoint(a.checkpoint);
  const auto model = restore_model(ckpt);
  const auto tok = Tokenizer::deserialize(ckpt.blobs.tokenizer);
  const auto cvocab = ConditionVocab::deserialize(ckpt.blobs.condition_vocab);

  struct Job {
    std::string id;
    GenerationRequest request;
  };
  std::vector<Job> jobs;
  auto add = [&](const std::string& id, const std::string& title, int year, const std::vector<std::string>& keywords) {
    for (std::size_t k = 0; k < a.n; ++k) {
      GenerationRequest r;
      r.title = title;
      r.year = year;
      r.keywords = keywords;
      r.max_tokens = a.max_tokens;
      r.temperature = a.temperature;
      r.top_k = a.top_k;
      r.top_p = a.top_p;
      r.seed = a.seed + jobs.size();
      jobs.push_back({id, r});
    }
  };
  if (!a.records.empty()) {
    for (const auto& r : read_records(a.records)) add(r.id, sentence_text(r.title), r.year, r.keywords);
  } else {
    if (a.title.empty()) throw UsageError("generate: --title or --records is required");
    add(a.id, a.title, a.year, split_keywords(a.keywords));
  }
  // Fail on bad years before spending time on generation.
  for (const auto& j : jobs) cvocab.year_id(j.request.year);

  std::vector<std::string> lines(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  const std::size_t threads = std::max<std::size_t>(1, std::min(a.workers, jobs.size()));
  auto work = [&](std::size_t t) {
    for (std::size_t i = t; i < jobs.size(); i += threads) {
      try {
        const auto& job = jobs[i];
        const auto g = generate(model, tok, cvocab, job.request);
        nlohmann::ordered_json j{{"id", job.id},
                                 {"title", job.request.title},
                                 {"year", job.request.year},
                                 {"keywords", job.request.keywords},
                                 {"generated", g.abstract_text},
                                 {"sentences", g.sentences},
                                 {"termination", termination_name(g.termination)},
                                 {"seed", job.request.seed}};
        lines[i] = j.dump();
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  Output out(a.out);
  for (const auto& l : lines) out.stream() << l << '\n';
  return 0;
}

// ---- build-df -------------------------------------------------------------

struct DfArgs {
  std::string input, out;
  std::size_t sample = 0;
  std::uint64_t seed = 0;
};

int run_build_df(const DfArgs& a) {
  const auto records = read_records(a.input);
  std::vector<std::vector<Tokens>> docs;
  for (auto i : sample_indices(records.size(), a.sample == 0 ? records.size() : a.sample, a.seed)) {
    std::vector<Tokens> doc;
    for (const auto& s : records[i].sentences) doc.push_back(metric_tokens(sentence_text(s)));
    docs.push_back(std::move(doc));
  }
  const auto df = DfCorpus::build(docs);
  df.save(a.out);
  std::cout << "df corpus: " << df.documents() << " documents -> " << a.out << '\n';
  return 0;
}

// ---- evaluate -------------------------------------------------------------

struct EvaluateArgs {
  std::string generations, references, df, out;
  std::size_t workers = 1;
};

int run_evaluate(const EvaluateArgs& a) {
  const auto generations = load_generations(a.generations);
  const auto references = read_records(a.references);
  const auto df = DfCorpus::load(a.df);
  const auto report = evaluate(generations, references, df, a.workers);
  Output out(a.out);
  out.stream() << report.to_json() << '\n';
  std::cerr << "scored " << report.sentence_ids.size() << " sentences from " << report.generations
            << " generations; unmatched ids: " << report.unmatched_ids.size() << '\n';
  for (const auto& m : report.metrics) std::cerr << "  " << m.name << " mean " << m.mean << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional abstract generator: tokenizer, vocabularies, training, generation, evaluation"};
  app.require_subcommand(1);

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Drop records without sentences and split train/test by id hash");
  c_split->add_option("--input", split.input, "JSONL records")->required();
  c_split->add_option("--train-out", split.train_out, "Training records output")->required();
  c_split->add_option("--test-out", split.test_out, "Test records output")->required();
  c_split->add_option("--train-fraction", split.fraction, "Share of records assigned to training")
      ->default_val(0.7);
  c_split->add_option("--seed", split.seed, "Hash seed")->default_val(0);

  TokenizerArgs tok;
  auto* c_tok = app.add_subcommand("train-tokenizer", "Train the unigram subword tokenizer");
  c_tok->add_option("--input", tok.input, "JSONL records")->required();
  c_tok->add_option("--vocab-size", tok.vocab_size, "Target vocabulary including special tokens")
      ->default_val(16000);
  c_tok->add_option("--sample", tok.sample, "Number of sentences sampled for training")->default_val(1000000);
  c_tok->add_option("--seed", tok.seed, "Sampling seed")->default_val(0);
  c_tok->add_option("--out", tok.out, "Tokenizer model output")->required();

  VocabArgs vocab;
  auto* c_vocab = app.add_subcommand("build-vocab", "Build the condition and label vocabularies");
  c_vocab->add_option("--input", vocab.input, "JSONL training records")->required();
  c_vocab->add_option("--min-count", vocab.min_count, "Minimum keyword document frequency")->default_val(10);
  c_vocab->add_option("--out", vocab.out, "Condition vocabulary output")->required();
  c_vocab->add_option("--max-year", vocab.max_year, "Last indexed year (default: latest observed)");
  c_vocab->add_option("--labels-out", vocab.labels_out, "Label vocabulary output (default: <out>.labels.tsv)");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train the model");
  c_train->add_option("--config", train.config, "key=value configuration file (default: toy preset)");
  c_train->add_option("--data", train.data, "JSONL training records")->required();
  c_train->add_option("--tokenizer", train.tokenizer, "Tokenizer model")->required();
  c_train->add_option("--vocab", train.vocab, "Condition vocabulary")->required();
  c_train->add_option("--labels", train.labels, "Label vocabulary (default: <vocab>.labels.tsv)");
  c_train->add_option("--checkpoint-dir", train.checkpoint_dir, "Directory for per-epoch checkpoints");
  c_train->add_option("--resume", train.resume, "Checkpoint to resume from");
  c_train->add_option("--log", train.log, "Per-step JSONL loss log");
  c_train->add_option("--set", train.overrides, "Configuration override key=value (repeatable)");

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Generate abstracts from a title and condition");
  c_gen->add_option("--checkpoint", gen.checkpoint, "Checkpoint file")->required();
  c_gen->add_option("--title", gen.title, "Title prompt");
  c_gen->add_option("--year", gen.year, "Publication year");
  c_gen->add_option("--keywords", gen.keywords, "Keywords (comma separated or repeated)");
  c_gen->add_option("--records", gen.records, "JSONL records whose titles and conditions are used as prompts");
  c_gen->add_option("--id", gen.id, "Output id for a --title prompt")->default_val("prompt");
  c_gen->add_option("--n", gen.n, "Samples per prompt")->default_val(1);
  c_gen->add_option("--max-tokens", gen.max_tokens, "Maximum generated tokens")->default_val(256);
  c_gen->add_option("--temperature", gen.temperature, "Sampling temperature (0 = greedy)")->default_val(1.0);
  c_gen->add_option("--top-k", gen.top_k, "Keep the k most likely tokens (0 = off)")->default_val(0);
  c_gen->add_option("--top-p", gen.top_p, "Nucleus mass (1 = off)")->default_val(1.0);
  c_gen->add_option("--seed", gen.seed, "Seed of the first generation; later ones add their index")
      ->default_val(0);
  c_gen->add_option("--out", gen.out, "JSONL output (default stdout)");
  c_gen->add_option("--workers", gen.workers, "Parallel generation threads")->default_val(1);

  DfArgs dfa;
  auto* c_df = app.add_subcommand("build-df", "Build n-gram document frequencies from abstracts");
  c_df->add_option("--input", dfa.input, "JSONL records")->required();
  c_df->add_option("--sample", dfa.sample, "Number of abstracts sampled (0 = all)")->default_val(0);
  c_df->add_option("--seed", dfa.seed, "Sampling seed")->default_val(0);
  c_df->add_option("--out", dfa.out, "Document frequency output")->required();

  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "Score generations against reference abstracts");
  c_eval->add_option("--generations", ev.generations, "Generation JSONL")->required();
  c_eval->add_option("--references", ev.references, "Reference JSONL records")->required();
  c_eval->add_option("--df", ev.df, "Document frequency file")->required();
  c_eval->add_option("--out", ev.out, "Report JSON output (default stdout)");
  c_eval->add_option("--workers", ev.workers, "Parallel scoring threads")->default_val(1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }

  try {
    if (*c_split) return run_split(split);
    if (*c_tok) return run_train_tokenizer(tok);
    if (*c_vocab) return run_build_vocab(vocab);
    if (*c_train) return run_train(train);
    if (*c_gen) return run_generate(gen);
    if (*c_df) return run_build_df(dfa);
    if (*c_eval) return run_evaluate(ev);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kUsage);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}
