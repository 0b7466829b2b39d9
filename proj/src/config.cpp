#include "cbag/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "cbag/error.hpp"

namespace cbag {

TrainingConfig preset(std::string_view name) {
  TrainingConfig c;
  if (name == "toy") {
    c.model.d_model = 64;
    c.model.heads = 2;
    c.model.encoder_blocks = 2;
    c.model.decoder_blocks = 2;
    c.model.ff_size = 256;
    c.model.dropout = 0.1;
    c.model.max_seq = 32;
    c.batch_size = 16;
    c.steps = 2000;
    c.lamb.warmup = 50;
    c.epoch_fraction = 1.0;
    c.segmentation_temperature = 0.0;
    c.checkpoint_every = 250;
  } else if (name == "full") {
    c.model.d_model = 1024;
    c.model.heads = 16;
    c.model.encoder_blocks = 2;
    c.model.decoder_blocks = 16;
    c.model.ff_size = 3072;
    c.model.dropout = 0.1;
    c.model.max_seq = 128;
    c.batch_size = 480;
    c.steps = 1000000;
    c.lamb.warmup = 500;
    c.epoch_fraction = 0.05;
    c.segmentation_temperature = 1.0;
  } else {
    throw UsageError("config: unknown preset '" + std::string(name) + "' (expected toy or full)");
  }
  return c;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename V>
V parse_number(std::string_view key, std::string_view value) {
  V out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || value.empty()) {
    throw UsageError("config: invalid value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

}  // namespace

void apply_config_entry(TrainingConfig& c, std::string_view key, std::string_view value) {
  auto size = [&](std::size_t& field) { field = parse_number<std::size_t>(key, value); };
  auto real = [&](double& field) { field = parse_number<double>(key, value); };
  if (key == "preset") c = preset(value);
  else if (key == "d_model") size(c.model.d_model);
  else if (key == "heads") size(c.model.heads);
  else if (key == "encoder_blocks") size(c.model.encoder_blocks);
  else if (key == "decoder_blocks") size(c.model.decoder_blocks);
  else if (key == "ff_size") size(c.model.ff_size);
  else if (key == "dropout") real(c.model.dropout);
  else if (key == "max_seq") size(c.model.max_seq);
  else if (key == "token_vocab") size(c.model.token_vocab);
  else if (key == "pos_vocab") size(c.model.pos_vocab);
  else if (key == "dep_vocab") size(c.model.dep_vocab);
  else if (key == "ent_vocab") size(c.model.ent_vocab);
  else if (key == "condition_vocab") size(c.model.condition_vocab);
  else if (key == "layer_norm_eps") real(c.model.layer_norm_eps);
  else if (key == "init_std") real(c.model.init_std);
  else if (key == "lr") real(c.lamb.peak_lr);
  else if (key == "warmup") size(c.lamb.warmup);
  else if (key == "beta1") real(c.lamb.beta1);
  else if (key == "beta2") real(c.lamb.beta2);
  else if (key == "eps") real(c.lamb.eps);
  else if (key == "weight_decay") real(c.lamb.weight_decay);
  else if (key == "batch_size") size(c.batch_size);
  else if (key == "steps") size(c.steps);
  else if (key == "epoch_fraction") real(c.epoch_fraction);
  else if (key == "segmentation_temperature") real(c.segmentation_temperature);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
  else if (key == "log_every") size(c.log_every);
  else if (key == "checkpoint_every") size(c.checkpoint_every);
  else throw UsageError("config: unknown key '" + std::string(key) + "'");
}

TrainingConfig parse_config(std::string_view text, TrainingConfig base) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    entries.emplace_back(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
  }
  for (const auto& [k, v] : entries)
    if (k == "preset") apply_config_entry(base, k, v);
  for (const auto& [k, v] : entries)
    if (k != "preset") apply_config_entry(base, k, v);

  // Vocabulary sizes are filled from the data at training time.
  TrainingConfig probe = base;
  for (auto* v : {&probe.model.token_vocab, &probe.model.pos_vocab, &probe.model.dep_vocab, &probe.model.ent_vocab,
                  &probe.model.condition_vocab})
    if (*v == 0) *v = 1;
  probe.validate();
  return base;
}

TrainingConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

}  // namespace cbag
