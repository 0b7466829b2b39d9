#include "cbag/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cbag/config.hpp"
#include "cbag/error.hpp"

namespace cbag {

namespace {

constexpr char kMagic[8] = {'C', 'B', 'A', 'G', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
  if (offset + static_cast<std::size_t>(width) > bytes.size()) throw DataError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(i)])) << (8 * i);
  }
  return v;
}

std::string shape_text(const compute::Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

compute::Shape parse_shape(const std::string& text) {
  compute::Shape s;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) s.push_back(std::stoul(part));
  return s;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t begin = 0;
  while (true) {
    const auto tab = line.find('\t', begin);
    out.push_back(line.substr(begin, tab == std::string::npos ? std::string::npos : tab - begin));
    if (tab == std::string::npos) break;
    begin = tab + 1;
  }
  return out;
}

std::vector<TensorRecord> capture(const std::vector<NamedParameter<float>>& params,
                                  const std::vector<std::vector<float>>* state) {
  std::vector<TensorRecord> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    TensorRecord r{params[i].name, params[i].tensor.shape(), {}};
    if (state) {
      r.values = (*state)[i];
    } else {
      auto v = params[i].tensor.values();
      r.values.assign(v.begin(), v.end());
    }
    out.push_back(std::move(r));
  }
  return out;
}

void assign(const std::vector<NamedParameter<float>>& params, const std::vector<TensorRecord>& records,
            const char* what, const std::function<std::span<float>(std::size_t)>& target) {
  if (params.size() != records.size()) {
    throw UsageError(std::string("checkpoint: ") + what + " count does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != records[i].name || params[i].tensor.shape() != records[i].shape) {
      throw UsageError(std::string("checkpoint: ") + what + " '" + records[i].name +
                       "' does not match the model layout");
    }
    auto dst = target(i);
    std::copy(records[i].values.begin(), records[i].values.end(), dst.begin());
  }
}

}  // namespace

CheckpointData capture_checkpoint(const Trainer& trainer, const CheckpointBlobs& blobs) {
  CheckpointData d;
  d.config = trainer.config();
  d.config_hash = d.config.hash();
  d.step = trainer.step_count();
  d.cursor = trainer.cursor();
  d.blobs = blobs;
  const auto params = trainer.model().parameters();
  d.params = capture(params, nullptr);
  d.first_moments = capture(params, &trainer.optimizer().first_moments());
  d.second_moments = capture(params, &trainer.optimizer().second_moments());
  return d;
}

std::string encode_checkpoint(const CheckpointData& d) {
  std::string payload;
  std::ostringstream manifest;
  manifest << "format_version\t" << d.format_version << '\n';
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(d.config_hash));
  manifest << "config_hash\t" << hash << '\n';
  manifest << "step\t" << d.step << '\n';
  {
    std::istringstream lines(d.config.canonical());
    std::string line;
    while (std::getline(lines, line)) manifest << "config\t" << line << '\n';
  }
  manifest << "steps_budget\t" << d.config.steps << '\n';
  manifest << "log_every\t" << d.config.log_every << '\n';
  manifest << "checkpoint_every\t" << d.config.checkpoint_every << '\n';
  manifest << "rng\t" << d.cursor.rng_state << '\n';
  manifest << "position\t" << d.cursor.position << '\n';
  manifest << "records_seen\t" << d.cursor.records_seen << '\n';
  const std::pair<const char*, const std::string*> blobs[] = {
      {"tokenizer", &d.blobs.tokenizer}, {"condition_vocab", &d.blobs.condition_vocab}, {"labels", &d.blobs.labels}};
  for (const auto& [name, blob] : blobs) {
    manifest << "blob\t" << name << '\t' << payload.size() << '\t' << blob->size() << '\n';
    payload += *blob;
  }
  const std::pair<const char*, const std::vector<TensorRecord>*> groups[] = {
      {"param", &d.params}, {"lamb_m", &d.first_moments}, {"lamb_v", &d.second_moments}};
  for (const auto& [group, records] : groups) {
    for (const auto& r : *records) {
      manifest << "tensor\t" << group << '\t' << r.name << '\t' << shape_text(r.shape) << '\t' << payload.size()
               << '\t' << r.values.size() << '\n';
      for (float v : r.values) put_u32(payload, std::bit_cast<std::uint32_t>(v));
    }
  }
  manifest << "order\t" << payload.size() << '\t' << d.cursor.order.size() << '\n';
  for (auto idx : d.cursor.order) put_u32(payload, idx);

  const std::string m = manifest.str();
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, d.format_version);
  put_u64(out, m.size());
  out += m;
  out += payload;
  return out;
}

CheckpointData decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw DataError("checkpoint: not a checkpoint file");
  }
  CheckpointData d;
  d.format_version = static_cast<std::uint32_t>(get_le(bytes, 8, 4));
  if (d.format_version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(d.format_version));
  }
  const std::size_t manifest_size = get_le(bytes, 12, 8);
  if (20 + manifest_size > bytes.size()) throw DataError("checkpoint: truncated manifest");
  const std::string manifest(bytes.substr(20, manifest_size));
  const std::string_view payload = bytes.substr(20 + manifest_size);

  auto slice = [&](std::size_t offset, std::size_t size) {
    if (offset + size > payload.size()) throw DataError("checkpoint: truncated payload");
    return payload.substr(offset, size);
  };

  TrainingConfig config;
  std::string config_hash_text;
  std::istringstream in(manifest);
  std::string line;
  try {
    while (std::getline(in, line)) {
      const auto f = split_tabs(line);
      const std::string& key = f[0];
      if (key == "format_version") {
        continue;
      } else if (key == "config_hash") {
        config_hash_text = f.at(1);
        d.config_hash = std::stoull(f.at(1), nullptr, 16);
      } else if (key == "step") {
        d.step = std::stoull(f.at(1));
      } else if (key == "config") {
        const auto eq = f.at(1).find('=');
        if (eq == std::string::npos) throw DataError("checkpoint: malformed config entry");
        apply_config_entry(config, f[1].substr(0, eq), f[1].substr(eq + 1));
      } else if (key == "steps_budget") {
        config.steps = std::stoull(f.at(1));
      } else if (key == "log_every") {
        config.log_every = std::stoull(f.at(1));
      } else if (key == "checkpoint_every") {
        config.checkpoint_every = std::stoull(f.at(1));
      } else if (key == "rng") {
        d.cursor.rng_state = f.at(1);
      } else if (key == "position") {
        d.cursor.position = std::stoull(f.at(1));
      } else if (key == "records_seen") {
        d.cursor.records_seen = std::stoull(f.at(1));
      } else if (key == "blob") {
        const std::string data(slice(std::stoull(f.at(2)), std::stoull(f.at(3))));
        if (f[1] == "tokenizer") d.blobs.tokenizer = data;
        else if (f[1] == "condition_vocab") d.blobs.condition_vocab = data;
        else if (f[1] == "labels") d.blobs.labels = data;
        else throw DataError("checkpoint: unknown blob '" + f[1] + "'");
      } else if (key == "tensor") {
        TensorRecord r{f.at(2), parse_shape(f.at(3)), {}};
        const std::size_t offset = std::stoull(f.at(4)), count = std::stoull(f.at(5));
        if (count != compute::element_count(r.shape)) throw DataError("checkpoint: tensor size mismatch");
        const auto raw = slice(offset, 4 * count);
        r.values.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
          r.values[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(raw, 4 * i, 4)));
        }
        if (f[1] == "param") d.params.push_back(std::move(r));
        else if (f[1] == "lamb_m") d.first_moments.push_back(std::move(r));
        else if (f[1] == "lamb_v") d.second_moments.push_back(std::move(r));
        else throw DataError("checkpoint: unknown tensor group '" + f[1] + "'");
      } else if (key == "order") {
        const std::size_t offset = std::stoull(f.at(1)), count = std::stoull(f.at(2));
        const auto raw = slice(offset, 4 * count);
        d.cursor.order.resize(count);
        for (std::size_t i = 0; i < count; ++i) d.cursor.order[i] = static_cast<std::uint32_t>(get_le(raw, 4 * i, 4));
      } else if (!key.empty()) {
        throw DataError("checkpoint: unknown manifest entry '" + key + "'");
      }
    }
  } catch (const std::logic_error& e) {
    throw DataError(std::string("checkpoint: malformed manifest: ") + e.what());
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  d.config = config;
  if (config.hash() != d.config_hash) throw DataError("checkpoint: stored configuration does not match its hash");
  return d;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const std::string bytes = encode_checkpoint(data);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("cannot write checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer, const CheckpointBlobs& blobs) {
  write_checkpoint(path, capture_checkpoint(trainer, blobs));
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return decode_checkpoint(buf.str());
}

void restore_trainer(Trainer& trainer, const CheckpointData& data) {
  const auto expected = trainer.config().hash();
  if (expected != data.config_hash) {
    throw UsageError("checkpoint: configuration hash mismatch; the checkpoint was written under a different "
                     "model, optimizer or data configuration");
  }
  const auto params = trainer.model().parameters();
  auto& lamb = trainer.optimizer();
  assign(params, data.params, "parameter", [&](std::size_t i) {
    auto t = params[i].tensor;
    return t.mutable_values();
  });
  assign(params, data.first_moments, "first moment",
         [&](std::size_t i) { return std::span<float>(lamb.first_moments()[i]); });
  assign(params, data.second_moments, "second moment",
         [&](std::size_t i) { return std::span<float>(lamb.second_moments()[i]); });
  lamb.set_step_count(data.step);
  trainer.restore_cursor(data.cursor);
}

Model<float> restore_model(const CheckpointData& data) {
  Model<float> model(data.config.model, 0);
  const auto params = model.parameters();
  assign(params, data.params, "parameter", [&](std::size_t i) {
    auto t = params[i].tensor;
    return t.mutable_values();
  });
  return model;
}

}  // namespace cbag
