#pragma once

// Binary checkpoint container:
//   "CBAGCKPT" | u32 format version | u64 manifest bytes | manifest | payload
// The manifest is tab-separated text (config, step, rng state, blob and
// tensor index with payload offsets). The payload holds the embedded
// vocabulary files, float32 parameters, LAMB moments and the record order,
// all little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cbag/compute.hpp"
#include "cbag/trainer.hpp"

namespace cbag {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Serialized vocabularies carried inside the checkpoint so generation needs
// no other input files.
struct CheckpointBlobs {
  std::string tokenizer;
  std::string condition_vocab;
  std::string labels;
};

struct TensorRecord {
  std::string name;
  compute::Shape shape;
  std::vector<float> values;
};

struct CheckpointData {
  std::uint32_t format_version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  TrainingConfig config;
  std::size_t step = 0;
  TrainerCursor cursor;
  CheckpointBlobs blobs;
  std::vector<TensorRecord> params;
  std::vector<TensorRecord> first_moments;
  std::vector<TensorRecord> second_moments;
};

CheckpointData capture_checkpoint(const Trainer& trainer, const CheckpointBlobs& blobs);
std::string encode_checkpoint(const CheckpointData& data);
// Throws DataError on a bad magic number, an unsupported version or a
// truncated payload.
CheckpointData decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer, const CheckpointBlobs& blobs);
void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

// Refuses (UsageError) when the trainer's configuration hash differs from
// the checkpoint's.
void restore_trainer(Trainer& trainer, const CheckpointData& data);
Model<float> restore_model(const CheckpointData& data);

}  // namespace cbag
