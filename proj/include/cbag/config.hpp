#pragma once

// Flat key=value run configuration. Blank lines and lines starting with '#'
// are ignored. A `preset` key (toy or full) resets every field to that
// preset before the remaining keys apply, wherever it appears in the file.

#include <filesystem>
#include <string>
#include <string_view>

#include "cbag/trainer.hpp"

namespace cbag {

// toy: d_model 64, 2 heads, 2+2 blocks, ff 256, n 32, batch 16, warmup 50,
// Viterbi windows, every record once per epoch.
// full: d_model 1024, 16 heads, 2+16 blocks, ff 3072, n 128, warmup 500.
TrainingConfig preset(std::string_view name);

// Applies one entry; throws UsageError naming the key on unknown keys or
// unparsable values.
void apply_config_entry(TrainingConfig& config, std::string_view key, std::string_view value);

// Parses text on top of `base`, then validates.
TrainingConfig parse_config(std::string_view text, TrainingConfig base = preset("toy"));
TrainingConfig load_config(const std::filesystem::path& path);

}  // namespace cbag
