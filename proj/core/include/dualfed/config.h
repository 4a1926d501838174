#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dualfed/baselines.h"
#include "dualfed/data.h"
#include "dualfed/model.h"
#include "dualfed/protocol.h"

namespace dualfed {

enum class DataSource { kSynthetic, kFlatfile };

struct FlatfileSpec {
  std::vector<std::filesystem::path> train;  // one file per client
  std::vector<std::filesystem::path> test;   // same length as train
  std::optional<std::filesystem::path> probe;
  std::size_t num_classes = 0;
};

// Everything one experiment needs. Defaults follow the reference protocol
// where it names a value (lr 0.01, momentum 0.5, batch 256, E = 1, T = 300,
// seeds 0..4); the rest are desk-scale choices.
struct RunConfig {
  ArchConfig arch;
  TrainConfig train;
  Method method = Method::kDualFed;
  double mu = 0.01;  // FedProx only
  std::optional<TagPolicy> personalize;
  DataSource source = DataSource::kSynthetic;
  SyntheticSpec synthetic;
  FlatfileSpec flatfile;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::filesystem::path output_dir = "runs/dualfed";
  std::size_t eval_every = 1;
  bool dump_reps = false;
  std::size_t checkpoint_every = 0;  // 0 disables checkpoints
  std::size_t threads = 1;
  std::string label;  // row name in comparison tables; defaults to the method

  MethodVariant variant() const;
  std::string display_label() const;
};

// Parses "key = value" lines (dotted keys, '#' comments). Unknown or repeated
// keys and malformed values raise ConfigError naming the key. The result is
// not yet validated.
RunConfig parse_config_text(std::string_view text);
RunConfig parse_config_file(const std::filesystem::path& path);

// Sets one key as if it appeared in a config file.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

// Cross-field checks; fills arch.input_dim / arch.num_classes from the data
// section. Throws ConfigError naming the first offending key.
void validate_config(RunConfig& config);

// Every key with its current value, in the same syntax parse_config_text reads.
std::string to_config_text(const RunConfig& config);

// All recognised keys, in documentation order.
std::vector<std::string> config_keys();

}  // namespace dualfed
