#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcd/attack/attacks.hpp"
#include "mcd/classifier/model.hpp"
#include "mcd/defense/purify.hpp"
#include "mcd/flow/estimator.hpp"
#include "mcd/video/dataset.hpp"

namespace mcd::harness {

// Table columns. Every row is evaluated under a subset of these.
enum class Column { Standard, RandomDefense, Defended, DefendedMulti };
inline constexpr int kNumColumns = 4;
const char* to_string(Column column);
Column column_from_string(const std::string& name);

// Main rows use the first `sample_size` test clips; adaptive rows use the
// first `adaptive_sample_size` of those, so every adaptive clip also has
// main-row records.
enum class SampleSet { Main, Adaptive };
const char* to_string(SampleSet set);

// One row of the accuracy table. kind is empty for the clean row.
struct RowSpec {
  std::string name;
  std::optional<attack::AttackKind> kind;
  attack::AttackConfig attack;
  attack::FlickerConfig flicker;
  SampleSet sample = SampleSet::Main;
  std::vector<Column> columns;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  video::DatasetSpec dataset;  // clips_per_class applies to the training split
  int test_clips_per_class = 13;
  classifier::TrainConfig train;
  flow::FlowConfig flow;
  defense::DefenseConfig defense;  // loss is MC; the multi column swaps in MultiMC
  std::vector<RowSpec> rows;
  std::size_t sample_size = 100;
  std::size_t adaptive_sample_size = 50;
  std::size_t epe_margin = 4;  // border excluded from endpoint errors
  std::filesystem::path output_dir = "run";
  bool write_json = true;
  bool write_csv = true;
  unsigned workers = 1;

  // Throws ConfigError on any violated invariant.
  void validate() const;
  std::uint64_t train_data_seed() const;
  std::uint64_t test_data_seed() const;
  std::size_t test_size() const;
  defense::DefenseConfig multi_defense() const;
};

// Defaults used by the acceptance run: clean, random and the seven attack rows.
ExperimentConfig default_config();

// Unknown keys and type mismatches throw ConfigError. Missing keys keep
// their default_config() values; a present "rows" array replaces the
// default rows.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

}  // namespace mcd::harness
