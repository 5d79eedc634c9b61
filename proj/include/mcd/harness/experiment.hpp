#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcd/harness/config.hpp"

namespace mcd::harness {

// Outcome of one clip under one (row, column) condition.
struct ConditionRecord {
  int prediction = -1;
  bool correct = false;
  double mc_loss = 0.0;      // MC loss of the classifier input
  double epe = 0.0;          // interior EPE of its forward flows vs ground truth
  double flow_change = 0.0;  // mean endpoint distance to the clean forward flows
};

struct ClipReport {
  std::string id;
  std::size_t index = 0;  // position in the test split
  int label = 0;
  // Keyed "row/column".
  std::map<std::string, ConditionRecord> conditions;
};

struct Cell {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

struct RowReport {
  std::string name;
  SampleSet sample = SampleSet::Main;
  std::map<std::string, Cell> cells;  // keyed by column name
};

struct Failure {
  std::string stage;
  std::string message;
};

struct ExperimentReport {
  nlohmann::json config;
  double train_accuracy = 0.0;
  std::vector<std::string> main_ids;
  std::vector<std::string> adaptive_ids;
  std::vector<RowReport> rows;
  std::vector<ClipReport> clips;
  std::vector<Failure> failures;
  // Wall-clock seconds per stage. Kept out of the report JSON so that
  // reruns compare bit-identically.
  std::map<std::string, double> runtime_seconds;

  const RowReport* row(const std::string& name) const;
  // Accuracy of `row/column` restricted to clips whose ids are in `ids`.
  Cell cell_on(const std::string& row, const std::string& column,
               const std::vector<std::string>& ids) const;
  // Mean of a per-clip quantity over the clips holding the condition.
  double mean(const std::string& condition, double ConditionRecord::*field,
              const std::vector<std::string>* ids = nullptr) const;
  std::vector<double> values(const std::string& condition, double ConditionRecord::*field,
                             const std::vector<std::string>* ids = nullptr) const;
};

// Recomputes every row cell from the per-clip records.
std::vector<RowReport> tabulate(const ExperimentConfig& config,
                                const std::vector<ClipReport>& clips);

nlohmann::json to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::json& j);

// Column-per-row accuracy table; empty cells for conditions not evaluated.
std::string accuracy_csv(const ExperimentReport& report);
// One line per (clip, condition).
std::string per_clip_csv(const ExperimentReport& report);

// Artifacts inside `config.output_dir`. The dataset and model are reused
// when present and generated otherwise.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path train_data() const { return root / "data" / "train"; }
  std::filesystem::path test_data() const { return root / "data" / "test"; }
  std::filesystem::path model() const { return root / "model.vmdl"; }
  std::filesystem::path report_json() const { return root / "report.json"; }
  std::filesystem::path accuracy_csv() const { return root / "accuracy.csv"; }
  std::filesystem::path per_clip_csv() const { return root / "per_clip.csv"; }
  std::filesystem::path runtime_json() const { return root / "runtime.json"; }
};

// Stage helpers shared with the CLI subcommands.
video::Dataset prepare_train_data(const ExperimentConfig& config, const RunPaths& paths);
video::Dataset prepare_test_data(const ExperimentConfig& config, const RunPaths& paths);
classifier::ClassifierModel prepare_model(const ExperimentConfig& config, const RunPaths& paths);
classifier::TrainConfig effective_train_config(const ExperimentConfig& config);

// Attack of config.rows[row_index] on test clip `index`. The seed is derived
// from the experiment seed, the clip index and the row index.
attack::Perturbation run_attack(const ExperimentConfig& config, std::size_t row_index,
                                const attack::Target& target,
                                const classifier::ClassifierModel& model, std::size_t index);

// Trains or loads the model, evaluates every row and column on the shared
// clip sample and writes the report files. A failing stage is recorded in
// `failures` and the partial report is still written.
ExperimentReport run_full_experiment(const ExperimentConfig& config);

void write_report(const ExperimentReport& report, const ExperimentConfig& config,
                  const RunPaths& paths);

}  // namespace mcd::harness
