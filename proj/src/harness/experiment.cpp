#include "mcd/harness/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <mutex>

#include <fmt/format.h>

#include "mcd/error.hpp"
#include "mcd/util/binary_io.hpp"
#include "mcd/util/parallel.hpp"
#include "mcd/util/rng.hpp"

namespace mcd::harness {

using nlohmann::json;

namespace {

constexpr std::uint64_t kStreamTrain = 3;
constexpr std::uint64_t kStreamAttack = 200;
constexpr std::uint64_t kStreamRandomDefense = 300;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string condition_key(const std::string& row, Column column) {
  return row + "/" + to_string(column);
}

// [P,2,H,W] from a flow stack.
std::vector<float> stack_planar(const flow::FlowStack& stack) {
  if (stack.fields.empty()) return {};
  const std::size_t n = stack.fields.front().height * stack.fields.front().width;
  std::vector<float> out(stack.fields.size() * 2 * n);
  for (std::size_t p = 0; p < stack.fields.size(); ++p) {
    const auto& uv = stack.fields[p].uv;
    for (std::size_t i = 0; i < n; ++i) {
      out[p * 2 * n + i] = uv[2 * i];
      out[p * 2 * n + n + i] = uv[2 * i + 1];
    }
  }
  return out;
}

json disclosure() {
  return {
      {"flow_estimator",
       "classical Horn-Schunck solver in place of a learned flow network; gradients use the "
       "last iterations of the converged solve"},
      {"data", "procedural 8-class synthetic motion clips in place of real action videos"},
      {"classifier", "two-layer convolutional network on flow fields in place of a deep video model"},
      {"scale", "desk-scale sample sizes; numbers are trends, not reproductions of large-scale "
                "results"},
  };
}

json record_json(const ConditionRecord& r) {
  return {{"prediction", r.prediction},
          {"correct", r.correct},
          {"mc_loss", r.mc_loss},
          {"epe", r.epe},
          {"flow_change", r.flow_change}};
}

// Thread-safe accumulator for stage timings.
class Timings {
 public:
  void add(const std::string& key, double seconds) {
    std::lock_guard lock(mutex_);
    values_[key] += seconds;
  }
  std::map<std::string, double> take() {
    std::lock_guard lock(mutex_);
    return values_;
  }

 private:
  std::mutex mutex_;
  std::map<std::string, double> values_;
};

struct ClipContext {
  const ExperimentConfig& config;
  const classifier::ClassifierModel& model;
  const video::ClipRecord& record;
  std::size_t index;
  std::vector<float> clean;
  flow::FlowStack clean_flows;
};

ConditionRecord assess(const ClipContext& ctx, std::span<const float> input) {
  const auto& g = ctx.record.clip.geometry();
  const auto flows = flow::estimate_clip(input, g, flow::Direction::Forward, ctx.config.flow);
  const auto planar = stack_planar(flows);
  ConditionRecord r;
  r.prediction = classifier::classify_flows(ctx.model, planar, flows.fields.size()).label;
  r.correct = r.prediction == *ctx.record.clip.label();
  r.mc_loss = loss::evaluate_mc(input, g, ctx.config.flow, ctx.config.defense.mc);
  r.epe = flow::endpoint_error(flows, ctx.record.ground_truth, ctx.config.epe_margin);
  r.flow_change = flow::endpoint_error(flows, ctx.clean_flows);
  return r;
}

ClipReport evaluate_clip(const ExperimentConfig& config, const classifier::ClassifierModel& model,
                         const video::ClipRecord& record, std::size_t index, Timings& timings) {
  ClipContext ctx{config, model, record, index, video::to_planar<float>(record.clip), {}};
  const auto& g = record.clip.geometry();
  ctx.clean_flows = flow::estimate_clip(ctx.clean, g, flow::Direction::Forward, config.flow);
  const auto target = attack::make_target(record.clip, ctx.clean);

  ClipReport report;
  report.id = record.clip.id();
  report.index = index;
  report.label = *record.clip.label();
  for (std::size_t ri = 0; ri < config.rows.size(); ++ri) {
    const auto& row = config.rows[ri];
    if (row.sample == SampleSet::Adaptive && index >= config.adaptive_sample_size) continue;
    auto start = Clock::now();
    std::vector<float> input = ctx.clean;
    if (row.kind) input = run_attack(config, ri, target, model, index).adversarial;
    timings.add("row:" + row.name + ":attack", seconds_since(start));
    for (auto column : row.columns) {
      start = Clock::now();
      ConditionRecord r;
      switch (column) {
        case Column::Standard:
          r = assess(ctx, input);
          break;
        case Column::RandomDefense: {
          const auto seed = util::child_seed(config.seed, index, kStreamRandomDefense + ri);
          r = assess(ctx, attack::random_perturbation(input, g, config.defense.epsilon, seed)
                              .adversarial);
          break;
        }
        case Column::Defended:
          r = assess(ctx, defense::purify(input, g, config.flow, config.defense).purified);
          break;
        case Column::DefendedMulti:
          r = assess(ctx, defense::purify(input, g, config.flow, config.multi_defense()).purified);
          break;
      }
      report.conditions[condition_key(row.name, column)] = r;
      timings.add("row:" + row.name + ":" + to_string(column), seconds_since(start));
    }
  }
  return report;
}

void check_dataset(const video::Dataset& d, std::uint64_t seed, std::size_t clips,
                   const std::filesystem::path& dir) {
  if (d.seed != seed || d.records.size() != clips) {
    throw ConfigError(dir.string() + " holds a dataset from a different configuration");
  }
}

video::Dataset prepare_split(const ExperimentConfig& config, const std::filesystem::path& dir,
                             int clips_per_class, std::uint64_t seed) {
  auto spec = config.dataset;
  spec.clips_per_class = clips_per_class;
  if (std::filesystem::exists(dir / "manifest.json")) {
    auto d = video::load_dataset(dir);
    check_dataset(d, seed, spec.num_clips(), dir);
    return d;
  }
  auto d = video::generate_dataset(spec, seed, config.workers);
  video::save_dataset(d, dir);
  return d;
}

std::string csv_number(double v) { return fmt::format("{:.6f}", v); }

}  // namespace

const RowReport* ExperimentReport::row(const std::string& name) const {
  for (const auto& r : rows)
    if (r.name == name) return &r;
  return nullptr;
}

Cell ExperimentReport::cell_on(const std::string& row, const std::string& column,
                               const std::vector<std::string>& ids) const {
  Cell cell;
  const std::string key = row + "/" + column;
  for (const auto& clip : clips) {
    if (std::find(ids.begin(), ids.end(), clip.id) == ids.end()) continue;
    auto it = clip.conditions.find(key);
    if (it == clip.conditions.end()) continue;
    ++cell.total;
    cell.correct += it->second.correct ? 1 : 0;
  }
  return cell;
}

std::vector<double> ExperimentReport::values(const std::string& condition,
                                             double ConditionRecord::*field,
                                             const std::vector<std::string>* ids) const {
  std::vector<double> out;
  for (const auto& clip : clips) {
    if (ids && std::find(ids->begin(), ids->end(), clip.id) == ids->end()) continue;
    auto it = clip.conditions.find(condition);
    if (it != clip.conditions.end()) out.push_back(it->second.*field);
  }
  return out;
}

double ExperimentReport::mean(const std::string& condition, double ConditionRecord::*field,
                              const std::vector<std::string>* ids) const {
  const auto v = values(condition, field, ids);
  if (v.empty()) throw PreconditionError("no records for condition " + condition);
  double total = 0.0;
  for (double x : v) total += x;
  return total / static_cast<double>(v.size());
}

std::vector<RowReport> tabulate(const ExperimentConfig& config,
                                const std::vector<ClipReport>& clips) {
  std::vector<RowReport> rows;
  for (const auto& spec : config.rows) {
    RowReport row{spec.name, spec.sample, {}};
    for (auto column : spec.columns) {
      Cell cell;
      for (const auto& clip : clips) {
        auto it = clip.conditions.find(condition_key(spec.name, column));
        if (it == clip.conditions.end()) continue;
        ++cell.total;
        cell.correct += it->second.correct ? 1 : 0;
      }
      row.cells[to_string(column)] = cell;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const ExperimentReport& report) {
  json rows = json::array();
  for (const auto& row : report.rows) {
    json cells = json::object();
    for (const auto& [column, cell] : row.cells) {
      cells[column] = {{"correct", cell.correct}, {"total", cell.total},
                       {"accuracy", cell.accuracy()}};
    }
    rows.push_back({{"row", row.name}, {"sample", to_string(row.sample)}, {"cells", cells}});
  }
  json clips = json::array();
  for (const auto& clip : report.clips) {
    json conditions = json::object();
    for (const auto& [key, r] : clip.conditions) conditions[key] = record_json(r);
    clips.push_back({{"id", clip.id}, {"index", clip.index}, {"label", clip.label},
                     {"conditions", conditions}});
  }
  json failures = json::array();
  for (const auto& f : report.failures) failures.push_back({{"stage", f.stage}, {"message", f.message}});
  return {
      {"format", "mcd-experiment-report"},
      {"version", 1},
      {"disclosure", disclosure()},
      {"config", report.config},
      {"model", {{"train_accuracy", report.train_accuracy}}},
      {"samples",
       {{"main", report.main_ids},
        {"adaptive", report.adaptive_ids},
        {"note", "rows with sample 'adaptive' are evaluated on the first " +
                     std::to_string(report.adaptive_ids.size()) + " clips of the main sample"}}},
      {"accuracy", rows},
      {"clips", clips},
      {"failures", failures},
  };
}

ExperimentReport report_from_json(const json& j) {
  try {
    if (j.at("format") != "mcd-experiment-report" || j.at("version") != 1) {
      throw FormatError("not an experiment report");
    }
    ExperimentReport r;
    r.config = j.at("config");
    r.train_accuracy = j.at("model").at("train_accuracy").get<double>();
    r.main_ids = j.at("samples").at("main").get<std::vector<std::string>>();
    r.adaptive_ids = j.at("samples").at("adaptive").get<std::vector<std::string>>();
    for (const auto& row : j.at("accuracy")) {
      RowReport rr{row.at("row").get<std::string>(),
                   row.at("sample") == "main" ? SampleSet::Main : SampleSet::Adaptive,
                   {}};
      for (const auto& [column, cell] : row.at("cells").items()) {
        rr.cells[column] = {cell.at("correct").get<std::size_t>(), cell.at("total").get<std::size_t>()};
      }
      r.rows.push_back(std::move(rr));
    }
    for (const auto& clip : j.at("clips")) {
      ClipReport c{clip.at("id").get<std::string>(), clip.at("index").get<std::size_t>(),
                   clip.at("label").get<int>(), {}};
      for (const auto& [key, v] : clip.at("conditions").items()) {
        c.conditions[key] = {v.at("prediction").get<int>(), v.at("correct").get<bool>(),
                             v.at("mc_loss").get<double>(), v.at("epe").get<double>(),
                             v.at("flow_change").get<double>()};
      }
      r.clips.push_back(std::move(c));
    }
    for (const auto& f : j.at("failures")) {
      r.failures.push_back({f.at("stage").get<std::string>(), f.at("message").get<std::string>()});
    }
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed report: ") + e.what());
  }
}

std::string accuracy_csv(const ExperimentReport& report) {
  static const Column kColumns[] = {Column::Standard, Column::RandomDefense, Column::Defended,
                                    Column::DefendedMulti};
  std::string out = "row,sample,n";
  for (auto c : kColumns) out += std::string(",") + to_string(c);
  out += "\n";
  for (const auto& row : report.rows) {
    std::size_t n = 0;
    for (const auto& [_, cell] : row.cells) n = std::max(n, cell.total);
    out += fmt::format("{},{},{}", row.name, to_string(row.sample), n);
    for (auto c : kColumns) {
      auto it = row.cells.find(to_string(c));
      out += ",";
      if (it != row.cells.end()) out += csv_number(it->second.accuracy());
    }
    out += "\n";
  }
  return out;
}

std::string per_clip_csv(const ExperimentReport& report) {
  std::string out = "clip_id,index,label,row,column,prediction,correct,mc_loss,epe,flow_change\n";
  for (const auto& clip : report.clips) {
    for (const auto& [key, r] : clip.conditions) {
      const auto slash = key.find('/');
      out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", clip.id, clip.index, clip.label,
                         key.substr(0, slash), key.substr(slash + 1), r.prediction,
                         r.correct ? 1 : 0, csv_number(r.mc_loss), csv_number(r.epe),
                         csv_number(r.flow_change));
    }
  }
  return out;
}

video::Dataset prepare_train_data(const ExperimentConfig& config, const RunPaths& paths) {
  return prepare_split(config, paths.train_data(), config.dataset.clips_per_class,
                       config.train_data_seed());
}

video::Dataset prepare_test_data(const ExperimentConfig& config, const RunPaths& paths) {
  return prepare_split(config, paths.test_data(), config.test_clips_per_class,
                       config.test_data_seed());
}

classifier::TrainConfig effective_train_config(const ExperimentConfig& config) {
  auto t = config.train;
  t.seed = util::child_seed(config.seed, 0, kStreamTrain);
  return t;
}

classifier::ClassifierModel prepare_model(const ExperimentConfig& config, const RunPaths& paths) {
  const auto& g = config.dataset.geometry;
  const classifier::ModelGeometry geometry{g.frames, g.height, g.width, video::kNumClasses};
  const auto train_config = effective_train_config(config);
  if (std::filesystem::exists(paths.model())) {
    auto model = classifier::load_model(paths.model(), geometry);
    if (model.train_seed != train_config.seed) {
      throw ConfigError(paths.model().string() + " was trained with a different seed");
    }
    return model;
  }
  const auto data = prepare_train_data(config, paths);
  auto model = classifier::train(data, train_config, config.flow, config.workers);
  classifier::save_model(model, paths.model());
  return model;
}

attack::Perturbation run_attack(const ExperimentConfig& config, std::size_t row_index,
                                const attack::Target& target,
                                const classifier::ClassifierModel& model, std::size_t index) {
  const auto& row = config.rows.at(row_index);
  if (!row.kind) throw PreconditionError("run_attack: clean row has no attack");
  auto a = row.attack;
  a.seed = util::child_seed(config.seed, index, kStreamAttack + row_index);
  switch (*row.kind) {
    case attack::AttackKind::PGD: return attack::pgd_attack(target, model, config.flow, a);
    case attack::AttackKind::Random:
      return attack::random_perturbation(target.planar, target.geometry, a.epsilon, a.seed);
    case attack::AttackKind::OneFrame:
      return attack::one_frame_attack(target, model, config.flow, a);
    case attack::AttackKind::Flicker:
      return attack::flickering_attack(target, model, config.flow, row.flicker);
    case attack::AttackKind::Adaptive1:
      return attack::adaptive_attack_1(target, model, config.flow, a, config.defense.mc);
    case attack::AttackKind::Adaptive2:
      return attack::adaptive_attack_2(target, model, config.flow, a);
    case attack::AttackKind::BPDA:
      return attack::bpda_attack(target, model, config.flow, a, config.defense);
  }
  throw PreconditionError("run_attack: unknown kind");
}

void write_report(const ExperimentReport& report, const ExperimentConfig& config,
                  const RunPaths& paths) {
  std::filesystem::create_directories(paths.root);
  if (config.write_json) util::write_file_atomic(paths.report_json(), to_json(report).dump(2) + "\n");
  if (config.write_csv) {
    util::write_file_atomic(paths.accuracy_csv(), accuracy_csv(report));
    util::write_file_atomic(paths.per_clip_csv(), per_clip_csv(report));
  }
  json runtime = report.runtime_seconds;
  util::write_file_atomic(paths.runtime_json(), runtime.dump(2) + "\n");
}

ExperimentReport run_full_experiment(const ExperimentConfig& config) {
  config.validate();
  const RunPaths paths{config.output_dir};
  std::filesystem::create_directories(paths.root);
  ExperimentReport report;
  report.config = to_json(config);
  Timings timings;
  const auto total_start = Clock::now();

  auto stage = [&](const char* name, auto&& fn) {
    const auto start = Clock::now();
    try {
      fn();
      timings.add(name, seconds_since(start));
      return true;
    } catch (const std::exception& e) {
      report.failures.push_back({name, e.what()});
      return false;
    }
  };

  video::Dataset test;
  classifier::ClassifierModel model;
  bool ok = stage("data", [&] {
    test = prepare_test_data(config, paths);
    if (!std::filesystem::exists(paths.model())) prepare_train_data(config, paths);
  });
  ok = ok && stage("train", [&] { model = prepare_model(config, paths); });
  if (ok) {
    report.train_accuracy = model.train_accuracy;
    for (std::size_t i = 0; i < config.sample_size; ++i) {
      report.main_ids.push_back(test.records[i].clip.id());
      if (i < config.adaptive_sample_size) report.adaptive_ids.push_back(test.records[i].clip.id());
    }
    std::vector<std::optional<ClipReport>> results(config.sample_size);
    std::vector<std::string> errors(config.sample_size);
    std::mutex progress;
    std::size_t done = 0;
    stage("evaluate", [&] {
      util::parallel_for(config.sample_size, config.workers, [&](std::size_t i) {
        const auto start = Clock::now();
        try {
          results[i] = evaluate_clip(config, model, test.records[i], i, timings);
        } catch (const std::exception& e) {
          errors[i] = e.what();
        }
        std::lock_guard lock(progress);
        std::fprintf(stderr, "[eval] %zu/%zu %s %.1fs\n", ++done, config.sample_size,
                     test.records[i].clip.id().c_str(), seconds_since(start));
      });
    });
    for (std::size_t i = 0; i < config.sample_size; ++i) {
      if (results[i]) report.clips.push_back(std::move(*results[i]));
      else report.failures.push_back({"evaluate:" + test.records[i].clip.id(), errors[i]});
    }
  }
  report.rows = tabulate(config, report.clips);
  report.runtime_seconds = timings.take();
  report.runtime_seconds["total"] = seconds_since(total_start);
  write_report(report, config, paths);
  return report;
}

}  // namespace mcd::harness
