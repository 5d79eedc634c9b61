#include "mcd/harness/cli.hpp"

#include <fstream>
#include <ostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "mcd/error.hpp"
#include "mcd/harness/analysis.hpp"
#include "mcd/harness/experiment.hpp"
#include "mcd/util/binary_io.hpp"
#include "mcd/util/parallel.hpp"

namespace mcd::harness {

using nlohmann::json;

namespace {

struct CommonOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> workers;
  std::optional<std::size_t> sample;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "experiment config JSON (defaults when omitted)");
  cmd->add_option("--out", o.out, "run directory (overrides output_dir)");
  cmd->add_option("--seed", o.seed, "master seed override");
  cmd->add_option("--workers", o.workers, "concurrent work items")->check(CLI::PositiveNumber);
  cmd->add_option("--sample", o.sample, "evaluation sample size override");
}

ExperimentConfig resolve(const CommonOptions& o) {
  auto c = o.config.empty() ? default_config() : load_config(o.config);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) {
    c.seed = *o.seed;
    for (auto& row : c.rows) row.attack.seed = c.seed;
  }
  if (o.workers) c.workers = *o.workers;
  if (o.sample) {
    c.sample_size = *o.sample;
    c.adaptive_sample_size = std::min(c.adaptive_sample_size, c.sample_size);
  }
  c.validate();
  std::filesystem::create_directories(c.output_dir);
  return c;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::filesystem::create_directories(path.parent_path());
  util::write_file_atomic(path, j.dump(2) + "\n");
}

// [T,C,H,W] -> [T,H,W,C], the container layout of clip files.
std::vector<float> channel_last(std::span<const float> planar, const video::ClipGeometry& g) {
  const std::size_t hw = g.height * g.width;
  std::vector<float> out(planar.size());
  for (std::size_t t = 0; t < g.frames; ++t)
    for (std::size_t c = 0; c < g.channels; ++c)
      for (std::size_t p = 0; p < hw; ++p)
        out[(t * hw + p) * g.channels + c] = planar[(t * g.channels + c) * hw + p];
  return out;
}

void print_table(const ExperimentReport& report, std::ostream& out) {
  out << accuracy_csv(report);
  for (const auto& f : report.failures) out << "failure [" << f.stage << "]: " << f.message << "\n";
}

int cmd_gen_data(const ExperimentConfig& c, std::ostream& out) {
  const RunPaths paths{c.output_dir};
  const auto train = prepare_train_data(c, paths);
  const auto test = prepare_test_data(c, paths);
  out << fmt::format("wrote {} training clips to {}\nwrote {} test clips to {}\n",
                     train.records.size(), paths.train_data().string(), test.records.size(),
                     paths.test_data().string());
  return kExitOk;
}

int cmd_train(const ExperimentConfig& c, std::ostream& out) {
  const RunPaths paths{c.output_dir};
  const auto model = prepare_model(c, paths);
  const auto test = prepare_test_data(c, paths);
  std::vector<int> correct(test.records.size(), 0);
  util::parallel_for(test.records.size(), c.workers, [&](std::size_t i) {
    const auto& clip = test.records[i].clip;
    correct[i] = classifier::predict(model, clip, c.flow).label == *clip.label();
  });
  std::size_t hits = 0;
  for (int v : correct) hits += static_cast<std::size_t>(v);
  const double test_accuracy = static_cast<double>(hits) / static_cast<double>(test.records.size());
  write_json(paths.root / "train.json", {{"train_accuracy", model.train_accuracy},
                                         {"test_accuracy", test_accuracy},
                                         {"test_clips", test.records.size()}});
  out << fmt::format("train accuracy {:.4f}, held-out accuracy {:.4f} ({} clips)\n",
                     model.train_accuracy, test_accuracy, test.records.size());
  return kExitOk;
}

std::vector<std::size_t> select_rows(const ExperimentConfig& c, const std::vector<std::string>& names,
                                     bool attacks_only) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < c.rows.size(); ++i) {
    const bool named = std::find(names.begin(), names.end(), c.rows[i].name) != names.end();
    if (names.empty() ? (!attacks_only || c.rows[i].kind.has_value()) : named) out.push_back(i);
  }
  for (const auto& n : names) {
    if (std::none_of(c.rows.begin(), c.rows.end(), [&](const RowSpec& r) { return r.name == n; })) {
      throw ConfigError("unknown row '" + n + "'");
    }
  }
  return out;
}

int cmd_attack(const ExperimentConfig& c, const std::vector<std::string>& names, std::ostream& out) {
  const RunPaths paths{c.output_dir};
  const auto model = prepare_model(c, paths);
  const auto test = prepare_test_data(c, paths);
  for (auto ri : select_rows(c, names, true)) {
    const auto& row = c.rows[ri];
    const std::size_t n = row.sample == SampleSet::Main ? c.sample_size : c.adaptive_sample_size;
    const auto dir = paths.root / "attacks" / row.name;
    std::filesystem::create_directories(dir);
    util::parallel_for(n, c.workers, [&](std::size_t i) {
      const auto& clip = test.records[i].clip;
      const auto clean = video::to_planar<float>(clip);
      const auto p = run_attack(c, ri, attack::make_target(clip, clean), model, i);
      auto adversarial = video::from_planar<float>(clip, p.adversarial);
      video::save_clip(adversarial, dir / (clip.id() + ".vclip"));
      video::save_array(clip.geometry(), channel_last(p.delta(clean), clip.geometry()),
                        dir / (clip.id() + ".delta.vclip"));
      json trace{{"kind", attack::to_string(p.kind)},
                 {"loss_trace", p.loss_trace},
                 {"bound_trace", p.bound_trace},
                 {"frame", p.frame},
                 {"offsets", p.offsets},
                 {"purification_calls", p.purification_calls}};
      write_json(dir / (clip.id() + ".trace.json"), trace);
    });
    out << fmt::format("{}: {} clips -> {}\n", row.name, n, dir.string());
  }
  return kExitOk;
}

int cmd_defend(const ExperimentConfig& c, const std::string& input, bool multi, std::ostream& out) {
  const RunPaths paths{c.output_dir};
  const std::filesystem::path in_dir = input.empty() ? paths.root / "attacks" : std::filesystem::path(input);
  if (!std::filesystem::is_directory(in_dir)) throw IoError("no such directory " + in_dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(in_dir)) {
    const auto name = e.path().filename().string();
    if (e.is_regular_file() && e.path().extension() == ".vclip" &&
        name.find(".delta.") == std::string::npos) {
      files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  const auto defense_config = multi ? c.multi_defense() : c.defense;
  const auto out_dir = paths.root / (multi ? "defended-multi" : "defended");
  util::parallel_for(files.size(), c.workers, [&](std::size_t i) {
    const auto clip = video::load_clip(files[i]);
    const auto result = defense::purify(clip, c.flow, defense_config);
    const auto target = out_dir / std::filesystem::relative(files[i], in_dir);
    std::filesystem::create_directories(target.parent_path());
    video::save_clip(video::from_planar<float>(clip, result.purified), target);
    auto trace_path = target;
    trace_path.replace_extension(".trace.json");
    write_json(trace_path, {{"loss_trace", result.loss_trace},
                            {"best_iteration", result.best_iteration},
                            {"best_loss", result.best_loss}});
  });
  out << fmt::format("purified {} clips -> {}\n", files.size(), out_dir.string());
  return kExitOk;
}

int cmd_eval(const ExperimentConfig& c, std::ostream& out) {
  const auto report = run_full_experiment(c);
  print_table(report, out);
  return report.failures.empty() ? kExitOk : kExitRuntime;
}

int cmd_viz(const ExperimentConfig& c, std::size_t index, const std::vector<std::string>& names,
            std::ostream& out) {
  const RunPaths paths{c.output_dir};
  const auto test = prepare_test_data(c, paths);
  if (index >= test.records.size()) throw ConfigError("clip index out of range");
  const auto model = prepare_model(c, paths);
  const auto& clip = test.records[index].clip;
  const auto clean = video::to_planar<float>(clip);
  std::vector<PanelRow> rows{{"clean", clean}};
  const auto selected = names.empty() ? std::vector<std::string>{"pgd"} : names;
  for (auto ri : select_rows(c, selected, true)) {
    auto adversarial = run_attack(c, ri, attack::make_target(clip, clean), model, index).adversarial;
    auto purified = defense::purify(adversarial, clip.geometry(), c.flow, c.defense).purified;
    rows.push_back({c.rows[ri].name, std::move(adversarial)});
    rows.push_back({c.rows[ri].name + "-purified", std::move(purified)});
  }
  const auto dir = paths.root / "viz" / clip.id();
  for (const auto& p : viz_flow_panel(clip.geometry(), rows, c.flow, dir)) out << p.string() << "\n";
  return kExitOk;
}

int cmd_loss_hist(const ExperimentConfig& c, const std::string& report_path, std::size_t bins,
                  const std::vector<std::string>& conditions, std::ostream& out) {
  const RunPaths paths{c.output_dir};
  const std::filesystem::path path = report_path.empty() ? paths.report_json() : std::filesystem::path(report_path);
  json j;
  try {
    j = json::parse(util::read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  const auto report = report_from_json(j);
  const auto keys = conditions.empty()
                        ? std::vector<std::string>{"clean/standard", "pgd/standard", "pgd/defended"}
                        : conditions;
  std::vector<NamedValues> series;
  for (const auto& k : keys) series.push_back({k, report.values(k, &ConditionRecord::mc_loss)});
  const auto h = loss_histogram(series, bins);
  const auto dir = paths.root / "loss_hist";
  std::filesystem::create_directories(dir);
  util::write_file_atomic(dir / "histogram.csv", histogram_csv(h));
  video::write_ppm(dir / "histogram.ppm", 200, bins * 4 * (series.size() + 1),
                   render_histogram(h, 200, bins * 4 * (series.size() + 1)));
  json aurocs = json::object();
  for (std::size_t k = 1; k < series.size(); ++k) {
    aurocs[series[k].name] = auroc(series[0].values, series[k].values);
  }
  write_json(dir / "auroc.json", {{"negative", series[0].name}, {"auroc", aurocs}});
  out << histogram_csv(h) << "auroc vs " << series[0].name << ": " << aurocs.dump() << "\n";
  return kExitOk;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Motion-consistency purification experiments on synthetic video", "mcd"};
  app.require_subcommand(1);
  CommonOptions common;
  std::vector<std::string> rows, conditions;
  std::string input, report_path;
  bool multi = false;
  std::size_t clip_index = 0, bins = 20;

  auto* gen = app.add_subcommand("gen-data", "generate the train and test splits");
  auto* train = app.add_subcommand("train", "train the flow classifier");
  auto* attack = app.add_subcommand("attack", "attack the evaluation sample");
  auto* defend = app.add_subcommand("defend", "purify every .vclip below a directory");
  auto* eval = app.add_subcommand("eval", "run the full experiment and write the report");
  auto* viz = app.add_subcommand("viz-flow", "render frame and flow-colour panels");
  auto* hist = app.add_subcommand("loss-hist", "histogram of MC losses from a report");
  for (auto* cmd : {gen, train, attack, defend, eval, viz, hist}) add_common(cmd, common);
  attack->add_option("--rows", rows, "rows to attack (default: every attack row)");
  defend->add_option("--input", input, "directory of clips (default: <out>/attacks)");
  defend->add_flag("--multi", multi, "use the multi-constraint objective");
  viz->add_option("--clip-index", clip_index, "test clip index");
  viz->add_option("--rows", rows, "attack rows to show (default: pgd)");
  hist->add_option("--report", report_path, "report JSON (default: <out>/report.json)");
  hist->add_option("--bins", bins, "number of bins")->check(CLI::PositiveNumber);
  hist->add_option("--conditions", conditions, "row/column keys; the first is the negative class");

  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    const auto config = resolve(common);
    if (*gen) return cmd_gen_data(config, out);
    if (*train) return cmd_train(config, out);
    if (*attack) return cmd_attack(config, rows, out);
    if (*defend) return cmd_defend(config, input, multi, out);
    if (*eval) return cmd_eval(config, out);
    if (*viz) return cmd_viz(config, clip_index, rows, out);
    return cmd_loss_hist(config, report_path, bins, conditions, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace mcd::harness
