#include "mcd/harness/config.hpp"

#include <fstream>
#include <set>

#include "mcd/error.hpp"
#include "mcd/util/parallel.hpp"
#include "mcd/util/rng.hpp"

namespace mcd::harness {

using nlohmann::json;

namespace {

// Reads typed fields from one JSON object and rejects keys never read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError(where_ + ": unknown key '" + item.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

template <typename Fn>
void rethrow_as_config(const std::string& where, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

void read_mc(const json& j, loss::MCConfig& mc, const std::string& where) {
  ObjectReader r(j, where);
  std::string metric = mc.metric == loss::SimMetric::L1 ? "l1" : "charbonnier";
  r.get("metric", metric);
  if (metric == "l1") mc.metric = loss::SimMetric::L1;
  else if (metric == "charbonnier") mc.metric = loss::SimMetric::Charbonnier;
  else throw ConfigError(where + ".metric: expected 'l1' or 'charbonnier'");
  r.get("kappa", mc.kappa);
  r.get("p", mc.p);
  r.get("lambda_smooth", mc.lambda_smooth);
  r.get("lambda_edge", mc.lambda_edge);
  r.finish();
}

json mc_json(const loss::MCConfig& mc) {
  return {{"metric", mc.metric == loss::SimMetric::L1 ? "l1" : "charbonnier"},
          {"kappa", mc.kappa},
          {"p", mc.p},
          {"lambda_smooth", mc.lambda_smooth},
          {"lambda_edge", mc.lambda_edge}};
}

RowSpec read_row(const json& j, std::size_t index) {
  const std::string where = "rows[" + std::to_string(index) + "]";
  ObjectReader r(j, where);
  RowSpec row;
  std::string kind = "clean";
  r.get("kind", kind);
  if (kind != "clean") {
    try {
      row.kind = attack::attack_kind_from_string(kind);
    } catch (const Error& e) {
      throw ConfigError(where + ".kind: " + e.what());
    }
  }
  row.name = kind;
  r.get("name", row.name);
  r.get("epsilon", row.attack.epsilon);
  r.get("steps", row.attack.steps);
  r.get("step_size", row.attack.step_size);
  std::string init = "uniform";
  r.get("init", init);
  if (init == "uniform") row.attack.init = attack::Init::UniformRandom;
  else if (init == "zero") row.attack.init = attack::Init::Zero;
  else throw ConfigError(where + ".init: expected 'uniform' or 'zero'");
  r.get("lambda", row.attack.lambda);
  if (const json* f = r.child("flicker")) {
    ObjectReader fr(*f, where + ".flicker");
    fr.get("steps", row.flicker.steps);
    fr.get("beta1", row.flicker.beta1);
    fr.get("beta2", row.flicker.beta2);
    fr.get("step_size", row.flicker.step_size);
    fr.finish();
  }
  std::string sample = "main";
  r.get("sample", sample);
  if (sample == "main") row.sample = SampleSet::Main;
  else if (sample == "adaptive") row.sample = SampleSet::Adaptive;
  else throw ConfigError(where + ".sample: expected 'main' or 'adaptive'");
  std::vector<std::string> columns{"standard"};
  r.get("columns", columns);
  for (const auto& c : columns) {
    try {
      row.columns.push_back(column_from_string(c));
    } catch (const Error& e) {
      throw ConfigError(where + ".columns: " + e.what());
    }
  }
  r.finish();
  return row;
}

json row_json(const RowSpec& row) {
  json j{{"name", row.name},
         {"kind", row.kind ? attack::to_string(*row.kind) : "clean"},
         {"sample", to_string(row.sample)}};
  json columns = json::array();
  for (auto c : row.columns) columns.push_back(to_string(c));
  j["columns"] = columns;
  if (row.kind) {
    j["epsilon"] = row.attack.epsilon;
    j["steps"] = row.attack.steps;
    j["step_size"] = row.attack.step_size;
    j["init"] = row.attack.init == attack::Init::Zero ? "zero" : "uniform";
    j["lambda"] = row.attack.lambda;
    if (*row.kind == attack::AttackKind::Flicker) {
      j["flicker"] = {{"steps", row.flicker.steps},
                      {"beta1", row.flicker.beta1},
                      {"beta2", row.flicker.beta2},
                      {"step_size", row.flicker.step_size}};
    }
  }
  return j;
}

RowSpec make_row(std::string name, std::optional<attack::AttackKind> kind, SampleSet sample,
                 std::vector<Column> columns) {
  RowSpec row;
  row.name = std::move(name);
  row.kind = kind;
  row.sample = sample;
  row.columns = std::move(columns);
  return row;
}

}  // namespace

const char* to_string(Column column) {
  switch (column) {
    case Column::Standard: return "standard";
    case Column::RandomDefense: return "random-defense";
    case Column::Defended: return "defended";
    case Column::DefendedMulti: return "defended-multi";
  }
  return "?";
}

Column column_from_string(const std::string& name) {
  for (auto c : {Column::Standard, Column::RandomDefense, Column::Defended, Column::DefendedMulti}) {
    if (name == to_string(c)) return c;
  }
  throw ConfigError("unknown column '" + name + "'");
}

const char* to_string(SampleSet set) { return set == SampleSet::Main ? "main" : "adaptive"; }

std::uint64_t ExperimentConfig::train_data_seed() const { return util::child_seed(seed, 0, 1); }
std::uint64_t ExperimentConfig::test_data_seed() const { return util::child_seed(seed, 0, 2); }
std::size_t ExperimentConfig::test_size() const {
  return static_cast<std::size_t>(test_clips_per_class) * video::kNumClasses;
}

defense::DefenseConfig ExperimentConfig::multi_defense() const {
  auto d = defense;
  d.loss = defense::DefenseLoss::MultiMC;
  return d;
}

void ExperimentConfig::validate() const {
  rethrow_as_config("dataset", [&] { dataset.validate(); });
  rethrow_as_config("train", [&] { train.validate(); });
  rethrow_as_config("flow", [&] { flow.validate(); });
  rethrow_as_config("defense", [&] { defense.validate(); });
  if (test_clips_per_class < 1) throw ConfigError("test_clips_per_class must be >= 1");
  if (sample_size == 0 || sample_size > test_size()) {
    throw ConfigError("sample_size must be in [1, " + std::to_string(test_size()) + "]");
  }
  if (adaptive_sample_size > sample_size) {
    throw ConfigError("adaptive_sample_size must be <= sample_size");
  }
  if (2 * epe_margin >= std::min(dataset.geometry.height, dataset.geometry.width)) {
    throw ConfigError("epe_margin leaves no interior");
  }
  if (workers == 0) throw ConfigError("workers must be >= 1");
  std::set<std::string> names;
  for (const auto& row : rows) {
    if (row.name.empty() || row.name.find('/') != std::string::npos) {
      throw ConfigError("row names must be non-empty and contain no '/'");
    }
    if (!names.insert(row.name).second) throw ConfigError("duplicate row '" + row.name + "'");
    if (row.columns.empty()) throw ConfigError("row '" + row.name + "' has no columns");
    if (row.kind && *row.kind != attack::AttackKind::Flicker) {
      rethrow_as_config("rows." + row.name, [&] { row.attack.validate(); });
    }
    if (row.kind == attack::AttackKind::Flicker && row.flicker.steps < 0) {
      throw ConfigError("row '" + row.name + "': flicker steps must be >= 0");
    }
  }
  if (!output_dir.empty()) {
    std::error_code ec;
    auto parent = std::filesystem::absolute(output_dir, ec).parent_path();
    if (ec || (!std::filesystem::exists(parent) && !parent.empty())) {
      throw ConfigError("output_dir parent does not exist: " + parent.string());
    }
  } else {
    throw ConfigError("output_dir must be set");
  }
}

ExperimentConfig default_config() {
  using K = attack::AttackKind;
  using C = Column;
  ExperimentConfig c;
  c.seed = 20240611;
  c.flow.alpha = 0.15;
  c.workers = util::default_workers();
  c.rows = {
      make_row("clean", std::nullopt, SampleSet::Main, {C::Standard, C::RandomDefense, C::Defended}),
      make_row("random", K::Random, SampleSet::Main, {C::Standard, C::RandomDefense, C::Defended}),
      make_row("pgd", K::PGD, SampleSet::Main, {C::Standard, C::RandomDefense, C::Defended}),
      make_row("one-frame", K::OneFrame, SampleSet::Main, {C::Standard, C::Defended}),
      make_row("flicker", K::Flicker, SampleSet::Adaptive, {C::Standard, C::Defended}),
      make_row("adaptive-1", K::Adaptive1, SampleSet::Adaptive,
               {C::Standard, C::Defended, C::DefendedMulti}),
      make_row("adaptive-2", K::Adaptive2, SampleSet::Adaptive, {C::Standard, C::Defended}),
      make_row("bpda", K::BPDA, SampleSet::Adaptive, {C::Standard, C::Defended}),
  };
  return c;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c = default_config();
  ObjectReader r(j, "config");
  r.get("seed", c.seed);
  if (const json* d = r.child("dataset")) {
    ObjectReader dr(*d, "dataset");
    auto& g = c.dataset.geometry;
    dr.get("frames", g.frames);
    dr.get("height", g.height);
    dr.get("width", g.width);
    dr.get("channels", g.channels);
    dr.get("clips_per_class", c.dataset.clips_per_class);
    dr.get("test_clips_per_class", c.test_clips_per_class);
    dr.get("texture_seed", c.dataset.texture_seed);
    dr.get("shift_range", c.dataset.shift_range);
    dr.get("angle_range", c.dataset.angle_range);
    dr.get("scale_range", c.dataset.scale_range);
    dr.get("texture_sigma", c.dataset.texture_sigma);
    dr.get("texture_contrast", c.dataset.texture_contrast);
    dr.get("margin", c.dataset.margin);
    dr.finish();
  }
  if (const json* t = r.child("train")) {
    ObjectReader tr(*t, "train");
    tr.get("learning_rate", c.train.learning_rate);
    tr.get("momentum", c.train.momentum);
    tr.get("epochs", c.train.epochs);
    tr.get("batch_size", c.train.batch_size);
    tr.finish();
  }
  if (const json* f = r.child("flow")) {
    ObjectReader fr(*f, "flow");
    fr.get("alpha", c.flow.alpha);
    fr.get("iters_inference", c.flow.iters_inference);
    fr.get("iters_gradient", c.flow.iters_gradient);
    fr.get("luma", c.flow.luma);
    fr.finish();
  }
  if (const json* d = r.child("defense")) {
    ObjectReader dr(*d, "defense");
    dr.get("epsilon", c.defense.epsilon);
    dr.get("eta", c.defense.eta);
    dr.get("iterations", c.defense.iterations);
    if (const json* mc = dr.child("mc")) read_mc(*mc, c.defense.mc, "defense.mc");
    dr.finish();
  }
  if (const json* rows = r.child("rows")) {
    if (!rows->is_array()) throw ConfigError("rows: expected an array");
    c.rows.clear();
    for (std::size_t i = 0; i < rows->size(); ++i) c.rows.push_back(read_row(rows->at(i), i));
  }
  r.get("sample_size", c.sample_size);
  r.get("adaptive_sample_size", c.adaptive_sample_size);
  r.get("epe_margin", c.epe_margin);
  std::string out = c.output_dir.string();
  r.get("output_dir", out);
  c.output_dir = out;
  std::vector<std::string> formats{"json", "csv"};
  r.get("report_formats", formats);
  c.write_json = c.write_csv = false;
  for (const auto& f : formats) {
    if (f == "json") c.write_json = true;
    else if (f == "csv") c.write_csv = true;
    else throw ConfigError("report_formats: unknown format '" + f + "'");
  }
  r.get("workers", c.workers);
  r.finish();
  // Rows inherit the experiment seed; per-clip streams are derived from it.
  for (auto& row : c.rows) row.attack.seed = c.seed;
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

json to_json(const ExperimentConfig& c) {
  const auto& g = c.dataset.geometry;
  json rows = json::array();
  for (const auto& row : c.rows) rows.push_back(row_json(row));
  json formats = json::array();
  if (c.write_json) formats.push_back("json");
  if (c.write_csv) formats.push_back("csv");
  return {
      {"seed", c.seed},
      {"dataset",
       {{"frames", g.frames},
        {"height", g.height},
        {"width", g.width},
        {"channels", g.channels},
        {"clips_per_class", c.dataset.clips_per_class},
        {"test_clips_per_class", c.test_clips_per_class},
        {"texture_seed", c.dataset.texture_seed},
        {"shift_range", c.dataset.shift_range},
        {"angle_range", c.dataset.angle_range},
        {"scale_range", c.dataset.scale_range},
        {"texture_sigma", c.dataset.texture_sigma},
        {"texture_contrast", c.dataset.texture_contrast},
        {"margin", c.dataset.margin}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"momentum", c.train.momentum},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size}}},
      {"flow",
       {{"alpha", c.flow.alpha},
        {"iters_inference", c.flow.iters_inference},
        {"iters_gradient", c.flow.iters_gradient},
        {"luma", c.flow.luma}}},
      {"defense",
       {{"epsilon", c.defense.epsilon},
        {"eta", c.defense.eta},
        {"iterations", c.defense.iterations},
        {"mc", mc_json(c.defense.mc)}}},
      {"rows", rows},
      {"sample_size", c.sample_size},
      {"adaptive_sample_size", c.adaptive_sample_size},
      {"epe_margin", c.epe_margin},
      {"report_formats", formats},
  };
}

}  // namespace mcd::harness
