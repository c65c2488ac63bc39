#include "micl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "micl/errors.hpp"
#include "micl/text.hpp"

namespace micl::config {

using nlohmann::ordered_json;

namespace {

void reject_unknown_keys(const ordered_json& obj, const std::set<std::string>& allowed,
                         const std::string& context) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key", context.empty() ? it.key() : context + "." + it.key());
}

double get_number(const ordered_json& obj, const std::string& key, double fallback,
                  const std::string& context) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number()) throw ConfigError("expected a number", context + key);
  return obj[key].get<double>();
}

long get_integer(const ordered_json& obj, const std::string& key, long fallback,
                 const std::string& context) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number_integer()) throw ConfigError("expected an integer", context + key);
  return obj[key].get<long>();
}

bool get_bool(const ordered_json& obj, const std::string& key, bool fallback,
              const std::string& context) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_boolean()) throw ConfigError("expected a boolean", context + key);
  return obj[key].get<bool>();
}

std::string get_string(const ordered_json& obj, const std::string& key, std::string fallback,
                       const std::string& context) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_string()) throw ConfigError("expected a string", context + key);
  return obj[key].get<std::string>();
}

Vector get_vector(const ordered_json& arr, const std::string& context) {
  if (!arr.is_array()) throw ConfigError("expected an array of numbers", context);
  Vector v(arr.size());
  Index i = 0;
  for (const auto& x : arr) {
    if (!x.is_number()) throw ConfigError("expected a number", context);
    v[i++] = x.get<double>();
  }
  return v;
}

DataConfig parse_data(const ordered_json& obj) {
  DataConfig data;
  data.type = get_string(obj, "type", "gaussian", "data.");
  if (data.type == "gaussian") {
    reject_unknown_keys(obj, {"type", "classes", "radius", "variance", "train_per_class",
                              "test_per_class", "drift", "means", "variances"},
                        "data");
    if (obj.contains("means")) {
      // explicit mixture
      const auto& means = obj["means"];
      if (!means.is_array() || means.empty())
        throw ConfigError("expected a non-empty array", "data.means");
      for (std::size_t c = 0; c < means.size(); ++c) {
        dataio::GaussianClassSpec cl;
        cl.mean = get_vector(means[c], "data.means");
        if (obj.contains("variances"))
          cl.variance = get_vector(obj["variances"][c], "data.variances");
        else
          cl.variance = Vector::Constant(cl.mean.size(),
                                         get_number(obj, "variance", 1.0, "data."));
        cl.train_count = get_integer(obj, "train_per_class", 500, "data.");
        cl.test_count = get_integer(obj, "test_per_class", 100, "data.");
        data.gaussian.classes.push_back(std::move(cl));
      }
    } else {
      data.gaussian = dataio::hexagon_spec(
          get_integer(obj, "classes", 6, "data."), get_number(obj, "radius", 4.0, "data."),
          get_number(obj, "variance", 1.0, "data."),
          get_integer(obj, "train_per_class", 500, "data."),
          get_integer(obj, "test_per_class", 100, "data."));
    }
    if (obj.contains("drift")) data.gaussian.phase_drift = get_vector(obj["drift"], "data.drift");
    data.gaussian.validate();
  } else if (data.type == "csv") {
    reject_unknown_keys(obj, {"type", "path", "test_fraction"}, "data");
    data.csv_path = get_string(obj, "path", "", "data.");
    if (data.csv_path.empty()) throw ConfigError("csv data needs a path", "data.path");
    data.test_fraction = get_number(obj, "test_fraction", 0.2, "data.");
    if (!(data.test_fraction >= 0.0 && data.test_fraction < 1.0))
      throw ConfigError("test_fraction must be in [0,1)", "data.test_fraction");
  } else {
    throw ConfigError("unknown data type '" + data.type + "'", "data.type");
  }
  return data;
}

}  // namespace

RunConfig parse_config_text(const std::string& json_text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(json_text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what(), "<document>");
  }
  if (!doc.is_object()) throw ConfigError("config root must be an object", "<document>");
  reject_unknown_keys(doc, {"data", "schedule", "budget", "strategy", "adjust_old",
                            "use_transfer", "use_distillation", "fine_tune", "loss", "model",
                            "exemplar", "seed", "seeds"},
                      "");

  RunConfig cfg;
  cfg.data = parse_data(doc.contains("data") ? doc["data"] : ordered_json::object());

  protocol::ExperimentConfig& exp = cfg.experiment;

  {
    // Default schedule is the desk benchmark split [2,2,2]; an explicit
    // `phases` list accepts any partition; total_classes/incremental_phases
    // applies the strict half-first rule.
    if (!doc.contains("schedule")) {
      exp.schedule = protocol::PhaseSchedule::explicit_phases({2, 2, 2});
    } else {
      const auto& sched = doc["schedule"];
      reject_unknown_keys(sched, {"phases", "total_classes", "incremental_phases"}, "schedule");
      if (sched.contains("phases")) {
        if (!sched["phases"].is_array()) throw ConfigError("expected an array", "schedule.phases");
        std::vector<Index> phases;
        for (const auto& p : sched["phases"]) {
          if (!p.is_number_integer()) throw ConfigError("expected integers", "schedule.phases");
          phases.push_back(p.get<Index>());
        }
        try {
          exp.schedule = protocol::PhaseSchedule::explicit_phases(std::move(phases));
        } catch (const ScheduleError& e) {
          throw ConfigError(e.what(), "schedule.phases");
        }
      } else {
        if (!sched.contains("total_classes") || !sched.contains("incremental_phases"))
          throw ConfigError("need either phases or total_classes + incremental_phases",
                            "schedule");
        try {
          exp.schedule = protocol::PhaseSchedule::build(
              get_integer(sched, "total_classes", 0, "schedule."),
              static_cast<int>(get_integer(sched, "incremental_phases", 0, "schedule.")));
        } catch (const ScheduleError& e) {
          throw ConfigError(e.what(), "schedule");
        }
      }
    }
  }

  {
    const auto budget = doc.contains("budget") ? doc["budget"] : ordered_json::object();
    reject_unknown_keys(budget, {"mode", "per_class", "capacity"}, "budget");
    const std::string mode = get_string(budget, "mode", "per_class", "budget.");
    if (mode == "per_class") {
      exp.budget.mode = protocol::MemoryBudget::Mode::kPerClass;
      exp.budget.per_class = get_integer(budget, "per_class", 4, "budget.");
      if (exp.budget.per_class < 1)
        throw ConfigError("per_class must be >= 1", "budget.per_class");
    } else if (mode == "total") {
      exp.budget.mode = protocol::MemoryBudget::Mode::kTotal;
      exp.budget.total_capacity = get_integer(budget, "capacity", 24, "budget.");
      if (exp.budget.total_capacity < 1)
        throw ConfigError("capacity must be >= 1", "budget.capacity");
    } else {
      throw ConfigError("mode must be per_class or total", "budget.mode");
    }
  }

  try {
    exp.strategy = protocol::strategy_from_name(
        get_string(doc, "strategy", "mnemonics", ""));
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what(), "strategy");
  }
  exp.adjust_old = get_bool(doc, "adjust_old", true, "");
  exp.use_transfer = get_bool(doc, "use_transfer", true, "");
  exp.use_distillation = get_bool(doc, "use_distillation", true, "");
  exp.fine_tune = get_bool(doc, "fine_tune", true, "");

  {
    const auto loss = doc.contains("loss") ? doc["loss"] : ordered_json::object();
    reject_unknown_keys(loss, {"lambda", "temperature"}, "loss");
    exp.loss.lambda = get_number(loss, "lambda", 0.5, "loss.");
    exp.loss.temperature = get_number(loss, "temperature", 2.0, "loss.");
    if (!(exp.loss.lambda >= 0.0 && exp.loss.lambda <= 1.0))
      throw ConfigError("lambda must be in [0,1]", "loss.lambda");
    if (!(exp.loss.temperature >= 1.0))
      throw ConfigError("temperature must be >= 1", "loss.temperature");
  }

  {
    const auto m = doc.contains("model") ? doc["model"] : ordered_json::object();
    reject_unknown_keys(m, {"hidden_units", "lr", "epochs", "init_std", "head_init_std",
                            "fine_tune_lr", "fine_tune_epochs"},
                        "model");
    exp.hidden_units = get_integer(m, "hidden_units", 8, "model.");
    exp.model_lr = get_number(m, "lr", 0.1, "model.");
    exp.model_epochs = static_cast<int>(get_integer(m, "epochs", 80, "model."));
    exp.init_std = get_number(m, "init_std", 0.3, "model.");
    exp.head_init_std = get_number(m, "head_init_std", 0.01, "model.");
    exp.fine_tune_lr = get_number(m, "fine_tune_lr", 0.01, "model.");
    exp.fine_tune_epochs = static_cast<int>(get_integer(m, "fine_tune_epochs", 20, "model."));
  }

  {
    const auto e = doc.contains("exemplar") ? doc["exemplar"] : ordered_json::object();
    reject_unknown_keys(e, {"outer_lr_new", "outer_lr_old", "outer_epochs", "lr_halving_period",
                            "num_splits", "unroll_steps", "inner_lr", "backtracking", "clip_low",
                            "clip_high"},
                        "exemplar");
    auto& hp = exp.exemplar_hp;
    hp.outer_lr_new = get_number(e, "outer_lr_new", 0.01, "exemplar.");
    hp.outer_lr_old = get_number(e, "outer_lr_old", 0.01, "exemplar.");
    hp.outer_epochs = static_cast<int>(get_integer(e, "outer_epochs", 50, "exemplar."));
    hp.lr_halving_period = static_cast<int>(get_integer(e, "lr_halving_period", 10, "exemplar."));
    hp.num_splits = static_cast<int>(get_integer(e, "num_splits", 2, "exemplar."));
    hp.unroll.steps = static_cast<int>(get_integer(e, "unroll_steps", 5, "exemplar."));
    hp.unroll.inner_lr = get_number(e, "inner_lr", 0.01, "exemplar.");
    hp.backtracking = get_bool(e, "backtracking", false, "exemplar.");
    if (e.contains("clip_low") != e.contains("clip_high"))
      throw ConfigError("clip_low and clip_high must be given together", "exemplar.clip_low");
    if (e.contains("clip_low"))
      hp.clip = {get_number(e, "clip_low", 0.0, "exemplar."),
                 get_number(e, "clip_high", 0.0, "exemplar.")};
  }

  exp.master_seed = static_cast<std::uint64_t>(get_integer(doc, "seed", 1, ""));
  if (doc.contains("seeds")) {
    if (!doc["seeds"].is_array()) throw ConfigError("expected an array", "seeds");
    for (const auto& s : doc["seeds"]) {
      if (!s.is_number_integer()) throw ConfigError("expected integers", "seeds");
      cfg.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  if (cfg.seeds.empty()) cfg.seeds.push_back(exp.master_seed);

  try {
    exp.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what(), "<config>");
  }

  if (cfg.data.type == "gaussian" &&
      static_cast<Index>(cfg.data.gaussian.classes.size()) != exp.schedule.total_classes)
    throw ConfigError("gaussian class count does not match schedule total", "data.classes");

  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

dataio::PhaseStream RunConfig::make_stream(std::uint64_t seed) const {
  if (data.type == "gaussian")
    return dataio::generate_gaussian_stream(data.gaussian, experiment.schedule, seed);
  auto ds = dataio::load_dataset(data.csv_path);
  return dataio::partition_stream(ds, experiment.schedule, data.test_fraction, seed);
}

std::string snapshot_json(const RunConfig& cfg) {
  const auto& exp = cfg.experiment;
  ordered_json doc;

  ordered_json data;
  data["type"] = cfg.data.type;
  if (cfg.data.type == "gaussian") {
    ordered_json means = ordered_json::array();
    ordered_json variances = ordered_json::array();
    for (const auto& cl : cfg.data.gaussian.classes) {
      ordered_json m = ordered_json::array();
      ordered_json v = ordered_json::array();
      for (Index i = 0; i < cl.mean.size(); ++i) m.push_back(cl.mean[i]);
      for (Index i = 0; i < cl.variance.size(); ++i) v.push_back(cl.variance[i]);
      means.push_back(m);
      variances.push_back(v);
    }
    data["means"] = means;
    data["variances"] = variances;
    data["train_per_class"] = cfg.data.gaussian.classes.front().train_count;
    data["test_per_class"] = cfg.data.gaussian.classes.front().test_count;
    if (cfg.data.gaussian.phase_drift.size() > 0) {
      ordered_json d = ordered_json::array();
      for (Index i = 0; i < cfg.data.gaussian.phase_drift.size(); ++i)
        d.push_back(cfg.data.gaussian.phase_drift[i]);
      data["drift"] = d;
    }
  } else {
    data["path"] = cfg.data.csv_path;
    data["test_fraction"] = cfg.data.test_fraction;
  }
  doc["data"] = data;

  doc["schedule"] = {{"phases", exp.schedule.classes_per_phase}};
  if (exp.budget.mode == protocol::MemoryBudget::Mode::kPerClass)
    doc["budget"] = {{"mode", "per_class"}, {"per_class", exp.budget.per_class}};
  else
    doc["budget"] = {{"mode", "total"}, {"capacity", exp.budget.total_capacity}};
  doc["strategy"] = protocol::strategy_name(exp.strategy);
  doc["adjust_old"] = exp.adjust_old;
  doc["use_transfer"] = exp.use_transfer;
  doc["use_distillation"] = exp.use_distillation;
  doc["fine_tune"] = exp.fine_tune;
  doc["loss"] = {{"lambda", exp.loss.lambda}, {"temperature", exp.loss.temperature}};
  doc["model"] = {{"hidden_units", exp.hidden_units},
                  {"lr", exp.model_lr},
                  {"epochs", exp.model_epochs},
                  {"init_std", exp.init_std},
                  {"head_init_std", exp.head_init_std},
                  {"fine_tune_lr", exp.fine_tune_lr},
                  {"fine_tune_epochs", exp.fine_tune_epochs}};
  ordered_json ex = {{"outer_lr_new", exp.exemplar_hp.outer_lr_new},
                     {"outer_lr_old", exp.exemplar_hp.outer_lr_old},
                     {"outer_epochs", exp.exemplar_hp.outer_epochs},
                     {"lr_halving_period", exp.exemplar_hp.lr_halving_period},
                     {"num_splits", exp.exemplar_hp.num_splits},
                     {"unroll_steps", exp.exemplar_hp.unroll.steps},
                     {"inner_lr", exp.exemplar_hp.unroll.inner_lr},
                     {"backtracking", exp.exemplar_hp.backtracking}};
  if (exp.exemplar_hp.clip) {
    ex["clip_low"] = exp.exemplar_hp.clip->first;
    ex["clip_high"] = exp.exemplar_hp.clip->second;
  }
  doc["exemplar"] = ex;
  doc["seed"] = exp.master_seed;
  doc["seeds"] = cfg.seeds;
  return doc.dump(2) + "\n";
}

namespace {

ordered_json trace_json(const std::vector<double>& trace) {
  ordered_json arr = ordered_json::array();
  for (double v : trace) arr.push_back(v);
  return arr;
}

}  // namespace

std::string results_jsonl(const protocol::PhaseResults& results) {
  std::string out;
  for (const auto& p : results.phases) {
    ordered_json rec;
    rec["record"] = "phase";
    rec["phase"] = p.phase;
    rec["classes_seen"] = p.classes_seen;
    rec["acc_cumulative"] = p.acc_cumulative;
    rec["acc_phase0"] = p.acc_phase0;
    rec["model_loss_trace"] = trace_json(p.model_loss_trace);
    rec["exemplar_loss_trace"] = trace_json(p.exemplar_loss_trace);
    rec["exemplar_drift_trace"] = trace_json(p.exemplar_drift_trace);
    rec["finetune_loss_trace"] = trace_json(p.finetune_loss_trace);
    ordered_json drift = ordered_json::array();
    for (const auto& d : p.drift)
      drift.push_back({{"class", d.class_id}, {"cosine", d.cosine}, {"euclidean", d.euclidean}});
    rec["drift"] = drift;
    out += rec.dump() + "\n";
  }
  ordered_json summary;
  summary["record"] = "summary";
  summary["phases"] = results.phases.size();
  summary["avg_accuracy"] = protocol::average_accuracy(results);
  summary["forgetting_rate"] = protocol::forgetting_rate(results);
  out += summary.dump() + "\n";
  return out;
}

std::string timings_jsonl(const protocol::PhaseResults& results) {
  std::string out;
  for (const auto& p : results.phases) {
    ordered_json rec;
    rec["record"] = "timing";
    rec["phase"] = p.phase;
    rec["wall_seconds"] = p.wall_seconds;
    out += rec.dump() + "\n";
  }
  return out;
}

}  // namespace micl::config
