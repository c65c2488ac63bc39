#include <CLI11.hpp>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "micl/config.hpp"
#include "micl/dataio.hpp"
#include "micl/exemplar.hpp"
#include "micl/gradcheck.hpp"
#include "micl/model.hpp"
#include "micl/protocol.hpp"
#include "micl/rng.hpp"
#include "micl/text.hpp"

namespace fs = std::filesystem;
using namespace micl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitMissingArtifact = 4;

fs::path resolve_out(const std::string& out) {
  fs::path p(out);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("MICL_OUT_ROOT")) return fs::path(root) / p;
  return p;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << content;
  if (!f) throw IoError("write failed: " + path.string());
}

void run_one_seed(const config::RunConfig& cfg, std::uint64_t seed, const fs::path& seed_dir) {
  fs::create_directories(seed_dir);

  config::RunConfig snapshot = cfg;
  snapshot.seeds = {seed};
  snapshot.experiment.master_seed = seed;
  write_file(seed_dir / "config_snapshot.json", config::snapshot_json(snapshot));

  auto stream = cfg.make_stream(seed);
  protocol::ExperimentConfig exp = cfg.experiment;
  exp.master_seed = seed;
  protocol::RunArtifacts artifacts;
  auto results = protocol::run_mcil(exp, stream, nullptr, &artifacts);

  write_file(seed_dir / "results.jsonl", config::results_jsonl(results));
  write_file(seed_dir / "timings.jsonl", config::timings_jsonl(results));
  for (std::size_t p = 0; p < artifacts.models.size(); ++p) {
    const fs::path phase_dir = seed_dir / ("phase_" + std::to_string(p));
    fs::create_directories(phase_dir);
    model::save_checkpoint(artifacts.models[p], (phase_dir / "model.txt").string());
    exemplar::save_exemplars_csv(artifacts.memory[p], (phase_dir / "exemplars.csv").string());
  }
}

int cmd_run(const std::string& config_path, std::vector<std::uint64_t> seeds,
            const std::string& out) {
  auto cfg = config::load_config(config_path);
  if (!seeds.empty()) cfg.seeds = seeds;
  const fs::path out_dir = resolve_out(out);
  fs::create_directories(out_dir);
  write_file(out_dir / "config_snapshot.json", config::snapshot_json(cfg));
  for (std::uint64_t s : cfg.seeds) run_one_seed(cfg, s, out_dir / ("seed_" + std::to_string(s)));
  std::cout << "wrote " << cfg.seeds.size() << " run(s) under " << out_dir.string() << "\n";
  return kExitOk;
}

// ---- gradcheck -------------------------------------------------------------

struct CheckCase {
  std::string name;
  double max_rel = 0.0;
};

model::ClassifierParams make_check_model(Index width, Index hidden, Index classes,
                                         std::uint64_t seed) {
  std::vector<Index> widths;
  widths.push_back(width);
  if (hidden > 0) widths.push_back(hidden);
  widths.push_back(classes);
  auto m = model::random_init(widths,
                              hidden > 0 ? model::Activation::kTanh : model::Activation::kIdentity,
                              0.4, seed);
  // nonzero biases so no gradient coordinate sits at an accidental zero
  auto rng = make_rng(mix_seed(seed, 77));
  std::normal_distribution<double> noise(0.0, 0.2);
  for (auto& l : m.layers)
    for (Index r = 0; r < l.b.size(); ++r) l.b[r] = noise(rng);
  return m;
}

std::pair<Matrix, std::vector<int>> make_check_batch(Index rows, Index width, Index classes,
                                                     std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::normal_distribution<double> noise(0.0, 1.5);
  Matrix x(rows, width);
  std::vector<int> y;
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < width; ++c) x(r, c) = noise(rng);
    y.push_back(static_cast<int>(r % classes));
  }
  return {x, y};
}

int cmd_gradcheck(const std::string& size, double eps) {
  const bool medium = size == "medium";
  const Index width = medium ? 4 : 2;
  const Index hidden = medium ? 16 : 8;
  const Index classes = medium ? 3 : 2;
  const Index batch = medium ? 32 : 8;

  const auto started = std::chrono::steady_clock::now();
  std::vector<CheckCase> value_grad_cases, hvp_cases, hyper_cases;

  // value_and_grad vs central differences
  {
    auto mlp = make_check_model(width, hidden, classes, 11);
    auto [x, y] = make_check_batch(batch, width, classes, 12);
    model::PhaseObjective obj;
    obj.mode = model::PhaseObjective::Mode::kDirect;
    obj.dims = model::ModelDims::of(mlp);
    obj.x = x;
    obj.labels = y;
    FlatParams theta = model::flatten(mlp);
    auto vg = diffcore::value_and_grad(obj, theta);
    Vector fd = gradcheck::fd_gradient([&](const Vector& v) { return obj(v); },
                                       theta.values(), eps);
    value_grad_cases.push_back({"mlp classification", gradcheck::max_relative_error(
                                                          vg.gradient.values(), fd)});

    auto softmax = make_check_model(width, 0, classes, 13);
    model::PhaseObjective obj2;
    obj2.mode = model::PhaseObjective::Mode::kDirect;
    obj2.dims = model::ModelDims::of(softmax);
    obj2.x = x;
    obj2.labels = y;
    FlatParams theta2 = model::flatten(softmax);
    auto vg2 = diffcore::value_and_grad(obj2, theta2);
    Vector fd2 = gradcheck::fd_gradient([&](const Vector& v) { return obj2(v); },
                                        theta2.values(), eps);
    value_grad_cases.push_back({"softmax regression", gradcheck::max_relative_error(
                                                          vg2.gradient.values(), fd2)});

    auto teacher = make_check_model(width, hidden, classes, 14);
    model::PhaseObjective obj3 = obj;
    obj3.lambda = 0.5;
    obj3.tau = 2.0;
    obj3.old_classes = classes;
    obj3.teacher_probs = model::teacher_tempered_probs(teacher, x, 2.0, classes);
    auto vg3 = diffcore::value_and_grad(obj3, theta);
    Vector fd3 = gradcheck::fd_gradient([&](const Vector& v) { return obj3(v); },
                                        theta.values(), eps);
    value_grad_cases.push_back({"combined with distillation", gradcheck::max_relative_error(
                                                                  vg3.gradient.values(), fd3)});
  }

  // Hessian-vector products vs finite differences of gradients
  {
    auto mlp = make_check_model(width, hidden, classes, 21);
    auto [x, y] = make_check_batch(batch, width, classes, 22);
    model::PhaseObjective obj;
    obj.mode = model::PhaseObjective::Mode::kDirect;
    obj.dims = model::ModelDims::of(mlp);
    obj.x = x;
    obj.labels = y;
    FlatParams theta = model::flatten(mlp);
    auto rng = make_rng(23);
    std::normal_distribution<double> noise(0.0, 1.0);
    FlatParams v = FlatParams::zeros_like(theta);
    for (Index i = 0; i < v.size(); ++i) v[i] = noise(rng);
    FlatParams hv = diffcore::hessian_vector_product(obj, theta, v);
    Vector fd = gradcheck::fd_hvp(obj, theta, v, eps);
    hvp_cases.push_back({"mlp classification", gradcheck::max_relative_error(hv.values(), fd)});
  }

  // Unrolled hypergradient: exact-zero K=0 case, then the reference instance
  {
    auto mlp = make_check_model(2, 8, 2, 31);
    Matrix exemplars(4, 2);
    std::vector<int> ex_labels = {0, 0, 1, 1};
    auto rng = make_rng(32);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (Index r = 0; r < 4; ++r)
      for (Index c = 0; c < 2; ++c) exemplars(r, c) = noise(rng) + (r < 2 ? -1.5 : 1.5);
    auto [vx, vy] = make_check_batch(24, 2, 2, 33);

    const model::ModelDims dims = model::ModelDims::of(mlp);
    auto inner = [&](const auto& th, const auto& ex) {
      using S = std::decay_t<decltype(th[0])>;
      auto layers = model::layers_from_flat<S>(dims, th);
      return model::cross_entropy_mean(model::forward_layers<S>(layers, dims.activation, ex),
                                       ex_labels);
    };
    auto outer = [&](const auto& th, const auto&) {
      using S = std::decay_t<decltype(th[0])>;
      auto layers = model::layers_from_flat<S>(dims, th);
      MatX<S> xv = vx.template cast<S>();
      return model::cross_entropy_mean(model::forward_layers<S>(layers, dims.activation, xv), vy);
    };
    FlatParams theta0 = model::flatten(mlp);

    auto zero = diffcore::unrolled_hypergradient(inner, outer, theta0, exemplars,
                                                 UnrollSpec(0, 0.01));
    hyper_cases.push_back({"K=0 exact zero", zero.exemplar_grad.cwiseAbs().maxCoeff()});

    UnrollSpec spec(3, 0.01);
    auto hg = diffcore::unrolled_hypergradient(inner, outer, theta0, exemplars, spec);
    Matrix fd = gradcheck::fd_hypergradient(inner, outer, theta0, exemplars, spec, eps);
    double worst = 0.0;
    for (Index c = 0; c < fd.cols(); ++c)
      for (Index r = 0; r < fd.rows(); ++r)
        worst = std::max(worst, gradcheck::relative_error(hg.exemplar_grad(r, c), fd(r, c)));
    hyper_cases.push_back({"reference instance K=3", worst});
  }

  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  bool ok = true;
  auto report = [&](const char* suite, const std::vector<CheckCase>& cases, double threshold) {
    for (const auto& c : cases) {
      const bool pass = c.max_rel < threshold;
      ok = ok && pass;
      std::cout << (pass ? "PASS" : "FAIL") << " " << suite << " / " << c.name
                << ": max rel err = " << c.max_rel << " (threshold " << threshold << ")\n";
    }
  };
  report("value_and_grad", value_grad_cases, 1e-6);
  report("hessian_vector_product", hvp_cases, 1e-4);
  report("unrolled_hypergradient", hyper_cases, 1e-4);
  std::cout << "gradcheck " << size << " finished in " << elapsed << " s (eps=" << eps << ")\n";
  return ok ? kExitOk : kExitCheckFailed;
}

// ---- compare ---------------------------------------------------------------

struct CompareCell {
  protocol::Strategy strategy;
  std::uint64_t seed = 0;
  double avg_acc = 0.0;
  double forgetting = 0.0;
  std::vector<double> phase_acc;
};

int cmd_compare(const std::string& config_path, const std::string& strategies_csv, int seeds,
                const std::string& out, int jobs) {
  auto cfg = config::load_config(config_path);

  std::vector<protocol::Strategy> strategies;
  {
    std::istringstream in(strategies_csv);
    std::string name;
    while (std::getline(in, name, ',')) strategies.push_back(protocol::strategy_from_name(name));
  }
  if (strategies.size() < 2)
    throw ArgumentError("compare needs at least two strategies, got " +
                        std::to_string(strategies.size()));
  if (seeds < 1) throw ArgumentError("compare needs at least one seed");

  std::vector<std::uint64_t> seed_list;
  std::uint64_t state = cfg.experiment.master_seed;
  for (int k = 0; k < seeds; ++k) seed_list.push_back(splitmix64(state));

  std::vector<CompareCell> cells;
  for (auto s : strategies)
    for (auto seed : seed_list) cells.push_back(CompareCell{s, seed});

  auto run_cell = [&](CompareCell& cell) {
    auto stream = cfg.make_stream(cell.seed);
    protocol::ExperimentConfig exp = cfg.experiment;
    exp.strategy = cell.strategy;
    exp.master_seed = cell.seed;
    auto results = protocol::run_mcil(exp, stream);
    cell.avg_acc = protocol::average_accuracy(results);
    cell.forgetting = protocol::forgetting_rate(results);
    for (const auto& p : results.phases) cell.phase_acc.push_back(p.acc_cumulative);
  };

  if (jobs <= 1) {
    for (auto& cell : cells) run_cell(cell);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j)
      pool.emplace_back([&]() {
        while (true) {
          const std::size_t i = next.fetch_add(1);
          if (i >= cells.size()) return;
          run_cell(cells[i]);
        }
      });
    for (auto& t : pool) t.join();
  }

  std::cout << "strategy      mean_acc   std_acc    mean_forget std_forget  (" << seeds
            << " paired seeds)\n";
  std::string csv = "strategy,seed,avg_accuracy,forgetting_rate";
  const std::size_t phase_count = cells.front().phase_acc.size();
  for (std::size_t p = 0; p < phase_count; ++p) csv += ",acc_" + std::to_string(p);
  csv += "\n";
  for (auto strat : strategies) {
    double sum_a = 0, sum_f = 0, sq_a = 0, sq_f = 0;
    int n = 0;
    for (const auto& cell : cells) {
      if (cell.strategy != strat) continue;
      sum_a += cell.avg_acc;
      sum_f += cell.forgetting;
      sq_a += cell.avg_acc * cell.avg_acc;
      sq_f += cell.forgetting * cell.forgetting;
      ++n;
      csv += protocol::strategy_name(strat) + "," + std::to_string(cell.seed) + "," +
             format_double(cell.avg_acc) + "," + format_double(cell.forgetting);
      for (double a : cell.phase_acc) csv += "," + format_double(a);
      csv += "\n";
    }
    const double mean_a = sum_a / n;
    const double mean_f = sum_f / n;
    const double std_a = std::sqrt(std::max(0.0, sq_a / n - mean_a * mean_a));
    const double std_f = std::sqrt(std::max(0.0, sq_f / n - mean_f * mean_f));
    char line[160];
    std::snprintf(line, sizeof(line), "%-13s %.4f     %.4f     %+.4f     %.4f\n",
                  protocol::strategy_name(strat).c_str(), mean_a, std_a, mean_f, std_f);
    std::cout << line;
  }

  const fs::path out_dir = resolve_out(out);
  fs::create_directories(out_dir);
  write_file(out_dir / "compare.csv", csv);
  std::cout << "per-seed records: " << (out_dir / "compare.csv").string() << "\n";
  return kExitOk;
}

// ---- dump-embeddings -------------------------------------------------------

int cmd_dump_embeddings(const std::string& run_dir, int phase) {
  const fs::path dir(run_dir);
  const fs::path phase_dir = dir / ("phase_" + std::to_string(phase));
  if (!fs::exists(phase_dir / "model.txt") || !fs::exists(phase_dir / "exemplars.csv")) {
    std::cerr << "missing phase artifacts under " << phase_dir.string() << "\n";
    return kExitMissingArtifact;
  }
  if (!fs::exists(dir / "config_snapshot.json")) {
    std::cerr << "missing config_snapshot.json under " << dir.string() << "\n";
    return kExitMissingArtifact;
  }

  auto cfg = config::load_config((dir / "config_snapshot.json").string());
  auto params = model::load_checkpoint((phase_dir / "model.txt").string());
  auto memory = exemplar::load_exemplars_csv((phase_dir / "exemplars.csv").string());
  auto stream = cfg.make_stream(cfg.seeds.front());
  if (static_cast<std::size_t>(phase) >= stream.phase_count())
    throw ArgumentError("phase index beyond the stream");

  std::ofstream emb(phase_dir / "embeddings.csv");
  if (!emb) throw IoError("cannot write embeddings.csv");
  const Matrix probe = model::penultimate_features(params, stream.phases[0].train.features.topRows(1));
  emb << "id,class,role";
  for (Index f = 0; f < probe.cols(); ++f) emb << ",e" << f;
  emb << "\n";
  long id = 0;
  auto emit = [&](const Matrix& rows, const std::vector<int>& classes, const char* role) {
    Matrix feats = model::penultimate_features(params, rows);
    for (Index r = 0; r < feats.rows(); ++r) {
      emb << id++ << "," << classes[static_cast<std::size_t>(r)] << "," << role;
      for (Index f = 0; f < feats.cols(); ++f) emb << "," << format_double(feats(r, f));
      emb << "\n";
    }
  };
  for (int p = 0; p <= phase; ++p)
    emit(stream.phases[static_cast<std::size_t>(p)].train.features,
         stream.phases[static_cast<std::size_t>(p)].train.labels, "data");
  auto [ex, ex_classes] = exemplar::stack_classes(memory.per_class);
  emit(ex, ex_classes, "exemplar");
  auto [init, init_classes] = exemplar::stack_classes(memory.init_snapshot);
  emit(init, init_classes, "exemplar-init");

  std::ofstream drift(phase_dir / "drift_curve.csv");
  if (!drift) throw IoError("cannot write drift_curve.csv");
  drift << "phase,class,cosine,euclidean\n";
  for (int p = 0; p <= phase; ++p) {
    const fs::path dump = dir / ("phase_" + std::to_string(p)) / "exemplars.csv";
    if (!fs::exists(dump)) {
      std::cerr << "missing " << dump.string() << "\n";
      return kExitMissingArtifact;
    }
    auto set = exemplar::load_exemplars_csv(dump.string());
    for (const auto& [c, d] : exemplar::exemplar_drift(set))
      drift << p << "," << c << "," << format_double(d.cosine) << ","
            << format_double(d.euclidean) << "\n";
  }
  std::cout << "wrote " << (phase_dir / "embeddings.csv").string() << " and "
            << (phase_dir / "drift_curve.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale multi-class incremental learning with optimizable exemplars"};
  app.require_subcommand(1);

  std::string config_path, out = "micl_out", size = "small", strategies, run_dir;
  std::vector<std::uint64_t> seeds;
  double eps = 1e-5;
  int seed_count = 5, jobs = 1, phase = 0;

  auto* run = app.add_subcommand("run", "Run an experiment from a config file");
  run->add_option("config", config_path, "Config JSON path")->required();
  run->add_option("--seed", seeds, "Master seed(s); overrides the config");
  run->add_option("--out", out, "Output directory");

  auto* check = app.add_subcommand("gradcheck", "Finite-difference verification suites");
  check->add_option("--size", size, "small|medium")
      ->check(CLI::IsMember({"small", "medium"}));
  check->add_option("--eps", eps, "Central-difference step");

  auto* compare = app.add_subcommand("compare", "Paired-seed strategy comparison");
  compare->add_option("config", config_path, "Config JSON path")->required();
  compare->add_option("--strategies", strategies, "Comma-separated strategy list")->required();
  compare->add_option("--seeds", seed_count, "Number of paired seeds");
  compare->add_option("--out", out, "Output directory");
  compare->add_option("--jobs", jobs, "Parallel workers");

  auto* dump = app.add_subcommand("dump-embeddings", "Export per-phase embedding CSVs");
  dump->add_option("run_dir", run_dir, "Seed directory of a completed run")->required();
  dump->add_option("--phase", phase, "Phase index")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, seeds, out);
    if (*check) return cmd_gradcheck(size, eps);
    if (*compare) return cmd_compare(config_path, strategies, seed_count, out, jobs);
    if (*dump) return cmd_dump_embeddings(run_dir, phase);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
