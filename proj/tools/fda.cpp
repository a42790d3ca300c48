// fda: command-line driver for tasks, training, anchor construction, merging,
// adaptation, evaluation, analysis and the linear-model lab.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure,
// 4 I/O or format error.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "fda/analysis.hpp"
#include "fda/construct.hpp"
#include "fda/csv.hpp"
#include "fda/harness/config.hpp"
#include "fda/harness/experiment.hpp"
#include "fda/linear_lab.hpp"
#include "fda/merge.hpp"
#include "fda/netmodel.hpp"

namespace fs = std::filesystem;
using namespace fda;

namespace {

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::Io:
    case ErrorCode::FormatViolation:
      return 4;
    case ErrorCode::ConfigInvalid:
    case ErrorCode::InvalidArgument:
    case ErrorCode::InvalidSigma:
    case ErrorCode::InvalidK:
    case ErrorCode::MissingAnchors:
    case ErrorCode::ShapeMismatch:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::ArchitectureMismatch:
      return 2;
    default:
      return 3;
  }
}

Config load_config(const std::string& path) { return path.empty() ? Config{} : Config::load(path); }

/// Experiment keys from the config file, with --seed taking precedence.
ExperimentConfig experiment_config(const std::string& path, std::optional<std::uint64_t> seed) {
  Config c = load_config(path);
  if (seed) c.set("seed", std::to_string(*seed));
  return ExperimentConfig::from(c);
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorCode::Io, "cannot create directory '" + dir + "'");
}

std::string indexed(const std::string& stem, std::size_t one_based, const std::string& ext) {
  return stem + std::to_string(one_based) + ext;
}

/// task1.csv, task2.csv, ... in order, stopping at the first gap.
std::vector<TaskDataset> load_tasks(const std::string& dir) {
  std::vector<TaskDataset> tasks;
  for (std::size_t k = 1; fs::exists(fs::path(dir) / indexed("task", k, ".csv")); ++k)
    tasks.push_back(load_task_csv((fs::path(dir) / indexed("task", k, ".csv")).string()));
  require(!tasks.empty(), ErrorCode::Io, "no task1.csv in '" + dir + "'");
  return tasks;
}

std::vector<fs::path> files_with_extension(const std::string& dir, const std::string& ext) {
  require(fs::is_directory(dir), ErrorCode::Io, "not a directory: '" + dir + "'");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

// ---- subcommands ------------------------------------------------------------------

int cmd_gen_tasks(const std::string& config, std::uint64_t seed, const std::string& out) {
  const ExperimentConfig cfg = experiment_config(config, seed);
  ensure_dir(out);
  const auto tasks = gen_tasks(cfg.task, cfg.m, cfg.seed);
  for (std::size_t k = 0; k < tasks.size(); ++k)
    save_task_csv(tasks[k], (fs::path(out) / indexed("task", k + 1, ".csv")).string());
  save_task_csv(pretrain_dataset(cfg), (fs::path(out) / "pretrain.csv").string());
  std::cout << "wrote " << tasks.size() << " tasks and pretrain.csv to " << out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, task, tasks_dir, out, theta0, head_out, tau_out;
};

int cmd_train(const TrainArgs& a, std::uint64_t seed) {
  const ExperimentConfig cfg = experiment_config(a.config, seed);
  if (a.task == "pretrain") {
    const fs::path pre = fs::path(a.tasks_dir) / "pretrain.csv";
    const TaskDataset ds = a.tasks_dir.empty() ? pretrain_dataset(cfg) : load_task_csv(pre.string());
    save_checkpoint(pretrain_encoder(cfg, ds), a.out);
    std::cout << "pretrained encoder -> " << a.out << "\n";
    return 0;
  }
  std::size_t k = 0;
  try {
    k = std::stoul(a.task);
  } catch (const std::exception&) {
    fail(ErrorCode::ConfigInvalid, "--task must be 'pretrain' or a task number, got '" + a.task + "'");
  }
  require(k >= 1, ErrorCode::ConfigInvalid, "task numbers start at 1");
  require(!a.theta0.empty(), ErrorCode::ConfigInvalid, "--theta0 is required for a task");
  require(!a.tasks_dir.empty(), ErrorCode::ConfigInvalid, "--tasks is required for a task");
  const TaskDataset ds = load_task_csv((fs::path(a.tasks_dir) / indexed("task", k, ".csv")).string());
  const Checkpoint theta0 = load_checkpoint(a.theta0);
  const TaskModel tm = finetune_task(cfg, theta0, ds, k - 1);
  save_checkpoint(tm.finetuned, a.out);
  const std::string head_path = a.head_out.empty() ? a.out + ".head" : a.head_out;
  save_checkpoint(head_checkpoint(tm.head, k - 1), head_path);
  if (!a.tau_out.empty()) save_task_vector(task_vector(tm.finetuned, theta0), a.tau_out);
  const auto [x, y] = ds.split(Split::Test);
  const EvalResult before = evaluate(theta0, tm.head, x, y), after = evaluate(tm.finetuned, tm.head, x, y);
  std::cout << "task " << k << ": test accuracy " << before.accuracy << " (probe on theta0) -> " << after.accuracy
            << " (fine-tuned); wrote " << a.out << " and " << head_path << "\n";
  return 0;
}

struct ConstructArgs {
  std::string config, theta0, thetai, out;
  std::size_t block = 0, task = 1;
};

int cmd_construct(const ConstructArgs& a, std::uint64_t seed) {
  const ExperimentConfig cfg = experiment_config(a.config, seed);
  require(a.task >= 1, ErrorCode::ConfigInvalid, "task numbers start at 1");
  const Checkpoint t0 = load_checkpoint(a.theta0), ti = load_checkpoint(a.thetai);
  RngStream rng(construction_seed(cfg.seed, a.task - 1, a.block));
  const AnchorSet s = construct_fdas(t0, ti, a.block, cfg.construct, rng, static_cast<std::uint32_t>(a.task - 1));
  save_anchor_set(s, a.out);
  std::cout << "block " << a.block << ": matching loss " << s.loss_trace.front() << " -> " << s.loss_trace.back()
            << " over " << cfg.construct.steps << " steps; wrote " << a.out << "\n";
  return 0;
}

struct MergeArgs {
  std::string recipe, theta0, tau_dir, out;
  double lambda = 0.3, rank_fraction = 0.25;
};

int cmd_merge(const MergeArgs& a) {
  const Checkpoint t0 = load_checkpoint(a.theta0);
  std::vector<TaskVector> taus;
  for (const auto& p : files_with_extension(a.tau_dir, ".fdatvec")) taus.push_back(load_task_vector(p.string()));
  require(!taus.empty(), ErrorCode::Io, "no .fdatvec files in '" + a.tau_dir + "'");
  Checkpoint merged;
  if (a.recipe == "ta") merged = merge_ta(t0, taus, a.lambda);
  else if (a.recipe == "tsv") merged = merge_tsv(t0, taus, a.rank_fraction);
  else if (a.recipe == "avg") merged = merge_average(t0, taus);
  else fail(ErrorCode::ConfigInvalid, "--recipe must be ta, tsv or avg");
  merged.meta.name = a.recipe;
  save_checkpoint(merged, a.out);
  std::cout << "merged " << taus.size() << " task vectors (" << a.recipe << ") -> " << a.out << "\n";
  return 0;
}

struct AdaptArgs {
  std::string config, init, anchors_dir, theta0, out;
  std::vector<std::string> targets;
};

int cmd_adapt(const AdaptArgs& a, std::uint64_t seed) {
  const ExperimentConfig cfg = experiment_config(a.config, seed);
  const Checkpoint t0 = load_checkpoint(a.theta0);
  const Checkpoint init = a.init == "pretrained" ? t0 : load_checkpoint(a.init);
  std::vector<Checkpoint> targets;
  for (const auto& t : a.targets) targets.push_back(load_checkpoint(t));
  AnchorBank bank;
  for (const auto& p : files_with_extension(a.anchors_dir, ".fdaanch")) bank.add(load_anchor_set(p.string()));
  AdaptConfig ac = cfg.adapt;
  ac.seed = derive_seed(cfg.seed, {0xADA});
  AdaptResult r = adapt(init, t0, targets, bank, ac);
  r.model.meta.name = a.init == "pretrained" ? "fda_pretrained" : "fda_refine";
  save_checkpoint(r.model, a.out);
  write_loss_trace_csv(a.out + ".loss.csv", r.trace);
  std::cout << "adapted " << r.model.blocks.size() << " blocks on " << bank.size() << " anchor sets -> " << a.out
            << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, tasks_dir, heads_dir, out, split = "test", name;
};

int cmd_eval(const EvalArgs& a) {
  const Checkpoint model = load_checkpoint(a.ckpt);
  const auto tasks = load_tasks(a.tasks_dir);
  const Split split = parse_split(a.split);
  std::vector<EvalResult> res;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const Checkpoint head = load_checkpoint((fs::path(a.heads_dir) / indexed("head", k + 1, ".fdackpt")).string());
    require(head.blocks.size() == 1, ErrorCode::FormatViolation, "a head checkpoint holds exactly one block");
    const auto [x, y] = tasks[k].split(split);
    res.push_back(evaluate(model, head.blocks[0], x, y));
  }
  Report rep;
  rep.add(a.name.empty() ? fs::path(a.ckpt).stem().string() : a.name, res);
  write_report_csv(a.out, rep);
  std::cout << rep.rows[0].model << ": mean " << a.split << " accuracy " << rep.rows[0].avg_accuracy << " over "
            << tasks.size() << " tasks -> " << a.out << "\n";
  return 0;
}

struct AnalyzeArgs {
  std::string anchors_dir, features_dir, cone_dir, out;
  double fraction = 0.2;
};

int cmd_analyze(const AnalyzeArgs& a) {
  ensure_dir(a.out);
  const std::regex pattern(R"(anchors_t(\d+)_b(\d+)\.fdaanch)");
  CsvWriter summary((fs::path(a.out) / "summary.csv").string(),
                    {"task", "block", "tail_energy_ratio", "similarity", "energy_ratio"});
  std::size_t count = 0;
  for (const auto& p : files_with_extension(a.anchors_dir, ".fdaanch")) {
    std::smatch m;
    const std::string fname = p.filename().string();
    if (!std::regex_match(fname, m, pattern)) continue;
    const std::string tag = "_t" + m[1].str() + "_b" + m[2].str();
    const AnchorSet s = load_anchor_set(p.string());
    const SpectralReport rep = spectral_report(s);
    const std::vector<SpectrumRow> rows{{s.loss_trace.empty() ? 0 : s.loss_trace.size() - 1, rep}};
    write_spectra_csv((fs::path(a.out) / ("spectra" + tag + ".csv")).string(), rows);
    std::string sim, energy;
    const fs::path feats = fs::path(a.features_dir) / ("features" + tag + ".csv");
    if (!a.features_dir.empty() && fs::exists(feats))
      sim = std::to_string(subspace_similarity(s.x.transpose(), read_matrix_csv(feats.string()), a.fraction));
    const fs::path cone = fs::path(a.cone_dir) / ("cone" + tag + ".csv");
    const fs::path dir = fs::path(a.cone_dir) / ("direction" + tag + ".csv");
    if (!a.cone_dir.empty() && fs::exists(cone) && fs::exists(dir)) {
      const Matrix c = read_matrix_csv(cone.string());
      UpdateConeSample sample;
      for (std::size_t k = 0; k < c.rows(); ++k) sample.vectors.emplace_back(c.row(k).begin(), c.row(k).end());
      const Matrix d = read_matrix_csv(dir.string());
      energy = std::to_string(projection_energy_ratio(d.values(), sample));
    }
    summary.row({m[1].str(), m[2].str(), rep.tail_energy_ratio, sim, energy});
    ++count;
  }
  require(count > 0, ErrorCode::Io, "no anchors_t*_b*.fdaanch files in '" + a.anchors_dir + "'");
  std::cout << "analyzed " << count << " anchor sets -> " << a.out << "\n";
  return 0;
}

// ---- lab ----------------------------------------------------------------------------

struct LabConfig {
  std::size_t dim = 8;
  double decay = 2.0;  // singular values i^(-decay/2)
  double eta = 0.0;    // 0 selects 0.01 * |x0| |dW|_F / lambda_1
  std::size_t steps = 100;
  bool keep_sigma = false;
  std::size_t k = 2;
  std::size_t instances = 50;

  static LabConfig from(const Config& c) {
    LabConfig l;
    l.dim = c.get_size("lab.dim", l.dim);
    l.decay = c.get_double("lab.decay", l.decay);
    l.eta = c.get_double("lab.eta", l.eta);
    l.steps = c.get_size("lab.steps", l.steps);
    l.keep_sigma = c.get_bool("lab.keep_sigma", l.keep_sigma);
    l.k = c.get_size("lab.k", l.k);
    l.instances = c.get_size("lab.instances", l.instances);
    c.require_all_used();
    require(l.dim >= 2, ErrorCode::ConfigInvalid, "lab.dim must be at least 2");
    require(l.eta >= 0.0, ErrorCode::ConfigInvalid, "lab.eta must be non-negative");
    return l;
  }
};

std::vector<double> normal_vector(RngStream& rng, std::size_t d) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal();
  return v;
}

double default_eta(const lab::SpectralDecomposition& dec, std::span<const double> x0, const Matrix& dw) {
  return 0.01 * norm2(x0) * frobenius_norm(dw) / dec.lambda[0];
}

int cmd_lab(const std::string& mode, const std::string& config, std::uint64_t seed, const std::string& out) {
  const LabConfig lc = LabConfig::from(load_config(config));
  ensure_dir(out);
  RngStream rng(seed);
  if (mode == "dynamics" || mode == "bound") {
    const Matrix dw = lab::long_tailed_matrix(rng, lc.dim, lc.decay);
    const auto x0 = normal_vector(rng, lc.dim);
    const auto dec = lab::decompose(dw);
    const double eta = lc.eta > 0.0 ? lc.eta : default_eta(dec, x0, dw);
    const auto tr = lab::simulate_dynamics(dw, x0, eta, lc.steps, lc.keep_sigma);
    const Matrix obs = lab::observed_coefficients(dec, tr);
    if (mode == "dynamics") {
      lab::write_trajectory_csv((fs::path(out) / "trajectory.csv").string(), obs,
                                lab::predicted_coefficients(dec, x0, tr.gamma));
      CsvWriter w((fs::path(out) / "tail_energy.csv").string(), {"t", "tail_energy", "tail_fraction"});
      for (std::size_t t = 0; t < tr.x.size(); ++t) {
        const double tail = lab::tail_energy(tr.x[t], dec, std::min(lc.k, lc.dim - 1));
        const double total = norm2(tr.x[t]) * norm2(tr.x[t]);
        w.row({t, tail, tail / total});
      }
      std::cout << "simulated " << lc.steps << " steps in d=" << lc.dim << " -> " << out << "\n";
      return 0;
    }
    CsvWriter w((fs::path(out) / "bound.csv").string(), {"t", "row", "bound"});
    for (std::size_t t = 0; t < obs.rows(); ++t)
      for (std::size_t j = 0; j < dec.alpha.rows(); ++j)
        w.row({t, j + 1, lab::similarity_upper_bound(dec, j, obs.row(t), lc.k)});
    std::cout << "similarity bounds for " << obs.rows() << " steps -> " << out << "\n";
    return 0;
  }
  if (mode == "prop1") {
    CsvWriter w((fs::path(out) / "prop1.csv").string(), {"instance", "dim", "steps", "max_rel_err"});
    double worst = 0.0;
    for (std::size_t inst = 0; inst < lc.instances; ++inst) {
      const std::size_t d = 2 + rng.uniform_index(lc.dim - 1);
      const Matrix dw = lab::long_tailed_matrix(rng, d, lc.decay);
      const auto x0 = normal_vector(rng, d);
      const std::size_t steps = 1 + rng.uniform_index(lc.steps);
      const auto dec = lab::decompose(dw);
      const double eta = lc.eta > 0.0 ? lc.eta : default_eta(dec, x0, dw);
      const auto tr = lab::simulate_dynamics(dw, x0, eta, steps, lc.keep_sigma);
      const Matrix obs = lab::observed_coefficients(dec, tr), pred = lab::predicted_coefficients(dec, x0, tr.gamma);
      double e = 0.0;
      for (std::size_t k = 0; k < obs.size(); ++k) e = std::max(e, std::abs(obs[k] - pred[k]) / (std::abs(pred[k]) + 1e-12));
      worst = std::max(worst, e);
      w.row({inst, d, steps, e});
    }
    std::cout << "max relative error over " << lc.instances << " instances: " << worst << "\n";
    return 0;
  }
  fail(ErrorCode::ConfigInvalid, "lab mode must be dynamics, prop1 or bound");
}

int cmd_run(const std::string& config, std::uint64_t seed, const std::string& out, bool inputs) {
  const ExperimentConfig cfg = experiment_config(config, seed);
  const ExperimentResult r = run_experiment(cfg);
  write_experiment(r, out, inputs);
  for (const auto& row : r.report.rows)
    std::cout << row.model << ": mean test accuracy " << row.avg_accuracy << " (delta " << row.delta_accuracy << ")\n";
  std::cout << "best ta lambda " << r.best_lambda << "; outputs in " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Functional dual anchors: construction, merging and analysis"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "random seed")->required(); };

  std::string config, out;
  auto* gen = app.add_subcommand("gen-tasks", "generate the synthetic task suite");
  gen->add_option("--config", config, "config file")->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output directory")->required();
  add_seed(gen);

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "pretrain theta0, or probe and fine-tune one task");
  tr->add_option("--config", ta.config, "config file")->check(CLI::ExistingFile);
  tr->add_option("--task", ta.task, "'pretrain' or a task number (1-based)")->required();
  tr->add_option("--tasks", ta.tasks_dir, "directory from gen-tasks");
  tr->add_option("--theta0", ta.theta0, "pretrained checkpoint (tasks only)");
  tr->add_option("--head-out", ta.head_out, "head checkpoint path (default <out>.head)");
  tr->add_option("--tau-out", ta.tau_out, "also write the task vector here");
  tr->add_option("--out", ta.out, "output checkpoint")->required();
  add_seed(tr);

  ConstructArgs ca;
  auto* con = app.add_subcommand("construct", "build anchors for one block");
  con->add_option("--config", ca.config, "config file")->check(CLI::ExistingFile);
  con->add_option("--theta0", ca.theta0, "pretrained checkpoint")->required();
  con->add_option("--thetai", ca.thetai, "fine-tuned checkpoint")->required();
  con->add_option("--block", ca.block, "block index (0-based)")->required();
  con->add_option("--task", ca.task, "task number recorded in the anchor file (1-based)");
  con->add_option("--out", ca.out, "output anchor file")->required();
  add_seed(con);

  MergeArgs ma;
  auto* mer = app.add_subcommand("merge", "merge task vectors into theta0");
  mer->add_option("--recipe", ma.recipe, "ta, tsv or avg")->required()->check(CLI::IsMember({"ta", "tsv", "avg"}));
  mer->add_option("--lambda", ma.lambda, "task arithmetic scale");
  mer->add_option("--rank-fraction", ma.rank_fraction, "fraction of singular components kept (tsv)");
  mer->add_option("--theta0", ma.theta0, "pretrained checkpoint")->required();
  mer->add_option("--tau", ma.tau_dir, "directory of .fdatvec task vectors")->required();
  mer->add_option("--out", ma.out, "output checkpoint")->required();

  AdaptArgs aa;
  auto* ada = app.add_subcommand("adapt", "adapt a model on anchors, block by block");
  ada->add_option("--config", aa.config, "config file")->check(CLI::ExistingFile);
  ada->add_option("--init", aa.init, "'pretrained' or a checkpoint to refine")->required();
  ada->add_option("--theta0", aa.theta0, "pretrained checkpoint")->required();
  ada->add_option("--targets", aa.targets, "fine-tuned checkpoints in task order")->required()->delimiter(',');
  ada->add_option("--anchors", aa.anchors_dir, "directory of .fdaanch files")->required();
  ada->add_option("--out", aa.out, "output checkpoint")->required();
  add_seed(ada);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "per-task accuracy and loss of an encoder");
  ev->add_option("--ckpt", ea.ckpt, "encoder checkpoint")->required();
  ev->add_option("--tasks", ea.tasks_dir, "directory with task1.csv, ...")->required();
  ev->add_option("--heads", ea.heads_dir, "directory with head1.fdackpt, ...")->required();
  ev->add_option("--split", ea.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--name", ea.name, "model name in the report");
  ev->add_option("--out", ea.out, "report CSV")->required();

  AnalyzeArgs an;
  auto* ana = app.add_subcommand("analyze", "spectra, subspace similarity and cone energy of anchors");
  ana->add_option("--anchors", an.anchors_dir, "directory of anchors_t*_b*.fdaanch")->required();
  ana->add_option("--features", an.features_dir, "directory of features_t*_b*.csv");
  ana->add_option("--cone", an.cone_dir, "directory of cone_t*_b*.csv and direction_t*_b*.csv");
  ana->add_option("--fraction", an.fraction, "subspace fraction");
  ana->add_option("--out", an.out, "output directory")->required();

  std::string lab_mode;
  auto* lb = app.add_subcommand("lab", "linear-model anchor dynamics");
  lb->add_option("mode", lab_mode, "dynamics, prop1 or bound")->required()->check(
      CLI::IsMember({"dynamics", "prop1", "bound"}));
  lb->add_option("--config", config, "config file (lab.* keys)")->check(CLI::ExistingFile);
  lb->add_option("--out", out, "output directory")->required();
  add_seed(lb);

  bool inputs = false;
  auto* run = app.add_subcommand("run", "the full experiment");
  run->add_option("--config", config, "config file")->check(CLI::ExistingFile);
  run->add_option("--out", out, "output directory")->required();
  run->add_flag("--analysis-inputs", inputs, "also write features/cone/direction CSVs");
  add_seed(run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_gen_tasks(config, seed, out);
    if (*tr) return cmd_train(ta, seed);
    if (*con) return cmd_construct(ca, seed);
    if (*mer) return cmd_merge(ma);
    if (*ada) return cmd_adapt(aa, seed);
    if (*ev) return cmd_eval(ea);
    if (*ana) return cmd_analyze(an);
    if (*lb) return cmd_lab(lab_mode, config, seed, out);
    if (*run) return cmd_run(config, seed, out, inputs);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  }
  return 2;
}
