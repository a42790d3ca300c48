#pragma once

// End-to-end pipeline: tasks -> pretrain -> probe heads -> fine-tune ->
// anchors per (task, block) -> baseline merges -> adaptation -> evaluation,
// with the spectral/subspace/cone measurements taken along construction.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fda/analysis.hpp"
#include "fda/construct.hpp"
#include "fda/csv.hpp"
#include "fda/harness/config.hpp"
#include "fda/harness/tasks.hpp"
#include "fda/harness/train.hpp"
#include "fda/merge.hpp"
#include "fda/netmodel.hpp"

namespace fda {

struct ExperimentConfig {
  std::size_t m = 4;
  TaskSpec task;
  TaskSpec pretrain_task;
  std::size_t hidden = 32;
  std::size_t ffn_hidden = 64;
  TrainConfig pretrain;
  TrainConfig probe;
  TrainConfig finetune;
  ConstructionConfig construct;
  AdaptConfig adapt;
  std::vector<double> ta_lambdas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  double tsv_fraction = 0.25;
  bool analysis = true;
  std::vector<double> trace_fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t feature_samples = 64;
  std::size_t cone_size = 64;
  TrainConfig cone;
  std::size_t direction_epochs = 50;
  std::uint64_t seed = 0;

  ExperimentConfig() {
    task.modes = 3;
    task.spread = 0.7;
    pretrain_task.classes = 8;
    pretrain_task.subspace_dim = 8;
    pretrain_task.n_train = 1024;
    pretrain_task.n_val = 64;
    pretrain_task.n_test = 64;
    pretrain.epochs = 30;
    pretrain.lr = 3e-3;
    probe.epochs = 60;
    probe.lr = 1e-2;
    probe.update_encoder = false;
    finetune.epochs = 40;
    finetune.lr = 3e-3;
    finetune.update_head = false;
    construct.steps = 185;
    construct.lr = 1e-2;
    construct.n_anchors = 256;
    adapt.lr = 1e-4;
    adapt.epochs = 50;
    adapt.batch_size = 64;
    cone.lr = 1e-3;
    cone.batch_size = 16;
  }

  /// Read every recognised key from `c`; unknown keys are a ConfigInvalid error.
  static ExperimentConfig from(const Config& c) {
    ExperimentConfig e;
    e.m = c.get_size("tasks.count", e.m);
    auto read_task = [&](TaskSpec& t, const std::string& p) {
      t.input_dim = c.get_size("tasks.input_dim", t.input_dim);
      t.classes = c.get_size(p + ".classes", t.classes);
      t.subspace_dim = c.get_size(p + ".subspace_dim", t.subspace_dim);
      t.separation = c.get_double(p + ".separation", t.separation);
      t.spread = c.get_double(p + ".spread", t.spread);
      t.noise = c.get_double(p + ".noise", t.noise);
      t.modes = c.get_size(p + ".modes", t.modes);
      t.n_train = c.get_size(p + ".train", t.n_train);
      t.n_val = c.get_size(p + ".val", t.n_val);
      t.n_test = c.get_size(p + ".test", t.n_test);
    };
    read_task(e.task, "tasks");
    read_task(e.pretrain_task, "pretrain.data");
    e.hidden = c.get_size("net.hidden", e.hidden);
    e.ffn_hidden = c.get_size("net.ffn_hidden", e.ffn_hidden);
    auto read_train = [&](TrainConfig& t, const std::string& p) {
      t.epochs = c.get_size(p + ".epochs", t.epochs);
      t.lr = c.get_double(p + ".lr", t.lr);
      t.batch_size = c.get_size(p + ".batch", t.batch_size);
    };
    read_train(e.pretrain, "pretrain");
    read_train(e.probe, "probe");
    read_train(e.finetune, "finetune");
    read_train(e.cone, "analysis.cone");
    auto& k = e.construct;
    k.steps = c.get_size("construct.steps", k.steps);
    k.lr = c.get_double("construct.lr", k.lr);
    k.n_anchors = c.get_size("construct.anchors", k.n_anchors);
    k.dist = parse_dist(c.get_string("construct.dist", std::string(to_string(k.dist))));
    k.sign = parse_sign(c.get_string("construct.sign", std::string(to_string(k.sign))));
    k.bias_in_objective = c.get_bool("construct.bias_in_objective", k.bias_in_objective);
    const std::string init = c.get_string("construct.init", "gaussian");
    if (init == "weight-rows") k.init = InitScheme::weight_rows();
    else if (init == "gaussian") k.init = InitScheme::scaled_gaussian(c.get_double("construct.sigma", k.init.sigma));
    else fail(ErrorCode::ConfigInvalid, "construct.init must be weight-rows or gaussian, got '" + init + "'");
    e.adapt.lr = c.get_double("adapt.lr", e.adapt.lr);
    e.adapt.epochs = c.get_size("adapt.epochs", e.adapt.epochs);
    e.adapt.batch_size = c.get_size("adapt.batch", e.adapt.batch_size);
    e.adapt.dist = parse_dist(c.get_string("adapt.dist", std::string(to_string(e.adapt.dist))));
    e.ta_lambdas = c.get_doubles("merge.lambdas", e.ta_lambdas);
    e.tsv_fraction = c.get_double("merge.rank_fraction", e.tsv_fraction);
    e.analysis = c.get_bool("analysis.enabled", e.analysis);
    e.trace_fractions = c.get_doubles("analysis.trace_fractions", e.trace_fractions);
    e.feature_samples = c.get_size("analysis.features", e.feature_samples);
    e.cone_size = c.get_size("analysis.cone", e.cone_size);
    e.direction_epochs = c.get_size("analysis.direction_epochs", e.direction_epochs);
    e.seed = c.get_size("seed", e.seed);
    c.require_all_used();
    e.validate();
    return e;
  }

  void validate() const {
    require(m >= 1, ErrorCode::ConfigInvalid, "tasks.count must be at least 1");
    task.validate();
    pretrain_task.validate();
    require(task.input_dim == pretrain_task.input_dim, ErrorCode::ConfigInvalid, "input dims differ");
    require(hidden >= 1 && ffn_hidden >= 1, ErrorCode::ConfigInvalid, "network widths must be positive");
    construct.validate();
    adapt.validate();
    require(!ta_lambdas.empty(), ErrorCode::ConfigInvalid, "merge.lambdas is empty");
    require(tsv_fraction > 0.0 && tsv_fraction <= 1.0, ErrorCode::ConfigInvalid, "rank fraction must be in (0, 1]");
    for (double f : trace_fractions)
      require(f >= 0.0 && f <= 1.0, ErrorCode::ConfigInvalid, "trace fractions must be in [0, 1]");
    require(feature_samples >= 1 && cone_size >= 1, ErrorCode::ConfigInvalid, "analysis sizes must be positive");
  }

  /// Construction steps at which the analysis traces are taken.
  std::vector<std::size_t> trace_steps() const {
    std::vector<std::size_t> s;
    for (double f : trace_fractions)
      s.push_back(static_cast<std::size_t>(std::llround(f * static_cast<double>(construct.steps))));
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    return s;
  }
};

/// Pretrained encoder, per-task heads (probes on the pretrained encoder) and
/// fine-tuned encoders (heads frozen).
struct Fixture {
  std::vector<TaskDataset> tasks;
  Checkpoint theta0;
  std::vector<Block> heads;
  std::vector<Checkpoint> finetuned;
  std::vector<TaskVector> taus;
};

/// A classification head stored as a one-block checkpoint.
inline Checkpoint head_checkpoint(const Block& head, std::size_t task) {
  Checkpoint c;
  c.blocks.push_back(head);
  c.meta.name = "head" + std::to_string(task + 1);
  return c;
}

/// The auxiliary pretraining dataset of a configuration.
inline TaskDataset pretrain_dataset(const ExperimentConfig& cfg) {
  return make_task(cfg.pretrain_task, 0, derive_seed(cfg.seed, {0x9E7}));
}

/// theta_0: a fresh encoder trained with a throwaway head on the pretraining data.
inline Checkpoint pretrain_encoder(const ExperimentConfig& cfg, const TaskDataset& pre) {
  RngStream init(derive_seed(cfg.seed, {0x1417}));
  const Checkpoint enc = init_encoder(cfg.task.input_dim, cfg.hidden, cfg.ffn_hidden, init);
  const auto [x, y] = pre.split(Split::Train);
  TrainConfig t = cfg.pretrain;
  t.seed = derive_seed(cfg.seed, {0x9E7, 1});
  Checkpoint out = train(enc, init_head(cfg.hidden, pre.classes, init), x, y, t).encoder;
  out.meta.name = "pretrained";
  out.meta.seed = cfg.seed;
  return out;
}

struct TaskModel {
  Block head;
  Checkpoint finetuned;
};

/// Task i: a linear probe on theta_0, then the encoder fine-tuned under that
/// frozen head.
inline TaskModel finetune_task(const ExperimentConfig& cfg, const Checkpoint& theta0, const TaskDataset& task,
                               std::size_t i) {
  const auto [x, y] = task.split(Split::Train);
  RngStream hr(derive_seed(cfg.seed, {0x4EAD, i}));
  TrainConfig p = cfg.probe;
  p.update_encoder = false;
  p.update_head = true;
  p.seed = derive_seed(cfg.seed, {0x4EAD, i, 1});
  TaskModel m;
  m.head = train(theta0, init_head(cfg.hidden, task.classes, hr), x, y, p).head;
  TrainConfig ft = cfg.finetune;
  ft.update_encoder = true;
  ft.update_head = false;
  ft.seed = derive_seed(cfg.seed, {0xF17E, i});
  m.finetuned = train(theta0, m.head, x, y, ft).encoder;
  m.finetuned.meta.name = "task" + std::to_string(i + 1);
  m.finetuned.meta.seed = cfg.seed;
  return m;
}

inline Fixture prepare_fixture(const ExperimentConfig& cfg) {
  cfg.validate();
  Fixture f;
  f.tasks = gen_tasks(cfg.task, cfg.m, cfg.seed);
  f.theta0 = pretrain_encoder(cfg, pretrain_dataset(cfg));
  for (std::size_t i = 0; i < cfg.m; ++i) {
    TaskModel tm = finetune_task(cfg, f.theta0, f.tasks[i], i);
    f.heads.push_back(std::move(tm.head));
    f.taus.push_back(task_vector(tm.finetuned, f.theta0));
    f.finetuned.push_back(std::move(tm.finetuned));
  }
  return f;
}

// ---- reporting --------------------------------------------------------------

struct ReportRow {
  std::string model;
  std::vector<EvalResult> per_task;
  double avg_accuracy = 0.0;
  double avg_loss = 0.0;
  double delta_accuracy = 0.0;  // avg accuracy minus the pretrained row's
};

struct Report {
  std::vector<ReportRow> rows;

  const ReportRow& at(const std::string& model) const {
    for (const auto& r : rows)
      if (r.model == model) return r;
    fail(ErrorCode::InvalidArgument, "report has no row '" + model + "'");
  }

  void add(std::string model, std::vector<EvalResult> per_task) {
    ReportRow r{std::move(model), std::move(per_task)};
    for (const auto& e : r.per_task) {
      r.avg_accuracy += e.accuracy;
      r.avg_loss += e.loss;
    }
    r.avg_accuracy /= static_cast<double>(r.per_task.size());
    r.avg_loss /= static_cast<double>(r.per_task.size());
    const double base = rows.empty() ? r.avg_accuracy : rows.front().avg_accuracy;
    r.delta_accuracy = r.avg_accuracy - base;
    rows.push_back(std::move(r));
  }
};

inline void write_report_csv(const std::string& path, const Report& rep) {
  CsvWriter w(path, {"model", "task", "accuracy", "loss", "delta_accuracy"});
  for (const auto& r : rep.rows) {
    for (std::size_t i = 0; i < r.per_task.size(); ++i)
      w.row({r.model, std::to_string(i + 1), r.per_task[i].accuracy, r.per_task[i].loss, std::string()});
    w.row({r.model, std::string("avg"), r.avg_accuracy, r.avg_loss, r.delta_accuracy});
  }
}

/// Every task's test split through `encoder` with that task's head.
inline std::vector<EvalResult> evaluate_tasks(const Checkpoint& encoder, const Fixture& f, Split split = Split::Test) {
  std::vector<EvalResult> out;
  for (std::size_t i = 0; i < f.tasks.size(); ++i) {
    const auto [x, y] = f.tasks[i].split(split);
    out.push_back(evaluate(encoder, f.heads[i], x, y));
  }
  return out;
}

inline double mean_accuracy(std::span<const EvalResult> r) {
  double s = 0.0;
  for (const auto& e : r) s += e.accuracy;
  return s / static_cast<double>(r.size());
}

// ---- anchors and analysis ---------------------------------------------------

struct TraceSet {
  std::vector<std::pair<std::pair<std::size_t, std::size_t>, std::vector<SpectrumRow>>> spectra;  // (task, block)
  std::vector<TraceRow> similarity;
  std::vector<TraceRow> energy;
};

/// Block-l inputs of the fine-tuned network on the first `n` training samples
/// of its own task, as samples x dim.
inline Matrix reference_features(const Fixture& f, std::size_t task, std::size_t l, std::size_t n) {
  const auto [x, y] = f.tasks[task].split(Split::Train);
  std::vector<std::size_t> idx(std::min(n, x.cols()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return block_inputs(f.finetuned[task].blocks, gather_cols(x, idx))[l].transpose();
}

/// Direction theta0 moves in block l when adapted on one task's anchors alone.
inline std::vector<double> single_task_direction(const Fixture& f, std::size_t task, std::size_t l, const Matrix& x,
                                                 AdaptConfig cfg) {
  AnchorSet a;
  a.task = 0;
  a.block = static_cast<std::uint32_t>(l);
  a.x = x;
  AnchorBank bank;
  bank.add(std::move(a));
  const std::vector<Checkpoint> target{f.finetuned[task]};
  Checkpoint after = f.theta0;
  after.blocks[l] = adapt_block(l, f.theta0, target, bank, cfg);
  return fda_adaptation_direction(f.theta0, after, l);
}

/// What the traces were computed from, per (task, block): reference
/// features, the sampled update cone and the adaptation direction of the
/// final anchors.
struct AnalysisInputs {
  std::map<std::pair<std::size_t, std::size_t>, Matrix> features;
  std::map<std::pair<std::size_t, std::size_t>, UpdateConeSample> cones;
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> directions;
};

struct AnchorRun {
  std::vector<AnchorSet> sets;  // task-major
  TraceSet traces;
  AnalysisInputs inputs;
};

inline std::uint64_t construction_seed(std::uint64_t seed, std::size_t task, std::size_t block) {
  return derive_seed(seed, {0xC0, task, block});
}

/// Anchors for every (task, block); when `with_analysis`, snapshots at
/// cfg.trace_steps() feed spectra, subspace-similarity and cone-energy traces.
inline AnchorRun build_anchors(const Fixture& f, const ExperimentConfig& cfg, const ConstructionConfig& ccfg,
                               bool with_analysis) {
  AnchorRun run;
  const auto steps = cfg.trace_steps();
  for (std::size_t i = 0; i < f.tasks.size(); ++i) {
    std::vector<UpdateConeSample> cones;
    if (with_analysis) {
      const auto [x, y] = f.tasks[i].split(Split::Train);
      TrainConfig c = cfg.cone;
      c.seed = derive_seed(cfg.seed, {0xC09E, i});
      cones = sample_update_vectors(f.theta0, f.heads[i], x, y, cfg.cone_size, c);
    }
    for (std::size_t l = 0; l < f.theta0.blocks.size(); ++l) {
      std::vector<std::pair<std::size_t, Matrix>> snaps;
      AnchorObserver obs;
      if (with_analysis)
        obs = [&](std::size_t t, const Matrix& x) {
          if (std::binary_search(steps.begin(), steps.end(), t)) snaps.emplace_back(t, x);
        };
      RngStream rng(construction_seed(cfg.seed, i, l));
      run.sets.push_back(construct_fdas(f.theta0, f.finetuned[i], l, ccfg, rng, static_cast<std::uint32_t>(i), obs));
      if (!with_analysis) continue;
      const Matrix feats = reference_features(f, i, l, cfg.feature_samples);
      std::vector<SpectrumRow> spec;
      AdaptConfig dcfg = cfg.adapt;
      dcfg.epochs = cfg.direction_epochs;
      dcfg.seed = derive_seed(cfg.seed, {0xD1, i, l});
      std::vector<double> dir;
      for (const auto& [t, x] : snaps) {
        spec.push_back({t, spectral_report(x)});
        run.traces.similarity.push_back({t, l, i, subspace_similarity(x.transpose(), feats, 0.2)});
        dir = single_task_direction(f, i, l, x, dcfg);
        run.traces.energy.push_back({t, l, i, projection_energy_ratio(dir, cones[l])});
      }
      run.traces.spectra.push_back({{i, l}, std::move(spec)});
      run.inputs.features[{i, l}] = feats;
      run.inputs.cones[{i, l}] = cones[l];
      run.inputs.directions[{i, l}] = std::move(dir);
    }
  }
  return run;
}

/// File name of task `task` (0-based id), block `block`; file indices are 1-based like theta_1..theta_m.
inline std::string anchor_file_name(std::size_t task, std::size_t block) {
  return "anchors_t" + std::to_string(task + 1) + "_b" + std::to_string(block) + ".fdaanch";
}

// ---- the full experiment ------------------------------------------------------

struct ExperimentResult {
  Fixture fixture;
  AnchorRun anchors;
  Report report;
  double best_lambda = 0.0;
  std::vector<std::pair<double, double>> ta_sweep;  // (lambda, mean val accuracy)
  std::map<std::string, Checkpoint> models;
  std::vector<LossRecord> adapt_trace_pretrained;
  std::vector<LossRecord> adapt_trace_refine;
};

/// Wraps a stage so its errors say where they came from.
template <typename F>
auto run_stage(const std::string& stage, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(e.code(), "[" + stage + "] " + e.what());
  }
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::optional<Fixture>& given = std::nullopt) {
  cfg.validate();
  ExperimentResult r;
  r.fixture = given ? *given : run_stage("fixture", [&] { return prepare_fixture(cfg); });
  const Fixture& f = r.fixture;
  r.anchors = run_stage("construct", [&] { return build_anchors(f, cfg, cfg.construct, cfg.analysis); });

  run_stage("merge", [&] {
    double best_val = -1.0;
    for (double lam : cfg.ta_lambdas) {
      const double val = mean_accuracy(evaluate_tasks(merge_ta(f.theta0, f.taus, lam), f, Split::Val));
      r.ta_sweep.emplace_back(lam, val);
      if (val > best_val) {
        best_val = val;
        r.best_lambda = lam;
      }
    }
    r.models["ta"] = merge_ta(f.theta0, f.taus, r.best_lambda);
    r.models["tsv"] = merge_tsv(f.theta0, f.taus, cfg.tsv_fraction);
    r.models["average"] = merge_average(f.theta0, f.taus);
    return 0;
  });

  run_stage("adapt", [&] {
    const AnchorBank bank(r.anchors.sets);
    AdaptConfig a = cfg.adapt;
    a.seed = derive_seed(cfg.seed, {0xADA});
    auto fp = adapt(f.theta0, f.theta0, f.finetuned, bank, a);
    auto rf = adapt(r.models.at("ta"), f.theta0, f.finetuned, bank, a);
    r.models["fda_pretrained"] = std::move(fp.model);
    r.models["fda_refine_ta"] = std::move(rf.model);
    r.adapt_trace_pretrained = std::move(fp.trace);
    r.adapt_trace_refine = std::move(rf.trace);
    return 0;
  });

  run_stage("eval", [&] {
    r.report.add("pretrained", evaluate_tasks(f.theta0, f));
    std::vector<EvalResult> indiv;
    for (std::size_t i = 0; i < f.tasks.size(); ++i) {
      const auto [x, y] = f.tasks[i].split(Split::Test);
      indiv.push_back(evaluate(f.finetuned[i], f.heads[i], x, y));
    }
    r.report.add("individual", std::move(indiv));
    for (const char* name : {"ta", "tsv", "average", "fda_pretrained", "fda_refine_ta"})
      r.report.add(name, evaluate_tasks(r.models.at(name), f));
    return 0;
  });
  return r;
}

/// Report, traces, checkpoints and anchors under `dir`. With
/// `analysis_inputs`, also the features_/cone_/direction_ CSVs that
/// `analyze` consumes.
inline void write_experiment(const ExperimentResult& r, const std::string& dir, bool analysis_inputs = false) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorCode::Io, "cannot create output directory '" + dir + "'");
  const fs::path d(dir);
  write_report_csv((d / "report.csv").string(), r.report);
  {
    CsvWriter w((d / "ta_sweep.csv").string(), {"lambda", "val_accuracy"});
    for (const auto& [lam, acc] : r.ta_sweep) w.row({lam, acc});
  }
  {
    CsvWriter w((d / "construct_loss.csv").string(), {"task", "block", "step", "loss"});
    for (const auto& a : r.anchors.sets)
      for (std::size_t t = 0; t < a.loss_trace.size(); ++t)
        w.row({std::size_t{a.task}, std::size_t{a.block}, t, a.loss_trace[t]});
  }
  write_loss_trace_csv((d / "adapt_loss_pretrained.csv").string(), r.adapt_trace_pretrained);
  write_loss_trace_csv((d / "adapt_loss_refine_ta.csv").string(), r.adapt_trace_refine);
  for (const auto& [key, rows] : r.anchors.traces.spectra)
    write_spectra_csv((d / ("spectra_t" + std::to_string(key.first + 1) + "_b" + std::to_string(key.second) + ".csv")).string(),
                      rows);
  if (!r.anchors.traces.similarity.empty())
    write_trace_csv((d / "similarity.csv").string(), "similarity", r.anchors.traces.similarity);
  if (!r.anchors.traces.energy.empty())
    write_trace_csv((d / "energy.csv").string(), "ratio", r.anchors.traces.energy);
  const Fixture& f = r.fixture;
  save_checkpoint(f.theta0, (d / "theta0.fdackpt").string());
  for (std::size_t i = 0; i < f.finetuned.size(); ++i) {
    save_checkpoint(f.finetuned[i], (d / ("theta" + std::to_string(i + 1) + ".fdackpt")).string());
    save_checkpoint(head_checkpoint(f.heads[i], i), (d / ("head" + std::to_string(i + 1) + ".fdackpt")).string());
  }
  for (const auto& [name, ckpt] : r.models) save_checkpoint(ckpt, (d / (name + ".fdackpt")).string());
  for (const auto& a : r.anchors.sets)
    save_anchor_set(a, (d / anchor_file_name(a.task, a.block)).string());
  if (!analysis_inputs) return;
  const AnalysisInputs& in = r.anchors.inputs;
  auto name = [](const char* stem, const std::pair<std::size_t, std::size_t>& key) {
    return std::string(stem) + "_t" + std::to_string(key.first + 1) + "_b" + std::to_string(key.second) + ".csv";
  };
  for (const auto& [key, m] : in.features) write_matrix_csv((d / name("features", key)).string(), m);
  for (const auto& [key, cone] : in.cones) {
    Matrix m(cone.vectors.size(), cone.vectors.front().size());
    for (std::size_t k = 0; k < m.rows(); ++k)
      for (std::size_t j = 0; j < m.cols(); ++j) m(k, j) = cone.vectors[k][j];
    write_matrix_csv((d / name("cone", key)).string(), m);
  }
  for (const auto& [key, v] : in.directions)
    write_matrix_csv((d / name("direction", key)).string(), Matrix(1, v.size(), v));
}

}  // namespace fda
