// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
//
//   acceptance [--config FILE] [--only 1,5,7]
//
// --config overrides keys of the standard fixture (same keys as `fda run`).

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "fda/analysis.hpp"
#include "fda/construct.hpp"
#include "fda/harness/experiment.hpp"
#include "fda/linear_lab.hpp"
#include "fda/merge.hpp"
#include "fda/netmodel.hpp"
#include "fda/numkit.hpp"

using namespace fda;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

double rel_err(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

// ---- the standard fixture, shared by criteria 4, 5, 7, 8, 9 ---------------------

constexpr std::size_t kSeeds = 5;

ExperimentConfig g_base;

ExperimentConfig standard_config(std::uint64_t seed) {
  ExperimentConfig c = g_base;
  c.seed = seed;
  c.analysis = true;
  c.trace_fractions = {0.0, 1.0};
  return c;
}

std::map<std::uint64_t, ExperimentResult> g_runs;

const ExperimentResult& standard_run(std::uint64_t seed) {
  auto it = g_runs.find(seed);
  if (it != g_runs.end()) return it->second;
  std::cerr << "  [standard fixture, seed " << seed << "]\n";
  return g_runs.emplace(seed, run_experiment(standard_config(seed))).first->second;
}

// ---- 1: closed-form anchor gradient against nested differentiation -------------

Outcome closed_form_oracle() {
  double worst = 0.0;
  std::size_t done = 0;
  for (std::uint64_t k = 0; done < 100; ++k) {
    RngStream rng(derive_seed(101, {k}));
    const std::size_t d = 2 + rng.uniform_index(31);
    const Matrix w0 = gaussian_matrix(rng, d, d), wi = gaussian_matrix(rng, d, d);
    const Matrix x = gaussian_matrix(rng, d, 1);
    const Matrix dw = wi - w0;
    if (frobenius_norm(matmul(dw, x)) < 1e-3 * frobenius_norm(dw) * frobenius_norm(x)) continue;
    MatchingObjective obj(Block::affine(w0, Matrix(d, 1)), Block::affine(wi, Matrix(d, 1)), 1, DistKind::L2,
                          SignConvention::Literal, false);
    if (!obj.evaluate(x)) return {false, "degenerate instance " + std::to_string(k)};
    const Matrix neg = obj.gradient() * -1.0;
    worst = std::max(worst, rel_err(neg.values(), closed_form_anchor_gradient(x.values(), w0, wi)));
    ++done;
  }
  return {worst <= 1e-8, "max rel err " + fmt(worst, 3) + " over 100 instances (<= 1e-8)"};
}

// ---- 2: product formula for the linear dynamics ---------------------------------

Outcome product_formula() {
  double worst = 0.0;
  RngStream rng(202);
  for (int inst = 0; inst < 50; ++inst) {
    const std::size_t d = 2 + rng.uniform_index(15);
    const double p = 1.5 + 1.5 * rng.uniform();
    const Matrix dw = lab::long_tailed_matrix(rng, d, p);
    std::vector<double> x0(d);
    for (double& v : x0) v = rng.normal();
    const std::size_t steps = 1 + rng.uniform_index(100);
    const auto dec = lab::decompose(dw);
    const double eta = 0.01 * norm2(x0) * frobenius_norm(dw) / dec.lambda[0];
    const auto tr = lab::simulate_dynamics(dw, x0, eta, steps);
    const Matrix obs = lab::observed_coefficients(dec, tr);
    const Matrix pred = lab::predicted_coefficients(dec, x0, tr.gamma);
    for (std::size_t k = 0; k < obs.size(); ++k)
      worst = std::max(worst, std::abs(obs[k] - pred[k]) / (std::abs(pred[k]) + 1e-12));
  }
  return {worst <= 1e-8, "max rel err " + fmt(worst, 3) + " over 50 instances (<= 1e-8)"};
}

// ---- 3: finite differences on every gradient path -------------------------------

Block random_block(BlockKind kind, RngStream& rng) {
  auto g = [&](std::size_t r, std::size_t c) { return gaussian_matrix(rng, r, c) * 0.5; };
  if (kind == BlockKind::Affine) return Block::affine(g(4, 5), g(4, 1), Activation::Tanh);
  return Block::ffn(g(6, 5), g(6, 1), Activation::SmoothGelu, g(5, 6), g(5, 1));
}

double min_output_gap(const Block& a, const Block& b, const Matrix& x) {
  const Matrix d = forward_block(a, x) - forward_block(b, x);
  double m = std::numeric_limits<double>::infinity();
  for (double v : d.values()) m = std::min(m, std::abs(v));
  return m;
}

Outcome finite_difference_suite() {
  double worst = 0.0;
  std::string where;
  std::size_t checks = 0;
  RngStream rng(303);
  for (BlockKind kind : {BlockKind::Affine, BlockKind::Ffn}) {
    for (DistKind dist : {DistKind::Cosine, DistKind::L1, DistKind::L2}) {
      const std::string name =
          std::string(kind == BlockKind::Affine ? "affine/" : "ffn/") + std::string(to_string(dist));
      for (int point = 0; point < 20; ++point) {
        Block b0 = random_block(kind, rng), bi = random_block(kind, rng);
        Matrix x = gaussian_matrix(rng, 5, 3);
        // L1 points keep every output gap >= 0.05 (well above the 1e-3 minimum) so
        // the probes, at most 2e-3 in any coordinate, never reach a kink.
        while (dist == DistKind::L1 && min_output_gap(b0, bi, x) < 0.05) x = gaussian_matrix(rng, 5, 3);

        // Induced-gradient path: d/dtheta of the summed distance.
        const auto theta = graph::param_variables(b0, "p");
        const auto theta_i = graph::param_constants(bi);
        const tape::Expr xe = tape::constant(x);
        const tape::Expr dsum = graph::dist_sum(dist, graph::block_output(kind, b0.activation, theta, xe),
                                                graph::block_output(kind, b0.activation, theta_i, xe));
        tape::Binding bind;
        graph::bind_params(bind, b0, "p");
        const double step = dist == DistKind::L1 ? 2e-3 : 0.0;
        for (const auto& t : theta) {
          const double e = tape::check_finite_diff(dsum, t, bind, step);
          if (e > worst) worst = e, where = name + " induced";
          ++checks;
        }

        // Anchor-gradient path: d/dX of the matching loss.
        for (SignConvention sign : {SignConvention::Descent, SignConvention::Literal}) {
          MatchingObjective obj(b0, bi, x.cols(), dist, sign);
          const double e = tape::check_finite_diff(obj.loss_expr(), obj.anchor_variable(), obj.binding_at(x), step);
          if (e > worst) worst = e, where = name + " anchor";
          ++checks;
        }
      }
    }
  }
  return {worst <= 1e-6,
          "max rel err " + fmt(worst, 3) + " (" + where + ") over " + std::to_string(checks) + " checks (<= 1e-6)"};
}

// ---- 4: initialisation ordering -----------------------------------------------

Outcome init_ordering() {
  struct Scheme {
    std::string name;
    InitScheme init;
  };
  const std::vector<Scheme> others{{"weight-rows", InitScheme::weight_rows()},
                                   {"sg(10)", InitScheme::scaled_gaussian(10.0)},
                                   {"sg(1e-4)", InitScheme::scaled_gaussian(1e-4)}};
  std::map<std::string, std::vector<double>> final_loss, quarter_loss;
  auto record = [&](const std::string& name, const std::vector<AnchorSet>& sets) {
    std::vector<double> fin, quarter;
    for (const auto& a : sets) {
      fin.push_back(a.loss_trace.back());
      quarter.push_back(a.loss_trace[(a.loss_trace.size() - 1) / 4]);
    }
    final_loss[name].push_back(mean(fin));
    quarter_loss[name].push_back(mean(quarter));
  };
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const ExperimentResult& r = standard_run(s);
    const ExperimentConfig cfg = standard_config(s);
    require(cfg.construct.init == InitScheme::scaled_gaussian(0.01), ErrorCode::ConfigInvalid,
            "standard fixture must use sg(0.01)");
    record("sg(0.01)", r.anchors.sets);
    for (const auto& sc : others) {
      ConstructionConfig cc = cfg.construct;
      cc.init = sc.init;
      record(sc.name, build_anchors(r.fixture, cfg, cc, false).sets);
    }
  }
  const double wr = median(final_loss["weight-rows"]), sg = median(final_loss["sg(0.01)"]),
               big = median(final_loss["sg(10)"]);
  const double q_small = median(quarter_loss["sg(1e-4)"]), q_sg = median(quarter_loss["sg(0.01)"]);
  const bool ok = wr <= sg && sg < big && q_small > q_sg;
  return {ok, "final: weight-rows " + fmt(wr) + " <= sg(0.01) " + fmt(sg) + " < sg(10) " + fmt(big) +
                  "; at T/4: sg(1e-4) " + fmt(q_small) + " > sg(0.01) " + fmt(q_sg)};
}

// ---- 5: end-to-end merging ------------------------------------------------------

Outcome merging() {
  int fp_wins = 0, rf_ok = 0, bound_ok = 0;
  std::string per_seed;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const Report& rep = standard_run(s).report;
    const double ta = rep.at("ta").avg_accuracy, fp = rep.at("fda_pretrained").avg_accuracy,
                 rf = rep.at("fda_refine_ta").avg_accuracy, ind = rep.at("individual").avg_accuracy;
    fp_wins += fp > ta;
    rf_ok += rf >= ta;
    bool bounded = true;
    for (const char* m : {"ta", "tsv", "average", "fda_pretrained", "fda_refine_ta"})
      bounded = bounded && ind >= rep.at(m).avg_accuracy;
    bound_ok += bounded;
    per_seed += " [" + fmt(ta) + "/" + fmt(fp) + "/" + fmt(rf) + "/" + fmt(ind) + "]";
  }
  const bool ok = fp_wins >= 4 && rf_ok == static_cast<int>(kSeeds) && bound_ok == static_cast<int>(kSeeds);
  return {ok, "fda>ta " + std::to_string(fp_wins) + "/5 (need 4), refine>=ta " + std::to_string(rf_ok) +
                  "/5, individual bound " + std::to_string(bound_ok) + "/5; ta/fda/refine/individual" + per_seed};
}

// ---- 6: single-task recovery ------------------------------------------------------

std::size_t numeric_rank(const Matrix& m) {
  const SvdResult f = svd(m);
  std::size_t r = 0;
  for (double s : f.s) r += s > 1e-10 * f.s[0];
  return r;
}

Outcome single_task_recovery() {
  ExperimentConfig cfg = g_base;
  cfg.m = 1;
  cfg.seed = 606;
  const Fixture f = prepare_fixture(cfg);
  ConstructionConfig cc = cfg.construct;
  cc.dist = DistKind::L2;
  RngStream rng(construction_seed(cfg.seed, 0, 0));
  AnchorSet a = construct_fdas(f.theta0, f.finetuned[0], 0, cc, rng);
  Matrix aug(a.x.rows() + 1, a.x.cols(), 1.0);
  for (std::size_t i = 0; i < a.x.rows(); ++i)
    for (std::size_t j = 0; j < a.x.cols(); ++j) aug(i, j) = a.x(i, j);
  const std::size_t rank = numeric_rank(aug);
  if (rank != aug.rows()) return {false, "anchors are not full rank (" + std::to_string(rank) + ")"};
  AnchorBank bank;
  bank.add(std::move(a));
  AdaptConfig ac;
  ac.dist = DistKind::L2;
  ac.lr = 1e-2;
  ac.epochs = 2000;
  ac.batch_size = cc.n_anchors;
  const Block b = adapt_block(0, f.theta0, f.finetuned, bank, ac);
  const Matrix& w1 = f.finetuned[0].blocks[0].params[0];
  const double err = frobenius_norm(b.params[0] - w1) / frobenius_norm(w1);
  return {err <= 1e-3, "relative weight error " + fmt(err, 3) + " (<= 1e-3)"};
}

// ---- 7, 8, 9: anchor analysis trends ------------------------------------------------

Outcome tail_trend() {
  std::vector<double> drops;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const auto& spectra = standard_run(s).anchors.traces.spectra;
    std::vector<double> first, last;
    for (const auto& [key, rows] : spectra) {
      first.push_back(rows.front().report.tail_energy_ratio);
      last.push_back(rows.back().report.tail_energy_ratio);
    }
    drops.push_back(1.0 - mean(last) / mean(first));
  }
  std::string seeds;
  for (double d : drops) seeds += " " + fmt(d, 3);
  const double med = median(drops);
  return {med >= 0.5, "median tail-energy decrease " + fmt(med, 3) + " (>= 0.5); per seed" + seeds};
}

/// Per task, the median over seeds of the block-mean value at step 0 and at
/// the last traced step.
std::vector<std::pair<double, double>> trace_medians(std::vector<TraceRow> TraceSet::*member, std::size_t tasks) {
  std::vector<std::vector<double>> first(tasks), last(tasks);
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const auto& rows = standard_run(s).anchors.traces.*member;
    std::size_t t_end = 0;
    for (const auto& r : rows) t_end = std::max(t_end, r.step);
    for (std::size_t i = 0; i < tasks; ++i) {
      std::vector<double> a, b;
      for (const auto& r : rows) {
        if (r.task != i) continue;
        if (r.step == 0) a.push_back(r.value);
        if (r.step == t_end) b.push_back(r.value);
      }
      first[i].push_back(mean(a));
      last[i].push_back(mean(b));
    }
  }
  std::vector<std::pair<double, double>> out;
  for (std::size_t i = 0; i < tasks; ++i) out.emplace_back(median(first[i]), median(last[i]));
  return out;
}

Outcome similarity_trend() {
  const auto med = trace_medians(&TraceSet::similarity, g_base.m);
  bool ok = true;
  std::string detail;
  for (std::size_t i = 0; i < med.size(); ++i) {
    ok = ok && med[i].second > med[i].first;
    detail += " task" + std::to_string(i) + " " + fmt(med[i].first, 3) + "->" + fmt(med[i].second, 3);
  }
  return {ok, "median similarity step 0 -> T:" + detail};
}

Outcome energy_trend() {
  const auto med = trace_medians(&TraceSet::energy, g_base.m);
  double m0 = 0.0, m1 = 0.0;
  for (const auto& [a, b] : med) {
    m0 += a / static_cast<double>(med.size());
    m1 += b / static_cast<double>(med.size());
  }
  return {m1 > m0, "task-mean of median projection energy: step 0 " + fmt(m0, 3) + " -> step T " + fmt(m1, 3)};
}

// ---- 10: numerical core ----------------------------------------------------------

bool files_equal(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  return fa.good() || fa.eof() ? sa == sb : false;
}

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t l = 0; l < a.blocks.size(); ++l) {
    const auto& pa = a.blocks[l].params;
    const auto& pb = b.blocks[l].params;
    if (a.blocks[l].kind != b.blocks[l].kind || a.blocks[l].activation != b.blocks[l].activation ||
        pa.size() != pb.size())
      return false;
    for (std::size_t p = 0; p < pa.size(); ++p)
      if (!pa[p].same_shape(pb[p]) ||
          std::memcmp(pa[p].values().data(), pb[p].values().data(), pa[p].size() * sizeof(double)) != 0)
        return false;
  }
  return true;
}

Outcome numerical_core() {
  RngStream rng(1010);
  std::vector<std::string> failed;

  double svd_worst = 0.0;
  for (int k = 0; k < 30; ++k) {
    const Matrix a = gaussian_matrix(rng, 1 + rng.uniform_index(40), 1 + rng.uniform_index(40));
    svd_worst = std::max(svd_worst, frobenius_norm(svd(a).reconstruct() - a) / frobenius_norm(a));
  }
  if (svd_worst > 1e-10) failed.push_back("svd " + fmt(svd_worst, 3));

  double kkt_worst = 0.0;
  for (int k = 0; k < 30; ++k) {
    const std::size_t m = 2 + rng.uniform_index(30), n = 1 + rng.uniform_index(30);
    const Matrix a = gaussian_matrix(rng, m, n);
    std::vector<double> b(m);
    for (double& v : b) v = rng.normal();
    const auto x = nnls(a, b);
    const Matrix r = matmul(a, Matrix::column(x)) - Matrix::column(b);
    const Matrix grad = matmul(a, r, true, false);
    const Matrix atb = matmul(a, Matrix::column(b), true, false);
    const double tol = 1e-8 * max_abs(atb);
    for (std::size_t j = 0; j < n; ++j) {
      const double viol = x[j] > 0.0 ? std::abs(grad[j]) : std::max(0.0, -grad[j]);
      if (x[j] < 0.0) kkt_worst = std::max(kkt_worst, 1e300);
      kkt_worst = std::max(kkt_worst, viol / tol);
    }
  }
  if (kkt_worst > 1.0) failed.push_back("nnls kkt " + fmt(kkt_worst, 3) + "x tol");

  double cos_worst = 0.0;
  for (int k = 0; k < 30; ++k) {
    std::vector<double> a(20), b(20);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal();
    const double base = cos_dist(a, b);
    const double s = std::exp(4.0 * rng.normal());
    std::vector<double> as = a;
    for (double& v : as) v *= s;
    cos_worst = std::max(cos_worst, std::abs(cos_dist(as, b) - base));
  }
  if (cos_worst > 1e-12) failed.push_back("cos_dist scale " + fmt(cos_worst, 3));

  namespace fs = std::filesystem;
  const fs::path tmp = fs::temp_directory_path() / ("fda_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(tmp);
  {
    RngStream init(7);
    Checkpoint c = init_encoder(6, 5, 7, init);
    c.meta.name = "roundtrip";
    save_checkpoint(c, (tmp / "c.fdackpt").string());
    if (!bitwise_equal(load_checkpoint((tmp / "c.fdackpt").string()), c)) failed.push_back("checkpoint roundtrip");
  }

  ExperimentConfig small = g_base;
  small.m = 2;
  small.seed = 99;
  small.task.n_train = 64;
  small.pretrain_task.n_train = 128;
  small.pretrain.epochs = 2;
  small.probe.epochs = 2;
  small.finetune.epochs = 2;
  small.construct.steps = 10;
  small.construct.n_anchors = 8;
  small.adapt.epochs = 2;
  small.analysis = true;
  small.cone_size = 4;
  small.direction_epochs = 2;
  small.trace_fractions = {0.0, 1.0};
  write_experiment(run_experiment(small), (tmp / "a").string());
  write_experiment(run_experiment(small), (tmp / "b").string());
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(tmp / "a")) {
    ++compared;
    if (!files_equal(e.path(), tmp / "b" / e.path().filename())) {
      failed.push_back("determinism " + e.path().filename().string());
      break;
    }
  }
  fs::remove_all(tmp);
  std::string detail = failed.empty() ? "svd " + fmt(svd_worst, 3) + ", kkt " + fmt(kkt_worst, 3) +
                                            "x tol, cos " + fmt(cos_worst, 3) + ", roundtrip ok, " +
                                            std::to_string(compared) + " output files identical"
                                      : "failed:";
  for (const auto& f : failed) detail += " " + f;
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string config_path;
  std::vector<int> only;
  app.add_option("--config", config_path, "standard fixture overrides (key=value file)");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  try {
    g_base = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::from(Config::load(config_path));
  } catch (const Error& e) {
    std::cerr << "config: " << e.what() << "\n";
    return 2;
  }

  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{
      {1, "closed-form anchor gradient", 10, closed_form_oracle},
      {2, "linear dynamics product formula", 5, product_formula},
      {3, "finite-difference suite", 60, finite_difference_suite},
      {4, "initialisation ordering", 180, init_ordering},
      {5, "end-to-end merging", 600, merging},
      {6, "single-task recovery", 30, single_task_recovery},
      {7, "tail-energy trend", 120, tail_trend},
      {8, "subspace-similarity trend", 120, similarity_trend},
      {9, "projection-energy trend", 180, energy_trend},
      {10, "numerical core", 30, numerical_core},
  };
  auto selected = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  // The standard-fixture runs (fixture, anchors with traces, merges,
  // adaptation) are shared by 4, 5, 7, 8 and 9; their time is charged to 5.
  double shared_s = 0.0;
  if (selected(4) || selected(5) || selected(7) || selected(8) || selected(9)) {
    const auto t0 = Clock::now();
    try {
      for (std::uint64_t s = 0; s < kSeeds; ++s) standard_run(s);
    } catch (const Error& e) {
      std::cerr << "standard fixture: " << e.what() << "\n";
    }
    shared_s = std::chrono::duration<double>(Clock::now() - t0).count();
  }
  int failures = 0;
  for (const auto& c : all) {
    if (!selected(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const Error& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count() + (c.id == 5 ? shared_s : 0.0);
    const bool in_time = secs <= c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " AC" << c.id << " " << c.name << ": " << o.detail << " ["
              << fmt(secs, 3) << " s / " << c.budget_s << " s" << (in_time ? "" : ", over budget") << "]"
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
