#pragma once

// Synthetic classification tasks: Gaussian clusters living in a randomly
// rotated low-dimensional subspace of a shared input space, plus isotropic
// noise. Tasks differ by rotation and class layout.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fda/error.hpp"
#include "fda/numkit/matrix.hpp"
#include "fda/numkit/random.hpp"

namespace fda {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  fail(ErrorCode::FormatViolation, "unknown split '" + std::string(s) + "'");
}

struct TaskSpec {
  std::size_t input_dim = 16;
  std::size_t classes = 4;
  std::size_t subspace_dim = 4;
  double separation = 2.0;  // std of class means inside the subspace
  double spread = 1.0;      // within-class std inside the subspace
  double noise = 0.3;       // isotropic std in the full space
  std::size_t modes = 1;    // clusters per class
  std::size_t n_train = 256;
  std::size_t n_val = 64;
  std::size_t n_test = 256;

  void validate() const {
    require(input_dim >= 2, ErrorCode::ConfigInvalid, "input dim must be at least 2");
    require(classes >= 2, ErrorCode::ConfigInvalid, "need at least two classes");
    require(modes >= 1, ErrorCode::ConfigInvalid, "need at least one mode per class");
    require(subspace_dim >= 1 && subspace_dim <= input_dim, ErrorCode::ConfigInvalid,
            "subspace dim must be in [1, input dim]");
    require(n_train >= classes && n_test >= 1, ErrorCode::ConfigInvalid, "too few samples");
    require(separation > 0.0 && spread >= 0.0 && noise >= 0.0, ErrorCode::ConfigInvalid,
            "task scales must be non-negative");
  }
};

struct TaskDataset {
  std::uint32_t id = 0;
  Matrix inputs;  // samples x input dim
  std::vector<std::uint32_t> labels;
  std::vector<Split> splits;
  std::size_t classes = 0;
  std::uint64_t seed = 0;

  std::size_t input_dim() const { return inputs.cols(); }

  /// Samples of one split as columns (input dim x n) with their labels, in
  /// storage order.
  std::pair<Matrix, std::vector<std::uint32_t>> split(Split s) const {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < splits.size(); ++k)
      if (splits[k] == s) idx.push_back(k);
    Matrix x(inputs.cols(), idx.size());
    std::vector<std::uint32_t> y;
    for (std::size_t j = 0; j < idx.size(); ++j) {
      for (std::size_t i = 0; i < inputs.cols(); ++i) x(i, j) = inputs(idx[j], i);
      y.push_back(labels[idx[j]]);
    }
    return {std::move(x), std::move(y)};
  }

  void validate() const {
    require(labels.size() == inputs.rows() && splits.size() == inputs.rows(), ErrorCode::FormatViolation,
            "dataset columns disagree in length");
    for (auto l : labels) require(l < classes, ErrorCode::FormatViolation, "label out of range");
  }
};

/// One task. Labels cycle through the classes before shuffling so every split
/// is balanced within one sample.
inline TaskDataset make_task(const TaskSpec& spec, std::uint32_t id, std::uint64_t seed) {
  spec.validate();
  RngStream rng(seed);
  const Matrix rot = random_orthogonal(rng, spec.input_dim);
  Matrix means(spec.classes * spec.modes, spec.subspace_dim);
  for (double& v : means.values()) v = spec.separation * rng.normal();
  std::vector<double> shift(spec.input_dim);
  for (double& v : shift) v = 0.5 * rng.normal();

  TaskDataset ds;
  ds.id = id;
  ds.classes = spec.classes;
  ds.seed = seed;
  const std::size_t total = spec.n_train + spec.n_val + spec.n_test;
  ds.inputs = Matrix(total, spec.input_dim);
  std::size_t row = 0;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    const std::size_t n = s == Split::Train ? spec.n_train : s == Split::Val ? spec.n_val : spec.n_test;
    std::vector<std::uint32_t> lab(n);
    for (std::size_t k = 0; k < n; ++k) lab[k] = static_cast<std::uint32_t>(k % spec.classes);
    rng.shuffle(lab);
    for (std::size_t k = 0; k < n; ++k, ++row) {
      const std::size_t mode = lab[k] * spec.modes + rng.uniform_index(spec.modes);
      std::vector<double> z(spec.subspace_dim);
      for (std::size_t a = 0; a < spec.subspace_dim; ++a) z[a] = means(mode, a) + spec.spread * rng.normal();
      for (std::size_t i = 0; i < spec.input_dim; ++i) {
        double v = shift[i] + spec.noise * rng.normal();
        for (std::size_t a = 0; a < spec.subspace_dim; ++a) v += rot(i, a) * z[a];
        ds.inputs(row, i) = v;
      }
      ds.labels.push_back(lab[k]);
      ds.splits.push_back(s);
    }
  }
  return ds;
}

/// m tasks sharing the input space; task k draws from stream (seed, k).
inline std::vector<TaskDataset> gen_tasks(const TaskSpec& spec, std::size_t m, std::uint64_t seed) {
  require(m >= 1, ErrorCode::ConfigInvalid, "need at least one task");
  std::vector<TaskDataset> out;
  for (std::size_t k = 0; k < m; ++k)
    out.push_back(make_task(spec, static_cast<std::uint32_t>(k), derive_seed(seed, {0x7A5C, k})));
  return out;
}

// ---- CSV persistence (split,label,x1..xd; 17 significant digits) ----------

inline void save_task_csv(const TaskDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
  out << "# task=" << ds.id << " classes=" << ds.classes << " seed=" << ds.seed << '\n';
  out << "split,label";
  for (std::size_t i = 0; i < ds.input_dim(); ++i) out << ",x" << i + 1;
  out << '\n' << std::setprecision(17);
  for (std::size_t r = 0; r < ds.inputs.rows(); ++r) {
    out << to_string(ds.splits[r]) << ',' << ds.labels[r];
    for (std::size_t i = 0; i < ds.input_dim(); ++i) out << ',' << ds.inputs(r, i);
    out << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed for '" + path + "'");
}

namespace detail {
inline TaskDataset load_task_csv_unchecked(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read '" + path + "'");
  TaskDataset ds;
  std::string line;
  auto bad = [&](const std::string& msg) { fail(ErrorCode::FormatViolation, path + ": " + msg); };
  if (!std::getline(in, line) || line.rfind("# task=", 0) != 0) bad("missing task header");
  {
    std::istringstream hs(line.substr(2));
    std::string tok;
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) bad("bad header token");
      const std::string k = tok.substr(0, eq), v = tok.substr(eq + 1);
      if (k == "task") ds.id = static_cast<std::uint32_t>(std::stoul(v));
      else if (k == "classes") ds.classes = std::stoul(v);
      else if (k == "seed") ds.seed = std::stoull(v);
    }
  }
  if (!std::getline(in, line)) bad("missing column header");
  const std::size_t d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) - 1;
  std::vector<double> vals;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    if (!std::getline(ls, cell, ',')) bad("empty row");
    ds.splits.push_back(parse_split(cell));
    if (!std::getline(ls, cell, ',')) bad("missing label");
    ds.labels.push_back(static_cast<std::uint32_t>(std::stoul(cell)));
    std::size_t count = 0;
    while (std::getline(ls, cell, ',')) {
      vals.push_back(std::stod(cell));
      ++count;
    }
    if (count != d) bad("row has " + std::to_string(count) + " features, expected " + std::to_string(d));
  }
  ds.inputs = Matrix(ds.labels.size(), d, std::move(vals));
  ds.validate();
  return ds;
}
}  // namespace detail

inline TaskDataset load_task_csv(const std::string& path) {
  try {
    return detail::load_task_csv_unchecked(path);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    fail(ErrorCode::FormatViolation, path + ": unparsable number (" + e.what() + ")");
  }
}

}  // namespace fda
