#pragma once

#include "vfl/error.hpp"

#include <Eigen/Dense>
#include <Eigen/SparseCore>

#include <cstddef>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace vfl {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Sample-major data set. `labels` is empty until relabel has been applied.
struct LabeledDataset {
  SparseRows features;  // N x d
  std::vector<double> raw_labels;
  Vec labels;

  std::size_t n_samples() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t n_features() const { return static_cast<std::size_t>(features.cols()); }
};

// Reads "label idx:val idx:val ..." lines with 1-based ascending indices.
// Blank lines and trailing "# comments" are ignored. With `forced_features`
// the column count is fixed (and must cover every index seen).
LabeledDataset parse_libsvm(std::istream& in, std::optional<std::size_t> forced_features = {});
LabeledDataset load_libsvm(const std::string& path, std::optional<std::size_t> forced_features = {});

// Inverse of parse_libsvm; values are written with round-trip precision.
std::string serialize_libsvm(const LabeledDataset& data);

struct LabelMap {
  double negative = -1.0;  // raw value mapped to -1
  double positive = 1.0;   // raw value mapped to +1
};

struct Relabeled {
  Vec labels;
  LabelMap map;
};

// The smaller of the two distinct raw values becomes -1, the larger +1.
Relabeled relabel(const std::vector<double>& raw_labels);

// Applies an existing map (e.g. the training map to a test file).
Vec apply_label_map(const std::vector<double>& raw_labels, const LabelMap& map);

struct PartitionSpec {
  std::vector<std::size_t> widths;  // d_1, ..., d_M

  std::size_t parties() const { return widths.size(); }
  std::size_t total() const;
  std::size_t offset(std::size_t party) const;
};

struct GramExtremes {
  double sigma_min = 0.0;
  double sigma_max = 0.0;
};

// One party's column block D_m, held dense, plus its Gram matrix D_m^T D_m.
class PartyShard {
 public:
  PartyShard(std::size_t party_id, Mat block);

  std::size_t party_id() const { return party_id_; }
  const Mat& block() const { return block_; }
  const Mat& gram() const { return gram_; }
  std::size_t rows() const { return static_cast<std::size_t>(block_.rows()); }
  std::size_t width() const { return static_cast<std::size_t>(block_.cols()); }

  // Memoized gram_extremes(); thread-safe.
  GramExtremes extremes() const;

 private:
  struct ExtremesCache;

  std::size_t party_id_;
  Mat block_;
  Mat gram_;
  std::shared_ptr<ExtremesCache> cache_;
};

std::vector<PartyShard> vertical_split(const LabeledDataset& data, const PartitionSpec& spec);

struct NormalizedShard {
  PartyShard shard;
  std::vector<std::size_t> zero_rows;
};

// Rescales every nonzero row of the block to unit l2 norm.
NormalizedShard normalize_rows(const PartyShard& shard);

// Same, but across the full feature row (all parties at once).
LabeledDataset normalize_full_rows(const LabeledDataset& data, std::vector<std::size_t>* zero_rows = nullptr);

// Keeps the first `rows` samples.
LabeledDataset head_rows(const LabeledDataset& data, std::size_t rows);

// Keeps the given columns (0-based, ascending).
LabeledDataset select_columns(const LabeledDataset& data, const std::vector<std::size_t>& columns);

struct EigenOptions {
  std::size_t dense_limit = 512;
  std::size_t max_iterations = 10000;
  double relative_tolerance = 1e-10;
};

// Extreme eigenvalues of block^T block. Dense symmetric eigensolve up to
// dense_limit columns, power / shifted inverse-power iteration beyond.
GramExtremes gram_extremes(const PartyShard& shard, const EigenOptions& options = {});
GramExtremes gram_extremes(const Mat& gram, const EigenOptions& options = {});

// Thrown when the iterative path does not settle; carries the best estimate.
class EigenConvergenceError : public SolverError {
 public:
  EigenConvergenceError(const std::string& what, GramExtremes best) : SolverError(what), best_(best) {}
  GramExtremes best_estimate() const { return best_; }

 private:
  GramExtremes best_;
};

}  // namespace vfl
