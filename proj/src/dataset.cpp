#include "vfl/dataset.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string_view>

namespace vfl {
namespace {

bool parse_double(std::string_view text, double& out) {
  if (!text.empty() && text.front() == '+') text.remove_prefix(1);
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_index(std::string_view text, std::size_t& out) {
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) tokens.push_back(line.substr(i, j - i));
    i = j;
  }
  return tokens;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

LabeledDataset parse_libsvm(std::istream& in, std::optional<std::size_t> forced_features) {
  using Triplet = Eigen::Triplet<double>;
  std::vector<Triplet> triplets;
  LabeledDataset data;
  std::size_t max_index = 0;
  std::size_t line_no = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view(line);
    if (auto hash = view.find('#'); hash != std::string_view::npos) view = view.substr(0, hash);
    auto tokens = split_ws(view);
    if (tokens.empty()) continue;

    double label = 0.0;
    if (!parse_double(tokens[0], label) || !std::isfinite(label))
      throw ParseError(line_no, "bad label '" + std::string(tokens[0]) + "'");

    const auto row = static_cast<int>(data.raw_labels.size());
    std::size_t previous = 0;
    for (std::size_t k = 1; k < tokens.size(); ++k) {
      auto tok = tokens[k];
      auto colon = tok.find(':');
      if (colon == std::string_view::npos)
        throw ParseError(line_no, "token '" + std::string(tok) + "' is not index:value");
      std::size_t index = 0;
      double value = 0.0;
      if (!parse_index(tok.substr(0, colon), index) || index == 0)
        throw ParseError(line_no, "bad feature index in '" + std::string(tok) + "'");
      if (!parse_double(tok.substr(colon + 1), value) || !std::isfinite(value))
        throw ParseError(line_no, "bad feature value in '" + std::string(tok) + "'");
      if (index <= previous)
        throw ParseError(line_no, "feature indices not ascending at '" + std::string(tok) + "'");
      previous = index;
      max_index = std::max(max_index, index);
      triplets.emplace_back(row, static_cast<int>(index - 1), value);
    }
    data.raw_labels.push_back(label);
  }

  std::size_t d = max_index;
  if (forced_features) {
    if (*forced_features < max_index)
      throw DimensionError("forced feature count " + std::to_string(*forced_features) +
                           " is below the largest index " + std::to_string(max_index));
    d = *forced_features;
  }
  data.features.resize(static_cast<Eigen::Index>(data.raw_labels.size()), static_cast<Eigen::Index>(d));
  data.features.setFromTriplets(triplets.begin(), triplets.end());
  data.features.makeCompressed();
  return data;
}

LabeledDataset load_libsvm(const std::string& path, std::optional<std::size_t> forced_features) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_libsvm(in, forced_features);
}

std::string serialize_libsvm(const LabeledDataset& data) {
  std::string out;
  for (Eigen::Index i = 0; i < data.features.rows(); ++i) {
    out += format_double(data.raw_labels[static_cast<std::size_t>(i)]);
    for (SparseRows::InnerIterator it(data.features, i); it; ++it) {
      out += ' ';
      out += std::to_string(it.col() + 1);
      out += ':';
      out += format_double(it.value());
    }
    out += '\n';
  }
  return out;
}

Relabeled relabel(const std::vector<double>& raw_labels) {
  std::vector<double> distinct(raw_labels);
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() != 2)
    throw Error("expected exactly two distinct labels, found " + std::to_string(distinct.size()));
  Relabeled result;
  result.map = LabelMap{distinct[0], distinct[1]};
  result.labels = apply_label_map(raw_labels, result.map);
  return result;
}

Vec apply_label_map(const std::vector<double>& raw_labels, const LabelMap& map) {
  Vec labels(static_cast<Eigen::Index>(raw_labels.size()));
  for (std::size_t i = 0; i < raw_labels.size(); ++i) {
    if (raw_labels[i] == map.negative) {
      labels[static_cast<Eigen::Index>(i)] = -1.0;
    } else if (raw_labels[i] == map.positive) {
      labels[static_cast<Eigen::Index>(i)] = 1.0;
    } else {
      throw Error("label " + format_double(raw_labels[i]) + " at row " + std::to_string(i + 1) +
                  " is not in the label map");
    }
  }
  return labels;
}

std::size_t PartitionSpec::total() const { return std::accumulate(widths.begin(), widths.end(), std::size_t{0}); }

std::size_t PartitionSpec::offset(std::size_t party) const {
  return std::accumulate(widths.begin(), widths.begin() + static_cast<std::ptrdiff_t>(party), std::size_t{0});
}

struct PartyShard::ExtremesCache {
  std::once_flag once;
  GramExtremes value;
};

PartyShard::PartyShard(std::size_t party_id, Mat block)
    : party_id_(party_id), block_(std::move(block)), cache_(std::make_shared<ExtremesCache>()) {
  gram_ = Mat::Zero(block_.cols(), block_.cols());
  gram_.selfadjointView<Eigen::Lower>().rankUpdate(block_.transpose());
  gram_ = gram_.selfadjointView<Eigen::Lower>();
}

GramExtremes PartyShard::extremes() const {
  std::call_once(cache_->once, [this] { cache_->value = gram_extremes(gram_); });
  return cache_->value;
}

std::vector<PartyShard> vertical_split(const LabeledDataset& data, const PartitionSpec& spec) {
  if (spec.widths.empty()) throw DimensionError("partition has no parties");
  for (auto w : spec.widths)
    if (w == 0) throw DimensionError("partition widths must be >= 1");
  if (spec.total() != data.n_features())
    throw DimensionError("partition widths sum to " + std::to_string(spec.total()) + " but data has " +
                         std::to_string(data.n_features()) + " features");

  std::vector<Mat> blocks;
  for (auto w : spec.widths) blocks.push_back(Mat::Zero(data.features.rows(), static_cast<Eigen::Index>(w)));
  std::vector<std::size_t> owner(data.n_features());
  std::vector<std::size_t> local(data.n_features());
  for (std::size_t m = 0, col = 0; m < spec.widths.size(); ++m)
    for (std::size_t k = 0; k < spec.widths[m]; ++k, ++col) {
      owner[col] = m;
      local[col] = k;
    }
  for (Eigen::Index i = 0; i < data.features.rows(); ++i)
    for (SparseRows::InnerIterator it(data.features, i); it; ++it) {
      auto col = static_cast<std::size_t>(it.col());
      blocks[owner[col]](i, static_cast<Eigen::Index>(local[col])) = it.value();
    }

  std::vector<PartyShard> shards;
  shards.reserve(blocks.size());
  for (std::size_t m = 0; m < blocks.size(); ++m) shards.emplace_back(m, std::move(blocks[m]));
  return shards;
}

NormalizedShard normalize_rows(const PartyShard& shard) {
  Mat block = shard.block();
  std::vector<std::size_t> zero_rows;
  for (Eigen::Index i = 0; i < block.rows(); ++i) {
    double norm = block.row(i).norm();
    if (norm == 0.0) {
      zero_rows.push_back(static_cast<std::size_t>(i));
    } else {
      block.row(i) /= norm;
    }
  }
  return NormalizedShard{PartyShard(shard.party_id(), std::move(block)), std::move(zero_rows)};
}

LabeledDataset normalize_full_rows(const LabeledDataset& data, std::vector<std::size_t>* zero_rows) {
  LabeledDataset out = data;
  for (Eigen::Index i = 0; i < out.features.rows(); ++i) {
    double norm = out.features.row(i).norm();
    if (norm == 0.0) {
      if (zero_rows) zero_rows->push_back(static_cast<std::size_t>(i));
      continue;
    }
    for (SparseRows::InnerIterator it(out.features, i); it; ++it) it.valueRef() /= norm;
  }
  return out;
}

LabeledDataset head_rows(const LabeledDataset& data, std::size_t rows) {
  rows = std::min(rows, data.n_samples());
  LabeledDataset out;
  out.features = data.features.topRows(static_cast<Eigen::Index>(rows));
  out.features.makeCompressed();
  out.raw_labels.assign(data.raw_labels.begin(), data.raw_labels.begin() + static_cast<std::ptrdiff_t>(rows));
  if (data.labels.size() > 0) out.labels = data.labels.head(static_cast<Eigen::Index>(rows));
  return out;
}

LabeledDataset select_columns(const LabeledDataset& data, const std::vector<std::size_t>& columns) {
  std::vector<long> remap(data.n_features(), -1);
  for (std::size_t k = 0; k < columns.size(); ++k) {
    if (columns[k] >= data.n_features()) throw DimensionError("column out of range");
    remap[columns[k]] = static_cast<long>(k);
  }
  std::vector<Eigen::Triplet<double>> triplets;
  for (Eigen::Index i = 0; i < data.features.rows(); ++i)
    for (SparseRows::InnerIterator it(data.features, i); it; ++it)
      if (auto k = remap[static_cast<std::size_t>(it.col())]; k >= 0)
        triplets.emplace_back(static_cast<int>(i), static_cast<int>(k), it.value());
  LabeledDataset out;
  out.features.resize(data.features.rows(), static_cast<Eigen::Index>(columns.size()));
  out.features.setFromTriplets(triplets.begin(), triplets.end());
  out.features.makeCompressed();
  out.raw_labels = data.raw_labels;
  out.labels = data.labels;
  return out;
}

namespace {

Vec start_vector(Eigen::Index n) {
  // Deterministic, not orthogonal to any coordinate axis.
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = 1.0 + 0.5 * std::sin(static_cast<double>(i) + 1.0);
  return v.normalized();
}

template <typename Apply>
double rayleigh_iteration(const Mat& gram, Apply apply, double scale, const EigenOptions& options,
                          GramExtremes best, bool for_max) {
  Vec v = start_vector(gram.rows());
  double theta = v.dot(gram * v);
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    Vec next = apply(v);
    double norm = next.norm();
    if (norm == 0.0) return 0.0;
    v = next / norm;
    Vec gv = gram * v;
    theta = v.dot(gv);
    double residual = (gv - theta * v).norm();
    if (residual <= options.relative_tolerance * std::max(std::abs(theta), 1e-4 * scale)) return theta;
  }
  if (for_max) {
    best.sigma_max = theta;
  } else {
    best.sigma_min = theta;
  }
  throw EigenConvergenceError("eigenvalue iteration did not converge", best);
}

}  // namespace

GramExtremes gram_extremes(const Mat& gram, const EigenOptions& options) {
  if (gram.rows() == 0) throw DimensionError("empty shard");
  if (static_cast<std::size_t>(gram.rows()) <= options.dense_limit) {
    Eigen::SelfAdjointEigenSolver<Mat> solver(gram, Eigen::EigenvaluesOnly);
    const auto& ev = solver.eigenvalues();
    return GramExtremes{std::max(0.0, ev[0]), std::max(0.0, ev[ev.size() - 1])};
  }

  GramExtremes result;
  double trace_scale = std::max(gram.diagonal().maxCoeff(), 1e-300);
  result.sigma_max = rayleigh_iteration(
      gram, [&](const Vec& v) { Vec out = gram * v; return out; }, trace_scale, options, result, true);

  // Shifted inverse iteration; the shift keeps the factorization defined
  // for singular Gram matrices.
  double shift = 1e-10 * result.sigma_max;
  Mat shifted = gram;
  shifted.diagonal().array() += shift;
  Eigen::LLT<Mat> llt(shifted);
  while (llt.info() != Eigen::Success) {
    shift *= 10.0;
    shifted = gram;
    shifted.diagonal().array() += shift;
    llt.compute(shifted);
  }
  result.sigma_min = rayleigh_iteration(
      gram, [&](const Vec& v) { Vec out = llt.solve(v); return out; }, result.sigma_max, options, result, false);
  result.sigma_min = std::max(0.0, result.sigma_min);
  result.sigma_max = std::max(result.sigma_min, result.sigma_max);
  return result;
}

GramExtremes gram_extremes(const PartyShard& shard, const EigenOptions& options) {
  if (shard.width() == 0) throw DimensionError("empty shard");
  return gram_extremes(shard.gram(), options);
}

}  // namespace vfl
