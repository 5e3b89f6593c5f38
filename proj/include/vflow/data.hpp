#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vflow/linalg.hpp"

namespace vflow {

using CodeMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Categorical table. codes(n, v) indexes vocab[v]; every kept column has at
/// least two distinct values.
struct DiscreteTable {
  CodeMatrix codes;
  std::vector<int> cardinalities;
  std::vector<std::vector<std::string>> vocab;
  std::vector<std::string> columns;
  std::vector<std::string> dropped;  // constant columns removed on load

  std::size_t rows() const { return static_cast<std::size_t>(codes.rows()); }
  int num_vars() const { return static_cast<int>(codes.cols()); }
  /// Rows selected by `index`, sharing vocab.
  DiscreteTable subset(const std::vector<std::size_t>& index) const;
};

struct CsvOptions {
  char delimiter = ',';
  bool drop_constant = true;
};

/// Reads a header-first CSV (quoted fields, doubled quotes, CRLF or LF) and
/// encodes each column by first appearance.
DiscreteTable load_csv_discrete(const std::string& path, const CsvOptions& options = {});
DiscreteTable parse_csv_discrete(const std::string& text, const CsvOptions& options = {});

/// Decoded table as CSV text; fields are quoted only when they must be.
std::string to_csv(const DiscreteTable& table, char delimiter = ',');
void write_csv(const DiscreteTable& table, const std::string& path, char delimiter = ',');

/// Rows of a CSV as string fields (header included).
std::vector<std::vector<std::string>> parse_csv_rows(const std::string& text, char delimiter = ',');

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Seeded shuffle; validation and test sizes are round(n * ratio) and
/// training takes the rest. Throws BadRatios unless ratios are nonnegative
/// and sum to one.
Split split(std::size_t n, double train, double val, double test, std::uint64_t seed);

// ------------------------------------------------------------ synthetic data

/// Named 2D shapes: "checkerboard", "two_moons", "rings", "8gaussians",
/// "two_gaussians".
Matrix synth_continuous_2d(const std::string& shape, std::size_t n, std::uint64_t seed);

/// Exact log density of the generator where it has one (8gaussians,
/// two_gaussians, checkerboard); empty otherwise.
std::optional<Vector> generator_log_density(const std::string& shape, const Matrix& x);

/// Continuous shape quantized per coordinate into `bins` equal-width bins
/// over the observed range. Codes are bin indices; vocab entries are their
/// decimal strings.
DiscreteTable synth_quantized_2d(const std::string& shape, int bins, std::size_t n,
                                 std::uint64_t seed);

/// The eight Nursery attributes enumerated in full (the UCI table is their
/// Cartesian product), last attribute varying fastest; 12960 rows.
DiscreteTable nursery_table();

/// Empirical log-probabilities of each code per variable, from `table`'s
/// counts with no smoothing.
std::vector<Vector> marginal_log_probs(const DiscreteTable& table);

/// Mean NLL of `eval` under the product of marginals estimated on `fit`
/// (add-`alpha` smoothing over each variable's cardinality).
double marginal_histogram_nll(const DiscreteTable& fit, const DiscreteTable& eval,
                              double alpha = 0.0);

}  // namespace vflow
