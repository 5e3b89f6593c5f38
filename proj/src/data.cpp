#include "vflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "vflow/error.hpp"

namespace vflow {

DiscreteTable DiscreteTable::subset(const std::vector<std::size_t>& index) const {
  DiscreteTable out;
  out.codes.resize(static_cast<Eigen::Index>(index.size()), codes.cols());
  for (std::size_t i = 0; i < index.size(); ++i)
    out.codes.row(static_cast<Eigen::Index>(i)) = codes.row(static_cast<Eigen::Index>(index[i]));
  out.cardinalities = cardinalities;
  out.vocab = vocab;
  out.columns = columns;
  out.dropped = dropped;
  return out;
}

// ---------------------------------------------------------------- CSV

std::vector<std::vector<std::string>> parse_csv_rows(const std::string& text, char delimiter) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  std::size_t i = 0;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };
  while (i < text.size()) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
          continue;
        }
        quoted = false;
      } else {
        field.push_back(c);
      }
      ++i;
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == delimiter) {
      end_field();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      end_row();
      ++i;
    } else if (c == '\n') {
      end_row();
    } else {
      field.push_back(c);
      field_started = true;
    }
    ++i;
  }
  if (quoted) throw Error(Errc::RaggedRows, "unterminated quoted field");
  if (field_started || !row.empty()) end_row();
  return rows;
}

DiscreteTable parse_csv_discrete(const std::string& text, const CsvOptions& options) {
  const auto rows = parse_csv_rows(text, options.delimiter);
  if (rows.empty()) throw Error(Errc::EmptyFile, "CSV has no header");
  const auto& header = rows.front();
  const std::size_t V = header.size();
  const std::size_t N = rows.size() - 1;
  if (N == 0) throw Error(Errc::EmptyFile, "CSV has a header but no data rows");
  for (std::size_t r = 1; r < rows.size(); ++r)
    if (rows[r].size() != V)
      throw Error(Errc::RaggedRows, "row " + std::to_string(r) + " has " +
                                        std::to_string(rows[r].size()) + " fields, expected " +
                                        std::to_string(V));

  DiscreteTable all;
  all.codes.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(V));
  all.vocab.resize(V);
  for (std::size_t v = 0; v < V; ++v) {
    std::unordered_map<std::string, int> seen;
    for (std::size_t n = 0; n < N; ++n) {
      const std::string& s = rows[n + 1][v];
      auto [it, inserted] = seen.emplace(s, static_cast<int>(all.vocab[v].size()));
      if (inserted) all.vocab[v].push_back(s);
      all.codes(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(v)) = it->second;
    }
  }

  DiscreteTable out;
  std::vector<Eigen::Index> keep;
  for (std::size_t v = 0; v < V; ++v) {
    if (options.drop_constant && all.vocab[v].size() < 2) {
      out.dropped.push_back(header[v]);
      continue;
    }
    keep.push_back(static_cast<Eigen::Index>(v));
    out.columns.push_back(header[v]);
    out.vocab.push_back(all.vocab[v]);
    out.cardinalities.push_back(static_cast<int>(all.vocab[v].size()));
  }
  out.codes.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j)
    out.codes.col(static_cast<Eigen::Index>(j)) = all.codes.col(keep[j]);
  return out;
}

DiscreteTable load_csv_discrete(const std::string& path, const CsvOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.empty()) throw Error(Errc::EmptyFile, "'" + path + "' is empty");
  return parse_csv_discrete(text, options);
}

namespace {

void put_field(std::string& out, const std::string& s, char delimiter) {
  const bool quote = s.find_first_of(std::string{delimiter, '"', '\n', '\r'}) != std::string::npos;
  if (!quote) {
    out += s;
    return;
  }
  out.push_back('"');
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
}

}  // namespace

std::string to_csv(const DiscreteTable& table, char delimiter) {
  std::string out;
  for (std::size_t v = 0; v < table.columns.size(); ++v) {
    if (v > 0) out.push_back(delimiter);
    put_field(out, table.columns[v], delimiter);
  }
  out.push_back('\n');
  for (Eigen::Index n = 0; n < table.codes.rows(); ++n) {
    for (Eigen::Index v = 0; v < table.codes.cols(); ++v) {
      if (v > 0) out.push_back(delimiter);
      put_field(out, table.vocab[static_cast<std::size_t>(v)][static_cast<std::size_t>(table.codes(n, v))],
                delimiter);
    }
    out.push_back('\n');
  }
  return out;
}

void write_csv(const DiscreteTable& table, const std::string& path, char delimiter) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write '" + path + "'");
  out << to_csv(table, delimiter);
}

// ---------------------------------------------------------------- split

Split split(std::size_t n, double train, double val, double test, std::uint64_t seed) {
  for (double r : {train, val, test})
    if (!(r >= 0.0) || !std::isfinite(r)) throw Error(Errc::BadRatios, "ratios must be nonnegative");
  if (std::abs(train + val + test - 1.0) > 1e-9) throw Error(Errc::BadRatios, "ratios must sum to 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val));
  const auto n_test = std::min(n - n_val, static_cast<std::size_t>(std::llround(static_cast<double>(n) * test)));
  Split s;
  const std::size_t n_train = n - n_val - n_test;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

// ---------------------------------------------------------------- synthetic

namespace {

using Vector2 = Eigen::Vector2d;

constexpr double kPi = std::numbers::pi;

// 8gaussians: centres on a radius-2 circle, isotropic std 0.2.
constexpr double kRingRadius = 2.0;
constexpr double kRingStd = 0.2;
// two_gaussians: centres +-(2, 0), std 0.3.
constexpr double kPairOffset = 2.0;
constexpr double kPairStd = 0.3;

Vector2 ring_center(int k) {
  const double a = 2.0 * kPi * k / 8.0;
  return {kRingRadius * std::cos(a), kRingRadius * std::sin(a)};
}

double log_normal2(double dx, double dy, double sd) {
  return -0.5 * (dx * dx + dy * dy) / (sd * sd) - 2.0 * std::log(sd) - std::log(2.0 * kPi);
}

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

Matrix synth_continuous_2d(const std::string& shape, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif;
  Matrix x(static_cast<Eigen::Index>(n), 2);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (shape == "8gaussians") {
      const int k = static_cast<int>(unif(rng) * 8.0) % 8;
      const Vector2 c = ring_center(k);
      x(i, 0) = c[0] + kRingStd * normal(rng);
      x(i, 1) = c[1] + kRingStd * normal(rng);
    } else if (shape == "two_gaussians") {
      const double s = unif(rng) < 0.5 ? -1.0 : 1.0;
      x(i, 0) = s * kPairOffset + kPairStd * normal(rng);
      x(i, 1) = kPairStd * normal(rng);
    } else if (shape == "checkerboard") {
      // Eight unit squares of a 4x4 board on [-2, 2]^2, alternating colours.
      const double u = unif(rng) * 4.0 - 2.0;
      const double col = std::floor(u);
      const double v = unif(rng) - 2.0 + 2.0 * std::floor(unif(rng) * 2.0);
      x(i, 0) = u;
      x(i, 1) = v + (static_cast<int>(col + 2.0) % 2 == 0 ? 1.0 : 0.0);
    } else if (shape == "two_moons") {
      const double t = unif(rng) * kPi;
      if (unif(rng) < 0.5) {
        x(i, 0) = std::cos(t) - 0.5;
        x(i, 1) = std::sin(t) - 0.25;
      } else {
        x(i, 0) = 0.5 - std::cos(t);
        x(i, 1) = 0.25 - std::sin(t);
      }
      x(i, 0) = 2.0 * x(i, 0) + 0.1 * normal(rng);
      x(i, 1) = 2.0 * x(i, 1) + 0.1 * normal(rng);
    } else if (shape == "rings") {
      const int ring = static_cast<int>(unif(rng) * 4.0) % 4;
      const double r = 0.75 * (ring + 1) + 0.08 * normal(rng);
      const double a = unif(rng) * 2.0 * kPi;
      x(i, 0) = r * std::cos(a);
      x(i, 1) = r * std::sin(a);
    } else {
      throw Error(Errc::ConfigInvalid, "unknown 2D shape '" + shape + "'");
    }
  }
  return x;
}

std::optional<Vector> generator_log_density(const std::string& shape, const Matrix& x) {
  if (x.cols() != 2) throw Error(Errc::NotTwoDimensional, "generator densities are 2D");
  Vector out(x.rows());
  if (shape == "8gaussians") {
    std::vector<double> terms(8);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      for (int k = 0; k < 8; ++k) {
        const Vector2 c = ring_center(k);
        terms[static_cast<std::size_t>(k)] =
            std::log(1.0 / 8.0) + log_normal2(x(i, 0) - c[0], x(i, 1) - c[1], kRingStd);
      }
      out[i] = log_sum_exp(terms);
    }
    return out;
  }
  if (shape == "two_gaussians") {
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      out[i] = log_sum_exp({std::log(0.5) + log_normal2(x(i, 0) - kPairOffset, x(i, 1), kPairStd),
                            std::log(0.5) + log_normal2(x(i, 0) + kPairOffset, x(i, 1), kPairStd)});
    return out;
  }
  if (shape == "checkerboard") {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double u = x(i, 0), v = x(i, 1);
      const bool inside = u > -2.0 && u < 2.0 && v > -2.0 && v < 2.0;
      const int cu = static_cast<int>(std::floor(u + 2.0));
      const int cv = static_cast<int>(std::floor(v + 2.0));
      out[i] = inside && (cu + cv) % 2 == 1 ? std::log(1.0 / 8.0)
                                             : -std::numeric_limits<double>::infinity();
    }
    return out;
  }
  return std::nullopt;
}

DiscreteTable synth_quantized_2d(const std::string& shape, int bins, std::size_t n,
                                 std::uint64_t seed) {
  if (bins < 2) throw Error(Errc::ConfigInvalid, "need at least two bins");
  const Matrix x = synth_continuous_2d(shape, n, seed);
  DiscreteTable t;
  t.codes.resize(x.rows(), 2);
  for (int d = 0; d < 2; ++d) {
    const double lo = x.col(d).minCoeff(), hi = x.col(d).maxCoeff();
    const double width = (hi - lo) / bins;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const int b = width > 0.0 ? static_cast<int>(std::floor((x(i, d) - lo) / width)) : 0;
      t.codes(i, d) = std::clamp(b, 0, bins - 1);
    }
    t.cardinalities.push_back(bins);
    std::vector<std::string> names;
    for (int b = 0; b < bins; ++b) names.push_back(std::to_string(b));
    t.vocab.push_back(std::move(names));
    t.columns.push_back(d == 0 ? "x" : "y");
  }
  return t;
}

DiscreteTable nursery_table() {
  const std::vector<std::pair<std::string, std::vector<std::string>>> attrs = {
      {"parents", {"usual", "pretentious", "great_pret"}},
      {"has_nurs", {"proper", "less_proper", "improper", "critical", "very_crit"}},
      {"form", {"complete", "completed", "incomplete", "foster"}},
      {"children", {"1", "2", "3", "more"}},
      {"housing", {"convenient", "less_conv", "critical"}},
      {"finance", {"convenient", "inconv"}},
      {"social", {"nonprob", "slightly_prob", "problematic"}},
      {"health", {"recommended", "priority", "not_recom"}},
  };
  DiscreteTable t;
  std::size_t total = 1;
  for (const auto& [name, values] : attrs) {
    t.columns.push_back(name);
    t.vocab.push_back(values);
    t.cardinalities.push_back(static_cast<int>(values.size()));
    total *= values.size();
  }
  t.codes.resize(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(attrs.size()));
  for (std::size_t r = 0; r < total; ++r) {
    std::size_t rem = r;
    for (std::size_t v = attrs.size(); v-- > 0;) {
      const std::size_t c = attrs[v].second.size();
      t.codes(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(v)) = static_cast<int>(rem % c);
      rem /= c;
    }
  }
  return t;
}

std::vector<Vector> marginal_log_probs(const DiscreteTable& table) {
  std::vector<Vector> out;
  for (int v = 0; v < table.num_vars(); ++v) {
    Vector counts = Vector::Zero(table.cardinalities[static_cast<std::size_t>(v)]);
    for (Eigen::Index n = 0; n < table.codes.rows(); ++n) counts[table.codes(n, v)] += 1.0;
    out.push_back((counts / static_cast<double>(table.rows())).array().log().matrix());
  }
  return out;
}

double marginal_histogram_nll(const DiscreteTable& fit, const DiscreteTable& eval, double alpha) {
  double total = 0.0;
  for (int v = 0; v < fit.num_vars(); ++v) {
    const int K = fit.cardinalities[static_cast<std::size_t>(v)];
    Vector counts = Vector::Constant(K, alpha);
    for (Eigen::Index n = 0; n < fit.codes.rows(); ++n) counts[fit.codes(n, v)] += 1.0;
    const Vector logp = (counts / counts.sum()).array().log().matrix();
    for (Eigen::Index n = 0; n < eval.codes.rows(); ++n) total -= logp[eval.codes(n, v)];
  }
  return total / static_cast<double>(eval.rows());
}

}  // namespace vflow
