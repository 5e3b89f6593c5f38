#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "vflow/check.hpp"
#include "vflow/cli.hpp"
#include "vflow/error.hpp"

namespace fs = std::filesystem;

namespace vflow::cli {
namespace {

using nlohmann::json;

std::string num(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

// Non-finite values have no JSON spelling; they become null.
json jnum(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Errc::Io, "cannot write " + path.string());
  f << text;
  if (!f) throw Error(Errc::Io, "short write to " + path.string());
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Matrix parse_numeric_csv(const std::string& text) {
  const auto rows = parse_csv_rows(text);
  if (rows.size() < 2) throw Error(Errc::EmptyFile, "CSV needs a header and at least one row");
  const std::size_t D = rows.front().size();
  Matrix out(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(D));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != D) throw Error(Errc::RaggedRows, "row " + std::to_string(r) + " has the wrong width");
    for (std::size_t c = 0; c < D; ++c) {
      const std::string& s = rows[r][c];
      double x = 0.0;
      const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), x);
      if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(x))
        throw Error(Errc::NonFiniteInput, "row " + std::to_string(r) + ": '" + s + "' is not a finite number");
      out(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(c)) = x;
    }
  }
  return out;
}

DiscreteTable categorical_table(const DataSpec& d) {
  const int J = static_cast<int>(d.probs.size());
  std::vector<int> codes;
  for (int j = 0; j < J; ++j) {
    const auto count = j + 1 < J ? static_cast<std::size_t>(std::llround(static_cast<double>(d.n) * d.probs[j]))
                                 : d.n - std::min(d.n, codes.size());
    codes.insert(codes.end(), std::min(count, d.n - codes.size()), j);
  }
  Rng rng(d.seed);
  std::shuffle(codes.begin(), codes.end(), rng);
  DiscreteTable t;
  t.columns = {"y"};
  t.vocab.resize(1);
  for (int j = 0; j < J; ++j) t.vocab[0].push_back(std::to_string(j));
  t.cardinalities = {J};
  t.codes.resize(static_cast<Eigen::Index>(codes.size()), 1);
  for (std::size_t i = 0; i < codes.size(); ++i) t.codes(static_cast<Eigen::Index>(i), 0) = codes[i];
  return t;
}

std::vector<std::vector<std::string>> decoded_rows(const DiscreteTable& t) {
  std::vector<std::vector<std::string>> rows{t.columns};
  for (std::size_t n = 0; n < t.rows(); ++n) {
    std::vector<std::string> row;
    for (int v = 0; v < t.num_vars(); ++v)
      row.push_back(t.vocab[static_cast<std::size_t>(v)][static_cast<std::size_t>(t.codes(static_cast<Eigen::Index>(n), v))]);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<std::size_t> split_rows(const Split& s, const std::string& which, std::size_t n) {
  if (which == "train") return s.train;
  if (which == "val") return s.val;
  if (which == "test") return s.test;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  return all;
}

Matrix subset_rows(const Matrix& m, const std::vector<std::size_t>& index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), m.cols());
  for (std::size_t i = 0; i < index.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(index[i]));
  return out;
}

fs::path prepare_out(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error(Errc::Io, "cannot create output directory " + dir);
  return fs::path(dir);
}

Config config_for_train(const Options& o) {
  if (o.config.empty()) throw Error(Errc::ConfigInvalid, "train needs --config");
  Config c = load_config(o.config);
  if (o.seed) c.train.seed = *o.seed;
  if (!o.out.empty()) c.out_dir = o.out;
  return c;
}

std::string out_dir_for(const Options& o) {
  if (!o.out.empty()) return o.out;
  const fs::path parent = fs::path(o.checkpoint).parent_path();
  return parent.empty() ? std::string(".") : parent.string();
}

LoadedModel model_for(const Options& o) {
  if (o.checkpoint.empty()) throw Error(Errc::ConfigInvalid, "this command needs --checkpoint");
  return load_model(o.checkpoint);
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const fs::path& path) : f_(path, std::ios::binary | std::ios::trunc) {
    if (!f_) throw Error(Errc::Io, "cannot write " + path.string());
    f_ << "epoch,train_nll,val_nll,seconds\n";
    f_.flush();
  }
  void add(const EpochRecord& r) {
    f_ << r.epoch << ',' << num(r.train_nll) << ',' << num(r.val_nll) << ',' << num(r.seconds) << '\n';
    f_.flush();
  }

 private:
  std::ofstream f_;
};

struct Stats {
  double mean = 0.0;
  double stderr_ = 0.0;
};

Stats stats(const Vector& x) {
  Stats s;
  const auto n = static_cast<double>(x.size());
  if (x.size() == 0) return s;
  s.mean = x.mean();
  if (x.size() > 1) s.stderr_ = std::sqrt((x.array() - s.mean).square().sum() / (n - 1) / n);
  return s;
}

// Shared evaluation of the held-out splits for the training summary.
json dequant_summary(const ad::ParamStore& store, const DequantModel& model, const JointDensity& density,
                     const Dataset& ds, const Config& c) {
  json j;
  const DiscreteTable train = ds.table.subset(ds.split.train);
  for (const char* name : {"val", "test"}) {
    const auto& idx = std::string(name) == "val" ? ds.split.val : ds.split.test;
    if (idx.empty()) continue;
    const DiscreteTable part = ds.table.subset(idx);
    Rng rng(c.train.seed ^ 0x7e57u);
    j[std::string(name) + "_neg_elbo"] = jnum(nll_bound(store, model, density, part.codes, c.train.eval_samples, rng));
    j[std::string(name) + "_marginal_histogram_nll"] = jnum(marginal_histogram_nll(train, part));
  }
  return j;
}

json mixture_summary(const ad::ParamStore& store, const MixtureModel& model, const Dataset& ds,
                     const Config& c) {
  json j;
  for (const char* name : {"val", "test"}) {
    const auto& idx = std::string(name) == "val" ? ds.split.val : ds.split.test;
    if (idx.empty()) continue;
    const Matrix part = subset_rows(ds.points, idx);
    j[std::string(name) + "_nll"] = jnum(-model.log_prob(store, part).mean());
    if (c.data.source == "continuous")
      if (const auto ref = generator_log_density(c.data.shape, part))
        j[std::string(name) + "_generator_nll"] = jnum(-ref->mean());
  }
  return j;
}

std::string svg_color(double t) {
  // Dark blue through teal to yellow.
  static const double stops[5][3] = {{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(stops[i][0] + f * (stops[i + 1][0] - stops[i][0]))),
                static_cast<int>(std::lround(stops[i][1] + f * (stops[i + 1][1] - stops[i][1]))),
                static_cast<int>(std::lround(stops[i][2] + f * (stops[i + 1][2] - stops[i][2]))));
  return buf;
}

}  // namespace

std::size_t Dataset::rows() const {
  return points.rows() > 0 ? static_cast<std::size_t>(points.rows()) : table.rows();
}

Dataset load_dataset(const Config& c) {
  const DataSpec& d = c.data;
  Dataset ds;
  if (c.task == Task::Dequant) {
    if (d.source == "csv")
      ds.table = load_csv_discrete(d.path);
    else if (d.source == "nursery")
      ds.table = nursery_table();
    else if (d.source == "quantized")
      ds.table = synth_quantized_2d(d.shape, d.bins, d.n, d.seed);
    else if (d.source == "categorical")
      ds.table = categorical_table(d);
    else
      throw Error(Errc::ConfigInvalid, "data.source '" + d.source + "' is not discrete");
  } else {
    if (d.source == "csv")
      ds.points = parse_numeric_csv(read_text(d.path));
    else if (d.source == "continuous")
      ds.points = synth_continuous_2d(d.shape, d.n, d.seed);
    else
      throw Error(Errc::ConfigInvalid, "data.source '" + d.source + "' is not continuous");
  }
  ds.split = split(ds.rows(), d.train, d.val, d.test, d.split_seed);
  return ds;
}

DiscreteTable encode_with_vocab(const std::vector<std::vector<std::string>>& rows,
                                const std::vector<std::string>& columns,
                                const std::vector<std::vector<std::string>>& vocab) {
  if (rows.empty()) throw Error(Errc::EmptyFile, "CSV has no header");
  const auto& header = rows.front();
  std::vector<std::size_t> source(columns.size());
  for (std::size_t v = 0; v < columns.size(); ++v) {
    const auto it = std::find(header.begin(), header.end(), columns[v]);
    if (it == header.end()) throw Error(Errc::VocabMismatch, "column '" + columns[v] + "' is missing");
    source[v] = static_cast<std::size_t>(it - header.begin());
  }
  DiscreteTable t;
  t.columns = columns;
  t.vocab = vocab;
  for (const auto& v : vocab) t.cardinalities.push_back(static_cast<int>(v.size()));
  t.codes.resize(static_cast<Eigen::Index>(rows.size() - 1), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].size() != header.size())
      throw Error(Errc::RaggedRows, "row " + std::to_string(r) + " has the wrong width");
    for (std::size_t v = 0; v < columns.size(); ++v) {
      const std::string& s = rows[r][source[v]];
      const auto it = std::find(vocab[v].begin(), vocab[v].end(), s);
      if (it == vocab[v].end())
        throw Error(Errc::VocabMismatch, "value '" + s + "' of column '" + columns[v] + "' is not in the vocabulary");
      t.codes(static_cast<Eigen::Index>(r - 1), static_cast<Eigen::Index>(v)) = static_cast<int>(it - vocab[v].begin());
    }
  }
  return t;
}

OutputLock::OutputLock(const std::string& dir) : path_((fs::path(dir) / kLockName).string()) {
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f) {
    const bool held = fs::exists(path_);
    path_.clear();
    throw Error(Errc::Io, held ? "output directory " + dir + " is locked by another command" : "cannot lock " + dir);
  }
  std::fclose(f);
}

OutputLock::~OutputLock() {
  if (path_.empty()) return;
  std::error_code ec;
  fs::remove(path_, ec);
}

int thread_cap() {
  const char* env = std::getenv("VF_THREADS");
  if (!env || !*env) return 0;
  int n = 0;
  const std::string s(env);
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc() || p != s.data() + s.size() || n < 1)
    throw Error(Errc::ConfigInvalid, "VF_THREADS must be a positive integer");
  return n;
}

TrainedModel train_from_config(const Config& c, const std::function<void(const EpochRecord&)>& on_epoch) {
  TrainedModel t;
  t.config = c;
  t.data = load_dataset(c);
  if (t.data.split.val.empty()) throw Error(Errc::ConfigInvalid, "the validation split is empty");
  auto record = [&](const EpochRecord& r) {
    t.history.push_back(r);
    if (on_epoch) on_epoch(r);
  };
  Rng rng(c.train.seed);
  const Dataset& ds = t.data;
  if (c.task == Task::Dequant) {
    t.dequant = DequantModel::create(t.store, ds.table.cardinalities, c.dequant, rng);
    for (int v = 0; v < t.dequant.num_vars(); ++v)
      t.store.value(t.store.find("dequant.v" + std::to_string(v) + ".base_log_std")).setConstant(c.dequant_base_log_std);
    t.density = JointDensity::create(t.store, t.dequant.total_dim(), c.density, rng);
  } else {
    t.mixture = MixtureModel::create(t.store, subset_rows(ds.points, ds.split.train), c.mixture, rng);
  }
  try {
    if (c.task == Task::Dequant)
      t.report = train_dequant(t.store, t.dequant, t.density, ds.table.subset(ds.split.train).codes,
                               ds.table.subset(ds.split.val).codes, c.train, record);
    else
      t.report = train_mixture(t.store, t.mixture, subset_rows(ds.points, ds.split.train),
                               subset_rows(ds.points, ds.split.val), c.train, record);
  } catch (const Error& e) {
    if (e.code() != Errc::DivergedLoss) throw;
    // The store was rolled back to the best parameters seen.
    t.diverged = true;
    t.failure = e.what();
  }
  return t;
}

Checkpoint make_checkpoint(const TrainedModel& t) {
  Checkpoint ck;
  ck.config = config_entries(t.config);
  if (t.config.task == Task::Dequant) {
    ck.columns = t.data.table.columns;
    ck.vocab = t.data.table.vocab;
    ck.dropped = t.data.table.dropped;
  } else {
    ck.dim = static_cast<int>(t.data.points.cols());
  }
  for (std::size_t i = 0; i < t.store.size(); ++i)
    ck.params.emplace_back(t.store.name(ad::ParamId{i}), t.store.value(ad::ParamId{i}));
  ck.history = t.history;
  return ck;
}

int cmd_train(const Options& o, std::ostream& log) {
  const Config c = config_for_train(o);
  const fs::path out = prepare_out(c.out_dir);
  const OutputLock lock(out.string());
  MetricsWriter metrics(out / "metrics.csv");
  log << "task " << (c.task == Task::Dequant ? "dequant" : "mixture") << "\n";
  const TrainedModel t = train_from_config(c, [&](const EpochRecord& r) {
    metrics.add(r);
    log << "epoch " << r.epoch << "  train " << num(r.train_nll) << "  val " << num(r.val_nll) << "  "
        << num(r.seconds) << " s\n";
  });

  save_checkpoint(make_checkpoint(t), (out / "checkpoint.json").string());
  json summary;
  summary["status"] = t.diverged ? "diverged" : "ok";
  summary["epochs_run"] = t.history.size();
  summary["parameters"] = t.store.total_elements();
  summary["rows"] = {{"train", t.data.split.train.size()}, {"val", t.data.split.val.size()}, {"test", t.data.split.test.size()}};
  if (t.diverged) {
    summary["error"] = t.failure;
  } else {
    summary["best_epoch"] = t.report.best_epoch;
    summary["best_val_nll"] = jnum(t.report.best_val_nll);
    summary["stopped_early"] = t.report.stopped_early;
    summary.update(c.task == Task::Dequant ? dequant_summary(t.store, t.dequant, t.density, t.data, c)
                                           : mixture_summary(t.store, t.mixture, t.data, c));
  }
  write_text(out / "summary.json", summary.dump(1) + "\n");
  log << summary.dump(1) << "\n";
  if (t.diverged) throw Error(Errc::DivergedLoss, t.failure);
  return 0;
}

int cmd_eval(const Options& o, std::ostream& log) {
  const LoadedModel m = model_for(o);
  // Data and split come from --config when given, else from the checkpoint.
  const Config data_config = o.config.empty() ? m.config : load_config(o.config);
  if (data_config.task != m.config.task) throw Error(Errc::ConfigInvalid, "config task differs from the checkpoint");
  const std::string which = data_config.eval_split;
  const int S = o.samples.value_or(m.config.eval_samples);
  if (S < 1) throw Error(Errc::ConfigInvalid, "--samples must be positive");
  const std::uint64_t seed = o.seed.value_or(m.config.train.seed);
  const fs::path out = prepare_out(out_dir_for(o));
  const OutputLock lock(out.string());

  json report;
  Vector nll;
  if (m.config.task == Task::Dequant) {
    const DataSpec& d = data_config.data;
    DiscreteTable table;
    if (d.source == "csv")
      table = encode_with_vocab(parse_csv_rows(read_text(d.path)), m.checkpoint.columns, m.checkpoint.vocab);
    else
      table = encode_with_vocab(decoded_rows(load_dataset(data_config).table), m.checkpoint.columns,
                                m.checkpoint.vocab);
    const Split s = split(table.rows(), d.train, d.val, d.test, d.split_seed);
    const DiscreteTable part = table.subset(split_rows(s, which, table.rows()));
    Rng rng(seed);
    nll = -log_evidence(m.store, m.dequant, m.density, part.codes, S, rng);
    Rng rng2(seed);
    report["mean_neg_elbo"] = jnum(-elbo(m.store, m.dequant, m.density, part.codes, S, rng2).mean());
    report["bound"] = "importance-weighted";
  } else {
    const Dataset ds = load_dataset(data_config);
    const Matrix part = subset_rows(ds.points, split_rows(ds.split, which, ds.rows()));
    if (part.cols() != m.mixture.dim()) throw Error(Errc::ShapeMismatch, "data width differs from the model");
    MixtureDiagnostics diag;
    nll = -m.mixture.log_prob(m.store, part, &diag);
    report["nudged"] = diag.nudged;
    report["rejected"] = diag.rejected;
    report["bound"] = "exact";
  }
  const Stats st = stats(nll);
  report["mean_nll"] = jnum(st.mean);
  report["stderr"] = jnum(st.stderr_);
  report["n"] = nll.size();
  report["S"] = S;
  report["seed"] = seed;
  report["split"] = which;
  write_text(out / "eval.json", report.dump(1) + "\n");
  std::string per = "nll\n";
  for (Eigen::Index i = 0; i < nll.size(); ++i) per += num(nll[i]) + "\n";
  write_text(out / "eval_per_example.csv", per);
  log << report.dump(1) << "\n";
  return 0;
}

int cmd_sample(const Options& o, std::ostream& log) {
  const LoadedModel m = model_for(o);
  const int n = o.samples.value_or(1000);
  if (n < 1) throw Error(Errc::ConfigInvalid, "--samples must be positive");
  const std::uint64_t seed = o.seed.value_or(m.config.train.seed);
  const fs::path out = prepare_out(out_dir_for(o));
  const OutputLock lock(out.string());
  Rng rng(seed);
  std::string csv;
  if (m.config.task == Task::Dequant) {
    // Cells beyond a variable's cardinality decode to nothing; such draws are
    // rejected, which samples p conditioned on a valid table row.
    DiscreteTable t;
    t.columns = m.checkpoint.columns;
    t.vocab = m.checkpoint.vocab;
    for (const auto& v : t.vocab) t.cardinalities.push_back(static_cast<int>(v.size()));
    t.codes.resize(n, static_cast<Eigen::Index>(t.columns.size()));
    Eigen::Index filled = 0;
    std::size_t rejected = 0;
    for (int round = 0; filled < n; ++round) {
      if (round == 1000) throw Error(Errc::DivergedLoss, "the model puts almost no mass on valid cells");
      const CodeMatrix codes = m.dequant.quantize(m.store, m.density.sample(m.store, static_cast<std::size_t>(n - filled), rng));
      for (Eigen::Index r = 0; r < codes.rows(); ++r) {
        bool valid = true;
        for (Eigen::Index v = 0; v < codes.cols(); ++v) valid = valid && codes(r, v) < t.cardinalities[static_cast<std::size_t>(v)];
        if (valid)
          t.codes.row(filled++) = codes.row(r);
        else
          ++rejected;
      }
    }
    csv = to_csv(t);
    log << n << " rows sampled, " << rejected << " draws rejected in unused cells\n";
  } else {
    const Matrix x = m.mixture.sample(m.store, static_cast<std::size_t>(n), rng);
    for (Eigen::Index c = 0; c < x.cols(); ++c) csv += (c ? ",x" : "x") + std::to_string(c);
    csv += "\n";
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      for (Eigen::Index c = 0; c < x.cols(); ++c) csv += (c ? "," : "") + num(x(r, c));
      csv += "\n";
    }
    log << n << " rows sampled\n";
  }
  write_text(out / "samples.csv", csv);
  return 0;
}

int cmd_plot_density(const Options& o, std::ostream& log) {
  const LoadedModel m = model_for(o);
  const int grid = o.grid.value_or(200);
  if (grid < 2 || grid > 4000) throw Error(Errc::ConfigInvalid, "--grid must lie in [2, 4000]");
  const bool dq = m.config.task == Task::Dequant;
  const int dim = dq ? m.dequant.total_dim() : m.mixture.dim();
  if (dim != 2) throw Error(Errc::NotTwoDimensional, "the model has " + std::to_string(dim) + " dimensions, not 2");
  const Tessellation t = dq ? m.dequant.materialize(m.store)[0] : m.mixture.tessellation().materialize(m.store);

  Vector lo = t.box_lo(), hi = t.box_hi();
  if (!m.config.plot_bounds.empty()) {
    lo << m.config.plot_bounds[0], m.config.plot_bounds[2];
    hi << m.config.plot_bounds[1], m.config.plot_bounds[3];
  }
  const double hx = (hi[0] - lo[0]) / grid, hy = (hi[1] - lo[1]) / grid;
  // Row i of the grid is y-cell i counted from the bottom; column j is x-cell j.
  Matrix pts(static_cast<Eigen::Index>(grid) * grid, 2);
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) pts.row(i * grid + j) << lo[0] + (j + 0.5) * hx, lo[1] + (i + 0.5) * hy;

  Vector logp;
  IndexVector labels;
  if (dq) {
    logp = m.density.flow().log_prob(m.store, pts);
    labels = locate_rows(t, pts);
  } else {
    logp = m.mixture.log_prob(m.store, pts);
    labels = locate_rows(t, m.mixture.to_latent(m.store, pts).first);
  }
  const Vector p = logp.array().exp();

  const fs::path out = prepare_out(out_dir_for(o));
  const OutputLock lock(out.string());
  std::string csv;
  for (int i = 0; i < grid; ++i) {
    for (int j = 0; j < grid; ++j) csv += (j ? "," : "") + num(p[i * grid + j]);
    csv += "\n";
  }
  write_text(out / "density.csv", csv);

  // Boundary pieces: the grid edge shared by two neighbouring cells whose
  // points locate to different anchors.
  struct Segment {
    double x0, y0, x1, y1;
  };
  std::vector<Segment> segs;
  std::string bcsv = "x,y\n";
  for (int i = 0; i < grid; ++i)
    for (int j = 0; j < grid; ++j) {
      const int a = labels[static_cast<std::size_t>(i * grid + j)];
      const double x = lo[0] + (j + 1) * hx, y = lo[1] + (i + 1) * hy;
      if (j + 1 < grid && labels[static_cast<std::size_t>(i * grid + j + 1)] != a) {
        segs.push_back({x, y - hy, x, y});
        bcsv += num(x) + "," + num(y - 0.5 * hy) + "\n";
      }
      if (i + 1 < grid && labels[static_cast<std::size_t>((i + 1) * grid + j)] != a) {
        segs.push_back({x - hx, y, x, y});
        bcsv += num(x - 0.5 * hx) + "," + num(y) + "\n";
      }
    }
  write_text(out / "boundary.csv", bcsv);

  const double pmax = p.maxCoeff() > 0 ? p.maxCoeff() : 1.0;
  const double scale = 512.0 / grid;
  auto sx = [&](double x) { return (x - lo[0]) / hx * scale; };
  auto sy = [&](double y) { return (hi[1] - y) / hy * scale; };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"512\" height=\"512\" viewBox=\"0 0 512 512\" "
         "shape-rendering=\"crispEdges\">\n";
  for (int i = 0; i < grid; ++i) {
    // Horizontal runs of one colour become one rectangle.
    int j = 0;
    while (j < grid) {
      const std::string col = svg_color(p[i * grid + j] / pmax);
      int k = j + 1;
      while (k < grid && svg_color(p[i * grid + k] / pmax) == col) ++k;
      svg << "<rect x=\"" << num(j * scale) << "\" y=\"" << num((grid - 1 - i) * scale) << "\" width=\""
          << num((k - j) * scale) << "\" height=\"" << num(scale) << "\" fill=\"" << col << "\"/>\n";
      j = k;
    }
  }
  svg << "<path fill=\"none\" stroke=\"white\" stroke-width=\"1\" d=\"";
  for (const auto& s : segs) svg << 'M' << num(sx(s.x0)) << ' ' << num(sy(s.y0)) << 'L' << num(sx(s.x1)) << ' ' << num(sy(s.y1));
  svg << "\"/>\n</svg>\n";
  write_text(out / "density.svg", svg.str());

  log << "grid " << grid << "x" << grid << " over [" << num(lo[0]) << ", " << num(hi[0]) << "] x [" << num(lo[1])
      << ", " << num(hi[1]) << "], mass " << num(p.sum() * hx * hy) << ", " << segs.size()
      << " boundary segments\n";
  return 0;
}

int cmd_check(const Options& o, std::ostream& log) {
  CheckOptions options;
  options.seed = o.seed.value_or(0);
  const auto results = run_checks(options);
  log << format_checks(results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
  log << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace vflow::cli
