#include <doctest.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "support.hpp"
#include "vflow/cli.hpp"

using namespace vflow;
using namespace vflow::cli;
using testing::error_code;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vflow_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

std::string toy_config(const fs::path& out, int epochs = 3, const std::string& extra = "", int dim = 2) {
  return "task = dequant\n"
         "data.source = categorical\n"
         "data.probs = 0.9, 0.1\n"
         "data.n = 2000\n"
         "dequant.dim = " + std::to_string(dim) + "\n"
         "dequant.blocks = 2\n"
         "dequant.hidden = 16,16\n"
         "density.blocks = 2\n"
         "density.hidden = 16,16\n"
         "train.batch_size = 128\n"
         "train.epochs = " + std::to_string(epochs) + "\n"
         "output.dir = " + out.string() + "\n" + extra;
}

// Trains the toy config into `dir` and returns the checkpoint path.
fs::path train_toy(const fs::path& dir, int epochs = 3, const std::string& extra = "", int dim = 2) {
  spit(dir / "toy.cfg", toy_config(dir / "run", epochs, extra, dim));
  Options o;
  o.config = (dir / "toy.cfg").string();
  std::ostringstream log;
  REQUIRE(cmd_train(o, log) == 0);
  return dir / "run" / "checkpoint.json";
}

std::vector<std::vector<double>> read_metrics(const fs::path& p) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(std::strtod(cell.c_str(), nullptr));
    rows.push_back(row);
  }
  return rows;
}

nlohmann::json eval_json(const fs::path& ck, const fs::path& out, int S, std::uint64_t seed,
                         const std::string& config = "") {
  Options o;
  o.checkpoint = ck.string();
  o.out = out.string();
  o.samples = S;
  o.seed = seed;
  o.config = config;
  std::ostringstream log;
  REQUIRE(cmd_eval(o, log) == 0);
  return nlohmann::json::parse(slurp(out / "eval.json"));
}

}  // namespace

TEST_CASE("config: defaults, comments and dotted keys") {
  const Config c = parse_config(
      "# a comment\n"
      "task = mixture   # trailing comment\n"
      "\n"
      "data.source = continuous\n"
      "data.shape = 8gaussians\n"
      "mixture.components = 12\n"
      "mixture.hidden = 32, 32\n"
      "train.lr = 5e-4\n");
  CHECK(c.task == Task::Mixture);
  CHECK(c.data.shape == "8gaussians");
  CHECK(c.mixture.components == 12);
  CHECK(c.mixture.hidden == std::vector<int>{32, 32});
  CHECK(c.train.adam.lr == 5e-4);
  CHECK(c.train.batch_size == TrainConfig{}.batch_size);
  CHECK(c.mixture.base_std == 0.2);
}

TEST_CASE("config: the canonical form round-trips") {
  const Config c = parse_config(toy_config("/tmp/x", 7, "dequant.base_dof = 1\nplot.bounds = -1,1,-2,2\n"));
  const std::string text = format_config(c);
  CHECK(format_config(parse_config(text)) == text);
  CHECK(config_entries(config_from_entries(config_entries(c))) == config_entries(c));
}

TEST_CASE("config: every problem is rejected before any work") {
  auto code = [](const std::string& text) { return error_code([&] { parse_config(text); }); };
  CHECK(code("bogus.key = 1\n") == Errc::ConfigInvalid);
  CHECK(code("task = dequant\ntask = dequant\n") == Errc::ConfigInvalid);
  CHECK(code("no equals sign\n") == Errc::ConfigInvalid);
  CHECK(code("train.lr = fast\n") == Errc::ConfigInvalid);
  CHECK(code("train.lr = -1\n") == Errc::ConfigInvalid);
  CHECK(code("train.epochs = 2.5\n") == Errc::ConfigInvalid);
  CHECK(code("dequant.shared_flow = yes\n") == Errc::ConfigInvalid);
  CHECK(code("dequant.activation = relu\n") == Errc::ConfigInvalid);
  CHECK(code("task = regression\n") == Errc::ConfigInvalid);
  CHECK(code("data.source = csv\n") == Errc::ConfigInvalid);  // no path
  CHECK(code("data.source = categorical\ndata.probs = 0.5,0.6\n") == Errc::ConfigInvalid);
  CHECK(code("data.path = a.csv\ndata.train = 0.5\n") == Errc::ConfigInvalid);
  CHECK(code("task = mixture\ndata.source = nursery\n") == Errc::ConfigInvalid);
  CHECK(code("data.source = continuous\n") == Errc::ConfigInvalid);
  CHECK(code("data.path = a.csv\nplot.bounds = 1,0,0,1\n") == Errc::ConfigInvalid);
  CHECK(code("data.path = a.csv\ndequant.hidden = \n") == Errc::ConfigInvalid);
  CHECK(!code("data.path = a.csv\n"));
}

TEST_CASE("checkpoint: save, load, save is byte-identical and evaluates identically") {
  const fs::path dir = fresh_dir("roundtrip");
  const Config c = parse_config(toy_config(dir / "run"));
  const Dataset ds = load_dataset(c);
  Rng rng(3);
  ad::ParamStore store;
  const DequantModel model = DequantModel::create(store, ds.table.cardinalities, c.dequant, rng);
  const JointDensity density = JointDensity::create(store, model.total_dim(), c.density, rng);
  // Perturb so no tensor keeps its tidy initial values.
  std::normal_distribution<double> normal(0.0, 0.1);
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.name(ad::ParamId{i}).find(".tess.") != std::string::npos) continue;
    ad::Tensor& t = store.value(ad::ParamId{i});
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] += normal(rng);
  }

  Checkpoint ck;
  ck.config = config_entries(c);
  ck.columns = ds.table.columns;
  ck.vocab = ds.table.vocab;
  for (std::size_t i = 0; i < store.size(); ++i)
    ck.params.emplace_back(store.name(ad::ParamId{i}), store.value(ad::ParamId{i}));
  ck.history = {{1, 0.5, 0.25, 1.5}, {2, 1.0 / 3.0, 0.1, 2e-7}};
  const fs::path path = dir / "ck.json";
  save_checkpoint(ck, path.string());
  const std::string first = slurp(path);
  save_checkpoint(load_checkpoint(path.string()), (dir / "again.json").string());
  CHECK(slurp(dir / "again.json") == first);

  const LoadedModel m = load_model(path.string());
  const CodeMatrix codes = ds.table.codes.topRows(64);
  Rng a(9), b(9);
  const Vector before = elbo(store, model, density, codes, 4, a);
  const Vector after = elbo(m.store, m.dequant, m.density, codes, 4, b);
  CHECK((before - after).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("checkpoint: newer schema versions and malformed documents fail loudly") {
  const fs::path dir = fresh_dir("version");
  const fs::path ck = train_toy(dir, 1);
  std::string text = slurp(ck);
  const auto at = text.find("\"version\": 1");
  REQUIRE(at != std::string::npos);
  text.replace(at, 12, "\"version\": 2");
  CHECK(error_code([&] { parse_checkpoint(text); }) == Errc::CheckpointInvalid);
  CHECK(error_code([&] { parse_checkpoint("{\"format\": \"something else\"}"); }) == Errc::CheckpointInvalid);
  CHECK(error_code([&] { parse_checkpoint("[1, 2"); }) == Errc::CheckpointInvalid);
  CHECK(error_code([&] { load_checkpoint((dir / "missing.json").string()); }) == Errc::Io);
}

TEST_CASE("train: toy smoke run, metrics and determinism") {
  const fs::path dir = fresh_dir("train");
  const auto start = std::chrono::steady_clock::now();
  const fs::path ck = train_toy(dir, 4);
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() < 60.0);
  const auto rows = read_metrics(dir / "run" / "metrics.csv");
  REQUIRE(rows.size() == 4);
  CHECK(rows.front().size() == 4);
  const std::string params = slurp(ck);
  CHECK(fs::exists(dir / "run" / "summary.json"));
  CHECK(!fs::exists(dir / "run" / kLockName));

  // Same seed: identical metrics and parameters.
  fs::rename(dir / "run", dir / "first");
  train_toy(dir, 4);
  const auto again = read_metrics(dir / "run" / "metrics.csv");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(again[i][1] == rows[i][1]);
    CHECK(std::abs(again[i][2] - rows[i][2]) <= 1e-10);
  }
  const auto strip_history = [](const std::string& s) { return s.substr(0, s.find("\"history\"")); };
  CHECK(strip_history(slurp(dir / "run" / "checkpoint.json")) == strip_history(params));
}

TEST_CASE("eval: report fields, determinism, and the bound tightens with S") {
  const fs::path dir = fresh_dir("eval");
  const fs::path ck = train_toy(dir, 10);
  const auto one = eval_json(ck, dir / "e1", 1, 5);
  for (const char* key : {"mean_nll", "stderr", "n", "S", "seed"}) CHECK(one.contains(key));
  CHECK(one["n"] == 200);
  CHECK(one["S"] == 1);
  CHECK(slurp(dir / "e1" / "eval.json") == slurp((eval_json(ck, dir / "e1b", 1, 5), dir / "e1b" / "eval.json")));
  const auto many = eval_json(ck, dir / "e64", 64, 5);
  CHECK(many["mean_nll"].get<double>() <= one["mean_nll"].get<double>() + 3 * one["stderr"].get<double>());
}

TEST_CASE("eval: the validation split reproduces the training log's best value") {
  const fs::path dir = fresh_dir("eval_val");
  const fs::path ck = train_toy(dir, 10, "train.eval_samples = 16\neval.split = val\n");
  const auto rows = read_metrics(dir / "run" / "metrics.csv");
  double best = 1e300;
  for (const auto& r : rows) best = std::min(best, r[2]);
  spit(dir / "val.cfg", toy_config(dir / "unused", 10, "eval.split = val\n"));
  const auto report = eval_json(ck, dir / "ev", 16, 11, (dir / "val.cfg").string());
  const double sigma = report["stderr"].get<double>();
  CHECK(std::abs(report["mean_neg_elbo"].get<double>() - best) <= 3 * sigma + 1e-3);
}

TEST_CASE("eval: values outside the stored vocabulary are rejected") {
  const fs::path dir = fresh_dir("vocab");
  const fs::path ck = train_toy(dir, 1);
  spit(dir / "bad.csv", "y\n0\n1\n7\n");
  spit(dir / "bad.cfg", "data.source = csv\ndata.path = " + (dir / "bad.csv").string() + "\neval.split = all\n");
  Options o;
  o.checkpoint = ck.string();
  o.config = (dir / "bad.cfg").string();
  o.out = (dir / "e").string();
  std::ostringstream log;
  CHECK(error_code([&] { cmd_eval(o, log); }) == Errc::VocabMismatch);
  spit(dir / "good.csv", "other,y\nz,1\nz,0\n");
  spit(dir / "good.cfg", "data.source = csv\ndata.path = " + (dir / "good.csv").string() + "\neval.split = all\n");
  o.config = (dir / "good.cfg").string();
  CHECK(cmd_eval(o, log) == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "e" / "eval.json"))["n"] == 2);
}

TEST_CASE("sample: decoded values, determinism and learned frequencies") {
  const fs::path dir = fresh_dir("sample");
  const fs::path ck = train_toy(dir, 60, "train.patience = 0\n");
  Options o;
  o.checkpoint = ck.string();
  o.samples = 4000;
  o.seed = 21;
  o.out = (dir / "s1").string();
  std::ostringstream log;
  REQUIRE(cmd_sample(o, log) == 0);
  o.out = (dir / "s2").string();
  REQUIRE(cmd_sample(o, log) == 0);
  const std::string text = slurp(dir / "s1" / "samples.csv");
  CHECK(text == slurp(dir / "s2" / "samples.csv"));

  const LoadedModel m = load_model(ck.string());
  const DiscreteTable t = encode_with_vocab(parse_csv_rows(text), m.checkpoint.columns, m.checkpoint.vocab);
  REQUIRE(t.rows() == 4000);
  const double ones = (t.codes.col(0).array() == 1).cast<double>().sum();
  const double sigma = std::sqrt(4000 * 0.9 * 0.1);
  CHECK(std::abs(ones - 400.0) <= 3 * sigma);
}

TEST_CASE("plot-density: normalization, bisector boundary, byte stability") {
  const fs::path dir = fresh_dir("plot");
  std::string csv = "x0,x1\n";
  for (int i = 0; i < 20; ++i) csv += i % 2 ? "1,0\n" : "-1,0\n";
  spit(dir / "two.csv", csv);
  spit(dir / "mix.cfg",
       "task = mixture\n"
       "data.source = csv\n"
       "data.path = " + (dir / "two.csv").string() + "\n"
       "mixture.components = 2\n"
       "mixture.comp_blocks = 1\n"
       "mixture.hidden = 8\n"
       "mixture.base_std = 0.5\n"
       "train.epochs = 0\n"
       "output.dir = " + (dir / "run").string() + "\n");
  Options o;
  o.config = (dir / "mix.cfg").string();
  std::ostringstream log;
  REQUIRE(cmd_train(o, log) == 0);

  Options p;
  p.checkpoint = (dir / "run" / "checkpoint.json").string();
  p.grid = 300;
  p.out = (dir / "p1").string();
  REQUIRE(cmd_plot_density(p, log) == 0);
  p.out = (dir / "p2").string();
  REQUIRE(cmd_plot_density(p, log) == 0);
  for (const char* f : {"density.csv", "density.svg", "boundary.csv"})
    CHECK(slurp(dir / "p1" / f) == slurp(dir / "p2" / f));

  const LoadedModel m = load_model(p.checkpoint);
  const Tessellation t = m.mixture.tessellation().materialize(m.store);
  const double hx = (t.box_hi()[0] - t.box_lo()[0]) / 300, hy = (t.box_hi()[1] - t.box_lo()[1]) / 300;
  double mass = 0.0;
  std::istringstream grid(slurp(dir / "p1" / "density.csv"));
  std::string line, cell;
  while (std::getline(grid, line)) {
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) mass += std::strtod(cell.c_str(), nullptr);
  }
  CHECK(mass * hx * hy == doctest::Approx(1.0).epsilon(2e-2));

  // Anchors at (-1, 0) and (1, 0): the boundary is the line x = 0.
  const auto rows = parse_csv_rows(slurp(dir / "p1" / "boundary.csv"));
  REQUIRE(rows.size() > 100);
  for (std::size_t r = 1; r < rows.size(); ++r) CHECK(std::abs(std::stod(rows[r][0])) <= hx);
}

TEST_CASE("plot-density needs a two-dimensional model") {
  const fs::path dir = fresh_dir("plot3");
  const fs::path ck = train_toy(dir, 1, "", 3);
  Options o;
  o.checkpoint = ck.string();
  std::ostringstream log;
  CHECK(error_code([&] { cmd_plot_density(o, log); }) == Errc::NotTwoDimensional);
}

TEST_CASE("output directories are locked by a sentinel file") {
  const fs::path dir = fresh_dir("lock");
  const fs::path ck = train_toy(dir, 1);
  spit(dir / "run" / kLockName, "");
  Options o;
  o.checkpoint = ck.string();
  std::ostringstream log;
  CHECK(error_code([&] { cmd_eval(o, log); }) == Errc::Io);
  fs::remove(dir / "run" / kLockName);
  CHECK(cmd_eval(o, log) == 0);
  CHECK(!fs::exists(dir / "run" / kLockName));
  {
    const OutputLock held(dir.string());
    CHECK(error_code([&] { OutputLock second(dir.string()); }) == Errc::Io);
  }
  CHECK(!fs::exists(dir / kLockName));
}

TEST_CASE("VF_THREADS is validated") {
  ::setenv("VF_THREADS", "2", 1);
  CHECK(thread_cap() == 2);
  ::setenv("VF_THREADS", "zero", 1);
  CHECK(error_code([] { thread_cap(); }) == Errc::ConfigInvalid);
  ::unsetenv("VF_THREADS");
  CHECK(thread_cap() == 0);
}

TEST_CASE("check command prints a passing table") {
  Options o;
  o.seed = 1;
  std::ostringstream log;
  CHECK(cmd_check(o, log) == 0);
  CHECK(log.str().find("PASS") != std::string::npos);
  CHECK(log.str().find("FAIL") == std::string::npos);
}
