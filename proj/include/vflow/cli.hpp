#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vflow/data.hpp"
#include "vflow/dequant.hpp"
#include "vflow/mixture.hpp"

namespace vflow::cli {

enum class Task { Dequant, Mixture };

/// Where rows come from and how they are split.
///   source = csv          path (categorical for dequant, numeric for mixture)
///   source = nursery      the full Nursery attribute product
///   source = quantized    synthetic 2D shape, `bins` bins per coordinate
///   source = continuous   synthetic 2D shape
///   source = categorical  one variable with exact counts round(n * probs[j])
struct DataSpec {
  std::string source = "csv";
  std::string path;
  std::string shape = "checkerboard";
  int bins = 8;
  std::size_t n = 20000;
  std::uint64_t seed = 0;
  std::vector<double> probs;
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t split_seed = 0;
};

struct Config {
  Task task = Task::Dequant;
  DataSpec data;
  DequantConfig dequant;
  /// Initial log std of every dequantization base Gaussian.
  double dequant_base_log_std = 0.0;
  FlowConfig density{8, {128, 128}, Activation::Swish, 5.0};
  MixtureConfig mixture;
  TrainConfig train;
  std::string out_dir = "out";
  /// Default S for eval.
  int eval_samples = 16;
  /// Split scored by eval: train, val, test or all.
  std::string eval_split = "test";
  /// Plot window {x_lo, x_hi, y_lo, y_hi}; empty: the model's natural box.
  std::vector<double> plot_bounds;
};

/// Flat `key = value` lines with dotted keys; `#` starts a comment. Every key
/// is checked and every value validated before anything runs.
Config parse_config(const std::string& text);
Config load_config(const std::string& path);
/// Every key with its canonical value; parse_config(format_config(c)) == c.
std::map<std::string, std::string> config_entries(const Config& config);
std::string format_config(const Config& config);
Config config_from_entries(const std::map<std::string, std::string>& entries);

/// Rows of the configured source, already encoded, plus the split.
struct Dataset {
  DiscreteTable table;  // dequant
  Matrix points;        // mixture
  Split split;

  std::size_t rows() const;
};
Dataset load_dataset(const Config& config);

/// Re-encodes raw CSV rows (header first) through a stored vocabulary.
/// Columns are matched by name; dropped columns are ignored. Unknown columns
/// or values raise VocabMismatch.
DiscreteTable encode_with_vocab(const std::vector<std::vector<std::string>>& rows,
                                const std::vector<std::string>& columns,
                                const std::vector<std::vector<std::string>>& vocab);

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int version = kCheckpointVersion;
  std::map<std::string, std::string> config;
  int dim = 0;  // data dimension of a mixture model
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> vocab;
  std::vector<std::string> dropped;
  std::vector<std::pair<std::string, Matrix>> params;
  std::vector<EpochRecord> history;
};

std::string dump_checkpoint(const Checkpoint& checkpoint);
/// Throws CheckpointInvalid on malformed documents or a newer version.
Checkpoint parse_checkpoint(const std::string& text);
void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// A trained model rebuilt from a checkpoint.
struct LoadedModel {
  Config config;
  Checkpoint checkpoint;
  ad::ParamStore store;
  DequantModel dequant;
  JointDensity density;
  MixtureModel mixture;
};
LoadedModel load_model(const std::string& path);

/// Result of training from a config; the store holds the best-validation
/// parameters even when training diverged.
struct TrainedModel {
  Config config;
  Dataset data;
  ad::ParamStore store;
  DequantModel dequant;
  JointDensity density;
  MixtureModel mixture;
  TrainReport report;
  std::vector<EpochRecord> history;
  bool diverged = false;
  std::string failure;
};
TrainedModel train_from_config(const Config& config,
                               const std::function<void(const EpochRecord&)>& on_epoch = {});
Checkpoint make_checkpoint(const TrainedModel& trained);

/// Flag values; unset optionals fall back to the config.
struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> samples;
  std::optional<int> grid;
};

/// Exclusive sentinel file in an output directory, removed on destruction.
class OutputLock {
 public:
  explicit OutputLock(const std::string& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::string path_;
};

inline constexpr const char* kLockName = ".vflow.lock";

/// Each command writes its artifacts under the output directory and reports
/// progress to `log`. Errors propagate as vflow::Error.
int cmd_train(const Options& options, std::ostream& log);
int cmd_eval(const Options& options, std::ostream& log);
int cmd_sample(const Options& options, std::ostream& log);
int cmd_plot_density(const Options& options, std::ostream& log);
int cmd_check(const Options& options, std::ostream& log);

/// Parses argv and dispatches; returns the process exit code.
int run(int argc, char** argv);

/// VF_THREADS, validated; 0 when unset.
int thread_cap();

}  // namespace vflow::cli
