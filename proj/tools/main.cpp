#include <iostream>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "vflow/cli.hpp"
#include "vflow/error.hpp"

namespace vflow::cli {

// Exit codes: 0 success, 1 failed self-check, 2 usage or input error,
// 3 runtime failure (divergence, I/O).
int run(int argc, char** argv) {
  CLI::App app{"Semi-discrete normalizing flows with Voronoi tessellations"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  int samples = 0, grid = 0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "configuration file (key = value lines)");
    sub->add_option("--checkpoint", o.checkpoint, "checkpoint JSON");
    sub->add_option("--out", o.out, "output directory");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--samples", samples, "draws per example (eval) or rows (sample)");
    sub->add_option("--grid", grid, "grid resolution per axis (plot-density)");
  };
  CLI::App* train = app.add_subcommand("train", "train a model from a config");
  CLI::App* eval = app.add_subcommand("eval", "score a dataset under a checkpoint");
  CLI::App* sample = app.add_subcommand("sample", "draw rows from a checkpoint");
  CLI::App* plot = app.add_subcommand("plot-density", "grid density, SVG heatmap and cell boundaries");
  CLI::App* check = app.add_subcommand("check", "run the invariant suite");
  for (CLI::App* sub : {train, eval, sample, plot, check}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  CLI::App* sub = app.get_subcommands().front();
  if (sub->count("--seed")) o.seed = seed;
  if (sub->count("--samples")) o.samples = samples;
  if (sub->count("--grid")) o.grid = grid;

  try {
    if (const int threads = thread_cap()) Eigen::setNbThreads(threads);
    if (sub == train) return cmd_train(o, std::cout);
    if (sub == eval) return cmd_eval(o, std::cout);
    if (sub == sample) return cmd_sample(o, std::cout);
    if (sub == plot) return cmd_plot_density(o, std::cout);
    return cmd_check(o, std::cout);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.code()) {
      case Errc::DivergedLoss:
      case Errc::Io:
        return 3;
      default:
        return 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace vflow::cli

int main(int argc, char** argv) { return vflow::cli::run(argc, argv); }
