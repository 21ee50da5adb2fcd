#include <algorithm>
#include <cstdio>
#include <exception>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "posfuse/errors.hpp"
#include "posfuse/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"posfuse: spatial prevalence models for anonymized survey locations"};
  app.require_subcommand(1);
  int threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool verbose = false;
  app.add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_flag("-v,--verbose", verbose, "report progress on stderr");

  std::string config_path;
  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"simulate", "simulate a world and two surveys"},
      {"build-schemes", "write integration schemes"},
      {"fit", "sample the posterior"},
      {"predict", "risk grids and areal summaries"},
      {"validate", "areal cross-validation score tables"},
      {"score", "score areal predictions against direct estimates"},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help)->add_option("config", config_path, "run config JSON")->required();

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = app.get_subcommands().front()->get_name();

  try {
    const auto config = posfuse::load_run_config(config_path);
    if (verbose) std::fprintf(stderr, "%s: config %s, seed %llu\n", cmd.c_str(), config.config_hash.c_str(),
                              static_cast<unsigned long long>(config.seed));
    if (cmd == "simulate") posfuse::cmd_simulate(config);
    else if (cmd == "build-schemes") posfuse::cmd_build_schemes(config, threads);
    else if (cmd == "fit") posfuse::cmd_fit(config, threads);
    else if (cmd == "predict") posfuse::cmd_predict(config);
    else if (cmd == "validate") posfuse::cmd_validate(config, threads);
    else if (cmd == "score") posfuse::cmd_score(config);
    if (verbose) std::fprintf(stderr, "%s: done, outputs in %s\n", cmd.c_str(), config.output_dir.string().c_str());
  } catch (const posfuse::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const posfuse::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const posfuse::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
