#ifndef PARPROBE_CLI_HPP_
#define PARPROBE_CLI_HPP_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace parprobe::cli {

/// Everything a subcommand may read. Flags override values from the INI
/// file given with --config.
struct RunConfig {
  std::string config_file;
  std::uint64_t seed = 1234;
  std::string out = "runs";
  std::string run_dir;  // overrides out/<config hash>
  std::size_t jobs = 1;

  std::string task = "rhetorical";
  std::string model = "none";
  std::string variant = "base";
  std::string scorer = "distance";
  std::string layer = "all_layers";
  std::string head = "logreg";

  std::string arn;
  std::string arn_scores;
  double threshold = 0.9;
  std::string asp_dir;
  std::string asp_annotations;
  std::string litbank;
  std::string corpus;
  std::string pools;
  std::string store;
  std::string annotations;

  std::size_t x_pos = 4;
  std::size_t y_neg = 16;
  std::size_t n_neg = 18;
  std::size_t folds = 5;
  double val_ratio = 0.1;
  double test_ratio = 0.1;

  double lr = 1e-3;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::size_t patience = 5;
  std::size_t hidden = 256;
  std::size_t proj = 256;

  std::string provider = "oracle";
  std::string endpoint;
  std::string provider_model;
  std::string auth_env;
  std::size_t max_retries = 3;
  double backoff = 2.0;
  double timeout = 60.0;
  std::size_t concurrency = 4;
  double constant = 5.0;
  std::string replay;

  std::size_t pairs = 0;  // 0 = per-task default
  std::string methods = "all";

  std::vector<std::string> inputs;
};

/// Invalid configuration; `field` names the offending key.
struct ConfigError {
  std::string field;
  std::string message;
};

/// Hash over the settings and the content of every input file. Output
/// locations and parallelism knobs are excluded.
std::string config_hash(const RunConfig& config);

/// Runs one subcommand. Returns 0 on success, 2 on usage errors and 1 on
/// configuration or runtime failures.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

}  // namespace parprobe::cli

#endif  // PARPROBE_CLI_HPP_
