#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "poolnet/adam.hpp"
#include "poolnet/dataset.hpp"

// Command-line front end. `run` is the whole program minus process exit, so
// tests can drive it in-process.
namespace poolnet::cli {

inline constexpr std::uint64_t kDefaultSeed = 7;

enum ExitCode : int { kSuccess = 0, kPartialFailure = 1, kInvalidInput = 2 };

// Flat key=value settings; '#' starts a comment. Flags override file values.
struct Config {
  std::uint64_t seed = kDefaultSeed;
  double threshold = data::kDefaultSuccessThreshold;  // label: registered fraction
  double accept_threshold = 0.5;                      // predict: probability
  std::size_t image_side = 64;
  std::vector<std::size_t> channels{16, 32, 64, 64};
  std::size_t sequence_length = 10;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  double split_ratio = 0.9;

  std::size_t pretrain_batch_size = 64;
  std::size_t pretrain_epochs = 1;
  AdamHyperparameters pretrain_adam;
  double pretrain_margin = 0.0;
  double pretrain_tau = 0.5;
  std::size_t pretrain_eval_pairs = 1024;

  std::size_t train_batch_size = 16;
  AdamHyperparameters train_adam;
  std::size_t train_max_steps = 1500;
  std::size_t train_eval_every = 25;
  std::size_t train_patience = 8;
  double train_min_delta = 1e-4;

  // Throws ConfigError for unknown keys and unparsable values.
  void set(const std::string& key, const std::string& value);
  // Throws ConfigError when an invariant is broken.
  void validate() const;
};

// Throws ParseError for lines without '=', ConfigError for bad keys/values.
Config parse_config(const std::string& text, const std::string& origin, Config base = {});
Config load_config(const std::string& path, Config base = {});

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace poolnet::cli
