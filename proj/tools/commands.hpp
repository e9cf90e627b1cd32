#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mfcli {

// Exit codes shared by every subcommand.
constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;  // selftest group failed
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

/// Flags common to all subcommands plus the per-command ones. Unset optionals
/// fall back to the config file, then to built-in defaults.
struct Options {
  std::string command;
  std::vector<std::string> argv;

  std::optional<std::string> variant;
  std::optional<std::string> attention;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<double> tau;
  std::optional<double> theta;
  std::optional<int> window;

  std::optional<std::int64_t> height;
  std::optional<std::int64_t> width;

  // match
  std::string image_a, image_b;
  std::string checkpoint;

  // train
  std::optional<int> steps;
  std::optional<double> lr;

  // eval
  std::string manifest;
  std::vector<std::string> matches;

  // bench
  bool no_runtime = false;
  int repeats = 1;

  // gen
  int count = 4;
  bool exact_matches = false;

  // selftest
  bool inject_fault = false;
  bool quick = false;
};

int cmd_selftest(const Options& o);
int cmd_shapes(const Options& o);
int cmd_match(const Options& o);
int cmd_train(const Options& o);
int cmd_eval(const Options& o);
int cmd_bench(const Options& o);
int cmd_gen(const Options& o);

}  // namespace mfcli
