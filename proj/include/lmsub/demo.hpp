#pragma once

// Rare-letters bandit demonstration: a counting subroutine whose answers are
// checked against a brute-force oracle, with 0/1 losses fed back to the
// bandit after every trial.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lmsub/engine.hpp"

namespace lmsub::demo {

// Whitespace-delimited words containing any of `letters`, case-insensitive.
int rare_letters_oracle(std::string_view sentence, std::string_view letters = "QWXZ");

const std::vector<std::string>& pangram_pool();

SubroutineSpec rare_letters_spec(std::string_view letters = "QWXZ");

// Wrap-mode Gaussian smoothing with a normalized kernel truncated at 4 sigma.
std::vector<double> gaussian_smooth(const std::vector<double>& xs, double sigma);

struct DemoConfig {
  int trials = 100;
  bandit::BetaSchedule schedule = bandit::BetaSchedule::linear(0.0, 1.0, 100);
  std::uint64_t seed = 0;
  std::string letters = "QWXZ";
  double sigma = 15.0;
};

struct DemoTrial {
  int trial = 0;
  std::string sentence;
  std::string invocation_id;
  std::string arm_id;
  int arm_index = 0;  // order of first use
  double beta = 0.0;
  int expected = 0;
  std::optional<std::int64_t> answer;  // absent when the invocation failed
  double loss = 0.0;
};

struct DemoResult {
  std::string subroutine_id;
  std::vector<DemoTrial> trials;
  std::vector<double> smoothed_loss;
  std::vector<std::string> arm_ids;      // by arm_index
  std::vector<std::string> arm_prompts;  // by arm_index

  double mean_loss(std::size_t from, std::size_t to) const;
  // Writes loss_trace.csv, arm_trace.csv, arms.json, loss.svg, arms.svg.
  // Output depends only on the result, so repeated runs are byte-identical.
  void write(const std::filesystem::path& dir) const;
};

// Runs against the engine's store and backend.
DemoResult rare_letters_demo(Engine& engine, const DemoConfig& config);

// Fresh in-memory store and an engine seeded from config.seed.
DemoResult rare_letters_demo(Backend& backend, const DemoConfig& config);

}  // namespace lmsub::demo
