#pragma once

// Infinite-armed Boltzmann bandit over system prompts.
//
// Explored arms are sampled with probability proportional to
// exp(-beta * mean_loss). A persistent exploration arm stands in for every
// prompt not yet tried; its loss estimate is the mean of the explored arms'
// mean losses. Drawing it means "synthesize a fresh prompt and pull that".
//
// An arm's pull_count counts invocations made with it. Loss observations are
// counted separately (loss_count): an invocation is scored later by a
// critique, an oracle, or a reviewer, and may be scored more than once. An
// arm with no observation yet is excluded from the exploration estimate and
// is sampled at that estimate.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace lmsub::bandit {

inline constexpr std::string_view kExplore = "EXPLORE";
inline constexpr double kDefaultExplorePrior = 0.5;

struct ArmStats {
  std::string arm_id;
  std::int64_t pull_count = 0;
  std::int64_t loss_count = 0;
  double loss_sum = 0.0;

  bool scored() const { return loss_count > 0; }
  // loss_sum / loss_count; 0 when unscored.
  double mean_loss() const;

  friend bool operator==(const ArmStats&, const ArmStats&) = default;
};

struct BanditState {
  std::string subroutine_id;
  std::vector<ArmStats> arms;
  std::int64_t trial_index = 0;
  double beta = 0.0;

  const ArmStats* find(std::string_view arm_id) const;
};

struct BetaSchedule {
  enum class Kind { kLinear, kConstant };

  Kind kind = Kind::kLinear;
  double start_value = 0.0;
  double end_value = 1.0;
  std::int64_t ramp_trials = 100;

  static BetaSchedule linear(double start, double end, std::int64_t ramp_trials);
  static BetaSchedule constant(double value);
};

struct ArmProbability {
  std::string arm_id;  // kExplore for the exploration arm
  double loss = 0.0;   // loss used in the Boltzmann weight
  double probability = 0.0;
};

// Explored arms in state order, then the exploration arm.
struct Distribution {
  std::vector<ArmProbability> entries;

  double probability(std::string_view arm_id) const;
  double explore_probability() const { return probability(kExplore); }
};

// Mean of the scored arms' mean losses, or `prior` when none are scored.
double explore_loss(std::span<const ArmStats> arms, double prior = kDefaultExplorePrior);

// Throws Error(kInvalidArgument) for a non-finite or negative beta.
Distribution sample_distribution(const BanditState& state, double prior = kDefaultExplorePrior);

// One categorical draw; returns an arm id or kExplore. Deterministic in seed.
std::string draw(const Distribution& distribution, std::uint64_t seed);
std::string draw(const BanditState& state, std::uint64_t seed, double prior = kDefaultExplorePrior);

// Throws Error(kOutOfRange) unless 0 <= loss <= 1.
void check_loss(double loss);

// Adds one loss observation to arm_id. Throws Error(kUnknownArm) or
// Error(kOutOfRange).
BanditState record_loss(BanditState state, std::string_view arm_id, double loss);

// Adds an arm (pull_count 0) if absent, then counts one pull.
BanditState record_pull(BanditState state, std::string_view arm_id);

double beta_at(const BetaSchedule& schedule, std::int64_t trial_index);

// Sum over explored arms and the exploration arm of Pr(x_i) * L_i.
double expected_loss(const BanditState& state, double prior = kDefaultExplorePrior);

}  // namespace lmsub::bandit
