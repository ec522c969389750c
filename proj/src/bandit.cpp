#include "lmsub/bandit.hpp"

#include <algorithm>
#include <cmath>

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"

namespace lmsub::bandit {

double ArmStats::mean_loss() const {
  return loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
}

const ArmStats* BanditState::find(std::string_view arm_id) const {
  for (const auto& arm : arms) {
    if (arm.arm_id == arm_id) return &arm;
  }
  return nullptr;
}

BetaSchedule BetaSchedule::linear(double start, double end, std::int64_t ramp_trials) {
  if (start < 0 || end < 0) throw Error(ErrorCode::kInvalidArgument, "beta schedule values must be >= 0");
  if (ramp_trials <= 0) throw Error(ErrorCode::kInvalidArgument, "beta ramp must span at least one trial");
  return BetaSchedule{Kind::kLinear, start, end, ramp_trials};
}

BetaSchedule BetaSchedule::constant(double value) {
  if (value < 0) throw Error(ErrorCode::kInvalidArgument, "beta must be >= 0");
  return BetaSchedule{Kind::kConstant, value, value, 1};
}

double Distribution::probability(std::string_view arm_id) const {
  for (const auto& e : entries) {
    if (e.arm_id == arm_id) return e.probability;
  }
  return 0.0;
}

double explore_loss(std::span<const ArmStats> arms, double prior) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& arm : arms) {
    if (!arm.scored()) continue;
    total += arm.mean_loss();
    ++n;
  }
  return n == 0 ? prior : total / static_cast<double>(n);
}

Distribution sample_distribution(const BanditState& state, double prior) {
  if (!std::isfinite(state.beta) || state.beta < 0) {
    throw Error(ErrorCode::kInvalidArgument, "beta must be finite and >= 0");
  }
  const double explore = explore_loss(state.arms, prior);

  Distribution dist;
  dist.entries.reserve(state.arms.size() + 1);
  for (const auto& arm : state.arms) {
    dist.entries.push_back({arm.arm_id, arm.scored() ? arm.mean_loss() : explore, 0.0});
  }
  dist.entries.push_back({std::string(kExplore), explore, 0.0});

  // Shift by the smallest loss so the largest exponent is exactly zero.
  double min_loss = dist.entries.front().loss;
  for (const auto& e : dist.entries) min_loss = std::min(min_loss, e.loss);
  double total = 0.0;
  for (auto& e : dist.entries) {
    e.probability = std::exp(-state.beta * (e.loss - min_loss));
    total += e.probability;
  }
  for (auto& e : dist.entries) e.probability /= total;
  return dist;
}

std::string draw(const Distribution& distribution, std::uint64_t seed) {
  const double u = unit_interval(mix64(seed));
  double cumulative = 0.0;
  for (const auto& e : distribution.entries) {
    cumulative += e.probability;
    if (u < cumulative) return e.arm_id;
  }
  // Rounding left u above the final cumulative sum; take the last entry
  // with positive mass.
  for (auto it = distribution.entries.rbegin(); it != distribution.entries.rend(); ++it) {
    if (it->probability > 0) return it->arm_id;
  }
  return std::string(kExplore);
}

std::string draw(const BanditState& state, std::uint64_t seed, double prior) {
  return draw(sample_distribution(state, prior), seed);
}

void check_loss(double loss) {
  if (!(loss >= 0.0 && loss <= 1.0)) {
    throw Error(ErrorCode::kOutOfRange, "loss " + std::to_string(loss) + " outside [0, 1]");
  }
}

BanditState record_loss(BanditState state, std::string_view arm_id, double loss) {
  check_loss(loss);
  auto it = std::find_if(state.arms.begin(), state.arms.end(),
                         [&](const ArmStats& a) { return a.arm_id == arm_id; });
  if (it == state.arms.end()) throw Error(ErrorCode::kUnknownArm, "unknown arm " + std::string(arm_id));
  it->loss_count += 1;
  it->loss_sum += loss;
  return state;
}

BanditState record_pull(BanditState state, std::string_view arm_id) {
  auto it = std::find_if(state.arms.begin(), state.arms.end(),
                         [&](const ArmStats& a) { return a.arm_id == arm_id; });
  if (it == state.arms.end()) {
    state.arms.push_back(ArmStats{std::string(arm_id), 0, 0, 0.0});
    it = std::prev(state.arms.end());
  }
  it->pull_count += 1;
  state.trial_index += 1;
  return state;
}

double beta_at(const BetaSchedule& schedule, std::int64_t trial_index) {
  if (trial_index < 0) throw Error(ErrorCode::kInvalidArgument, "trial index must be >= 0");
  if (schedule.kind == BetaSchedule::Kind::kConstant) return schedule.start_value;
  if (trial_index >= schedule.ramp_trials) return schedule.end_value;
  const double t = static_cast<double>(trial_index) / static_cast<double>(schedule.ramp_trials);
  return schedule.start_value + (schedule.end_value - schedule.start_value) * t;
}

double expected_loss(const BanditState& state, double prior) {
  const auto dist = sample_distribution(state, prior);
  double total = 0.0;
  for (const auto& e : dist.entries) total += e.probability * e.loss;
  return total;
}

}  // namespace lmsub::bandit
