#pragma once

// Critique subroutines, the self-critique loop, and reviewer feedback.
//
// Every target subroutine is paired with a critique whose input is the
// target's (input, output) and whose output is an explanation plus one
// bounded rating per dimension. Ratings map to a loss in [0, 1]; critiques
// themselves are scored against reviewer ratings by squared difference.

#include <optional>
#include <string>
#include <vector>

#include "lmsub/engine.hpp"

namespace lmsub {

struct RatingDimension {
  std::string name;
  std::int64_t lo = 0;
  std::int64_t hi = 10;
  std::string doc;
};

Json dimensions_to_json(const std::vector<RatingDimension>& dims);
std::vector<RatingDimension> dimensions_from_json(const Json& j);

// Throws kSchemaInvalid for an empty dimension list, a dimension named
// "explanation", or lo >= hi.
SubroutineSpec derive_critique_spec(const SubroutineSpec& target, const std::vector<RatingDimension>& dims);

// Critique input schema for given target schemas (used with overrides).
Schema critique_input_schema(const Schema& target_input, const Schema& target_output);

// Mean over dimensions of (hi - r) / (hi - lo). Throws kInvalidArgument when
// a dimension is missing, not an integer, or out of bounds, or an unknown
// key other than "explanation" appears.
double rating_to_loss(const Json& ratings, const std::vector<RatingDimension>& dims);

// (sme_loss - derived_loss)^2, rounded to the nearest multiple of 1e-12.
double critique_loss(double sme_loss, double derived_loss);

struct CritiquePair {
  SubroutineHandle target;
  SubroutineHandle critique;
  std::vector<RatingDimension> dims;
};

CritiquePair declare_with_critique(Engine& engine, SubroutineSpec target, std::vector<RatingDimension> dims);

struct LoopConfig {
  int max_iters = 3;
  double threshold = 0.1;
};

enum class LoopExit { kThreshold, kNoImprovement, kMaxIters, kCritiqueFailed, kCandidateFailed };
std::string_view to_string(LoopExit exit);

struct LoopIteration {
  Invocation candidate;
  std::optional<Invocation> critique;
  std::optional<double> loss;
};

struct LoopResult {
  std::vector<LoopIteration> iterations;
  int selected = 0;  // 1-based iteration number
  LoopExit exit = LoopExit::kMaxIters;

  const LoopIteration& best() const { return iterations.at(static_cast<std::size_t>(selected - 1)); }
  Json to_json() const;
};

struct LoopOptions {
  LoopConfig config;
  std::string key_prefix;  // idempotency keys <prefix>/iter<i>/target and /critique
  std::optional<std::string> batch_id;
  std::optional<Schema> input_schema;  // target overrides; the critique follows
  std::optional<Schema> output_schema;
};

// Generate, critique, revise. Exit checks after each scored iteration, in
// order: loss <= threshold; no strict improvement over the previous
// iteration; max_iters reached. Throws kLoopFailed when the first candidate
// fails.
LoopResult self_critique_loop(Engine& engine, const CritiquePair& pair, const Json& input,
                              const std::vector<std::string>& parents, const LoopOptions& options);

struct SmeSubmission {
  std::string invocation_id;
  Json ratings;
  std::optional<std::string> reviewer_id;
  std::optional<std::string> submission_id;
  std::string rationale;
  bool late = false;
};

// Applies a reviewer's ratings atomically: the rated invocation's arm gets
// the rating loss and every critique of that invocation gets the squared
// difference to its own derived loss. Throws kNotFound or kInvalidArgument.
FeedbackCommit propagate_sme_feedback(Store& store, const SmeSubmission& submission);
FeedbackCommit propagate_sme_feedback(Store& store, const SmeSubmission& submission,
                                      const std::vector<RatingDimension>& dims);

}  // namespace lmsub
