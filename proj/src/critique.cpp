#include "lmsub/critique.hpp"

#include <cmath>

#include "lmsub/error.hpp"

namespace lmsub {

Json dimensions_to_json(const std::vector<RatingDimension>& dims) {
  Json out = Json::array();
  for (const auto& d : dims) out.push_back({{"name", d.name}, {"lo", d.lo}, {"hi", d.hi}, {"doc", d.doc}});
  return out;
}

std::vector<RatingDimension> dimensions_from_json(const Json& j) {
  std::vector<RatingDimension> out;
  for (const auto& d : j) {
    out.push_back({d.at("name").get<std::string>(), d.at("lo").get<std::int64_t>(), d.at("hi").get<std::int64_t>(),
                   d.value("doc", std::string())});
  }
  return out;
}

Schema critique_input_schema(const Schema& target_input, const Schema& target_output) {
  return Schema({FieldSpec::record("input", target_input.fields(), "the subroutine's input"),
                 FieldSpec::record("output", target_output.fields(), "the subroutine's output")});
}

SubroutineSpec derive_critique_spec(const SubroutineSpec& target, const std::vector<RatingDimension>& dims) {
  if (dims.empty()) throw Error(ErrorCode::kSchemaInvalid, target.name + ": critique needs at least one dimension");
  std::vector<FieldSpec> out{FieldSpec::text("explanation", "reasoning behind the ratings")};
  for (const auto& d : dims) {
    if (d.name == "explanation") {
      throw Error(ErrorCode::kSchemaInvalid, "rating dimension may not be named explanation");
    }
    if (d.lo >= d.hi) throw Error(ErrorCode::kSchemaInvalid, "rating dimension " + d.name + " needs lo < hi");
    out.push_back(FieldSpec::bounded(d.name, d.lo, d.hi, d.doc));
  }
  SubroutineSpec spec;
  spec.name = target.name + "_critique";
  spec.task_doc = "Critique the output of the subroutine " + target.name +
                  " for the given input. Its task: " + target.task_doc +
                  " Explain the problems you see, then rate each dimension; higher is better.";
  spec.input_schema = critique_input_schema(target.input_schema, target.output_schema);
  spec.output_schema = Schema(std::move(out));
  spec.context = target.context;
  return spec;
}

double rating_to_loss(const Json& ratings, const std::vector<RatingDimension>& dims) {
  if (!ratings.is_object()) throw Error(ErrorCode::kInvalidArgument, "ratings must be an object");
  if (dims.empty()) throw Error(ErrorCode::kInvalidArgument, "no rating dimensions");
  for (const auto& [key, value] : ratings.items()) {
    if (key == "explanation") continue;
    bool known = false;
    for (const auto& d : dims) known = known || d.name == key;
    if (!known) throw Error(ErrorCode::kInvalidArgument, "unknown rating dimension " + key);
  }
  double total = 0.0;
  for (const auto& d : dims) {
    if (!ratings.contains(d.name) || !ratings[d.name].is_number_integer()) {
      throw Error(ErrorCode::kInvalidArgument, "rating " + d.name + " must be an integer");
    }
    const auto r = ratings[d.name].get<std::int64_t>();
    if (r < d.lo || r > d.hi) {
      throw Error(ErrorCode::kInvalidArgument, "rating " + d.name + " must lie in [" + std::to_string(d.lo) + ", " +
                                                   std::to_string(d.hi) + "]");
    }
    total += static_cast<double>(d.hi - r) / static_cast<double>(d.hi - d.lo);
  }
  return total / static_cast<double>(dims.size());
}

double critique_loss(double sme_loss, double derived_loss) {
  const double d = sme_loss - derived_loss;
  // Snap to a 1e-12 grid so decimal inputs give decimal results, e.g.
  // (0.2 - 0.7)^2 == 0.25 rather than 0.24999999999999994.
  return std::round(d * d * 1e12) / 1e12;
}

CritiquePair declare_with_critique(Engine& engine, SubroutineSpec target, std::vector<RatingDimension> dims) {
  auto critique_spec = derive_critique_spec(target, dims);
  CritiquePair pair{engine.declare(std::move(target)), engine.declare(std::move(critique_spec)), std::move(dims)};
  engine.store().pair_critique(pair.target.subroutine_id, pair.critique.subroutine_id,
                               dimensions_to_json(pair.dims));
  return pair;
}

std::string_view to_string(LoopExit exit) {
  switch (exit) {
    case LoopExit::kThreshold: return "threshold";
    case LoopExit::kNoImprovement: return "no_improvement";
    case LoopExit::kMaxIters: return "max_iters";
    case LoopExit::kCritiqueFailed: return "critique_failed";
    case LoopExit::kCandidateFailed: return "candidate_failed";
  }
  return "unknown";
}

Json LoopResult::to_json() const {
  Json iters = Json::array();
  for (const auto& it : iterations) {
    iters.push_back({{"candidate", it.candidate.invocation_id},
                     {"critique", it.critique ? Json(it.critique->invocation_id) : Json(nullptr)},
                     {"loss", it.loss ? Json(*it.loss) : Json(nullptr)}});
  }
  return Json{{"exit", std::string(to_string(exit))}, {"selected", selected}, {"iterations", iters}};
}

namespace {

std::optional<std::string> key_for(const LoopOptions& o, int i, std::string_view part) {
  if (o.key_prefix.empty()) return std::nullopt;
  return o.key_prefix + "/iter" + std::to_string(i) + "/" + std::string(part);
}

int best_scored(const std::vector<LoopIteration>& iters) {
  int best = 0;
  for (std::size_t i = 0; i < iters.size(); ++i) {
    if (iters[i].loss && (best == 0 || *iters[i].loss < *iters[static_cast<std::size_t>(best - 1)].loss)) {
      best = static_cast<int>(i) + 1;
    }
  }
  return best;
}

}  // namespace

LoopResult self_critique_loop(Engine& engine, const CritiquePair& pair, const Json& input,
                              const std::vector<std::string>& parents, const LoopOptions& options) {
  if (options.config.max_iters < 1) throw Error(ErrorCode::kInvalidArgument, "max_iters must be at least 1");
  const Schema& target_in = options.input_schema ? *options.input_schema : pair.target.spec.input_schema;
  const Schema& target_out = options.output_schema ? *options.output_schema : pair.target.spec.output_schema;
  std::optional<Schema> critique_in;
  if (options.input_schema || options.output_schema) critique_in = critique_input_schema(target_in, target_out);

  LoopResult result;
  for (int i = 1; i <= options.config.max_iters; ++i) {
    InvokeOptions t;
    t.idempotency_key = key_for(options, i, "target");
    t.batch_id = options.batch_id;
    t.input_schema = options.input_schema;
    t.output_schema = options.output_schema;
    std::vector<std::string> deps = parents;
    if (!result.iterations.empty()) {
      const auto& prev = result.iterations.back();
      t.revision = RevisionContext{*prev.candidate.output, *prev.critique->output};
      deps.push_back(prev.candidate.invocation_id);
      deps.push_back(prev.critique->invocation_id);
    }
    LoopIteration it{engine.invoke(pair.target, input, deps, t), std::nullopt, std::nullopt};
    if (it.candidate.status == InvocationStatus::kFailed) {
      result.iterations.push_back(std::move(it));
      result.exit = LoopExit::kCandidateFailed;
      result.selected = best_scored(result.iterations);
      if (result.selected == 0) {
        throw Error(ErrorCode::kLoopFailed,
                    pair.target.spec.name + ": first candidate failed: " + result.iterations.back().candidate.error);
      }
      return result;
    }

    InvokeOptions c;
    c.idempotency_key = key_for(options, i, "critique");
    c.batch_id = options.batch_id;
    c.role = "critique";
    c.critiques = it.candidate.invocation_id;
    c.input_schema = critique_in;
    it.critique = engine.invoke(pair.critique, Json{{"input", it.candidate.input}, {"output", *it.candidate.output}},
                                {it.candidate.invocation_id}, c);
    if (it.critique->status == InvocationStatus::kFailed) {
      result.iterations.push_back(std::move(it));
      result.exit = LoopExit::kCritiqueFailed;
      result.selected = best_scored(result.iterations);
      if (result.selected == 0) result.selected = static_cast<int>(result.iterations.size());
      return result;
    }

    const double loss = rating_to_loss(*it.critique->output, pair.dims);
    it.loss = loss;
    FeedbackRecord f;
    f.invocation_id = it.candidate.invocation_id;
    f.source = "critique";
    f.source_invocation_id = it.critique->invocation_id;
    f.ratings = *it.critique->output;
    f.ratings.erase("explanation");
    f.loss = loss;
    f.rationale = (*it.critique->output)["explanation"].get<std::string>();
    f.dedup_key = "critique:" + it.critique->invocation_id;
    engine.store().record_feedback(f, {{it.candidate.subroutine_id, it.candidate.arm_id, loss}});

    const bool has_previous = !result.iterations.empty();
    const double previous = has_previous ? result.iterations.back().loss.value_or(1.0) : 1.0;
    result.iterations.push_back(std::move(it));
    if (loss <= options.config.threshold) {
      result.exit = LoopExit::kThreshold;
      result.selected = i;
      return result;
    }
    if (has_previous && !(loss < previous)) {
      result.exit = LoopExit::kNoImprovement;
      result.selected = best_scored(result.iterations);
      return result;
    }
    if (i == options.config.max_iters) {
      result.exit = LoopExit::kMaxIters;
      result.selected = best_scored(result.iterations);
      return result;
    }
  }
  return result;
}

FeedbackCommit propagate_sme_feedback(Store& store, const SmeSubmission& submission) {
  auto inv = store.invocation(submission.invocation_id);
  if (!inv) throw Error(ErrorCode::kNotFound, "unknown invocation " + submission.invocation_id);
  auto sub = store.subroutine(inv->subroutine_id);
  if (!sub || sub->rating_dims.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "invocation " + submission.invocation_id + " has no rating dimensions");
  }
  return propagate_sme_feedback(store, submission, dimensions_from_json(sub->rating_dims));
}

FeedbackCommit propagate_sme_feedback(Store& store, const SmeSubmission& submission,
                                      const std::vector<RatingDimension>& dims) {
  auto inv = store.invocation(submission.invocation_id);
  if (!inv) throw Error(ErrorCode::kNotFound, "unknown invocation " + submission.invocation_id);
  if (submission.submission_id) {
    // A replayed submission returns the original commit even if the ratings
    // would now be rejected.
    for (const auto& f : store.feedback_for(submission.invocation_id)) {
      if (f.dedup_key == submission.submission_id) return store.record_feedback(f, {});
    }
  }
  const double sme_loss = rating_to_loss(submission.ratings, dims);
  if (inv->arm_id.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "invocation " + inv->invocation_id + " has no arm to rate");
  }
  std::vector<ArmLossUpdate> updates{{inv->subroutine_id, inv->arm_id, sme_loss}};
  for (const auto& c : store.critiques_of(inv->invocation_id)) {
    if (c.status != InvocationStatus::kSucceeded || !c.output) continue;
    updates.push_back({c.subroutine_id, c.arm_id, critique_loss(sme_loss, rating_to_loss(*c.output, dims))});
  }
  FeedbackRecord f;
  f.invocation_id = inv->invocation_id;
  f.source = "sme";
  f.reviewer_id = submission.reviewer_id;
  f.ratings = submission.ratings;
  f.loss = sme_loss;
  f.rationale = submission.rationale;
  f.dedup_key = submission.submission_id;
  f.late = submission.late;
  return store.record_feedback(f, updates);
}

}  // namespace lmsub
