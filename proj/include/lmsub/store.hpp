#pragma once

// Durable, append-only source of truth for subroutines, arms, invocations,
// dependency edges, feedback, tasks, and pipeline artifacts. Backed by
// SQLite; the relational layout is documented in docs/store-schema.md.
//
// Invocation and feedback rows are never updated or deleted. Arm statistics
// are the only mutable audit state; task and batch rows carry queue state.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lmsub/bandit.hpp"
#include "lmsub/clock.hpp"
#include "lmsub/json.hpp"
#include "lmsub/schema.hpp"

namespace lmsub {

inline constexpr int kStoreSchemaVersion = 1;

enum class InvocationStatus { kSucceeded, kFailed };
std::string_view to_string(InvocationStatus status);

struct SubroutineRecord {
  std::string subroutine_id;
  std::string name;
  Json spec;                // serialized SubroutineSpec
  std::string declaration;  // serialize_declaration output
  Json rating_dims = Json::array();
  std::optional<std::string> critique_of;  // target subroutine id, for critiques
  std::optional<std::string> critique_id;  // paired critique subroutine id, for targets
  std::int64_t created_at = 0;
};

struct ArmRecord {
  std::string subroutine_id;
  bandit::ArmStats stats;
  std::string prompt;
  std::int64_t created_at = 0;
};

struct Invocation {
  std::string invocation_id;
  std::string subroutine_id;
  std::string arm_id;                     // empty for non-LM records (letter ingest)
  std::string role = "target";            // target | critique | ingest
  std::optional<std::string> critiques;   // critiqued invocation, for role critique
  Json input = Json::object();
  std::optional<Json> output;             // canonical record when succeeded
  std::string input_schema_hash;
  std::string output_schema_hash;
  std::string raw_output;                 // exact backend text
  std::string user_payload;               // exact text sent as the user message
  std::vector<std::string> parent_ids;
  InvocationStatus status = InvocationStatus::kSucceeded;
  std::string error;
  std::optional<std::string> idempotency_key;
  std::optional<std::string> batch_id;
  std::optional<std::string> snapshot_id;
  std::uint64_t gen_seed = 0;
  int attempt = 0;
  std::int64_t created_at = 0;  // store-assigned
};

struct FeedbackRecord {
  std::string feedback_id;
  std::string invocation_id;                  // the rated invocation
  std::string source = "sme";                 // sme | critique | oracle | system
  std::optional<std::string> source_invocation_id;
  std::optional<std::string> reviewer_id;
  Json ratings = Json::object();
  double loss = 0.0;
  std::string rationale;
  std::optional<std::string> dedup_key;       // submission id or derived key
  bool late = false;
  std::int64_t created_at = 0;
};

struct ArmLossUpdate {
  std::string subroutine_id;
  std::string arm_id;
  double loss = 0.0;
};

struct FeedbackCommit {
  FeedbackRecord record;
  bool inserted = false;  // false when dedup_key matched an earlier record
  std::vector<ArmLossUpdate> applied;
};

struct DependencyEdge {
  std::string child;
  std::string parent;
  friend bool operator==(const DependencyEdge&, const DependencyEdge&) = default;
};

struct TraceNode {
  Invocation invocation;
  std::string prompt;  // arm prompt text; empty for ingest records
  std::vector<FeedbackRecord> feedback;
};

struct AuditTrace {
  std::string root;
  std::vector<TraceNode> nodes;  // topological: parents before children, ties by created_at
  std::vector<DependencyEdge> edges;
};

struct Snapshot {
  std::string snapshot_id;
  std::string batch_id;
  bandit::BanditState state;
  std::vector<std::string> prompts;  // parallel to state.arms
};

struct BatchRecord {
  std::string batch_id;
  std::string run_id;
  int ordinal = 0;
  std::vector<std::string> letter_ids;
  std::string state;  // processing | reviewable | superseded
  std::int64_t created_at = 0;
};

struct ReviewItem {
  std::string stage;
  std::string item_key;
  std::string status;  // succeeded | failed
  std::optional<Invocation> invocation;
  Json detail;  // stage-specific summary, e.g. the loop trace
  std::vector<FeedbackRecord> feedback;
};

struct AuditEvent {
  std::int64_t event_id = 0;
  std::optional<std::string> batch_id;
  std::optional<std::string> invocation_id;
  std::string kind;
  Json detail;
  std::int64_t created_at = 0;
};

class Store {
 public:
  // path ":memory:" opens a private in-memory database.
  explicit Store(const std::string& path, std::shared_ptr<const Clock> clock = nullptr);
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  const Clock& clock() const;
  int schema_version() const;

  // Subroutines and arms.
  void upsert_subroutine(const SubroutineRecord& record);
  std::optional<SubroutineRecord> subroutine(std::string_view subroutine_id) const;
  std::vector<SubroutineRecord> subroutines() const;
  void pair_critique(std::string_view target_id, std::string_view critique_id, const Json& rating_dims);

  // Constraint documents by hash, so recorded invocations can be replayed.
  std::string put_schema(const Schema& schema);
  std::optional<Json> schema_document(std::string_view schema_hash) const;

  bandit::BanditState bandit_state(std::string_view subroutine_id) const;
  std::vector<ArmRecord> arms(std::string_view subroutine_id) const;
  std::optional<ArmRecord> arm(std::string_view subroutine_id, std::string_view arm_id) const;

  // Batch-frozen view of a subroutine's arms, created from live statistics
  // on first request and returned unchanged afterwards.
  Snapshot ensure_snapshot(std::string_view batch_id, std::string_view subroutine_id);
  std::optional<Snapshot> snapshot(std::string_view batch_id, std::string_view subroutine_id) const;

  // Persists an invocation with its parent edges in one transaction. When
  // arm_prompt is set the arm is created if absent and its pull counted;
  // a failed invocation also records loss 1.0 against the arm. If the
  // idempotency key already exists, the stored invocation is returned and
  // nothing is written. Throws kDuplicateId, kDanglingParent, kCycle.
  Invocation persist_invocation(Invocation invocation, std::optional<std::string> arm_prompt = std::nullopt);

  std::optional<Invocation> invocation(std::string_view invocation_id) const;
  std::optional<Invocation> invocation_by_key(std::string_view idempotency_key) const;
  std::vector<Invocation> invocations(std::string_view subroutine_id = {}) const;
  std::vector<Invocation> critiques_of(std::string_view invocation_id) const;
  std::int64_t invocation_count() const;

  // Appends a feedback record and its arm loss updates atomically. A record
  // whose dedup_key exists is returned unchanged with inserted = false.
  FeedbackCommit record_feedback(FeedbackRecord record, const std::vector<ArmLossUpdate>& updates);
  std::vector<FeedbackRecord> feedback_for(std::string_view invocation_id) const;
  std::vector<FeedbackRecord> feedback(std::string_view source = {}) const;

  // Full ancestor closure of invocation_id. Throws kNotFound.
  AuditTrace trace(std::string_view invocation_id) const;
  std::vector<DependencyEdge> edges() const;

  // Batches and review.
  BatchRecord ensure_batch(std::string_view run_id, int ordinal, const std::vector<std::string>& letter_ids);
  std::optional<BatchRecord> batch(std::string_view batch_id) const;
  std::vector<BatchRecord> batches(std::string_view run_id = {}) const;
  void set_batch_state(std::string_view batch_id, std::string_view state);
  void record_stage_output(std::string_view batch_id, std::string_view stage, std::string_view item_key,
                           const std::optional<std::string>& invocation_id, std::string_view status,
                           const Json& detail);
  // Throws kNotFound for an unknown batch.
  std::vector<ReviewItem> list_review_items(std::string_view batch_id, std::string_view stage) const;

  // Events are deduplicated by key when one is given.
  void record_event(const AuditEvent& event, std::optional<std::string> dedup_key = std::nullopt);
  std::vector<AuditEvent> events(std::string_view batch_id = {}, std::string_view kind = {}) const;

  struct Impl;
  Impl& impl() const { return *impl_; }

 private:
  std::unique_ptr<Impl> impl_;
};

// Canonical text forms used in storage.
Json spec_to_json(const SubroutineSpec& spec);
SubroutineSpec spec_from_json(const Json& j);

}  // namespace lmsub
