#include "lmsub/store.hpp"

#include <algorithm>
#include <queue>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"
#include "store_impl.hpp"

namespace lmsub {
namespace {

constexpr const char* kDdl = R"sql(
CREATE TABLE IF NOT EXISTS meta (
  key   TEXT PRIMARY KEY,
  value TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS subroutines (
  subroutine_id TEXT PRIMARY KEY,
  name          TEXT NOT NULL,
  spec_json     TEXT NOT NULL,
  declaration   TEXT NOT NULL,
  rating_dims   TEXT NOT NULL DEFAULT '[]',
  critique_of   TEXT,
  critique_id   TEXT,
  created_at    INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS arms (
  subroutine_id TEXT NOT NULL REFERENCES subroutines(subroutine_id),
  arm_id        TEXT NOT NULL,
  prompt        TEXT NOT NULL,
  pull_count    INTEGER NOT NULL DEFAULT 0,
  loss_count    INTEGER NOT NULL DEFAULT 0,
  loss_sum      REAL NOT NULL DEFAULT 0,
  created_at    INTEGER NOT NULL,
  PRIMARY KEY (subroutine_id, arm_id)
);
CREATE TABLE IF NOT EXISTS schemas (
  schema_hash TEXT PRIMARY KEY,
  document    TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS invocations (
  invocation_id      TEXT PRIMARY KEY,
  subroutine_id      TEXT NOT NULL,
  arm_id             TEXT NOT NULL,
  role               TEXT NOT NULL,
  critiques          TEXT,
  input_json         TEXT NOT NULL,
  output_json        TEXT,
  input_schema_hash  TEXT NOT NULL,
  output_schema_hash TEXT NOT NULL,
  raw_output         TEXT NOT NULL,
  user_payload       TEXT NOT NULL,
  status             TEXT NOT NULL,
  error              TEXT NOT NULL,
  idempotency_key    TEXT UNIQUE,
  batch_id           TEXT,
  snapshot_id        TEXT,
  gen_seed           INTEGER NOT NULL,
  attempt            INTEGER NOT NULL,
  created_at         INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS invocations_by_subroutine ON invocations(subroutine_id);
CREATE INDEX IF NOT EXISTS invocations_by_critiqued ON invocations(critiques);
CREATE TABLE IF NOT EXISTS edges (
  child  TEXT NOT NULL REFERENCES invocations(invocation_id),
  parent TEXT NOT NULL REFERENCES invocations(invocation_id),
  PRIMARY KEY (child, parent)
);
CREATE INDEX IF NOT EXISTS edges_by_parent ON edges(parent);
CREATE TABLE IF NOT EXISTS feedback (
  feedback_id          TEXT PRIMARY KEY,
  invocation_id        TEXT NOT NULL REFERENCES invocations(invocation_id),
  source               TEXT NOT NULL,
  source_invocation_id TEXT,
  reviewer_id          TEXT,
  ratings              TEXT NOT NULL,
  loss                 REAL NOT NULL,
  rationale            TEXT NOT NULL,
  dedup_key            TEXT UNIQUE,
  late                 INTEGER NOT NULL DEFAULT 0,
  created_at           INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS feedback_by_invocation ON feedback(invocation_id);
CREATE TABLE IF NOT EXISTS arm_loss_log (
  feedback_id   TEXT NOT NULL REFERENCES feedback(feedback_id),
  subroutine_id TEXT NOT NULL,
  arm_id        TEXT NOT NULL,
  loss          REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS snapshots (
  snapshot_id   TEXT PRIMARY KEY,
  batch_id      TEXT NOT NULL,
  subroutine_id TEXT NOT NULL,
  trial_index   INTEGER NOT NULL,
  created_at    INTEGER NOT NULL,
  UNIQUE (batch_id, subroutine_id)
);
CREATE TABLE IF NOT EXISTS snapshot_arms (
  snapshot_id TEXT NOT NULL REFERENCES snapshots(snapshot_id),
  ordinal     INTEGER NOT NULL,
  arm_id      TEXT NOT NULL,
  prompt      TEXT NOT NULL,
  pull_count  INTEGER NOT NULL,
  loss_count  INTEGER NOT NULL,
  loss_sum    REAL NOT NULL,
  PRIMARY KEY (snapshot_id, arm_id)
);
CREATE TABLE IF NOT EXISTS tasks (
  task_id         TEXT PRIMARY KEY,
  kind            TEXT NOT NULL,
  payload         TEXT NOT NULL,
  idempotency_key TEXT NOT NULL UNIQUE,
  attempts        INTEGER NOT NULL DEFAULT 0,
  max_attempts    INTEGER NOT NULL,
  state           TEXT NOT NULL,
  lease_owner     TEXT,
  lease_expiry    INTEGER,
  reason          TEXT NOT NULL DEFAULT '',
  batch_id        TEXT,
  created_at      INTEGER NOT NULL,
  updated_at      INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS tasks_by_state ON tasks(state, created_at);
CREATE INDEX IF NOT EXISTS tasks_by_batch ON tasks(batch_id, state);
CREATE TABLE IF NOT EXISTS runs (
  run_id     TEXT PRIMARY KEY,
  config     TEXT NOT NULL,
  state      TEXT NOT NULL,
  created_at INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS batches (
  batch_id   TEXT PRIMARY KEY,
  run_id     TEXT NOT NULL,
  ordinal    INTEGER NOT NULL,
  letter_ids TEXT NOT NULL,
  state      TEXT NOT NULL,
  created_at INTEGER NOT NULL,
  UNIQUE (run_id, ordinal)
);
CREATE TABLE IF NOT EXISTS letters (
  letter_id            TEXT NOT NULL,
  run_id               TEXT NOT NULL,
  text                 TEXT NOT NULL,
  metadata             TEXT NOT NULL,
  ingest_invocation_id TEXT,
  PRIMARY KEY (run_id, letter_id)
);
CREATE TABLE IF NOT EXISTS stage_outputs (
  batch_id      TEXT NOT NULL,
  stage         TEXT NOT NULL,
  item_key      TEXT NOT NULL,
  invocation_id TEXT,
  status        TEXT NOT NULL,
  detail        TEXT NOT NULL,
  created_at    INTEGER NOT NULL,
  PRIMARY KEY (batch_id, stage, item_key)
);
CREATE TABLE IF NOT EXISTS concerns (
  concern_id    TEXT PRIMARY KEY,
  batch_id      TEXT NOT NULL,
  letter_id     TEXT NOT NULL,
  ordinal       INTEGER NOT NULL,
  statement     TEXT NOT NULL,
  invocation_id TEXT NOT NULL REFERENCES invocations(invocation_id)
);
CREATE TABLE IF NOT EXISTS quote_spans (
  concern_id   TEXT NOT NULL REFERENCES concerns(concern_id),
  ordinal      INTEGER NOT NULL,
  raw_quote    TEXT NOT NULL,
  start_offset INTEGER NOT NULL,
  end_offset   INTEGER NOT NULL,
  similarity   REAL NOT NULL,
  PRIMARY KEY (concern_id, ordinal)
);
CREATE TABLE IF NOT EXISTS bin_assignments (
  concern_id    TEXT NOT NULL REFERENCES concerns(concern_id),
  bin_name      TEXT NOT NULL,
  invocation_id TEXT NOT NULL REFERENCES invocations(invocation_id),
  PRIMARY KEY (concern_id, bin_name)
);
CREATE TABLE IF NOT EXISTS bin_summaries (
  batch_id      TEXT NOT NULL,
  bin_name      TEXT NOT NULL,
  summary       TEXT NOT NULL,
  invocation_id TEXT NOT NULL REFERENCES invocations(invocation_id),
  PRIMARY KEY (batch_id, bin_name)
);
CREATE TABLE IF NOT EXISTS bin_citations (
  batch_id     TEXT NOT NULL,
  bin_name     TEXT NOT NULL,
  ordinal      INTEGER NOT NULL,
  letter_id    TEXT NOT NULL,
  raw_quote    TEXT NOT NULL,
  start_offset INTEGER NOT NULL,
  end_offset   INTEGER NOT NULL,
  similarity   REAL NOT NULL,
  PRIMARY KEY (batch_id, bin_name, ordinal)
);
CREATE TABLE IF NOT EXISTS events (
  event_id      INTEGER PRIMARY KEY AUTOINCREMENT,
  batch_id      TEXT,
  invocation_id TEXT,
  kind          TEXT NOT NULL,
  detail        TEXT NOT NULL,
  dedup_key     TEXT UNIQUE,
  created_at    INTEGER NOT NULL
);
)sql";

std::string random_id(std::string_view prefix) {
  static std::mutex m;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(m);
  return std::string(prefix) + sha256_hex(std::to_string(rng()) + std::to_string(rng())).substr(0, 24);
}

Json parse_json(const std::string& text) { return Json::parse(text); }

bandit::ArmStats read_stats(const sql::Statement& st, int first) {
  return bandit::ArmStats{st.text(first), st.integer(first + 1), st.integer(first + 2), st.real(first + 3)};
}

SubroutineRecord read_subroutine(const sql::Statement& st) {
  SubroutineRecord r;
  r.subroutine_id = st.text(0);
  r.name = st.text(1);
  r.spec = parse_json(st.text(2));
  r.declaration = st.text(3);
  r.rating_dims = parse_json(st.text(4));
  r.critique_of = st.optional_text(5);
  r.critique_id = st.optional_text(6);
  r.created_at = st.integer(7);
  return r;
}

constexpr const char* kSubroutineColumns =
    "subroutine_id, name, spec_json, declaration, rating_dims, critique_of, critique_id, created_at";

}  // namespace

std::string_view to_string(InvocationStatus status) {
  return status == InvocationStatus::kSucceeded ? "succeeded" : "failed";
}

const char* const kInvocationColumns =
    "invocation_id, subroutine_id, arm_id, role, critiques, input_json, output_json, input_schema_hash, "
    "output_schema_hash, raw_output, user_payload, status, error, idempotency_key, batch_id, snapshot_id, "
    "gen_seed, attempt, created_at";

Invocation read_invocation_row(sql::Statement& st) {
  Invocation inv;
  inv.invocation_id = st.text(0);
  inv.subroutine_id = st.text(1);
  inv.arm_id = st.text(2);
  inv.role = st.text(3);
  inv.critiques = st.optional_text(4);
  inv.input = parse_json(st.text(5));
  if (!st.is_null(6)) inv.output = parse_json(st.text(6));
  inv.input_schema_hash = st.text(7);
  inv.output_schema_hash = st.text(8);
  inv.raw_output = st.text(9);
  inv.user_payload = st.text(10);
  inv.status = st.text(11) == "succeeded" ? InvocationStatus::kSucceeded : InvocationStatus::kFailed;
  inv.error = st.text(12);
  inv.idempotency_key = st.optional_text(13);
  inv.batch_id = st.optional_text(14);
  inv.snapshot_id = st.optional_text(15);
  inv.gen_seed = static_cast<std::uint64_t>(st.integer(16));
  inv.attempt = static_cast<int>(st.integer(17));
  inv.created_at = st.integer(18);
  return inv;
}

const char* const kFeedbackColumns =
    "feedback_id, invocation_id, source, source_invocation_id, reviewer_id, ratings, loss, rationale, dedup_key, "
    "late, created_at";

FeedbackRecord read_feedback_row(const sql::Statement& st) {
  FeedbackRecord f;
  f.feedback_id = st.text(0);
  f.invocation_id = st.text(1);
  f.source = st.text(2);
  f.source_invocation_id = st.optional_text(3);
  f.reviewer_id = st.optional_text(4);
  f.ratings = parse_json(st.text(5));
  f.loss = st.real(6);
  f.rationale = st.text(7);
  f.dedup_key = st.optional_text(8);
  f.late = st.integer(9) != 0;
  f.created_at = st.integer(10);
  return f;
}

Store::Impl::Impl(const std::string& path, std::shared_ptr<const Clock> clk) : db(path), clock(std::move(clk)) {
  if (!clock) clock = std::make_shared<SystemClock>();
  if (path != ":memory:") db.exec("PRAGMA journal_mode=WAL");
  db.exec("PRAGMA synchronous=FULL");
  db.exec("PRAGMA foreign_keys=ON");
  db.exec("BEGIN IMMEDIATE");
  try {
    db.exec(kDdl);
    db.prepare("INSERT OR IGNORE INTO meta(key, value) VALUES ('schema_version', ?)")
        .bind_all(std::to_string(kStoreSchemaVersion))
        .run();
    db.prepare("INSERT OR IGNORE INTO meta(key, value) VALUES ('last_timestamp', '0')").run();
    db.exec("COMMIT");
  } catch (...) {
    db.exec("ROLLBACK");
    throw;
  }
}

std::int64_t Store::Impl::next_timestamp() {
  auto st = db.prepare("SELECT value FROM meta WHERE key = 'last_timestamp'");
  std::int64_t last = st.step() ? std::stoll(st.text(0)) : 0;
  const std::int64_t ts = std::max(clock->now_us(), last + 1);
  db.prepare("UPDATE meta SET value = ? WHERE key = 'last_timestamp'").bind_all(std::to_string(ts)).run();
  return ts;
}

Store::Store(const std::string& path, std::shared_ptr<const Clock> clock)
    : impl_(std::make_unique<Impl>(path, std::move(clock))) {}

Store::~Store() = default;

const Clock& Store::clock() const { return *impl_->clock; }

int Store::schema_version() const {
  return impl_->read([&] {
    auto st = impl_->db.prepare("SELECT value FROM meta WHERE key = 'schema_version'");
    return st.step() ? std::stoi(st.text(0)) : 0;
  });
}

void Store::upsert_subroutine(const SubroutineRecord& record) {
  impl_->transaction([&] {
    impl_->db
        .prepare(
            "INSERT OR IGNORE INTO subroutines(subroutine_id, name, spec_json, declaration, rating_dims, "
            "critique_of, critique_id, created_at) VALUES (?, ?, ?, ?, ?, ?, ?, ?)")
        .bind_all(record.subroutine_id, record.name, record.spec.dump(), record.declaration,
                  record.rating_dims.dump(), record.critique_of, record.critique_id, impl_->next_timestamp())
        .run();
  });
}

std::optional<SubroutineRecord> Store::subroutine(std::string_view subroutine_id) const {
  return impl_->read([&]() -> std::optional<SubroutineRecord> {
    auto st = impl_->db.prepare(std::string("SELECT ") + kSubroutineColumns +
                                " FROM subroutines WHERE subroutine_id = ?");
    st.bind_all(subroutine_id);
    if (!st.step()) return std::nullopt;
    return read_subroutine(st);
  });
}

std::vector<SubroutineRecord> Store::subroutines() const {
  return impl_->read([&] {
    std::vector<SubroutineRecord> out;
    auto st = impl_->db.prepare(std::string("SELECT ") + kSubroutineColumns +
                                " FROM subroutines ORDER BY created_at, subroutine_id");
    while (st.step()) out.push_back(read_subroutine(st));
    return out;
  });
}

void Store::pair_critique(std::string_view target_id, std::string_view critique_id, const Json& rating_dims) {
  impl_->transaction([&] {
    auto& db = impl_->db;
    db.prepare("UPDATE subroutines SET critique_id = ?, rating_dims = ? WHERE subroutine_id = ?")
        .bind_all(critique_id, rating_dims.dump(), target_id)
        .run();
    if (db.changes() == 0) throw Error(ErrorCode::kNotFound, "unknown subroutine " + std::string(target_id));
    db.prepare("UPDATE subroutines SET critique_of = ?, rating_dims = ? WHERE subroutine_id = ?")
        .bind_all(target_id, rating_dims.dump(), critique_id)
        .run();
    if (db.changes() == 0) throw Error(ErrorCode::kNotFound, "unknown subroutine " + std::string(critique_id));
  });
}

std::string Store::put_schema(const Schema& schema) {
  const auto hash = schema_hash(schema);
  impl_->transaction([&] {
    impl_->db.prepare("INSERT OR IGNORE INTO schemas(schema_hash, document) VALUES (?, ?)")
        .bind_all(hash, emit_constraint_schema(schema))
        .run();
  });
  return hash;
}

std::optional<Json> Store::schema_document(std::string_view schema_hash) const {
  return impl_->read([&]() -> std::optional<Json> {
    auto st = impl_->db.prepare("SELECT document FROM schemas WHERE schema_hash = ?");
    st.bind_all(schema_hash);
    if (!st.step()) return std::nullopt;
    return parse_json(st.text(0));
  });
}

bandit::BanditState Store::bandit_state(std::string_view subroutine_id) const {
  return impl_->read([&] {
    bandit::BanditState state;
    state.subroutine_id = std::string(subroutine_id);
    auto st = impl_->db.prepare(
        "SELECT arm_id, pull_count, loss_count, loss_sum FROM arms WHERE subroutine_id = ? "
        "ORDER BY created_at, arm_id");
    st.bind_all(subroutine_id);
    while (st.step()) {
      state.arms.push_back(read_stats(st, 0));
      state.trial_index += state.arms.back().pull_count;
    }
    return state;
  });
}

std::vector<ArmRecord> Store::arms(std::string_view subroutine_id) const {
  return impl_->read([&] {
    std::vector<ArmRecord> out;
    auto st = impl_->db.prepare(
        "SELECT arm_id, pull_count, loss_count, loss_sum, prompt, created_at FROM arms WHERE subroutine_id = ? "
        "ORDER BY created_at, arm_id");
    st.bind_all(subroutine_id);
    while (st.step()) out.push_back(ArmRecord{std::string(subroutine_id), read_stats(st, 0), st.text(4), st.integer(5)});
    return out;
  });
}

std::optional<ArmRecord> Store::arm(std::string_view subroutine_id, std::string_view arm_id) const {
  return impl_->read([&]() -> std::optional<ArmRecord> {
    auto st = impl_->db.prepare(
        "SELECT arm_id, pull_count, loss_count, loss_sum, prompt, created_at FROM arms "
        "WHERE subroutine_id = ? AND arm_id = ?");
    st.bind_all(subroutine_id, arm_id);
    if (!st.step()) return std::nullopt;
    return ArmRecord{std::string(subroutine_id), read_stats(st, 0), st.text(4), st.integer(5)};
  });
}

namespace {

std::optional<Snapshot> load_snapshot(sql::Database& db, std::string_view batch_id, std::string_view subroutine_id) {
  auto st = db.prepare("SELECT snapshot_id, trial_index FROM snapshots WHERE batch_id = ? AND subroutine_id = ?");
  st.bind_all(batch_id, subroutine_id);
  if (!st.step()) return std::nullopt;
  Snapshot snap;
  snap.snapshot_id = st.text(0);
  snap.batch_id = std::string(batch_id);
  snap.state.subroutine_id = std::string(subroutine_id);
  snap.state.trial_index = st.integer(1);
  auto arms = db.prepare(
      "SELECT arm_id, pull_count, loss_count, loss_sum, prompt FROM snapshot_arms WHERE snapshot_id = ? "
      "ORDER BY ordinal");
  arms.bind_all(snap.snapshot_id);
  while (arms.step()) {
    snap.state.arms.push_back(read_stats(arms, 0));
    snap.prompts.push_back(arms.text(4));
  }
  return snap;
}

}  // namespace

Snapshot Store::ensure_snapshot(std::string_view batch_id, std::string_view subroutine_id) {
  return impl_->transaction([&] {
    auto& db = impl_->db;
    if (auto existing = load_snapshot(db, batch_id, subroutine_id)) return *existing;
    const std::string snapshot_id =
        "snap-" + sha256_hex(std::string(batch_id) + "\n" + std::string(subroutine_id)).substr(0, 24);
    const auto live = arms(subroutine_id);
    std::int64_t trials = 0;
    for (const auto& a : live) trials += a.stats.pull_count;
    db.prepare("INSERT INTO snapshots(snapshot_id, batch_id, subroutine_id, trial_index, created_at) "
               "VALUES (?, ?, ?, ?, ?)")
        .bind_all(snapshot_id, batch_id, subroutine_id, trials, impl_->next_timestamp())
        .run();
    int ordinal = 0;
    for (const auto& a : live) {
      db.prepare("INSERT INTO snapshot_arms(snapshot_id, ordinal, arm_id, prompt, pull_count, loss_count, loss_sum) "
                 "VALUES (?, ?, ?, ?, ?, ?, ?)")
          .bind_all(snapshot_id, ordinal++, a.stats.arm_id, a.prompt, a.stats.pull_count, a.stats.loss_count,
                    a.stats.loss_sum)
          .run();
    }
    return *load_snapshot(db, batch_id, subroutine_id);
  });
}

std::optional<Snapshot> Store::snapshot(std::string_view batch_id, std::string_view subroutine_id) const {
  return impl_->read([&] { return load_snapshot(impl_->db, batch_id, subroutine_id); });
}

namespace {

std::vector<std::string> parents_of(sql::Database& db, std::string_view child) {
  std::vector<std::string> out;
  auto st = db.prepare("SELECT parent FROM edges WHERE child = ? ORDER BY rowid");
  st.bind_all(child);
  while (st.step()) out.push_back(st.text(0));
  return out;
}

std::optional<Invocation> load_invocation(sql::Database& db, std::string_view column, std::string_view value) {
  auto st = db.prepare(std::string("SELECT ") + kInvocationColumns + " FROM invocations WHERE " +
                       std::string(column) + " = ?");
  st.bind_all(value);
  if (!st.step()) return std::nullopt;
  Invocation inv = read_invocation_row(st);
  inv.parent_ids = parents_of(db, inv.invocation_id);
  return inv;
}

bool invocation_exists(sql::Database& db, std::string_view id) {
  auto st = db.prepare("SELECT 1 FROM invocations WHERE invocation_id = ?");
  st.bind_all(id);
  return st.step();
}

void apply_arm_loss(sql::Database& db, const ArmLossUpdate& u) {
  bandit::check_loss(u.loss);
  db.prepare("UPDATE arms SET loss_count = loss_count + 1, loss_sum = loss_sum + ? "
             "WHERE subroutine_id = ? AND arm_id = ?")
      .bind_all(u.loss, u.subroutine_id, u.arm_id)
      .run();
  if (db.changes() == 0) throw Error(ErrorCode::kUnknownArm, "unknown arm " + u.arm_id + " of " + u.subroutine_id);
}

void insert_feedback(sql::Database& db, const FeedbackRecord& f) {
  db.prepare(std::string("INSERT INTO feedback(") + kFeedbackColumns + ") VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)")
      .bind_all(f.feedback_id, f.invocation_id, f.source, f.source_invocation_id, f.reviewer_id, f.ratings.dump(),
                f.loss, f.rationale, f.dedup_key, static_cast<std::int64_t>(f.late ? 1 : 0), f.created_at)
      .run();
}

}  // namespace

Invocation Store::persist_invocation(Invocation inv, std::optional<std::string> arm_prompt) {
  return impl_->transaction([&] {
    auto& db = impl_->db;
    if (inv.idempotency_key) {
      if (auto existing = load_invocation(db, "idempotency_key", *inv.idempotency_key)) return *existing;
    }
    if (inv.invocation_id.empty()) {
      inv.invocation_id = inv.idempotency_key ? "inv-" + sha256_hex(*inv.idempotency_key).substr(0, 24)
                                              : random_id("inv-");
    }
    if (invocation_exists(db, inv.invocation_id)) {
      throw Error(ErrorCode::kDuplicateId, "invocation " + inv.invocation_id + " already exists");
    }
    std::vector<std::string> parents;
    for (const auto& p : inv.parent_ids) {
      if (p == inv.invocation_id) throw Error(ErrorCode::kCycle, "invocation " + p + " cannot depend on itself");
      if (!invocation_exists(db, p)) throw Error(ErrorCode::kDanglingParent, "unknown parent invocation " + p);
      if (std::find(parents.begin(), parents.end(), p) == parents.end()) parents.push_back(p);
    }
    inv.parent_ids = parents;
    inv.created_at = impl_->next_timestamp();

    if (arm_prompt) {
      db.prepare("INSERT OR IGNORE INTO arms(subroutine_id, arm_id, prompt, created_at) VALUES (?, ?, ?, ?)")
          .bind_all(inv.subroutine_id, inv.arm_id, *arm_prompt, inv.created_at)
          .run();
      db.prepare("UPDATE arms SET pull_count = pull_count + 1 WHERE subroutine_id = ? AND arm_id = ?")
          .bind_all(inv.subroutine_id, inv.arm_id)
          .run();
    }

    db.prepare(std::string("INSERT INTO invocations(") + kInvocationColumns +
               ") VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)")
        .bind_all(inv.invocation_id, inv.subroutine_id, inv.arm_id, inv.role, inv.critiques, inv.input.dump(),
                  inv.output ? std::optional<std::string>(inv.output->dump()) : std::nullopt, inv.input_schema_hash,
                  inv.output_schema_hash, inv.raw_output, inv.user_payload, std::string(to_string(inv.status)),
                  inv.error, inv.idempotency_key, inv.batch_id, inv.snapshot_id,
                  static_cast<std::int64_t>(inv.gen_seed), static_cast<std::int64_t>(inv.attempt), inv.created_at)
        .run();
    for (const auto& p : parents) {
      db.prepare("INSERT INTO edges(child, parent) VALUES (?, ?)").bind_all(inv.invocation_id, p).run();
    }

    if (arm_prompt && inv.status == InvocationStatus::kFailed) {
      FeedbackRecord f;
      f.feedback_id = "fb-" + sha256_hex("system\n" + inv.invocation_id).substr(0, 24);
      f.invocation_id = inv.invocation_id;
      f.source = "system";
      f.loss = 1.0;
      f.rationale = inv.error;
      f.dedup_key = "system:" + inv.invocation_id;
      f.created_at = inv.created_at;
      insert_feedback(db, f);
      const ArmLossUpdate u{inv.subroutine_id, inv.arm_id, 1.0};
      apply_arm_loss(db, u);
      db.prepare("INSERT INTO arm_loss_log(feedback_id, subroutine_id, arm_id, loss) VALUES (?, ?, ?, ?)")
          .bind_all(f.feedback_id, u.subroutine_id, u.arm_id, u.loss)
          .run();
    }
    return inv;
  });
}

std::optional<Invocation> Store::invocation(std::string_view invocation_id) const {
  return impl_->read([&] { return load_invocation(impl_->db, "invocation_id", invocation_id); });
}

std::optional<Invocation> Store::invocation_by_key(std::string_view idempotency_key) const {
  return impl_->read([&] { return load_invocation(impl_->db, "idempotency_key", idempotency_key); });
}

std::vector<Invocation> Store::invocations(std::string_view subroutine_id) const {
  return impl_->read([&] {
    std::vector<Invocation> out;
    std::string q = std::string("SELECT ") + kInvocationColumns + " FROM invocations";
    if (!subroutine_id.empty()) q += " WHERE subroutine_id = ?";
    q += " ORDER BY created_at, invocation_id";
    auto st = impl_->db.prepare(q);
    if (!subroutine_id.empty()) st.bind_all(subroutine_id);
    while (st.step()) out.push_back(read_invocation_row(st));
    for (auto& inv : out) inv.parent_ids = parents_of(impl_->db, inv.invocation_id);
    return out;
  });
}

std::vector<Invocation> Store::critiques_of(std::string_view invocation_id) const {
  return impl_->read([&] {
    std::vector<Invocation> out;
    auto st = impl_->db.prepare(std::string("SELECT ") + kInvocationColumns +
                                " FROM invocations WHERE critiques = ? ORDER BY created_at, invocation_id");
    st.bind_all(invocation_id);
    while (st.step()) out.push_back(read_invocation_row(st));
    for (auto& inv : out) inv.parent_ids = parents_of(impl_->db, inv.invocation_id);
    return out;
  });
}

std::int64_t Store::invocation_count() const {
  return impl_->read([&] {
    auto st = impl_->db.prepare("SELECT COUNT(*) FROM invocations");
    st.step();
    return st.integer(0);
  });
}

FeedbackCommit Store::record_feedback(FeedbackRecord record, const std::vector<ArmLossUpdate>& updates) {
  return impl_->transaction([&] {
    auto& db = impl_->db;
    if (record.dedup_key) {
      auto st = db.prepare(std::string("SELECT ") + kFeedbackColumns + " FROM feedback WHERE dedup_key = ?");
      st.bind_all(*record.dedup_key);
      if (st.step()) {
        FeedbackCommit existing{read_feedback_row(st), false, {}};
        auto log = db.prepare("SELECT subroutine_id, arm_id, loss FROM arm_loss_log WHERE feedback_id = ? ORDER BY rowid");
        log.bind_all(existing.record.feedback_id);
        while (log.step()) existing.applied.push_back({log.text(0), log.text(1), log.real(2)});
        return existing;
      }
    }
    if (!invocation_exists(db, record.invocation_id)) {
      throw Error(ErrorCode::kNotFound, "feedback references unknown invocation " + record.invocation_id);
    }
    bandit::check_loss(record.loss);
    if (record.feedback_id.empty()) {
      record.feedback_id = record.dedup_key ? "fb-" + sha256_hex(*record.dedup_key).substr(0, 24) : random_id("fb-");
    }
    record.created_at = impl_->next_timestamp();
    insert_feedback(db, record);
    for (const auto& u : updates) {
      apply_arm_loss(db, u);
      db.prepare("INSERT INTO arm_loss_log(feedback_id, subroutine_id, arm_id, loss) VALUES (?, ?, ?, ?)")
          .bind_all(record.feedback_id, u.subroutine_id, u.arm_id, u.loss)
          .run();
    }
    return FeedbackCommit{record, true, updates};
  });
}

std::vector<FeedbackRecord> Store::feedback_for(std::string_view invocation_id) const {
  return impl_->read([&] {
    std::vector<FeedbackRecord> out;
    auto st = impl_->db.prepare(std::string("SELECT ") + kFeedbackColumns +
                                " FROM feedback WHERE invocation_id = ? ORDER BY created_at, feedback_id");
    st.bind_all(invocation_id);
    while (st.step()) out.push_back(read_feedback_row(st));
    return out;
  });
}

std::vector<FeedbackRecord> Store::feedback(std::string_view source) const {
  return impl_->read([&] {
    std::vector<FeedbackRecord> out;
    std::string q = std::string("SELECT ") + kFeedbackColumns + " FROM feedback";
    if (!source.empty()) q += " WHERE source = ?";
    q += " ORDER BY created_at, feedback_id";
    auto st = impl_->db.prepare(q);
    if (!source.empty()) st.bind_all(source);
    while (st.step()) out.push_back(read_feedback_row(st));
    return out;
  });
}

AuditTrace Store::trace(std::string_view invocation_id) const {
  return impl_->read([&] {
    auto& db = impl_->db;
    if (!invocation_exists(db, invocation_id)) {
      throw Error(ErrorCode::kNotFound, "unknown invocation " + std::string(invocation_id));
    }
    std::unordered_map<std::string, Invocation> nodes;
    std::vector<DependencyEdge> edges;
    std::queue<std::string> frontier;
    frontier.emplace(invocation_id);
    while (!frontier.empty()) {
      std::string id = std::move(frontier.front());
      frontier.pop();
      if (nodes.count(id)) continue;
      auto inv = load_invocation(db, "invocation_id", id);
      for (const auto& p : inv->parent_ids) {
        edges.push_back({id, p});
        if (!nodes.count(p)) frontier.push(p);
      }
      nodes.emplace(id, std::move(*inv));
    }

    // Kahn's algorithm, smallest (created_at, id) first among ready nodes.
    std::unordered_map<std::string, int> pending;
    std::unordered_map<std::string, std::vector<std::string>> children;
    for (const auto& [id, inv] : nodes) pending[id] = static_cast<int>(inv.parent_ids.size());
    for (const auto& e : edges) children[e.parent].push_back(e.child);
    using Key = std::pair<std::int64_t, std::string>;
    std::priority_queue<Key, std::vector<Key>, std::greater<>> ready;
    for (const auto& [id, n] : pending) {
      if (n == 0) ready.emplace(nodes.at(id).created_at, id);
    }
    AuditTrace trace;
    trace.root = std::string(invocation_id);
    while (!ready.empty()) {
      auto [ts, id] = ready.top();
      ready.pop();
      TraceNode node;
      node.invocation = nodes.at(id);
      if (!node.invocation.arm_id.empty()) {
        auto st = db.prepare("SELECT prompt FROM arms WHERE subroutine_id = ? AND arm_id = ?");
        st.bind_all(node.invocation.subroutine_id, node.invocation.arm_id);
        if (st.step()) node.prompt = st.text(0);
      }
      auto fb = db.prepare(std::string("SELECT ") + kFeedbackColumns +
                           " FROM feedback WHERE invocation_id = ? ORDER BY created_at, feedback_id");
      fb.bind_all(id);
      while (fb.step()) node.feedback.push_back(read_feedback_row(fb));
      trace.nodes.push_back(std::move(node));
      for (const auto& c : children[id]) {
        if (--pending[c] == 0) ready.emplace(nodes.at(c).created_at, c);
      }
    }
    if (trace.nodes.size() != nodes.size()) throw Error(ErrorCode::kCycle, "dependency cycle in audit graph");
    std::sort(edges.begin(), edges.end(), [&](const DependencyEdge& a, const DependencyEdge& b) {
      return std::tie(nodes.at(a.child).created_at, a.child, nodes.at(a.parent).created_at, a.parent) <
             std::tie(nodes.at(b.child).created_at, b.child, nodes.at(b.parent).created_at, b.parent);
    });
    trace.edges = std::move(edges);
    return trace;
  });
}

std::vector<DependencyEdge> Store::edges() const {
  return impl_->read([&] {
    std::vector<DependencyEdge> out;
    auto st = impl_->db.prepare("SELECT child, parent FROM edges ORDER BY rowid");
    while (st.step()) out.push_back({st.text(0), st.text(1)});
    return out;
  });
}

namespace {

BatchRecord read_batch(const sql::Statement& st) {
  BatchRecord b;
  b.batch_id = st.text(0);
  b.run_id = st.text(1);
  b.ordinal = static_cast<int>(st.integer(2));
  b.letter_ids = Json::parse(st.text(3)).get<std::vector<std::string>>();
  b.state = st.text(4);
  b.created_at = st.integer(5);
  return b;
}

constexpr const char* kBatchColumns = "batch_id, run_id, ordinal, letter_ids, state, created_at";

}  // namespace

BatchRecord Store::ensure_batch(std::string_view run_id, int ordinal, const std::vector<std::string>& letter_ids) {
  return impl_->transaction([&] {
    auto& db = impl_->db;
    const std::string batch_id = std::string(run_id) + "/batch-" + std::to_string(ordinal);
    db.prepare("INSERT OR IGNORE INTO batches(batch_id, run_id, ordinal, letter_ids, state, created_at) "
               "VALUES (?, ?, ?, ?, 'processing', ?)")
        .bind_all(batch_id, run_id, ordinal, Json(letter_ids).dump(), impl_->next_timestamp())
        .run();
    return *batch(batch_id);
  });
}

std::optional<BatchRecord> Store::batch(std::string_view batch_id) const {
  return impl_->read([&]() -> std::optional<BatchRecord> {
    auto st = impl_->db.prepare(std::string("SELECT ") + kBatchColumns + " FROM batches WHERE batch_id = ?");
    st.bind_all(batch_id);
    if (!st.step()) return std::nullopt;
    return read_batch(st);
  });
}

std::vector<BatchRecord> Store::batches(std::string_view run_id) const {
  return impl_->read([&] {
    std::vector<BatchRecord> out;
    std::string q = std::string("SELECT ") + kBatchColumns + " FROM batches";
    if (!run_id.empty()) q += " WHERE run_id = ?";
    q += " ORDER BY created_at, ordinal";
    auto st = impl_->db.prepare(q);
    if (!run_id.empty()) st.bind_all(run_id);
    while (st.step()) out.push_back(read_batch(st));
    return out;
  });
}

void Store::set_batch_state(std::string_view batch_id, std::string_view state) {
  impl_->transaction([&] {
    impl_->db.prepare("UPDATE batches SET state = ? WHERE batch_id = ?").bind_all(state, batch_id).run();
    if (impl_->db.changes() == 0) throw Error(ErrorCode::kNotFound, "unknown batch " + std::string(batch_id));
  });
}

void Store::record_stage_output(std::string_view batch_id, std::string_view stage, std::string_view item_key,
                                const std::optional<std::string>& invocation_id, std::string_view status,
                                const Json& detail) {
  impl_->transaction([&] {
    impl_->db
        .prepare("INSERT OR IGNORE INTO stage_outputs(batch_id, stage, item_key, invocation_id, status, detail, "
                 "created_at) VALUES (?, ?, ?, ?, ?, ?, ?)")
        .bind_all(batch_id, stage, item_key, invocation_id, status, detail.dump(), impl_->next_timestamp())
        .run();
  });
}

std::vector<ReviewItem> Store::list_review_items(std::string_view batch_id, std::string_view stage) const {
  return impl_->read([&] {
    if (!batch(batch_id)) throw Error(ErrorCode::kNotFound, "unknown batch " + std::string(batch_id));
    std::vector<ReviewItem> out;
    auto st = impl_->db.prepare(
        "SELECT stage, item_key, invocation_id, status, detail FROM stage_outputs WHERE batch_id = ? AND stage = ? "
        "ORDER BY item_key");
    st.bind_all(batch_id, stage);
    while (st.step()) {
      ReviewItem item;
      item.stage = st.text(0);
      item.item_key = st.text(1);
      const auto inv_id = st.optional_text(2);
      item.status = st.text(3);
      item.detail = Json::parse(st.text(4));
      if (inv_id) {
        item.invocation = load_invocation(impl_->db, "invocation_id", *inv_id);
        item.feedback = feedback_for(*inv_id);
      }
      out.push_back(std::move(item));
    }
    return out;
  });
}

void Store::record_event(const AuditEvent& event, std::optional<std::string> dedup_key) {
  impl_->transaction([&] {
    impl_->db
        .prepare("INSERT OR IGNORE INTO events(batch_id, invocation_id, kind, detail, dedup_key, created_at) "
                 "VALUES (?, ?, ?, ?, ?, ?)")
        .bind_all(event.batch_id, event.invocation_id, event.kind, event.detail.dump(), dedup_key,
                  impl_->next_timestamp())
        .run();
  });
}

std::vector<AuditEvent> Store::events(std::string_view batch_id, std::string_view kind) const {
  return impl_->read([&] {
    std::vector<AuditEvent> out;
    auto st = impl_->db.prepare(
        "SELECT event_id, batch_id, invocation_id, kind, detail, created_at FROM events "
        "WHERE (?1 = '' OR batch_id = ?1) AND (?2 = '' OR kind = ?2) ORDER BY event_id");
    st.bind(1, batch_id).bind(2, kind);
    while (st.step()) {
      out.push_back(AuditEvent{st.integer(0), st.optional_text(1), st.optional_text(2), st.text(3),
                               Json::parse(st.text(4)), st.integer(5)});
    }
    return out;
  });
}

Json spec_to_json(const SubroutineSpec& spec) {
  Json j = Json::object();
  j["name"] = spec.name;
  j["task_doc"] = spec.task_doc;
  j["input_schema"] = constraint_json(spec.input_schema);
  j["output_schema"] = constraint_json(spec.output_schema);
  j["context"] = spec.context ? Json(*spec.context) : Json(nullptr);
  return j;
}

SubroutineSpec spec_from_json(const Json& j) {
  SubroutineSpec spec;
  spec.name = j.at("name").get<std::string>();
  spec.task_doc = j.at("task_doc").get<std::string>();
  spec.input_schema = Schema::from_constraint(j.at("input_schema"));
  spec.output_schema = Schema::from_constraint(j.at("output_schema"));
  if (j.contains("context") && !j.at("context").is_null()) spec.context = j.at("context").get<std::string>();
  return spec;
}

}  // namespace lmsub
