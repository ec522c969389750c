#include "lmsub/engine.hpp"

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"

namespace lmsub {

std::string subroutine_id_for(const SubroutineSpec& spec) {
  const std::string material = serialize_declaration(spec) + "\n" + emit_constraint_schema(spec.input_schema) + "\n" +
                               emit_constraint_schema(spec.output_schema);
  return spec.name + "-" + sha256_hex(material).substr(0, 12);
}

Engine::Engine(Store& store, Backend& backend, EngineConfig config)
    : store_(store), backend_(backend), config_(std::move(config)) {}

SubroutineHandle Engine::declare(SubroutineSpec spec) {
  spec.validate();
  SubroutineHandle handle{subroutine_id_for(spec), spec};
  SubroutineRecord record;
  record.subroutine_id = handle.subroutine_id;
  record.name = spec.name;
  record.spec = spec_to_json(spec);
  record.declaration = serialize_declaration(spec);
  store_.upsert_subroutine(record);
  store_.put_schema(spec.input_schema);
  store_.put_schema(spec.output_schema);
  return handle;
}

bandit::BanditState Engine::state_for(std::string_view subroutine_id, const std::optional<std::string>& batch_id,
                                      std::vector<std::string>* prompts,
                                      std::optional<std::string>* snapshot_id) const {
  bandit::BanditState state;
  if (batch_id) {
    auto snap = store_.ensure_snapshot(*batch_id, subroutine_id);
    state = snap.state;
    if (prompts) *prompts = snap.prompts;
    if (snapshot_id) *snapshot_id = snap.snapshot_id;
  } else {
    state = store_.bandit_state(subroutine_id);
    if (prompts) {
      prompts->clear();
      for (const auto& a : store_.arms(subroutine_id)) prompts->push_back(a.prompt);
    }
  }
  state.beta = bandit::beta_at(config_.schedule, state.trial_index);
  return state;
}

bandit::Distribution Engine::distribution(std::string_view subroutine_id,
                                          const std::optional<std::string>& batch_id) const {
  return bandit::sample_distribution(state_for(subroutine_id, batch_id, nullptr, nullptr), config_.explore_prior);
}

double Engine::active_beta(std::string_view subroutine_id, const std::optional<std::string>& batch_id) const {
  return state_for(subroutine_id, batch_id, nullptr, nullptr).beta;
}

Invocation Engine::invoke(const SubroutineHandle& handle, const Json& input, const std::vector<std::string>& parents,
                          const InvokeOptions& options) {
  const Schema& in_schema = options.input_schema ? *options.input_schema : handle.spec.input_schema;
  const Schema& out_schema = options.output_schema ? *options.output_schema : handle.spec.output_schema;

  auto checked = validate_payload(in_schema, input);
  if (!checked.ok()) {
    throw Error(ErrorCode::kInputInvalid, handle.spec.name + ": input " + checked.violation->field + ": " +
                                              checked.violation->message);
  }
  if (options.idempotency_key) {
    if (auto existing = store_.invocation_by_key(*options.idempotency_key)) return *existing;
  }

  std::uint64_t seed;
  if (options.idempotency_key) {
    seed = hash64(std::to_string(config_.seed) + "\n" + *options.idempotency_key);
  } else {
    seed = mix64(config_.seed ^ mix64(counter_.fetch_add(1) + 0x51ed27));
  }

  std::vector<std::string> prompts;
  std::optional<std::string> snapshot_id;
  const auto state = state_for(handle.subroutine_id, options.batch_id, &prompts, &snapshot_id);
  const auto choice = bandit::draw(bandit::sample_distribution(state, config_.explore_prior), mix64(seed));

  std::string arm_id;
  std::string prompt;
  if (choice == bandit::kExplore) {
    SynthesisRequest req;
    req.spec = &handle.spec;
    req.context = handle.spec.context;
    req.ordinal = static_cast<std::int64_t>(store_.arms(handle.subroutine_id).size());
    req.seed = mix64(seed + 1);
    prompt = backend_.synthesize_prompt(req);
    if (prompt.empty()) throw Error(ErrorCode::kEmptyGeneration, "synthesized prompt is empty");
    arm_id = "arm-" + sha256_hex(prompt).substr(0, 16);
  } else {
    arm_id = choice;
    for (std::size_t i = 0; i < state.arms.size(); ++i) {
      if (state.arms[i].arm_id == choice) prompt = prompts[i];
    }
  }

  Invocation inv;
  inv.subroutine_id = handle.subroutine_id;
  inv.arm_id = arm_id;
  inv.role = options.role;
  inv.critiques = options.critiques;
  inv.input = *checked.record;
  inv.input_schema_hash = store_.put_schema(in_schema);
  inv.output_schema_hash = store_.put_schema(out_schema);
  inv.user_payload = format_user_payload(in_schema, *checked.record, options.revision);
  inv.parent_ids = parents;
  inv.idempotency_key = options.idempotency_key;
  inv.batch_id = options.batch_id;
  inv.snapshot_id = snapshot_id;
  inv.gen_seed = mix64(seed + 2);

  GenerationRequest req;
  req.system_prompt = prompt;
  req.user_payload = inv.user_payload;
  req.constraint = emit_constraint_schema(out_schema);
  req.temperature = config_.temperature;
  req.seed = inv.gen_seed;
  auto gen = generate_validated(backend_, req, out_schema, config_.max_retries);
  inv.raw_output = gen.raw_text;
  inv.attempt = gen.attempt;
  if (gen.record) {
    inv.output = gen.record;
    inv.status = InvocationStatus::kSucceeded;
  } else {
    inv.status = InvocationStatus::kFailed;
    inv.error = gen.error;
  }
  return store_.persist_invocation(std::move(inv), prompt);
}

namespace {

SubroutineSpec ingest_spec() {
  SubroutineSpec s;
  s.name = "letter_ingest";
  s.task_doc = "Record a letter entering the system.";
  s.input_schema = Schema({FieldSpec::text("letter_id"), FieldSpec::text("text"), FieldSpec::text("metadata")});
  s.output_schema = Schema({FieldSpec::text("letter_id")});
  return s;
}

}  // namespace

Invocation Engine::ingest(const std::string& letter_id, const std::string& text, const Json& metadata,
                          const std::optional<std::string>& batch_id) {
  static const SubroutineSpec spec = ingest_spec();
  const auto handle = declare(spec);
  Invocation inv;
  inv.subroutine_id = handle.subroutine_id;
  inv.role = "ingest";
  inv.input = Json{{"letter_id", letter_id}, {"text", text}, {"metadata", metadata.dump()}};
  inv.output = Json{{"letter_id", letter_id}};
  inv.raw_output = inv.output->dump();
  inv.input_schema_hash = schema_hash(spec.input_schema);
  inv.output_schema_hash = schema_hash(spec.output_schema);
  inv.idempotency_key = "ingest/" + (batch_id ? *batch_id + "/" : std::string()) + letter_id + "/" +
                        sha256_hex(text).substr(0, 16);
  inv.batch_id = batch_id;
  return store_.persist_invocation(std::move(inv));
}

ReplayResult Engine::replay(std::string_view invocation_id) {
  auto inv = store_.invocation(invocation_id);
  if (!inv) throw Error(ErrorCode::kNotFound, "unknown invocation " + std::string(invocation_id));
  if (inv->arm_id.empty()) return ReplayResult{inv->raw_output, inv->raw_output};
  auto arm = store_.arm(inv->subroutine_id, inv->arm_id);
  auto constraint = store_.schema_document(inv->output_schema_hash);
  if (!arm || !constraint) throw Error(ErrorCode::kNotFound, "replay material missing for " + inv->invocation_id);
  GenerationRequest req;
  req.system_prompt = arm->prompt;
  req.user_payload = inv->user_payload;
  req.constraint = constraint->dump();
  req.temperature = config_.temperature;
  req.seed = inv->gen_seed;
  req.attempt = inv->attempt;
  return ReplayResult{inv->raw_output, backend_.generate(req).raw_text};
}

}  // namespace lmsub
