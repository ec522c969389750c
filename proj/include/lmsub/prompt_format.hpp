#pragma once

// Text forms shared by backends and the engine.
//
// User payload format: one section per input field in declaration order,
//
//   <<<field_name>>>
//   value
//
// sections joined by a single newline. Text values are written verbatim;
// every other kind is written as compact JSON. Revision context adds the
// sections previous_candidate and previous_critique (compact JSON) after the
// input fields. A value line that itself looks like a section header is not
// escaped; inputs are expected not to contain one.

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lmsub/json.hpp"
#include "lmsub/schema.hpp"

namespace lmsub {

// Human-readable declaration used inside the prompt-engineer request.
std::string serialize_declaration(const SubroutineSpec& spec);

// Output-schema block appended to synthesized prompts.
std::string render_schema_block(const Schema& output_schema);

struct RevisionContext {
  Json previous_candidate;
  Json previous_critique;
};

std::string format_user_payload(const Schema& input_schema, const Json& record,
                                const std::optional<RevisionContext>& revision = std::nullopt);

using PayloadSections = std::vector<std::pair<std::string, std::string>>;
PayloadSections parse_user_payload(std::string_view payload);
const std::string* find_section(const PayloadSections& sections, std::string_view name);

// The prompt engineer's system prompt, shipped as assets/prompt_engineer_v1.md.
std::string_view meta_prompt();
inline constexpr std::string_view kMetaPromptVersion = "prompt_engineer_v1";

}  // namespace lmsub
