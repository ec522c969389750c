#pragma once

#include <string>
#include <vector>

#include "lmsub/backend.hpp"
#include "lmsub/schema.hpp"

namespace fixtures {

inline lmsub::SubroutineSpec rare_letters_spec() {
  using lmsub::FieldSpec;
  lmsub::SubroutineSpec s;
  s.name = "rare_letters";
  s.task_doc = "Count the words in the text that contain any of the letters Q, W, X or Z.";
  s.input_schema = lmsub::Schema({FieldSpec::text("given_text", "text to inspect")});
  s.output_schema = lmsub::Schema({FieldSpec::text("scratch_work", "working notes"),
                                   FieldSpec::integer("character_count", "number of matching words")});
  return s;
}

inline lmsub::PoolEntry entry(std::string prompt, double error_rate, std::string correct, std::string incorrect) {
  lmsub::PoolEntry e;
  e.profile.prompt_fingerprint.clear();
  e.profile.error_rate = error_rate;
  e.profile.correct_behavior = std::move(correct);
  e.profile.incorrect_behavior = std::move(incorrect);
  e.prompt = std::move(prompt);
  return e;
}

// One pool entry per error rate, all answering the rare-letters task.
inline lmsub::ScriptedConfig rare_letters_config(const std::vector<double>& error_rates) {
  lmsub::ScriptedConfig c;
  for (std::size_t i = 0; i < error_rates.size(); ++i) {
    c.pools["rare_letters"].push_back(entry("Rare letters prompt " + std::to_string(i) + ". Count words carefully.",
                                            error_rates[i], "rare_letters_count", "rare_letters_wrong"));
  }
  return c;
}

}  // namespace fixtures
