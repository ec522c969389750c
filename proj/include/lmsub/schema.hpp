#pragma once

// Typed field and schema definitions for subroutine inputs and outputs.
//
// A Schema renders to a constraint document (a JSON-Schema object subset)
// that is sent to generation backends, and validates returned payloads in
// strict mode: every declared field must be present and conform, and no
// undeclared field may appear.
//
// Constraint document format (compact JSON, keys in this order):
//
//   schema  := {"type":"object","properties":{<name>: field, ...},
//               "required":[<name>, ...],"additionalProperties":false}
//   text    := {"type":"string"[,"description":doc]}
//   integer := {"type":"integer"[,"description":doc]}
//   bounded := {"type":"integer","minimum":lo,"maximum":hi[,"description":doc]}
//   enum    := {"type":"string","enum":[v, ...][,"description":doc]}
//   list    := {"type":"array","items":field[,"minItems":n][,"description":doc]}
//   record  := {"type":"object","properties":{...},"required":[...],
//               "additionalProperties":false[,"description":doc]}
//
// Properties appear in declaration order and "required" lists every field.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lmsub/json.hpp"

namespace lmsub {

enum class FieldKind { kText, kInteger, kBoundedInteger, kEnumeration, kList, kRecord };

std::string_view to_string(FieldKind kind);

inline constexpr int kMaxNestingDepth = 4;

struct FieldSpec {
  std::string name;
  FieldKind kind = FieldKind::kText;
  std::string doc;
  std::int64_t lo = 0;              // kBoundedInteger
  std::int64_t hi = 0;              // kBoundedInteger
  std::vector<std::string> values;  // kEnumeration
  std::vector<FieldSpec> children;  // kList: [element]; kRecord: fields
  std::size_t min_items = 0;        // kList

  static FieldSpec text(std::string name, std::string doc = {});
  static FieldSpec integer(std::string name, std::string doc = {});
  static FieldSpec bounded(std::string name, std::int64_t lo, std::int64_t hi,
                           std::string doc = {});
  static FieldSpec enumeration(std::string name, std::vector<std::string> values,
                               std::string doc = {});
  static FieldSpec list(std::string name, FieldSpec element, std::string doc = {},
                        std::size_t min_items = 0);
  static FieldSpec record(std::string name, std::vector<FieldSpec> fields,
                          std::string doc = {});

  const FieldSpec& element() const { return children.front(); }

  // Container levels (lists and records) at and below this field.
  int nesting_depth() const;

  friend bool operator==(const FieldSpec&, const FieldSpec&) = default;
};

bool is_identifier(std::string_view name);

class Schema {
 public:
  Schema() = default;

  // Throws Error(kSchemaInvalid) on duplicate or malformed names, lo > hi,
  // empty or repeated enumeration values, or nesting deeper than
  // kMaxNestingDepth.
  explicit Schema(std::vector<FieldSpec> fields);

  const std::vector<FieldSpec>& fields() const { return fields_; }
  const FieldSpec* find(std::string_view name) const;
  bool empty() const { return fields_.empty(); }

  // Reconstructs a schema from its constraint document.
  static Schema from_constraint(const Json& document);

  friend bool operator==(const Schema&, const Schema&) = default;

 private:
  std::vector<FieldSpec> fields_;
};

Json constraint_json(const Schema& schema);

// Deterministic compact rendering of constraint_json.
std::string emit_constraint_schema(const Schema& schema);

// Hex SHA-256 of the constraint document.
std::string schema_hash(const Schema& schema);

enum class ViolationReason { kNotAnObject, kMissingField, kKindMismatch, kOutOfBounds, kUnknownField };

std::string_view to_string(ViolationReason reason);

struct Violation {
  std::string field;  // dotted path, e.g. "concerns[0].quotes"
  ViolationReason reason;
  std::string message;
};

struct ValidationResult {
  std::optional<Json> record;  // canonical record (declaration order) on success
  std::optional<Violation> violation;

  bool ok() const { return record.has_value(); }
};

ValidationResult validate_payload(const Schema& schema, const Json& payload);

// Parses text as JSON before validating; unparseable text is reported as
// kNotAnObject on field "$".
ValidationResult validate_payload_text(const Schema& schema, std::string_view text);

struct SubroutineSpec {
  std::string name;
  std::string task_doc;
  Schema input_schema;
  Schema output_schema;
  std::optional<std::string> context;

  // Throws Error(kSchemaInvalid) if the name is not an identifier or the
  // task description is empty.
  void validate() const;

  friend bool operator==(const SubroutineSpec&, const SubroutineSpec&) = default;
};

}  // namespace lmsub
