#include "lmsub/schema.hpp"

#include <algorithm>
#include <set>

#include "lmsub/error.hpp"
#include "lmsub/hashing.hpp"

namespace lmsub {

std::string_view to_string(FieldKind kind) {
  switch (kind) {
    case FieldKind::kText: return "text";
    case FieldKind::kInteger: return "integer";
    case FieldKind::kBoundedInteger: return "bounded-integer";
    case FieldKind::kEnumeration: return "enumeration";
    case FieldKind::kList: return "list";
    case FieldKind::kRecord: return "record";
  }
  return "unknown";
}

std::string_view to_string(ViolationReason reason) {
  switch (reason) {
    case ViolationReason::kNotAnObject: return "not-an-object";
    case ViolationReason::kMissingField: return "missing-field";
    case ViolationReason::kKindMismatch: return "kind-mismatch";
    case ViolationReason::kOutOfBounds: return "out-of-bounds";
    case ViolationReason::kUnknownField: return "unknown-field";
  }
  return "unknown";
}

FieldSpec FieldSpec::text(std::string name, std::string doc) {
  FieldSpec f;
  f.name = std::move(name);
  f.kind = FieldKind::kText;
  f.doc = std::move(doc);
  return f;
}

FieldSpec FieldSpec::integer(std::string name, std::string doc) {
  FieldSpec f = text(std::move(name), std::move(doc));
  f.kind = FieldKind::kInteger;
  return f;
}

FieldSpec FieldSpec::bounded(std::string name, std::int64_t lo, std::int64_t hi,
                             std::string doc) {
  FieldSpec f = text(std::move(name), std::move(doc));
  f.kind = FieldKind::kBoundedInteger;
  f.lo = lo;
  f.hi = hi;
  return f;
}

FieldSpec FieldSpec::enumeration(std::string name, std::vector<std::string> values,
                                 std::string doc) {
  FieldSpec f = text(std::move(name), std::move(doc));
  f.kind = FieldKind::kEnumeration;
  f.values = std::move(values);
  return f;
}

FieldSpec FieldSpec::list(std::string name, FieldSpec element, std::string doc,
                          std::size_t min_items) {
  FieldSpec f = text(std::move(name), std::move(doc));
  f.kind = FieldKind::kList;
  f.children.push_back(std::move(element));
  f.min_items = min_items;
  return f;
}

FieldSpec FieldSpec::record(std::string name, std::vector<FieldSpec> fields,
                            std::string doc) {
  FieldSpec f = text(std::move(name), std::move(doc));
  f.kind = FieldKind::kRecord;
  f.children = std::move(fields);
  return f;
}

int FieldSpec::nesting_depth() const {
  if (kind != FieldKind::kList && kind != FieldKind::kRecord) return 0;
  int deepest = 0;
  for (const auto& child : children) deepest = std::max(deepest, child.nesting_depth());
  return 1 + deepest;
}

bool is_identifier(std::string_view name) {
  if (name.empty()) return false;
  auto alpha = [](char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; };
  auto digit = [](char c) { return c >= '0' && c <= '9'; };
  if (!alpha(name.front())) return false;
  return std::all_of(name.begin(), name.end(), [&](char c) { return alpha(c) || digit(c); });
}

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::kSchemaInvalid, what); }

void check_fields(const std::vector<FieldSpec>& fields, const std::string& where);

void check_field(const FieldSpec& f, const std::string& where) {
  switch (f.kind) {
    case FieldKind::kText:
    case FieldKind::kInteger:
      break;
    case FieldKind::kBoundedInteger:
      if (f.lo > f.hi) invalid(where + ": bounded-integer requires lo <= hi");
      break;
    case FieldKind::kEnumeration: {
      if (f.values.empty()) invalid(where + ": enumeration needs at least one value");
      std::set<std::string> seen;
      for (const auto& v : f.values) {
        if (v.empty()) invalid(where + ": empty enumeration value");
        if (!seen.insert(v).second) invalid(where + ": repeated enumeration value '" + v + "'");
      }
      break;
    }
    case FieldKind::kList:
      if (f.children.size() != 1) invalid(where + ": list needs exactly one element spec");
      check_field(f.children.front(), where + "[]");
      break;
    case FieldKind::kRecord:
      check_fields(f.children, where + ".");
      break;
  }
}

void check_fields(const std::vector<FieldSpec>& fields, const std::string& prefix) {
  std::set<std::string_view> names;
  for (const auto& f : fields) {
    if (!is_identifier(f.name)) invalid("field name '" + prefix + f.name + "' is not an identifier");
    if (!names.insert(f.name).second) invalid("duplicate field name '" + prefix + f.name + "'");
    check_field(f, prefix + f.name);
  }
}

Json field_json(const FieldSpec& f);

Json object_json(const std::vector<FieldSpec>& fields) {
  Json out = Json::object();
  out["type"] = "object";
  Json props = Json::object();
  Json required = Json::array();
  for (const auto& f : fields) {
    props[f.name] = field_json(f);
    required.push_back(f.name);
  }
  out["properties"] = std::move(props);
  out["required"] = std::move(required);
  out["additionalProperties"] = false;
  return out;
}

Json field_json(const FieldSpec& f) {
  Json out = Json::object();
  switch (f.kind) {
    case FieldKind::kText:
      out["type"] = "string";
      break;
    case FieldKind::kInteger:
      out["type"] = "integer";
      break;
    case FieldKind::kBoundedInteger:
      out["type"] = "integer";
      out["minimum"] = f.lo;
      out["maximum"] = f.hi;
      break;
    case FieldKind::kEnumeration:
      out["type"] = "string";
      out["enum"] = f.values;
      break;
    case FieldKind::kList:
      out["type"] = "array";
      out["items"] = field_json(f.element());
      if (f.min_items > 0) out["minItems"] = f.min_items;
      break;
    case FieldKind::kRecord:
      out = object_json(f.children);
      break;
  }
  if (!f.doc.empty()) out["description"] = f.doc;
  return out;
}

FieldSpec field_from_json(const std::string& name, const Json& j);

std::vector<FieldSpec> fields_from_object(const Json& j) {
  if (!j.is_object() || j.value("type", "") != "object") invalid("constraint is not an object schema");
  std::vector<FieldSpec> fields;
  if (j.contains("properties")) {
    for (const auto& [key, value] : j.at("properties").items()) fields.push_back(field_from_json(key, value));
  }
  return fields;
}

FieldSpec field_from_json(const std::string& name, const Json& j) {
  if (!j.is_object() || !j.contains("type")) invalid("constraint field '" + name + "' has no type");
  const std::string doc = j.value("description", "");
  const std::string type = j.at("type").get<std::string>();
  if (type == "string") {
    if (j.contains("enum")) return FieldSpec::enumeration(name, j.at("enum").get<std::vector<std::string>>(), doc);
    return FieldSpec::text(name, doc);
  }
  if (type == "integer") {
    if (j.contains("minimum") || j.contains("maximum")) {
      return FieldSpec::bounded(name, j.at("minimum").get<std::int64_t>(), j.at("maximum").get<std::int64_t>(), doc);
    }
    return FieldSpec::integer(name, doc);
  }
  if (type == "array") {
    return FieldSpec::list(name, field_from_json("item", j.at("items")), doc, j.value("minItems", std::size_t{0}));
  }
  if (type == "object") return FieldSpec::record(name, fields_from_object(j), doc);
  invalid("constraint field '" + name + "' has unsupported type '" + type + "'");
}

bool is_integer(const Json& v) { return v.is_number_integer() || v.is_number_unsigned(); }

std::optional<Violation> check_value(const FieldSpec& f, const Json& v, const std::string& path, Json& out);

std::optional<Violation> check_object(const std::vector<FieldSpec>& fields, const Json& v,
                                      const std::string& prefix, Json& out) {
  const std::string where = prefix.empty() ? "$" : prefix;
  if (!v.is_object()) return Violation{where, ViolationReason::kNotAnObject, where + " is not an object"};
  out = Json::object();
  for (const auto& f : fields) {
    const std::string path = prefix.empty() ? f.name : prefix + "." + f.name;
    auto it = v.find(f.name);
    if (it == v.end()) return Violation{path, ViolationReason::kMissingField, "missing field " + path};
    Json child;
    if (auto bad = check_value(f, *it, path, child)) return bad;
    out[f.name] = std::move(child);
  }
  for (const auto& [key, value] : v.items()) {
    const bool known = std::any_of(fields.begin(), fields.end(), [&](const FieldSpec& f) { return f.name == key; });
    if (!known) {
      const std::string path = prefix.empty() ? key : prefix + "." + key;
      return Violation{path, ViolationReason::kUnknownField, "unknown field " + path};
    }
  }
  return std::nullopt;
}

std::optional<Violation> check_value(const FieldSpec& f, const Json& v, const std::string& path, Json& out) {
  auto mismatch = [&](std::string_view expected) {
    return Violation{path, ViolationReason::kKindMismatch, path + ": expected " + std::string(expected)};
  };
  switch (f.kind) {
    case FieldKind::kText:
      if (!v.is_string()) return mismatch("text");
      out = v;
      return std::nullopt;
    case FieldKind::kInteger:
      if (!is_integer(v)) return mismatch("integer");
      out = v;
      return std::nullopt;
    case FieldKind::kBoundedInteger: {
      if (!is_integer(v)) return mismatch("integer");
      if (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX)) {
        return Violation{path, ViolationReason::kOutOfBounds, path + ": out of bounds"};
      }
      const auto n = v.get<std::int64_t>();
      if (n < f.lo || n > f.hi) {
        return Violation{path, ViolationReason::kOutOfBounds,
                         path + ": " + std::to_string(n) + " outside [" + std::to_string(f.lo) + ", " +
                             std::to_string(f.hi) + "]"};
      }
      out = n;
      return std::nullopt;
    }
    case FieldKind::kEnumeration: {
      if (!v.is_string()) return mismatch("enumeration value");
      const auto s = v.get<std::string>();
      if (std::find(f.values.begin(), f.values.end(), s) == f.values.end()) {
        return Violation{path, ViolationReason::kOutOfBounds, path + ": '" + s + "' is not an allowed value"};
      }
      out = v;
      return std::nullopt;
    }
    case FieldKind::kList: {
      if (!v.is_array()) return mismatch("list");
      if (v.size() < f.min_items) {
        return Violation{path, ViolationReason::kOutOfBounds,
                         path + ": needs at least " + std::to_string(f.min_items) + " items"};
      }
      out = Json::array();
      for (std::size_t i = 0; i < v.size(); ++i) {
        Json item;
        if (auto bad = check_value(f.element(), v[i], path + "[" + std::to_string(i) + "]", item)) return bad;
        out.push_back(std::move(item));
      }
      return std::nullopt;
    }
    case FieldKind::kRecord:
      if (!v.is_object()) return mismatch("record");
      return check_object(f.children, v, path, out);
  }
  return mismatch("known kind");
}

}  // namespace

Schema::Schema(std::vector<FieldSpec> fields) : fields_(std::move(fields)) {
  check_fields(fields_, "");
  for (const auto& f : fields_) {
    if (f.nesting_depth() > kMaxNestingDepth) {
      invalid("field '" + f.name + "' nests deeper than " + std::to_string(kMaxNestingDepth));
    }
  }
}

const FieldSpec* Schema::find(std::string_view name) const {
  for (const auto& f : fields_) {
    if (f.name == name) return &f;
  }
  return nullptr;
}

Schema Schema::from_constraint(const Json& document) { return Schema(fields_from_object(document)); }

Json constraint_json(const Schema& schema) { return object_json(schema.fields()); }

std::string emit_constraint_schema(const Schema& schema) { return constraint_json(schema).dump(); }

std::string schema_hash(const Schema& schema) { return sha256_hex(emit_constraint_schema(schema)); }

ValidationResult validate_payload(const Schema& schema, const Json& payload) {
  Json record;
  if (auto bad = check_object(schema.fields(), payload, "", record)) return {std::nullopt, std::move(bad)};
  return {std::move(record), std::nullopt};
}

ValidationResult validate_payload_text(const Schema& schema, std::string_view text) {
  Json parsed = Json::parse(text.begin(), text.end(), nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) {
    return {std::nullopt, Violation{"$", ViolationReason::kNotAnObject, "payload is not valid JSON"}};
  }
  return validate_payload(schema, parsed);
}

void SubroutineSpec::validate() const {
  if (!is_identifier(name)) throw Error(ErrorCode::kSchemaInvalid, "subroutine name '" + name + "' is not an identifier");
  if (task_doc.empty()) throw Error(ErrorCode::kSchemaInvalid, "subroutine '" + name + "' has an empty task description");
}

}  // namespace lmsub
