#include <random>

#include "doctest.h"
#include "lmsub/error.hpp"
#include "lmsub/schema.hpp"

using namespace lmsub;

namespace {

Schema rare_letters_output() {
  return Schema({FieldSpec::text("scratch_work", "A place for scratch work"),
                 FieldSpec::integer("character_count", "Number of instances in the text")});
}

// Random schema generator for property checks.
FieldSpec random_field(std::mt19937_64& rng, const std::string& name, int depth) {
  const int pick = static_cast<int>(rng() % (depth < 3 ? 6 : 4));
  switch (pick) {
    case 0: return FieldSpec::text(name, rng() % 2 ? "doc " + name : "");
    case 1: return FieldSpec::integer(name);
    case 2: {
      const auto lo = static_cast<std::int64_t>(rng() % 10);
      return FieldSpec::bounded(name, lo, lo + static_cast<std::int64_t>(rng() % 10));
    }
    case 3: return FieldSpec::enumeration(name, {"a", "b", "c"});
    case 4: return FieldSpec::list(name, random_field(rng, "item", depth + 1), "", rng() % 2);
    default: {
      std::vector<FieldSpec> children;
      const int n = 1 + static_cast<int>(rng() % 3);
      for (int i = 0; i < n; ++i) children.push_back(random_field(rng, "f" + std::to_string(i), depth + 1));
      return FieldSpec::record(name, std::move(children));
    }
  }
}

Schema random_schema(std::mt19937_64& rng) {
  std::vector<FieldSpec> fields;
  const int n = static_cast<int>(rng() % 5);
  for (int i = 0; i < n; ++i) fields.push_back(random_field(rng, "field_" + std::to_string(i), 1));
  return Schema(std::move(fields));
}

Json random_value(std::mt19937_64& rng, const FieldSpec& f) {
  switch (f.kind) {
    case FieldKind::kText: return "t" + std::to_string(rng() % 100);
    case FieldKind::kInteger: return static_cast<std::int64_t>(rng() % 200) - 100;
    case FieldKind::kBoundedInteger: return f.lo + static_cast<std::int64_t>(rng() % (f.hi - f.lo + 1));
    case FieldKind::kEnumeration: return f.values[rng() % f.values.size()];
    case FieldKind::kList: {
      Json arr = Json::array();
      const std::size_t n = f.min_items + rng() % 3;
      for (std::size_t i = 0; i < n; ++i) arr.push_back(random_value(rng, f.element()));
      return arr;
    }
    case FieldKind::kRecord: {
      Json obj = Json::object();
      for (const auto& c : f.children) obj[c.name] = random_value(rng, c);
      return obj;
    }
  }
  return nullptr;
}

}  // namespace

TEST_CASE("constraint document for an empty schema declares zero properties") {
  CHECK(emit_constraint_schema(Schema{}) ==
        R"({"type":"object","properties":{},"required":[],"additionalProperties":false})");
}

TEST_CASE("constraint document for the rare-letters output") {
  const auto doc = Json::parse(emit_constraint_schema(rare_letters_output()));
  CHECK(doc["properties"]["scratch_work"]["type"] == "string");
  CHECK(doc["properties"]["character_count"]["type"] == "integer");
  CHECK(doc["required"] == Json::array({"scratch_work", "character_count"}));
  CHECK(emit_constraint_schema(rare_letters_output()) == emit_constraint_schema(rare_letters_output()));
}

TEST_CASE("bounded integers pass their bounds through") {
  const Schema s({FieldSpec::bounded("rating", 1, 10)});
  CHECK(emit_constraint_schema(s) ==
        R"({"type":"object","properties":{"rating":{"type":"integer","minimum":1,"maximum":10}},)"
        R"("required":["rating"],"additionalProperties":false})");
}

TEST_CASE("schema construction rejects invalid declarations") {
  CHECK_THROWS_AS(Schema({FieldSpec::text("a"), FieldSpec::integer("a")}), Error);
  CHECK_THROWS_AS(Schema({FieldSpec::text("")}), Error);
  CHECK_THROWS_AS(Schema({FieldSpec::text("9lives")}), Error);
  CHECK_THROWS_AS(Schema({FieldSpec::bounded("r", 5, 1)}), Error);
  CHECK_THROWS_AS(Schema({FieldSpec::enumeration("e", {})}), Error);
  CHECK_THROWS_AS(Schema({FieldSpec::enumeration("e", {"x", "x"})}), Error);
  // Five container levels exceed the cap of four.
  auto deep = FieldSpec::text("leaf");
  for (int i = 0; i < 5; ++i) deep = FieldSpec::record("r" + std::to_string(i), {deep});
  CHECK_THROWS_AS(Schema({deep}), Error);
  auto ok = FieldSpec::text("leaf");
  for (int i = 0; i < 4; ++i) ok = FieldSpec::record("r" + std::to_string(i), {ok});
  CHECK_NOTHROW(Schema({ok}));
}

TEST_CASE("validate_payload examples") {
  const Schema n({FieldSpec::integer("n")});
  auto r = validate_payload(n, Json::parse(R"({"n":4})"));
  REQUIRE(r.ok());
  CHECK((*r.record)["n"] == 4);

  const Schema rating({FieldSpec::bounded("rating", 1, 10)});
  r = validate_payload(rating, Json::parse(R"({"rating":11})"));
  REQUIRE(r.violation);
  CHECK(r.violation->reason == ViolationReason::kOutOfBounds);
  CHECK(r.violation->field == "rating");

  const Schema ab({FieldSpec::text("a"), FieldSpec::integer("b")});
  r = validate_payload(ab, Json::parse(R"({"a":"x"})"));
  REQUIRE(r.violation);
  CHECK(r.violation->reason == ViolationReason::kMissingField);
  CHECK(r.violation->field == "b");

  r = validate_payload(ab, Json::parse(R"({"a":"x","b":1,"c":2})"));
  REQUIRE(r.violation);
  CHECK(r.violation->reason == ViolationReason::kUnknownField);

  r = validate_payload(ab, Json::parse(R"({"a":"x","b":1.5})"));
  REQUIRE(r.violation);
  CHECK(r.violation->reason == ViolationReason::kKindMismatch);

  CHECK(validate_payload_text(ab, "not json").violation->reason == ViolationReason::kNotAnObject);
}

TEST_CASE("nested violations report a path") {
  const Schema s({FieldSpec::list(
      "concerns", FieldSpec::record("item", {FieldSpec::text("statement"),
                                             FieldSpec::list("quotes", FieldSpec::text("item"), "", 1)}))});
  auto r = validate_payload(s, Json::parse(R"({"concerns":[{"statement":"s","quotes":["q"]},{"statement":"t","quotes":[]}]})"));
  REQUIRE(r.violation);
  CHECK(r.violation->field == "concerns[1].quotes");
}

TEST_CASE("property: round trips and injectivity over random schemas") {
  std::mt19937_64 rng(1234);
  std::vector<std::pair<Schema, std::string>> seen;
  for (int trial = 0; trial < 300; ++trial) {
    const Schema s = random_schema(rng);
    const auto doc = emit_constraint_schema(s);
    CHECK(Schema::from_constraint(Json::parse(doc)) == s);

    Json payload = Json::object();
    for (const auto& f : s.fields()) payload[f.name] = random_value(rng, f);
    const auto first = validate_payload(s, payload);
    REQUIRE(first.ok());
    const auto second = validate_payload_text(s, first.record->dump());
    REQUIRE(second.ok());
    CHECK(*second.record == *first.record);

    for (const auto& [other, other_doc] : seen) {
      if (!(other == s)) CHECK(other_doc != doc);
    }
    if (seen.size() < 60) seen.emplace_back(s, doc);
  }
}
