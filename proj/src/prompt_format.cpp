#include "lmsub/prompt_format.hpp"

#include <sstream>

namespace lmsub {
namespace {

std::string kind_label(const FieldSpec& f) {
  switch (f.kind) {
    case FieldKind::kText: return "text";
    case FieldKind::kInteger: return "integer";
    case FieldKind::kBoundedInteger:
      return "integer from " + std::to_string(f.lo) + " to " + std::to_string(f.hi);
    case FieldKind::kEnumeration: {
      std::string out = "one of [";
      for (std::size_t i = 0; i < f.values.size(); ++i) out += (i ? ", " : "") + f.values[i];
      return out + "]";
    }
    case FieldKind::kList: {
      std::string out = "list of " + kind_label(f.element());
      if (f.min_items > 0) out += ", at least " + std::to_string(f.min_items);
      return out;
    }
    case FieldKind::kRecord: return "record";
  }
  return {};
}

void describe_fields(std::ostringstream& out, const std::vector<FieldSpec>& fields, int indent) {
  for (const auto& f : fields) {
    out << std::string(static_cast<std::size_t>(indent) * 2, ' ') << "- " << f.name << " (" << kind_label(f) << ")";
    if (!f.doc.empty()) out << ": " << f.doc;
    out << "\n";
    if (f.kind == FieldKind::kRecord) describe_fields(out, f.children, indent + 1);
    if (f.kind == FieldKind::kList && f.element().kind == FieldKind::kRecord) {
      describe_fields(out, f.element().children, indent + 1);
    }
  }
}

std::string shape_of(const FieldSpec& f) {
  switch (f.kind) {
    case FieldKind::kText: return "string";
    case FieldKind::kInteger: return "integer";
    case FieldKind::kBoundedInteger: return "integer (" + std::to_string(f.lo) + "-" + std::to_string(f.hi) + ")";
    case FieldKind::kEnumeration: return Json(f.values).dump();
    case FieldKind::kList: return "[" + shape_of(f.element()) + ", ...]";
    case FieldKind::kRecord: {
      std::string out = "{";
      for (std::size_t i = 0; i < f.children.size(); ++i) {
        out += (i ? ", " : "") + Json(f.children[i].name).dump() + ": " + shape_of(f.children[i]);
      }
      return out + "}";
    }
  }
  return {};
}

}  // namespace

std::string serialize_declaration(const SubroutineSpec& spec) {
  std::ostringstream out;
  out << "Subroutine: " << spec.name << "\n\nTask:\n" << spec.task_doc << "\n\nInput:\n";
  describe_fields(out, spec.input_schema.fields(), 0);
  if (spec.input_schema.empty()) out << "(none)\n";
  out << "\nOutput:\n";
  describe_fields(out, spec.output_schema.fields(), 0);
  if (spec.output_schema.empty()) out << "(none)\n";
  if (spec.context) out << "\nContext:\n" << *spec.context << "\n";
  return out.str();
}

std::string render_schema_block(const Schema& output_schema) {
  std::ostringstream out;
  out << "Your response must be a JSON object adhering to the following schema:\n\n```json\n{\n";
  const auto& fields = output_schema.fields();
  for (std::size_t i = 0; i < fields.size(); ++i) {
    out << "  " << Json(fields[i].name).dump() << ": " << shape_of(fields[i]) << (i + 1 < fields.size() ? "," : "");
    if (!fields[i].doc.empty()) out << " // " << fields[i].doc;
    out << "\n";
  }
  out << "}\n```\n";
  return out.str();
}

std::string format_user_payload(const Schema& input_schema, const Json& record,
                                const std::optional<RevisionContext>& revision) {
  std::string out;
  auto section = [&](const std::string& name, const std::string& value) {
    if (!out.empty()) out += "\n";
    out += "<<<" + name + ">>>\n" + value;
  };
  for (const auto& f : input_schema.fields()) {
    const Json& v = record.at(f.name);
    section(f.name, f.kind == FieldKind::kText ? v.get<std::string>() : v.dump());
  }
  if (revision) {
    section("previous_candidate", revision->previous_candidate.dump());
    section("previous_critique", revision->previous_critique.dump());
  }
  return out;
}

PayloadSections parse_user_payload(std::string_view payload) {
  PayloadSections sections;
  std::size_t pos = 0;
  while (pos <= payload.size()) {
    std::size_t eol = payload.find('\n', pos);
    if (eol == std::string_view::npos) eol = payload.size();
    const auto line = payload.substr(pos, eol - pos);
    const bool header = line.size() > 6 && line.substr(0, 3) == "<<<" && line.substr(line.size() - 3) == ">>>" &&
                        is_identifier(line.substr(3, line.size() - 6));
    if (header) {
      if (!sections.empty() && !sections.back().second.empty() && sections.back().second.back() == '\n') {
        sections.back().second.pop_back();
      }
      sections.emplace_back(std::string(line.substr(3, line.size() - 6)), std::string());
    } else if (!sections.empty()) {
      sections.back().second.append(line);
      if (eol < payload.size()) sections.back().second.push_back('\n');
    }
    if (eol == payload.size()) break;
    pos = eol + 1;
  }
  return sections;
}

const std::string* find_section(const PayloadSections& sections, std::string_view name) {
  for (const auto& [k, v] : sections) {
    if (k == name) return &v;
  }
  return nullptr;
}

}  // namespace lmsub
