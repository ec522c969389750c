#include "lmsub/views.hpp"

#include <map>
#include <sstream>

namespace lmsub::views {

namespace {

template <typename T>
Json opt(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

std::string one_line(std::string s, std::size_t max = 100) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r' || c == '\t') c = ' ';
  }
  if (s.size() > max) s = s.substr(0, max - 3) + "...";
  return s;
}

}  // namespace

Json invocation(const Invocation& inv) {
  return {{"invocation_id", inv.invocation_id},
          {"subroutine_id", inv.subroutine_id},
          {"arm_id", inv.arm_id.empty() ? Json(nullptr) : Json(inv.arm_id)},
          {"role", inv.role},
          {"critiques", opt(inv.critiques)},
          {"input", inv.input},
          {"output", opt(inv.output)},
          {"raw_output", inv.raw_output},
          {"input_schema_hash", inv.input_schema_hash},
          {"output_schema_hash", inv.output_schema_hash},
          {"parent_ids", inv.parent_ids},
          {"status", std::string(to_string(inv.status))},
          {"error", inv.error},
          {"idempotency_key", opt(inv.idempotency_key)},
          {"batch_id", opt(inv.batch_id)},
          {"snapshot_id", opt(inv.snapshot_id)},
          {"gen_seed", inv.gen_seed},
          {"attempt", inv.attempt},
          {"created_at", inv.created_at}};
}

Json feedback(const FeedbackRecord& f) {
  return {{"feedback_id", f.feedback_id},
          {"invocation_id", f.invocation_id},
          {"source", f.source},
          {"source_invocation_id", opt(f.source_invocation_id)},
          {"reviewer_id", opt(f.reviewer_id)},
          {"ratings", f.ratings},
          {"loss", f.loss},
          {"rationale", f.rationale},
          {"submission_id", opt(f.dedup_key)},
          {"late", f.late},
          {"created_at", f.created_at}};
}

Json arm_stats(const bandit::ArmStats& a) {
  return {{"arm_id", a.arm_id},
          {"pull_count", a.pull_count},
          {"loss_count", a.loss_count},
          {"loss_sum", a.loss_sum},
          {"mean_loss", a.scored() ? Json(a.mean_loss()) : Json(nullptr)}};
}

Json arm(const ArmRecord& a) {
  auto j = arm_stats(a.stats);
  j["subroutine_id"] = a.subroutine_id;
  j["prompt"] = a.prompt;
  j["created_at"] = a.created_at;
  return j;
}

Json batch(const BatchRecord& b) {
  return {{"batch_id", b.batch_id},   {"run_id", b.run_id}, {"ordinal", b.ordinal},
          {"letter_ids", b.letter_ids}, {"state", b.state},   {"created_at", b.created_at}};
}

Json review_item(const ReviewItem& item) {
  Json fb = Json::array();
  for (const auto& f : item.feedback) fb.push_back(feedback(f));
  return {{"stage", item.stage},
          {"item_key", item.item_key},
          {"status", item.status},
          {"invocation", item.invocation ? invocation(*item.invocation) : Json(nullptr)},
          {"detail", item.detail},
          {"feedback", fb}};
}

Json trace(const AuditTrace& t) {
  Json nodes = Json::array();
  for (const auto& n : t.nodes) {
    Json fb = Json::array();
    for (const auto& f : n.feedback) fb.push_back(feedback(f));
    Json node = invocation(n.invocation);
    node["prompt"] = n.prompt;
    node["feedback"] = fb;
    if (n.invocation.output && n.invocation.output->contains("explanation")) {
      node["explanation"] = (*n.invocation.output)["explanation"];
    }
    nodes.push_back(std::move(node));
  }
  Json edges = Json::array();
  for (const auto& e : t.edges) edges.push_back({{"child", e.child}, {"parent", e.parent}});
  return {{"root", t.root}, {"nodes", nodes}, {"edges", edges}};
}

Json distribution(const bandit::Distribution& d) {
  Json out = Json::array();
  for (const auto& e : d.entries) out.push_back({{"arm_id", e.arm_id}, {"loss", e.loss}, {"probability", e.probability}});
  return out;
}

std::string trace_text(const AuditTrace& t) {
  std::map<std::string, std::size_t> depth;
  // Depth from the root, walking child -> parent edges.
  depth[t.root] = 0;
  for (auto it = t.nodes.rbegin(); it != t.nodes.rend(); ++it) {
    const auto d = depth.count(it->invocation.invocation_id) ? depth[it->invocation.invocation_id] : 0;
    for (const auto& p : it->invocation.parent_ids) {
      if (!depth.count(p) || depth[p] < d + 1) depth[p] = d + 1;
    }
  }
  std::ostringstream os;
  os << "trace " << t.root << " (" << t.nodes.size() << " nodes, " << t.edges.size() << " edges)\n";
  for (const auto& n : t.nodes) {
    const auto& inv = n.invocation;
    const std::string indent(2 * depth[inv.invocation_id], ' ');
    os << indent << inv.invocation_id << "  " << inv.role << "  " << inv.subroutine_id << "  "
       << to_string(inv.status) << "\n";
    if (!inv.arm_id.empty()) os << indent << "  arm: " << inv.arm_id << "  prompt: " << one_line(n.prompt) << "\n";
    if (!inv.parent_ids.empty()) {
      os << indent << "  parents:";
      for (const auto& p : inv.parent_ids) os << " " << p;
      os << "\n";
    }
    os << indent << "  input: " << one_line(inv.input.dump()) << "\n";
    if (inv.output) os << indent << "  output: " << one_line(inv.output->dump()) << "\n";
    if (!inv.error.empty()) os << indent << "  error: " << one_line(inv.error) << "\n";
    for (const auto& f : n.feedback) {
      os << indent << "  feedback[" << f.source << (f.late ? ", late" : "") << "] loss " << f.loss;
      if (!f.rationale.empty()) os << ": " << one_line(f.rationale, 80);
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace lmsub::views
