#pragma once

// JSON renderings of store records, shared by the HTTP API, the CLI and
// the Python module.

#include <string>

#include "lmsub/bandit.hpp"
#include "lmsub/store.hpp"

namespace lmsub::views {

Json invocation(const Invocation& inv);
Json feedback(const FeedbackRecord& f);
Json arm_stats(const bandit::ArmStats& a);
Json arm(const ArmRecord& a);
Json batch(const BatchRecord& b);
Json review_item(const ReviewItem& item);
Json trace(const AuditTrace& t);
Json distribution(const bandit::Distribution& d);

// Indented plain-text rendering of a trace, parents first.
std::string trace_text(const AuditTrace& t);

}  // namespace lmsub::views
