#include "lmsub/error.hpp"

namespace lmsub {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kSchemaInvalid: return "schema-invalid";
    case ErrorCode::kInputInvalid: return "input-invalid";
    case ErrorCode::kUnknownArm: return "unknown-arm";
    case ErrorCode::kOutOfRange: return "out-of-range";
    case ErrorCode::kConstraintViolation: return "constraint-violation";
    case ErrorCode::kBackendUnreachable: return "backend-unreachable";
    case ErrorCode::kUnknownFingerprint: return "unknown-fingerprint";
    case ErrorCode::kEmptyGeneration: return "empty-generation";
    case ErrorCode::kDuplicateId: return "duplicate-id";
    case ErrorCode::kDanglingParent: return "dangling-parent";
    case ErrorCode::kCycle: return "cycle";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kLeaseNotHeld: return "lease-not-held";
    case ErrorCode::kCitationRejected: return "citation-rejected";
    case ErrorCode::kLoopFailed: return "loop-failed";
    case ErrorCode::kStorage: return "storage";
  }
  return "unknown";
}

}  // namespace lmsub
