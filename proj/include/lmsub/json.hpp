#pragma once

#include <json.hpp>

namespace lmsub {

// Insertion-ordered JSON keeps declaration order in payloads and constraint
// documents, which makes their serialized form byte-stable.
using Json = nlohmann::ordered_json;

}  // namespace lmsub
