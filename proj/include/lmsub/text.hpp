#pragma once

// UTF-8 helpers. Character offsets throughout the library are Unicode code
// point indices into the decoded text.

#include <cstddef>
#include <string>
#include <string_view>

namespace lmsub::text {

// Invalid bytes decode to U+FFFD.
std::u32string decode_utf8(std::string_view bytes);
std::string encode_utf8(std::u32string_view code_points);

std::size_t length(std::string_view utf8);

// Code points [start, end) of utf8, re-encoded.
std::string slice(std::string_view utf8, std::size_t start, std::size_t end);

}  // namespace lmsub::text
