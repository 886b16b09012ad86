#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

// Small UTF-8 aware string helpers shared by answer canonicalization,
// F1 normalization and the BM25 tokenizer.
namespace beamaggr::text {

/// Lowercases ASCII and the Latin-1 supplement (U+00C0..U+00DE); other bytes
/// pass through unchanged.
std::string lowercase(std::string_view s);

bool is_space(char c) noexcept;

std::string_view trim(std::string_view s) noexcept;

/// Trims and collapses every run of whitespace to a single space.
std::string collapse_whitespace(std::string_view s);

std::size_t utf8_length(std::string_view s) noexcept;

/// First `count` code points of `s`, never splitting a multi-byte sequence.
std::string utf8_prefix(std::string_view s, std::size_t count);

/// Converts CRLF and lone CR to LF.
std::string normalize_newlines(std::string_view s);

std::vector<std::string> split_whitespace(std::string_view s);

std::string replace_all(std::string s, std::string_view from, std::string_view to);

} // namespace beamaggr::text
