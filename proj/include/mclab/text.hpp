// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

namespace mclab::text {

/// Canonical hierarchical labels, deduplicated, in first-occurrence order.
using KeywordSet = std::vector<std::string>;

struct DictionaryEntry {
  std::string pattern;
  bool is_regex = false;
  std::vector<std::string> keywords;  // root label first, descendants after
  std::regex compiled;                // populated for regex entries only
};

/// Report-text to keyword mapping. Entries are validated when added, so a
/// bad regular expression surfaces at load time rather than during matching.
///
/// File format: one entry per line, `pattern<TAB>kw1|kw2|...`. A pattern
/// prefixed with `re:` is an ECMAScript regular expression; anything else is
/// a literal. Blank lines and lines starting with `#` are ignored. Within an
/// entry the first keyword is the parent of the ones that follow it.
class KeywordDictionary {
 public:
  void add(std::string pattern, bool is_regex, std::vector<std::string> keywords);

  static KeywordDictionary parse(std::istream& in);
  static KeywordDictionary load(const std::filesystem::path& path);
  /// Starter dictionary covering the synthetic classes.
  static const KeywordDictionary& builtin();

  [[nodiscard]] const std::vector<DictionaryEntry>& entries() const { return entries_; }
  /// Parent label of `label`, or empty when it is a root.
  [[nodiscard]] std::string parent_of(const std::string& label) const;
  [[nodiscard]] bool knows(const std::string& label) const;

 private:
  std::vector<DictionaryEntry> entries_;
  std::map<std::string, std::string> parent_;
};

/// Case-insensitive match of every entry against `report`. Returns the union
/// of matched keywords ordered by where each entry first matched.
KeywordSet extract_keywords(std::string_view report, const KeywordDictionary& dict);

/// Text handed to the text encoder for a keyword set: labels joined by ", ".
std::string keywords_to_text(const KeywordSet& keywords);

/// Lowercase long name for a modality tag, or the lowercased tag itself.
std::string modality_long_name(std::string_view tag);

/// "<modality long name>, <class_name>".
std::string build_prompt(std::string_view modality_tag, std::string_view class_name);

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnknownId = 1;
inline constexpr std::int32_t kStartId = 2;
inline constexpr std::int32_t kEndId = 3;
inline constexpr std::int32_t kFirstWordId = 4;
inline constexpr int kDefaultMaxLen = 64;

/// Lowercased words, split on whitespace and ASCII punctuation.
std::vector<std::string> split_words(std::string_view text);

struct TokenSequence {
  std::vector<std::int32_t> ids;  // always max_len long, zero padded

  /// Number of tokens up to and including the end token.
  [[nodiscard]] int length() const;
  [[nodiscard]] int end_position() const { return length() - 1; }
  bool operator==(const TokenSequence&) const = default;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Words ranked by descending frequency, ties broken lexicographically.
  static Vocabulary fit(const std::vector<std::string>& texts, int max_len = kDefaultMaxLen);

  [[nodiscard]] std::int32_t id_of(const std::string& word) const;
  [[nodiscard]] const std::string& word_of(std::int32_t id) const;
  [[nodiscard]] int size() const { return static_cast<int>(words_.size()); }
  [[nodiscard]] int max_len() const { return max_len_; }

  void write(std::ostream& out) const;
  static Vocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return words_ == other.words_ && max_len_ == other.max_len_;
  }

 private:
  std::vector<std::string> words_;  // index == id, reserved ids included
  std::map<std::string, std::int32_t> index_;
  int max_len_ = kDefaultMaxLen;
};

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab);
/// Words between the start and end tokens (reserved names for pad/unknown).
std::vector<std::string> detokenize(const TokenSequence& tokens, const Vocabulary& vocab);

}  // namespace mclab::text
