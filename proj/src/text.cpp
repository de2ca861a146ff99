// Copyright 2026 The mclab Authors
// SPDX-License-Identifier: Apache-2.0

#include "mclab/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

#include <nlohmann/json.hpp>

#include "mclab/errors.hpp"

namespace mclab::text {
namespace {

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

constexpr int kVocabFormatVersion = 1;

}  // namespace

void KeywordDictionary::add(std::string pattern, bool is_regex, std::vector<std::string> keywords) {
  if (pattern.empty()) throw ConfigError("keyword dictionary: empty pattern");
  if (keywords.empty()) throw ConfigError("keyword dictionary: pattern '" + pattern + "' has no keywords");
  std::set<std::string> seen;
  for (const auto& kw : keywords) {
    if (kw.empty()) throw ConfigError("keyword dictionary: empty keyword for pattern '" + pattern + "'");
    if (!seen.insert(kw).second)
      throw ConfigError("keyword dictionary: duplicate keyword '" + kw + "' for pattern '" + pattern + "'");
  }
  // Descendants point at the entry's root label; a label may not acquire two
  // different parents across entries.
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    const std::string parent = i == 0 ? std::string() : keywords.front();
    auto it = parent_.find(keywords[i]);
    if (it == parent_.end()) {
      parent_.emplace(keywords[i], parent);
    } else if (i > 0 && it->second != parent) {
      if (!it->second.empty())
        throw ConfigError("keyword dictionary: label '" + keywords[i] + "' has conflicting parents '" +
                          it->second + "' and '" + parent + "'");
      it->second = parent;
    }
  }
  DictionaryEntry entry{std::move(pattern), is_regex, std::move(keywords), {}};
  if (entry.is_regex) {
    try {
      entry.compiled = std::regex(entry.pattern, std::regex::ECMAScript | std::regex::icase);
    } catch (const std::regex_error& e) {
      throw ConfigError("keyword dictionary: invalid regular expression '" + entry.pattern + "': " + e.what());
    }
  }
  entries_.push_back(std::move(entry));
}

KeywordDictionary KeywordDictionary::parse(std::istream& in) {
  KeywordDictionary dict;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line.front() == '#') continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError("keyword dictionary line " + std::to_string(line_no) + ": expected pattern<TAB>keywords");
    std::string pattern = line.substr(0, tab);
    bool is_regex = false;
    if (pattern.rfind("re:", 0) == 0) {
      is_regex = true;
      pattern = pattern.substr(3);
    }
    std::vector<std::string> keywords;
    std::stringstream ks(line.substr(tab + 1));
    std::string kw;
    while (std::getline(ks, kw, '|')) keywords.push_back(trim(kw));
    try {
      dict.add(std::move(pattern), is_regex, std::move(keywords));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (line " + std::to_string(line_no) + ")");
    }
  }
  return dict;
}

KeywordDictionary KeywordDictionary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open keyword dictionary " + path.string());
  return parse(in);
}

const KeywordDictionary& KeywordDictionary::builtin() {
  static const KeywordDictionary dict = [] {
    std::istringstream in(
        "normal fundus\tnormal\n"
        "diabetic retinopathy\tDR\n"
        "mild diabetic retinopathy\tDR|mild DR\n"
        "re:severe non-?proliferative diabetic retinopathy\tDR|severe DR\n"
        "glaucoma\tglaucoma\n"
        "re:(age[- ]related )?macular degeneration\tAMD\n"
        "retinal vein occlusion\tRVO\n"
        "re:pathologic(al)? myopia\tmyopia\n"
        "central serous chorioretinopathy\tCSC\n"
        "choroidal melanoma\tchoroidal melanoma\n");
    return parse(in);
  }();
  return dict;
}

std::string KeywordDictionary::parent_of(const std::string& label) const {
  auto it = parent_.find(label);
  return it == parent_.end() ? std::string() : it->second;
}

bool KeywordDictionary::knows(const std::string& label) const { return parent_.count(label) != 0; }

KeywordSet extract_keywords(std::string_view report, const KeywordDictionary& dict) {
  const std::string lowered = to_lower(report);
  std::vector<std::pair<std::size_t, std::size_t>> hits;  // (position, entry index)
  const auto& entries = dict.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (e.is_regex) {
      std::smatch m;
      if (std::regex_search(lowered, m, e.compiled)) hits.emplace_back(static_cast<std::size_t>(m.position(0)), i);
    } else {
      auto pos = lowered.find(to_lower(e.pattern));
      if (pos != std::string::npos) hits.emplace_back(pos, i);
    }
  }
  std::stable_sort(hits.begin(), hits.end(), [](auto& a, auto& b) { return a.first < b.first; });

  KeywordSet out;
  std::set<std::string> seen;
  auto push = [&](const std::string& kw, auto&& self) -> void {
    if (seen.count(kw)) return;
    if (auto parent = dict.parent_of(kw); !parent.empty()) self(parent, self);
    seen.insert(kw);
    out.push_back(kw);
  };
  for (const auto& [pos, idx] : hits)
    for (const auto& kw : entries[idx].keywords) push(kw, push);
  return out;
}

std::string keywords_to_text(const KeywordSet& keywords) {
  std::string out;
  for (std::size_t i = 0; i < keywords.size(); ++i) {
    if (i) out += ", ";
    out += keywords[i];
  }
  return out;
}

std::string modality_long_name(std::string_view tag) {
  static const std::unordered_map<std::string, std::string> names = {
      {"CFP", "color fundus"},
      {"FFA", "fundus fluorescein angiography"},
      {"ICGA", "indocyanine green angiography"},
      {"FAF", "fundus autofluorescence"},
  };
  auto it = names.find(std::string(tag));
  return it == names.end() ? to_lower(tag) : it->second;
}

std::string build_prompt(std::string_view modality_tag, std::string_view class_name) {
  if (modality_tag.empty() || class_name.empty()) throw ConfigError("build_prompt: empty modality or class name");
  return modality_long_name(modality_tag) + ", " + std::string(class_name);
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c) || std::ispunct(c)) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

int TokenSequence::length() const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == kEndId) return static_cast<int>(i) + 1;
  return static_cast<int>(ids.size());
}

Vocabulary Vocabulary::fit(const std::vector<std::string>& texts, int max_len) {
  if (max_len < 2) throw ConfigError("vocabulary max_len must be at least 2");
  std::map<std::string, long> counts;
  for (const auto& t : texts)
    for (auto& w : split_words(t)) ++counts[w];
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.second > b.second; });

  Vocabulary v;
  v.max_len_ = max_len;
  v.words_ = {"<pad>", "<unk>", "<start>", "<end>"};
  for (auto& [w, n] : ranked) v.words_.push_back(w);
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<std::int32_t>(i);
  return v;
}

std::int32_t Vocabulary::id_of(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end() || it->second < kFirstWordId) return kUnknownId;
  return it->second;
}

const std::string& Vocabulary::word_of(std::int32_t id) const {
  if (id < 0 || id >= size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  return words_[static_cast<std::size_t>(id)];
}

void Vocabulary::write(std::ostream& out) const {
  nlohmann::json header = {{"format_version", kVocabFormatVersion}, {"vocab_size", size()}, {"max_len", max_len_}};
  out << header.dump() << '\n';
  for (std::size_t i = kFirstWordId; i < words_.size(); ++i) out << words_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("vocabulary: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("vocabulary line 1: ") + e.what());
  }
  if (header.value("format_version", 0) != kVocabFormatVersion)
    throw ParseError("vocabulary: unsupported format_version");
  Vocabulary v;
  v.max_len_ = header.at("max_len").get<int>();
  const int vocab_size = header.at("vocab_size").get<int>();
  v.words_ = {"<pad>", "<unk>", "<start>", "<end>"};
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("vocabulary line " + std::to_string(line_no) + ": expected word<TAB>id");
    int id = 0;
    try {
      id = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError("vocabulary line " + std::to_string(line_no) + ": bad id");
    }
    if (id != static_cast<int>(v.words_.size()))
      throw ParseError("vocabulary line " + std::to_string(line_no) + ": ids must be dense and ascending");
    v.words_.push_back(line.substr(0, tab));
  }
  if (v.size() != vocab_size) throw ParseError("vocabulary: header vocab_size does not match entries");
  for (std::size_t i = 0; i < v.words_.size(); ++i) v.index_[v.words_[i]] = static_cast<std::int32_t>(i);
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write vocabulary " + path.string());
  write(out);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  return read(in);
}

TokenSequence tokenize(std::string_view text, const Vocabulary& vocab) {
  const auto words = split_words(text);
  const std::size_t max_len = static_cast<std::size_t>(vocab.max_len());
  const std::size_t kept = std::min(words.size(), max_len - 2);
  TokenSequence seq;
  seq.ids.assign(max_len, kPadId);
  seq.ids[0] = kStartId;
  for (std::size_t i = 0; i < kept; ++i) seq.ids[i + 1] = vocab.id_of(words[i]);
  seq.ids[kept + 1] = kEndId;
  return seq;
}

std::vector<std::string> detokenize(const TokenSequence& tokens, const Vocabulary& vocab) {
  std::vector<std::string> words;
  for (std::size_t i = 1; i < tokens.ids.size() && tokens.ids[i] != kEndId; ++i) words.push_back(vocab.word_of(tokens.ids[i]));
  return words;
}

}  // namespace mclab::text
