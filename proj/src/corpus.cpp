#include "parprobe/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include "json.hpp"
#include "parprobe/rng.hpp"

namespace parprobe {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

bool is_ascii_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_ascii_punct(unsigned char c) {
  return c < 0x80 && ((c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) ||
                      (c >= 0x5B && c <= 0x60) || (c >= 0x7B && c <= 0x7E));
}

std::size_t count_code_points(std::string_view text) {
  std::size_t n = 0;
  for (unsigned char c : text) n += is_continuation(c) ? 0 : 1;
  return n;
}

/// Byte offset of code point `cp` (cp may equal the code point count).
std::size_t byte_offset(std::string_view text, std::size_t cp) {
  std::size_t seen = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (is_continuation(static_cast<unsigned char>(text[i]))) continue;
    if (seen == cp) return i;
    ++seen;
  }
  if (seen == cp) return text.size();
  throw Error("character offset " + std::to_string(cp) + " beyond text of " +
              std::to_string(seen) + " characters");
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t begin = 0;
  while (true) {
    const auto tab = line.find('\t', begin);
    fields.push_back(line.substr(begin, tab - begin));
    if (tab == std::string::npos) break;
    begin = tab + 1;
  }
  return fields;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_ascii_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_ascii_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::optional<double> parse_double(std::string_view s) {
  const std::string t = trim(s);
  if (t.empty()) return std::nullopt;
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
  return value;
}

std::size_t parse_size(const std::string& s, const std::string& context) {
  std::size_t value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(context + ": expected a non-negative integer, got '" + s + "'");
  }
  return value;
}

}  // namespace

// ---------------------------------------------------------------- documents

std::size_t Document::char_length() const { return count_code_points(text); }

std::string Document::slice(std::size_t char_begin, std::size_t char_end) const {
  const auto b = byte_offset(text, char_begin);
  const auto e = byte_offset(text, char_end);
  return text.substr(b, e - b);
}

std::string Document::span_text(std::size_t tok_begin, std::size_t tok_end) const {
  if (tok_begin >= tok_end || tok_end > tokens.size()) {
    throw Error("token window [" + std::to_string(tok_begin) + ", " +
                std::to_string(tok_end) + ") invalid for document " + doc_id);
  }
  return slice(tokens[tok_begin].char_start, tokens[tok_end - 1].char_end);
}

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t cp = 0;
  std::size_t i = 0;
  bool in_word = false;
  Token current;
  std::size_t word_byte_start = 0;

  auto close_word = [&](std::size_t byte_end) {
    if (!in_word) return;
    current.surface = std::string(text.substr(word_byte_start, byte_end - word_byte_start));
    current.char_end = cp;
    tokens.push_back(current);
    in_word = false;
  };

  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, text.size() - i);

    if (is_ascii_space(c)) {
      close_word(i);
    } else if (is_ascii_punct(c)) {
      close_word(i);
      tokens.push_back(Token{std::string(1, static_cast<char>(c)), cp, cp + 1});
    } else if (!in_word) {
      in_word = true;
      word_byte_start = i;
      current.char_start = cp;
    }
    i += len;
    ++cp;
  }
  close_word(text.size());
  return tokens;
}

Document make_document(std::string doc_id, std::string text) {
  Document doc;
  doc.doc_id = std::move(doc_id);
  doc.tokens = tokenize(text);
  doc.text = std::move(text);
  return doc;
}

std::optional<Span> align_char_span(const Document& doc, std::size_t char_begin,
                                    std::size_t char_end, bool* widened) {
  const auto& toks = doc.tokens;
  // First token ending after char_begin; one past the last token starting
  // before char_end.
  auto first = std::partition_point(toks.begin(), toks.end(), [&](const Token& t) {
    return t.char_end <= char_begin;
  });
  auto last = std::partition_point(toks.begin(), toks.end(), [&](const Token& t) {
    return t.char_start < char_end;
  });
  if (first >= last) return std::nullopt;
  Span span{doc.doc_id, static_cast<std::size_t>(first - toks.begin()),
            static_cast<std::size_t>(last - toks.begin())};
  if (widened != nullptr) {
    *widened = toks[span.start].char_start != char_begin ||
               toks[span.end - 1].char_end != char_end;
  }
  return span;
}

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char c : text) {
    if (is_ascii_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  return out;
}

// ---------------------------------------------------------------- enums

std::string_view to_string(CandidateTag tag) {
  switch (tag) {
    case CandidateTag::near_analogy: return "near_analogy";
    case CandidateTag::far_analogy: return "far_analogy";
    case CandidateTag::near_distractor: return "near_distractor";
    case CandidateTag::far_distractor: return "far_distractor";
    case CandidateTag::branch: return "branch";
    case CandidateTag::sermon_negative: return "sermon_negative";
  }
  return "unknown";
}

CandidateTag candidate_tag_from_string(std::string_view name) {
  for (auto tag : {CandidateTag::near_analogy, CandidateTag::far_analogy,
                   CandidateTag::near_distractor, CandidateTag::far_distractor,
                   CandidateTag::branch, CandidateTag::sermon_negative}) {
    if (to_string(tag) == name) return tag;
  }
  throw Error("unknown candidate tag '" + std::string(name) + "'");
}

std::string_view to_string(BranchPattern pattern) {
  switch (pattern) {
    case BranchPattern::synchystic: return "synchystic";
    case BranchPattern::chiastic: return "chiastic";
    case BranchPattern::unknown: return "unknown";
  }
  return "unknown";
}

BranchPattern branch_pattern_from_string(std::string_view name) {
  if (name == "synchystic") return BranchPattern::synchystic;
  if (name == "chiastic") return BranchPattern::chiastic;
  if (name.empty() || name == "unknown") return BranchPattern::unknown;
  throw Error("unknown branch pattern '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- ARN

std::vector<Narrative> load_arn(const fs::path& narratives_path,
                                const fs::path& acceptability_path, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) {
    throw Error("acceptability threshold must lie in [0, 1]");
  }

  std::map<std::string, double> scores;
  {
    const auto lines = read_lines(acceptability_path);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const std::string& line = lines[i];
      if (trim(line).empty()) continue;
      const auto comma = line.find(',');
      const std::string where = acceptability_path.string() + ":" + std::to_string(i + 1);
      if (comma == std::string::npos) throw Error(where + ": expected 'id,score'");
      const std::string id = trim(std::string_view(line).substr(0, comma));
      const auto score = parse_double(std::string_view(line).substr(comma + 1));
      if (!score) {
        if (i == 0) continue;  // header row
        throw Error(where + ": unparseable score");
      }
      if (!(*score >= 0.0 && *score <= 1.0)) {
        throw Error(where + ": score for '" + id + "' outside [0, 1]");
      }
      scores[id] = *score;
    }
  }

  std::vector<Narrative> unique;
  std::unordered_set<std::string> seen_ids;
  std::unordered_set<std::string> seen_texts;
  const auto lines = read_lines(narratives_path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty() || is_provenance_line(lines[i])) continue;
    const std::string where = narratives_path.string() + ":" + std::to_string(i + 1);
    Narrative narrative;
    try {
      const json record = json::parse(lines[i]);
      std::string id = record.at("id").is_string() ? record.at("id").get<std::string>()
                                                   : record.at("id").dump();
      narrative.document = make_document(std::move(id), record.at("text").get<std::string>());
      narrative.proverb_id = record.at("proverb_id").is_string()
                                 ? record.at("proverb_id").get<std::string>()
                                 : record.at("proverb_id").dump();
      if (record.contains("links")) {
        for (const auto& link : record.at("links")) {
          narrative.links.push_back(
              NarrativeLink{link.at("id").get<std::string>(),
                            candidate_tag_from_string(link.at("tag").get<std::string>())});
        }
      }
    } catch (const json::exception& e) {
      throw Error(where + ": unparseable narrative record (" + e.what() + ")");
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
    const std::string& id = narrative.document.doc_id;
    if (!seen_ids.insert(id).second) throw Error(where + ": duplicate narrative id '" + id + "'");
    const auto score = scores.find(id);
    if (score == scores.end()) throw Error("missing acceptability score for narrative '" + id + "'");
    narrative.acceptability = score->second;
    if (!seen_texts.insert(normalize_text(narrative.document.text)).second) continue;
    unique.push_back(std::move(narrative));
  }

  std::vector<Narrative> kept;
  for (auto& n : unique) {
    if (n.acceptability >= threshold) kept.push_back(std::move(n));
  }
  return kept;
}

// ---------------------------------------------------------------- ASP

const Document& AspCorpus::sermon(std::string_view sermon_id) const {
  auto it = std::lower_bound(sermons.begin(), sermons.end(), sermon_id,
                             [](const Document& d, std::string_view id) { return d.doc_id < id; });
  if (it == sermons.end() || it->doc_id != sermon_id) {
    throw Error("unknown sermon '" + std::string(sermon_id) + "'");
  }
  return *it;
}

AspCorpus load_asp(const fs::path& sermons_path, const fs::path& annotations_path,
                   Warnings* warnings) {
  AspCorpus corpus;
  if (!fs::is_directory(sermons_path)) {
    throw Error("sermon directory " + sermons_path.string() + " not found");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(sermons_path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& file : files) {
    corpus.sermons.push_back(make_document(file.stem().string(), read_file(file)));
  }
  std::sort(corpus.sermons.begin(), corpus.sermons.end(),
            [](const Document& a, const Document& b) { return a.doc_id < b.doc_id; });

  json annotations;
  try {
    annotations = json::parse(read_file(annotations_path));
  } catch (const json::exception& e) {
    throw Error(annotations_path.string() + ": unparseable annotation file (" + e.what() + ")");
  }
  if (!annotations.is_array()) throw Error(annotations_path.string() + ": expected a JSON array");

  std::set<std::string> set_ids;
  for (const auto& record : annotations) {
    BranchSet set;
    try {
      set.set_id = record.at("set_id").get<std::string>();
      set.sermon_id = record.at("sermon_id").get<std::string>();
      set.pattern = branch_pattern_from_string(record.value("pattern", std::string("unknown")));
    } catch (const json::exception& e) {
      throw Error(annotations_path.string() + ": malformed branch set (" + e.what() + ")");
    }
    if (!set_ids.insert(set.set_id).second) throw Error("duplicate branch set id '" + set.set_id + "'");
    const Document& sermon = corpus.sermon(set.sermon_id);
    const std::size_t length = sermon.char_length();
    for (const auto& raw : record.at("spans")) {
      const auto begin = raw.at(0).get<std::size_t>();
      const auto end = raw.at(1).get<std::size_t>();
      if (begin >= end || end > length) {
        throw Error("branch set '" + set.set_id + "': span [" + std::to_string(begin) + ", " +
                    std::to_string(end) + ") outside sermon " + set.sermon_id);
      }
      bool widened = false;
      auto span = align_char_span(sermon, begin, end, &widened);
      if (!span) {
        throw Error("branch set '" + set.set_id + "': span [" + std::to_string(begin) + ", " +
                    std::to_string(end) + ") covers no token");
      }
      if (widened) {
        warn(warnings, "branch set '" + set.set_id + "': span [" + std::to_string(begin) + ", " +
                           std::to_string(end) + ") widened to token boundaries");
      }
      set.branches.push_back(*span);
    }
    std::sort(set.branches.begin(), set.branches.end(),
              [](const Span& a, const Span& b) { return std::tie(a.start, a.end) < std::tie(b.start, b.end); });
    if (set.branches.size() < 2 || set.branches.size() > 5) {
      throw Error("branch set '" + set.set_id + "' has " + std::to_string(set.branches.size()) +
                  " branches; expected 2 to 5");
    }
    for (std::size_t i = 1; i < set.branches.size(); ++i) {
      if (set.branches[i] == set.branches[i - 1]) {
        throw Error("branch set '" + set.set_id + "' has identical branches after alignment");
      }
    }
    corpus.sets.push_back(std::move(set));
  }
  return corpus;
}

double mean_branch_count(const std::vector<BranchSet>& sets) {
  if (sets.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : sets) total += static_cast<double>(s.branches.size());
  return total / static_cast<double>(sets.size());
}

// ---------------------------------------------------------------- LitBank

namespace {

struct TokenTable {
  std::vector<std::vector<std::string>> sentences;
  std::vector<std::vector<std::vector<std::string>>> labels;  // [sentence][token] remaining tsv columns
};

TokenTable read_token_tsv(const fs::path& path) {
  TokenTable table;
  table.sentences.emplace_back();
  table.labels.emplace_back();
  for (const auto& line : read_lines(path)) {
    if (trim(line).empty()) {
      if (!table.sentences.back().empty()) {
        table.sentences.emplace_back();
        table.labels.emplace_back();
      }
      continue;
    }
    auto fields = split_tabs(line);
    table.sentences.back().push_back(fields.front());
    fields.erase(fields.begin());
    table.labels.back().push_back(std::move(fields));
  }
  if (table.sentences.back().empty()) {
    table.sentences.pop_back();
    table.labels.pop_back();
  }
  return table;
}

std::vector<std::vector<std::string>> read_token_txt(const fs::path& path) {
  std::vector<std::vector<std::string>> sentences;
  for (const auto& line : read_lines(path)) {
    std::vector<std::string> toks;
    std::istringstream in(line);
    std::string tok;
    while (in >> tok) toks.push_back(tok);
    if (!toks.empty()) sentences.push_back(std::move(toks));
  }
  return sentences;
}

/// Joins pre-tokenized sentences with single spaces (newline between
/// sentences) and records token offsets.
Document document_from_sentences(const std::string& doc_id,
                                 const std::vector<std::vector<std::string>>& sentences,
                                 std::vector<std::size_t>* sentence_offsets) {
  Document doc;
  doc.doc_id = doc_id;
  std::size_t cp = 0;
  for (const auto& sentence : sentences) {
    sentence_offsets->push_back(doc.tokens.size());
    for (std::size_t i = 0; i < sentence.size(); ++i) {
      if (!doc.text.empty()) {
        doc.text.push_back(i == 0 ? '\n' : ' ');
        ++cp;
      }
      const std::size_t n = count_code_points(sentence[i]);
      doc.tokens.push_back(Token{sentence[i], cp, cp + n});
      doc.text += sentence[i];
      cp += n;
    }
  }
  return doc;
}

std::string litbank_stem(const fs::path& file) {
  std::string stem = file.stem().string();
  const std::string suffix = "_brat";
  if (stem.size() > suffix.size() && stem.ends_with(suffix)) stem.resize(stem.size() - suffix.size());
  return stem;
}

std::map<std::string, fs::path> list_layer(const fs::path& dir, const std::string& extension) {
  std::map<std::string, fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == extension) {
      files[litbank_stem(entry.path())] = entry.path();
    }
  }
  return files;
}

class SentenceIndex {
 public:
  SentenceIndex(std::vector<std::size_t> offsets, std::size_t n_tokens)
      : offsets_(std::move(offsets)), n_tokens_(n_tokens) {}

  std::size_t global(std::size_t sentence, std::size_t token, const std::string& context) const {
    if (sentence >= offsets_.size()) throw Error(context + ": sentence " + std::to_string(sentence) + " out of range");
    const std::size_t limit = sentence + 1 < offsets_.size() ? offsets_[sentence + 1] : n_tokens_;
    const std::size_t index = offsets_[sentence] + token;
    if (index >= limit) throw Error(context + ": token " + std::to_string(token) + " out of range");
    return index;
  }

 private:
  std::vector<std::size_t> offsets_;
  std::size_t n_tokens_;
};

}  // namespace

std::vector<LitBankAnnotations> load_litbank(const fs::path& root, Warnings* warnings) {
  if (!fs::is_directory(root)) throw Error("LitBank directory " + root.string() + " not found");
  const auto events = list_layer(root / "events" / "tsv", ".tsv");
  const auto entities = list_layer(root / "entities" / "tsv", ".tsv");
  const auto coref = list_layer(root / "coref" / "brat", ".ann");
  const auto coref_txt = list_layer(root / "coref" / "brat", ".txt");
  const auto quotes = list_layer(root / "quotations" / "tsv", ".tsv");

  std::set<std::string> doc_ids;
  for (const auto* layer : {&events, &entities, &coref, &quotes}) {
    for (const auto& [id, path] : *layer) doc_ids.insert(id);
  }

  std::vector<LitBankAnnotations> out;
  for (const auto& doc_id : doc_ids) {
    auto ev = events.find(doc_id);
    auto en = entities.find(doc_id);
    auto co = coref.find(doc_id);
    auto txt = coref_txt.find(doc_id);
    auto qu = quotes.find(doc_id);

    std::optional<TokenTable> event_table, entity_table;
    if (ev != events.end()) event_table = read_token_tsv(ev->second);
    if (en != entities.end()) entity_table = read_token_tsv(en->second);

    std::vector<std::vector<std::string>> sentences;
    if (event_table) sentences = event_table->sentences;
    else if (entity_table) sentences = entity_table->sentences;
    else if (txt != coref_txt.end()) sentences = read_token_txt(txt->second);
    else {
      warn(warnings, "LitBank document '" + doc_id + "' has no token layer; skipped");
      continue;
    }

    LitBankAnnotations ann;
    std::vector<std::size_t> sentence_offsets;
    ann.document = document_from_sentences(doc_id, sentences, &sentence_offsets);
    const std::size_t n_tokens = ann.document.tokens.size();
    SentenceIndex index(sentence_offsets, n_tokens);

    if (event_table) {
      std::size_t t = 0;
      for (const auto& sentence_labels : event_table->labels) {
        for (const auto& labels : sentence_labels) {
          if (!labels.empty() && labels.front() == "EVENT") ann.events.push_back(Span{doc_id, t, t + 1});
          ++t;
        }
      }
    } else {
      warn(warnings, "LitBank document '" + doc_id + "' has no event layer");
    }

    if (entity_table) {
      std::size_t flat_count = 0;
      for (const auto& s : entity_table->sentences) flat_count += s.size();
      if (flat_count != n_tokens) {
        warn(warnings, "LitBank document '" + doc_id + "': entity layer token count differs; layer dropped");
      } else {
        std::size_t t = 0;
        std::optional<std::size_t> open;
        std::string open_type;
        auto close = [&](std::size_t end) {
          if (open) ann.entities.push_back(Span{doc_id, *open, end});
          open.reset();
        };
        for (const auto& sentence_labels : entity_table->labels) {
          for (const auto& labels : sentence_labels) {
            const std::string label = labels.empty() ? "O" : labels.front();
            if (label.starts_with("B-")) {
              close(t);
              open = t;
              open_type = label.substr(2);
            } else if (label.starts_with("I-")) {
              if (!open || label.substr(2) != open_type) {
                close(t);
                open = t;
                open_type = label.substr(2);
              }
            } else {
              close(t);
            }
            ++t;
          }
          close(t);  // entities never cross sentences
        }
      }
    } else {
      warn(warnings, "LitBank document '" + doc_id + "' has no entity layer");
    }

    std::map<std::string, Span> mentions;  // mention id -> span
    if (co != coref.end()) {
      std::map<std::string, std::string> mention_entity;
      std::vector<std::string> mention_order;
      for (const auto& line : read_lines(co->second)) {
        if (trim(line).empty()) continue;
        const auto f = split_tabs(line);
        const std::string context = co->second.string();
        if (f[0] == "MENTION") {
          if (f.size() < 6) throw Error(context + ": malformed MENTION record");
          const auto b = index.global(parse_size(f[2], context), parse_size(f[3], context), context);
          const auto e = index.global(parse_size(f[4], context), parse_size(f[5], context), context);
          if (e < b) throw Error(context + ": mention " + f[1] + " ends before it starts");
          mentions[f[1]] = Span{doc_id, b, e + 1};
          mention_order.push_back(f[1]);
        } else if (f[0] == "COREF") {
          if (f.size() < 3) throw Error(context + ": malformed COREF record");
          mention_entity[f[1]] = f[2];
        }
      }
      std::map<std::string, CorefChain> chains;
      for (const auto& mid : mention_order) {
        auto it = mention_entity.find(mid);
        const std::string entity = it == mention_entity.end() ? mid : it->second;
        auto& chain = chains[entity];
        chain.entity_id = entity;
        chain.mentions.push_back(mentions.at(mid));
      }
      for (auto& [id, chain] : chains) {
        std::sort(chain.mentions.begin(), chain.mentions.end());
        ann.coref_chains.push_back(std::move(chain));
      }
    } else {
      warn(warnings, "LitBank document '" + doc_id + "' has no coreference layer");
    }

    if (qu != quotes.end()) {
      std::map<std::string, Span> quote_spans;
      std::vector<std::pair<std::string, std::string>> attributions;
      for (const auto& line : read_lines(qu->second)) {
        if (trim(line).empty()) continue;
        const auto f = split_tabs(line);
        const std::string context = qu->second.string();
        if (f[0] == "QUOTE") {
          if (f.size() < 6) throw Error(context + ": malformed QUOTE record");
          const auto b = index.global(parse_size(f[2], context), parse_size(f[3], context), context);
          const auto e = index.global(parse_size(f[4], context), parse_size(f[5], context), context);
          quote_spans[f[1]] = Span{doc_id, b, e + 1};
        } else if (f[0] == "ATTRIB") {
          if (f.size() < 3) throw Error(context + ": malformed ATTRIB record");
          attributions.emplace_back(f[1], f[2]);
        }
      }
      for (const auto& [qid, entity] : attributions) {
        auto q = quote_spans.find(qid);
        if (q == quote_spans.end()) {
          warn(warnings, "quote '" + qid + "' in '" + doc_id + "' has an attribution but no span");
          continue;
        }
        auto chain = std::find_if(ann.coref_chains.begin(), ann.coref_chains.end(),
                                  [&](const CorefChain& c) { return c.entity_id == entity; });
        if (chain == ann.coref_chains.end() || chain->mentions.empty()) {
          warn(warnings, "quote '" + qid + "' in '" + doc_id + "': speaker '" + entity + "' has no mention");
          continue;
        }
        // Speaker span: the entity mention nearest the quote start.
        const Span& qs = q->second;
        const Span* best = nullptr;
        std::size_t best_distance = SIZE_MAX;
        for (const auto& m : chain->mentions) {
          const std::size_t d = m.start > qs.start ? m.start - qs.start : qs.start - m.start;
          if (d < best_distance) {
            best_distance = d;
            best = &m;
          }
        }
        ann.quotes.push_back(QuoteAttribution{qid, qs, *best, entity});
      }
    } else {
      warn(warnings, "LitBank document '" + doc_id + "' has no quotation layer");
    }

    out.push_back(std::move(ann));
  }
  return out;
}

// ---------------------------------------------------------------- splits

std::vector<SplitAssignment> make_splits(const std::vector<std::string>& doc_ids, std::size_t k,
                                         std::array<double, 3> ratios, std::uint64_t seed) {
  const std::size_t n = doc_ids.size();
  if (k < 2) throw Error("fold count k must be at least 2");
  if (k > n) throw Error("fold count k=" + std::to_string(k) + " exceeds " + std::to_string(n) + " documents");
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw Error("split ratios must be non-negative and sum to 1");
  }

  std::vector<std::string> order = doc_ids;
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
    throw Error("duplicate document id in split input");
  }
  Rng rng(seed);
  rng.shuffle(order);

  auto floor_count = [n](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
  };
  std::size_t n_val = floor_count(ratios[1]);
  std::size_t n_test = floor_count(ratios[2]);
  if (n >= 3) {
    n_val = std::max<std::size_t>(n_val, ratios[1] > 0 ? 1 : 0);
    n_test = std::max<std::size_t>(n_test, ratios[2] > 0 ? 1 : 0);
  }

  std::vector<SplitAssignment> folds;
  for (std::size_t f = 0; f < k; ++f) {
    SplitAssignment split;
    split.fold_id = f;
    const std::size_t offset = f * n / k;
    std::vector<int> role(n, 0);
    for (std::size_t i = 0; i < n_test; ++i) role[(offset + i) % n] = 2;
    for (std::size_t i = 0; i < n_val; ++i) role[(offset + n_test + i) % n] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      (role[i] == 0 ? split.train : role[i] == 1 ? split.val : split.test).push_back(order[i]);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.test.begin(), split.test.end());
    folds.push_back(std::move(split));
  }
  return folds;
}

// ---------------------------------------------------------------- normalized

namespace {

json spans_to_json(const std::vector<Span>& spans) {
  json out = json::array();
  for (const auto& s : spans) out.push_back({s.start, s.end});
  return out;
}

std::vector<Span> spans_from_json(const json& j, const std::string& doc_id) {
  std::vector<Span> out;
  for (const auto& s : j) out.push_back(Span{doc_id, s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
  return out;
}

json document_to_json(const Document& doc) {
  json tokens = json::array();
  for (const auto& t : doc.tokens) tokens.push_back({t.char_start, t.char_end});
  return {{"doc_id", doc.doc_id}, {"text", doc.text}, {"tokens", tokens}};
}

Document document_from_json(const json& j) {
  Document doc;
  doc.doc_id = j.at("doc_id").get<std::string>();
  doc.text = j.at("text").get<std::string>();
  for (const auto& t : j.at("tokens")) {
    const auto b = t.at(0).get<std::size_t>();
    const auto e = t.at(1).get<std::size_t>();
    doc.tokens.push_back(Token{doc.slice(b, e), b, e});
  }
  return doc;
}

}  // namespace

void write_corpus_jsonl(const Corpus& corpus, const fs::path& path, const Provenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if (!provenance.empty()) out << provenance.json_line() << '\n';
  for (const auto& n : corpus.narratives) {
    json j = document_to_json(n.document);
    j["kind"] = "narrative";
    j["proverb_id"] = n.proverb_id;
    j["acceptability"] = n.acceptability;
    json links = json::array();
    for (const auto& l : n.links) links.push_back({{"id", l.other_id}, {"tag", to_string(l.tag)}});
    j["links"] = links;
    out << j.dump() << '\n';
  }
  for (const auto& sermon : corpus.asp.sermons) {
    json j = document_to_json(sermon);
    j["kind"] = "sermon";
    json sets = json::array();
    for (const auto& set : corpus.asp.sets) {
      if (set.sermon_id != sermon.doc_id) continue;
      sets.push_back({{"set_id", set.set_id},
                      {"pattern", to_string(set.pattern)},
                      {"branches", spans_to_json(set.branches)}});
    }
    j["branch_sets"] = sets;
    out << j.dump() << '\n';
  }
  for (const auto& doc : corpus.litbank) {
    json j = document_to_json(doc.document);
    j["kind"] = "litbank";
    j["events"] = spans_to_json(doc.events);
    j["entities"] = spans_to_json(doc.entities);
    json chains = json::array();
    for (const auto& c : doc.coref_chains) {
      chains.push_back({{"entity_id", c.entity_id}, {"mentions", spans_to_json(c.mentions)}});
    }
    j["coref_chains"] = chains;
    json quotes = json::array();
    for (const auto& q : doc.quotes) {
      quotes.push_back({{"quote_id", q.quote_id},
                        {"quote", {q.quote.start, q.quote.end}},
                        {"speaker", {q.speaker.start, q.speaker.end}},
                        {"speaker_entity", q.speaker_entity}});
    }
    j["quotes"] = quotes;
    out << j.dump() << '\n';
  }
}

Corpus read_corpus_jsonl(const fs::path& path) {
  Corpus corpus;
  const auto lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty() || is_provenance_line(lines[i])) continue;
    try {
      const json j = json::parse(lines[i]);
      const std::string kind = j.at("kind").get<std::string>();
      Document doc = document_from_json(j);
      if (kind == "narrative") {
        Narrative n;
        n.document = std::move(doc);
        n.proverb_id = j.at("proverb_id").get<std::string>();
        n.acceptability = j.at("acceptability").get<double>();
        for (const auto& l : j.at("links")) {
          n.links.push_back({l.at("id").get<std::string>(), candidate_tag_from_string(l.at("tag").get<std::string>())});
        }
        corpus.narratives.push_back(std::move(n));
      } else if (kind == "sermon") {
        for (const auto& s : j.at("branch_sets")) {
          BranchSet set;
          set.set_id = s.at("set_id").get<std::string>();
          set.sermon_id = doc.doc_id;
          set.pattern = branch_pattern_from_string(s.at("pattern").get<std::string>());
          set.branches = spans_from_json(s.at("branches"), doc.doc_id);
          corpus.asp.sets.push_back(std::move(set));
        }
        corpus.asp.sermons.push_back(std::move(doc));
      } else if (kind == "litbank") {
        LitBankAnnotations ann;
        const std::string id = doc.doc_id;
        ann.document = std::move(doc);
        ann.events = spans_from_json(j.at("events"), id);
        ann.entities = spans_from_json(j.at("entities"), id);
        for (const auto& c : j.at("coref_chains")) {
          ann.coref_chains.push_back({c.at("entity_id").get<std::string>(), spans_from_json(c.at("mentions"), id)});
        }
        for (const auto& q : j.at("quotes")) {
          ann.quotes.push_back({q.at("quote_id").get<std::string>(),
                                Span{id, q.at("quote").at(0).get<std::size_t>(), q.at("quote").at(1).get<std::size_t>()},
                                Span{id, q.at("speaker").at(0).get<std::size_t>(), q.at("speaker").at(1).get<std::size_t>()},
                                q.at("speaker_entity").get<std::string>()});
        }
        corpus.litbank.push_back(std::move(ann));
      } else {
        throw Error("unknown document kind '" + kind + "'");
      }
    } catch (const json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(i + 1) + ": " + e.what());
    }
  }
  std::sort(corpus.asp.sermons.begin(), corpus.asp.sermons.end(),
            [](const Document& a, const Document& b) { return a.doc_id < b.doc_id; });
  return corpus;
}

}  // namespace parprobe
