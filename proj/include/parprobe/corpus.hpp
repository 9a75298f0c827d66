#ifndef PARPROBE_CORPUS_HPP_
#define PARPROBE_CORPUS_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "parprobe/common.hpp"

namespace parprobe {

// Character offsets throughout this module count Unicode code points, so
// they agree with offsets produced by Python tooling.
struct Token {
  std::string surface;
  std::size_t char_start = 0;
  std::size_t char_end = 0;

  friend bool operator==(const Token&, const Token&) = default;
};

struct Document {
  std::string doc_id;
  std::string text;
  std::vector<Token> tokens;

  std::size_t char_length() const;
  /// UTF-8 substring for the code point range [char_begin, char_end).
  std::string slice(std::size_t char_begin, std::size_t char_end) const;
  /// Text covered by a token window, including inter-token whitespace.
  std::string span_text(std::size_t tok_begin, std::size_t tok_end) const;
  Span whole() const { return Span{doc_id, 0, tokens.size()}; }

  friend bool operator==(const Document&, const Document&) = default;
};

/// Whitespace-plus-punctuation tokenizer. Runs of non-space,
/// non-punctuation code points form one token; every ASCII punctuation
/// character is a token of its own.
std::vector<Token> tokenize(std::string_view text);

Document make_document(std::string doc_id, std::string text);

/// Maps a character range onto the smallest enclosing token window.
/// Returns nullopt when the range covers no token. `widened` reports
/// whether the range had to grow to hit token boundaries.
std::optional<Span> align_char_span(const Document& doc, std::size_t char_begin,
                                    std::size_t char_end, bool* widened = nullptr);

/// Casefold (ASCII) and collapse whitespace runs to one space.
std::string normalize_text(std::string_view text);

// ---------------------------------------------------------------- ARN

enum class CandidateTag {
  near_analogy,
  far_analogy,
  near_distractor,
  far_distractor,
  branch,
  sermon_negative,
};

std::string_view to_string(CandidateTag tag);
CandidateTag candidate_tag_from_string(std::string_view name);

/// Optional ARN relation from one narrative to another.
struct NarrativeLink {
  std::string other_id;
  CandidateTag tag = CandidateTag::far_analogy;

  friend bool operator==(const NarrativeLink&, const NarrativeLink&) = default;
};

struct Narrative {
  Document document;
  std::string proverb_id;
  double acceptability = 0.0;
  std::vector<NarrativeLink> links;

  friend bool operator==(const Narrative&, const Narrative&) = default;
};

/// Narratives as JSON lines {id, text, proverb_id[, links]} joined with an
/// `id,score` CSV. Deduplicates by normalized text (first occurrence wins),
/// then keeps narratives scoring at least `threshold`.
std::vector<Narrative> load_arn(const std::filesystem::path& narratives_path,
                                const std::filesystem::path& acceptability_path,
                                double threshold);

// ---------------------------------------------------------------- ASP

enum class BranchPattern { synchystic, chiastic, unknown };

std::string_view to_string(BranchPattern pattern);
BranchPattern branch_pattern_from_string(std::string_view name);

struct BranchSet {
  std::string set_id;
  std::string sermon_id;
  std::vector<Span> branches;  // sorted by start
  BranchPattern pattern = BranchPattern::unknown;

  friend bool operator==(const BranchSet&, const BranchSet&) = default;
};

struct AspCorpus {
  std::vector<Document> sermons;  // sorted by doc_id
  std::vector<BranchSet> sets;

  const Document& sermon(std::string_view sermon_id) const;
  friend bool operator==(const AspCorpus&, const AspCorpus&) = default;
};

/// `sermons_path` is a directory of `<sermon_id>.txt` files; the annotation
/// file is a JSON array of {set_id, sermon_id, pattern, spans: [[b, e], ...]}
/// with code point offsets.
AspCorpus load_asp(const std::filesystem::path& sermons_path,
                   const std::filesystem::path& annotations_path,
                   Warnings* warnings = nullptr);

double mean_branch_count(const std::vector<BranchSet>& sets);

// ---------------------------------------------------------------- LitBank

struct CorefChain {
  std::string entity_id;
  std::vector<Span> mentions;

  friend bool operator==(const CorefChain&, const CorefChain&) = default;
};

struct QuoteAttribution {
  std::string quote_id;
  Span quote;
  Span speaker;
  std::string speaker_entity;

  friend bool operator==(const QuoteAttribution&, const QuoteAttribution&) = default;
};

struct LitBankAnnotations {
  Document document;
  std::vector<Span> events;
  std::vector<Span> entities;
  std::vector<CorefChain> coref_chains;
  std::vector<QuoteAttribution> quotes;

  const std::string& doc_id() const { return document.doc_id; }
  friend bool operator==(const LitBankAnnotations&, const LitBankAnnotations&) = default;
};

/// Reads the published LitBank layout under `root`:
///   events/tsv/<id>.tsv       token<TAB>EVENT|O, blank line between sentences
///   entities/tsv/<id>.tsv     token<TAB>BIO column per annotation layer
///   coref/brat/<id>.ann       MENTION/COREF records
///   quotations/tsv/<id>.tsv   QUOTE/ATTRIB records
/// Only the first entity label column is used.
std::vector<LitBankAnnotations> load_litbank(const std::filesystem::path& root,
                                             Warnings* warnings = nullptr);

// ---------------------------------------------------------------- splits

struct SplitAssignment {
  std::size_t fold_id = 0;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;

  friend bool operator==(const SplitAssignment&, const SplitAssignment&) = default;
};

/// Partition sizes are floor(n * ratio) for val and test (at least one each
/// when n >= 3), remainder to train. The test block of fold f starts at
/// offset f * n / k of a seeded shuffle; the val block follows it.
std::vector<SplitAssignment> make_splits(const std::vector<std::string>& doc_ids,
                                         std::size_t k,
                                         std::array<double, 3> ratios = {0.8, 0.1, 0.1},
                                         std::uint64_t seed = 0);

// ---------------------------------------------------------------- normalized

/// Everything ingestion produced; written as JSON lines, one document per
/// line with its annotations embedded.
struct Corpus {
  std::vector<Narrative> narratives;
  AspCorpus asp;
  std::vector<LitBankAnnotations> litbank;

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

void write_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path,
                        const Provenance& provenance = {});
Corpus read_corpus_jsonl(const std::filesystem::path& path);

}  // namespace parprobe

#endif  // PARPROBE_CORPUS_HPP_
