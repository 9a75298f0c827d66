#ifndef PARPROBE_BASELINES_HPP_
#define PARPROBE_BASELINES_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "parprobe/common.hpp"

namespace parprobe {

/// Linguistic annotation of one text (a document or a span). Dependency
/// heads are 1-based token indices with 0 marking a sentence root.
struct AnnotatedText {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<std::string> lemmas;
  std::vector<std::string> pos;
  std::vector<int> heads;
  std::vector<std::string> deprels;
  std::optional<std::vector<double>> semantic;

  void validate() const;
};

/// One JSON object per line:
///   {"id", "tokens", "lemmas"?, "pos"?, "heads"?, "deprels"?, "semantic"?}
std::vector<AnnotatedText> read_annotations_jsonl(const std::filesystem::path& path);
void write_annotations_jsonl(const std::vector<AnnotatedText>& texts, const std::filesystem::path& path,
                             const Provenance& provenance = {});

enum class SimilarityMethod {
  jaccard_tokens,
  jaccard_lemmas,
  jaccard_3grams,
  bleu,
  pos_edit,
  pos_jaccard,
  dep_ged,
  dep_wl_kernel,
  semantic_cosine,
};

std::string_view to_string(SimilarityMethod method);
SimilarityMethod similarity_method_from_string(std::string_view name);
const std::vector<SimilarityMethod>& all_similarity_methods();

/// Trees with more nodes than this are scored by the WL kernel under dep_ged.
inline constexpr std::size_t kMaxGedNodes = 25;
inline constexpr std::size_t kWlIterations = 3;

/// Larger is more similar. Edit distances come back negated.
double text_similarity(SimilarityMethod method, const AnnotatedText& a, const AnnotatedText& b);

/// Lowercased tokens (or lemmas) with punctuation-only tokens removed.
std::vector<std::string> normalized_layer(const AnnotatedText& text, bool lemmas);

double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b);
std::size_t levenshtein(const std::vector<std::string>& a, const std::vector<std::string>& b);
/// Smoothed sentence BLEU of `cand` against `ref`, up to 4-grams.
double bleu(const std::vector<std::string>& cand, const std::vector<std::string>& ref);

/// Ordered labelled tree (children in token order). Node 0 is a virtual
/// root when the text holds several sentences.
struct LabeledTree {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> children;
  std::size_t root = 0;
  std::size_t size() const { return labels.size(); }
};

LabeledTree dependency_tree(const AnnotatedText& text);
/// Zhang-Shasha ordered tree edit distance with unit costs.
std::size_t tree_edit_distance(const LabeledTree& a, const LabeledTree& b);
/// Normalized WL subtree kernel in [0, 1].
double wl_kernel(const LabeledTree& a, const LabeledTree& b, std::size_t iterations = kWlIterations);

/// Per-column min-max scaling. Constant columns map to 0.5 with a warning.
/// `raw` is row-major rows x cols.
std::vector<std::vector<double>> normalize_scores(const std::vector<std::vector<double>>& raw,
                                                  const std::vector<std::string>& column_names,
                                                  Warnings* warnings = nullptr);

struct TextPair {
  std::string pair_id;
  std::size_t a = 0;  // indices into the text list
  std::size_t b = 0;
  int label = 0;      // 1 = same group
};

/// Balanced sample of same-group and different-group pairs; `groups[i]` is
/// the group of text i. Requests beyond what exists are capped with a warning.
std::vector<TextPair> sample_pairs(const std::vector<std::string>& ids, const std::vector<std::string>& groups,
                                   std::size_t n_pairs, std::uint64_t seed, Warnings* warnings = nullptr);

/// Mann-Whitney comparison of positive vs negative scores for one method.
struct RankSumStat {
  double u = 0.0;
  double auc = 0.0;  // u / (n_pos * n_neg)
  double z = 0.0;    // normal approximation with tie correction
};

RankSumStat rank_sum_statistic(const std::vector<double>& scores, const std::vector<int>& labels);

struct BaselineTable {
  std::vector<TextPair> pairs;
  std::vector<SimilarityMethod> methods;
  std::vector<std::vector<double>> raw;         // pairs x methods
  std::vector<std::vector<double>> normalized;  // pairs x methods
};

/// Columns: pair_id,label,method,raw,normalized (long format).
void write_baseline_csv(const BaselineTable& table, const std::filesystem::path& path, const std::string& provenance);

}  // namespace parprobe

#endif  // PARPROBE_BASELINES_HPP_
