#ifndef PARPROBE_PROBES_HPP_
#define PARPROBE_PROBES_HPP_

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "parprobe/common.hpp"
#include "parprobe/embed_store.hpp"
#include "parprobe/metrics.hpp"
#include "parprobe/pools.hpp"

namespace parprobe {

// ---------------------------------------------------------------- features

/// [h_a; h_c; |h_a - h_c|; h_a * h_c], length 4d.
std::vector<double> pair_features(std::span<const double> h_a, std::span<const double> h_c);

/// [delta, |delta|] with delta = cand.start - anchor.start in tokens.
std::array<double, 2> dist_features(const Span& anchor, const Span& cand);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// -log sigmoid(s_pos - s_neg), computed without overflow.
double pairwise_loss(double s_pos, double s_neg);

/// d/d(margin) of pairwise_loss, i.e. -sigmoid(-(s_pos - s_neg)).
double pairwise_loss_grad(double s_pos, double s_neg);

// ---------------------------------------------------------------- scorers

enum class ScorerKind { cosine, distance, linear, mlp, full };

std::string_view to_string(ScorerKind kind);
ScorerKind scorer_kind_from_string(std::string_view name);
bool needs_embeddings(ScorerKind kind);
bool needs_distance(ScorerKind kind);

struct LayerSelector {
  bool all_layers = false;
  std::size_t layer = 0;

  static LayerSelector single(std::size_t l) { return {false, l}; }
  static LayerSelector all() { return {true, 0}; }
  std::string str() const;
  static LayerSelector parse(std::string_view text);

  friend bool operator==(const LayerSelector&, const LayerSelector&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;  // anchors per batch
  std::size_t patience = 5;     // epochs without validation gain
  std::uint64_t seed = 0;
  LayerSelector layer_selector;
  std::size_t hidden = 256;

  void validate() const;
};

/// Per-span embeddings resolved for scoring: either one selected layer
/// (n_layers == 1) or all layers for a scalar mixture.
struct EmbeddingTable {
  std::size_t n_layers = 0;
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> rows;  // key -> n_layers * dim

  std::span<const double> get(const Span& span) const;
  bool contains(const Span& span) const { return rows.count(span.key()) != 0; }
};

/// Loads every span referenced by `pools` (anchors and candidates) from a
/// pooled store, keeping only what `selector` needs.
EmbeddingTable load_embedding_table(StoreReader& reader, const std::vector<RankingExample>& pools,
                                    LayerSelector selector);

/// A ranking scorer. Parameters live in one flat vector:
///   linear    w[F]                          F = 4d
///   distance  w[2], b
///   mlp       W1[H x F], b1[H], w2[H], b2   F = 4d
///   full      W1[H x F], b1[H], w2[H], b2   F = 4d + 2
///   cosine    (none)
/// Distance features are divided by `distance_scale`, fitted on the
/// training pairs.
struct Scorer {
  ScorerKind kind = ScorerKind::cosine;
  std::size_t dim = 0;
  std::size_t hidden = 0;
  LayerSelector layer_selector;
  double distance_scale = 1.0;
  std::vector<double> weights;
  std::optional<ScalarMixParams> mix;

  std::size_t feature_dim() const;
  std::size_t weight_count() const;

  /// Fresh scorer with initialized parameters.
  static Scorer create(ScorerKind kind, std::size_t dim, std::size_t n_layers, const TrainConfig& config);
};

/// Inputs for scoring one side of a pair: the resolved layer rows and the
/// span (for distance features).
struct ScoringItem {
  std::span<const double> layers;  // n_layers * dim, or empty for distance
  const Span* span = nullptr;
};

/// Higher is more parallel.
double score(const Scorer& scorer, const ScoringItem& anchor, const ScoringItem& cand);

struct ScorerGrad {
  std::vector<double> weights;
  ScalarMixGrad mix;
};

/// Accumulates upstream * d(score)/d(params) into grad. Returns the score.
double score_backward(const Scorer& scorer, const ScoringItem& anchor, const ScoringItem& cand, double upstream,
                      ScorerGrad& grad);

struct RankedCandidate {
  std::size_t index = 0;
  double score = 0.0;
};

/// Descending score; ties keep candidate index order.
std::vector<RankedCandidate> rank_candidates(const Scorer& scorer, const RankingExample& example,
                                             const EmbeddingTable* table);

/// Scores of every candidate, in candidate order.
std::vector<double> score_example(const Scorer& scorer, const RankingExample& example, const EmbeddingTable* table);

struct PoolEvaluation {
  std::vector<RankMetrics> per_example;
  MeanRankMetrics mean;
  /// Accuracy of labeling each candidate positive iff it ranks within the
  /// top |C+|; averaged over examples.
  double rank_threshold_accuracy = 0.0;
};

PoolEvaluation evaluate_pools(const Scorer& scorer, const std::vector<RankingExample>& pools,
                              const EmbeddingTable* table);

// ---------------------------------------------------------------- training

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_map = 0.0;
};

struct TrainResult {
  Scorer scorer;
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_val_map = 0.0;
};

/// Minimizes the mean pairwise loss over (anchor, positive, negative)
/// triples. An anchor's negatives in a batch are its own negatives plus
/// the positives of the other anchors in the batch, excluding the anchor
/// itself, its own positives and (for distance features) spans from other
/// documents. Keeps the epoch with the best validation MAP.
TrainResult train_probe(const std::vector<RankingExample>& train, const std::vector<RankingExample>& val,
                        const EmbeddingTable* table, ScorerKind kind, const TrainConfig& config,
                        Warnings* warnings = nullptr);

/// Writes `<stem>.json` (kind, dims, config, fold, seed) and `<stem>.bin`
/// (float32 little-endian: weights, then mix raw weights, then gamma).
void save_scorer(const Scorer& scorer, const TrainConfig& config, std::size_t fold,
                 const std::filesystem::path& stem);
Scorer load_scorer(const std::filesystem::path& stem);

/// Adam with bias correction.
class AdamOptimizer {
 public:
  AdamOptimizer(std::size_t n, double lr, double beta1, double beta2, double eps)
      : m_(n, 0.0), v_(n, 0.0), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<double> params, std::span<const double> grad);

 private:
  std::vector<double> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------- span classifiers

enum class HeadKind { logreg, mlp };

std::string_view to_string(HeadKind head);
HeadKind head_kind_from_string(std::string_view name);

/// Linear projection d -> p of every token, softmax attention over the
/// projected tokens, then a binary head over h_s (or [h_s1; h_s2]).
///   params: P[p x d], bp[p], u[p], head
///   logreg head: w[in], b         mlp head: W1[H x in], b1[H], w2[H], b2
struct SpanRepModel {
  std::size_t dim = 0;
  std::size_t proj = 256;
  std::size_t hidden = 256;
  HeadKind head = HeadKind::logreg;
  bool pair = false;
  std::vector<double> params;

  std::size_t head_input() const { return pair ? 2 * proj : proj; }
  std::size_t param_count() const;
  static SpanRepModel create(std::size_t dim, std::size_t proj, std::size_t hidden, HeadKind head, bool pair,
                             std::uint64_t seed);
};

/// `tokens` is T * dim (row-major); returns the p-vector h_s.
std::vector<double> span_representation(const SpanRepModel& model, std::span<const double> tokens);

/// Attention weights over the T tokens.
std::vector<double> span_attention(const SpanRepModel& model, std::span<const double> tokens);

/// Token rows of one layer for every span an instance set references.
struct TokenTable {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> rows;  // key -> T * dim

  std::span<const double> get(const Span& span) const;
};

TokenTable load_token_table(StoreReader& reader, const std::vector<AuxInstance>& instances, std::size_t layer);

/// Probability that the instance is positive.
double predict(const SpanRepModel& model, const AuxInstance& instance, const TokenTable& tokens);

/// Binary cross-entropy on one instance; accumulates the parameter
/// gradient (same layout as params). Returns the loss.
double span_classifier_backward(const SpanRepModel& model, const AuxInstance& instance, const TokenTable& tokens,
                                std::span<double> grad);

struct SpanClassifierResult {
  SpanRepModel model;
  std::size_t best_epoch = 0;
  double best_val_f1 = 0.0;
};

/// Trains with Adam, batch size from `config`, and keeps the epoch with
/// the best validation F1.
SpanClassifierResult train_span_classifier(const std::vector<AuxInstance>& train,
                                           const std::vector<AuxInstance>& val, const TokenTable& tokens,
                                           HeadKind head, const TrainConfig& config, std::size_t proj = 256);

ClassificationMetrics evaluate_span_classifier(const SpanRepModel& model, const std::vector<AuxInstance>& instances,
                                               const TokenTable& tokens);

}  // namespace parprobe

#endif  // PARPROBE_PROBES_HPP_
