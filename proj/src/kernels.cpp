#include "parprobe/kernels.hpp"

#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace parprobe::kernels {

namespace {

std::vector<double> pool_scores(const Scorer& scorer, const RankingExample& ex, const EmbeddingTable* table) {
  return score_example(scorer, ex, table);
}

RankMetrics one_metric(const std::vector<double>& scores, const RankingExample& ex) {
  return rank_metrics_from_scores(scores, ex.labels);
}

std::vector<double> one_pair(const TextPair& p, const std::vector<AnnotatedText>& texts,
                             const std::vector<SimilarityMethod>& methods) {
  std::vector<double> row(methods.size());
  for (std::size_t m = 0; m < methods.size(); ++m) row[m] = text_similarity(methods[m], texts.at(p.a), texts.at(p.b));
  return row;
}

/// Runs body(i) for i in [0, n) across threads; the first exception (by
/// index) is rethrown after the loop.
template <typename Body>
void parallel_for(std::size_t n, Body body) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace

namespace serial {

std::vector<std::vector<double>> score_pools(const Scorer& scorer, const std::vector<RankingExample>& pools,
                                             const EmbeddingTable* table) {
  std::vector<std::vector<double>> out(pools.size());
  for (std::size_t e = 0; e < pools.size(); ++e) out[e] = pool_scores(scorer, pools[e], table);
  return out;
}

std::vector<RankMetrics> pool_metrics(const std::vector<std::vector<double>>& scores,
                                      const std::vector<RankingExample>& pools) {
  if (scores.size() != pools.size()) throw Error("pool_metrics: score and pool counts differ");
  std::vector<RankMetrics> out(pools.size());
  for (std::size_t e = 0; e < pools.size(); ++e) out[e] = one_metric(scores[e], pools[e]);
  return out;
}

std::vector<std::vector<double>> pair_similarities(const std::vector<TextPair>& pairs,
                                                   const std::vector<AnnotatedText>& texts,
                                                   const std::vector<SimilarityMethod>& methods) {
  std::vector<std::vector<double>> out(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) out[p] = one_pair(pairs[p], texts, methods);
  return out;
}

}  // namespace serial

namespace omp {

std::vector<std::vector<double>> score_pools(const Scorer& scorer, const std::vector<RankingExample>& pools,
                                             const EmbeddingTable* table) {
  std::vector<std::vector<double>> out(pools.size());
  parallel_for(pools.size(), [&](std::size_t e) { out[e] = pool_scores(scorer, pools[e], table); });
  return out;
}

std::vector<RankMetrics> pool_metrics(const std::vector<std::vector<double>>& scores,
                                      const std::vector<RankingExample>& pools) {
  if (scores.size() != pools.size()) throw Error("pool_metrics: score and pool counts differ");
  std::vector<RankMetrics> out(pools.size());
  parallel_for(pools.size(), [&](std::size_t e) { out[e] = one_metric(scores[e], pools[e]); });
  return out;
}

std::vector<std::vector<double>> pair_similarities(const std::vector<TextPair>& pairs,
                                                   const std::vector<AnnotatedText>& texts,
                                                   const std::vector<SimilarityMethod>& methods) {
  std::vector<std::vector<double>> out(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t p) { out[p] = one_pair(pairs[p], texts, methods); });
  return out;
}

}  // namespace omp

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace parprobe::kernels
