#ifndef PARPROBE_KERNELS_HPP_
#define PARPROBE_KERNELS_HPP_

// Batch kernels in two builds: a serial reference and an OpenMP version.
// Both compute every item with the same scalar code and write to a fixed
// slot, so their outputs are bitwise identical.

#include <vector>

#include "parprobe/baselines.hpp"
#include "parprobe/metrics.hpp"
#include "parprobe/probes.hpp"

namespace parprobe::kernels {

namespace serial {

/// scores[e][c] for every example e and candidate c.
std::vector<std::vector<double>> score_pools(const Scorer& scorer, const std::vector<RankingExample>& pools,
                                             const EmbeddingTable* table);
std::vector<RankMetrics> pool_metrics(const std::vector<std::vector<double>>& scores,
                                      const std::vector<RankingExample>& pools);
/// raw[p][m] = text_similarity(methods[m], texts[a], texts[b]).
std::vector<std::vector<double>> pair_similarities(const std::vector<TextPair>& pairs,
                                                   const std::vector<AnnotatedText>& texts,
                                                   const std::vector<SimilarityMethod>& methods);

}  // namespace serial

namespace omp {

std::vector<std::vector<double>> score_pools(const Scorer& scorer, const std::vector<RankingExample>& pools,
                                             const EmbeddingTable* table);
std::vector<RankMetrics> pool_metrics(const std::vector<std::vector<double>>& scores,
                                      const std::vector<RankingExample>& pools);
std::vector<std::vector<double>> pair_similarities(const std::vector<TextPair>& pairs,
                                                   const std::vector<AnnotatedText>& texts,
                                                   const std::vector<SimilarityMethod>& methods);

}  // namespace omp

/// Worker threads the OpenMP kernels will use (1 without OpenMP).
int max_threads();

}  // namespace parprobe::kernels

#endif  // PARPROBE_KERNELS_HPP_
