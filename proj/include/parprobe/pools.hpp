#ifndef PARPROBE_POOLS_HPP_
#define PARPROBE_POOLS_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "parprobe/common.hpp"
#include "parprobe/corpus.hpp"

namespace parprobe {

/// One anchor with a labeled candidate pool. Narrative anchors and
/// candidates are whole-document spans.
struct RankingExample {
  std::string example_id;
  Span anchor;
  std::vector<Span> candidates;
  std::vector<std::uint8_t> labels;  // 1 = parallel to the anchor
  std::vector<CandidateTag> tags;
  std::uint64_t seed = 0;

  std::size_t size() const { return candidates.size(); }
  std::size_t positive_count() const;
  std::size_t negative_count() const { return size() - positive_count(); }

  /// Throws unless the pool has both classes, no duplicate candidates and
  /// excludes the anchor.
  void validate() const;

  friend bool operator==(const RankingExample&, const RankingExample&) = default;
};

std::vector<RankingExample> build_narrative_pools(const std::vector<Narrative>& narratives,
                                                  std::size_t x_pos, std::size_t y_neg,
                                                  std::uint64_t seed,
                                                  Warnings* warnings = nullptr);

enum class AnchorMode { all_branches, first_branch_only };

struct RhetoricalPoolOptions {
  std::size_t n_neg = 18;
  AnchorMode anchors = AnchorMode::all_branches;
  /// When set, negatives per example are sized so that the whole pool has
  /// exactly this many candidates (used by the prompting harness).
  std::optional<std::size_t> pool_size;
};

/// Negatives are contiguous token spans from the anchor's sermon, lengths
/// drawn from the empirical branch-length distribution, rejection-sampled
/// so they overlap neither the anchor's branch set nor each other.
std::vector<RankingExample> build_rhetorical_pools(const AspCorpus& asp,
                                                   const RhetoricalPoolOptions& options,
                                                   std::uint64_t seed,
                                                   Warnings* warnings = nullptr);

enum class AuxTask { event, entity, coref, quote };

std::string_view to_string(AuxTask task);
AuxTask aux_task_from_string(std::string_view name);
bool is_pair_task(AuxTask task);

struct AuxInstance {
  AuxTask task = AuxTask::event;
  Span span_1;
  std::optional<Span> span_2;
  int label = 0;

  friend bool operator==(const AuxInstance&, const AuxInstance&) = default;
};

/// Positives per task follow the annotations; negatives are sampled within
/// the same document and the larger class is downsampled so the result is
/// exactly balanced.
std::vector<AuxInstance> build_aux_instances(AuxTask task,
                                             const std::vector<LitBankAnnotations>& litbank,
                                             std::uint64_t seed,
                                             Warnings* warnings = nullptr);

void write_pools_jsonl(const std::vector<RankingExample>& pools, const std::filesystem::path& path,
                        const Provenance& provenance = {});
std::vector<RankingExample> read_pools_jsonl(const std::filesystem::path& path);

void write_aux_jsonl(const std::vector<AuxInstance>& instances, const std::filesystem::path& path,
                        const Provenance& provenance = {});
std::vector<AuxInstance> read_aux_jsonl(const std::filesystem::path& path);

}  // namespace parprobe

#endif  // PARPROBE_POOLS_HPP_
