#ifndef PARPROBE_METRICS_HPP_
#define PARPROBE_METRICS_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace parprobe {

struct RankMetrics {
  double mrr = 0.0;
  double ap = 0.0;
  double pairwise_accuracy = 0.0;
};

/// Metrics for labels listed in ranked order (index 0 = top). The outcome
/// must hold at least one positive and one negative.
RankMetrics rank_metrics(std::span<const std::uint8_t> ranked_labels);

/// Candidate order after sorting by descending score, ties kept in
/// candidate index order.
std::vector<std::size_t> ranking_order(std::span<const double> scores);

/// Ranks by score with the stable tie-break for MRR and AP. Pairwise
/// accuracy is computed on the raw scores and counts ties as failures.
RankMetrics rank_metrics_from_scores(std::span<const double> scores, std::span<const std::uint8_t> labels);

/// Unweighted means over examples.
struct MeanRankMetrics {
  double map = 0.0;
  double mrr = 0.0;
  double pairwise_accuracy = 0.0;
  std::size_t examples = 0;
};

MeanRankMetrics mean_rank_metrics(std::span<const RankMetrics> per_example);

struct ClassificationMetrics {
  double f1 = 0.0;
  double accuracy = 0.0;
  std::optional<double> auroc;  // absent when only one class is present
};

/// F1 and accuracy at `threshold` (score >= threshold predicts 1). AUROC
/// via the rank-sum formulation with ties counted 0.5.
ClassificationMetrics classification_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                             double threshold = 0.5);

/// Throws when AUROC is undefined.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct FoldReport {
  std::size_t fold_id = 0;
  std::map<std::string, double> metrics;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (divisor k - 1)
  std::vector<double> values;  // in fold order
};

/// Per-metric mean and sample std. Results do not depend on fold order
/// except for the recorded `values`, which follow fold_id.
std::map<std::string, Aggregate> aggregate_folds(std::vector<FoldReport> reports);

/// One line of an exported report.
struct ReportRow {
  std::string task;
  std::string model;
  std::string variant;
  std::string scorer;
  std::string layer_selector;
  std::string metric;
  Aggregate value;
};

std::vector<ReportRow> report_rows(const std::string& task, const std::string& model, const std::string& variant,
                                   const std::string& scorer, const std::string& layer_selector,
                                   const std::map<std::string, Aggregate>& aggregate);

/// CSV with a leading `# key=value ...` provenance comment line.
void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path,
                      const std::string& provenance);
std::vector<ReportRow> read_report_csv(const std::filesystem::path& path);
void write_report_json(const std::vector<ReportRow>& rows, const std::filesystem::path& path,
                       const std::string& provenance);

std::string format_number(double value);

}  // namespace parprobe

#endif  // PARPROBE_METRICS_HPP_
