#include "parprobe/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "parprobe/common.hpp"

namespace parprobe {

RankMetrics rank_metrics(std::span<const std::uint8_t> ranked_labels) {
  std::size_t n_pos = 0;
  for (auto l : ranked_labels) n_pos += l ? 1 : 0;
  const std::size_t n_neg = ranked_labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("ranking metrics undefined without both positives and negatives");

  RankMetrics m;
  std::size_t hits = 0;
  std::size_t negatives_above = 0;
  std::size_t correct_pairs = 0;
  double precision_sum = 0.0;
  for (std::size_t i = 0; i < ranked_labels.size(); ++i) {
    if (ranked_labels[i]) {
      ++hits;
      if (hits == 1) m.mrr = 1.0 / static_cast<double>(i + 1);
      precision_sum += static_cast<double>(hits) / static_cast<double>(i + 1);
      correct_pairs += n_neg - negatives_above;
    } else {
      ++negatives_above;
    }
  }
  m.ap = precision_sum / static_cast<double>(n_pos);
  m.pairwise_accuracy = static_cast<double>(correct_pairs) / static_cast<double>(n_pos * n_neg);
  return m;
}

std::vector<std::size_t> ranking_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

RankMetrics rank_metrics_from_scores(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("rank metrics: scores and labels differ in length");
  for (double s : scores) {
    if (std::isnan(s)) throw Error("rank metrics: NaN score");
  }
  const auto order = ranking_order(scores);
  std::vector<std::uint8_t> ranked(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) ranked[i] = labels[order[i]];
  RankMetrics m = rank_metrics(ranked);

  // Pairwise accuracy on raw scores: ties are failures.
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
  std::sort(neg.begin(), neg.end());
  std::size_t correct = 0;
  for (double p : pos) {
    correct += static_cast<std::size_t>(std::lower_bound(neg.begin(), neg.end(), p) - neg.begin());
  }
  m.pairwise_accuracy = static_cast<double>(correct) / static_cast<double>(pos.size() * neg.size());
  return m;
}

MeanRankMetrics mean_rank_metrics(std::span<const RankMetrics> per_example) {
  MeanRankMetrics out;
  out.examples = per_example.size();
  if (per_example.empty()) return out;
  for (const auto& m : per_example) {
    out.map += m.ap;
    out.mrr += m.mrr;
    out.pairwise_accuracy += m.pairwise_accuracy;
  }
  const double n = static_cast<double>(per_example.size());
  out.map /= n;
  out.mrr /= n;
  out.pairwise_accuracy /= n;
  return out;
}

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw Error("auroc: scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mid-ranks for ties.
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
    for (std::size_t k = i; k < j; ++k) rank[idx[k]] = mid;
    i = j;
  }
  double n_pos = 0, n_neg = 0, rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      n_pos += 1;
      rank_sum += rank[i];
    } else {
      n_neg += 1;
    }
  }
  if (n_pos == 0 || n_neg == 0) throw Error("auroc undefined for single-class labels");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

ClassificationMetrics classification_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                             double threshold) {
  if (scores.size() != labels.size()) throw Error("classification metrics: length mismatch");
  if (scores.empty()) throw Error("classification metrics: no instances");
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    const bool gold = labels[i] != 0;
    if (pred && gold) ++tp;
    if (pred && !gold) ++fp;
    if (!pred && gold) ++fn;
    if (pred == gold) ++correct;
  }
  ClassificationMetrics m;
  const double denom = static_cast<double>(2 * tp + fp + fn);
  m.f1 = denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(scores.size());
  const bool has_pos = tp + fn > 0;
  const bool has_neg = scores.size() - (tp + fn) > 0;
  if (has_pos && has_neg) m.auroc = auroc(scores, labels);
  return m;
}

std::map<std::string, Aggregate> aggregate_folds(std::vector<FoldReport> reports) {
  if (reports.size() < 2) throw Error("aggregate_folds needs at least two folds");
  std::sort(reports.begin(), reports.end(), [](const FoldReport& a, const FoldReport& b) { return a.fold_id < b.fold_id; });
  std::map<std::string, Aggregate> out;
  for (const auto& r : reports) {
    if (r.metrics.size() != reports.front().metrics.size() ||
        !std::equal(r.metrics.begin(), r.metrics.end(), reports.front().metrics.begin(),
                    [](const auto& a, const auto& b) { return a.first == b.first; })) {
      throw Error("fold " + std::to_string(r.fold_id) + " reports a different metric set");
    }
  }
  for (const auto& [name, unused] : reports.front().metrics) {
    Aggregate agg;
    for (const auto& r : reports) agg.values.push_back(r.metrics.at(name));
    // Summation over sorted values keeps the result independent of fold order.
    std::vector<double> sorted = agg.values;
    std::sort(sorted.begin(), sorted.end());
    const double k = static_cast<double>(sorted.size());
    double sum = 0.0;
    for (double v : sorted) sum += v;
    agg.mean = sum / k;
    double ss = 0.0;
    for (double v : sorted) ss += (v - agg.mean) * (v - agg.mean);
    agg.std = std::sqrt(ss / (k - 1.0));
    out.emplace(name, std::move(agg));
  }
  return out;
}

std::vector<ReportRow> report_rows(const std::string& task, const std::string& model, const std::string& variant,
                                   const std::string& scorer, const std::string& layer_selector,
                                   const std::map<std::string, Aggregate>& aggregate) {
  std::vector<ReportRow> rows;
  for (const auto& [metric, agg] : aggregate) {
    rows.push_back(ReportRow{task, model, variant, scorer, layer_selector, metric, agg});
  }
  return rows;
}

std::string format_number(double value) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc()) throw Error("cannot format number");
  return std::string(buf, ptr);
}

namespace {

constexpr const char* kReportHeader = "task,model,variant,scorer,layer_selector,metric,mean,std,folds";

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

double parse_number(const std::string& s, const std::string& context) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw Error(context + ": bad number '" + s + "'");
  }
  return v;
}

}  // namespace

void write_report_csv(const std::vector<ReportRow>& rows, const std::filesystem::path& path,
                      const std::string& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if (!provenance.empty()) out << "# " << provenance << '\n';
  out << kReportHeader << '\n';
  for (const auto& r : rows) {
    std::string folds;
    for (std::size_t i = 0; i < r.value.values.size(); ++i) {
      if (i) folds += ';';
      folds += format_number(r.value.values[i]);
    }
    out << r.task << ',' << r.model << ',' << r.variant << ',' << r.scorer << ',' << r.layer_selector << ','
        << r.metric << ',' << format_number(r.value.mean) << ',' << format_number(r.value.std) << ',' << folds
        << '\n';
  }
}

std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<ReportRow> rows;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != kReportHeader) throw Error(path.string() + ": unexpected report header");
      header_seen = true;
      continue;
    }
    const auto f = split(line, ',');
    const std::string context = path.string() + ":" + std::to_string(line_no);
    if (f.size() != 9) throw Error(context + ": expected 9 columns");
    ReportRow r{f[0], f[1], f[2], f[3], f[4], f[5], {}};
    r.value.mean = parse_number(f[6], context);
    r.value.std = parse_number(f[7], context);
    if (!f[8].empty()) {
      for (const auto& v : split(f[8], ';')) r.value.values.push_back(parse_number(v, context));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_report_json(const std::vector<ReportRow>& rows, const std::filesystem::path& path,
                       const std::string& provenance) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    j.push_back({{"task", r.task},
                 {"model", r.model},
                 {"variant", r.variant},
                 {"scorer", r.scorer},
                 {"layer_selector", r.layer_selector},
                 {"metric", r.metric},
                 {"mean", r.value.mean},
                 {"std", r.value.std},
                 {"folds", r.value.values}});
  }
  nlohmann::json doc = {{"provenance", provenance}, {"rows", j}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

}  // namespace parprobe
