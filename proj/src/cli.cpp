#include "parprobe/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "parprobe/baselines.hpp"
#include "parprobe/corpus.hpp"
#include "parprobe/embed_store.hpp"
#include "parprobe/kernels.hpp"
#include "parprobe/metrics.hpp"
#include "parprobe/pools.hpp"
#include "parprobe/probes.hpp"
#include "parprobe/prompt_rank.hpp"
#include "parprobe/rng.hpp"

#ifndef PARPROBE_VERSION
#define PARPROBE_VERSION "0.0.0"
#endif

namespace parprobe::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------- hashing

struct Fnv {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const char* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(data[i]);
      h *= 0x100000001b3ULL;
    }
  }
  void str(std::string_view s) {
    bytes(s.data(), s.size());
    bytes("\0", 1);
  }
};

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void digest_file(Fnv& fnv, const fs::path& path) {
  constexpr std::uintmax_t kFull = 64ull << 20;
  constexpr std::size_t kEdge = 8u << 20;
  const auto size = fs::file_size(path);
  fnv.str(std::to_string(size));
  std::ifstream in(path, std::ios::binary);
  std::vector<char> buf(1 << 16);
  auto consume = [&](std::uintmax_t limit) {
    std::uintmax_t left = limit;
    while (left > 0 && in) {
      in.read(buf.data(), static_cast<std::streamsize>(std::min<std::uintmax_t>(buf.size(), left)));
      const auto got = static_cast<std::size_t>(in.gcount());
      if (got == 0) break;
      fnv.bytes(buf.data(), got);
      left -= got;
    }
  };
  if (size <= kFull) {
    consume(size);
  } else {
    consume(kEdge);
    in.seekg(static_cast<std::streamoff>(size - kEdge));
    consume(kEdge);
  }
}

void digest_path(Fnv& fnv, const fs::path& path) {
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      if (e.is_regular_file()) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      fnv.str(fs::relative(f, path).generic_string());
      digest_file(fnv, f);
    }
  } else if (fs::is_regular_file(path)) {
    digest_file(fnv, path);
  }
}

// ---------------------------------------------------------------- helpers

bool is_ranking_task(const std::string& task) { return task == "narrative" || task == "rhetorical"; }

std::string fold_stem(std::size_t fold) { return "scorer_fold" + std::to_string(fold); }

struct Context {
  RunConfig cfg;
  std::string hash;
  fs::path run_dir;
  Provenance provenance;
  Warnings warnings;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;

  void flush_warnings() {
    for (const auto& w : warnings.items) *err << "warning: " << w << '\n';
    warnings.items.clear();
  }
};

[[noreturn]] void config_error(const std::string& field, const std::string& message) {
  throw ConfigError{field, message};
}

void validate(const RunConfig& c, const std::string& command) {
  static const std::set<std::string> tasks = {"narrative", "rhetorical", "event", "entity", "coref", "quote"};
  if (!tasks.count(c.task)) config_error("task", "unknown task '" + c.task + "'");
  try {
    scorer_kind_from_string(c.scorer);
  } catch (const Error&) {
    config_error("scorer", "unknown scorer '" + c.scorer + "'");
  }
  try {
    LayerSelector::parse(c.layer);
  } catch (const Error& e) {
    config_error("layer", e.what());
  }
  try {
    head_kind_from_string(c.head);
  } catch (const Error&) {
    config_error("head", "unknown head '" + c.head + "'");
  }
  if (c.variant != "base" && c.variant != "instruct") config_error("variant", "must be base or instruct");
  if (!(c.threshold >= 0.0 && c.threshold <= 1.0)) config_error("threshold", "must lie in [0, 1]");
  if (c.folds < 2) config_error("folds", "must be >= 2");
  if (!(c.val_ratio > 0.0 && c.test_ratio > 0.0 && c.val_ratio + c.test_ratio < 1.0)) {
    config_error("val_ratio", "val_ratio and test_ratio must be positive and sum below 1");
  }
  if (c.n_neg < 1) config_error("n_neg", "must be >= 1");
  if (c.x_pos < 1) config_error("x_pos", "must be >= 1");
  if (c.y_neg < 1) config_error("y_neg", "must be >= 1");
  if (!(c.lr > 0.0)) config_error("lr", "must be > 0");
  if (c.epochs < 1) config_error("epochs", "must be >= 1");
  if (c.batch_size < 2) config_error("batch_size", "must be >= 2");
  if (c.hidden < 1) config_error("hidden", "must be >= 1");
  if (c.proj < 1) config_error("proj", "must be >= 1");
  if (c.jobs < 1) config_error("jobs", "must be >= 1");
  if (c.concurrency < 1) config_error("concurrency", "must be >= 1");
  if (!(c.backoff >= 0.0)) config_error("backoff", "must be >= 0");
  if (!(c.timeout > 0.0)) config_error("timeout", "must be > 0");
  static const std::set<std::string> providers = {"http", "oracle", "constant", "replay"};
  if (!providers.count(c.provider)) config_error("provider", "unknown provider '" + c.provider + "'");
  if (command == "prompt") {
    if (!is_ranking_task(c.task)) config_error("task", "prompting supports narrative and rhetorical only");
    if (c.provider == "http" && c.endpoint.empty()) config_error("endpoint", "required for the http provider");
    if (c.provider == "http" && c.provider_model.empty()) config_error("provider_model", "required for the http provider");
    if (c.provider == "replay" && c.replay.empty()) config_error("replay", "required for the replay provider");
  }
  if (command == "report" && c.inputs.empty()) config_error("inputs", "report needs at least one results CSV");
  if (command == "baselines" && !is_ranking_task(c.task)) config_error("task", "baselines run on narrative or rhetorical");
  if (command == "layers" && !is_ranking_task(c.task)) config_error("task", "layer sweeps run on ranking tasks");
  if (!is_ranking_task(c.task) && LayerSelector::parse(c.layer).all_layers &&
      (command == "train" || command == "eval")) {
    config_error("layer", "span classifiers need a single layer");
  }
  const std::vector<std::pair<std::string, std::string>> paths = {
      {"arn", c.arn},     {"arn_scores", c.arn_scores}, {"asp_dir", c.asp_dir},         {"asp_annotations", c.asp_annotations},
      {"litbank", c.litbank}, {"corpus", c.corpus},     {"pools", c.pools},             {"store", c.store},
      {"annotations", c.annotations}, {"replay", c.replay}, {"config", c.config_file}};
  for (const auto& [field, value] : paths) {
    if (!value.empty() && !fs::exists(value)) config_error(field, "path does not exist: " + value);
  }
  for (const auto& in : c.inputs) {
    if (!fs::exists(in)) config_error("inputs", "path does not exist: " + in);
  }
}

// ---------------------------------------------------------------- data loading

Corpus load_corpus(Context& ctx) {
  const auto& c = ctx.cfg;
  if (!c.corpus.empty()) return read_corpus_jsonl(c.corpus);
  if (fs::exists(ctx.run_dir / "corpus.jsonl")) return read_corpus_jsonl(ctx.run_dir / "corpus.jsonl");
  Corpus corpus;
  bool any = false;
  if (!c.arn.empty() || !c.arn_scores.empty()) {
    if (c.arn.empty()) config_error("arn", "needed together with arn_scores");
    if (c.arn_scores.empty()) config_error("arn_scores", "needed together with arn");
    corpus.narratives = load_arn(c.arn, c.arn_scores, c.threshold);
    any = true;
  }
  if (!c.asp_dir.empty() || !c.asp_annotations.empty()) {
    if (c.asp_dir.empty()) config_error("asp_dir", "needed together with asp_annotations");
    if (c.asp_annotations.empty()) config_error("asp_annotations", "needed together with asp_dir");
    corpus.asp = load_asp(c.asp_dir, c.asp_annotations, &ctx.warnings);
    any = true;
  }
  if (!c.litbank.empty()) {
    corpus.litbank = load_litbank(c.litbank, &ctx.warnings);
    any = true;
  }
  if (!any) config_error("corpus", "no corpus given (corpus, arn/arn_scores, asp_dir/asp_annotations or litbank)");
  return corpus;
}

std::vector<RankingExample> build_pools_for(Context& ctx, const Corpus& corpus) {
  const auto& c = ctx.cfg;
  const auto seed = derive_seed(c.seed, "pools");
  if (c.task == "narrative") {
    if (corpus.narratives.empty()) config_error("arn", "narrative task needs ARN narratives");
    return build_narrative_pools(corpus.narratives, c.x_pos, c.y_neg, seed, &ctx.warnings);
  }
  if (corpus.asp.sets.empty()) config_error("asp_annotations", "rhetorical task needs ASP branch sets");
  RhetoricalPoolOptions opts;
  opts.n_neg = c.n_neg;
  return build_rhetorical_pools(corpus.asp, opts, seed, &ctx.warnings);
}

std::vector<RankingExample> load_pools(Context& ctx) {
  if (!ctx.cfg.pools.empty()) return read_pools_jsonl(ctx.cfg.pools);
  if (fs::exists(ctx.run_dir / "pools.jsonl")) return read_pools_jsonl(ctx.run_dir / "pools.jsonl");
  const Corpus corpus = load_corpus(ctx);
  return build_pools_for(ctx, corpus);
}

std::vector<AuxInstance> load_aux(Context& ctx, const Corpus& corpus) {
  if (!ctx.cfg.pools.empty()) return read_aux_jsonl(ctx.cfg.pools);
  if (fs::exists(ctx.run_dir / "aux.jsonl")) return read_aux_jsonl(ctx.run_dir / "aux.jsonl");
  if (corpus.litbank.empty()) config_error("litbank", "auxiliary tasks need LitBank annotations");
  return build_aux_instances(aux_task_from_string(ctx.cfg.task), corpus.litbank, derive_seed(ctx.cfg.seed, "aux"),
                             &ctx.warnings);
}

std::vector<SplitAssignment> splits_for(const RunConfig& c, std::vector<std::string> doc_ids) {
  std::sort(doc_ids.begin(), doc_ids.end());
  doc_ids.erase(std::unique(doc_ids.begin(), doc_ids.end()), doc_ids.end());
  return make_splits(doc_ids, c.folds, {1.0 - c.val_ratio - c.test_ratio, c.val_ratio, c.test_ratio},
                     derive_seed(c.seed, "splits"));
}

template <typename T, typename DocOf>
std::vector<T> select(const std::vector<T>& items, const std::vector<std::string>& docs, DocOf doc_of) {
  const std::set<std::string> keep(docs.begin(), docs.end());
  std::vector<T> out;
  for (const auto& x : items) {
    if (keep.count(doc_of(x))) out.push_back(x);
  }
  return out;
}

TrainConfig train_config(const RunConfig& c, std::size_t fold, LayerSelector selector) {
  TrainConfig t;
  t.learning_rate = c.lr;
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.patience = c.patience;
  t.hidden = c.hidden;
  t.layer_selector = selector;
  t.seed = derive_seed(c.seed, "train", fold);
  return t;
}

/// Runs fn(fold) for every fold on up to `jobs` threads; results keep fold
/// order. The first failing fold's exception is rethrown.
template <typename R, typename Fn>
std::vector<R> run_folds(std::size_t n, std::size_t jobs, Fn fn) {
  std::vector<std::optional<R>> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t f; (f = next.fetch_add(1)) < n;) {
      try {
        results[f] = fn(f);
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(jobs, n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<R> out;
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

std::string selector_label(const RunConfig& c) {
  return c.scorer == "distance" ? "-" : LayerSelector::parse(c.layer).str();
}

// ---------------------------------------------------------------- ranking folds

struct RankFold {
  FoldReport report;
  Scorer scorer;
  std::vector<EpochLog> history;
  std::vector<std::pair<std::string, RankMetrics>> per_example;
  Warnings warnings;
};

struct RankSetup {
  std::vector<RankingExample> pools;
  std::vector<SplitAssignment> splits;
  std::optional<EmbeddingTable> table;
};

RankSetup rank_setup(Context& ctx, LayerSelector selector, bool need_table) {
  RankSetup s;
  s.pools = load_pools(ctx);
  if (s.pools.empty()) throw Error("no ranking examples to train on");
  std::vector<std::string> docs;
  for (const auto& ex : s.pools) docs.push_back(ex.anchor.doc_id);
  s.splits = splits_for(ctx.cfg, docs);
  if (need_table) {
    if (ctx.cfg.store.empty()) config_error("store", "scorer '" + ctx.cfg.scorer + "' needs an embedding store");
    StoreReader reader(ctx.cfg.store);
    s.table = load_embedding_table(reader, s.pools, selector);
  }
  return s;
}

RankFold rank_fold(const RunConfig& c, const RankSetup& s, std::size_t fold, ScorerKind kind, LayerSelector selector,
                   const std::optional<Scorer>& fixed) {
  RankFold r;
  const auto& split = s.splits[fold];
  auto doc = [](const RankingExample& e) { return e.anchor.doc_id; };
  const auto train = select(s.pools, split.train, doc);
  const auto val = select(s.pools, split.val, doc);
  const auto test = select(s.pools, split.test, doc);
  if (test.empty()) throw Error("fold " + std::to_string(fold) + " has no test examples");
  const EmbeddingTable* table = s.table ? &*s.table : nullptr;
  if (fixed) {
    r.scorer = *fixed;
  } else {
    auto result = train_probe(train, val, table, kind, train_config(c, fold, selector), &r.warnings);
    r.scorer = std::move(result.scorer);
    r.history = std::move(result.history);
  }
  const auto eval = evaluate_pools(r.scorer, test, table);
  r.report.fold_id = fold;
  r.report.metrics = {{"map", eval.mean.map},
                      {"mrr", eval.mean.mrr},
                      {"pairwise_accuracy", eval.mean.pairwise_accuracy},
                      {"rank_threshold_accuracy", eval.rank_threshold_accuracy}};
  for (std::size_t i = 0; i < test.size(); ++i) r.per_example.emplace_back(test[i].example_id, eval.per_example[i]);
  return r;
}

void write_examples_csv(const fs::path& path, const std::vector<RankFold>& folds, const Provenance& prov) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << "# " << prov.str() << '\n' << "fold,example_id,ap,mrr,pairwise_accuracy\n";
  for (const auto& f : folds) {
    for (const auto& [id, m] : f.per_example) {
      out << f.report.fold_id << ',' << id << ',' << format_number(m.ap) << ',' << format_number(m.mrr) << ','
          << format_number(m.pairwise_accuracy) << '\n';
    }
  }
}

// ---------------------------------------------------------------- aux folds

struct AuxFold {
  FoldReport report;
  SpanRepModel model;
};

std::map<std::string, double> aux_metrics(const ClassificationMetrics& m) {
  return {{"f1", m.f1}, {"accuracy", m.accuracy}, {"auroc", m.auroc ? *m.auroc : std::nan("")}};
}

int run_aux(Context& ctx, bool train_only_eval) {
  (void)train_only_eval;
  const auto& c = ctx.cfg;
  const Corpus corpus = [&] {
    if (!c.pools.empty() || fs::exists(ctx.run_dir / "aux.jsonl")) return Corpus{};
    return load_corpus(ctx);
  }();
  const auto instances = load_aux(ctx, corpus);
  if (instances.empty()) throw Error("no auxiliary instances for task " + c.task);
  std::vector<std::string> docs;
  for (const auto& i : instances) docs.push_back(i.span_1.doc_id);
  const auto splits = splits_for(c, docs);
  if (c.store.empty()) config_error("store", "span classifiers need a token-level store");
  StoreReader reader(c.store);
  const auto selector = LayerSelector::parse(c.layer);
  const TokenTable tokens = load_token_table(reader, instances, selector.layer);
  const HeadKind head = head_kind_from_string(c.head);
  auto doc = [](const AuxInstance& i) { return i.span_1.doc_id; };
  auto folds = run_folds<AuxFold>(splits.size(), c.jobs, [&](std::size_t f) {
    const auto train = select(instances, splits[f].train, doc);
    const auto val = select(instances, splits[f].val, doc);
    const auto test = select(instances, splits[f].test, doc);
    if (test.empty()) throw Error("fold " + std::to_string(f) + " has no test instances");
    auto result = train_span_classifier(train, val, tokens, head, train_config(c, f, selector), c.proj);
    AuxFold out;
    out.report.fold_id = f;
    out.report.metrics = aux_metrics(evaluate_span_classifier(result.model, test, tokens));
    out.model = std::move(result.model);
    return out;
  });
  std::vector<FoldReport> reports;
  for (const auto& f : folds) reports.push_back(f.report);
  const auto rows = report_rows(c.task, c.model, c.variant, c.head, selector.str(), aggregate_folds(reports));
  write_report_csv(rows, ctx.run_dir / "results.csv", ctx.provenance.str());
  write_report_json(rows, ctx.run_dir / "results.json", ctx.provenance.str());
  for (const auto& r : rows) {
    *ctx.out << r.task << ' ' << r.metric << ' ' << format_number(r.value.mean) << " +- " << format_number(r.value.std)
             << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------- subcommands

int cmd_ingest(Context& ctx) {
  RunConfig c = ctx.cfg;
  c.corpus.clear();
  Context local = ctx;
  local.cfg = c;
  fs::remove(ctx.run_dir / "corpus.jsonl");
  const Corpus corpus = load_corpus(local);
  ctx.warnings.items.insert(ctx.warnings.items.end(), local.warnings.items.begin(), local.warnings.items.end());
  write_corpus_jsonl(corpus, ctx.run_dir / "corpus.jsonl", ctx.provenance);
  json summary = {{"provenance", ctx.provenance.str()},
                  {"narratives", corpus.narratives.size()},
                  {"sermons", corpus.asp.sermons.size()},
                  {"branch_sets", corpus.asp.sets.size()},
                  {"mean_branches", corpus.asp.sets.empty() ? 0.0 : mean_branch_count(corpus.asp.sets)},
                  {"litbank_documents", corpus.litbank.size()},
                  {"warnings", ctx.warnings.items}};
  std::ofstream(ctx.run_dir / "ingest.json", std::ios::binary) << summary.dump(2) << '\n';
  *ctx.out << "narratives " << corpus.narratives.size() << "\nsermons " << corpus.asp.sermons.size()
           << "\nbranch_sets " << corpus.asp.sets.size() << "\nlitbank_documents " << corpus.litbank.size() << '\n';
  return 0;
}

int cmd_pools(Context& ctx) {
  const auto& c = ctx.cfg;
  RunConfig no_pools = c;
  no_pools.pools.clear();
  ctx.cfg = no_pools;
  const Corpus corpus = load_corpus(ctx);
  ctx.cfg = c;
  if (is_ranking_task(c.task)) {
    const auto pools = build_pools_for(ctx, corpus);
    write_pools_jsonl(pools, ctx.run_dir / "pools.jsonl", ctx.provenance);
    *ctx.out << "examples " << pools.size() << '\n';
  } else {
    if (corpus.litbank.empty()) config_error("litbank", "auxiliary tasks need LitBank annotations");
    const auto inst = build_aux_instances(aux_task_from_string(c.task), corpus.litbank, derive_seed(c.seed, "aux"),
                                          &ctx.warnings);
    write_aux_jsonl(inst, ctx.run_dir / "aux.jsonl", ctx.provenance);
    *ctx.out << "instances " << inst.size() << '\n';
  }
  return 0;
}

int cmd_train(Context& ctx, bool eval_only) {
  const auto& c = ctx.cfg;
  if (!is_ranking_task(c.task)) return run_aux(ctx, eval_only);
  const ScorerKind kind = scorer_kind_from_string(c.scorer);
  const LayerSelector selector = LayerSelector::parse(c.layer);
  const RankSetup setup = rank_setup(ctx, selector, needs_embeddings(kind));

  auto folds = run_folds<RankFold>(setup.splits.size(), c.jobs, [&](std::size_t f) {
    std::optional<Scorer> fixed;
    if (eval_only) {
      const fs::path stem = ctx.run_dir / fold_stem(f);
      if (fs::exists(fs::path(stem).concat(".json"))) {
        fixed = load_scorer(stem);
      } else if (kind == ScorerKind::cosine) {
        const std::size_t dim = setup.table ? setup.table->dim : 0;
        const std::size_t layers = setup.table ? setup.table->n_layers : 0;
        fixed = Scorer::create(kind, dim, layers, train_config(c, f, selector));
      } else {
        throw Error("no trained scorer at " + stem.string() + ".json; run train first");
      }
    }
    return rank_fold(c, setup, f, kind, selector, fixed);
  });
  for (auto& f : folds) {
    for (auto& w : f.warnings.items) warn(&ctx.warnings, "fold " + std::to_string(f.report.fold_id) + ": " + w);
  }

  std::vector<FoldReport> reports;
  for (const auto& f : folds) reports.push_back(f.report);
  const auto rows = report_rows(c.task, c.model, c.variant, c.scorer, selector_label(c), aggregate_folds(reports));
  const std::string name = eval_only ? "eval" : "results";
  write_report_csv(rows, ctx.run_dir / (name + ".csv"), ctx.provenance.str());
  write_report_json(rows, ctx.run_dir / (name + ".json"), ctx.provenance.str());
  write_examples_csv(ctx.run_dir / (name + "_examples.csv"), folds, ctx.provenance);
  if (!eval_only) {
    TrainConfig tc = train_config(c, 0, selector);
    std::ofstream hist(ctx.run_dir / "history.csv", std::ios::binary);
    hist << "# " << ctx.provenance.str() << '\n' << "fold,epoch,train_loss,val_map\n";
    for (const auto& f : folds) {
      tc.seed = derive_seed(c.seed, "train", f.report.fold_id);
      save_scorer(f.scorer, tc, f.report.fold_id, ctx.run_dir / fold_stem(f.report.fold_id));
      for (const auto& e : f.history) {
        hist << f.report.fold_id << ',' << e.epoch << ',' << format_number(e.train_loss) << ','
             << format_number(e.val_map) << '\n';
      }
    }
  }
  for (const auto& r : rows) {
    *ctx.out << r.task << ' ' << r.scorer << ' ' << r.metric << ' ' << format_number(r.value.mean) << " +- "
             << format_number(r.value.std) << '\n';
  }
  return 0;
}

int cmd_layers(Context& ctx) {
  const auto& c = ctx.cfg;
  const ScorerKind kind = scorer_kind_from_string(c.scorer);
  if (!needs_embeddings(kind)) config_error("scorer", "layer sweeps need an embedding scorer");
  if (c.store.empty()) config_error("store", "layer sweeps need an embedding store");
  const std::size_t n_layers = StoreReader(c.store).meta().n_layers;

  std::ofstream out(ctx.run_dir / "layers.csv", std::ios::binary);
  if (!out) throw Error("cannot write layers.csv");
  out << "# " << ctx.provenance.str() << '\n'
      << "task,model,variant,scorer,layer_selector,map_mean,map_std,map_folds,mix_weights\n";
  const RankSetup all_setup = rank_setup(ctx, LayerSelector::all(), true);
  for (std::size_t l = 0; l <= n_layers; ++l) {
    const bool all = l == n_layers;
    const LayerSelector selector = all ? LayerSelector::all() : LayerSelector::single(l);
    RankSetup setup;
    setup.pools = all_setup.pools;
    setup.splits = all_setup.splits;
    if (all) {
      setup.table = all_setup.table;
    } else {
      EmbeddingTable t;
      t.dim = all_setup.table->dim;
      t.n_layers = 1;
      for (const auto& [key, row] : all_setup.table->rows) {
        t.rows.emplace(key, std::vector<double>(row.begin() + static_cast<std::ptrdiff_t>(l * t.dim),
                                                row.begin() + static_cast<std::ptrdiff_t>((l + 1) * t.dim)));
      }
      setup.table = std::move(t);
    }
    auto folds = run_folds<RankFold>(setup.splits.size(), c.jobs, [&](std::size_t f) {
      return rank_fold(c, setup, f, kind, selector, std::nullopt);
    });
    std::vector<FoldReport> reports;
    for (const auto& f : folds) reports.push_back(f.report);
    const auto agg = aggregate_folds(reports).at("map");
    std::string fold_values, mix;
    for (std::size_t i = 0; i < agg.values.size(); ++i) fold_values += (i ? ";" : "") + format_number(agg.values[i]);
    if (all) {
      std::vector<double> mean(n_layers, 0.0);
      for (const auto& f : folds) {
        const auto w = f.scorer.mix ? f.scorer.mix->softmax_weights() : std::vector<double>(n_layers, 0.0);
        for (std::size_t k = 0; k < n_layers; ++k) mean[k] += w[k] / static_cast<double>(folds.size());
      }
      for (std::size_t k = 0; k < n_layers; ++k) mix += (k ? ";" : "") + format_number(mean[k]);
    }
    out << c.task << ',' << c.model << ',' << c.variant << ',' << c.scorer << ',' << selector.str() << ','
        << format_number(agg.mean) << ',' << format_number(agg.std) << ',' << fold_values << ',' << mix << '\n';
    *ctx.out << selector.str() << " map " << format_number(agg.mean) << '\n';
  }
  return 0;
}

int cmd_prompt(Context& ctx) {
  const auto& c = ctx.cfg;
  const Corpus corpus = load_corpus(ctx);
  const PromptTask task = prompt_task_from_string(c.task);
  const auto seed = derive_seed(c.seed, "prompt_pools");
  std::vector<RankingExample> pools;
  if (task == PromptTask::narrative) {
    if (c.x_pos + c.y_neg != kPromptCandidates) config_error("y_neg", "x_pos + y_neg must equal 20 for prompting");
    pools = build_narrative_pools(corpus.narratives, c.x_pos, c.y_neg, seed, &ctx.warnings);
  } else {
    RhetoricalPoolOptions opts;
    opts.anchors = AnchorMode::first_branch_only;
    opts.pool_size = kPromptCandidates;
    pools = build_rhetorical_pools(corpus.asp, opts, seed, &ctx.warnings);
  }
  std::erase_if(pools, [&](const RankingExample& ex) {
    if (ex.size() == kPromptCandidates) return false;
    warn(&ctx.warnings, "example '" + ex.example_id + "' has " + std::to_string(ex.size()) + " candidates; skipped");
    return true;
  });
  if (pools.empty()) throw Error("no 20-candidate pools available for prompting");
  write_pools_jsonl(pools, ctx.run_dir / "prompt_pools.jsonl", ctx.provenance);

  std::map<std::string, const Document*> docs;
  for (const auto& n : corpus.narratives) docs[n.document.doc_id] = &n.document;
  for (const auto& s : corpus.asp.sermons) docs[s.doc_id] = &s;
  auto doc_of = [&](const Span& s) -> const Document& {
    auto it = docs.find(s.doc_id);
    if (it == docs.end()) throw Error("no text for document '" + s.doc_id + "'");
    return *it->second;
  };
  PromptSource source;
  source.text = [&](const Span& s) { return doc_of(s).span_text(s.start, s.end); };
  source.context = [&](const Span& s) { return preceding_context(doc_of(s), s.start); };
  const auto specs = make_prompt_specs(pools, task, source, derive_seed(c.seed, "prompt"));

  ProviderConfig pc;
  pc.name = c.provider;
  pc.model = c.provider_model;
  pc.endpoint = c.endpoint;
  pc.auth_env = c.auth_env;
  pc.max_retries = c.max_retries;
  pc.initial_backoff_s = c.backoff;
  pc.timeout_s = c.timeout;
  pc.max_concurrency = c.concurrency;
  std::unique_ptr<Provider> provider;
  if (c.provider == "http") {
    provider = make_http_provider(pc);
  } else if (c.provider == "oracle") {
    std::map<std::string, std::vector<std::uint8_t>> labels;
    for (const auto& ex : pools) labels[ex.example_id] = ex.labels;
    provider = std::make_unique<OracleProvider>(std::move(labels));
  } else if (c.provider == "constant") {
    provider = std::make_unique<ConstantProvider>(c.constant);
  } else {
    provider = std::make_unique<ReplayProvider>(c.replay);
  }
  RunOptions options;
  options.transcript = ctx.run_dir / "transcript.jsonl";
  const auto report = run_prompted_eval(pools, specs, *provider, pc, options, &ctx.warnings);
  const std::string model = c.provider_model.empty() ? c.provider : c.provider_model;
  const auto rows = prompt_report_rows(report, c.task, model, c.variant);
  write_report_csv(rows, ctx.run_dir / "prompt_results.csv", ctx.provenance.str());
  *ctx.out << "map " << format_number(report.mean.map) << "\nmrr " << format_number(report.mean.mrr)
           << "\npairwise_accuracy " << format_number(report.mean.pairwise_accuracy) << "\nfailure_rate "
           << format_number(report.failure_rate) << '\n';
  return 0;
}

int cmd_baselines(Context& ctx) {
  const auto& c = ctx.cfg;
  if (c.annotations.empty()) config_error("annotations", "baselines need an annotation file");
  const Corpus corpus = load_corpus(ctx);
  std::map<std::string, std::string> group_of;
  if (c.task == "narrative") {
    for (const auto& n : corpus.narratives) group_of[n.document.doc_id] = n.proverb_id;
  } else {
    for (const auto& set : corpus.asp.sets) {
      for (const auto& b : set.branches) group_of[b.key()] = set.set_id;
    }
  }
  std::vector<AnnotatedText> texts;
  for (auto& t : read_annotations_jsonl(c.annotations)) {
    if (group_of.count(t.id)) texts.push_back(std::move(t));
    else warn(&ctx.warnings, "annotation '" + t.id + "' matches no " + c.task + " item; skipped");
  }
  if (texts.size() < 2) throw Error("fewer than two annotated texts match the corpus");
  std::sort(texts.begin(), texts.end(), [](const AnnotatedText& a, const AnnotatedText& b) { return a.id < b.id; });

  std::vector<SimilarityMethod> methods;
  if (c.methods == "all") {
    for (auto m : all_similarity_methods()) {
      const bool ok = std::all_of(texts.begin(), texts.end(), [&](const AnnotatedText& t) {
        switch (m) {
          case SimilarityMethod::jaccard_lemmas: return !t.lemmas.empty();
          case SimilarityMethod::pos_edit:
          case SimilarityMethod::pos_jaccard: return !t.pos.empty();
          case SimilarityMethod::dep_ged:
          case SimilarityMethod::dep_wl_kernel: return !t.heads.empty();
          case SimilarityMethod::semantic_cosine: return t.semantic.has_value();
          default: return true;
        }
      });
      if (ok) methods.push_back(m);
      else warn(&ctx.warnings, "method " + std::string(to_string(m)) + " skipped: layer missing in some annotations");
    }
  } else {
    std::stringstream ss(c.methods);
    for (std::string name; std::getline(ss, name, ',');) {
      try {
        methods.push_back(similarity_method_from_string(name));
      } catch (const Error& e) {
        config_error("methods", e.what());
      }
    }
  }
  if (methods.empty()) config_error("methods", "no similarity method applies to these annotations");

  std::vector<std::string> ids, groups;
  for (const auto& t : texts) {
    ids.push_back(t.id);
    groups.push_back(group_of.at(t.id));
  }
  const std::size_t n_pairs = c.pairs ? c.pairs : (c.task == "narrative" ? 446 : 564);
  BaselineTable table;
  table.pairs = sample_pairs(ids, groups, n_pairs, derive_seed(c.seed, "baselines"), &ctx.warnings);
  table.methods = methods;
  table.raw = kernels::omp::pair_similarities(table.pairs, texts, methods);
  std::vector<std::string> names;
  for (auto m : methods) names.emplace_back(to_string(m));
  table.normalized = normalize_scores(table.raw, names, &ctx.warnings);
  write_baseline_csv(table, ctx.run_dir / "baselines.csv", ctx.provenance.str());

  std::ofstream stats(ctx.run_dir / "baselines_stats.csv", std::ios::binary);
  stats << "# " << ctx.provenance.str() << '\n' << "method,n_pos,n_neg,u,auc,z\n";
  std::vector<int> labels;
  for (const auto& p : table.pairs) labels.push_back(p.label);
  const auto n_pos = std::count(labels.begin(), labels.end(), 1);
  for (std::size_t m = 0; m < methods.size(); ++m) {
    std::vector<double> col;
    for (const auto& row : table.normalized) col.push_back(row[m]);
    if (n_pos == 0 || static_cast<std::size_t>(n_pos) == labels.size()) break;
    const auto s = rank_sum_statistic(col, labels);
    stats << names[m] << ',' << n_pos << ',' << labels.size() - static_cast<std::size_t>(n_pos) << ','
          << format_number(s.u) << ',' << format_number(s.auc) << ',' << format_number(s.z) << '\n';
    *ctx.out << names[m] << " auc " << format_number(s.auc) << " z " << format_number(s.z) << '\n';
  }
  return 0;
}

int cmd_report(Context& ctx) {
  struct Joined {
    std::map<std::string, double> metrics;
    std::string source;
  };
  std::map<std::tuple<std::string, std::string, std::string, std::string>, Joined> table;
  for (const auto& path : ctx.cfg.inputs) {
    for (const auto& r : read_report_csv(path)) {
      const std::string method = r.layer_selector == "-" ? r.scorer : r.scorer + "/" + r.layer_selector;
      auto& j = table[{r.task, r.model, r.variant, method}];
      j.metrics[r.metric] = r.value.mean;
      j.metrics[r.metric + "_std"] = r.value.std;
      j.source = fs::path(path).filename().string();
    }
  }
  const std::vector<std::string> cols = {"map", "map_std", "mrr", "pairwise_accuracy"};
  std::ofstream out(ctx.run_dir / "comparison.csv", std::ios::binary);
  if (!out) throw Error("cannot write comparison.csv");
  out << "# " << ctx.provenance.str() << '\n' << "task,model,variant,method";
  for (const auto& col : cols) out << ',' << col;
  out << '\n';
  for (const auto& [key, j] : table) {
    const auto& [task, model, variant, method] = key;
    out << task << ',' << model << ',' << variant << ',' << method;
    *ctx.out << task << ' ' << model << ' ' << method;
    for (const auto& col : cols) {
      auto it = j.metrics.find(col);
      out << ',' << (it == j.metrics.end() ? "" : format_number(it->second));
      if (col == "map" && it != j.metrics.end()) *ctx.out << " map " << format_number(it->second);
    }
    out << '\n';
    *ctx.out << '\n';
  }
  return 0;
}

json hashed_settings(const RunConfig& c) {
  return {{"seed", c.seed},
          {"task", c.task},
          {"model", c.model},
          {"variant", c.variant},
          {"scorer", c.scorer},
          {"layer", c.layer},
          {"head", c.head},
          {"threshold", c.threshold},
          {"x_pos", c.x_pos},
          {"y_neg", c.y_neg},
          {"n_neg", c.n_neg},
          {"folds", c.folds},
          {"val_ratio", c.val_ratio},
          {"test_ratio", c.test_ratio},
          {"lr", c.lr},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"patience", c.patience},
          {"hidden", c.hidden},
          {"proj", c.proj},
          {"provider", c.provider},
          {"endpoint", c.endpoint},
          {"provider_model", c.provider_model},
          {"max_retries", c.max_retries},
          {"constant", c.constant},
          {"pairs", c.pairs},
          {"methods", c.methods}};
}

}  // namespace

std::string config_hash(const RunConfig& c) {
  Fnv fnv;
  fnv.str(hashed_settings(c).dump());
  const std::vector<std::pair<std::string, std::string>> inputs = {
      {"arn", c.arn},       {"arn_scores", c.arn_scores}, {"asp_dir", c.asp_dir},   {"asp_annotations", c.asp_annotations},
      {"litbank", c.litbank}, {"corpus", c.corpus},       {"pools", c.pools},       {"store", c.store},
      {"annotations", c.annotations}, {"replay", c.replay}};
  for (const auto& [name, path] : inputs) {
    if (path.empty()) continue;
    fnv.str(name);
    digest_path(fnv, path);
  }
  for (const auto& in : c.inputs) {
    fnv.str("input");
    digest_path(fnv, in);
  }
  return hex16(fnv.h);
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  CLI::App app{"Parallelism probing toolkit", "parprobe"};
  app.set_config("--config", "", "INI file with default option values");
  app.allow_config_extras(false);
  app.fallthrough();
  app.require_subcommand(1, 1);

  app.add_option("--seed", cfg.seed, "Master seed");
  app.add_option("--out", cfg.out, "Output root; runs go to <out>/<config hash>");
  app.add_option("--run-dir", cfg.run_dir, "Explicit run directory");
  app.add_option("--jobs", cfg.jobs, "Folds trained concurrently");
  app.add_option("--task", cfg.task, "narrative|rhetorical|event|entity|coref|quote");
  app.add_option("--model", cfg.model, "Model id recorded in results");
  app.add_option("--variant", cfg.variant, "base|instruct");
  app.add_option("--scorer", cfg.scorer, "cosine|distance|linear|mlp|full");
  app.add_option("--layer", cfg.layer, "all_layers or a layer index");
  app.add_option("--head", cfg.head, "Span classifier head: logreg|mlp");
  app.add_option("--arn", cfg.arn, "ARN narratives (JSON lines)");
  app.add_option("--arn-scores", cfg.arn_scores, "Acceptability CSV (id,score)");
  app.add_option("--threshold", cfg.threshold, "Acceptability threshold");
  app.add_option("--asp-dir", cfg.asp_dir, "Directory of sermon texts");
  app.add_option("--asp-annotations", cfg.asp_annotations, "Branch set JSON");
  app.add_option("--litbank", cfg.litbank, "LitBank root");
  app.add_option("--corpus", cfg.corpus, "Normalized corpus (JSON lines) from ingest");
  app.add_option("--pools", cfg.pools, "Pool or instance file from the pools step");
  app.add_option("--store", cfg.store, "NARB1 activation store");
  app.add_option("--annotations", cfg.annotations, "Linguistic annotations (JSON lines)");
  app.add_option("--x-pos", cfg.x_pos, "Narrative positives per anchor");
  app.add_option("--y-neg", cfg.y_neg, "Narrative negatives per anchor");
  app.add_option("--n-neg", cfg.n_neg, "Rhetorical negatives per anchor");
  app.add_option("--folds", cfg.folds, "Cross-validation folds");
  app.add_option("--val-ratio", cfg.val_ratio, "Validation share");
  app.add_option("--test-ratio", cfg.test_ratio, "Test share");
  app.add_option("--lr", cfg.lr, "Adam learning rate");
  app.add_option("--epochs", cfg.epochs, "Maximum epochs");
  app.add_option("--batch-size", cfg.batch_size, "Anchors per batch");
  app.add_option("--patience", cfg.patience, "Early stopping patience");
  app.add_option("--hidden", cfg.hidden, "MLP hidden width");
  app.add_option("--proj", cfg.proj, "Span projection width");
  app.add_option("--provider", cfg.provider, "http|oracle|constant|replay");
  app.add_option("--endpoint", cfg.endpoint, "Chat-completions URL");
  app.add_option("--provider-model", cfg.provider_model, "Model name sent to the provider");
  app.add_option("--auth-env", cfg.auth_env, "Env var holding the API key");
  app.add_option("--max-retries", cfg.max_retries, "Retries per example");
  app.add_option("--backoff", cfg.backoff, "Initial retry backoff in seconds");
  app.add_option("--timeout", cfg.timeout, "Request timeout in seconds");
  app.add_option("--concurrency", cfg.concurrency, "Requests in flight");
  app.add_option("--constant", cfg.constant, "Score returned by the constant provider");
  app.add_option("--replay", cfg.replay, "Transcript replayed by the replay provider");
  app.add_option("--pairs", cfg.pairs, "Baseline pairs (0 = task default)");
  app.add_option("--methods", cfg.methods, "Comma-separated similarity methods or 'all'");
  app.add_option("--inputs", cfg.inputs, "Results CSVs joined by report");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"ingest", "Load and normalize corpora"},
      {"pools", "Build candidate pools or auxiliary instances"},
      {"train", "Train probes with k-fold cross-validation"},
      {"eval", "Evaluate trained probes on the test folds"},
      {"layers", "Sweep single-layer probes and the layer mixture"},
      {"prompt", "Prompted ranking through a provider"},
      {"baselines", "Lexical and structural similarity baselines"},
      {"report", "Join results CSVs into one comparison table"}};
  for (const auto& [name, desc] : commands) app.add_subcommand(name, desc);

  std::vector<const char*> argv = {"parprobe"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  if (const auto* opt = app.get_option_no_throw("--config"); opt && opt->count() > 0) {
    cfg.config_file = opt->as<std::string>();
  }
  Context ctx;
  ctx.out = &out;
  ctx.err = &err;
  try {
    validate(cfg, command);
    ctx.cfg = cfg;
    ctx.hash = config_hash(cfg);
    ctx.run_dir = cfg.run_dir.empty() ? fs::path(cfg.out) / ctx.hash : fs::path(cfg.run_dir);
    fs::create_directories(ctx.run_dir);
    ctx.provenance = Provenance{ctx.hash, cfg.seed, PARPROBE_VERSION};
    {
      std::ofstream ini(ctx.run_dir / "config.ini", std::ios::binary);
      ini << "# " << ctx.provenance.str() << '\n' << app.config_to_str(true, false);
    }
    int status = 0;
    if (command == "ingest") status = cmd_ingest(ctx);
    else if (command == "pools") status = cmd_pools(ctx);
    else if (command == "train") status = cmd_train(ctx, false);
    else if (command == "eval") status = cmd_train(ctx, true);
    else if (command == "layers") status = cmd_layers(ctx);
    else if (command == "prompt") status = cmd_prompt(ctx);
    else if (command == "baselines") status = cmd_baselines(ctx);
    else if (command == "report") status = cmd_report(ctx);
    ctx.flush_warnings();
    out << "run_dir " << ctx.run_dir.string() << '\n';
    return status;
  } catch (const ConfigError& e) {
    ctx.flush_warnings();
    err << "config error: " << e.field << ": " << e.message << '\n';
    return 1;
  } catch (const std::exception& e) {
    ctx.flush_warnings();
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args, std::cout, std::cerr);
}

}  // namespace parprobe::cli
