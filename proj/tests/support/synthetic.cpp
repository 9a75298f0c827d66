#include "synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "parprobe/rng.hpp"

#ifndef PARPROBE_FIXTURE_DIR
#error "PARPROBE_FIXTURE_DIR must be defined"
#endif

namespace fs = std::filesystem;

namespace parprobe::testing {

std::vector<RankingExample> planted_pools(std::size_t n_examples, std::size_t pool_size, std::size_t n_pos,
                                          std::uint64_t seed) {
  Rng rng(seed);
  std::vector<RankingExample> pools;
  for (std::size_t e = 0; e < n_examples; ++e) {
    RankingExample ex;
    const std::string doc = "d" + std::to_string(e);
    ex.example_id = "ex" + std::to_string(e);
    ex.anchor = Span{doc, 0, 1};
    ex.seed = seed;
    std::vector<std::uint8_t> labels(pool_size, 0);
    for (std::size_t i = 0; i < n_pos; ++i) labels[i] = 1;
    rng.shuffle(labels);
    for (std::size_t c = 0; c < pool_size; ++c) {
      ex.candidates.push_back(Span{doc, c + 1, c + 2});
      ex.labels.push_back(labels[c]);
      ex.tags.push_back(labels[c] ? CandidateTag::branch : CandidateTag::sermon_negative);
    }
    pools.push_back(std::move(ex));
  }
  return pools;
}

namespace {

std::vector<double> gaussian(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

EmbeddingTable planted_table(const std::vector<RankingExample>& pools, std::size_t dim, double sigma,
                             std::size_t n_layers, std::size_t signal_layer, std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable table;
  table.n_layers = n_layers;
  table.dim = dim;
  const double unit = 1.0 / std::sqrt(static_cast<double>(dim));
  for (const auto& ex : pools) {
    std::vector<double> anchor_signal = gaussian(rng, dim);
    for (auto& x : anchor_signal) x *= unit;
    auto row_for = [&](bool positive, bool is_anchor) {
      std::vector<double> row(n_layers * dim);
      for (std::size_t l = 0; l < n_layers; ++l) {
        for (std::size_t j = 0; j < dim; ++j) {
          double v;
          if (l == signal_layer && (is_anchor || positive)) {
            v = anchor_signal[j] + (is_anchor ? 0.0 : sigma * unit * rng.normal());
          } else {
            v = unit * rng.normal();
          }
          row[l * dim + j] = v;
        }
      }
      return row;
    };
    table.rows[ex.anchor.key()] = row_for(false, true);
    for (std::size_t c = 0; c < ex.size(); ++c) table.rows[ex.candidates[c].key()] = row_for(ex.labels[c] != 0, false);
  }
  return table;
}

EmbeddingTable noise_table(const std::vector<RankingExample>& pools, std::size_t dim, std::size_t n_layers,
                           std::uint64_t seed) {
  Rng rng(seed);
  EmbeddingTable table;
  table.n_layers = n_layers;
  table.dim = dim;
  std::set<std::string> keys;
  for (const auto& ex : pools) {
    keys.insert(ex.anchor.key());
    for (const auto& c : ex.candidates) keys.insert(c.key());
  }
  for (const auto& k : keys) table.rows[k] = gaussian(rng, n_layers * dim);
  return table;
}

void write_table_store(const EmbeddingTable& table, const fs::path& path) {
  StoreMeta meta{"synthetic", table.n_layers, table.dim, Pooling::mean, "float32"};
  std::vector<SpanEmbedding> records;
  for (const auto& [key, row] : table.rows) {
    records.push_back(SpanEmbedding{parse_span_key(key), 1, std::vector<float>(row.begin(), row.end())});
  }
  store_write(meta, std::move(records), path);
}

void write_token_store(const std::vector<AuxInstance>& instances, std::size_t dim, std::size_t n_layers,
                       double signal, std::uint64_t seed, const fs::path& path) {
  Rng rng(seed);
  std::map<std::string, std::pair<Span, bool>> spans;
  for (const auto& inst : instances) {
    spans.emplace(inst.span_1.key(), std::make_pair(inst.span_1, inst.label == 1));
    if (inst.span_2) spans.emplace(inst.span_2->key(), std::make_pair(*inst.span_2, inst.label == 1));
  }
  StoreMeta meta{"synthetic", n_layers, dim, Pooling::tokens, "float32"};
  std::vector<SpanEmbedding> records;
  for (const auto& [key, entry] : spans) {
    const auto& [span, positive] = entry;
    SpanEmbedding rec{span, span.length(), {}};
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t t = 0; t < span.length(); ++t) {
        for (std::size_t j = 0; j < dim; ++j) {
          double v = rng.normal();
          if (j == 0 && positive) v += signal;
          rec.values.push_back(static_cast<float>(v));
        }
      }
    }
    records.push_back(std::move(rec));
  }
  store_write(meta, std::move(records), path);
}

AspCorpus synthetic_asp(std::size_t n_sermons, std::size_t sets_per_sermon, std::uint64_t seed) {
  static const char* kWords[] = {"deus", "homo", "verbum", "lux", "vita", "via", "pax", "lex", "cor", "opus",
                                 "est",  "dat",  "videt",  "amat", "manet", "venit"};
  Rng rng(seed);
  AspCorpus asp;
  for (std::size_t s = 0; s < n_sermons; ++s) {
    const std::size_t n_tokens = 60 * sets_per_sermon + 40;
    std::ostringstream text;
    for (std::size_t t = 0; t < n_tokens; ++t) text << (t ? " " : "") << kWords[rng.uniform_index(16)];
    char id[16];
    std::snprintf(id, sizeof id, "s%03zu", s);
    asp.sermons.push_back(make_document(id, text.str()));
    std::size_t pos = 20;
    for (std::size_t k = 0; k < sets_per_sermon; ++k) {
      BranchSet set;
      set.set_id = std::string(id) + "-" + std::to_string(k);
      set.sermon_id = id;
      set.pattern = BranchPattern::synchystic;
      const std::size_t n_branches = 2 + rng.uniform_index(3);
      std::size_t b = pos + rng.uniform_index(10);
      for (std::size_t i = 0; i < n_branches; ++i) {
        const std::size_t len = 3 + rng.uniform_index(4);
        set.branches.push_back(Span{id, b, b + len});
        b += len + rng.uniform_index(3);
      }
      asp.sets.push_back(std::move(set));
      pos += 60;
    }
  }
  return asp;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("parprobe_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path fixture_dir() { return fs::path(PARPROBE_FIXTURE_DIR); }

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace parprobe::testing
