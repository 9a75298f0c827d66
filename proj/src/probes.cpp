#include "parprobe/probes.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "json.hpp"
#include "parprobe/kernels.hpp"
#include "parprobe/rng.hpp"

namespace parprobe {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- features

std::vector<double> pair_features(std::span<const double> h_a, std::span<const double> h_c) {
  if (h_a.size() != h_c.size()) {
    throw Error("pair_features: dimension mismatch (" + std::to_string(h_a.size()) + " vs " +
                std::to_string(h_c.size()) + ")");
  }
  const std::size_t d = h_a.size();
  std::vector<double> phi(4 * d);
  for (std::size_t k = 0; k < d; ++k) {
    phi[k] = h_a[k];
    phi[d + k] = h_c[k];
    phi[2 * d + k] = std::abs(h_a[k] - h_c[k]);
    phi[3 * d + k] = h_a[k] * h_c[k];
  }
  return phi;
}

std::array<double, 2> dist_features(const Span& anchor, const Span& cand) {
  if (anchor.doc_id != cand.doc_id) {
    throw Error("dist_features: spans from different documents (" + anchor.doc_id + ", " + cand.doc_id + ")");
  }
  const double delta = static_cast<double>(cand.start) - static_cast<double>(anchor.start);
  return {delta, std::abs(delta)};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

double pairwise_loss(double s_pos, double s_neg) { return softplus(-(s_pos - s_neg)); }

double pairwise_loss_grad(double s_pos, double s_neg) { return -sigmoid(-(s_pos - s_neg)); }

// ---------------------------------------------------------------- enums

std::string_view to_string(ScorerKind kind) {
  switch (kind) {
    case ScorerKind::cosine: return "cosine";
    case ScorerKind::distance: return "distance";
    case ScorerKind::linear: return "linear";
    case ScorerKind::mlp: return "mlp";
    case ScorerKind::full: return "full";
  }
  return "unknown";
}

ScorerKind scorer_kind_from_string(std::string_view name) {
  if (name == "cosine") return ScorerKind::cosine;
  if (name == "distance") return ScorerKind::distance;
  if (name == "linear" || name == "logreg") return ScorerKind::linear;
  if (name == "mlp") return ScorerKind::mlp;
  if (name == "full") return ScorerKind::full;
  throw Error("unknown scorer kind '" + std::string(name) + "'");
}

bool needs_embeddings(ScorerKind kind) { return kind != ScorerKind::distance; }
bool needs_distance(ScorerKind kind) { return kind == ScorerKind::distance || kind == ScorerKind::full; }

std::string LayerSelector::str() const { return all_layers ? "all_layers" : "layer_" + std::to_string(layer); }

LayerSelector LayerSelector::parse(std::string_view text) {
  if (text == "all" || text == "all_layers") return all();
  std::string_view digits = text;
  if (digits.starts_with("layer_")) digits.remove_prefix(6);
  std::size_t l = 0;
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), l);
  if (digits.empty() || ec != std::errc() || ptr != digits.data() + digits.size()) {
    throw Error("layer selector must be 'all_layers' or a layer index, got '" + std::string(text) + "'");
  }
  return single(l);
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error("train config: learning_rate must be > 0");
  if (epochs < 1) throw Error("train config: epochs must be >= 1");
  if (batch_size < 2) throw Error("train config: batch_size must be >= 2");
  if (hidden < 1) throw Error("train config: hidden must be >= 1");
}

// ---------------------------------------------------------------- tables

std::span<const double> EmbeddingTable::get(const Span& span) const {
  auto it = rows.find(span.key());
  if (it == rows.end()) throw Error("missing embedding for " + span.key());
  return it->second;
}

EmbeddingTable load_embedding_table(StoreReader& reader, const std::vector<RankingExample>& pools,
                                    LayerSelector selector) {
  const auto& meta = reader.meta();
  if (meta.pooling == Pooling::tokens) throw Error("ranking probes need a pooled store, got token-level");
  if (!selector.all_layers && selector.layer >= meta.n_layers) {
    throw Error("layer " + std::to_string(selector.layer) + " outside store with " +
                std::to_string(meta.n_layers) + " layers");
  }
  EmbeddingTable table;
  table.dim = meta.dim;
  table.n_layers = selector.all_layers ? meta.n_layers : 1;
  auto load = [&](const Span& s) {
    const std::string key = s.key();
    if (table.rows.count(key)) return;
    const SpanEmbedding rec = reader.read(key);
    std::vector<double> row;
    if (selector.all_layers) {
      row.assign(rec.values.begin(), rec.values.end());
    } else {
      auto l = rec.layer(selector.layer, meta.dim);
      row.assign(l.begin(), l.end());
    }
    table.rows.emplace(key, std::move(row));
  };
  for (const auto& ex : pools) {
    load(ex.anchor);
    for (const auto& c : ex.candidates) load(c);
  }
  return table;
}

// ---------------------------------------------------------------- scorer

std::size_t Scorer::feature_dim() const {
  switch (kind) {
    case ScorerKind::cosine: return dim;
    case ScorerKind::distance: return 2;
    case ScorerKind::linear:
    case ScorerKind::mlp: return 4 * dim;
    case ScorerKind::full: return 4 * dim + 2;
  }
  return 0;
}

std::size_t Scorer::weight_count() const {
  switch (kind) {
    case ScorerKind::cosine: return 0;
    case ScorerKind::distance: return 3;
    case ScorerKind::linear: return feature_dim();
    case ScorerKind::mlp:
    case ScorerKind::full: return hidden * feature_dim() + 2 * hidden + 1;
  }
  return 0;
}

Scorer Scorer::create(ScorerKind kind, std::size_t dim, std::size_t n_layers, const TrainConfig& config) {
  config.validate();
  Scorer s;
  s.kind = kind;
  s.dim = needs_embeddings(kind) ? dim : 0;
  s.hidden = (kind == ScorerKind::mlp || kind == ScorerKind::full) ? config.hidden : 0;
  s.layer_selector = config.layer_selector;
  if (needs_embeddings(kind) && dim == 0) throw Error("scorer '" + std::string(to_string(kind)) + "' needs dim >= 1");
  s.weights.assign(s.weight_count(), 0.0);
  if (s.hidden > 0) {
    Rng rng(derive_seed(config.seed, "scorer_init"));
    const std::size_t f = s.feature_dim();
    const double a1 = std::sqrt(6.0 / static_cast<double>(f + s.hidden));
    const double a2 = std::sqrt(6.0 / static_cast<double>(s.hidden + 1));
    for (std::size_t i = 0; i < s.hidden * f; ++i) s.weights[i] = (2.0 * rng.uniform01() - 1.0) * a1;
    const std::size_t w2 = s.hidden * f + s.hidden;
    for (std::size_t i = 0; i < s.hidden; ++i) s.weights[w2 + i] = (2.0 * rng.uniform01() - 1.0) * a2;
  }
  if (config.layer_selector.all_layers && needs_embeddings(kind)) {
    if (n_layers == 0) throw Error("all_layers selector needs n_layers >= 1");
    s.mix = ScalarMixParams::uniform(n_layers);
  }
  return s;
}

namespace {

/// Resolves one side to its d-vector (mixing layers when configured).
std::vector<double> resolve(const Scorer& s, std::span<const double> layers) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!std::isfinite(layers[i])) {
      throw Error("non-finite activation in input layer " + std::to_string(s.dim ? i / s.dim : 0));
    }
  }
  if (s.mix) return scalar_mix(layers, s.dim, *s.mix);
  if (layers.size() != s.dim) {
    throw Error("scorer expects a " + std::to_string(s.dim) + "-dim embedding, got " + std::to_string(layers.size()));
  }
  return std::vector<double>(layers.begin(), layers.end());
}

std::array<double, 2> scaled_distance(const Scorer& s, const ScoringItem& a, const ScoringItem& c) {
  if (a.span == nullptr || c.span == nullptr) throw Error("distance features need spans for both sides");
  auto d = dist_features(*a.span, *c.span);
  return {d[0] / s.distance_scale, d[1] / s.distance_scale};
}

/// Shared forward/backward. When `grad` is null only the score is
/// computed; otherwise upstream * d(score)/d(.) is accumulated into grad,
/// d_ha and d_hc.
double core(const Scorer& s, std::span<const double> ha, std::span<const double> hc, const std::array<double, 2>* dist,
            double upstream, ScorerGrad* grad, std::vector<double>* d_ha, std::vector<double>* d_hc) {
  const std::size_t d = s.dim;
  switch (s.kind) {
    case ScorerKind::cosine: {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        dot += ha[k] * hc[k];
        na += ha[k] * ha[k];
        nb += hc[k] * hc[k];
      }
      if (na == 0.0 || nb == 0.0) return 0.0;
      const double norm_a = std::sqrt(na), norm_b = std::sqrt(nb);
      const double c = dot / (norm_a * norm_b);
      if (grad) {
        for (std::size_t k = 0; k < d; ++k) {
          (*d_ha)[k] += upstream * (hc[k] / (norm_a * norm_b) - c * ha[k] / na);
          (*d_hc)[k] += upstream * (ha[k] / (norm_a * norm_b) - c * hc[k] / nb);
        }
      }
      return c;
    }
    case ScorerKind::distance: {
      const auto& w = s.weights;
      const double out = w[0] * (*dist)[0] + w[1] * (*dist)[1] + w[2];
      if (grad) {
        grad->weights[0] += upstream * (*dist)[0];
        grad->weights[1] += upstream * (*dist)[1];
        grad->weights[2] += upstream;
      }
      return out;
    }
    case ScorerKind::linear: {
      const auto phi = pair_features(ha, hc);
      double out = 0.0;
      for (std::size_t i = 0; i < phi.size(); ++i) out += s.weights[i] * phi[i];
      if (grad) {
        std::vector<double> dphi(phi.size());
        for (std::size_t i = 0; i < phi.size(); ++i) {
          grad->weights[i] += upstream * phi[i];
          dphi[i] = upstream * s.weights[i];
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = ha[k] - hc[k];
          const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
          (*d_ha)[k] += dphi[k] + sign * dphi[2 * d + k] + hc[k] * dphi[3 * d + k];
          (*d_hc)[k] += dphi[d + k] - sign * dphi[2 * d + k] + ha[k] * dphi[3 * d + k];
        }
      }
      return out;
    }
    case ScorerKind::mlp:
    case ScorerKind::full: {
      std::vector<double> x = pair_features(ha, hc);
      if (s.kind == ScorerKind::full) {
        x.push_back((*dist)[0]);
        x.push_back((*dist)[1]);
      }
      const std::size_t f = x.size(), h = s.hidden;
      const double* W1 = s.weights.data();
      const double* b1 = W1 + h * f;
      const double* w2 = b1 + h;
      const double b2 = w2[h];
      std::vector<double> act(h);
      double out = b2;
      for (std::size_t j = 0; j < h; ++j) {
        const double* row = W1 + j * f;
        double z = b1[j];
        for (std::size_t i = 0; i < f; ++i) z += row[i] * x[i];
        act[j] = std::tanh(z);
        if (!std::isfinite(act[j])) throw Error("non-finite activation in hidden layer (unit " + std::to_string(j) + ")");
        out += w2[j] * act[j];
      }
      if (!std::isfinite(out)) throw Error("non-finite activation in output layer");
      if (grad) {
        double* gW1 = grad->weights.data();
        double* gb1 = gW1 + h * f;
        double* gw2 = gb1 + h;
        gw2[h] += upstream;
        std::vector<double> dx(f, 0.0);
        for (std::size_t j = 0; j < h; ++j) {
          gw2[j] += upstream * act[j];
          const double dz = upstream * w2[j] * (1.0 - act[j] * act[j]);
          if (dz == 0.0) continue;
          gb1[j] += dz;
          const double* row = W1 + j * f;
          double* grow = gW1 + j * f;
          for (std::size_t i = 0; i < f; ++i) {
            grow[i] += dz * x[i];
            dx[i] += dz * row[i];
          }
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = ha[k] - hc[k];
          const double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
          (*d_ha)[k] += dx[k] + sign * dx[2 * d + k] + hc[k] * dx[3 * d + k];
          (*d_hc)[k] += dx[d + k] - sign * dx[2 * d + k] + ha[k] * dx[3 * d + k];
        }
      }
      return out;
    }
  }
  return 0.0;
}

}  // namespace

double score(const Scorer& scorer, const ScoringItem& anchor, const ScoringItem& cand) {
  std::array<double, 2> dist{};
  if (needs_distance(scorer.kind)) dist = scaled_distance(scorer, anchor, cand);
  if (!needs_embeddings(scorer.kind)) return core(scorer, {}, {}, &dist, 0.0, nullptr, nullptr, nullptr);
  const auto ha = resolve(scorer, anchor.layers);
  const auto hc = resolve(scorer, cand.layers);
  return core(scorer, ha, hc, &dist, 0.0, nullptr, nullptr, nullptr);
}

double score_backward(const Scorer& scorer, const ScoringItem& anchor, const ScoringItem& cand, double upstream,
                      ScorerGrad& grad) {
  if (grad.weights.size() != scorer.weights.size()) grad.weights.assign(scorer.weights.size(), 0.0);
  if (scorer.mix && grad.mix.raw_weights.size() != scorer.mix->n_layers()) {
    grad.mix.raw_weights.assign(scorer.mix->n_layers(), 0.0);
  }
  std::array<double, 2> dist{};
  if (needs_distance(scorer.kind)) dist = scaled_distance(scorer, anchor, cand);
  if (!needs_embeddings(scorer.kind)) return core(scorer, {}, {}, &dist, upstream, &grad, nullptr, nullptr);
  const auto ha = resolve(scorer, anchor.layers);
  const auto hc = resolve(scorer, cand.layers);
  std::vector<double> d_ha(scorer.dim, 0.0), d_hc(scorer.dim, 0.0);
  const double out = core(scorer, ha, hc, &dist, upstream, &grad, &d_ha, &d_hc);
  if (scorer.mix) {
    scalar_mix_backward(anchor.layers, scorer.dim, *scorer.mix, d_ha, grad.mix);
    scalar_mix_backward(cand.layers, scorer.dim, *scorer.mix, d_hc, grad.mix);
  }
  return out;
}

namespace {

ScoringItem item_for(const Scorer& scorer, const EmbeddingTable* table, const Span& span) {
  ScoringItem item;
  item.span = &span;
  if (needs_embeddings(scorer.kind)) {
    if (table == nullptr) throw Error("scorer '" + std::string(to_string(scorer.kind)) + "' needs an embedding table");
    item.layers = table->get(span);
  }
  return item;
}

}  // namespace

std::vector<double> score_example(const Scorer& scorer, const RankingExample& example, const EmbeddingTable* table) {
  const ScoringItem anchor = item_for(scorer, table, example.anchor);
  std::vector<double> scores(example.candidates.size());
  for (std::size_t i = 0; i < example.candidates.size(); ++i) {
    scores[i] = score(scorer, anchor, item_for(scorer, table, example.candidates[i]));
  }
  return scores;
}

std::vector<RankedCandidate> rank_candidates(const Scorer& scorer, const RankingExample& example,
                                             const EmbeddingTable* table) {
  const auto scores = score_example(scorer, example, table);
  std::vector<RankedCandidate> out;
  for (auto i : ranking_order(scores)) out.push_back({i, scores[i]});
  return out;
}

PoolEvaluation evaluate_pools(const Scorer& scorer, const std::vector<RankingExample>& pools,
                              const EmbeddingTable* table) {
  PoolEvaluation eval;
  const auto scores = kernels::omp::score_pools(scorer, pools, table);
  eval.per_example = kernels::omp::pool_metrics(scores, pools);
  eval.mean = mean_rank_metrics(eval.per_example);
  double acc = 0.0;
  for (std::size_t e = 0; e < pools.size(); ++e) {
    const auto order = ranking_order(scores[e]);
    const std::size_t n_pos = pools[e].positive_count();
    std::size_t correct = 0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      const bool predicted = r < n_pos;
      correct += predicted == (pools[e].labels[order[r]] != 0) ? 1 : 0;
    }
    acc += static_cast<double>(correct) / static_cast<double>(order.size());
  }
  eval.rank_threshold_accuracy = pools.empty() ? 0.0 : acc / static_cast<double>(pools.size());
  return eval;
}

// ---------------------------------------------------------------- training

void AdamOptimizer::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw Error("adam: parameter count changed");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

namespace {

/// Trainable parameters of a scorer as one vector: weights, mix raw
/// weights, gamma.
std::vector<double> pack(const Scorer& s) {
  std::vector<double> p = s.weights;
  if (s.mix) {
    p.insert(p.end(), s.mix->raw_weights.begin(), s.mix->raw_weights.end());
    p.push_back(s.mix->gamma);
  }
  return p;
}

void unpack(std::span<const double> p, Scorer& s) {
  std::copy(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(s.weights.size()), s.weights.begin());
  if (s.mix) {
    const std::size_t off = s.weights.size();
    const std::size_t n = s.mix->n_layers();
    std::copy(p.begin() + static_cast<std::ptrdiff_t>(off), p.begin() + static_cast<std::ptrdiff_t>(off + n),
              s.mix->raw_weights.begin());
    s.mix->gamma = p[off + n];
  }
}

std::vector<double> pack_grad(const Scorer& s, const ScorerGrad& g) {
  std::vector<double> p = g.weights;
  p.resize(s.weights.size(), 0.0);
  if (s.mix) {
    std::vector<double> raw = g.mix.raw_weights;
    raw.resize(s.mix->n_layers(), 0.0);
    p.insert(p.end(), raw.begin(), raw.end());
    p.push_back(g.mix.gamma);
  }
  return p;
}

bool has_trainable(const Scorer& s) { return !s.weights.empty() || s.mix.has_value(); }

}  // namespace

TrainResult train_probe(const std::vector<RankingExample>& train, const std::vector<RankingExample>& val,
                        const EmbeddingTable* table, ScorerKind kind, const TrainConfig& config, Warnings* warnings) {
  config.validate();
  if (needs_embeddings(kind) && table == nullptr) {
    throw Error("scorer '" + std::string(to_string(kind)) + "' needs an embedding store");
  }
  const std::size_t dim = table ? table->dim : 0;
  const std::size_t n_layers = table ? table->n_layers : 0;
  if (table && !config.layer_selector.all_layers && n_layers != 1) {
    throw Error("single-layer selector but the embedding table holds " + std::to_string(n_layers) + " layers");
  }

  TrainResult result;
  result.scorer = Scorer::create(kind, dim, n_layers, config);
  Scorer& scorer = result.scorer;

  std::vector<const RankingExample*> usable;
  for (const auto& ex : train) {
    if (ex.positive_count() == 0) {
      warn(warnings, "example '" + ex.example_id + "' has no positives; skipped");
      continue;
    }
    usable.push_back(&ex);
  }

  if (needs_distance(kind)) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto* ex : usable) {
      for (const auto& c : ex->candidates) {
        if (c.doc_id != ex->anchor.doc_id) continue;
        total += dist_features(ex->anchor, c)[1];
        ++n;
      }
    }
    scorer.distance_scale = (n > 0 && total > 0.0) ? total / static_cast<double>(n) : 1.0;
  }

  auto val_map = [&](const Scorer& s) {
    return val.empty() ? 0.0 : evaluate_pools(s, val, table).mean.map;
  };

  if (!has_trainable(scorer) || usable.empty()) {
    result.best_val_map = val_map(scorer);
    return result;
  }

  // Positive key sets per usable example, for in-batch negative filtering.
  std::vector<std::set<Span>> positives(usable.size());
  for (std::size_t i = 0; i < usable.size(); ++i) {
    for (std::size_t c = 0; c < usable[i]->candidates.size(); ++c) {
      if (usable[i]->labels[c]) positives[i].insert(usable[i]->candidates[c]);
    }
  }
  auto related = [&](std::size_t i, std::size_t j) {
    if (positives[i].count(usable[j]->anchor) || positives[j].count(usable[i]->anchor)) return true;
    for (const auto& p : positives[i]) {
      if (positives[j].count(p)) return true;
    }
    return false;
  };

  std::vector<double> params = pack(scorer);
  AdamOptimizer adam(params.size(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
  Rng rng(derive_seed(config.seed, "train_order"));
  std::vector<std::size_t> order(usable.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<double> best_params = params;
  double best_map = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t epoch_triples = 0;

    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t end = std::min(order.size(), b + config.batch_size);
      struct PairTerm {
        std::size_t anchor;
        const Span* cand;
        double grad = 0.0;
      };
      std::vector<PairTerm> terms;
      std::vector<std::pair<std::size_t, std::size_t>> triples;  // (pos term, neg term)

      for (std::size_t bi = b; bi < end; ++bi) {
        const std::size_t i = order[bi];
        const RankingExample& ex = *usable[i];
        std::vector<std::size_t> pos_terms, neg_terms;
        std::set<Span> negative_keys;
        for (std::size_t c = 0; c < ex.candidates.size(); ++c) {
          terms.push_back({i, &ex.candidates[c]});
          if (ex.labels[c]) pos_terms.push_back(terms.size() - 1);
          else if (negative_keys.insert(ex.candidates[c]).second) neg_terms.push_back(terms.size() - 1);
        }
        for (std::size_t bj = b; bj < end; ++bj) {
          const std::size_t j = order[bj];
          if (j == i || related(i, j)) continue;
          for (const auto& p : positives[j]) {
            if (p == ex.anchor || positives[i].count(p)) continue;
            if (needs_distance(kind) && p.doc_id != ex.anchor.doc_id) continue;
            if (!negative_keys.insert(p).second) continue;
            terms.push_back({i, &p});
            neg_terms.push_back(terms.size() - 1);
          }
        }
        for (auto p : pos_terms) {
          for (auto n : neg_terms) triples.emplace_back(p, n);
        }
      }
      if (triples.empty()) continue;

      std::vector<double> term_scores(terms.size());
      for (std::size_t t = 0; t < terms.size(); ++t) {
        const RankingExample& ex = *usable[terms[t].anchor];
        term_scores[t] = score(scorer, item_for(scorer, table, ex.anchor), item_for(scorer, table, *terms[t].cand));
      }
      const double inv = 1.0 / static_cast<double>(triples.size());
      double batch_loss = 0.0;
      for (const auto& [p, n] : triples) {
        batch_loss += pairwise_loss(term_scores[p], term_scores[n]);
        const double g = pairwise_loss_grad(term_scores[p], term_scores[n]) * inv;
        terms[p].grad += g;
        terms[n].grad -= g;
      }
      if (!std::isfinite(batch_loss)) {
        throw Error("training diverged at epoch " + std::to_string(epoch) + ": non-finite loss");
      }
      epoch_loss += batch_loss;
      epoch_triples += triples.size();

      ScorerGrad grad;
      grad.weights.assign(scorer.weights.size(), 0.0);
      if (scorer.mix) grad.mix.raw_weights.assign(scorer.mix->n_layers(), 0.0);
      for (const auto& term : terms) {
        if (term.grad == 0.0) continue;
        const RankingExample& ex = *usable[term.anchor];
        score_backward(scorer, item_for(scorer, table, ex.anchor), item_for(scorer, table, *term.cand), term.grad,
                       grad);
      }
      const auto flat = pack_grad(scorer, grad);
      adam.step(params, flat);
      for (double p : params) {
        if (!std::isfinite(p)) throw Error("training diverged at epoch " + std::to_string(epoch) + ": non-finite parameter");
      }
      unpack(params, scorer);
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = epoch_triples ? epoch_loss / static_cast<double>(epoch_triples) : 0.0;
    log.val_map = val.empty() ? -log.train_loss : val_map(scorer);
    result.history.push_back(log);
    if (log.val_map > best_map) {
      best_map = log.val_map;
      best_params = params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }

  unpack(best_params, scorer);
  result.best_val_map = val.empty() ? 0.0 : best_map;
  return result;
}

// ---------------------------------------------------------------- persistence

void save_scorer(const Scorer& scorer, const TrainConfig& config, std::size_t fold, const fs::path& stem) {
  json header = {{"kind", to_string(scorer.kind)},
                 {"dim", scorer.dim},
                 {"hidden", scorer.hidden},
                 {"layer_selector", scorer.layer_selector.str()},
                 {"n_mix_layers", scorer.mix ? scorer.mix->n_layers() : 0},
                 {"distance_scale", scorer.distance_scale},
                 {"weight_count", scorer.weights.size()},
                 {"fold", fold},
                 {"seed", config.seed},
                 {"config",
                  {{"learning_rate", config.learning_rate},
                   {"beta1", config.beta1},
                   {"beta2", config.beta2},
                   {"epsilon", config.epsilon},
                   {"epochs", config.epochs},
                   {"batch_size", config.batch_size},
                   {"patience", config.patience},
                   {"hidden", config.hidden}}}};
  fs::path json_path = stem;
  json_path += ".json";
  fs::path bin_path = stem;
  bin_path += ".bin";
  {
    std::ofstream out(json_path, std::ios::binary);
    if (!out) throw Error("cannot write " + json_path.string());
    out << header.dump(2) << '\n';
  }
  std::string blob;
  auto put = [&blob](double v) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) blob.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  };
  for (double w : scorer.weights) put(w);
  if (scorer.mix) {
    for (double w : scorer.mix->raw_weights) put(w);
    put(scorer.mix->gamma);
  }
  std::ofstream out(bin_path, std::ios::binary);
  if (!out) throw Error("cannot write " + bin_path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

Scorer load_scorer(const fs::path& stem) {
  fs::path json_path = stem;
  json_path += ".json";
  fs::path bin_path = stem;
  bin_path += ".bin";
  std::ifstream in(json_path, std::ios::binary);
  if (!in) throw Error("cannot open " + json_path.string());
  json header;
  try {
    header = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(json_path.string() + ": " + e.what());
  }
  Scorer s;
  s.kind = scorer_kind_from_string(header.at("kind").get<std::string>());
  s.dim = header.at("dim").get<std::size_t>();
  s.hidden = header.at("hidden").get<std::size_t>();
  s.layer_selector = LayerSelector::parse(header.at("layer_selector").get<std::string>());
  s.distance_scale = header.at("distance_scale").get<double>();
  const auto n_mix = header.at("n_mix_layers").get<std::size_t>();
  s.weights.assign(header.at("weight_count").get<std::size_t>(), 0.0);
  if (s.weights.size() != s.weight_count()) throw Error(json_path.string() + ": weight count does not match kind");
  if (n_mix > 0) s.mix = ScalarMixParams::uniform(n_mix);

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw Error("cannot open " + bin_path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const std::size_t expected = s.weights.size() + (n_mix > 0 ? n_mix + 1 : 0);
  if (bytes.size() != expected * 4) throw Error(bin_path.string() + ": parameter blob has wrong size");
  std::vector<double> flat(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    flat[i] = std::bit_cast<float>(bits);
  }
  unpack(flat, s);
  return s;
}

// ---------------------------------------------------------------- span classifiers

std::string_view to_string(HeadKind head) { return head == HeadKind::logreg ? "logreg" : "mlp"; }

HeadKind head_kind_from_string(std::string_view name) {
  if (name == "logreg" || name == "linear") return HeadKind::logreg;
  if (name == "mlp") return HeadKind::mlp;
  throw Error("unknown classifier head '" + std::string(name) + "'");
}

std::size_t SpanRepModel::param_count() const {
  const std::size_t rep = proj * dim + 2 * proj;
  const std::size_t in = head_input();
  const std::size_t head_params = head == HeadKind::logreg ? in + 1 : hidden * in + 2 * hidden + 1;
  return rep + head_params;
}

SpanRepModel SpanRepModel::create(std::size_t dim, std::size_t proj, std::size_t hidden, HeadKind head, bool pair,
                                  std::uint64_t seed) {
  if (dim == 0 || proj == 0) throw Error("span model needs dim >= 1 and proj >= 1");
  SpanRepModel m;
  m.dim = dim;
  m.proj = proj;
  m.hidden = head == HeadKind::mlp ? hidden : 0;
  m.head = head;
  m.pair = pair;
  m.params.assign(m.param_count(), 0.0);
  Rng rng(derive_seed(seed, "span_model_init"));
  auto fill = [&](std::size_t offset, std::size_t n, double a) {
    for (std::size_t i = 0; i < n; ++i) m.params[offset + i] = (2.0 * rng.uniform01() - 1.0) * a;
  };
  fill(0, proj * dim, std::sqrt(6.0 / static_cast<double>(dim + proj)));
  fill(proj * dim + proj, proj, std::sqrt(6.0 / static_cast<double>(proj + 1)));
  const std::size_t head_off = proj * dim + 2 * proj;
  const std::size_t in = m.head_input();
  if (head == HeadKind::logreg) {
    fill(head_off, in, std::sqrt(6.0 / static_cast<double>(in + 1)));
  } else {
    fill(head_off, hidden * in, std::sqrt(6.0 / static_cast<double>(in + hidden)));
    fill(head_off + hidden * in + hidden, hidden, std::sqrt(6.0 / static_cast<double>(hidden + 1)));
  }
  return m;
}

namespace {

struct RepCache {
  std::size_t n_tokens = 0;
  std::vector<double> z;      // T * p projected tokens
  std::vector<double> alpha;  // T attention weights
  std::vector<double> h;      // p
};

RepCache span_forward(const SpanRepModel& m, std::span<const double> tokens) {
  if (tokens.empty()) throw Error("span_representation: empty window");
  if (tokens.size() % m.dim != 0) throw Error("span_representation: token rows do not match dim");
  RepCache c;
  c.n_tokens = tokens.size() / m.dim;
  const std::size_t p = m.proj, d = m.dim;
  const double* P = m.params.data();
  const double* bp = P + p * d;
  const double* u = bp + p;
  c.z.assign(c.n_tokens * p, 0.0);
  std::vector<double> scores(c.n_tokens, 0.0);
  for (std::size_t t = 0; t < c.n_tokens; ++t) {
    const double* e = tokens.data() + t * d;
    double* z = c.z.data() + t * p;
    for (std::size_t j = 0; j < p; ++j) {
      const double* row = P + j * d;
      double acc = bp[j];
      for (std::size_t k = 0; k < d; ++k) acc += row[k] * e[k];
      z[j] = acc;
      scores[t] += u[j] * acc;
    }
  }
  const double mx = *std::max_element(scores.begin(), scores.end());
  c.alpha.resize(c.n_tokens);
  double sum = 0.0;
  for (std::size_t t = 0; t < c.n_tokens; ++t) sum += c.alpha[t] = std::exp(scores[t] - mx);
  for (auto& a : c.alpha) a /= sum;
  c.h.assign(p, 0.0);
  for (std::size_t t = 0; t < c.n_tokens; ++t) {
    for (std::size_t j = 0; j < p; ++j) c.h[j] += c.alpha[t] * c.z[t * p + j];
  }
  return c;
}

void span_backward(const SpanRepModel& m, std::span<const double> tokens, const RepCache& c,
                   std::span<const double> dh, std::span<double> grad) {
  const std::size_t p = m.proj, d = m.dim;
  const double* u = m.params.data() + p * d + p;
  double* gP = grad.data();
  double* gbp = gP + p * d;
  double* gu = gbp + p;
  // dL/da_t = alpha_t (dh . z_t - sum_s alpha_s dh . z_s)
  std::vector<double> dhz(c.n_tokens, 0.0);
  double mean = 0.0;
  for (std::size_t t = 0; t < c.n_tokens; ++t) {
    for (std::size_t j = 0; j < p; ++j) dhz[t] += dh[j] * c.z[t * p + j];
    mean += c.alpha[t] * dhz[t];
  }
  for (std::size_t t = 0; t < c.n_tokens; ++t) {
    const double da = c.alpha[t] * (dhz[t] - mean);
    const double* e = tokens.data() + t * d;
    for (std::size_t j = 0; j < p; ++j) {
      gu[j] += da * c.z[t * p + j];
      const double dz = c.alpha[t] * dh[j] + da * u[j];
      if (dz == 0.0) continue;
      gbp[j] += dz;
      double* row = gP + j * d;
      for (std::size_t k = 0; k < d; ++k) row[k] += dz * e[k];
    }
  }
}

/// Head forward; fills hidden activations for the mlp head.
double head_forward(const SpanRepModel& m, std::span<const double> x, std::vector<double>* act) {
  const double* hp = m.params.data() + m.proj * m.dim + 2 * m.proj;
  const std::size_t in = x.size();
  if (m.head == HeadKind::logreg) {
    double out = hp[in];
    for (std::size_t i = 0; i < in; ++i) out += hp[i] * x[i];
    return out;
  }
  const std::size_t h = m.hidden;
  const double* b1 = hp + h * in;
  const double* w2 = b1 + h;
  act->assign(h, 0.0);
  double out = w2[h];
  for (std::size_t j = 0; j < h; ++j) {
    double z = b1[j];
    for (std::size_t i = 0; i < in; ++i) z += hp[j * in + i] * x[i];
    (*act)[j] = std::tanh(z);
    out += w2[j] * (*act)[j];
  }
  if (!std::isfinite(out)) throw Error("non-finite activation in classifier head");
  return out;
}

void head_backward(const SpanRepModel& m, std::span<const double> x, const std::vector<double>& act, double g,
                   std::span<double> grad, std::vector<double>& dx) {
  const std::size_t off = m.proj * m.dim + 2 * m.proj;
  const double* hp = m.params.data() + off;
  double* gh = grad.data() + off;
  const std::size_t in = x.size();
  dx.assign(in, 0.0);
  if (m.head == HeadKind::logreg) {
    for (std::size_t i = 0; i < in; ++i) {
      gh[i] += g * x[i];
      dx[i] = g * hp[i];
    }
    gh[in] += g;
    return;
  }
  const std::size_t h = m.hidden;
  const double* w2 = hp + h * in + h;
  double* gb1 = gh + h * in;
  double* gw2 = gb1 + h;
  gw2[h] += g;
  for (std::size_t j = 0; j < h; ++j) {
    gw2[j] += g * act[j];
    const double dz = g * w2[j] * (1.0 - act[j] * act[j]);
    gb1[j] += dz;
    for (std::size_t i = 0; i < in; ++i) {
      gh[j * in + i] += dz * x[i];
      dx[i] += dz * hp[j * in + i];
    }
  }
}

}  // namespace

std::vector<double> span_representation(const SpanRepModel& model, std::span<const double> tokens) {
  return span_forward(model, tokens).h;
}

std::vector<double> span_attention(const SpanRepModel& model, std::span<const double> tokens) {
  return span_forward(model, tokens).alpha;
}

std::span<const double> TokenTable::get(const Span& span) const {
  auto it = rows.find(span.key());
  if (it == rows.end()) throw Error("missing token embeddings for " + span.key());
  return it->second;
}

TokenTable load_token_table(StoreReader& reader, const std::vector<AuxInstance>& instances, std::size_t layer) {
  const auto& meta = reader.meta();
  if (meta.pooling != Pooling::tokens) throw Error("span classifiers need a token-level store (pooling=tokens)");
  if (layer >= meta.n_layers) throw Error("layer " + std::to_string(layer) + " outside store");
  TokenTable table;
  table.dim = meta.dim;
  auto load = [&](const Span& s) {
    const std::string key = s.key();
    if (table.rows.count(key)) return;
    const SpanEmbedding rec = reader.read(key);
    auto rows = rec.layer(layer, meta.dim);
    table.rows.emplace(key, std::vector<double>(rows.begin(), rows.end()));
  };
  for (const auto& inst : instances) {
    load(inst.span_1);
    if (inst.span_2) load(*inst.span_2);
  }
  return table;
}

namespace {

double instance_logit(const SpanRepModel& model, const AuxInstance& inst, const TokenTable& tokens,
                      RepCache* c1, RepCache* c2, std::vector<double>* x, std::vector<double>* act) {
  if (model.pair != inst.span_2.has_value()) throw Error("instance arity does not match the span model");
  *c1 = span_forward(model, tokens.get(inst.span_1));
  *x = c1->h;
  if (inst.span_2) {
    *c2 = span_forward(model, tokens.get(*inst.span_2));
    x->insert(x->end(), c2->h.begin(), c2->h.end());
  }
  return head_forward(model, *x, act);
}

}  // namespace

double predict(const SpanRepModel& model, const AuxInstance& instance, const TokenTable& tokens) {
  RepCache c1, c2;
  std::vector<double> x, act;
  return sigmoid(instance_logit(model, instance, tokens, &c1, &c2, &x, &act));
}

double span_classifier_backward(const SpanRepModel& model, const AuxInstance& instance, const TokenTable& tokens,
                                std::span<double> grad) {
  RepCache c1, c2;
  std::vector<double> x, act, dx;
  const double logit = instance_logit(model, instance, tokens, &c1, &c2, &x, &act);
  const double y = instance.label ? 1.0 : 0.0;
  const double loss = softplus(logit) - y * logit;
  const double g = sigmoid(logit) - y;
  head_backward(model, x, act, g, grad, dx);
  const std::size_t p = model.proj;
  span_backward(model, tokens.get(instance.span_1), c1, std::span<const double>(dx).subspan(0, p), grad);
  if (instance.span_2) {
    span_backward(model, tokens.get(*instance.span_2), c2, std::span<const double>(dx).subspan(p, p), grad);
  }
  return loss;
}

ClassificationMetrics evaluate_span_classifier(const SpanRepModel& model, const std::vector<AuxInstance>& instances,
                                               const TokenTable& tokens) {
  std::vector<double> scores(instances.size());
  std::vector<std::uint8_t> labels(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    scores[i] = predict(model, instances[i], tokens);
    labels[i] = instances[i].label ? 1 : 0;
  }
  return classification_metrics(scores, labels, 0.5);
}

SpanClassifierResult train_span_classifier(const std::vector<AuxInstance>& train, const std::vector<AuxInstance>& val,
                                           const TokenTable& tokens, HeadKind head, const TrainConfig& config,
                                           std::size_t proj) {
  config.validate();
  if (train.empty()) throw Error("span classifier: empty training set");
  const auto positives = std::count_if(train.begin(), train.end(), [](const AuxInstance& i) { return i.label != 0; });
  if (positives == 0 || static_cast<std::size_t>(positives) == train.size()) {
    throw Error("span classifier: training set has a single class");
  }
  const bool pair = train.front().span_2.has_value();
  SpanClassifierResult result;
  result.model = SpanRepModel::create(tokens.dim, proj, config.hidden, head, pair, config.seed);
  SpanRepModel& model = result.model;

  AdamOptimizer adam(model.params.size(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
  Rng rng(derive_seed(config.seed, "span_train_order"));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> best = model.params;
  double best_score = -1.0;
  std::size_t since_best = 0;
  std::vector<double> grad(model.params.size());

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
      const std::size_t end = std::min(order.size(), b + config.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t bi = b; bi < end; ++bi) {
        epoch_loss += span_classifier_backward(model, train[order[bi]], tokens, grad);
      }
      const double inv = 1.0 / static_cast<double>(end - b);
      for (auto& g : grad) g *= inv;
      adam.step(model.params, grad);
    }
    if (!std::isfinite(epoch_loss)) throw Error("span classifier diverged at epoch " + std::to_string(epoch));
    const double score = val.empty() ? -epoch_loss : evaluate_span_classifier(model, val, tokens).f1;
    if (score > best_score) {
      best_score = score;
      best = model.params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  model.params = best;
  result.best_val_f1 = val.empty() ? 0.0 : best_score;
  return result;
}

}  // namespace parprobe
