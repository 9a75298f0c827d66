#include "parprobe/pools.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "json.hpp"
#include "parprobe/rng.hpp"

namespace parprobe {

using json = nlohmann::json;
namespace fs = std::filesystem;

std::size_t RankingExample::positive_count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

void RankingExample::validate() const {
  if (labels.size() != candidates.size() || tags.size() != candidates.size()) {
    throw Error("example '" + example_id + "': labels/tags do not match candidates");
  }
  const auto pos = positive_count();
  if (pos == 0 || pos == size()) {
    throw Error("example '" + example_id + "' needs at least one positive and one negative");
  }
  std::set<Span> seen;
  for (const auto& c : candidates) {
    if (c == anchor) throw Error("example '" + example_id + "' contains its anchor as a candidate");
    if (!seen.insert(c).second) throw Error("example '" + example_id + "' repeats candidate " + c.key());
  }
}

namespace {

/// Shuffles positives and negatives together, keeping labels and tags
/// attached to their candidate.
void assemble(RankingExample& ex, std::vector<std::pair<Span, CandidateTag>> positives,
              std::vector<std::pair<Span, CandidateTag>> negatives, Rng& rng) {
  struct Entry {
    Span span;
    CandidateTag tag;
    std::uint8_t label;
  };
  std::vector<Entry> entries;
  for (auto& [s, t] : positives) entries.push_back({std::move(s), t, 1});
  for (auto& [s, t] : negatives) entries.push_back({std::move(s), t, 0});
  rng.shuffle(entries);
  for (auto& e : entries) {
    ex.candidates.push_back(std::move(e.span));
    ex.tags.push_back(e.tag);
    ex.labels.push_back(e.label);
  }
}

/// Takes `count` items alternating between near and far lists, then fills
/// from whichever list still has items. Both lists must be pre-shuffled.
std::vector<std::size_t> balanced_take(const std::vector<std::size_t>& near,
                                       const std::vector<std::size_t>& far, std::size_t count) {
  std::vector<std::size_t> out;
  std::size_t i = 0, j = 0;
  while (out.size() < count && i < near.size() && j < far.size()) {
    out.push_back(near[i++]);
    if (out.size() < count) out.push_back(far[j++]);
  }
  while (out.size() < count && i < near.size()) out.push_back(near[i++]);
  while (out.size() < count && j < far.size()) out.push_back(far[j++]);
  return out;
}

}  // namespace

std::vector<RankingExample> build_narrative_pools(const std::vector<Narrative>& narratives,
                                                  std::size_t x_pos, std::size_t y_neg,
                                                  std::uint64_t seed, Warnings* warnings) {
  if (x_pos == 0 || y_neg == 0) throw Error("narrative pools need x_pos >= 1 and y_neg >= 1");
  std::map<std::string, std::vector<std::size_t>> by_proverb;
  for (std::size_t i = 0; i < narratives.size(); ++i) by_proverb[narratives[i].proverb_id].push_back(i);

  std::vector<RankingExample> pools;
  for (std::size_t a = 0; a < narratives.size(); ++a) {
    const Narrative& anchor = narratives[a];
    const auto& group = by_proverb.at(anchor.proverb_id);
    if (group.size() - 1 < x_pos) {
      warn(warnings, "narrative '" + anchor.document.doc_id + "': proverb group has " +
                         std::to_string(group.size() - 1) + " other members, need " +
                         std::to_string(x_pos) + "; anchor skipped");
      continue;
    }
    const std::size_t available_neg = narratives.size() - group.size();
    if (y_neg > available_neg) {
      throw Error("narrative '" + anchor.document.doc_id + "': y_neg=" + std::to_string(y_neg) +
                  " exceeds " + std::to_string(available_neg) + " available negatives");
    }

    std::unordered_map<std::string, CandidateTag> linked;
    for (const auto& link : anchor.links) linked[link.other_id] = link.tag;
    auto tag_of = [&](std::size_t i, bool positive) {
      auto it = linked.find(narratives[i].document.doc_id);
      if (it != linked.end()) return it->second;
      return positive ? CandidateTag::far_analogy : CandidateTag::far_distractor;
    };

    Rng rng(derive_seed(seed, "narrative_pool:" + anchor.document.doc_id));
    std::vector<std::size_t> near_pos, far_pos, near_neg, far_neg;
    for (std::size_t i = 0; i < narratives.size(); ++i) {
      if (i == a) continue;
      const bool positive = narratives[i].proverb_id == anchor.proverb_id;
      const CandidateTag tag = tag_of(i, positive);
      if (positive) (tag == CandidateTag::near_analogy ? near_pos : far_pos).push_back(i);
      else (tag == CandidateTag::near_distractor ? near_neg : far_neg).push_back(i);
    }
    for (auto* list : {&near_pos, &far_pos, &near_neg, &far_neg}) rng.shuffle(*list);

    RankingExample ex;
    ex.example_id = "narr:" + anchor.document.doc_id;
    ex.anchor = anchor.document.whole();
    ex.seed = seed;
    std::vector<std::pair<Span, CandidateTag>> positives, negatives;
    for (auto i : balanced_take(near_pos, far_pos, x_pos)) {
      positives.emplace_back(narratives[i].document.whole(), tag_of(i, true));
    }
    for (auto i : balanced_take(near_neg, far_neg, y_neg)) {
      negatives.emplace_back(narratives[i].document.whole(), tag_of(i, false));
    }
    assemble(ex, std::move(positives), std::move(negatives), rng);
    pools.push_back(std::move(ex));
  }
  return pools;
}

std::vector<RankingExample> build_rhetorical_pools(const AspCorpus& asp,
                                                   const RhetoricalPoolOptions& options,
                                                   std::uint64_t seed, Warnings* warnings) {
  if (options.n_neg == 0 && !options.pool_size) throw Error("rhetorical pools need n_neg >= 1");
  std::vector<std::size_t> lengths;
  for (const auto& set : asp.sets) {
    for (const auto& b : set.branches) lengths.push_back(b.length());
  }

  std::vector<RankingExample> pools;
  for (const auto& set : asp.sets) {
    const Document& sermon = asp.sermon(set.sermon_id);
    const std::size_t n_tokens = sermon.tokens.size();
    const std::size_t n_anchors = options.anchors == AnchorMode::all_branches ? set.branches.size() : 1;
    for (std::size_t a = 0; a < n_anchors; ++a) {
      const Span& anchor = set.branches[a];
      RankingExample ex;
      ex.example_id = "rhet:" + set.set_id + ":" + std::to_string(a);
      ex.anchor = anchor;
      ex.seed = seed;
      Rng rng(derive_seed(seed, "rhetorical_pool:" + ex.example_id));

      std::vector<std::pair<Span, CandidateTag>> positives, negatives;
      for (std::size_t b = 0; b < set.branches.size(); ++b) {
        if (b != a) positives.emplace_back(set.branches[b], CandidateTag::branch);
      }
      std::size_t wanted = options.n_neg;
      if (options.pool_size) {
        if (*options.pool_size <= positives.size()) {
          throw Error("pool size " + std::to_string(*options.pool_size) + " leaves no room for negatives in " +
                      ex.example_id);
        }
        wanted = *options.pool_size - positives.size();
      }

      std::vector<Span> taken(set.branches.begin(), set.branches.end());
      const std::size_t max_attempts = 200 * wanted + 1000;
      for (std::size_t attempt = 0; attempt < max_attempts && negatives.size() < wanted; ++attempt) {
        const std::size_t len = lengths[rng.uniform_index(lengths.size())];
        if (len == 0 || len > n_tokens) continue;
        const std::size_t start = rng.uniform_index(n_tokens - len + 1);
        Span candidate{sermon.doc_id, start, start + len};
        const bool clash = std::any_of(taken.begin(), taken.end(),
                                       [&](const Span& s) { return spans_overlap(s, candidate); });
        if (clash) continue;
        taken.push_back(candidate);
        negatives.emplace_back(std::move(candidate), CandidateTag::sermon_negative);
      }
      if (negatives.size() < wanted) {
        warn(warnings, ex.example_id + ": sermon " + sermon.doc_id + " yielded " +
                           std::to_string(negatives.size()) + " of " + std::to_string(wanted) + " negatives");
      }
      if (negatives.empty()) {
        warn(warnings, ex.example_id + ": no negatives available; example dropped");
        continue;
      }
      assemble(ex, std::move(positives), std::move(negatives), rng);
      pools.push_back(std::move(ex));
    }
  }
  return pools;
}

// ---------------------------------------------------------------- auxiliary

std::string_view to_string(AuxTask task) {
  switch (task) {
    case AuxTask::event: return "event";
    case AuxTask::entity: return "entity";
    case AuxTask::coref: return "coref";
    case AuxTask::quote: return "quote";
  }
  return "unknown";
}

AuxTask aux_task_from_string(std::string_view name) {
  for (auto t : {AuxTask::event, AuxTask::entity, AuxTask::coref, AuxTask::quote}) {
    if (to_string(t) == name) return t;
  }
  throw Error("unknown auxiliary task '" + std::string(name) + "'");
}

bool is_pair_task(AuxTask task) { return task == AuxTask::coref || task == AuxTask::quote; }

namespace {

/// Draws one random span per positive in the same document, avoiding any
/// span overlapping `blocked` and repeats.
void sample_span_negatives(const LitBankAnnotations& doc, const std::vector<Span>& blocked,
                           std::size_t count, std::size_t min_len, std::size_t max_len, AuxTask task,
                           Rng& rng, std::vector<AuxInstance>& out) {
  const std::size_t n_tokens = doc.document.tokens.size();
  std::set<Span> chosen;
  const std::size_t max_attempts = 100 * count + 1000;
  for (std::size_t attempt = 0; attempt < max_attempts && chosen.size() < count; ++attempt) {
    const std::size_t len = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(min_len), static_cast<std::int64_t>(max_len)));
    if (len > n_tokens) continue;
    const std::size_t start = rng.uniform_index(n_tokens - len + 1);
    Span s{doc.doc_id(), start, start + len};
    // blocked spans are sorted; only neighbours of the insertion point can overlap
    auto it = std::lower_bound(blocked.begin(), blocked.end(), s.end,
                               [](const Span& b, std::size_t end) { return b.start < end; });
    bool clash = false;
    for (auto j = blocked.begin(); j != it; ++j) {
      if (j->end > s.start) {
        clash = true;
        break;
      }
    }
    if (clash || !chosen.insert(s).second) continue;
    out.push_back(AuxInstance{task, std::move(s), std::nullopt, 0});
  }
}

void balance(std::vector<AuxInstance>& positives, std::vector<AuxInstance>& negatives, Rng& rng) {
  auto downsample = [&rng](std::vector<AuxInstance>& items, std::size_t keep) {
    auto idx = rng.sample_indices(items.size(), keep);
    std::sort(idx.begin(), idx.end());
    std::vector<AuxInstance> kept;
    kept.reserve(keep);
    for (auto i : idx) kept.push_back(std::move(items[i]));
    items = std::move(kept);
  };
  if (negatives.size() > positives.size()) downsample(negatives, positives.size());
  else if (positives.size() > negatives.size()) downsample(positives, negatives.size());
}

}  // namespace

std::vector<AuxInstance> build_aux_instances(AuxTask task, const std::vector<LitBankAnnotations>& litbank,
                                             std::uint64_t seed, Warnings* warnings) {
  Rng rng(derive_seed(seed, "aux:" + std::string(to_string(task))));
  std::vector<AuxInstance> positives, negatives;

  switch (task) {
    case AuxTask::event: {
      for (const auto& doc : litbank) {
        std::vector<Span> blocked = doc.events;
        std::sort(blocked.begin(), blocked.end());
        for (const auto& e : doc.events) positives.push_back({task, e, std::nullopt, 1});
        sample_span_negatives(doc, blocked, doc.events.size(), 1, 1, task, rng, negatives);
      }
      break;
    }
    case AuxTask::entity: {
      double total_len = 0.0;
      std::size_t count = 0;
      for (const auto& doc : litbank) {
        for (const auto& e : doc.entities) {
          total_len += static_cast<double>(e.length());
          ++count;
        }
      }
      if (count == 0) throw Error("entity task: no entity annotations present");
      const auto max_len = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(2.0 * total_len / static_cast<double>(count))));
      for (const auto& doc : litbank) {
        std::vector<Span> blocked = doc.entities;
        std::sort(blocked.begin(), blocked.end());
        for (const auto& e : doc.entities) positives.push_back({task, e, std::nullopt, 1});
        sample_span_negatives(doc, blocked, doc.entities.size(), 1, max_len, task, rng, negatives);
      }
      break;
    }
    case AuxTask::coref: {
      for (const auto& doc : litbank) {
        std::vector<std::pair<Span, Span>> doc_negatives;
        const auto& chains = doc.coref_chains;
        for (std::size_t c = 0; c < chains.size(); ++c) {
          const auto& m = chains[c].mentions;
          for (std::size_t i = 0; i < m.size(); ++i) {
            for (std::size_t j = i + 1; j < m.size(); ++j) positives.push_back({task, m[i], m[j], 1});
          }
          for (std::size_t d = c + 1; d < chains.size(); ++d) {
            for (const auto& x : m) {
              for (const auto& y : chains[d].mentions) doc_negatives.emplace_back(x, y);
            }
          }
        }
        if (chains.size() < 2) {
          warn(warnings, "coref: document '" + doc.doc_id() + "' has fewer than two entities; no negatives");
        }
        for (auto& [x, y] : doc_negatives) negatives.push_back({task, std::move(x), std::move(y), 0});
      }
      break;
    }
    case AuxTask::quote: {
      for (const auto& doc : litbank) {
        std::vector<std::string> speakers;
        for (const auto& q : doc.quotes) {
          if (std::find(speakers.begin(), speakers.end(), q.speaker_entity) == speakers.end()) {
            speakers.push_back(q.speaker_entity);
          }
        }
        if (speakers.size() < 2 && !doc.quotes.empty()) {
          warn(warnings, "quote: document '" + doc.doc_id() + "' has a single speaker; no negatives");
        }
        for (const auto& q : doc.quotes) {
          positives.push_back({task, q.quote, q.speaker, 1});
          std::vector<std::string> others;
          for (const auto& s : speakers) {
            if (s != q.speaker_entity) others.push_back(s);
          }
          if (others.empty()) continue;
          const std::string& other = others[rng.uniform_index(others.size())];
          const auto chain = std::find_if(doc.coref_chains.begin(), doc.coref_chains.end(),
                                          [&](const CorefChain& c) { return c.entity_id == other; });
          if (chain == doc.coref_chains.end() || chain->mentions.empty()) continue;
          const Span* best = &chain->mentions.front();
          std::size_t best_d = SIZE_MAX;
          for (const auto& m : chain->mentions) {
            const std::size_t d = m.start > q.quote.start ? m.start - q.quote.start : q.quote.start - m.start;
            if (d < best_d) {
              best_d = d;
              best = &m;
            }
          }
          negatives.push_back({task, q.quote, *best, 0});
        }
      }
      break;
    }
  }

  balance(positives, negatives, rng);
  std::vector<AuxInstance> out = std::move(positives);
  out.insert(out.end(), std::make_move_iterator(negatives.begin()), std::make_move_iterator(negatives.end()));
  return out;
}

// ---------------------------------------------------------------- serialization

void write_pools_jsonl(const std::vector<RankingExample>& pools, const fs::path& path, const Provenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if (!provenance.empty()) out << provenance.json_line() << '\n';
  for (const auto& ex : pools) {
    json candidates = json::array(), tags = json::array();
    for (const auto& c : ex.candidates) candidates.push_back(c.key());
    for (auto t : ex.tags) tags.push_back(to_string(t));
    json j = {{"example_id", ex.example_id}, {"anchor", ex.anchor.key()}, {"candidates", candidates},
              {"labels", ex.labels},         {"tags", tags},               {"seed", ex.seed}};
    out << j.dump() << '\n';
  }
}

std::vector<RankingExample> read_pools_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<RankingExample> pools;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || is_provenance_line(line)) continue;
    try {
      const json j = json::parse(line);
      RankingExample ex;
      ex.example_id = j.at("example_id").get<std::string>();
      ex.anchor = parse_span_key(j.at("anchor").get<std::string>());
      for (const auto& c : j.at("candidates")) ex.candidates.push_back(parse_span_key(c.get<std::string>()));
      ex.labels = j.at("labels").get<std::vector<std::uint8_t>>();
      for (const auto& t : j.at("tags")) ex.tags.push_back(candidate_tag_from_string(t.get<std::string>()));
      ex.seed = j.at("seed").get<std::uint64_t>();
      pools.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pools;
}

void write_aux_jsonl(const std::vector<AuxInstance>& instances, const fs::path& path, const Provenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if (!provenance.empty()) out << provenance.json_line() << '\n';
  for (const auto& inst : instances) {
    json j = {{"task", to_string(inst.task)}, {"span_1", inst.span_1.key()}, {"label", inst.label}};
    if (inst.span_2) j["span_2"] = inst.span_2->key();
    out << j.dump() << '\n';
  }
}

std::vector<AuxInstance> read_aux_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<AuxInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || is_provenance_line(line)) continue;
    try {
      const json j = json::parse(line);
      AuxInstance inst;
      inst.task = aux_task_from_string(j.at("task").get<std::string>());
      inst.span_1 = parse_span_key(j.at("span_1").get<std::string>());
      if (j.contains("span_2")) inst.span_2 = parse_span_key(j.at("span_2").get<std::string>());
      inst.label = j.at("label").get<int>();
      out.push_back(std::move(inst));
    } catch (const json::exception& e) {
      throw Error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace parprobe
