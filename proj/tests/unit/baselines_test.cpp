#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "doctest.h"
#include "parprobe/baselines.hpp"
#include "parprobe/rng.hpp"
#include "synthetic.hpp"

using namespace parprobe;
using namespace parprobe::testing;

namespace {

using Strings = std::vector<std::string>;

AnnotatedText text(std::string id, Strings tokens, std::vector<int> heads = {}, Strings deprels = {}) {
  AnnotatedText t;
  t.id = std::move(id);
  t.tokens = tokens;
  t.lemmas = tokens;
  for (const auto& tok : tokens) t.pos.push_back(tok == "." ? "PUNCT" : tok.size() % 2 ? "NOUN" : "VERB");
  if (heads.empty()) {
    heads.push_back(0);
    for (std::size_t i = 1; i < tokens.size(); ++i) heads.push_back(static_cast<int>(i));
  }
  t.heads = heads;
  if (deprels.empty()) deprels.assign(tokens.size(), "dep");
  t.deprels = deprels;
  t.semantic = std::vector<double>{1.0, static_cast<double>(tokens.size())};
  return t;
}

// Independent forest edit distance by plain recursion on (forest, forest)
// with rightmost-root decomposition; exponential but fine for tiny trees.
struct Node {
  std::string label;
  std::vector<Node> kids;
};
using Forest = std::vector<Node>;

std::string key_of(const Forest& f) {
  std::string s;
  for (const auto& n : f) s += "(" + n.label + key_of(n.kids) + ")";
  return s;
}

std::size_t forest_size(const Forest& f) {
  std::size_t n = 0;
  for (const auto& x : f) n += 1 + forest_size(x.kids);
  return n;
}

std::size_t brute_ted(const Forest& f, const Forest& g, std::map<std::pair<std::string, std::string>, std::size_t>& memo) {
  if (f.empty()) return forest_size(g);
  if (g.empty()) return forest_size(f);
  const auto k = std::make_pair(key_of(f), key_of(g));
  if (auto it = memo.find(k); it != memo.end()) return it->second;
  const Node& v = f.back();
  const Node& w = g.back();
  Forest f_minus_v(f.begin(), f.end() - 1), g_minus_w(g.begin(), g.end() - 1);
  Forest f_del = f_minus_v, g_del = g_minus_w;
  f_del.insert(f_del.end(), v.kids.begin(), v.kids.end());
  g_del.insert(g_del.end(), w.kids.begin(), w.kids.end());
  std::size_t best = brute_ted(f_del, g, memo) + 1;
  best = std::min(best, brute_ted(f, g_del, memo) + 1);
  best = std::min(best, brute_ted(f_minus_v, g_minus_w, memo) + brute_ted(v.kids, w.kids, memo) +
                            (v.label == w.label ? 0 : 1));
  memo[k] = best;
  return best;
}

Node to_node(const LabeledTree& t, std::size_t v) {
  Node n{t.labels[v], {}};
  for (auto c : t.children[v]) n.kids.push_back(to_node(t, c));
  return n;
}

LabeledTree random_tree(Rng& rng, std::size_t n) {
  LabeledTree t;
  t.children.assign(n, {});
  for (std::size_t i = 0; i < n; ++i) t.labels.push_back(std::string(1, static_cast<char>('a' + rng.uniform_index(3))));
  for (std::size_t i = 1; i < n; ++i) t.children[rng.uniform_index(i)].push_back(i);
  t.root = 0;
  return t;
}

}  // namespace

TEST_SUITE("baselines") {

TEST_CASE("jaccard over token sets") {
  CHECK(jaccard({"a", "b"}, {"b", "c"}) == doctest::Approx(1.0 / 3.0));
  const auto a = text("a", {"a", "b"}), b = text("b", {"b", "c"});
  CHECK(text_similarity(SimilarityMethod::jaccard_tokens, a, b) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("identical texts score maximal similarity") {
  const auto a = text("a", {"Ecce", "homo", "qui", "venit", "."});
  auto b = a;
  b.id = "b";
  CHECK(text_similarity(SimilarityMethod::jaccard_tokens, a, b) == 1.0);
  CHECK(text_similarity(SimilarityMethod::jaccard_lemmas, a, b) == 1.0);
  CHECK(text_similarity(SimilarityMethod::jaccard_3grams, a, b) == 1.0);
  CHECK(text_similarity(SimilarityMethod::bleu, a, b) == doctest::Approx(1.0));
  CHECK(text_similarity(SimilarityMethod::pos_edit, a, b) == 0.0);
  CHECK(text_similarity(SimilarityMethod::pos_jaccard, a, b) == 1.0);
  CHECK(text_similarity(SimilarityMethod::dep_ged, a, b) == 0.0);
  CHECK(text_similarity(SimilarityMethod::dep_wl_kernel, a, b) == doctest::Approx(1.0));
  CHECK(text_similarity(SimilarityMethod::semantic_cosine, a, b) == doctest::Approx(1.0));
}

TEST_CASE("disjoint trigrams give zero") {
  const auto a = text("a", {"a", "b", "c", "d"}), b = text("b", {"d", "c", "b", "a"});
  CHECK(text_similarity(SimilarityMethod::jaccard_3grams, a, b) == 0.0);
}

TEST_CASE("normalization drops punctuation and lowercases") {
  const auto a = text("a", {"Ecce", ",", "HOMO", "..."});
  CHECK(normalized_layer(a, false) == Strings{"ecce", "homo"});
}

TEST_CASE("levenshtein and bleu") {
  CHECK(levenshtein({"k", "i", "t", "t", "e", "n"}, {"s", "i", "t", "t", "i", "n", "g"}) == 3);
  CHECK(levenshtein({}, {"a", "b"}) == 2);
  CHECK(bleu({"a", "b", "c", "d"}, {"a", "b", "c", "d"}) == doctest::Approx(1.0));
  // unigram 2/2, bigram 1/1 (no matches would give 1/2); brevity penalty exp(1 - 4/2)
  CHECK(bleu({"a", "b"}, {"a", "b", "c", "d"}) == doctest::Approx(std::exp(-1.0)));
  CHECK(bleu({"x", "y"}, {"a", "b"}) == doctest::Approx(std::sqrt(1.0 / 3.0 * 1.0 / 2.0)));
}

TEST_CASE("tree edit distance with one relabel is one") {
  auto a = text("a", {"w1", "w2", "w3"}, {0, 1, 1}, {"root", "nsubj", "obj"});
  auto b = text("b", {"w1", "w2", "w3"}, {0, 1, 1}, {"root", "nsubj", "iobj"});
  CHECK(tree_edit_distance(dependency_tree(a), dependency_tree(b)) == 1);
  CHECK(text_similarity(SimilarityMethod::dep_ged, a, b) == -1.0);
}

TEST_CASE("tree edit distance agrees with a recursive oracle") {
  Rng rng(12);
  for (int trial = 0; trial < 150; ++trial) {
    const auto a = random_tree(rng, 1 + rng.uniform_index(6));
    const auto b = random_tree(rng, 1 + rng.uniform_index(6));
    std::map<std::pair<std::string, std::string>, std::size_t> memo;
    const std::size_t expected = brute_ted({to_node(a, a.root)}, {to_node(b, b.root)}, memo);
    CHECK(tree_edit_distance(a, b) == expected);
    CHECK(tree_edit_distance(b, a) == expected);
  }
}

TEST_CASE("dependency trees") {
  const auto two = text("t", {"a", "b", "c", "d"}, {0, 1, 0, 3});
  const auto tree = dependency_tree(two);
  CHECK(tree.size() == 5);
  CHECK(tree.labels[tree.root] == "<root>");
  CHECK(tree.children[tree.root] == std::vector<std::size_t>{0, 2});
  const auto cyclic = text("c", {"a", "b", "c"}, {0, 3, 2});
  CHECK(thrown_message([&] { dependency_tree(cyclic); }).find("'c'") != std::string::npos);
}

TEST_CASE("large trees route to the WL kernel") {
  Strings toks;
  for (int i = 0; i < 30; ++i) toks.push_back("w" + std::to_string(i));
  const auto a = text("a", toks);
  auto b = a;
  b.deprels[5] = "obj";
  const double sim = text_similarity(SimilarityMethod::dep_ged, a, b);
  CHECK(sim == doctest::Approx(wl_kernel(dependency_tree(a), dependency_tree(b))));
  CHECK(sim > 0.0);
  CHECK(sim < 1.0);
}

TEST_CASE("WL kernel is symmetric and bounded") {
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto a = random_tree(rng, 1 + rng.uniform_index(10));
    const auto b = random_tree(rng, 1 + rng.uniform_index(10));
    const double k = wl_kernel(a, b);
    CHECK(k >= 0.0);
    CHECK(k <= 1.0 + 1e-12);
    CHECK(k == doctest::Approx(wl_kernel(b, a)));
    CHECK(wl_kernel(a, a) == doctest::Approx(1.0));
  }
}

TEST_CASE("min-max normalization") {
  const auto out = normalize_scores({{2, 0, 1}, {4, 1, 1}, {6, 0.5, 1}}, {"x", "y", "z"});
  CHECK(out[0][0] == 0.0);
  CHECK(out[1][0] == 0.5);
  CHECK(out[2][0] == 1.0);
  CHECK(out[0][1] == 0.0);
  CHECK(out[1][1] == 1.0);
  CHECK(out[2][1] == 0.5);
  Warnings w;
  const auto flat = normalize_scores({{3}, {3}}, {"flat"}, &w);
  CHECK(flat[0][0] == 0.5);
  REQUIRE(w.size() == 1);
  CHECK(w.items[0].find("flat") != std::string::npos);
  const auto two = normalize_scores({{-7}, {9}}, {"two"});
  CHECK(two[0][0] == 0.0);
  CHECK(two[1][0] == 1.0);
}

TEST_CASE("pair sampling is balanced and deterministic") {
  Strings ids, groups;
  for (int i = 0; i < 20; ++i) {
    ids.push_back("t" + std::to_string(i));
    groups.push_back("g" + std::to_string(i % 4));
  }
  const auto pairs = sample_pairs(ids, groups, 31, 5);
  CHECK(pairs.size() == 31);
  const auto pos = std::count_if(pairs.begin(), pairs.end(), [](const TextPair& p) { return p.label == 1; });
  CHECK(pos == 16);
  std::set<std::string> seen;
  for (const auto& p : pairs) {
    CHECK((groups[p.a] == groups[p.b]) == (p.label == 1));
    CHECK(p.a != p.b);
    CHECK(seen.insert(p.pair_id).second);
  }
  const auto again = sample_pairs(ids, groups, 31, 5);
  CHECK(std::equal(pairs.begin(), pairs.end(), again.begin(),
                   [](const TextPair& x, const TextPair& y) { return x.pair_id == y.pair_id && x.label == y.label; }));
  Warnings w;
  const auto capped = sample_pairs(ids, groups, 10000, 5, &w);
  CHECK(capped.size() < 10000);
  CHECK_FALSE(w.empty());
}

TEST_CASE("rank-sum statistic") {
  auto s = rank_sum_statistic({3, 4, 1, 2}, {1, 1, 0, 0});
  CHECK(s.u == 4.0);
  CHECK(s.auc == 1.0);
  CHECK(s.z > 0.0);
  s = rank_sum_statistic({1, 1, 1, 1}, {1, 0, 1, 0});
  CHECK(s.auc == 0.5);
  CHECK(s.z == 0.0);
  Rng rng(2);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    scores.push_back(static_cast<double>(rng.uniform_index(6)));
    labels.push_back(i % 3 == 0);
  }
  double u = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j)
      if (labels[i] && !labels[j]) u += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
  CHECK(rank_sum_statistic(scores, labels).u == doctest::Approx(u));
}

TEST_CASE("annotation fixtures satisfy the layer contract") {
  for (const char* name : {"asp.jsonl", "arn.jsonl"}) {
    const auto texts = read_annotations_jsonl(fixture_dir() / "annotations" / name);
    CHECK(texts.size() > 20);
    for (const auto& t : texts) {
      t.validate();
      CHECK(t.lemmas.size() == t.tokens.size());
      CHECK(t.pos.size() == t.tokens.size());
      CHECK(std::count(t.heads.begin(), t.heads.end(), 0) == 1);
      CHECK_NOTHROW(dependency_tree(t));
      double norm = 0;
      for (double v : *t.semantic) norm += v * v;
      CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("annotation validation and round-trip") {
  auto t = text("x", {"a", "b"});
  t.pos.pop_back();
  CHECK(thrown_message([&] { t.validate(); }).find("'x'") != std::string::npos);
  const auto path = scratch_dir("annotations_rt") / "a.jsonl";
  const std::vector<AnnotatedText> texts{text("a", {"a", "b", "."}), text("b", {"c"})};
  write_annotations_jsonl(texts, path, Provenance{"h", 1, "v"});
  const auto back = read_annotations_jsonl(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].tokens == texts[0].tokens);
  CHECK(back[0].heads == texts[0].heads);
  CHECK(*back[1].semantic == *texts[1].semantic);
}

TEST_CASE("baseline CSV is long format") {
  BaselineTable table;
  table.pairs = {TextPair{"a|b", 0, 1, 1}};
  table.methods = {SimilarityMethod::bleu, SimilarityMethod::pos_edit};
  table.raw = {{0.25, -3}};
  table.normalized = {{0.5, 0.5}};
  const auto path = scratch_dir("baseline_csv") / "b.csv";
  write_baseline_csv(table, path, "config_hash=h seed=1 version=v");
  CHECK(read_file(path) ==
        "# config_hash=h seed=1 version=v\npair_id,label,method,raw,normalized\na|b,1,bleu,0.25,0.5\na|b,1,pos_edit,-3,0.5\n");
}

}  // TEST_SUITE
