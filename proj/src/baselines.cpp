#include "parprobe/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>

#include "json.hpp"
#include "parprobe/metrics.hpp"
#include "parprobe/rng.hpp"

namespace parprobe {

using json = nlohmann::json;

void AnnotatedText::validate() const {
  if (tokens.empty()) throw Error("annotation '" + id + "': empty token list");
  auto check = [&](std::size_t n, const char* layer) {
    if (n != 0 && n != tokens.size()) {
      throw Error("annotation '" + id + "': layer '" + layer + "' has " + std::to_string(n) + " entries for " +
                  std::to_string(tokens.size()) + " tokens");
    }
  };
  check(lemmas.size(), "lemmas");
  check(pos.size(), "pos");
  check(heads.size(), "heads");
  check(deprels.size(), "deprels");
  if (heads.empty() != deprels.empty()) throw Error("annotation '" + id + "': heads and deprels must come together");
  for (int h : heads) {
    if (h < 0 || h > static_cast<int>(tokens.size())) {
      throw Error("annotation '" + id + "': head index " + std::to_string(h) + " out of range");
    }
  }
}

std::vector<AnnotatedText> read_annotations_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<AnnotatedText> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos || is_provenance_line(line)) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      const json j = json::parse(line);
      AnnotatedText t;
      t.id = j.at("id").get<std::string>();
      t.tokens = j.at("tokens").get<std::vector<std::string>>();
      if (j.contains("lemmas")) t.lemmas = j["lemmas"].get<std::vector<std::string>>();
      if (j.contains("pos")) t.pos = j["pos"].get<std::vector<std::string>>();
      if (j.contains("heads")) t.heads = j["heads"].get<std::vector<int>>();
      if (j.contains("deprels")) t.deprels = j["deprels"].get<std::vector<std::string>>();
      if (j.contains("semantic") && !j["semantic"].is_null()) t.semantic = j["semantic"].get<std::vector<double>>();
      t.validate();
      out.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw Error(where + ": " + e.what());
    } catch (const Error& e) {
      throw Error(where + ": " + e.what());
    }
  }
  return out;
}

void write_annotations_jsonl(const std::vector<AnnotatedText>& texts, const std::filesystem::path& path,
                             const Provenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if (!provenance.empty()) out << provenance.json_line() << '\n';
  for (const auto& t : texts) {
    json j = {{"id", t.id}, {"tokens", t.tokens}};
    if (!t.lemmas.empty()) j["lemmas"] = t.lemmas;
    if (!t.pos.empty()) j["pos"] = t.pos;
    if (!t.heads.empty()) {
      j["heads"] = t.heads;
      j["deprels"] = t.deprels;
    }
    if (t.semantic) j["semantic"] = *t.semantic;
    out << j.dump() << '\n';
  }
}

std::string_view to_string(SimilarityMethod method) {
  switch (method) {
    case SimilarityMethod::jaccard_tokens: return "jaccard_tokens";
    case SimilarityMethod::jaccard_lemmas: return "jaccard_lemmas";
    case SimilarityMethod::jaccard_3grams: return "jaccard_3grams";
    case SimilarityMethod::bleu: return "bleu";
    case SimilarityMethod::pos_edit: return "pos_edit";
    case SimilarityMethod::pos_jaccard: return "pos_jaccard";
    case SimilarityMethod::dep_ged: return "dep_ged";
    case SimilarityMethod::dep_wl_kernel: return "dep_wl_kernel";
    case SimilarityMethod::semantic_cosine: return "semantic_cosine";
  }
  return "unknown";
}

const std::vector<SimilarityMethod>& all_similarity_methods() {
  static const std::vector<SimilarityMethod> methods = {
      SimilarityMethod::jaccard_tokens, SimilarityMethod::jaccard_lemmas, SimilarityMethod::jaccard_3grams,
      SimilarityMethod::bleu,           SimilarityMethod::pos_edit,       SimilarityMethod::pos_jaccard,
      SimilarityMethod::dep_ged,        SimilarityMethod::dep_wl_kernel,  SimilarityMethod::semantic_cosine};
  return methods;
}

SimilarityMethod similarity_method_from_string(std::string_view name) {
  for (auto m : all_similarity_methods()) {
    if (to_string(m) == name) return m;
  }
  throw Error("unknown similarity method '" + std::string(name) + "'");
}

namespace {

/// Next code point of a UTF-8 string; malformed bytes pass through as-is.
char32_t next_code_point(std::string_view s, std::size_t& i) {
  const auto c = static_cast<unsigned char>(s[i]);
  int len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
  if (i + static_cast<std::size_t>(len) > s.size()) len = 1;
  char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
  for (int k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
  i += static_cast<std::size_t>(len);
  return cp;
}

bool is_punct_cp(char32_t cp) {
  if (cp < 0x80) return std::ispunct(static_cast<int>(cp)) != 0;
  return cp == 0xA1 || cp == 0xAB || cp == 0xB7 || cp == 0xBB || cp == 0xBF || (cp >= 0x2010 && cp <= 0x205E) ||
         (cp >= 0x3000 && cp <= 0x303F);
}

bool is_punct_token(std::string_view tok) {
  std::size_t i = 0;
  while (i < tok.size()) {
    if (!is_punct_cp(next_code_point(tok, i))) return false;
  }
  return true;
}

std::string lower_ascii(std::string s) {
  for (auto& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

const std::vector<std::string>& require(const AnnotatedText& t, const std::vector<std::string>& layer, const char* name) {
  if (layer.empty()) throw Error("annotation '" + t.id + "' lacks the '" + name + "' layer");
  return layer;
}

/// POS tags of the non-punctuation tokens.
std::vector<std::string> normalized_pos(const AnnotatedText& t) {
  const auto& pos = require(t, t.pos, "pos");
  std::vector<std::string> out;
  for (std::size_t i = 0; i < t.tokens.size(); ++i) {
    if (!is_punct_token(t.tokens[i])) out.push_back(pos[i]);
  }
  if (out.empty()) throw Error("annotation '" + t.id + "': no tokens left after normalization");
  return out;
}

/// n-grams joined with a unit separator. A sequence shorter than n yields
/// itself as the only gram.
std::vector<std::string> ngrams(const std::vector<std::string>& seq, std::size_t n) {
  std::vector<std::string> out;
  if (seq.size() < n) {
    std::string g;
    for (std::size_t i = 0; i < seq.size(); ++i) g += (i ? "\x1f" : "") + seq[i];
    out.push_back(g);
    return out;
  }
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    std::string g = seq[i];
    for (std::size_t k = 1; k < n; ++k) g += "\x1f" + seq[i + k];
    out.push_back(std::move(g));
  }
  return out;
}

std::map<std::string, std::size_t> gram_counts(const std::vector<std::string>& seq, std::size_t n) {
  std::map<std::string, std::size_t> counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    std::string g = seq[i];
    for (std::size_t k = 1; k < n; ++k) g += "\x1f" + seq[i + k];
    ++counts[g];
  }
  return counts;
}

std::uint64_t fnv1a(std::uint64_t h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xFF;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::map<std::uint64_t, double> wl_features(const LabeledTree& t, std::size_t iterations) {
  const std::size_t n = t.size();
  std::vector<std::vector<std::size_t>> nbrs(n);
  for (std::size_t v = 0; v < n; ++v) {
    for (auto c : t.children[v]) {
      nbrs[v].push_back(c);
      nbrs[c].push_back(v);
    }
  }
  std::vector<std::uint64_t> label(n);
  for (std::size_t v = 0; v < n; ++v) label[v] = fnv1a(t.labels[v]);
  std::map<std::uint64_t, double> features;
  for (std::size_t it = 0;; ++it) {
    for (auto l : label) features[fnv1a(l, it)] += 1.0;
    if (it == iterations) break;
    std::vector<std::uint64_t> next(n);
    for (std::size_t v = 0; v < n; ++v) {
      std::vector<std::uint64_t> ms;
      for (auto u : nbrs[v]) ms.push_back(label[u]);
      std::sort(ms.begin(), ms.end());
      std::uint64_t h = fnv1a(0xcbf29ce484222325ULL, label[v]);
      for (auto m : ms) h = fnv1a(h, m);
      next[v] = h;
    }
    label = std::move(next);
  }
  return features;
}

double sparse_dot(const std::map<std::uint64_t, double>& a, const std::map<std::uint64_t, double>& b) {
  double s = 0.0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (ia->first < ib->first) ++ia;
    else if (ib->first < ia->first) ++ib;
    else {
      s += ia->second * ib->second;
      ++ia;
      ++ib;
    }
  }
  return s;
}

struct PostOrder {
  std::vector<const std::string*> labels;
  std::vector<std::size_t> leftmost;
  std::vector<std::size_t> keyroots;
};

PostOrder post_order(const LabeledTree& t) {
  PostOrder p;
  std::function<std::size_t(std::size_t)> visit = [&](std::size_t v) -> std::size_t {
    std::size_t first_leaf = static_cast<std::size_t>(-1);
    for (auto c : t.children[v]) {
      const std::size_t idx = visit(c);
      if (first_leaf == static_cast<std::size_t>(-1)) first_leaf = p.leftmost[idx];
    }
    p.labels.push_back(&t.labels[v]);
    const std::size_t me = p.labels.size() - 1;
    p.leftmost.push_back(first_leaf == static_cast<std::size_t>(-1) ? me : first_leaf);
    return me;
  };
  visit(t.root);
  std::set<std::size_t> seen;
  for (std::size_t k = p.labels.size(); k-- > 0;) {
    if (seen.insert(p.leftmost[k]).second) p.keyroots.push_back(k);
  }
  std::sort(p.keyroots.begin(), p.keyroots.end());
  return p;
}

}  // namespace

std::vector<std::string> normalized_layer(const AnnotatedText& text, bool lemmas) {
  const auto& layer = lemmas ? require(text, text.lemmas, "lemmas") : text.tokens;
  std::vector<std::string> out;
  for (std::size_t i = 0; i < text.tokens.size(); ++i) {
    if (!is_punct_token(text.tokens[i])) out.push_back(lower_ascii(layer[i]));
  }
  if (out.empty()) throw Error("annotation '" + text.id + "': no tokens left after normalization");
  return out;
}

double jaccard(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  const std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& x : sa) inter += sb.count(x);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

std::size_t levenshtein(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  std::iota(prev.begin(), prev.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double bleu(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
  if (cand.empty() || ref.empty()) throw Error("bleu: empty token list");
  const std::size_t max_n = std::min<std::size_t>(4, cand.size());
  double log_p = 0.0;
  for (std::size_t n = 1; n <= max_n; ++n) {
    const auto c = gram_counts(cand, n);
    const auto r = gram_counts(ref, n);
    std::size_t matched = 0, total = 0;
    for (const auto& [g, k] : c) {
      total += k;
      auto it = r.find(g);
      if (it != r.end()) matched += std::min(k, it->second);
    }
    const double p = matched > 0 ? static_cast<double>(matched) / static_cast<double>(total)
                                 : 1.0 / static_cast<double>(total + 1);
    log_p += std::log(p);
  }
  log_p /= static_cast<double>(max_n);
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_p);
}

LabeledTree dependency_tree(const AnnotatedText& text) {
  if (text.heads.empty()) throw Error("annotation '" + text.id + "' lacks the 'dep' layer");
  const std::size_t n = text.tokens.size();
  LabeledTree t;
  t.labels = text.deprels;
  t.children.assign(n, {});
  std::vector<std::size_t> roots;
  for (std::size_t i = 0; i < n; ++i) {
    const int h = text.heads[i];
    if (h == 0) roots.push_back(i);
    else t.children[static_cast<std::size_t>(h - 1)].push_back(i);
  }
  if (roots.empty()) throw Error("annotation '" + text.id + "': dependency layer has no root");
  if (roots.size() == 1) {
    t.root = roots.front();
  } else {
    t.labels.push_back("<root>");
    t.children.push_back(roots);
    t.root = n;
  }
  // Reachability doubles as the cycle check.
  std::vector<char> seen(t.size(), 0);
  std::vector<std::size_t> stack{t.root};
  std::size_t reached = 0;
  while (!stack.empty()) {
    const auto v = stack.back();
    stack.pop_back();
    if (seen[v]) throw Error("annotation '" + text.id + "': dependency layer is not a tree");
    seen[v] = 1;
    ++reached;
    for (auto c : t.children[v]) stack.push_back(c);
  }
  if (reached != t.size()) throw Error("annotation '" + text.id + "': dependency layer has a cycle");
  return t;
}

std::size_t tree_edit_distance(const LabeledTree& a, const LabeledTree& b) {
  const PostOrder pa = post_order(a), pb = post_order(b);
  const std::size_t n1 = pa.labels.size(), n2 = pb.labels.size();
  std::vector<std::vector<std::size_t>> td(n1, std::vector<std::size_t>(n2, 0));
  std::vector<std::vector<std::size_t>> fd;
  for (auto i : pa.keyroots) {
    for (auto j : pb.keyroots) {
      const std::size_t li = pa.leftmost[i], lj = pb.leftmost[j];
      const std::size_t rows = i - li + 2, cols = j - lj + 2;
      fd.assign(rows, std::vector<std::size_t>(cols, 0));
      for (std::size_t di = 1; di < rows; ++di) fd[di][0] = fd[di - 1][0] + 1;
      for (std::size_t dj = 1; dj < cols; ++dj) fd[0][dj] = fd[0][dj - 1] + 1;
      for (std::size_t x = li; x <= i; ++x) {
        for (std::size_t y = lj; y <= j; ++y) {
          const std::size_t di = x - li + 1, dj = y - lj + 1;
          const std::size_t del = fd[di - 1][dj] + 1, ins = fd[di][dj - 1] + 1;
          if (pa.leftmost[x] == li && pb.leftmost[y] == lj) {
            const std::size_t sub = fd[di - 1][dj - 1] + (*pa.labels[x] == *pb.labels[y] ? 0 : 1);
            fd[di][dj] = std::min({del, ins, sub});
            td[x][y] = fd[di][dj];
          } else {
            fd[di][dj] = std::min({del, ins, fd[pa.leftmost[x] - li][pb.leftmost[y] - lj] + td[x][y]});
          }
        }
      }
    }
  }
  return td[n1 - 1][n2 - 1];
}

double wl_kernel(const LabeledTree& a, const LabeledTree& b, std::size_t iterations) {
  const auto fa = wl_features(a, iterations), fb = wl_features(b, iterations);
  const double kab = sparse_dot(fa, fb), kaa = sparse_dot(fa, fa), kbb = sparse_dot(fb, fb);
  return kab / std::sqrt(kaa * kbb);
}

double text_similarity(SimilarityMethod method, const AnnotatedText& a, const AnnotatedText& b) {
  if (a.tokens.empty() || b.tokens.empty()) throw Error("text_similarity: empty token list");
  switch (method) {
    case SimilarityMethod::jaccard_tokens: return jaccard(normalized_layer(a, false), normalized_layer(b, false));
    case SimilarityMethod::jaccard_lemmas: return jaccard(normalized_layer(a, true), normalized_layer(b, true));
    case SimilarityMethod::jaccard_3grams:
      return jaccard(ngrams(normalized_layer(a, false), 3), ngrams(normalized_layer(b, false), 3));
    case SimilarityMethod::bleu: {
      const auto ta = normalized_layer(a, false), tb = normalized_layer(b, false);
      return 0.5 * (bleu(ta, tb) + bleu(tb, ta));
    }
    case SimilarityMethod::pos_edit:
      return -static_cast<double>(levenshtein(normalized_pos(a), normalized_pos(b)));
    case SimilarityMethod::pos_jaccard: return jaccard(ngrams(normalized_pos(a), 2), ngrams(normalized_pos(b), 2));
    case SimilarityMethod::dep_ged: {
      const auto ta = dependency_tree(a), tb = dependency_tree(b);
      if (a.tokens.size() > kMaxGedNodes || b.tokens.size() > kMaxGedNodes) return wl_kernel(ta, tb);
      return -static_cast<double>(tree_edit_distance(ta, tb));
    }
    case SimilarityMethod::dep_wl_kernel: return wl_kernel(dependency_tree(a), dependency_tree(b));
    case SimilarityMethod::semantic_cosine: {
      if (!a.semantic) throw Error("annotation '" + a.id + "' lacks the 'semantic' layer");
      if (!b.semantic) throw Error("annotation '" + b.id + "' lacks the 'semantic' layer");
      if (a.semantic->size() != b.semantic->size()) throw Error("semantic vectors differ in dimension");
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < a.semantic->size(); ++k) {
        dot += (*a.semantic)[k] * (*b.semantic)[k];
        na += (*a.semantic)[k] * (*a.semantic)[k];
        nb += (*b.semantic)[k] * (*b.semantic)[k];
      }
      return (na == 0.0 || nb == 0.0) ? 0.0 : dot / std::sqrt(na * nb);
    }
  }
  return 0.0;
}

std::vector<std::vector<double>> normalize_scores(const std::vector<std::vector<double>>& raw,
                                                  const std::vector<std::string>& column_names, Warnings* warnings) {
  std::vector<std::vector<double>> out = raw;
  if (raw.empty()) return out;
  const std::size_t cols = raw.front().size();
  for (const auto& row : raw) {
    if (row.size() != cols) throw Error("normalize_scores: ragged matrix");
  }
  for (std::size_t c = 0; c < cols; ++c) {
    double lo = raw[0][c], hi = raw[0][c];
    for (const auto& row : raw) {
      lo = std::min(lo, row[c]);
      hi = std::max(hi, row[c]);
    }
    const std::string name = c < column_names.size() ? column_names[c] : "column " + std::to_string(c);
    if (hi == lo) {
      warn(warnings, "normalize_scores: '" + name + "' is constant; mapped to 0.5");
      for (auto& row : out) row[c] = 0.5;
      continue;
    }
    for (auto& row : out) row[c] = (row[c] - lo) / (hi - lo);
  }
  return out;
}

std::vector<TextPair> sample_pairs(const std::vector<std::string>& ids, const std::vector<std::string>& groups,
                                   std::size_t n_pairs, std::uint64_t seed, Warnings* warnings) {
  if (ids.size() != groups.size()) throw Error("sample_pairs: ids and groups differ in length");
  std::vector<std::pair<std::size_t, std::size_t>> same, diff;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) (groups[i] == groups[j] ? same : diff).emplace_back(i, j);
  }
  const std::size_t want_pos = (n_pairs + 1) / 2, want_neg = n_pairs / 2;
  Rng rng(seed);
  auto take = [&](const std::vector<std::pair<std::size_t, std::size_t>>& pool, std::size_t want, const char* what) {
    if (want > pool.size()) {
      warn(warnings, std::string("sample_pairs: only ") + std::to_string(pool.size()) + " " + what + " pairs exist (" +
                         std::to_string(want) + " requested)");
      want = pool.size();
    }
    auto idx = rng.sample_indices(pool.size(), want);
    std::sort(idx.begin(), idx.end());
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto k : idx) out.push_back(pool[k]);
    return out;
  };
  const auto pos = take(same, want_pos, "same-group");
  const auto neg = take(diff, want_neg, "different-group");
  std::vector<TextPair> out;
  for (const auto& [i, j] : pos) out.push_back({ids[i] + "|" + ids[j], i, j, 1});
  for (const auto& [i, j] : neg) out.push_back({ids[i] + "|" + ids[j], i, j, 0});
  return out;
}

RankSumStat rank_sum_statistic(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw Error("rank_sum_statistic: length mismatch");
  std::vector<std::uint8_t> l8(labels.size());
  double n1 = 0, n2 = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    l8[i] = labels[i] ? 1 : 0;
    (labels[i] ? n1 : n2) += 1;
  }
  RankSumStat s;
  s.auc = auroc(scores, l8);
  s.u = s.auc * n1 * n2;
  // Tie correction term.
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  double ties = 0.0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i);
    ties += t * t * t - t;
    i = j;
  }
  const double n = n1 + n2;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
  s.z = var > 0 ? (s.u - n1 * n2 / 2.0) / std::sqrt(var) : 0.0;
  return s;
}

void write_baseline_csv(const BaselineTable& table, const std::filesystem::path& path, const std::string& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  if (!provenance.empty()) out << "# " << provenance << '\n';
  out << "pair_id,label,method,raw,normalized\n";
  for (std::size_t p = 0; p < table.pairs.size(); ++p) {
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
      out << table.pairs[p].pair_id << ',' << table.pairs[p].label << ',' << to_string(table.methods[m]) << ','
          << format_number(table.raw[p][m]) << ',' << format_number(table.normalized[p][m]) << '\n';
    }
  }
}

}  // namespace parprobe
