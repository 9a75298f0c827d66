#include "doctest.h"
#include "parprobe/kernels.hpp"
#include "synthetic.hpp"

using namespace parprobe;
using namespace parprobe::testing;

TEST_SUITE("kernels") {

TEST_CASE("serial and OpenMP pool scoring agree bitwise") {
  const auto pools = planted_pools(50, 12, 3, 8);
  const auto table = planted_table(pools, 16, 0.3, 3, 1, 9);
  TrainConfig cfg;
  cfg.hidden = 8;
  cfg.layer_selector = LayerSelector::all();
  for (auto kind : {ScorerKind::cosine, ScorerKind::mlp, ScorerKind::full, ScorerKind::distance}) {
    const auto scorer = Scorer::create(kind, 16, 3, cfg);
    const auto a = kernels::serial::score_pools(scorer, pools, &table);
    const auto b = kernels::omp::score_pools(scorer, pools, &table);
    CHECK(a == b);
    const auto ma = kernels::serial::pool_metrics(a, pools);
    const auto mb = kernels::omp::pool_metrics(b, pools);
    REQUIRE(ma.size() == mb.size());
    for (std::size_t i = 0; i < ma.size(); ++i) {
      CHECK(ma[i].ap == mb[i].ap);
      CHECK(ma[i].mrr == mb[i].mrr);
      CHECK(ma[i].pairwise_accuracy == mb[i].pairwise_accuracy);
    }
  }
}

TEST_CASE("serial and OpenMP pair similarities agree bitwise") {
  const auto texts = read_annotations_jsonl(fixture_dir() / "annotations" / "asp.jsonl");
  std::vector<std::string> ids, groups;
  for (const auto& t : texts) {
    ids.push_back(t.id);
    groups.push_back(t.id.substr(0, 3));
  }
  const auto pairs = sample_pairs(ids, groups, 60, 3);
  const auto a = kernels::serial::pair_similarities(pairs, texts, all_similarity_methods());
  const auto b = kernels::omp::pair_similarities(pairs, texts, all_similarity_methods());
  CHECK(a == b);
  CHECK(a.size() == 60);
}

TEST_CASE("kernel errors surface from worker threads") {
  const auto pools = planted_pools(5, 4, 1, 8);
  EmbeddingTable empty{1, 4, {}};
  TrainConfig cfg;
  cfg.layer_selector = LayerSelector::single(0);
  const auto scorer = Scorer::create(ScorerKind::cosine, 4, 1, cfg);
  CHECK_FALSE(thrown_message([&] { kernels::omp::score_pools(scorer, pools, &empty); }).empty());
  CHECK(kernels::max_threads() >= 1);
}

}  // TEST_SUITE
