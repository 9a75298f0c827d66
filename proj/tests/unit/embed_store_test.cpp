#include <cmath>
#include <cstring>

#include "doctest.h"
#include "parprobe/embed_store.hpp"
#include "parprobe/rng.hpp"
#include "synthetic.hpp"

using namespace parprobe;
using namespace parprobe::testing;
namespace fs = std::filesystem;

namespace {

std::vector<SpanEmbedding> random_records(std::size_t n, std::size_t n_layers, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SpanEmbedding> out;
  for (std::size_t i = 0; i < n; ++i) {
    SpanEmbedding r{Span{"doc" + std::to_string(i % 7), i, i + 1 + i % 3}, 1, {}};
    for (std::size_t k = 0; k < n_layers * dim; ++k) r.values.push_back(static_cast<float>(rng.normal()));
    out.push_back(std::move(r));
  }
  return out;
}

TokenActivations two_rows() {
  // one layer, two tokens, dim 2: rows [1,3] and [3,5]
  return TokenActivations{1, 2, 2, {1, 3, 3, 5}};
}

}  // namespace

TEST_SUITE("embed_store") {

TEST_CASE("three records round-trip") {
  const auto path = scratch_dir("store_rt") / "s.narb";
  const StoreMeta meta{"m", 2, 3, Pooling::mean, "float32"};
  auto records = random_records(3, 2, 3, 1);
  store_write(meta, records, path);
  auto [meta2, back] = store_read(path);
  CHECK(meta2 == meta);
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.key.key() < b.key.key(); });
  CHECK(back == records);
}

TEST_CASE("empty store is valid") {
  const auto path = scratch_dir("store_empty") / "s.narb";
  store_write(StoreMeta{"m", 1, 4, Pooling::mean, "float32"}, {}, path);
  StoreReader reader(path);
  CHECK(reader.size() == 0);
  CHECK(reader.meta().dim == 4);
}

TEST_CASE("token-level records keep their row count") {
  const auto path = scratch_dir("store_tokens") / "s.narb";
  SpanEmbedding r{Span{"d", 2, 5}, 3, std::vector<float>(2 * 3 * 4, 0.5f)};
  store_write(StoreMeta{"m", 2, 4, Pooling::tokens, "float32"}, {r}, path);
  StoreReader reader(path);
  const auto back = reader.read(Span{"d", 2, 5});
  CHECK(back.n_tokens == 3);
  CHECK(back.layer(1, 4).size() == 12);
}

TEST_CASE("payload size follows the meta") {
  const auto path = scratch_dir("store_size") / "s.narb";
  const std::size_t n = 872, layers = 17, dim = 8;
  store_write(StoreMeta{"m", layers, dim, Pooling::mean, "float32"}, random_records(n, layers, dim, 3), path);
  StoreReader reader(path);
  for (const auto& k : reader.keys()) reader.read(k);
  CHECK(reader.payload_bytes_read() == n * layers * dim * 4);
  CHECK(reader.records_decoded() == n);
}

TEST_CASE("one requested key decodes one record") {
  const auto path = scratch_dir("store_lazy") / "s.narb";
  auto records = random_records(1000, 2, 4, 5);
  const auto wanted = records[417];
  store_write(StoreMeta{"m", 2, 4, Pooling::mean, "float32"}, records, path);
  StoreReader reader(path);
  CHECK(reader.size() == 1000);
  CHECK(reader.records_decoded() == 0);
  CHECK(reader.read(wanted.key) == wanted);
  CHECK(reader.records_decoded() == 1);
  CHECK(reader.payload_bytes_read() == 2 * 4 * 4);
}

TEST_CASE("corrupted index entry is rejected") {
  const auto path = scratch_dir("store_corrupt") / "s.narb";
  const StoreMeta meta{"m", 1, 2, Pooling::mean, "float32"};
  store_write(meta, random_records(3, 1, 2, 9), path);
  std::string bytes = read_file(path);
  std::uint32_t meta_len = 0;
  std::memcpy(&meta_len, bytes.data() + 7, 4);
  const std::size_t first_key = 11 + meta_len + 8 + 2;
  for (std::size_t i = 0; i < 4; ++i) bytes[first_key + i] = 'x';
  for (std::size_t i = 4; i < 8; ++i) bytes[first_key + i] = ':';
  write_file(path, bytes);
  CHECK(thrown_message([&] { StoreReader r(path); }).find("corrupted index entry 0") != std::string::npos);

  store_write(meta, random_records(3, 1, 2, 9), path);
  bytes = read_file(path);
  bytes.resize(bytes.size() - 3);
  write_file(path, bytes);
  CHECK_FALSE(thrown_message([&] { StoreReader r(path); }).empty());
}

TEST_CASE("writer rejects bad records without writing") {
  const auto dir = scratch_dir("store_bad");
  const StoreMeta meta{"m", 1, 2, Pooling::mean, "float32"};
  auto records = random_records(2, 1, 2, 4);
  records[1].values[0] = std::nanf("");
  CHECK(thrown_message([&] { store_write(meta, records, dir / "a.narb"); }).find("non-finite") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "a.narb"));
  records = random_records(2, 1, 2, 4);
  records[1].key = records[0].key;
  CHECK(thrown_message([&] { store_write(meta, records, dir / "b.narb"); }).find("duplicate") != std::string::npos);
  records = random_records(2, 1, 2, 4);
  records[0].values.pop_back();
  CHECK(thrown_message([&] { store_write(meta, records, dir / "c.narb"); }).find("shape") != std::string::npos);
}

TEST_CASE("span pooling") {
  const auto acts = two_rows();
  CHECK(pool_span(acts, 0, 2, Pooling::mean) == std::vector<float>{2, 4});
  CHECK(pool_span(acts, 0, 2, Pooling::max) == std::vector<float>{3, 5});
  CHECK(pool_span(acts, 0, 2, Pooling::last_token) == std::vector<float>{3, 5});
  CHECK(pool_span(acts, 0, 2, Pooling::tokens) == std::vector<float>{1, 3, 3, 5});
  CHECK_FALSE(thrown_message([&] { pool_span(acts, 1, 1, Pooling::mean); }).empty());
}

TEST_CASE("scalar mix") {
  const std::vector<double> layers{1, 0, 0, 1};
  auto p = ScalarMixParams::uniform(2);
  CHECK(scalar_mix(layers, 2, p) == std::vector<double>{0.5, 0.5});
  p.gamma = 2.0;
  CHECK(scalar_mix(layers, 2, p) == std::vector<double>{1.0, 1.0});
  p = ScalarMixParams{{0.0, 60.0}, 1.5};
  const auto out = scalar_mix(layers, 2, p);
  CHECK(out[0] == doctest::Approx(0.0));
  CHECK(out[1] == doctest::Approx(1.5));
  const auto w = ScalarMixParams{{0.3, -1.0, 2.0}, 1.0}.softmax_weights();
  CHECK(w[0] + w[1] + w[2] == doctest::Approx(1.0));
}

}  // TEST_SUITE
