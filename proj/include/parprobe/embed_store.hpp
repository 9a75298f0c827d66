#ifndef PARPROBE_EMBED_STORE_HPP_
#define PARPROBE_EMBED_STORE_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "parprobe/common.hpp"

namespace parprobe {

// NARB1 store layout (all integers little-endian):
//
//   "NARB1"                       5 bytes
//   version                       u16, = 1
//   meta length                   u32
//   meta                          UTF-8 JSON
//   record count                  u64
//   index entry * count           u16 key length, key "doc:start:end", u64 offset
//   payload                       float32 values
//
// Index entries are sorted by key bytes and offsets are relative to the
// payload start, so records appear in the payload in index order. A pooled
// record holds n_layers * dim floats (layer-major). A token-level record
// holds n_layers * T * dim floats laid out [layer][token][dim]; T follows
// from the distance to the next offset.

enum class Pooling { mean, max, last_token, tokens };

std::string_view to_string(Pooling pooling);
Pooling pooling_from_string(std::string_view name);

struct StoreMeta {
  std::string model_id;
  std::size_t n_layers = 0;  // includes the embedding output as layer 0
  std::size_t dim = 0;
  Pooling pooling = Pooling::mean;
  std::string dtype = "float32";

  void validate() const;
  friend bool operator==(const StoreMeta&, const StoreMeta&) = default;
};

struct SpanEmbedding {
  Span key;
  std::size_t n_tokens = 1;  // rows per layer; 1 for pooled stores
  std::vector<float> values;

  /// Rows for one layer: dim values when pooled, n_tokens * dim otherwise.
  std::span<const float> layer(std::size_t l, std::size_t dim) const {
    return std::span<const float>(values).subspan(l * n_tokens * dim, n_tokens * dim);
  }

  friend bool operator==(const SpanEmbedding&, const SpanEmbedding&) = default;
};

/// Writes records sorted by key. Shape mismatch, non-finite values and
/// duplicate keys are hard errors; nothing is written in that case.
void store_write(const StoreMeta& meta, std::vector<SpanEmbedding> records,
                 const std::filesystem::path& path);

/// Random-access reader. Opening parses and validates the header and the
/// full index; payload bytes are only touched by read().
class StoreReader {
 public:
  explicit StoreReader(const std::filesystem::path& path);

  const StoreMeta& meta() const { return meta_; }
  std::size_t size() const { return keys_.size(); }
  const std::vector<std::string>& keys() const { return keys_; }
  bool contains(const std::string& key) const { return lookup_.count(key) != 0; }

  SpanEmbedding read(const std::string& key);
  SpanEmbedding read(const Span& span) { return read(span.key()); }

  std::size_t records_decoded() const { return records_decoded_; }
  std::uint64_t payload_bytes_read() const { return payload_bytes_read_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  StoreMeta meta_;
  std::vector<std::string> keys_;
  std::vector<std::uint64_t> offsets_;  // one extra entry: payload size
  std::map<std::string, std::size_t> lookup_;
  std::uint64_t payload_start_ = 0;
  std::size_t records_decoded_ = 0;
  std::uint64_t payload_bytes_read_ = 0;
};

/// Reads every record, or only `keys` when given (in the requested order).
std::pair<StoreMeta, std::vector<SpanEmbedding>> store_read(
    const std::filesystem::path& path, const std::optional<std::vector<std::string>>& keys = std::nullopt);

/// Token-level activations of one document: [layer][token][dim].
struct TokenActivations {
  std::size_t n_layers = 0;
  std::size_t n_tokens = 0;
  std::size_t dim = 0;
  std::vector<float> values;

  std::span<const float> row(std::size_t layer, std::size_t token) const {
    return std::span<const float>(values).subspan((layer * n_tokens + token) * dim, dim);
  }
};

/// Pools the window [begin, end) per layer. mean/max/last_token return
/// n_layers * dim values; tokens returns the window rows [layer][t][dim].
std::vector<float> pool_span(const TokenActivations& acts, std::size_t begin, std::size_t end,
                             Pooling mode);

/// Learned convex combination of layers with a scale:
///   mix(x) = gamma * sum_l softmax(w)_l * x_l
struct ScalarMixParams {
  std::vector<double> raw_weights;
  double gamma = 1.0;

  static ScalarMixParams uniform(std::size_t n_layers) {
    return ScalarMixParams{std::vector<double>(n_layers, 0.0), 1.0};
  }
  std::size_t n_layers() const { return raw_weights.size(); }
  std::vector<double> softmax_weights() const;
};

/// `layers` is n_layers * dim, layer-major.
std::vector<double> scalar_mix(std::span<const double> layers, std::size_t dim,
                               const ScalarMixParams& params);

struct ScalarMixGrad {
  std::vector<double> raw_weights;
  double gamma = 0.0;
};

/// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(mix output).
void scalar_mix_backward(std::span<const double> layers, std::size_t dim, const ScalarMixParams& params,
                         std::span<const double> upstream, ScalarMixGrad& grad);

}  // namespace parprobe

#endif  // PARPROBE_EMBED_STORE_HPP_
