#include "parprobe/embed_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "json.hpp"

namespace parprobe {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[5] = {'N', 'A', 'R', 'B', '1'};
constexpr std::uint16_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

void put_float(std::string& out, float f) { put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f)); }

float get_float(const unsigned char* p) { return std::bit_cast<float>(get_le<std::uint32_t>(p)); }

std::string meta_json(const StoreMeta& meta) {
  json j = {{"model_id", meta.model_id},
            {"n_layers", meta.n_layers},
            {"dim", meta.dim},
            {"pooling", to_string(meta.pooling)},
            {"dtype", meta.dtype}};
  return j.dump();
}

}  // namespace

std::string_view to_string(Pooling pooling) {
  switch (pooling) {
    case Pooling::mean: return "mean";
    case Pooling::max: return "max";
    case Pooling::last_token: return "last_token";
    case Pooling::tokens: return "tokens";
  }
  return "unknown";
}

Pooling pooling_from_string(std::string_view name) {
  if (name == "mean") return Pooling::mean;
  if (name == "max") return Pooling::max;
  if (name == "last_token" || name == "last") return Pooling::last_token;
  if (name == "tokens") return Pooling::tokens;
  throw Error("unknown pooling mode '" + std::string(name) + "'");
}

void StoreMeta::validate() const {
  if (n_layers < 1) throw Error("store meta: n_layers must be >= 1");
  if (dim < 1) throw Error("store meta: dim must be >= 1");
  if (dtype != "float32") throw Error("store meta: dtype must be float32, got '" + dtype + "'");
}

void store_write(const StoreMeta& meta, std::vector<SpanEmbedding> records, const fs::path& path) {
  meta.validate();
  const std::size_t layer_block = meta.n_layers * meta.dim;
  std::vector<std::pair<std::string, std::size_t>> order;
  order.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.key.start >= r.key.end) throw Error("record " + r.key.key() + ": empty span");
    if (meta.pooling != Pooling::tokens && r.n_tokens != 1) {
      throw Error("record " + r.key.key() + ": pooled store expects one row per layer");
    }
    if (r.n_tokens == 0 || r.values.size() != layer_block * r.n_tokens) {
      throw Error("record " + r.key.key() + ": shape mismatch, expected " +
                  std::to_string(layer_block * r.n_tokens) + " values, got " + std::to_string(r.values.size()));
    }
    for (float v : r.values) {
      if (!std::isfinite(v)) throw Error("record " + r.key.key() + ": non-finite value");
    }
    const std::string key = r.key.key();
    if (key.size() > std::numeric_limits<std::uint16_t>::max()) throw Error("record key too long: " + key);
    order.emplace_back(key, i);
  }
  std::sort(order.begin(), order.end());
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (order[i].first == order[i - 1].first) throw Error("duplicate store key " + order[i].first);
  }

  std::string header(kMagic, sizeof(kMagic));
  put_le<std::uint16_t>(header, kVersion);
  const std::string m = meta_json(meta);
  put_le<std::uint32_t>(header, static_cast<std::uint32_t>(m.size()));
  header += m;
  put_le<std::uint64_t>(header, order.size());
  std::uint64_t offset = 0;
  for (const auto& [key, idx] : order) {
    put_le<std::uint16_t>(header, static_cast<std::uint16_t>(key.size()));
    header += key;
    put_le<std::uint64_t>(header, offset);
    offset += records[idx].values.size() * sizeof(float);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write store " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::string chunk;
  for (const auto& [key, idx] : order) {
    chunk.clear();
    chunk.reserve(records[idx].values.size() * sizeof(float));
    for (float v : records[idx].values) put_float(chunk, v);
    out.write(chunk.data(), static_cast<std::streamsize>(chunk.size()));
  }
  if (!out) throw Error("write failed for store " + path.string());
}

StoreReader::StoreReader(const fs::path& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw Error("cannot open store " + path.string());
  const std::uint64_t file_size = fs::file_size(path);
  const std::string where = "store " + path.string();

  auto read_exact = [&](std::size_t n) {
    std::vector<unsigned char> buf(n);
    in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw Error(where + ": truncated header");
    return buf;
  };

  auto head = read_exact(sizeof(kMagic) + 2 + 4);
  if (std::memcmp(head.data(), kMagic, sizeof(kMagic)) != 0) throw Error(where + ": bad magic");
  const auto version = get_le<std::uint16_t>(head.data() + 5);
  if (version != kVersion) throw Error(where + ": unsupported version " + std::to_string(version));
  const auto meta_len = get_le<std::uint32_t>(head.data() + 7);
  if (meta_len > file_size) throw Error(where + ": truncated meta");
  auto meta_bytes = read_exact(meta_len);
  try {
    const json j = json::parse(meta_bytes.begin(), meta_bytes.end());
    meta_.model_id = j.at("model_id").get<std::string>();
    meta_.n_layers = j.at("n_layers").get<std::size_t>();
    meta_.dim = j.at("dim").get<std::size_t>();
    meta_.pooling = pooling_from_string(j.at("pooling").get<std::string>());
    meta_.dtype = j.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw Error(where + ": malformed meta (" + e.what() + ")");
  }
  meta_.validate();

  const auto count = get_le<std::uint64_t>(read_exact(8).data());
  // Each index entry takes at least 2 + 1 + 8 bytes.
  if (count > file_size / 11) throw Error(where + ": record count exceeds file size");
  keys_.reserve(count);
  offsets_.reserve(count + 1);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(read_exact(2).data());
    auto key_bytes = read_exact(len);
    std::string key(key_bytes.begin(), key_bytes.end());
    const auto offset = get_le<std::uint64_t>(read_exact(8).data());
    try {
      parse_span_key(key);
    } catch (const Error&) {
      throw Error(where + ": corrupted index entry " + std::to_string(i));
    }
    if (!keys_.empty() && key <= keys_.back()) throw Error(where + ": index not sorted at entry " + std::to_string(i));
    keys_.push_back(std::move(key));
    offsets_.push_back(offset);
  }
  payload_start_ = static_cast<std::uint64_t>(in_.tellg());
  if (payload_start_ > file_size) throw Error(where + ": truncated index");
  const std::uint64_t payload_size = file_size - payload_start_;
  offsets_.push_back(payload_size);

  const std::uint64_t block = static_cast<std::uint64_t>(meta_.n_layers) * meta_.dim * sizeof(float);
  for (std::size_t i = 0; i < keys_.size(); ++i) {
    const std::uint64_t b = offsets_[i], e = offsets_[i + 1];
    const bool pooled = meta_.pooling != Pooling::tokens;
    const bool ok = e > b && e <= payload_size && (e - b) % block == 0 && (!pooled || e - b == block) &&
                    (i == 0 ? b == 0 : true);
    if (!ok) {
      throw Error(where + ": corrupted index entry " + std::to_string(i) + " (" + keys_[i] + ")");
    }
  }
  if (!keys_.empty() && offsets_[keys_.size()] != payload_size) throw Error(where + ": truncated payload");
  for (std::size_t i = 0; i < keys_.size(); ++i) lookup_.emplace(keys_[i], i);
}

SpanEmbedding StoreReader::read(const std::string& key) {
  auto it = lookup_.find(key);
  if (it == lookup_.end()) throw Error("store " + path_.string() + ": missing key " + key);
  const std::size_t i = it->second;
  const std::uint64_t bytes = offsets_[i + 1] - offsets_[i];
  std::vector<unsigned char> buf(bytes);
  in_.clear();
  in_.seekg(static_cast<std::streamoff>(payload_start_ + offsets_[i]));
  in_.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
  if (static_cast<std::uint64_t>(in_.gcount()) != bytes) {
    throw Error("store " + path_.string() + ": truncated payload for " + key);
  }
  SpanEmbedding rec;
  rec.key = parse_span_key(key);
  rec.values.resize(bytes / sizeof(float));
  for (std::size_t k = 0; k < rec.values.size(); ++k) {
    rec.values[k] = get_float(buf.data() + k * sizeof(float));
    if (!std::isfinite(rec.values[k])) throw Error("store " + path_.string() + ": non-finite value in " + key);
  }
  rec.n_tokens = rec.values.size() / (meta_.n_layers * meta_.dim);
  ++records_decoded_;
  payload_bytes_read_ += bytes;
  return rec;
}

std::pair<StoreMeta, std::vector<SpanEmbedding>> store_read(const fs::path& path,
                                                            const std::optional<std::vector<std::string>>& keys) {
  StoreReader reader(path);
  std::vector<SpanEmbedding> records;
  const auto& wanted = keys ? *keys : reader.keys();
  records.reserve(wanted.size());
  for (const auto& k : wanted) records.push_back(reader.read(k));
  return {reader.meta(), std::move(records)};
}

std::vector<float> pool_span(const TokenActivations& acts, std::size_t begin, std::size_t end, Pooling mode) {
  if (begin >= end) throw Error("pool_span: empty window");
  if (end > acts.n_tokens) throw Error("pool_span: window exceeds " + std::to_string(acts.n_tokens) + " tokens");
  const std::size_t d = acts.dim;
  const std::size_t width = end - begin;
  if (mode == Pooling::tokens) {
    std::vector<float> out;
    out.reserve(acts.n_layers * width * d);
    for (std::size_t l = 0; l < acts.n_layers; ++l) {
      for (std::size_t t = begin; t < end; ++t) {
        auto r = acts.row(l, t);
        out.insert(out.end(), r.begin(), r.end());
      }
    }
    return out;
  }
  std::vector<float> out(acts.n_layers * d);
  for (std::size_t l = 0; l < acts.n_layers; ++l) {
    float* dst = out.data() + l * d;
    switch (mode) {
      case Pooling::mean: {
        std::vector<double> sum(d, 0.0);
        for (std::size_t t = begin; t < end; ++t) {
          auto r = acts.row(l, t);
          for (std::size_t k = 0; k < d; ++k) sum[k] += r[k];
        }
        for (std::size_t k = 0; k < d; ++k) dst[k] = static_cast<float>(sum[k] / static_cast<double>(width));
        break;
      }
      case Pooling::max: {
        auto first = acts.row(l, begin);
        std::copy(first.begin(), first.end(), dst);
        for (std::size_t t = begin + 1; t < end; ++t) {
          auto r = acts.row(l, t);
          for (std::size_t k = 0; k < d; ++k) dst[k] = std::max(dst[k], r[k]);
        }
        break;
      }
      case Pooling::last_token: {
        auto r = acts.row(l, end - 1);
        std::copy(r.begin(), r.end(), dst);
        break;
      }
      case Pooling::tokens: break;
    }
  }
  return out;
}

std::vector<double> ScalarMixParams::softmax_weights() const {
  std::vector<double> w(raw_weights.size());
  if (w.empty()) return w;
  const double m = *std::max_element(raw_weights.begin(), raw_weights.end());
  double z = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(raw_weights[i] - m);
    z += w[i];
  }
  for (auto& x : w) x /= z;
  return w;
}

std::vector<double> scalar_mix(std::span<const double> layers, std::size_t dim, const ScalarMixParams& params) {
  const std::size_t n = params.n_layers();
  if (n == 0 || layers.size() != n * dim) {
    throw Error("scalar_mix: expected " + std::to_string(n) + " layers of dim " + std::to_string(dim) + ", got " +
                std::to_string(layers.size()) + " values");
  }
  const auto alpha = params.softmax_weights();
  std::vector<double> out(dim, 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    const double a = params.gamma * alpha[l];
    const double* x = layers.data() + l * dim;
    for (std::size_t k = 0; k < dim; ++k) out[k] += a * x[k];
  }
  return out;
}

void scalar_mix_backward(std::span<const double> layers, std::size_t dim, const ScalarMixParams& params,
                         std::span<const double> upstream, ScalarMixGrad& grad) {
  const std::size_t n = params.n_layers();
  if (layers.size() != n * dim || upstream.size() != dim) throw Error("scalar_mix_backward: shape mismatch");
  if (grad.raw_weights.size() != n) grad.raw_weights.assign(n, 0.0);
  const auto alpha = params.softmax_weights();
  // g_l = upstream . x_l
  std::vector<double> g(n, 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    const double* x = layers.data() + l * dim;
    double s = 0.0;
    for (std::size_t k = 0; k < dim; ++k) s += upstream[k] * x[k];
    g[l] = s;
  }
  double mean_g = 0.0;
  for (std::size_t l = 0; l < n; ++l) mean_g += alpha[l] * g[l];
  grad.gamma += mean_g;
  for (std::size_t l = 0; l < n; ++l) grad.raw_weights[l] += params.gamma * alpha[l] * (g[l] - mean_g);
}

}  // namespace parprobe
