#include "parprobe/common.hpp"

#include <charconv>

#include "json.hpp"

namespace parprobe {

std::string Span::key() const {
  return doc_id + ":" + std::to_string(start) + ":" + std::to_string(end);
}

namespace {

std::size_t parse_index(std::string_view text, std::string_view whole) {
  std::size_t value = 0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (text.empty() || ec != std::errc() || ptr != last) {
    throw Error("malformed span key '" + std::string(whole) + "'");
  }
  return value;
}

}  // namespace

Span parse_span_key(std::string_view key) {
  const auto last = key.rfind(':');
  if (last == std::string_view::npos || last == 0) {
    throw Error("malformed span key '" + std::string(key) + "'");
  }
  const auto middle = key.rfind(':', last - 1);
  if (middle == std::string_view::npos || middle == 0) {
    throw Error("malformed span key '" + std::string(key) + "'");
  }
  Span span;
  span.doc_id = std::string(key.substr(0, middle));
  span.start = parse_index(key.substr(middle + 1, last - middle - 1), key);
  span.end = parse_index(key.substr(last + 1), key);
  if (span.start >= span.end) {
    throw Error("span key '" + std::string(key) + "' has start >= end");
  }
  return span;
}

bool spans_overlap(const Span& a, const Span& b) {
  return a.doc_id == b.doc_id && a.start < b.end && b.start < a.end;
}

std::string Provenance::str() const {
  return "config_hash=" + config_hash + " seed=" + std::to_string(seed) + " version=" + version;
}

std::string Provenance::json_line() const {
  const nlohmann::json j = {{"provenance", {{"config_hash", config_hash}, {"seed", seed}, {"version", version}}}};
  return j.dump();
}

bool is_provenance_line(std::string_view line) { return line.starts_with("{\"provenance\":"); }

}  // namespace parprobe
