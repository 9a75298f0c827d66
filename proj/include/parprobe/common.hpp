#ifndef PARPROBE_COMMON_HPP_
#define PARPROBE_COMMON_HPP_

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace parprobe {

/// Hard failure raised by every module. Messages name the offending
/// id, key, field or line so that the CLI can print them verbatim.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Collects recoverable problems (misaligned spans, skipped anchors, ...).
/// Functions accept a nullable pointer; passing nullptr drops warnings.
struct Warnings {
  std::vector<std::string> items;

  void add(std::string message) { items.push_back(std::move(message)); }
  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
};

inline void warn(Warnings* sink, std::string message) {
  if (sink != nullptr) sink->add(std::move(message));
}

/// Half-open token interval [start, end) inside one document.
struct Span {
  std::string doc_id;
  std::size_t start = 0;
  std::size_t end = 0;

  std::size_t length() const { return end - start; }

  /// Store key "doc:start:end".
  std::string key() const;

  friend bool operator==(const Span&, const Span&) = default;
  friend auto operator<=>(const Span&, const Span&) = default;
};

/// Parses "doc:start:end"; the doc id may itself contain ':'.
Span parse_span_key(std::string_view key);

bool spans_overlap(const Span& a, const Span& b);

/// Identifies the run that produced an artifact.
struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version;

  bool empty() const { return config_hash.empty() && version.empty(); }
  /// "config_hash=<h> seed=<s> version=<v>", used as a CSV comment line.
  std::string str() const;
  /// {"provenance":{...}}, written as the first line of JSONL artifacts.
  std::string json_line() const;
};

/// True for the provenance line of a JSONL artifact; readers skip it.
bool is_provenance_line(std::string_view line);

}  // namespace parprobe

#endif  // PARPROBE_COMMON_HPP_
