#pragma once

// Preference datasets: scored source records, the triple-construction rules,
// label-noise injection and JSONL persistence.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tpo/policy.hpp"

namespace tpo {

struct ScoredResponse {
  TokenSeq tokens;
  double score = 0.0;
  std::optional<int> rank;  // 1 = best

  bool operator==(const ScoredResponse&) const = default;
};

struct SourceRecord {
  TokenSeq prompt;
  std::vector<ScoredResponse> responses;

  bool operator==(const SourceRecord&) const = default;
};

struct Provenance {
  std::string rule;
  std::array<double, 3> scores{};  // gold, chosen, rejected

  bool operator==(const Provenance&) const = default;
};

struct PreferenceTriple {
  TokenSeq prompt, gold, chosen, rejected;
  Provenance meta;

  bool operator==(const PreferenceTriple&) const = default;
};

struct PreferencePair {
  TokenSeq prompt, chosen, rejected;

  bool operator==(const PreferencePair&) const = default;
};

PreferencePair to_pair(const PreferenceTriple& t);
std::vector<PreferencePair> to_pairs(const std::vector<PreferenceTriple>& triples);

struct BuildReport {
  std::size_t input = 0;
  std::size_t emitted = 0;
  std::size_t skipped = 0;
  std::map<std::string, std::size_t> reasons;  // skip reason -> count
};

struct BuildResult {
  std::vector<PreferenceTriple> triples;
  BuildReport report;
};

inline constexpr double kDefaultMargin = 0.5;

// gold = highest score; chosen = highest score <= gold - margin; rejected =
// lowest score, <= chosen - margin. Ties break by source order.
BuildResult build_triples_base(const std::vector<SourceRecord>& records,
                               double margin = kDefaultMargin);
// gold and chosen are the first two responses sharing the top score; rejected
// is the lowest, <= top - margin.
BuildResult build_triples_equal_score(const std::vector<SourceRecord>& records,
                                      double margin = kDefaultMargin);
// gold = rank 1, chosen = rank k, rejected = lowest rank. Missing ranks are
// derived from scores (descending, ties by source order). Needs > k responses.
BuildResult build_triples_instruct(const std::vector<SourceRecord>& records, int chosen_rank);

// Independent post-hoc check of a triple against its rule's score
// constraints. Returns an empty string when valid, else the violation.
std::string check_triple(const PreferenceTriple& t, double margin = kDefaultMargin);

// Swaps chosen/rejected on exactly round(p * N) records drawn without
// replacement. Gold and meta are untouched. Returns the swapped indices in
// ascending order.
std::vector<std::size_t> inject_label_noise(std::vector<PreferenceTriple>& data, double p,
                                            std::uint64_t seed);
std::vector<std::size_t> inject_label_noise(std::vector<PreferencePair>& data, double p,
                                            std::uint64_t seed);

// JSONL. Readers report malformed lines with their 1-based line number;
// blank lines are skipped.
std::string triple_to_json(const PreferenceTriple& t);
PreferenceTriple triple_from_json(const std::string& line);
std::string source_to_json(const SourceRecord& r);
SourceRecord source_from_json(const std::string& line);

std::vector<PreferenceTriple> read_triples(const std::string& path);
void write_triples(const std::string& path, const std::vector<PreferenceTriple>& data);
std::vector<SourceRecord> read_sources(const std::string& path);
void write_sources(const std::string& path, const std::vector<SourceRecord>& data);

// Writes text to path through a sibling temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& text);
std::string read_file(const std::string& path);

}  // namespace tpo
