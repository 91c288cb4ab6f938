#include "tpo/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "tpo/error.hpp"
#include "tpo/rng.hpp"

namespace tpo {

namespace {

using ojson = nlohmann::ordered_json;

// Scores are compared with a small slack so that, e.g., 8.5 - 8.0 counts as a
// 0.5 gap despite rounding.
constexpr double kScoreTol = 1e-9;

bool at_least_gap(double hi, double lo, double margin) { return hi - lo >= margin - kScoreTol; }
bool same_score(double a, double b) { return std::abs(a - b) <= kScoreTol; }

std::size_t argmax_first(const std::vector<ScoredResponse>& rs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rs.size(); ++i)
    if (rs[i].score > rs[best].score) best = i;
  return best;
}

std::size_t argmin_first(const std::vector<ScoredResponse>& rs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < rs.size(); ++i)
    if (rs[i].score < rs[best].score) best = i;
  return best;
}

void skip(BuildReport& report, const std::string& reason) {
  ++report.skipped;
  ++report.reasons[reason];
}

void emit(BuildResult& out, const SourceRecord& r, std::size_t g, std::size_t w, std::size_t l,
          const std::string& rule) {
  const auto& rs = r.responses;
  if (rs[g].tokens == rs[w].tokens || rs[w].tokens == rs[l].tokens ||
      rs[g].tokens == rs[l].tokens) {
    skip(out.report, "duplicate_sequences");
    return;
  }
  PreferenceTriple t;
  t.prompt = r.prompt;
  t.gold = rs[g].tokens;
  t.chosen = rs[w].tokens;
  t.rejected = rs[l].tokens;
  t.meta = Provenance{rule, {rs[g].score, rs[w].score, rs[l].score}};
  out.triples.push_back(std::move(t));
  ++out.report.emitted;
}

void check_margin(double margin) {
  if (!(margin >= 0.0) || !std::isfinite(margin))
    throw ValidationError("margin must be a finite value >= 0");
}

}  // namespace

PreferencePair to_pair(const PreferenceTriple& t) { return {t.prompt, t.chosen, t.rejected}; }

std::vector<PreferencePair> to_pairs(const std::vector<PreferenceTriple>& triples) {
  std::vector<PreferencePair> out;
  out.reserve(triples.size());
  for (const auto& t : triples) out.push_back(to_pair(t));
  return out;
}

BuildResult build_triples_base(const std::vector<SourceRecord>& records, double margin) {
  check_margin(margin);
  BuildResult out;
  out.report.input = records.size();
  for (const auto& r : records) {
    const auto& rs = r.responses;
    if (rs.size() < 3) {
      skip(out.report, "too_few_responses");
      continue;
    }
    const std::size_t g = argmax_first(rs);
    std::optional<std::size_t> w;
    for (std::size_t i = 0; i < rs.size(); ++i) {
      if (i == g || !at_least_gap(rs[g].score, rs[i].score, margin)) continue;
      if (!w || rs[i].score > rs[*w].score) w = i;
    }
    if (!w) {
      skip(out.report, "no_chosen_within_margin");
      continue;
    }
    const std::size_t l = argmin_first(rs);
    if (l == *w || l == g || !at_least_gap(rs[*w].score, rs[l].score, margin)) {
      skip(out.report, "no_rejected_within_margin");
      continue;
    }
    emit(out, r, g, *w, l, "base");
  }
  return out;
}

BuildResult build_triples_equal_score(const std::vector<SourceRecord>& records, double margin) {
  check_margin(margin);
  BuildResult out;
  out.report.input = records.size();
  for (const auto& r : records) {
    const auto& rs = r.responses;
    if (rs.size() < 3) {
      skip(out.report, "too_few_responses");
      continue;
    }
    const std::size_t g = argmax_first(rs);
    std::optional<std::size_t> w;
    for (std::size_t i = g + 1; i < rs.size() && !w; ++i)
      if (same_score(rs[i].score, rs[g].score)) w = i;
    if (!w) {
      skip(out.report, "no_equal_score_pair");
      continue;
    }
    const std::size_t l = argmin_first(rs);
    if (l == g || l == *w || !at_least_gap(rs[g].score, rs[l].score, margin)) {
      skip(out.report, "no_rejected_within_margin");
      continue;
    }
    emit(out, r, g, *w, l, "equal_score");
  }
  return out;
}

BuildResult build_triples_instruct(const std::vector<SourceRecord>& records, int chosen_rank) {
  if (chosen_rank < 2) throw ValidationError("chosen rank must be >= 2");
  const auto k = static_cast<std::size_t>(chosen_rank);
  const std::string rule = "instruct_k" + std::to_string(chosen_rank);
  BuildResult out;
  out.report.input = records.size();
  for (const auto& r : records) {
    const auto& rs = r.responses;
    if (rs.size() < k + 1) {
      skip(out.report, "too_few_responses");
      continue;
    }
    std::vector<std::size_t> order(rs.size());
    std::iota(order.begin(), order.end(), 0);
    const bool ranked =
        std::all_of(rs.begin(), rs.end(), [](const ScoredResponse& s) { return s.rank.has_value(); });
    if (ranked) {
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return *rs[a].rank < *rs[b].rank; });
    } else {
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return rs[a].score > rs[b].score; });
    }
    emit(out, r, order[0], order[k - 1], order.back(), rule);
  }
  return out;
}

std::string check_triple(const PreferenceTriple& t, double margin) {
  if (t.gold == t.chosen) return "gold equals chosen";
  if (t.chosen == t.rejected) return "chosen equals rejected";
  if (t.gold == t.rejected) return "gold equals rejected";
  const auto [g, w, l] = t.meta.scores;
  if (t.meta.rule == "base") {
    if (g - w < margin - kScoreTol) return "gold/chosen gap below margin";
    if (w - l < margin - kScoreTol) return "chosen/rejected gap below margin";
  } else if (t.meta.rule == "equal_score") {
    if (std::abs(g - w) > kScoreTol) return "gold and chosen scores differ";
    if (w - l < margin - kScoreTol) return "chosen/rejected gap below margin";
  } else if (t.meta.rule.rfind("instruct_k", 0) == 0) {
    if (g < w || w < l) return "scores not ordered gold >= chosen >= rejected";
  } else {
    return "unknown rule '" + t.meta.rule + "'";
  }
  return {};
}

namespace {

std::vector<std::size_t> noise_indices(std::size_t n, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("noise fraction must lie in [0, 1]");
  const auto m = static_cast<std::size_t>(std::llround(p * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(mix_seed(seed, 0x6e6f697365ULL));
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(m);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

std::vector<std::size_t> inject_label_noise(std::vector<PreferenceTriple>& data, double p,
                                            std::uint64_t seed) {
  auto idx = noise_indices(data.size(), p, seed);
  for (std::size_t i : idx) std::swap(data[i].chosen, data[i].rejected);
  return idx;
}

std::vector<std::size_t> inject_label_noise(std::vector<PreferencePair>& data, double p,
                                            std::uint64_t seed) {
  auto idx = noise_indices(data.size(), p, seed);
  for (std::size_t i : idx) std::swap(data[i].chosen, data[i].rejected);
  return idx;
}

// ---------------------------------------------------------------- JSON

namespace {

TokenSeq tokens_from(const ojson& j, const char* field) {
  if (!j.contains(field)) throw std::runtime_error(std::string("missing field \"") + field + "\"");
  const ojson& a = j.at(field);
  if (!a.is_array()) throw std::runtime_error(std::string("field \"") + field + "\" is not an array");
  TokenSeq out;
  out.reserve(a.size());
  for (const auto& v : a) {
    if (!v.is_number_integer() || v.get<long long>() < 0)
      throw std::runtime_error(std::string("field \"") + field +
                               "\" holds a non-integer or negative id");
    out.push_back(v.get<Token>());
  }
  return out;
}

double finite_number(const ojson& v, const char* what) {
  if (!v.is_number()) throw std::runtime_error(std::string(what) + " is not a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw std::runtime_error(std::string(what) + " is not finite");
  return d;
}

template <class T, class Parse>
std::vector<T> read_lines(const std::string& path, Parse parse) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<T> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.push_back(parse(line));
    } catch (const std::exception& e) {
      throw ValidationError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (in.bad()) throw std::runtime_error("read error on " + path);
  return out;
}

template <class T, class Dump>
void write_lines(const std::string& path, const std::vector<T>& data, Dump dump) {
  std::string text;
  for (const auto& rec : data) {
    text += dump(rec);
    text += '\n';
  }
  write_file_atomic(path, text);
}

}  // namespace

std::string triple_to_json(const PreferenceTriple& t) {
  ojson j;
  j["prompt"] = t.prompt;
  j["gold"] = t.gold;
  j["chosen"] = t.chosen;
  j["rejected"] = t.rejected;
  j["meta"] = {{"rule", t.meta.rule},
               {"scores", {t.meta.scores[0], t.meta.scores[1], t.meta.scores[2]}}};
  return j.dump();
}

PreferenceTriple triple_from_json(const std::string& line) {
  const ojson j = ojson::parse(line);
  if (!j.is_object()) throw std::runtime_error("record is not a JSON object");
  PreferenceTriple t;
  t.prompt = tokens_from(j, "prompt");
  t.gold = tokens_from(j, "gold");
  t.chosen = tokens_from(j, "chosen");
  t.rejected = tokens_from(j, "rejected");
  if (j.contains("meta")) {
    const ojson& m = j.at("meta");
    if (!m.is_object()) throw std::runtime_error("\"meta\" is not an object");
    if (m.contains("rule")) t.meta.rule = m.at("rule").get<std::string>();
    if (m.contains("scores")) {
      const ojson& s = m.at("scores");
      if (!s.is_array() || s.size() != 3)
        throw std::runtime_error("\"meta.scores\" must hold three numbers");
      for (std::size_t i = 0; i < 3; ++i) t.meta.scores[i] = finite_number(s[i], "score");
    }
  }
  return t;
}

std::string source_to_json(const SourceRecord& r) {
  ojson j;
  j["prompt"] = r.prompt;
  ojson rs = ojson::array();
  for (const auto& s : r.responses) {
    ojson o;
    o["tokens"] = s.tokens;
    o["score"] = s.score;
    if (s.rank) o["rank"] = *s.rank;
    rs.push_back(std::move(o));
  }
  j["responses"] = std::move(rs);
  return j.dump();
}

SourceRecord source_from_json(const std::string& line) {
  const ojson j = ojson::parse(line);
  if (!j.is_object()) throw std::runtime_error("record is not a JSON object");
  SourceRecord r;
  r.prompt = tokens_from(j, "prompt");
  if (!j.contains("responses") || !j.at("responses").is_array())
    throw std::runtime_error("missing array field \"responses\"");
  for (const auto& o : j.at("responses")) {
    if (!o.is_object()) throw std::runtime_error("response is not an object");
    ScoredResponse s;
    s.tokens = tokens_from(o, "tokens");
    if (!o.contains("score")) throw std::runtime_error("response missing \"score\"");
    s.score = finite_number(o.at("score"), "score");
    if (o.contains("rank") && !o.at("rank").is_null()) {
      if (!o.at("rank").is_number_integer() || o.at("rank").get<int>() < 1)
        throw std::runtime_error("rank must be an integer >= 1");
      s.rank = o.at("rank").get<int>();
    }
    r.responses.push_back(std::move(s));
  }
  if (r.responses.size() < 2) throw std::runtime_error("a source record needs >= 2 responses");
  return r;
}

std::vector<PreferenceTriple> read_triples(const std::string& path) {
  return read_lines<PreferenceTriple>(path, triple_from_json);
}

void write_triples(const std::string& path, const std::vector<PreferenceTriple>& data) {
  write_lines(path, data, triple_to_json);
}

std::vector<SourceRecord> read_sources(const std::string& path) {
  return read_lines<SourceRecord>(path, source_from_json);
}

void write_sources(const std::string& path, const std::vector<SourceRecord>& data) {
  write_lines(path, data, source_to_json);
}

void write_file_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace tpo
