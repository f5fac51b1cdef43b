#pragma once

// Listening-test statistics: normal-approximation z-scores and one-tailed
// p-values for A/B "identical or not" responses.
//
// CSV layout:
//   participant,<pair_id>:<identical|adversarial>,...
//   <participant_id>,A,B,...
// A answers "identical", B answers "different".

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "mosguard/error.hpp"

namespace mosguard {

inline double human_zscore(long correct, long total) {
  if (total <= 0) throw domain_error("human_zscore: total must be positive");
  if (correct < 0 || correct > total) {
    throw domain_error("human_zscore: correct count " + std::to_string(correct) + " outside [0, " +
                       std::to_string(total) + "]");
  }
  const double n = static_cast<double>(total);
  return (static_cast<double>(correct) - n / 2.0) / (std::sqrt(n) / 2.0);
}

/// 1 - Phi(z).
inline double one_tailed_p(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

enum class PairTruth { identical, adversarial };

struct HumanStudyTable {
  std::vector<std::string> pair_ids;
  std::vector<PairTruth> truth;
  std::vector<std::string> participants;
  std::vector<std::vector<char>> responses;  // participants x pairs, 'A' or 'B'

  std::size_t pair_count() const { return pair_ids.size(); }
  std::size_t participant_count() const { return participants.size(); }

  void validate() const {
    if (pair_ids.empty()) throw format_error("human study table has no pairs");
    if (truth.size() != pair_ids.size()) throw format_error("human study table: truth flags do not match pair ids");
    if (participants.size() != responses.size()) throw format_error("human study table: participant ids do not match rows");
    for (std::size_t p = 0; p < responses.size(); ++p) {
      if (responses[p].size() != pair_ids.size()) {
        throw format_error("human study table: ragged row for participant '" + participants[p] + "' (" +
                           std::to_string(responses[p].size()) + " entries, expected " +
                           std::to_string(pair_ids.size()) + ")");
      }
      for (char c : responses[p]) {
        if (c != 'A' && c != 'B') throw format_error("human study table: entry must be A or B");
      }
    }
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

inline HumanStudyTable parse_human_study_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  HumanStudyTable t;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (!header) {
      header = true;
      for (std::size_t i = 1; i < cells.size(); ++i) {
        const auto colon = cells[i].rfind(':');
        if (colon == std::string::npos) {
          throw parse_error("human study header column " + std::to_string(i) + " lacks ':<identical|adversarial>'");
        }
        const auto flag = cells[i].substr(colon + 1);
        if (flag == "identical") t.truth.push_back(PairTruth::identical);
        else if (flag == "adversarial") t.truth.push_back(PairTruth::adversarial);
        else throw parse_error("human study header: unknown truth flag '" + flag + "'");
        t.pair_ids.push_back(cells[i].substr(0, colon));
      }
      continue;
    }
    if (cells.size() != t.pair_ids.size() + 1) {
      throw format_error("human study line " + std::to_string(lineno) + ": ragged row with " +
                         std::to_string(cells.size() - 1) + " responses, expected " + std::to_string(t.pair_ids.size()));
    }
    t.participants.push_back(cells[0]);
    std::vector<char> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      if (cells[i] != "A" && cells[i] != "B") {
        throw parse_error("human study line " + std::to_string(lineno) + ": entry '" + cells[i] + "' is not A or B");
      }
      row.push_back(cells[i][0]);
    }
    t.responses.push_back(std::move(row));
  }
  if (!header) throw parse_error("human study table is empty");
  t.validate();
  return t;
}

inline HumanStudyTable read_human_study_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_human_study_csv(ss.str());
}

struct ParticipantStats {
  std::string participant;
  long correct = 0;
  double z = 0.0;
  double p = 0.0;
};

struct PairStats {
  std::string pair_id;
  PairTruth truth = PairTruth::identical;
  long b_count = 0;
  double believing_identical = 0.0;
};

struct StudySummary {
  std::vector<ParticipantStats> participants;
  std::vector<PairStats> pairs;
  std::map<long, long> correct_histogram;  // correct count -> participants
  std::map<long, long> b_count_histogram;  // B count -> pairs
  double max_z = 0.0;
  double min_p = 1.0;
};

inline StudySummary study_summary(const HumanStudyTable& t) {
  t.validate();
  if (t.participants.empty()) throw data_error("human study table has no participants");
  StudySummary s;
  const long n_pairs = static_cast<long>(t.pair_count());
  const double n_part = static_cast<double>(t.participant_count());
  for (std::size_t j = 0; j < t.pair_count(); ++j) {
    PairStats ps{t.pair_ids[j], t.truth[j], 0, 0.0};
    for (const auto& row : t.responses) ps.b_count += row[j] == 'B' ? 1 : 0;
    ps.believing_identical = (n_part - static_cast<double>(ps.b_count)) / n_part;
    ++s.b_count_histogram[ps.b_count];
    s.pairs.push_back(ps);
  }
  s.max_z = -INFINITY;
  for (std::size_t p = 0; p < t.participant_count(); ++p) {
    long correct = 0;
    for (std::size_t j = 0; j < t.pair_count(); ++j) {
      const bool said_identical = t.responses[p][j] == 'A';
      correct += said_identical == (t.truth[j] == PairTruth::identical) ? 1 : 0;
    }
    const double z = human_zscore(correct, n_pairs);
    const double pv = one_tailed_p(z);
    s.participants.push_back({t.participants[p], correct, z, pv});
    ++s.correct_histogram[correct];
    s.max_z = std::max(s.max_z, z);
    s.min_p = std::min(s.min_p, pv);
  }
  return s;
}

inline nlohmann::json to_json(const StudySummary& s) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : s.participants) parts.push_back({{"participant", p.participant}, {"correct", p.correct}, {"z", p.z}, {"p", p.p}});
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : s.pairs) {
    pairs.push_back({{"pair_id", p.pair_id},
                     {"truth", p.truth == PairTruth::identical ? "identical" : "adversarial"},
                     {"b_count", p.b_count},
                     {"believing_identical", p.believing_identical}});
  }
  nlohmann::json ch = nlohmann::json::object(), bh = nlohmann::json::object();
  for (auto [k, v] : s.correct_histogram) ch[std::to_string(k)] = v;
  for (auto [k, v] : s.b_count_histogram) bh[std::to_string(k)] = v;
  return {{"max_z", s.max_z},
          {"min_p", s.min_p},
          {"participants", parts},
          {"pairs", pairs},
          {"correct_histogram", ch},
          {"b_count_histogram", bh}};
}

}  // namespace mosguard
