// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nadir/common.hpp"

namespace nadir {

enum class EditOp : char { Match = 'M', Sub = 'S', Omit = 'O', Ins = 'I' };

struct Alignment {
  std::size_t distance = 0;
  std::vector<EditOp> ops;  // left-to-right consumption order

  std::size_t count(EditOp op) const;
};

// Unit-cost edit distance over Unicode scalars with a deterministic
// backtrace: at every DP cell the tie-break priority is
// match > substitution > omission (ref char missing) > insertion (extra
// hyp char).
Alignment levenshtein_align(const std::string& hyp, const std::string& ref);

enum class RepeatCategory { Insert, Substitute, Valid };

std::string to_string(RepeatCategory c);

struct RepeatRecord {
  std::string span;
  int n = 0;  // gram size, 2..4
  RepeatCategory category = RepeatCategory::Insert;
};

// Adjacent-repetition spans (gg contiguous) for n in {2,3,4}, each distinct
// (span, n) counted once. Spans present in the reference but over-repeated
// are Valid Repeats; absent spans split into Substitute/Insert Repeats by
// whether the repeat block covers a substitution in the alignment. A
// shorter-n repeat strictly inside a counted longer block is not
// double-counted.
std::vector<RepeatRecord> detect_repetitions(const std::string& hyp, const std::string& ref,
                                             const Alignment& alignment);

struct RepetitionCounts {
  std::size_t insert_repeat = 0;
  std::size_t substitute_repeat = 0;
  std::size_t valid_repeat = 0;
  std::size_t total() const { return insert_repeat + substitute_repeat + valid_repeat; }
};

struct ErrorBreakdown {
  std::size_t insertions = 0;
  std::size_t substitutions = 0;
  std::size_t omissions = 0;
  RepetitionCounts repetitions;
  std::vector<RepeatRecord> details;

  std::size_t edit_distance() const { return insertions + substitutions + omissions; }
  ErrorBreakdown& operator+=(const ErrorBreakdown& o);
};

ErrorBreakdown analyze_pair(const std::string& hyp, const std::string& ref);

// distance / len(ref) * 100
double cer(const std::string& hyp, const std::string& ref);

// percentage of exact matches over (hyp, ref) pairs
double word_accuracy(const std::vector<std::pair<std::string, std::string>>& pairs);

struct EvalReport {
  double cer = 0.0;   // corpus level: sum(dist) / sum(ref len) * 100
  double wacc = 0.0;  // percent
  ErrorBreakdown breakdown;
  std::size_t pair_count = 0;
  std::size_t unterminated = 0;
  std::size_t skipped_empty_ref = 0;
  double inf_time_sec = 0.0;  // filled by eval/bench callers
};

// pairs are (hyp, ref); terminated flags are optional (inference callers).
EvalReport aggregate_report(const std::vector<std::pair<std::string, std::string>>& pairs,
                            const std::vector<std::uint8_t>* terminated = nullptr,
                            bool keep_details = false);

nlohmann::ordered_json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

// Aligned text table (Insertion | Substitution | Omissions | Repetition)
// with optional "Gain over" rows against a previous report.
std::string report_table(const EvalReport& r, const EvalReport* baseline = nullptr,
                         const std::string& baseline_label = "baseline");

// (old - new) / old * 100
double gain_percent(double old_value, double new_value);

}  // namespace nadir
