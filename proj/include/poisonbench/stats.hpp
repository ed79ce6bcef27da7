#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace pb {

// sqrt(p(1-p)/n) with p = successes/n, except p = 1/2 when fewer than five
// successes or fewer than five failures were observed. `successes` may be
// fractional (black-box trials average over victims). Throws for n == 0.
double standard_error(double successes, std::size_t n);

// Two decimals, ties to even ("%.2f" on the correctly rounded value).
std::string format_fixed2(double value);
// "92.00 ± 2.71" from a success count.
std::string format_rate(double successes, std::size_t n);

// One line of the per-trial CSV.
struct TrialRow {
  std::size_t trial_index = 0;
  std::uint64_t seed = 0;
  std::string attack;
  std::string mode;
  std::string threat;
  int target_class = 0;
  int base_class = 0;
  std::uint64_t target_id = 0;
  std::size_t budget = 0;  // J
  std::size_t n = 0;       // N
  double success = 0.0;
  double clean_test_acc = 0.0;
  double poisoned_test_acc = 0.0;
  double craft_final_loss = 0.0;
  double wall_s = 0.0;
};

std::string trials_csv_header();
std::string format_trials_csv(const std::vector<TrialRow>& rows);
std::vector<TrialRow> parse_trials_csv(const std::string& text);

struct BenchmarkReport {
  std::string attack;
  std::string mode;
  std::string threat;
  std::size_t n = 0;          // trials that completed
  double successes = 0.0;
  std::size_t n_errors = 0;   // crafting failures, excluded from n
  std::size_t budget = 0;     // J
  std::size_t train_size = 0; // N
  std::string config_hash;
  std::string timestamp;      // empty in deterministic runs
  std::vector<TrialRow> rows;

  double rate() const { return n == 0 ? 0.0 : successes / static_cast<double>(n); }
  double rate_pct() const { return 100.0 * rate(); }
  double stderr_pct() const { return n == 0 ? 0.0 : 100.0 * standard_error(successes, n); }
  std::string formatted() const { return n == 0 ? "-" : format_rate(successes, n); }

  nlohmann::json summary_json() const;
  // Aggregates the rows: n, successes and metadata from the first row.
  static BenchmarkReport from_rows(std::vector<TrialRow> rows, std::size_t n_errors,
                                   std::string config_hash);
};

// Table column of a report: WB / BB for frozen-feature transfer, E2E-WB /
// E2E-BB for end-to-end transfer, FST / FST-BB from scratch.
std::string report_column(const BenchmarkReport& report);

enum class TableFormat { csv, json, markdown };
TableFormat parse_table_format(const std::string& name);

// Attacks x columns grid. Markdown marks the best rate of each column in bold.
std::string render_table(const std::vector<BenchmarkReport>& reports, TableFormat format);

// rate_pct - baseline.rate_pct; the attacks must match.
double diff_from_baseline(const BenchmarkReport& report, const BenchmarkReport& baseline);

// FNV-1a 64-bit, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace pb
