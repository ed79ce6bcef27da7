#include "poisonbench/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "poisonbench/error.hpp"

namespace pb {

double standard_error(double successes, std::size_t n) {
  if (n == 0) throw Error("standard_error: n must be positive");
  const auto nd = static_cast<double>(n);
  if (!(successes >= 0.0 && successes <= nd)) {
    throw Error("standard_error: successes outside [0, n]");
  }
  double p = successes / nd;
  if (successes < 5.0 || nd - successes < 5.0) p = 0.5;
  return std::sqrt(p * (1.0 - p) / nd);
}

// glibc rounds the exact binary value and resolves exact ties to even.
std::string format_fixed2(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", value);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

std::string format_rate(double successes, std::size_t n) {
  return format_fixed2(100.0 * successes / static_cast<double>(n)) + " ± " +
         format_fixed2(100.0 * standard_error(successes, n));
}

// ---------------------------------------------------------------------------
// Per-trial CSV

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell += ch;
    }
  }
  out.push_back(cell);
  return out;
}

}  // namespace

std::string trials_csv_header() {
  return "trial_index,seed,attack,mode,threat,target_class,base_class,target_id,J,N,success,"
         "clean_test_acc,poisoned_test_acc,craft_final_loss,wall_s";
}

std::string format_trials_csv(const std::vector<TrialRow>& rows) {
  std::ostringstream out;
  out << trials_csv_header() << '\n';
  for (const auto& r : rows) {
    out << r.trial_index << ',' << r.seed << ',' << r.attack << ',' << r.mode << ',' << r.threat << ','
        << r.target_class << ',' << r.base_class << ',' << r.target_id << ',' << r.budget << ','
        << r.n << ',' << fmt("%.6f", r.success) << ',' << fmt("%.6f", r.clean_test_acc) << ','
        << fmt("%.6f", r.poisoned_test_acc) << ',' << fmt("%.9g", r.craft_final_loss) << ','
        << fmt("%.3f", r.wall_s) << '\n';
  }
  return out.str();
}

std::vector<TrialRow> parse_trials_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("trials csv: empty input");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != trials_csv_header()) throw DataError("trials csv: unexpected header '" + line + "'");
  std::vector<TrialRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split_csv_line(line);
    if (c.size() != 15) {
      throw DataError("trials csv line " + std::to_string(lineno) + ": expected 15 columns, got " +
                      std::to_string(c.size()));
    }
    try {
      TrialRow r;
      r.trial_index = std::stoull(c[0]);
      r.seed = std::stoull(c[1]);
      r.attack = c[2];
      r.mode = c[3];
      r.threat = c[4];
      r.target_class = std::stoi(c[5]);
      r.base_class = std::stoi(c[6]);
      r.target_id = std::stoull(c[7]);
      r.budget = std::stoull(c[8]);
      r.n = std::stoull(c[9]);
      r.success = std::strtod(c[10].c_str(), nullptr);
      r.clean_test_acc = std::strtod(c[11].c_str(), nullptr);
      r.poisoned_test_acc = std::strtod(c[12].c_str(), nullptr);
      r.craft_final_loss = std::strtod(c[13].c_str(), nullptr);
      r.wall_s = std::strtod(c[14].c_str(), nullptr);
      rows.push_back(std::move(r));
    } catch (const std::exception&) {
      throw DataError("trials csv line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Reports

nlohmann::json BenchmarkReport::summary_json() const {
  nlohmann::json j = {{"attack", attack},
                      {"mode", mode},
                      {"threat", threat},
                      {"n", n},
                      {"successes", successes},
                      {"rate_pct", rate_pct()},
                      {"stderr_pct", stderr_pct()},
                      {"formatted", formatted()},
                      {"config_hash", config_hash},
                      {"n_errors", n_errors},
                      {"J", budget},
                      {"N", train_size}};
  if (!timestamp.empty()) j["timestamp"] = timestamp;
  return j;
}

BenchmarkReport BenchmarkReport::from_rows(std::vector<TrialRow> rows, std::size_t n_errors,
                                           std::string config_hash) {
  BenchmarkReport r;
  r.n = rows.size();
  r.n_errors = n_errors;
  r.config_hash = std::move(config_hash);
  for (const auto& row : rows) r.successes += row.success;
  if (!rows.empty()) {
    r.attack = rows.front().attack;
    r.mode = rows.front().mode;
    r.threat = rows.front().threat;
    r.budget = rows.front().budget;
    r.train_size = rows.front().n;
  }
  r.rows = std::move(rows);
  return r;
}

std::string report_column(const BenchmarkReport& report) {
  const bool bb = report.threat == "black_box";
  if (report.mode == "from_scratch") return bb ? "FST-BB" : "FST";
  if (report.mode == "transfer_e2e") return bb ? "E2E-BB" : "E2E-WB";
  return bb ? "BB" : "WB";
}

TableFormat parse_table_format(const std::string& name) {
  if (name == "csv") return TableFormat::csv;
  if (name == "json") return TableFormat::json;
  if (name == "markdown" || name == "md") return TableFormat::markdown;
  throw ConfigError("unknown table format '" + name + "' (csv, json, markdown)");
}

namespace {

const std::vector<std::string>& column_order() {
  static const std::vector<std::string> order = {"WB", "BB", "E2E-WB", "E2E-BB", "FST", "FST-BB"};
  return order;
}

}  // namespace

std::string render_table(const std::vector<BenchmarkReport>& reports, TableFormat format) {
  if (format == TableFormat::json) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : reports) arr.push_back(r.summary_json());
    return arr.dump(2) + "\n";
  }
  if (format == TableFormat::csv) {
    std::ostringstream out;
    out << "attack,column,n,successes,rate_pct,stderr_pct,J,N\n";
    for (const auto& r : reports) {
      out << r.attack << ',' << report_column(r) << ',' << r.n << ',' << fmt("%.6g", r.successes) << ','
          << format_fixed2(r.rate_pct()) << ',' << format_fixed2(r.stderr_pct()) << ',' << r.budget << ','
          << r.train_size << '\n';
    }
    return out.str();
  }

  // Markdown grid: WB, BB and FST always, other columns when present.
  std::vector<std::string> columns;
  for (const auto& c : column_order()) {
    bool present = c == "WB" || c == "BB" || c == "FST";
    for (const auto& r : reports) present = present || report_column(r) == c;
    if (present) columns.push_back(c);
  }
  std::vector<std::string> attacks;
  std::map<std::pair<std::string, std::string>, const BenchmarkReport*> cells;
  for (const auto& r : reports) {
    if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end()) attacks.push_back(r.attack);
    cells[{r.attack, report_column(r)}] = &r;
  }
  std::map<std::string, double> best;
  for (const auto& [key, r] : cells) {
    if (r->n == 0) continue;
    auto it = best.find(key.second);
    if (it == best.end() || r->rate_pct() > it->second) best[key.second] = r->rate_pct();
  }

  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header = {"Attack"};
  header.insert(header.end(), columns.begin(), columns.end());
  grid.push_back(header);
  for (const auto& a : attacks) {
    std::vector<std::string> row = {a};
    for (const auto& c : columns) {
      const auto it = cells.find({a, c});
      if (it == cells.end() || it->second->n == 0) {
        row.push_back("-");
        continue;
      }
      std::string text = it->second->formatted();
      if (it->second->rate_pct() == best[c]) text = "**" + text + "**";
      row.push_back(text);
    }
    grid.push_back(row);
  }
  // Widths in code points so "±" aligns.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char ch : s)
      if ((ch & 0xC0) != 0x80) ++w;
    return w;
  };
  std::vector<std::size_t> widths(header.size(), 3);
  for (const auto& row : grid)
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width(row[i]));
  std::ostringstream out;
  auto emit = [&](const std::vector<std::string>& row) {
    out << '|';
    for (std::size_t i = 0; i < row.size(); ++i) {
      out << ' ' << row[i] << std::string(widths[i] - width(row[i]), ' ') << " |";
    }
    out << '\n';
  };
  emit(grid.front());
  // Attack column left-aligned, rates right-aligned.
  out << "|:" << std::string(widths[0] + 1, '-') << '|';
  for (std::size_t i = 1; i < widths.size(); ++i) out << std::string(widths[i] + 1, '-') << ":|";
  out << '\n';
  for (std::size_t r = 1; r < grid.size(); ++r) emit(grid[r]);
  return out.str();
}

double diff_from_baseline(const BenchmarkReport& report, const BenchmarkReport& baseline) {
  if (report.attack != baseline.attack) {
    throw ConfigError("diff_from_baseline: attack '" + report.attack + "' vs baseline '" +
                      baseline.attack + "'");
  }
  return report.rate_pct() - baseline.rate_pct();
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace pb
