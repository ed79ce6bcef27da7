// pbench: pretrain, craft, run trials and benchmarks, re-render reports.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "poisonbench/checkpoint.hpp"
#include "poisonbench/config.hpp"
#include "poisonbench/error.hpp"
#include "poisonbench/gradcheck.hpp"
#include "poisonbench/harness.hpp"
#include "poisonbench/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> master_seed;
  std::string out;
  bool deterministic = false;
  std::optional<std::size_t> jobs;
  std::string attack;
  std::optional<std::size_t> trials;
  std::size_t trial_index = 0;
  bool quiet = false;
};

void add_run_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--master-seed", f.master_seed, "Master seed (overrides benchmark.master_seed)");
  cmd->add_option("--out", f.out, "Output directory (default: runtime.out_dir, then $POISONBENCH_OUT)");
  cmd->add_flag("--deterministic", f.deterministic, "Zero wall times and omit timestamps");
  cmd->add_option("--jobs,-j", f.jobs, "Worker threads for benchmark")->check(CLI::PositiveNumber);
  cmd->add_option("--attack", f.attack, "Attack name (overrides the config)");
  cmd->add_option("--trials", f.trials, "Number of trials")->check(CLI::PositiveNumber);
  cmd->add_flag("--quiet,-q", f.quiet, "No progress on stderr");
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw pb::ConfigError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw pb::ConfigError(path + ": " + e.what());
  }
}

// Applies command-line overrides at the document level so they go through
// the same validation as the file.
pb::RunConfig resolve_config(const Flags& f) {
  json j = read_json(f.config);
  if (!f.attack.empty()) {
    const json current = j.contains("attack") ? j["attack"] : json::object();
    if (current.value("name", std::string("fc")) != f.attack) j["attack"] = json{{"name", f.attack}};
  }
  if (f.master_seed) j["benchmark"]["master_seed"] = *f.master_seed;
  if (f.trials) j["benchmark"]["n_trials"] = *f.trials;
  if (f.jobs) j["runtime"]["parallelism"] = *f.jobs;
  if (f.deterministic) j["runtime"]["deterministic"] = true;
  if (!f.out.empty()) j["runtime"]["out_dir"] = f.out;
  pb::RunConfig c = pb::RunConfig::from_json(j);
  if (c.runtime.out_dir.empty()) {
    const char* env = std::getenv("POISONBENCH_OUT");
    c.runtime.out_dir = env != nullptr && *env != '\0' ? env : "pbench_out";
  }
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw pb::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw pb::IoError("write failed: " + path.string());
}

fs::path prepare_out(const pb::RunConfig& c) {
  const fs::path out = c.runtime.out_dir;
  fs::create_directories(out);
  write_text(out / "config.json", c.to_json().dump(2) + "\n");
  write_text(out / "config.hash", c.hash() + "\n");
  return out;
}

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

std::ostream* progress(const Flags& f) { return f.quiet ? nullptr : &std::cerr; }

// ---------------------------------------------------------------------------

int cmd_pretrain(const Flags& f) {
  pb::RunConfig c = resolve_config(f);
  const fs::path out = prepare_out(c);
  if (c.pretrain.checkpoint_dir.empty()) c.pretrain.checkpoint_dir = (out / "cache").string();
  const auto sets = pb::obtain_all_checkpoints(c, true, progress(f));
  json summary = json::array();
  auto dump = [&](const std::string& arch, const std::vector<pb::ModelCheckpoint>& ckpts) {
    for (std::size_t i = 0; i < ckpts.size(); ++i) {
      const fs::path file = out / "checkpoints" / arch / ("ckpt_" + std::to_string(i) + ".pbck");
      pb::save_checkpoint(file, ckpts[i]);
      summary.push_back({{"arch", arch},
                         {"index", i},
                         {"path", file.string()},
                         {"seed", ckpts[i].seed},
                         {"train_acc", ckpts[i].train_acc},
                         {"test_acc", ckpts[i].test_acc}});
    }
  };
  dump(c.pretrain.arch, sets.attacker);
  for (std::size_t a = 0; a < sets.held_out.size(); ++a) dump(c.pretrain.held_out[a], sets.held_out[a]);
  write_text(out / "pretrain.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int cmd_craft(const Flags& f) {
  const pb::RunConfig c = resolve_config(f);
  const fs::path out = prepare_out(c);
  const pb::Protocol protocol = c.protocol();
  const pb::BenchmarkEnv env = pb::build_env(c, progress(f));
  const pb::TrialSpec spec = pb::sample_trial(c.benchmark.master_seed, f.trial_index, protocol, env);
  const pb::CraftingContext ctx = pb::crafting_context(spec, protocol, env);
  const pb::PoisonSet set = pb::find_attack(spec.attack).crafter(ctx, protocol.attack_config);
  pb::save_poison_set(out / "poisons", set, ctx.bases);
  const double linf = pb::linf_distance(set.poisons, ctx.bases);
  const json summary = {{"trial", spec.to_json()},
                        {"attack", set.attack},
                        {"config", set.config},
                        {"J", set.size()},
                        {"label", set.label},
                        {"epsilon", set.epsilon ? json(*set.epsilon) : json(nullptr)},
                        {"max_linf", linf},
                        {"initial_objective", set.initial_objective},
                        {"final_objective", set.final_objective},
                        {"iterations", set.objective_trace.empty() ? 0 : set.objective_trace.size() - 1}};
  write_text(out / "craft.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return 0;
}

json result_json(const pb::TrialResult& r) {
  json victims = json::array();
  for (const auto& v : r.victims) {
    victims.push_back({{"arch", v.arch},
                       {"prediction", v.prediction},
                       {"clean_prediction", v.clean_prediction},
                       {"success", v.success},
                       {"test_acc", v.test_acc},
                       {"whole_class", std::isnan(v.whole_class) ? json(nullptr) : json(v.whole_class)},
                       {"param_hash", v.param_hash}});
  }
  return {{"trial", r.spec.to_json()},
          {"error", r.error ? json(*r.error) : json(nullptr)},
          {"success", r.success},
          {"victims", victims},
          {"crafting_hash", r.crafting_hash},
          {"craft_initial_loss", r.craft_initial_loss},
          {"craft_final_loss", r.craft_final_loss},
          {"max_poison_target_dist", r.max_poison_target_dist},
          {"min_base_target_dist", r.min_base_target_dist}};
}

int cmd_run_trial(const Flags& f) {
  const pb::RunConfig c = resolve_config(f);
  const fs::path out = prepare_out(c);
  const pb::Protocol protocol = c.protocol();
  const pb::BenchmarkEnv env = pb::build_env(c, progress(f));
  const pb::TrialSpec spec = pb::sample_trial(c.benchmark.master_seed, f.trial_index, protocol, env);
  const pb::TrialResult r = pb::run_trial(spec, protocol, env);
  const json j = result_json(r);
  write_text(out / "trial.json", j.dump(2) + "\n");
  if (!r.error) write_text(out / "trials.csv", pb::format_trials_csv({r.row(c.runtime.deterministic)}));
  std::cout << j.dump(2) << "\n";
  return 0;
}

void write_run(const fs::path& dir, const pb::BenchmarkRun& run, bool deterministic) {
  std::vector<pb::TrialRow> rows;
  json errors = json::array();
  for (const auto& t : run.trials) {
    if (t.error) {
      errors.push_back({{"trial", t.spec.to_json()}, {"error", *t.error}});
    } else {
      rows.push_back(t.row(deterministic));
    }
  }
  json details = json::array();
  for (const auto& t : run.trials) details.push_back(result_json(t));
  write_text(dir / "trials.csv", pb::format_trials_csv(rows));
  write_text(dir / "trials.json", details.dump(2) + "\n");
  write_text(dir / "summary.json", run.report.summary_json().dump(2) + "\n");
  write_text(dir / "table.md", pb::render_table({run.report}, pb::TableFormat::markdown));
  if (!errors.empty()) write_text(dir / "errors.json", errors.dump(2) + "\n");
}

int cmd_benchmark(const Flags& f) {
  const pb::RunConfig c = resolve_config(f);
  const fs::path out = prepare_out(c);
  const pb::Protocol protocol = c.protocol();
  const pb::BenchmarkEnv env = pb::build_env(c, progress(f));
  pb::BenchmarkOptions opt;
  opt.master_seed = c.benchmark.master_seed;
  opt.n_trials = c.benchmark.n_trials;
  opt.jobs = c.runtime.parallelism;
  opt.deterministic = c.runtime.deterministic;
  opt.config_hash = c.hash();
  if (c.benchmark.budget_sweep.empty()) {
    pb::BenchmarkRun run = pb::run_benchmark(protocol, env, opt);
    if (!opt.deterministic) run.report.timestamp = now_utc();
    write_run(out, run, opt.deterministic);
    std::cout << pb::render_table({run.report}, pb::TableFormat::markdown);
    return 0;
  }
  auto runs = pb::run_budget_sweep(protocol, env, opt, c.benchmark.budget_sweep, c.benchmark.sweep_fraction);
  json cells = json::array();
  std::ostringstream table;
  table << "| J | N | success |\n|---|---|---|\n";
  for (auto& run : runs) {
    if (!opt.deterministic) run.report.timestamp = now_utc();
    const auto& r = run.report;
    const fs::path dir = out / ("J" + std::to_string(r.budget) + "_N" + std::to_string(r.train_size));
    write_run(dir, run, opt.deterministic);
    json cell = r.summary_json();
    cell["dir"] = dir.filename().string();
    cells.push_back(cell);
    table << "| " << r.budget << " | " << r.train_size << " | " << r.formatted() << " |\n";
  }
  write_text(out / "sweep.json", cells.dump(2) + "\n");
  write_text(out / "sweep.md", table.str());
  std::cout << table.str();
  return 0;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw pb::IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

pb::BenchmarkReport report_from_csv(const std::string& path) {
  auto rows = pb::parse_trials_csv(read_file(path));
  if (rows.empty()) throw pb::DataError(path + ": no trials");
  return pb::BenchmarkReport::from_rows(std::move(rows), 0, "");
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& format, const std::string& baseline) {
  std::vector<pb::BenchmarkReport> reports;
  for (const auto& p : inputs) reports.push_back(report_from_csv(p));
  if (!baseline.empty()) {
    const pb::BenchmarkReport base = report_from_csv(baseline);
    json diffs = json::array();
    for (const auto& r : reports) {
      diffs.push_back({{"attack", r.attack},
                       {"column", pb::report_column(r)},
                       {"rate", r.formatted()},
                       {"baseline", base.formatted()},
                       {"diff_pct", pb::format_fixed2(pb::diff_from_baseline(r, base))}});
    }
    std::cout << diffs.dump(2) << "\n";
    return 0;
  }
  std::cout << pb::render_table(reports, pb::parse_table_format(format));
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  double worst = 0.0;
  for (const auto& r : pb::gradcheck_suite(seed)) {
    std::printf("%-24s coords=%-6zu max_rel_error=%.3e\n", r.name.c_str(), r.coordinates, r.max_rel_error);
    worst = std::max(worst, r.max_rel_error);
  }
  std::printf("max relative error %.3e (%s)\n", worst, worst < 1e-4 ? "ok" : "FAIL");
  if (worst >= 1e-4) throw pb::Error("gradcheck: max relative error " + std::to_string(worst) + " >= 1e-4");
  return 0;
}

int fail(int code, const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Poisoning benchmark: pretrain, craft, run trials and render reports"};
  app.require_subcommand(1);
  Flags f;

  auto* pretrain = app.add_subcommand("pretrain", "Train (or load from cache) every checkpoint");
  add_run_flags(pretrain, f);
  auto* craft = app.add_subcommand("craft", "Craft one poison set");
  add_run_flags(craft, f);
  craft->add_option("--trial", f.trial_index, "Trial index whose draw is used");
  auto* run_trial = app.add_subcommand("run-trial", "Run one seeded trial end to end");
  add_run_flags(run_trial, f);
  run_trial->add_option("--trial", f.trial_index, "Trial index");
  auto* benchmark = app.add_subcommand("benchmark", "Run the full protocol");
  add_run_flags(benchmark, f);

  std::vector<std::string> inputs;
  std::string format = "markdown";
  std::string baseline;
  auto* report = app.add_subcommand("report", "Re-render tables from trial CSVs");
  report->add_option("csv", inputs, "trials.csv files")->required()->check(CLI::ExistingFile);
  report->add_option("--format", format, "markdown, csv or json")
      ->check(CLI::IsMember({"markdown", "csv", "json"}));
  report->add_option("--baseline", baseline, "Baseline trials.csv for the difference column")
      ->check(CLI::ExistingFile);

  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--seed", gc_seed, "Seed for the random inputs");
  auto* attacks = app.add_subcommand("attacks", "List registered attacks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(1, "usage_error", e.what());
  }

  try {
    if (*pretrain) return cmd_pretrain(f);
    if (*craft) return cmd_craft(f);
    if (*run_trial) return cmd_run_trial(f);
    if (*benchmark) return cmd_benchmark(f);
    if (*report) return cmd_report(inputs, format, baseline);
    if (*gradcheck) return cmd_gradcheck(gc_seed);
    if (*attacks) {
      for (const auto& name : pb::attack_names()) {
        std::cout << name << (pb::is_backdoor_attack(name) ? "\tbackdoor" : "\ttriggerless") << "\n";
      }
      return 0;
    }
  } catch (const pb::ConfigError& e) {
    return fail(1, e.kind(), e.what());
  } catch (const pb::Error& e) {
    return fail(2, e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail(2, "runtime_error", e.what());
  }
  return 0;
}
