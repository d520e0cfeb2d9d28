#pragma once

// Experiment orchestration: method matrix x seeds over one dataset condition,
// per-run artifacts on disk, CSV tables and the directional-claim verdicts.
//
// Run directory layout (all relative to the output directory):
//   experiment.json            resolved config
//   dataset/                   generated dataset (see dataset_io.hpp)
//   runs/<method>_s<seed>/     config.json, log.jsonl, model.ckpt, metrics.json
//   results.csv, orderings.csv written by report()

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "tada/batching.hpp"
#include "tada/dataset_io.hpp"
#include "tada/datagen.hpp"
#include "tada/metrics.hpp"
#include "tada/model.hpp"
#include "tada/trainer.hpp"

namespace tada::run {

namespace fs = std::filesystem;
using nlohmann::json;

class RunnerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MethodSpec {
  Regime regime = Regime::baseline;
  DaMode da_mode = DaMode::none;
  json overrides = json::object();  ///< merged into the base training config

  [[nodiscard]] std::string name() const {
    return da_mode == DaMode::none ? to_string(regime) : to_string(regime) + "+" + to_string(da_mode);
  }
};

inline void to_json(json& j, const MethodSpec& m) {
  j = {{"regime", m.regime}, {"da_mode", m.da_mode}};
  if (!m.overrides.empty()) j["overrides"] = m.overrides;
}
inline void from_json(const json& j, MethodSpec& m) {
  m.regime = parse_regime(j.at("regime").get<std::string>());
  m.da_mode = parse_da_mode(j.value("da_mode", std::string("none")));
  m.overrides = j.value("overrides", json::object());
}

struct ExperimentConfig {
  std::string condition = "default";
  data::ToyWorldSpec dataset{};
  model::ModelConfig model{};
  train::RegimeConfig training{};
  std::vector<MethodSpec> methods;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string eval_split = "test";
  double t_threshold = 0.0;  ///< extra Welch |t| requirement for "holds"
  int checkpoint_every = 0;  ///< steps between resumable run-state saves; 0 disables

  void validate() const {
    data::validate(dataset);
    training.validate();
    if (seeds.empty()) throw RunnerError("experiment needs at least one seed");
    std::set<std::pair<std::string, std::uint64_t>> seen;
    for (const auto& m : methods)
      for (auto s : seeds)
        if (!seen.insert({m.name(), s}).second) throw RunnerError("duplicate (method, seed): " + m.name());
    std::set<std::uint64_t> uniq(seeds.begin(), seeds.end());
    if (uniq.size() != seeds.size()) throw RunnerError("duplicate seeds");
    if (eval_split != "test" && eval_split != "val") throw RunnerError("eval_split must be 'test' or 'val'");
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, condition, dataset, model, training, methods, seeds,
                                                eval_split, t_threshold, checkpoint_every)

/// Applies `path=value` overrides (dotted keys; value parsed as JSON, else kept as a string).
inline void apply_override(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw RunnerError("override must look like key.path=value: " + assignment);
  std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  std::replace(path.begin(), path.end(), '.', '/');
  cfg[json::json_pointer("/" + path)] = value;
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw RunnerError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw RunnerError("invalid JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
    if (!out) throw RunnerError("cannot write " + p.string());
  }
  fs::rename(tmp, p);
}

inline ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  json j = read_json(path);
  for (const auto& o : overrides) apply_override(j, o);
  ExperimentConfig cfg;
  try {
    cfg = j.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw RunnerError("invalid config " + path.string() + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

/// Training config of one method (base training section + method overrides).
inline train::RegimeConfig method_config(const ExperimentConfig& cfg, const MethodSpec& m, std::uint64_t seed) {
  json base = cfg.training;
  if (!m.overrides.empty()) base.merge_patch(m.overrides);
  auto rc = base.get<train::RegimeConfig>();
  rc.regime = m.regime;
  rc.da_mode = m.da_mode;
  rc.seed = seed;
  rc.validate();
  return rc;
}

/// Hash of everything that defines a method's training except the seed.
inline std::string config_hash(const ExperimentConfig& cfg, const MethodSpec& m) {
  train::RegimeConfig rc = method_config(cfg, m, 0);
  const std::string s = json{{"training", rc}, {"model", cfg.model}}.dump();
  return data::detail::hex64(fnv1a(s.data(), s.size()));
}

inline std::string run_name(const MethodSpec& m, std::uint64_t seed) {
  std::string n = m.name();
  std::replace(n.begin(), n.end(), '+', '-');
  return n + "_s" + std::to_string(seed);
}

/// Loads the dataset stored under `dir`, generating it first if absent.
inline data::Dataset ensure_dataset(const data::ToyWorldSpec& spec, const fs::path& dir) {
  if (fs::exists(dir / "index.json")) {
    data::Dataset ds = data::load_dataset(dir);
    if (data::spec_hash(ds.spec) != data::spec_hash(spec)) {
      throw RunnerError("dataset at " + dir.string() + " was generated from a different spec");
    }
    return ds;
  }
  data::Dataset ds = data::generate_dataset(spec);
  data::save_dataset(ds, dir);
  return ds;
}

inline data::Split parse_split(const std::string& s) {
  if (s == "train") return data::Split::train;
  if (s == "val") return data::Split::val;
  if (s == "test") return data::Split::test;
  throw RunnerError("unknown split '" + s + "'");
}

struct RunOutcome {
  metrics::MetricsReport report;
  train::TrainResult result;
  bool reused = false;
  double seconds = 0.0;
};

/// Trains and evaluates one (method, seed) in `run_dir`. A finished run is
/// reused; an interrupted one resumes from its saved state when available.
inline RunOutcome execute_run(const ExperimentConfig& cfg, const MethodSpec& m, std::uint64_t seed,
                              const batch::PreparedData& pd, const fs::path& run_dir, bool quiet = false) {
  RunOutcome out;
  const fs::path metrics_path = run_dir / "metrics.json";
  if (fs::exists(metrics_path)) {
    const json prev = read_json(metrics_path);
    out.report = prev.get<metrics::MetricsReport>();
    if (out.report.meta.config_hash == config_hash(cfg, m) && out.report.meta.spec_hash == data::spec_hash(pd.spec)) {
      out.reused = true;
      out.seconds = prev.value("seconds", 0.0);
      out.result.lambda_anchor = prev.value("lambda_anchor", 0.0);
      out.result.steps = prev.value("steps", std::int64_t{0});
      return out;
    }
    // Stale result from another configuration: start over.
    fs::remove(metrics_path);
    if (fs::exists(run_dir / "state.cbor")) fs::remove(run_dir / "state.cbor");
    out = RunOutcome{};
  }
  const auto split = parse_split(cfg.eval_split);
  if (pd.part(data::Domain::target, split).empty()) {
    throw RunnerError("target " + cfg.eval_split + " split is empty; refusing to evaluate");
  }
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(run_dir);
  const train::RegimeConfig rc = method_config(cfg, m, seed);
  const std::string run_cfg = json{{"method", m}, {"training", rc}, {"model", cfg.model}, {"condition", cfg.condition},
                                   {"spec_hash", data::spec_hash(pd.spec)}}.dump(2) + "\n";
  const fs::path state_path = run_dir / "state.cbor";
  if (fs::exists(state_path) && (!fs::exists(run_dir / "config.json") || read_json(run_dir / "config.json") != json::parse(run_cfg))) {
    fs::remove(state_path);
  }
  write_text(run_dir / "config.json", run_cfg);
  train::Net net(train::model_config_for(pd.spec, cfg.model, seed));
  const bool resume = fs::exists(state_path);
  std::ofstream log(run_dir / "log.jsonl", resume ? std::ios::app : std::ios::trunc);
  train::Trainer trainer(rc, pd, net, &log);
  if (resume) trainer.load_state(state_path);
  std::int64_t last_saved = trainer.step();
  while (trainer.step_once()) {
    if (cfg.checkpoint_every > 0 && trainer.step() - last_saved >= cfg.checkpoint_every) {
      trainer.save_state(state_path);
      last_saved = trainer.step();
    }
  }
  out.result = trainer.run();
  net.save(run_dir / "model.ckpt");
  out.report = train::evaluate(net, pd, data::Domain::target, split);
  out.report.meta = {to_string(m.regime), to_string(m.da_mode), seed, data::spec_hash(pd.spec), config_hash(cfg, m),
                     cfg.condition};
  json mj = out.report;
  mj["lambda_anchor"] = out.result.lambda_anchor;
  mj["steps"] = out.result.steps;
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  mj["seconds"] = out.seconds;
  write_text(metrics_path, mj.dump(2) + "\n");
  if (fs::exists(state_path)) fs::remove(state_path);
  if (!quiet) {
    std::fprintf(stderr, "[%s] %-28s seed %-4llu mean %.3f deg  (%.1fs, %lld steps)\n", cfg.condition.c_str(),
                 m.name().c_str(), static_cast<unsigned long long>(seed), out.report.mean_deg, out.seconds,
                 static_cast<long long>(out.result.steps));
  }
  return out;
}

/// Runs every (method, seed) pair, skipping finished runs.
inline void run_matrix(const ExperimentConfig& cfg, const fs::path& out_dir, bool quiet = false) {
  cfg.validate();
  fs::create_directories(out_dir);
  write_text(out_dir / "experiment.json", json(cfg).dump(2) + "\n");
  const data::Dataset ds = ensure_dataset(cfg.dataset, out_dir / "dataset");
  const batch::PreparedData pd = batch::prepare(ds);
  for (const auto& m : cfg.methods)
    for (auto seed : cfg.seeds) execute_run(cfg, m, seed, pd, out_dir / "runs" / run_name(m, seed), quiet);
}

// ---------------------------------------------------------------------------
// Reports

struct MethodResults {
  std::string name;
  std::vector<metrics::MetricsReport> runs;  ///< ascending seed
  std::optional<metrics::RunsSummary> summary;
  std::string config_hash;
};

struct MatrixResults {
  std::string condition;
  std::string spec_hash;
  std::vector<MethodResults> methods;  ///< config order

  [[nodiscard]] const MethodResults* find(const std::string& name) const {
    for (const auto& m : methods)
      if (m.name == name) return &m;
    return nullptr;
  }
};

/// Collects the finished runs of a matrix directory (missing runs are skipped).
inline MatrixResults collect(const fs::path& out_dir) {
  const auto cfg = read_json(out_dir / "experiment.json").get<ExperimentConfig>();
  MatrixResults r;
  r.condition = cfg.condition;
  r.spec_hash = data::spec_hash(cfg.dataset);
  auto seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());
  for (const auto& m : cfg.methods) {
    MethodResults mr;
    mr.name = m.name();
    mr.config_hash = config_hash(cfg, m);
    for (auto seed : seeds) {
      const fs::path p = out_dir / "runs" / run_name(m, seed) / "metrics.json";
      if (fs::exists(p)) mr.runs.push_back(read_json(p).get<metrics::MetricsReport>());
    }
    if (mr.runs.size() >= 2) mr.summary = metrics::aggregate_runs(mr.runs);
    r.methods.push_back(std::move(mr));
  }
  return r;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// One row per (method, seed) plus one aggregate row per method (mean; *_std columns hold the sample std).
inline std::string results_csv(const MatrixResults& r) {
  std::ostringstream os;
  const auto& names = metrics::metric_names();
  os << "condition,method,row,seed,n_seeds";
  for (const auto& n : names) os << ',' << n;
  for (const auto& n : names) os << ',' << n << "_std";
  os << ",n_pixels,spec_hash,config_hash\n";
  for (const auto& m : r.methods) {
    for (const auto& run : m.runs) {
      os << r.condition << ',' << m.name << ",run," << run.meta.seed << ",1";
      for (const auto& n : names) os << ',' << fmt(metrics::metric_value(run, n));
      for (std::size_t i = 0; i < names.size(); ++i) os << ",";
      os << ',' << run.n_pixels << ',' << run.meta.spec_hash << ',' << run.meta.config_hash << '\n';
    }
    if (m.summary) {
      os << r.condition << ',' << m.name << ",aggregate,," << m.runs.size();
      for (const auto& n : names) os << ',' << fmt(m.summary->stats.at(n).mean);
      for (const auto& n : names) os << ',' << fmt(m.summary->stats.at(n).std);
      os << ",," << r.spec_hash << ',' << m.config_hash << '\n';
    }
  }
  return os.str();
}

enum class Verdict { holds, fails, inconclusive, observational };
inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::holds: return "holds";
    case Verdict::fails: return "fails";
    case Verdict::inconclusive: return "inconclusive";
    case Verdict::observational: return "observational";
  }
  return "?";
}

struct PairCheck {
  std::string better, worse;  ///< claimed lower-error and higher-error methods
  double margin = 0.0;        ///< mean(worse) - mean(better), degrees
  double pooled_std = 0.0;
  double welch_t = 0.0;
  Verdict verdict = Verdict::inconclusive;
};

struct Claim {
  std::string id;
  std::string statement;
  Verdict verdict = Verdict::inconclusive;
  std::vector<PairCheck> checks;
};

/// Mean-error comparison of two methods: the gap must exceed the pooled std
/// (and the Welch |t| threshold) in the claimed direction to hold.
inline PairCheck check_pair(const MatrixResults& r, const std::string& better, const std::string& worse,
                            double t_threshold, bool require_significance = true) {
  PairCheck c{better, worse};
  const auto* a = r.find(better);
  const auto* b = r.find(worse);
  if (!a || !b || !a->summary || !b->summary) return c;
  const auto cmp = metrics::compare(b->summary->stats.at("mean_deg"), a->summary->stats.at("mean_deg"), t_threshold);
  c.margin = cmp.diff;
  c.pooled_std = cmp.pooled_std;
  c.welch_t = cmp.welch_t;
  if (cmp.diff > 0 && (cmp.significant || !require_significance)) c.verdict = Verdict::holds;
  else if (cmp.diff < 0 && cmp.significant) c.verdict = Verdict::fails;
  else c.verdict = Verdict::inconclusive;
  return c;
}

inline Verdict combine(const std::vector<PairCheck>& checks) {
  if (checks.empty()) return Verdict::inconclusive;
  bool all = true;
  for (const auto& c : checks) {
    if (c.verdict == Verdict::fails) return Verdict::fails;
    all = all && c.verdict == Verdict::holds;
  }
  return all ? Verdict::holds : Verdict::inconclusive;
}

/// First method of a regime that uses adaptation, if any.
inline std::string da_variant(const MatrixResults& r, const std::string& regime) {
  for (const auto& m : r.methods)
    if (m.name.rfind(regime + "+", 0) == 0) return m.name;
  return {};
}

/// Directional claims about target-test mean angular error.
/// `shifted`: the mismatched condition; `matched`: optional matched condition.
inline std::vector<Claim> reproduce_orderings(const MatrixResults* shifted, const MatrixResults* matched,
                                              double t_threshold = 0.0) {
  std::vector<Claim> claims;
  {
    Claim a{"a", "headfreeze < mtl_both < {mtl_src, mtl_tgt, baseline} under shift"};
    if (shifted) {
      a.checks.push_back(check_pair(*shifted, "headfreeze", "mtl_both", t_threshold));
      for (const char* w : {"mtl_src", "mtl_tgt", "baseline"}) a.checks.push_back(check_pair(*shifted, "mtl_both", w, t_threshold));
    }
    a.verdict = combine(a.checks);
    claims.push_back(a);
  }
  {
    Claim b{"b", "mtl_tgt error >= baseline error under shift"};
    if (shifted) {
      PairCheck c = check_pair(*shifted, "baseline", "mtl_tgt", t_threshold, false);
      // "Does not beat": a tie or any loss of mtl_tgt holds; only a significant win fails.
      if (c.verdict == Verdict::inconclusive && shifted->find("baseline") && shifted->find("mtl_tgt") &&
          shifted->find("baseline")->summary && shifted->find("mtl_tgt")->summary && c.margin >= 0.0) {
        c.verdict = Verdict::holds;
      }
      b.checks.push_back(c);
    }
    b.verdict = combine(b.checks);
    claims.push_back(b);
  }
  {
    Claim c{"c", "matched condition: +DA improves baseline and headfreeze"};
    if (matched) {
      for (const char* base : {"baseline", "headfreeze"}) {
        const std::string da = da_variant(*matched, base);
        if (da.empty()) {
          c.checks.push_back(PairCheck{base, base});
          continue;
        }
        c.checks.push_back(check_pair(*matched, da, base, t_threshold, false));
      }
    }
    c.verdict = combine(c.checks);
    claims.push_back(c);
  }
  {
    Claim d{"d", "mismatched condition: headfreeze holds up without DA; +DA may regress (observational)"};
    if (shifted) {
      d.checks.push_back(check_pair(*shifted, "headfreeze", "mtl_both", t_threshold));
      for (const char* base : {"baseline", "headfreeze"}) {
        const std::string da = da_variant(*shifted, base);
        if (!da.empty()) d.checks.push_back(check_pair(*shifted, da, base, t_threshold, false));
      }
    }
    bool any = false;
    for (const auto& ch : d.checks) {
      const auto* a = shifted ? shifted->find(ch.better) : nullptr;
      any = any || (a && a->summary);
    }
    d.verdict = any ? Verdict::observational : Verdict::inconclusive;
    claims.push_back(d);
  }
  return claims;
}

inline std::string orderings_csv(const std::vector<Claim>& claims) {
  std::ostringstream os;
  os << "claim,verdict,better,worse,check_verdict,margin_deg,pooled_std,welch_t,statement\n";
  for (const auto& c : claims) {
    if (c.checks.empty()) {
      os << c.id << ',' << to_string(c.verdict) << ",,,,,,,\"" << c.statement << "\"\n";
      continue;
    }
    for (const auto& ch : c.checks) {
      os << c.id << ',' << to_string(c.verdict) << ',' << ch.better << ',' << ch.worse << ',' << to_string(ch.verdict)
         << ',' << fmt(ch.margin) << ',' << fmt(ch.pooled_std) << ',' << fmt(ch.welch_t) << ",\"" << c.statement
         << "\"\n";
    }
  }
  return os.str();
}

/// Side-by-side seed-aggregated table of several conditions (methods in first-seen order).
inline std::string comparison_csv(const std::vector<MatrixResults>& conds) {
  std::vector<std::string> names;
  for (const auto& c : conds)
    for (const auto& m : c.methods)
      if (std::find(names.begin(), names.end(), m.name) == names.end()) names.push_back(m.name);
  std::ostringstream os;
  os << "method";
  for (const auto& c : conds)
    for (const auto& n : metrics::metric_names()) os << ',' << c.condition << ':' << n << ',' << c.condition << ':' << n << "_std";
  os << '\n';
  for (const auto& name : names) {
    os << name;
    for (const auto& c : conds) {
      const auto* m = c.find(name);
      for (const auto& n : metrics::metric_names()) {
        if (m && m->summary) os << ',' << fmt(m->summary->stats.at(n).mean) << ',' << fmt(m->summary->stats.at(n).std);
        else os << ",,";
      }
    }
    os << '\n';
  }
  return os.str();
}

/// Writes results.csv and orderings.csv into each matrix directory and, for
/// several directories, comparison.csv into the first. Pure function of the run artifacts.
inline std::vector<Claim> report(const std::vector<fs::path>& dirs, double t_threshold = 0.0) {
  if (dirs.empty()) throw RunnerError("report needs at least one run directory");
  std::vector<MatrixResults> all;
  for (const auto& d : dirs) {
    all.push_back(collect(d));
    write_text(d / "results.csv", results_csv(all.back()));
  }
  const MatrixResults* shifted = nullptr;
  const MatrixResults* matched = nullptr;
  for (const auto& r : all) {
    if (r.condition == "matched") matched = &r;
    else if (!shifted) shifted = &r;
  }
  const auto claims = reproduce_orderings(shifted, matched, t_threshold);
  for (const auto& d : dirs) write_text(d / "orderings.csv", orderings_csv(claims));
  if (all.size() > 1) write_text(dirs.front() / "comparison.csv", comparison_csv(all));
  return claims;
}

}  // namespace tada::run
