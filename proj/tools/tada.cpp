// Command-line front end: dataset generation, single runs, evaluation,
// diagnostics, the experiment matrix and reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tada/diagnostics.hpp"
#include "tada/runner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tada;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("-c,--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  if (config_required) opt->required();
  cmd->add_option("--set", c.overrides, "override a config value, e.g. --set training.batch_size=4");
}

run::ExperimentConfig config_of(const Common& c) { return run::load_config(c.config, c.overrides); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dense-prediction domain adaptation toolkit"};
  app.require_subcommand(1);

  Common gen_c;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate the paired toy dataset");
  add_common(gen, gen_c);
  gen->add_option("-o,--out", gen_out, "dataset directory")->required();

  Common tr_c;
  std::string tr_data, tr_out, tr_regime = "baseline", tr_da = "none";
  std::uint64_t tr_seed = 1;
  auto* tr = app.add_subcommand("train", "train one regime on a dataset and evaluate it");
  add_common(tr, tr_c);
  tr->add_option("-d,--data", tr_data, "dataset directory (generated from the config if missing)")->required();
  tr->add_option("-o,--out", tr_out, "run directory")->required();
  tr->add_option("-r,--regime", tr_regime, "baseline|mtl_src|mtl_tgt|mtl_both|headfreeze|oracle");
  tr->add_option("--da-mode", tr_da, "none|feature|output|multi_level");
  tr->add_option("-s,--seed", tr_seed, "run seed");

  std::string ev_ckpt, ev_data, ev_split = "test", ev_domain = "target", ev_out;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("-d,--data", ev_data, "dataset directory")->required();
  ev->add_option("--split", ev_split, "train|val|test");
  ev->add_option("--domain", ev_domain, "source|target");
  ev->add_option("-o,--out", ev_out, "write the metrics JSON here");

  std::string dg_data, dg_ckpt, dg_out, dg_split = "val";
  auto* dg = app.add_subcommand("diagnose", "label-distribution report and feature PCA scatter");
  dg->add_option("-d,--data", dg_data, "dataset directory")->required();
  dg->add_option("--checkpoint", dg_ckpt, "model checkpoint (enables the PCA scatter)");
  dg->add_option("--split", dg_split, "split probed for the scatter");
  dg->add_option("-o,--out", dg_out, "output directory")->required();

  std::vector<std::string> rp_dirs;
  double rp_t = 0.0;
  auto* rp = app.add_subcommand("report", "results tables and claim verdicts from finished matrices");
  rp->add_option("--run-dir", rp_dirs, "matrix output directory (repeat for matched/mismatched)")->required();
  rp->add_option("--t-threshold", rp_t, "Welch |t| required in addition to the pooled-std gap");

  Common mx_c;
  std::string mx_out;
  auto* mx = app.add_subcommand("run-matrix", "run every (method, seed) of a config, then report");
  add_common(mx, mx_c);
  mx->add_option("-o,--out", mx_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto cfg = config_of(gen_c);
      const auto ds = data::generate_dataset(cfg.dataset);
      data::save_dataset(ds, gen_out);
      std::printf("wrote %zu samples to %s (spec %s)\n", ds.total(), gen_out.c_str(), data::spec_hash(ds.spec).c_str());
    } else if (*tr) {
      auto cfg = config_of(tr_c);
      const auto ds = run::ensure_dataset(cfg.dataset, tr_data);
      const auto pd = batch::prepare(ds);
      run::MethodSpec m{parse_regime(tr_regime), parse_da_mode(tr_da), {}};
      const auto out = run::execute_run(cfg, m, tr_seed, pd, tr_out);
      std::printf("%s\n", json(out.report).dump(2).c_str());
    } else if (*ev) {
      auto net = train::Net::load(ev_ckpt);
      const auto ds = data::load_dataset(ev_data);
      const auto pd = batch::prepare(ds);
      const auto dom = ev_domain == "source" ? data::Domain::source : data::Domain::target;
      if (ev_domain != "source" && ev_domain != "target") throw std::invalid_argument("--domain must be source or target");
      auto report = train::evaluate(net, pd, dom, run::parse_split(ev_split));
      report.meta.spec_hash = data::spec_hash(ds.spec);
      const std::string text = json(report).dump(2) + "\n";
      if (!ev_out.empty()) run::write_text(ev_out, text);
      std::printf("%s", text.c_str());
    } else if (*dg) {
      const auto ds = data::load_dataset(dg_data);
      fs::create_directories(dg_out);
      const auto rep = diag::label_distribution_report(ds);
      run::write_text(fs::path(dg_out) / "distribution.json", diag::to_json(rep).dump(2) + "\n");
      std::printf("normal-z W1 between domains: %.6f\n", rep.wasserstein[2]);
      if (!dg_ckpt.empty()) {
        auto net = train::Net::load(dg_ckpt);
        const auto pd = batch::prepare(ds);
        const auto split = run::parse_split(dg_split);
        diag::ProbeSet probes;
        const int fsz = net.output_size();
        for (auto d : data::kDomains) {
          const auto& raw = ds.part(d, split);
          const auto& prep = pd.part(d, split);
          for (std::size_t i = 0; i < raw.size(); ++i) {
            probes.samples.push_back(&prep[i]);
            probes.domains.push_back(d);
            probes.locations.push_back(diag::default_locations(raw[i], fsz));
          }
        }
        const auto rows = diag::pca_feature_scatter(net, probes, ds.spec.image_size);
        std::ofstream csv(fs::path(dg_out) / "scatter.csv");
        diag::write_scatter_csv(csv, rows);
        std::printf("wrote %zu scatter rows\n", rows.size());
      }
    } else if (*rp) {
      std::vector<fs::path> dirs(rp_dirs.begin(), rp_dirs.end());
      const auto claims = run::report(dirs, rp_t);
      for (const auto& c : claims) std::printf("claim (%s) %-13s %s\n", c.id.c_str(), run::to_string(c.verdict), c.statement.c_str());
    } else if (*mx) {
      const auto cfg = config_of(mx_c);
      run::run_matrix(cfg, mx_out);
      const auto claims = run::report({fs::path(mx_out)}, cfg.t_threshold);
      std::printf("%s", run::results_csv(run::collect(mx_out)).c_str());
      for (const auto& c : claims) std::printf("claim (%s) %-13s %s\n", c.id.c_str(), run::to_string(c.verdict), c.statement.c_str());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
