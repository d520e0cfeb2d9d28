// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>

#include "support.hpp"
#include "tada/adversarial.hpp"
#include "tada/diagnostics.hpp"
#include "tada/losses.hpp"
#include "tada/metrics.hpp"
#include "tada/runner.hpp"

using namespace tada;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmtd(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome metric_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g;
  std::bernoulli_distribution keep(0.7);
  double worst = 0.0;
  for (int pair = 0; pair < 100; ++pair) {
    Tensor<double> pred({1, 3, 8, 8}), gt({1, 3, 8, 8});
    std::vector<std::uint8_t> mask(64);
    for (int p = 0; p < 64; ++p) {
      for (auto* t : {&pred, &gt}) {
        double v[3] = {g(rng), g(rng), g(rng)};
        const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        for (int c = 0; c < 3; ++c) (*t)(0, c, p / 8, p % 8) = v[c] / n;
      }
      mask[p] = keep(rng);
    }
    mask[static_cast<std::size_t>(pair % 64)] = 1;
    const auto errs = metrics::angular_error_map(pred, gt, mask);
    const auto r = metrics::aggregate(std::span<const double>(errs));

    std::vector<double> e;
    for (int p = 0; p < 64; ++p) {
      if (!mask[p]) continue;
      double a[3], b[3];
      for (int c = 0; c < 3; ++c) {
        a[c] = pred(0, c, p / 8, p % 8);
        b[c] = gt(0, c, p / 8, p % 8);
      }
      const double cx = a[1] * b[2] - a[2] * b[1], cy = a[2] * b[0] - a[0] * b[2], cz = a[0] * b[1] - a[1] * b[0];
      const double dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
      e.push_back(std::atan2(std::sqrt(cx * cx + cy * cy + cz * cz), dot) * 180.0 / std::numbers::pi);
    }
    double sum = 0.0, sq = 0.0, b11 = 0.0, b30 = 0.0;
    for (double x : e) {
      sum += x;
      sq += x * x;
      b11 += x < 11.25;
      b30 += x < 30.0;
    }
    std::sort(e.begin(), e.end());
    const double n = static_cast<double>(e.size());
    const double want[5] = {b11 / n, b30 / n, std::sqrt(sq / n), sum / n, e[(e.size() - 1) / 2]};
    const double got[5] = {r.pct_below_11_25, r.pct_below_30, r.rmse_deg, r.mean_deg, r.median_deg};
    for (int k = 0; k < 5; ++k) worst = std::max(worst, std::abs(want[k] - got[k]));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 10.0, "max |diff| " + fmtd("%.3g", worst) + ", " + fmtd("%.3f", secs) + " s"};
}

// ---------------------------------------------------------------------------

double rel_error(double fd, double an) {
  const double scale = std::max({std::abs(fd), std::abs(an), 1e-8});
  return std::abs(fd - an) / scale;
}

/// Worst relative error of `grad` against central differences of `f` over every entry of `x`.
double fd_check(Tensor<double>& x, const Tensor<double>& grad, const std::function<double()>& f) {
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    worst = std::max(worst, rel_error((up - down) / (2 * h), grad[i]));
  }
  return worst;
}

Outcome gradient_checks() {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> g;
  auto rnd = [&](Shape4 s) {
    Tensor<double> t(s);
    for (auto& v : t.vec()) v = g(rng);
    return t;
  };
  std::vector<std::uint8_t> mask(16, 1);
  mask[0] = mask[5] = 0;

  auto pred = rnd({1, 3, 4, 4});
  const auto gt = rnd({1, 3, 4, 4});
  const double cos_err =
      fd_check(pred, loss::cosine_normal_loss(pred, gt, mask).grad, [&] { return loss::cosine_normal_loss(pred, gt, mask).value; });

  auto hm = rnd({1, 3, 4, 4});
  auto dp = rnd({1, 3, 1, 1});
  const auto ghm = rnd({1, 3, 4, 4}), gdp = rnd({1, 3, 1, 1});
  const auto kr = loss::keypoint_loss(hm, dp, ghm, gdp, 0.5);
  auto kf = [&] { return loss::keypoint_loss(hm, dp, ghm, gdp, 0.5).value; };
  const double kp_err = std::max(fd_check(hm, kr.grad_heatmaps, kf), fd_check(dp, kr.grad_depths, kf));

  auto logits = rnd({1, 4, 4, 4});
  std::vector<std::uint8_t> classes(16);
  for (auto& c : classes) c = static_cast<std::uint8_t>(rng() % 4);
  const double seg_err = fd_check(logits, loss::segmentation_loss(logits, classes, mask).grad,
                                  [&] { return loss::segmentation_loss(logits, classes, mask).value; });

  const double worst = std::max({cos_err, kp_err, seg_err});
  return {worst < 1e-4, "cosine " + fmtd("%.2e", cos_err) + ", keypoint " + fmtd("%.2e", kp_err) + ", segmentation " +
                            fmtd("%.2e", seg_err)};
}

// ---------------------------------------------------------------------------

Outcome gradient_reversal() {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> g;
  Tensor<double> up({2, 4, 3, 3});
  for (auto& v : up.vec()) v = g(rng);
  bool ok = adv::grad_reverse_forward(up).vec() == up.vec();
  double worst = 0.0;
  for (double lambda : {0.0, 0.3, 1.0}) {
    const auto r = adv::grad_reverse_backward(up, lambda);
    for (std::size_t i = 0; i < up.size(); ++i) worst = std::max(worst, std::abs(r[i] + lambda * up[i]));
  }
  ok = ok && worst <= 1e-12;
  return {ok, "lambda in {0, 0.3, 1}, max |diff| " + fmtd("%.3g", worst)};
}

// ---------------------------------------------------------------------------
// Small fixture for the training-based invariants.

data::ToyWorldSpec small_spec() {
  data::ToyWorldSpec s;
  s.image_size = 16;
  s.n_train = 24;
  s.n_val = 6;
  s.n_test = 6;
  s.pose_shift.source = {-40.0, 40.0};
  s.pose_shift.target = {-10.0, 10.0};
  s.target_style.tint = {1.0, 0.85, 0.7};
  s.target_style.texture_amp = 0.35;
  s.seed = 77;
  return s;
}

model::ModelConfig small_model() {
  model::ModelConfig m;
  m.stem_width = 4;
  m.encoder_widths = {8, 8, 8};
  m.decoder_width = 8;
  m.fc_hidden = 8;
  return m;
}

train::RegimeConfig small_regime(Regime r, DaMode da, std::uint64_t seed) {
  train::RegimeConfig c;
  c.regime = r;
  c.da_mode = da;
  c.batch_size = 4;
  c.seed = seed;
  c.single = {60, 5, 1e-3, 20, true, true};
  c.stage1 = {40, 5, 1e-3, 20, true, true};
  c.stage2 = {40, 5, 1e-3, 20, true, true};
  c.weights.lambda_adv = 0.1;
  c.discriminator.width = 8;
  c.log_every = 1;
  return c;
}

Outcome freeze_invariance() {
  const auto pd = batch::prepare(data::generate_dataset(small_spec()));
  auto cfg = small_regime(Regime::headfreeze, DaMode::output, 3);
  cfg.stage2 = {500, 5, 1e-3, 100, false, true};
  train::Net net(train::model_config_for(pd.spec, small_model(), 3));
  const auto r = train::train(cfg, pd, net);
  const auto stage2 = r.steps - r.stage1_steps;
  const bool ok = stage2 >= 500 && r.head_checksum_stage1_end == r.head_checksum_final &&
                  r.head_checksum_final == net.checksum(nn::Partition::head);
  char buf[128];
  std::snprintf(buf, sizeof buf, "%lld stage-2 steps, head checksum %016llx -> %016llx", static_cast<long long>(stage2),
                static_cast<unsigned long long>(r.head_checksum_stage1_end),
                static_cast<unsigned long long>(r.head_checksum_final));
  return {ok, buf};
}

bool finite_log(const train::TrainResult& r) {
  std::size_t records = 0;
  for (const auto& rec : r.log) {
    if (rec.contains("total")) {
      ++records;
      if (!std::isfinite(rec["total"].get<double>())) return false;
    }
    if (rec.contains("terms"))
      for (const auto& [k, v] : rec["terms"].items())
        if (!std::isfinite(v.get<double>())) return false;
  }
  return records > 0;
}

Outcome anti_leak() {
  auto pd = batch::prepare(data::generate_dataset(small_spec()));
  const float nan = std::numeric_limits<float>::quiet_NaN();
  for (auto& smp : pd.part(data::Domain::target, data::Split::train)) std::fill(smp.normals.begin(), smp.normals.end(), nan);
  std::string failed;
  int runs = 0;
  for (Regime r : {Regime::baseline, Regime::mtl_src, Regime::mtl_tgt, Regime::mtl_both, Regime::headfreeze}) {
    for (DaMode da : {DaMode::none, DaMode::feature, DaMode::output}) {
      const auto cfg = small_regime(r, da, 4);
      train::Net net(train::model_config_for(pd.spec, small_model(), 4));
      bool ok = false;
      try {
        const auto res = train::train(cfg, pd, net);
        const auto m = train::evaluate(net, pd, data::Domain::target, data::Split::test);
        ok = finite_log(res) && std::isfinite(m.mean_deg) && std::isfinite(m.rmse_deg) && std::isfinite(m.median_deg);
      } catch (const std::exception& e) {
        failed += " " + cfg.name() + "(" + e.what() + ")";
        continue;
      }
      if (!ok) failed += " " + cfg.name();
      ++runs;
    }
  }
  return {failed.empty(), std::to_string(runs) + " regime/DA runs finite" + (failed.empty() ? "" : "; failed:" + failed)};
}

// ---------------------------------------------------------------------------

Outcome generator_consistency() {
  data::ToyWorldSpec spec;
  spec.image_size = 64;
  double worst = 0.0, total = 0.0, exact = 0.0;
  int scenes = 0;
  testing::Coherence coh;
  for (auto d : data::kDomains)
    for (int i = 0; i < 20; ++i) {
      const auto scene = data::regenerate_scene(spec, d, data::Split::train, i);
      const double e = testing::grid_difference_error(scene, spec.image_size);
      exact = std::max(exact, testing::finite_difference_error(scene, spec.image_size));
      worst = std::max(worst, e);
      total += e;
      ++scenes;
      testing::boundary_coherence(data::generate_sample(spec, d, data::Split::train, i), 1.0, coh);
    }
  const double mean = total / scenes;
  return {mean < 2.0 && coh.fraction() >= 0.9,
          "grid-difference error mean " + fmtd("%.4f", mean) + " deg (worst scene " + fmtd("%.4f", worst) +
              ", fine-step worst " + fmtd("%.2g", exact) + "), boundary coherence " + fmtd("%.3f", coh.fraction())};
}

Outcome wasserstein_knob(const run::ExperimentConfig& mismatched, const run::ExperimentConfig& matched) {
  const double wm = diag::label_distribution_report(data::generate_dataset(mismatched.dataset)).wasserstein[2];
  const double wa = diag::label_distribution_report(data::generate_dataset(matched.dataset)).wasserstein[2];
  return {wm > wa, "W1(n_z) mismatched " + fmtd("%.5f", wm) + " vs matched " + fmtd("%.5f", wa)};
}

Outcome determinism() {
  const auto pd = batch::prepare(data::generate_dataset(small_spec()));
  double worst = 0.0;
  int runs = 0;
  std::vector<std::pair<Regime, DaMode>> cases;
  for (Regime r : {Regime::baseline, Regime::mtl_src, Regime::mtl_tgt, Regime::mtl_both, Regime::headfreeze, Regime::oracle})
    cases.emplace_back(r, DaMode::none);
  cases.emplace_back(Regime::baseline, DaMode::feature);
  cases.emplace_back(Regime::headfreeze, DaMode::output);
  cases.emplace_back(Regime::mtl_both, DaMode::multi_level);
  for (const auto& [r, da] : cases) {
    double err[2];
    for (int k = 0; k < 2; ++k) {
      train::Net net(train::model_config_for(pd.spec, small_model(), 8));
      train::train(small_regime(r, da, 8), pd, net);
      err[k] = train::evaluate(net, pd, data::Domain::target, data::Split::test).mean_deg;
    }
    worst = std::max(worst, std::abs(err[0] - err[1]));
    ++runs;
  }
  return {worst <= 1e-6, std::to_string(runs) + " configurations rerun, max |diff| " + fmtd("%.3g", worst) + " deg"};
}

// ---------------------------------------------------------------------------

std::string verdict_line(const run::Claim& c) {
  std::string s = std::string("(") + c.id + ") " + run::to_string(c.verdict);
  for (const auto& ch : c.checks)
    s += "; " + ch.better + " vs " + ch.worse + " margin " + fmtd("%.2f", ch.margin) + " pooled std " +
         fmtd("%.2f", ch.pooled_std);
  return s;
}

double max_run_seconds(const fs::path& dir) {
  double worst = 0.0;
  for (const auto& e : fs::directory_iterator(dir / "runs")) {
    const auto p = e.path() / "metrics.json";
    if (fs::exists(p)) worst = std::max(worst, run::read_json(p).value("seconds", 0.0));
  }
  return worst;
}

Outcome toy_ordering(const run::ExperimentConfig& cfg, const fs::path& dir, bool quiet) {
  run::run_matrix(cfg, dir, quiet);
  const auto claims = run::report({dir});
  const auto& a = claims[0];
  const auto& b = claims[1];
  const double secs = max_run_seconds(dir);
  const bool ok = a.verdict == run::Verdict::holds && b.verdict == run::Verdict::holds && secs <= 600.0;
  return {ok, verdict_line(a) + " | " + verdict_line(b) + " | slowest run " + fmtd("%.0f", secs) + " s"};
}

Outcome matched_da(const run::ExperimentConfig& cfg, const fs::path& dir, bool quiet) {
  run::run_matrix(cfg, dir, quiet);
  const auto claims = run::report({dir});
  const auto& c = claims[2];
  return {c.verdict == run::Verdict::holds, verdict_line(c)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string work_dir = "acceptance";
  std::string config_dir = TADA_CONFIG_DIR;
  std::vector<std::string> only;
  bool verbose = false;
  app.add_option("--work-dir", work_dir, "Directory for experiment matrices (finished runs are reused)");
  app.add_option("--config-dir", config_dir, "Directory holding mismatched.json and matched.json");
  app.add_option("--only", only, "Run only the named criteria");
  app.add_flag("-v,--verbose", verbose, "Print per-run training progress");
  CLI11_PARSE(app, argc, argv);

  run::ExperimentConfig mismatched, matched;
  try {
    mismatched = run::load_config(fs::path(config_dir) / "mismatched.json");
    matched = run::load_config(fs::path(config_dir) / "matched.json");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "cannot load configs: %s\n", e.what());
    return 2;
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metric-oracle", metric_oracle},
      {"gradient-checks", gradient_checks},
      {"gradient-reversal", gradient_reversal},
      {"freeze-invariance", freeze_invariance},
      {"anti-leak", anti_leak},
      {"generator-consistency", generator_consistency},
      {"toy-ordering", [&] { return toy_ordering(mismatched, fs::path(work_dir) / "mismatched", !verbose); }},
      {"matched-da-benefit", [&] { return matched_da(matched, fs::path(work_dir) / "matched", !verbose); }},
      {"distribution-knob", [&] { return wasserstein_knob(mismatched, matched); }},
      {"determinism", determinism},
  };

  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %-22s %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures ? 1 : 0;
}
